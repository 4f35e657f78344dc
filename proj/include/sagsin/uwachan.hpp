#pragma once

// Underwater acoustic tapped-delay line: image-method delays, Ricean LoS tap,
// Rayleigh scattered taps, linear Doppler phase and block-wise delay jitter.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sagsin/common.hpp"

namespace sagsin::uwachan {

enum class TapMode { Override, Formula };

struct UwaConfig {
  double range = 2000.0;        // m
  double depth = 50.0;          // m
  double center_freq = 12000.0; // Hz
  double bandwidth = 3000.0;    // Hz, also the sampling rate
  double sound_speed = 1500.0;  // m/s
  std::size_t n_taps = 6;
  TapMode tap_mode = TapMode::Override;
  double rice_k_db = 6.0;
  double v_rel = 1.5;                 // m/s
  double delay_jitter_sigma = 50e-6;  // s
  std::size_t jitter_block = 100;     // samples per jitter draw
  std::uint64_t seed = 1;

  double sample_rate() const { return bandwidth; }
  double los_delay() const { return range / sound_speed; }
  double max_doppler() const { return v_rel * center_freq / sound_speed; }

  void validate() const {
    auto bad = [](const char* key, const char* why) {
      throw Error(ErrorKind::InvalidConfig, std::string(key) + ": " + why);
    };
    if (!(range > 0)) bad("range", "must be > 0");
    if (!(depth > 0)) bad("depth", "must be > 0");
    if (!(center_freq > 0)) bad("center_freq", "must be > 0");
    if (!(bandwidth > 0)) bad("bandwidth", "must be > 0");
    if (!(sound_speed > 0)) bad("sound_speed", "must be > 0");
    if (n_taps < 1) bad("n_taps", "must be >= 1");
    if (!std::isfinite(rice_k_db)) bad("rice_k_db", "must be finite");
    if (!(v_rel > 0)) bad("v_rel", "must be > 0");
    if (!(delay_jitter_sigma >= 0)) bad("delay_jitter_sigma", "must be >= 0");
    if (jitter_block < 1) bad("jitter_block", "must be >= 1");
  }
};

/// ceil(1 + 2 H f_c / c) in formula mode, the configured count otherwise.
inline std::size_t tap_count(const UwaConfig& cfg) {
  if (cfg.tap_mode == TapMode::Override) return cfg.n_taps;
  return static_cast<std::size_t>(std::ceil(1.0 + 2.0 * cfg.depth * cfg.center_freq / cfg.sound_speed));
}

struct UwaTap {
  double delay = 0;    // s, relative to the LoS arrival
  double power = 0;    // mean power
  double doppler = 0;  // Hz
  Complex gain{};
  bool is_los = false;
};

struct UwaTapSet {
  std::vector<UwaTap> taps;
  double los_delay = 0;  // absolute LoS delay d/c, s
  double max_doppler = 0;

  double total_power() const {
    double p = 0;
    for (const auto& t : taps) p += t.power;
    return p;
  }
};

/// Image-method relative delay of the p-th arrival.
inline double image_delay(const UwaConfig& cfg, std::size_t p) {
  const double d = cfg.range;
  const double z = 2.0 * static_cast<double>(p) * cfg.depth;
  // d^2 + z^2 - d^2 over (sqrt(.) + d) avoids cancellation for small z.
  return z * z / (std::sqrt(d * d + z * z) + d) / cfg.sound_speed;
}

/// Mean powers decaying 3 dB per tap, normalized to sum 1.
inline std::vector<double> tap_powers(std::size_t n) {
  std::vector<double> p(n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += p[i] = db_to_linear(-3.0 * static_cast<double>(i));
  for (auto& v : p) v /= sum;
  return p;
}

/// LoS gain with power `power`: specular part K/(K+1) at a random phase plus
/// diffuse part 1/(K+1).
inline Complex ricean_gain(double power, double k_db, Rng& rng) {
  const double k = db_to_linear(k_db);
  const double spec = std::sqrt(power * k / (k + 1.0));
  return std::polar(spec, uniform(rng, -kPi, kPi)) + complex_normal(rng, power / (k + 1.0));
}

inline UwaTapSet build_tap_set(const UwaConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = tap_count(cfg);
  const auto powers = tap_powers(n);
  UwaTapSet ts;
  ts.los_delay = cfg.los_delay();
  ts.max_doppler = cfg.max_doppler();
  ts.taps.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    UwaTap& t = ts.taps[p];
    t.delay = image_delay(cfg, p);
    t.power = powers[p];
    t.is_los = p == 0;
    t.gain = t.is_los ? ricean_gain(t.power, cfg.rice_k_db, rng) : complex_normal(rng, t.power);
    t.doppler = uniform(rng, -ts.max_doppler, ts.max_doppler);
  }
  return ts;
}

/// Moment-based Ricean K from samples of a tap gain: with Ga = E|a|^2 and
/// Gv = Var|a|^2, K = sqrt(Ga^2 - Gv) / (Ga - sqrt(Ga^2 - Gv)).
inline double estimate_k(std::span<const Complex> gains) {
  require(gains.size() >= 2, ErrorKind::InvalidInput, "estimate_k: need at least two samples");
  double m1 = 0, m2 = 0;
  for (const auto& g : gains) {
    const double p = std::norm(g);
    m1 += p;
    m2 += p * p;
  }
  const double n = static_cast<double>(gains.size());
  m1 /= n;
  m2 /= n;
  const double var = m2 - m1 * m1;
  const double root = std::sqrt(std::max(0.0, m1 * m1 - var));
  return root / (m1 - root);
}

/// Per-block, per-tap integer sample delays (delay plus jitter, rounded).
struct Realization {
  std::size_t block = 100;
  std::vector<std::vector<long>> shift;  // [block][tap]

  long shift_at(std::size_t n, std::size_t tap) const { return shift[n / block][tap]; }
};

inline std::size_t max_shift(const Realization& r) {
  long m = 0;
  for (const auto& b : r.shift)
    for (long s : b) m = std::max(m, s);
  return static_cast<std::size_t>(m);
}

/// Jitter draws for `length` output samples.
inline Realization draw_realization(const UwaTapSet& ts, const UwaConfig& cfg, std::size_t length,
                                    Rng& rng) {
  Realization r;
  r.block = cfg.jitter_block;
  const double fs = cfg.sample_rate();
  std::normal_distribution<double> jitter(0.0, 1.0);
  const std::size_t n_blocks = length / r.block + 1;
  r.shift.resize(n_blocks);
  for (auto& b : r.shift) {
    b.resize(ts.taps.size());
    for (std::size_t p = 0; p < ts.taps.size(); ++p) {
      const double d = ts.taps[p].delay + cfg.delay_jitter_sigma * jitter(rng);
      b[p] = std::max(0L, std::lround(d * fs));
    }
  }
  return r;
}

/// Time-varying gain of tap p at sample n (linear Doppler phase).
inline Complex tap_gain(const UwaTap& t, std::size_t n, double fs) {
  return t.gain * std::polar(1.0, kTwoPi * t.doppler * static_cast<double>(n) / fs);
}

/// Noiseless channel output; its length is the input length plus the
/// largest sample delay so every tail sample is kept.
inline std::vector<Complex> propagate(std::span<const Complex> x, const UwaTapSet& ts,
                                      const Realization& r, const UwaConfig& cfg) {
  const double fs = cfg.sample_rate();
  const std::size_t out_len = x.size() + max_shift(r);
  std::vector<Complex> y(out_len);
  for (std::size_t n = 0; n < out_len; ++n) {
    if (n / r.block >= r.shift.size()) break;
    Complex acc{};
    for (std::size_t p = 0; p < ts.taps.size(); ++p) {
      const long s = r.shift_at(n, p);
      if (static_cast<long>(n) < s) continue;
      const std::size_t i = n - static_cast<std::size_t>(s);
      if (i < x.size()) acc += tap_gain(ts.taps[p], n, fs) * x[i];
    }
    y[n] = acc;
  }
  return y;
}

/// Noise variance for unit mean symbol energy through the tap set.
inline double noise_variance(const UwaTapSet& ts, double snr_db) {
  if (snr_db == std::numeric_limits<double>::infinity()) return 0.0;
  return ts.total_power() / db_to_linear(snr_db);
}

inline void add_noise(std::span<Complex> y, double variance, Rng& rng) {
  if (variance <= 0) return;
  for (auto& v : y) v += complex_normal(rng, variance);
}

inline std::vector<Complex> apply_channel(std::span<const Complex> x, const UwaTapSet& ts,
                                          const UwaConfig& cfg, double snr_db, Rng& rng) {
  require(!x.empty(), ErrorKind::InvalidInput, "apply_channel: empty input");
  // Enough blocks to cover the delayed tail as well.
  const std::size_t tail = static_cast<std::size_t>(
      std::ceil((ts.taps.back().delay + 6 * cfg.delay_jitter_sigma) * cfg.sample_rate()));
  const Realization r = draw_realization(ts, cfg, x.size() + tail + 1, rng);
  auto y = propagate(x, ts, r, cfg);
  add_noise(y, noise_variance(ts, snr_db), rng);
  return y;
}

}  // namespace sagsin::uwachan
