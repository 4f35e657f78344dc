#pragma once

// Off-grid delay-Doppler channel frames for an n_tx-element LEO array
// serving an n_port linear fluid antenna.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "sagsin/common.hpp"

namespace sagsin::ddchan {

struct DdConfig {
  std::size_t n_delay = 64;
  std::size_t n_doppler = 64;
  double subcarrier_spacing = 1000.0;  // Hz
  std::size_t n_tx = 64;               // 8x8 array folded to one steering axis
  std::size_t n_port = 16;
  double carrier_freq = 3.0e10;        // Hz
  std::optional<double> port_spacing;  // wavelengths; default 2 / (n_port - 1)
  std::size_t n_paths = 6;
  double max_doppler = 7000.0;  // Hz
  double rice_k_db = 6.0;
  std::size_t frame_count = 70;
  std::size_t lookback = 50;
  std::size_t horizon = 20;
  double temporal_rho = 0.99;
  double doppler_drift = 0.5;    // max |d nu / d frame|, Hz per frame
  double los_phase_step = 0.1;   // max |LoS phase increment|, rad per frame
  std::uint64_t seed = 1;

  /// Reduced-size profile used by tests and the default CLI runs.
  static DdConfig desk() {
    DdConfig c;
    c.n_delay = 16;
    c.n_doppler = 16;
    c.n_tx = 8;
    c.n_port = 4;
    c.frame_count = 200;
    return c;
  }
  static DdConfig paper() { return DdConfig{}; }

  double spacing() const {
    if (port_spacing) return *port_spacing;
    return n_port > 1 ? 2.0 / static_cast<double>(n_port - 1) : 0.0;
  }
  /// Delay-index scale B: tau * B is the delay bin.
  double delay_scale() const { return static_cast<double>(n_delay) * subcarrier_spacing; }
  /// Doppler-index scale T_f: nu * T_f is the Doppler bin offset.
  double doppler_scale() const { return 1.0 / subcarrier_spacing; }
  double max_delay() const { return 1.0 / subcarrier_spacing; }
  double frame_period() const { return static_cast<double>(n_doppler) / subcarrier_spacing; }
  std::size_t dd_size() const { return n_delay * n_doppler; }
  std::size_t frame_size() const { return n_port * n_tx * dd_size(); }

  void validate() const {
    auto bad = [](const char* key, const std::string& why) {
      throw Error(ErrorKind::InvalidConfig, std::string(key) + ": " + why);
    };
    if (n_delay < 1) bad("n_delay", "must be >= 1");
    if (n_doppler < 1) bad("n_doppler", "must be >= 1");
    if (n_tx < 1) bad("n_tx", "must be >= 1");
    if (n_port < 1) bad("n_port", "must be >= 1");
    if (n_paths < 1) bad("n_paths", "must be >= 1");
    if (!(subcarrier_spacing > 0)) bad("subcarrier_spacing", "must be > 0");
    if (!(carrier_freq > 0)) bad("carrier_freq", "must be > 0");
    if (port_spacing && !(*port_spacing >= 0)) bad("port_spacing", "must be >= 0");
    if (!(max_doppler >= 0)) bad("max_doppler", "must be >= 0");
    if (!(max_doppler < static_cast<double>(n_doppler) * subcarrier_spacing / 2.0))
      bad("max_doppler", "Doppler spread must fit the lattice (< n_doppler*subcarrier_spacing/2)");
    // rho = 1 is accepted as the frozen-channel limit.
    if (!(temporal_rho >= 0.0 && temporal_rho <= 1.0)) bad("temporal_rho", "must lie in [0, 1]");
    if (!(doppler_drift >= 0)) bad("doppler_drift", "must be >= 0");
    if (!(los_phase_step >= 0)) bad("los_phase_step", "must be >= 0");
    if (lookback < 1) bad("lookback", "must be >= 1");
    if (horizon < 1) bad("horizon", "must be >= 1");
    if (frame_count < lookback + horizon) bad("frame_count", "must be >= lookback + horizon");
  }
};

struct Path {
  double delay = 0;    // s
  double doppler = 0;  // Hz
  Complex gain{};
  double aod = 0;  // rad, tx steering angle
  double aoa = 0;  // rad, fluid-antenna axis angle
  bool is_los = false;
};

using PathSet = std::vector<Path>;

/// h[port][tx][delay][doppler], stored flat in that order.
struct ChannelFrame {
  std::size_t n_port = 0, n_tx = 0, n_delay = 0, n_doppler = 0;
  std::vector<Complex> h;
  std::size_t frame_index = 0;
  PathSet paths;

  ChannelFrame() = default;
  ChannelFrame(std::size_t ports, std::size_t tx, std::size_t delay, std::size_t doppler)
      : n_port(ports), n_tx(tx), n_delay(delay), n_doppler(doppler),
        h(ports * tx * delay * doppler) {}

  std::size_t dd_size() const { return n_delay * n_doppler; }
  std::size_t port_size() const { return n_tx * dd_size(); }

  Complex& at(std::size_t k, std::size_t a, std::size_t m, std::size_t n) {
    return h[((k * n_tx + a) * n_delay + m) * n_doppler + n];
  }
  const Complex& at(std::size_t k, std::size_t a, std::size_t m, std::size_t n) const {
    return h[((k * n_tx + a) * n_delay + m) * n_doppler + n];
  }
  /// Port k as a row-major [n_tx x (n_delay*n_doppler)] matrix.
  std::span<Complex> port(std::size_t k) { return {h.data() + k * port_size(), port_size()}; }
  std::span<const Complex> port(std::size_t k) const {
    return {h.data() + k * port_size(), port_size()};
  }

  double energy() const {
    double e = 0;
    for (const auto& v : h) e += std::norm(v);
    return e;
  }
  double port_energy(std::size_t k) const {
    double e = 0;
    for (const auto& v : port(k)) e += std::norm(v);
    return e;
  }
};

/// Periodic Dirichlet kernel D_n(x) = (1/n) sum_{k<n} exp(j 2 pi k x / n).
inline Complex dd_kernel(double offset, std::size_t n) {
  const double nd = static_cast<double>(n);
  // D_n has period n; reduce so the removable singularity sits at r = 0.
  const double r = offset - nd * std::round(offset / nd);
  if (std::abs(r) < 1e-13) return {1.0, 0.0};
  const double mag = std::sin(kPi * r) / (nd * std::sin(kPi * r / nd));
  const double phase = kPi * r * (nd - 1.0) / nd;
  // The phase factor of D_n(r) and D_n(offset) agree because D_n is n-periodic.
  return std::polar(mag, phase);
}

inline double rice_k_linear(double k_db) { return db_to_linear(std::min(k_db, 60.0)); }

/// Mean powers of the n_paths entries: LoS first, then exponentially
/// decaying scattered powers (3 dB per path). Total is 1.
inline std::vector<double> path_mean_powers(const DdConfig& cfg) {
  std::vector<double> p(cfg.n_paths, 0.0);
  if (cfg.n_paths == 1) {
    p[0] = 1.0;
    return p;
  }
  const double k = rice_k_linear(cfg.rice_k_db);
  p[0] = k / (k + 1.0);
  double sum = 0;
  for (std::size_t i = 1; i < cfg.n_paths; ++i) {
    p[i] = std::pow(10.0, -0.3 * static_cast<double>(i - 1));
    sum += p[i];
  }
  for (std::size_t i = 1; i < cfg.n_paths; ++i) p[i] *= (1.0 / (k + 1.0)) / sum;
  return p;
}

inline PathSet sample_path_set(const DdConfig& cfg, Rng& rng) {
  require(cfg.n_paths > 0, ErrorKind::InvalidConfig, "n_paths: must be >= 1");
  const auto powers = path_mean_powers(cfg);
  PathSet paths(cfg.n_paths);
  for (std::size_t p = 0; p < cfg.n_paths; ++p) {
    Path& path = paths[p];
    path.is_los = (p == 0);
    path.delay = uniform(rng, 0.0, cfg.max_delay());
    path.doppler = uniform(rng, -cfg.max_doppler, cfg.max_doppler);
    path.aod = uniform(rng, -kPi / 2, kPi / 2);
    path.aoa = uniform(rng, -kPi / 2, kPi / 2);
    if (path.is_los) {
      path.gain = std::polar(std::sqrt(powers[p]), uniform(rng, -kPi, kPi));
    } else {
      path.gain = complex_normal(rng, powers[p]);
    }
  }
  return paths;
}

/// Sums every path's separable response into a full frame.
inline ChannelFrame render_frame(const PathSet& paths, const DdConfig& cfg,
                                 std::size_t frame_index) {
  ChannelFrame f(cfg.n_port, cfg.n_tx, cfg.n_delay, cfg.n_doppler);
  f.frame_index = frame_index;
  f.paths = paths;
  const double spacing = cfg.spacing();
  const double centre = static_cast<double>(cfg.n_doppler / 2);

  std::vector<Complex> port_f(cfg.n_port), tx_f(cfg.n_tx), delay_f(cfg.n_delay),
      doppler_f(cfg.n_doppler), dd(cfg.dd_size());
  for (const Path& p : paths) {
    for (std::size_t k = 0; k < cfg.n_port; ++k)
      port_f[k] = std::polar(1.0, kTwoPi * static_cast<double>(k) * spacing * std::sin(p.aoa));
    for (std::size_t a = 0; a < cfg.n_tx; ++a)
      tx_f[a] = std::polar(1.0, kPi * static_cast<double>(a) * std::sin(p.aod));
    const double tau_bins = p.delay * cfg.delay_scale();
    const double nu_bins = p.doppler * cfg.doppler_scale();
    for (std::size_t m = 0; m < cfg.n_delay; ++m)
      delay_f[m] = dd_kernel(static_cast<double>(m) - tau_bins, cfg.n_delay);
    for (std::size_t n = 0; n < cfg.n_doppler; ++n)
      doppler_f[n] = dd_kernel(static_cast<double>(n) - centre - nu_bins, cfg.n_doppler);
    for (std::size_t m = 0; m < cfg.n_delay; ++m)
      for (std::size_t n = 0; n < cfg.n_doppler; ++n)
        dd[m * cfg.n_doppler + n] = delay_f[m] * doppler_f[n];

    Complex* out = f.h.data();
    for (std::size_t k = 0; k < cfg.n_port; ++k) {
      for (std::size_t a = 0; a < cfg.n_tx; ++a) {
        const Complex w = p.gain * port_f[k] * tx_f[a];
        for (std::size_t i = 0; i < dd.size(); ++i) *out++ += w * dd[i];
      }
    }
  }
  return f;
}

inline bool satisfies_invariants(const ChannelFrame& f) {
  for (const auto& v : f.h)
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
  bool all_zero_gain = true;
  for (const auto& p : f.paths)
    if (p.gain != Complex{}) all_zero_gain = false;
  return all_zero_gain || f.energy() > 0;
}

/// Steps a path set through time: Gauss-Markov scattered gains, a fixed LoS
/// phase rotation, linearly drifting Dopplers and Doppler-consistent delays.
class SequenceGenerator {
 public:
  SequenceGenerator(const DdConfig& cfg, Rng& rng)
      : cfg_(cfg), powers_(path_mean_powers(cfg)), paths_(sample_path_set(cfg, rng)) {
    drift_.resize(cfg.n_paths);
    for (auto& d : drift_) d = uniform(rng, -cfg.doppler_drift, cfg.doppler_drift);
    los_step_ = uniform(rng, -cfg.los_phase_step, cfg.los_phase_step);
  }

  const PathSet& paths() const { return paths_; }
  std::size_t index() const { return index_; }

  ChannelFrame current() const { return render_frame(paths_, cfg_, index_); }

  void advance(Rng& rng) {
    const double rho = cfg_.temporal_rho;
    const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho));
    for (std::size_t p = 0; p < paths_.size(); ++p) {
      Path& path = paths_[p];
      if (path.is_los) {
        path.gain *= std::polar(1.0, los_step_);
      } else {
        path.gain = rho * path.gain + innov * complex_normal(rng, powers_[p]);
      }
      path.delay -= path.doppler * cfg_.frame_period() / cfg_.carrier_freq;
      path.delay -= cfg_.max_delay() * std::floor(path.delay / cfg_.max_delay());
      path.doppler = std::clamp(path.doppler + drift_[p], -cfg_.max_doppler, cfg_.max_doppler);
    }
    ++index_;
  }

 private:
  DdConfig cfg_;
  std::vector<double> powers_;
  PathSet paths_;
  std::vector<double> drift_;
  double los_step_ = 0;
  std::size_t index_ = 0;
};

inline std::vector<ChannelFrame> evolve_sequence(const DdConfig& cfg, Rng& rng) {
  cfg.validate();
  SequenceGenerator gen(cfg, rng);
  std::vector<ChannelFrame> frames;
  frames.reserve(cfg.frame_count);
  for (std::size_t t = 0; t < cfg.frame_count; ++t) {
    if (t > 0) gen.advance(rng);
    frames.push_back(gen.current());
  }
  return frames;
}

}  // namespace sagsin::ddchan
