#pragma once

// Semantic image link over the underwater channel: DCT-truncation codec,
// 16-bit features, Hamming(7,4), Gray 16-QAM, OFDM with genie ZF, SSIM.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "sagsin/common.hpp"
#include "sagsin/uwachan.hpp"

namespace sagsin::semlink {

inline constexpr std::size_t kImageSize = 512;
inline constexpr std::size_t kFeatureCount = 256;
inline constexpr std::size_t kBitsPerFeature = 16;

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<double> px;  // row-major, 0..255

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), px(w * h, fill) {}
  double& at(std::size_t y, std::size_t x) { return px[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
};

struct FeatureVector {
  std::vector<double> values;
  double min = 0, max = 0;
};

/// Payload bits over raw 8-bit image bits.
inline double payload_ratio(std::size_t features = kFeatureCount, std::size_t bits = kBitsPerFeature,
                            std::size_t side = kImageSize) {
  return static_cast<double>(features * bits) / static_cast<double>(side * side * 8);
}

// ---------------------------------------------------------------------------
// DCT codec

/// JPEG zigzag positions (row, col) of the first `count` coefficients.
inline std::vector<std::pair<std::size_t, std::size_t>> zigzag(std::size_t count, std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; out.size() < count && s < 2 * n - 1; ++s) {
    const std::size_t lo = s < n ? 0 : s - n + 1;
    const std::size_t hi = std::min(s, n - 1);
    for (std::size_t k = lo; k <= hi && out.size() < count; ++k) {
      const std::size_t row = (s % 2 == 0) ? s - k : k;  // even diagonals climb, odd ones descend
      out.emplace_back(row, s - row);
    }
  }
  return out;
}

/// Rows 0..count-1 of the orthonormal type-II DCT matrix of size n.
inline Eigen::MatrixXd dct_rows(std::size_t count, std::size_t n) {
  Eigen::MatrixXd c(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(n));
  const double nn = static_cast<double>(n);
  for (std::size_t u = 0; u < count; ++u) {
    const double a = u == 0 ? std::sqrt(1.0 / nn) : std::sqrt(2.0 / nn);
    for (std::size_t x = 0; x < n; ++x)
      c(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(x)) =
          a * std::cos(kPi * (2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(u) / (2.0 * nn));
  }
  return c;
}

namespace detail {

struct Codec {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  std::size_t block = 0;  // low-frequency square that contains every kept index
  Eigen::MatrixXd c;      // block x kImageSize

  Codec() : order(zigzag(kFeatureCount, kImageSize)) {
    for (const auto& [r, col] : order) block = std::max({block, r + 1, col + 1});
    c = dct_rows(block, kImageSize);
  }
};

inline const Codec& codec() {
  static const Codec k;
  return k;
}

inline Eigen::MatrixXd as_matrix(const GrayImage& img) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(img.height), static_cast<Eigen::Index>(img.width));
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      m(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) = img.at(y, x);
  return m;
}

}  // namespace detail

inline FeatureVector encode_image(const GrayImage& img) {
  require(img.width == kImageSize && img.height == kImageSize && img.px.size() == kImageSize * kImageSize,
          ErrorKind::DimensionMismatch, "encode_image: expected a 512x512 image");
  const auto& k = detail::codec();
  const Eigen::MatrixXd f = k.c * detail::as_matrix(img) * k.c.transpose();
  FeatureVector fv;
  fv.values.reserve(kFeatureCount);
  for (const auto& [r, col] : k.order) fv.values.push_back(f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)));
  const auto [lo, hi] = std::minmax_element(fv.values.begin(), fv.values.end());
  fv.min = *lo;
  fv.max = *hi;
  return fv;
}

/// Inverse DCT with discarded coefficients at zero, clamped to [0, 255].
inline GrayImage decode_image(const FeatureVector& fv) {
  require(fv.values.size() == kFeatureCount, ErrorKind::DimensionMismatch,
          "decode_image: expected 256 features");
  const auto& k = detail::codec();
  const auto b = static_cast<Eigen::Index>(k.block);
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(b, b);
  for (std::size_t i = 0; i < k.order.size(); ++i)
    f(static_cast<Eigen::Index>(k.order[i].first), static_cast<Eigen::Index>(k.order[i].second)) = fv.values[i];
  const Eigen::MatrixXd m = k.c.transpose() * f * k.c;
  GrayImage img(kImageSize, kImageSize);
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x)
      img.at(y, x) = std::clamp(m(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)), 0.0, 255.0);
  return img;
}

// ---------------------------------------------------------------------------
// Quantization and bits

inline constexpr double kQuantLevels = 65535.0;

inline std::vector<std::uint16_t> quantize_features(const FeatureVector& fv) {
  const double span = fv.max - fv.min;
  std::vector<std::uint16_t> q;
  q.reserve(fv.values.size());
  for (double v : fv.values) {
    const double t = span > 0 ? (v - fv.min) / span : 0.0;
    q.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(t, 0.0, 1.0) * kQuantLevels)));
  }
  return q;
}

inline FeatureVector dequantize_features(std::span<const std::uint16_t> q, double min, double max) {
  FeatureVector fv;
  fv.min = min;
  fv.max = max;
  for (auto v : q) fv.values.push_back(min + (max - min) * static_cast<double>(v) / kQuantLevels);
  return fv;
}

inline double quantization_step(const FeatureVector& fv) { return (fv.max - fv.min) / kQuantLevels; }

/// MSB-first bit expansion of 16-bit words.
inline std::vector<std::uint8_t> to_bits(std::span<const std::uint16_t> words) {
  std::vector<std::uint8_t> bits;
  bits.reserve(words.size() * 16);
  for (auto w : words)
    for (int b = 15; b >= 0; --b) bits.push_back(static_cast<std::uint8_t>((w >> b) & 1u));
  return bits;
}

inline std::vector<std::uint16_t> from_bits(std::span<const std::uint8_t> bits) {
  require(bits.size() % 16 == 0, ErrorKind::InvalidInput, "from_bits: length not a multiple of 16");
  std::vector<std::uint16_t> words(bits.size() / 16, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    words[i / 16] = static_cast<std::uint16_t>((words[i / 16] << 1) | (bits[i] & 1u));
  return words;
}

// ---------------------------------------------------------------------------
// Hamming(7,4), positional layout: bit i of the codeword is position i+1;
// parities sit at positions 1, 2, 4 so the syndrome names the flipped bit.

inline std::uint8_t hamming_encode(std::uint8_t nibble) {
  const std::uint8_t d1 = (nibble >> 3) & 1, d2 = (nibble >> 2) & 1, d3 = (nibble >> 1) & 1, d4 = nibble & 1;
  const std::uint8_t p1 = d1 ^ d2 ^ d4, p2 = d1 ^ d3 ^ d4, p4 = d2 ^ d3 ^ d4;
  // positions 1..7: p1 p2 d1 p4 d2 d3 d4
  const std::array<std::uint8_t, 7> pos{p1, p2, d1, p4, d2, d3, d4};
  std::uint8_t cw = 0;
  for (std::size_t i = 0; i < 7; ++i) cw = static_cast<std::uint8_t>(cw | (pos[i] << i));
  return cw;
}

inline std::uint8_t hamming_syndrome(std::uint8_t cw) {
  std::uint8_t s = 0;
  for (std::uint8_t p = 1; p <= 7; ++p)
    if ((cw >> (p - 1)) & 1) s ^= p;
  return s;
}

/// Corrects up to one flipped bit and returns the 4 data bits.
inline std::uint8_t hamming_decode(std::uint8_t cw) {
  const std::uint8_t s = hamming_syndrome(cw);
  if (s != 0) cw = static_cast<std::uint8_t>(cw ^ (1u << (s - 1)));
  auto bit = [&](int pos) { return static_cast<std::uint8_t>((cw >> (pos - 1)) & 1); };
  return static_cast<std::uint8_t>((bit(3) << 3) | (bit(5) << 2) | (bit(6) << 1) | bit(7));
}

inline std::vector<std::uint8_t> hamming_encode_bits(std::span<const std::uint8_t> bits) {
  require(bits.size() % 4 == 0, ErrorKind::InvalidInput, "hamming: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(bits.size() / 4 * 7);
  for (std::size_t i = 0; i < bits.size(); i += 4) {
    const auto n = static_cast<std::uint8_t>((bits[i] << 3) | (bits[i + 1] << 2) | (bits[i + 2] << 1) | bits[i + 3]);
    const std::uint8_t cw = hamming_encode(n);
    for (int p = 0; p < 7; ++p) out.push_back((cw >> p) & 1);
  }
  return out;
}

inline std::vector<std::uint8_t> hamming_decode_bits(std::span<const std::uint8_t> bits) {
  require(bits.size() % 7 == 0, ErrorKind::InvalidInput, "hamming: length not a multiple of 7");
  std::vector<std::uint8_t> out;
  out.reserve(bits.size() / 7 * 4);
  for (std::size_t i = 0; i < bits.size(); i += 7) {
    std::uint8_t cw = 0;
    for (int p = 0; p < 7; ++p) cw = static_cast<std::uint8_t>(cw | ((bits[i + p] & 1) << p));
    const std::uint8_t n = hamming_decode(cw);
    for (int b = 3; b >= 0; --b) out.push_back((n >> b) & 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gray 16-QAM, unit average energy. Bits (b0 b1) pick I, (b2 b3) pick Q.

inline const double kQamNorm = std::sqrt(10.0);

inline double gray_level(std::uint8_t b0, std::uint8_t b1) {
  // 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3
  if (b0 == 0) return b1 == 0 ? -3.0 : -1.0;
  return b1 == 1 ? 1.0 : 3.0;
}

inline std::pair<std::uint8_t, std::uint8_t> gray_bits(double v) {
  if (v < -2.0) return {0, 0};
  if (v < 0.0) return {0, 1};
  if (v < 2.0) return {1, 1};
  return {1, 0};
}

inline std::vector<Complex> qam16_map(std::span<const std::uint8_t> bits) {
  require(bits.size() % 4 == 0, ErrorKind::InvalidInput, "qam16_map: length not a multiple of 4");
  std::vector<Complex> s;
  s.reserve(bits.size() / 4);
  for (std::size_t i = 0; i < bits.size(); i += 4)
    s.emplace_back(gray_level(bits[i], bits[i + 1]) / kQamNorm, gray_level(bits[i + 2], bits[i + 3]) / kQamNorm);
  return s;
}

inline std::vector<std::uint8_t> qam16_demap(std::span<const Complex> symbols) {
  std::vector<std::uint8_t> bits;
  bits.reserve(symbols.size() * 4);
  for (const auto& z : symbols) {
    const auto [a, b] = gray_bits(z.real() * kQamNorm);
    const auto [c, d] = gray_bits(z.imag() * kQamNorm);
    bits.insert(bits.end(), {a, b, c, d});
  }
  return bits;
}

inline double q_function(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

/// Gray 16-QAM bit error rate over AWGN at Es/N0 = snr_db.
inline double qam16_ber(double snr_db) {
  const double a = std::sqrt(db_to_linear(snr_db) / 5.0);
  return (3.0 * q_function(a) + 2.0 * q_function(3.0 * a) - q_function(5.0 * a)) / 4.0;
}

/// Monte-Carlo 16-QAM BER over AWGN with unit symbol energy.
inline double qam16_awgn_ber(double snr_db, std::size_t n_bits, Rng& rng) {
  n_bits -= n_bits % 4;
  std::vector<std::uint8_t> bits(n_bits);
  std::bernoulli_distribution coin(0.5);
  for (auto& b : bits) b = coin(rng) ? 1 : 0;
  auto sym = qam16_map(bits);
  const double var = 1.0 / db_to_linear(snr_db);
  for (auto& s : sym) s += complex_normal(rng, var);
  const auto back = qam16_demap(sym);
  std::size_t errors = 0;
  for (std::size_t i = 0; i < n_bits; ++i) errors += back[i] != bits[i];
  return static_cast<double>(errors) / static_cast<double>(n_bits);
}

// ---------------------------------------------------------------------------
// OFDM link

enum class Equalizer { BlockZf, OneTapZf };

struct LinkBudget {
  std::size_t bits_per_feature = kBitsPerFeature;
  std::size_t subcarriers = 64;
  std::size_t cp_length = 0;  // samples
  Equalizer equalizer = Equalizer::BlockZf;
  bool interleave = true;  // spread each codeword over 7 distant symbols
};

/// Cyclic prefix covering the largest tap delay plus six jitter deviations.
inline LinkBudget make_budget(const uwachan::UwaConfig& cfg) {
  LinkBudget b;
  const double max_delay = uwachan::image_delay(cfg, uwachan::tap_count(cfg) - 1);
  b.cp_length = static_cast<std::size_t>(std::ceil((max_delay + 6.0 * cfg.delay_jitter_sigma) * cfg.sample_rate()));
  return b;
}

/// Orthonormal DFT matrix F (X = F x).
inline Eigen::MatrixXcd dft_matrix(std::size_t n) {
  Eigen::MatrixXcd f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t t = 0; t < n; ++t)
      f(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t)) =
          std::polar(norm, -kTwoPi * static_cast<double>(k * t % n) / static_cast<double>(n));
  return f;
}

inline std::vector<Complex> ofdm_modulate(std::span<const Complex> symbols, const LinkBudget& b) {
  const std::size_t n = b.subcarriers;
  require(symbols.size() % n == 0, ErrorKind::InvalidInput, "ofdm: symbol count not a multiple of subcarriers");
  const Eigen::MatrixXcd fh = dft_matrix(n).adjoint();
  std::vector<Complex> out;
  out.reserve(symbols.size() / n * (n + b.cp_length));
  for (std::size_t i = 0; i < symbols.size(); i += n) {
    Eigen::VectorXcd x(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) x(static_cast<Eigen::Index>(k)) = symbols[i + k];
    const Eigen::VectorXcd t = fh * x;
    for (std::size_t c = 0; c < b.cp_length; ++c)
      out.push_back(t(static_cast<Eigen::Index>((n - b.cp_length % n + c) % n)));
    for (Eigen::Index k = 0; k < t.size(); ++k) out.push_back(t(k));
  }
  return out;
}

/// Genie equalization of received OFDM blocks using the exact realization.
/// BlockZf inverts each block's full 64x64 time-varying channel; OneTapZf
/// divides by the frequency response frozen at the block centre.
inline std::vector<Complex> ofdm_equalize(std::span<const Complex> rx, std::size_t n_blocks,
                                          const LinkBudget& b, const uwachan::UwaTapSet& ts,
                                          const uwachan::Realization& r, const uwachan::UwaConfig& cfg) {
  const std::size_t n = b.subcarriers;
  const std::size_t len = n + b.cp_length;
  const double fs = cfg.sample_rate();
  const Eigen::MatrixXcd f = dft_matrix(n);
  std::vector<Complex> out;
  out.reserve(n_blocks * n);
  for (std::size_t blk = 0; blk < n_blocks; ++blk) {
    const std::size_t body = blk * len + b.cp_length;
    Eigen::VectorXcd y(static_cast<Eigen::Index>(n));
    for (std::size_t t = 0; t < n; ++t) y(static_cast<Eigen::Index>(t)) = rx[body + t];

    Eigen::VectorXcd xf;
    if (b.equalizer == Equalizer::BlockZf) {
      // y = G x_body with cyclic indexing thanks to the prefix.
      Eigen::MatrixXcd g = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t abs = body + t;
        for (std::size_t p = 0; p < ts.taps.size(); ++p) {
          const long s = r.shift_at(abs, p);
          const std::size_t col = static_cast<std::size_t>(((static_cast<long>(t) - s) % static_cast<long>(n) + static_cast<long>(n)) % static_cast<long>(n));
          g(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(col)) += uwachan::tap_gain(ts.taps[p], abs, fs);
        }
      }
      xf = f * g.partialPivLu().solve(y);
    } else {
      const std::size_t mid = body + n / 2;
      const Eigen::VectorXcd yf = f * y;
      xf.resize(static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        Complex h{};
        for (std::size_t p = 0; p < ts.taps.size(); ++p)
          h += uwachan::tap_gain(ts.taps[p], mid, fs) *
               std::polar(1.0, -kTwoPi * static_cast<double>(k) * static_cast<double>(r.shift_at(mid, p)) /
                                   static_cast<double>(n));
        xf(static_cast<Eigen::Index>(k)) = std::abs(h) > 0 ? yf(static_cast<Eigen::Index>(k)) / h : Complex{};
      }
    }
    for (Eigen::Index k = 0; k < xf.size(); ++k) out.push_back(xf(k));
  }
  return out;
}

/// Coded bits through 16-QAM OFDM and the channel; returns hard-decided coded bits.
inline std::vector<std::uint8_t> transmit_coded_bits(std::span<const std::uint8_t> coded, const LinkBudget& b,
                                                     const uwachan::UwaTapSet& ts, const uwachan::UwaConfig& cfg,
                                                     double snr_db, Rng& rng) {
  const std::size_t per_block = 4 * b.subcarriers;
  std::vector<std::uint8_t> padded(coded.begin(), coded.end());
  padded.resize((padded.size() + per_block - 1) / per_block * per_block, 0);
  const auto symbols = qam16_map(padded);
  const auto tx = ofdm_modulate(symbols, b);
  const std::size_t n_blocks = symbols.size() / b.subcarriers;

  const uwachan::Realization r = uwachan::draw_realization(ts, cfg, tx.size() + b.cp_length + 1, rng);
  require(uwachan::max_shift(r) <= b.cp_length, ErrorKind::InvalidConfig,
          "cp_length: shorter than the channel delay spread");
  auto rx = uwachan::propagate(tx, ts, r, cfg);
  uwachan::add_noise(rx, uwachan::noise_variance(ts, snr_db), rng);

  const auto eq = ofdm_equalize(rx, n_blocks, b, ts, r, cfg);
  auto bits = qam16_demap(eq);
  bits.resize(coded.size());
  return bits;
}

/// Row-column interleaver: bit p of codeword c moves to p * n_cw + c, so the
/// four bits of a 16-QAM symbol come from four different codewords.
inline std::vector<std::uint8_t> interleave_bits(std::span<const std::uint8_t> coded, std::size_t depth = 7) {
  require(coded.size() % depth == 0, ErrorKind::InvalidInput, "interleave: length not a multiple of the depth");
  const std::size_t n = coded.size() / depth;
  std::vector<std::uint8_t> out(coded.size());
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t p = 0; p < depth; ++p) out[p * n + c] = coded[c * depth + p];
  return out;
}

inline std::vector<std::uint8_t> deinterleave_bits(std::span<const std::uint8_t> bits, std::size_t depth = 7) {
  require(bits.size() % depth == 0, ErrorKind::InvalidInput, "deinterleave: length not a multiple of the depth");
  const std::size_t n = bits.size() / depth;
  std::vector<std::uint8_t> out(bits.size());
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t p = 0; p < depth; ++p) out[c * depth + p] = bits[p * n + c];
  return out;
}

/// Full semantic link; side information (min, max) arrives intact.
inline FeatureVector transmit(const FeatureVector& fv, const LinkBudget& b, const uwachan::UwaTapSet& ts,
                              const uwachan::UwaConfig& cfg, double snr_db, Rng& rng) {
  require(b.bits_per_feature == kBitsPerFeature, ErrorKind::InvalidConfig, "bits_per_feature: only 16 is supported");
  const auto words = quantize_features(fv);
  auto coded = hamming_encode_bits(to_bits(words));
  if (b.interleave) coded = interleave_bits(coded);
  auto rx = transmit_coded_bits(coded, b, ts, cfg, snr_db, rng);
  if (b.interleave) rx = deinterleave_bits(rx);
  return dequantize_features(from_bits(hamming_decode_bits(rx)), fv.min, fv.max);
}

// ---------------------------------------------------------------------------
// SSIM

inline std::vector<double> gaussian_window(std::size_t size = 11, double sigma = 1.5) {
  std::vector<double> w(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double sum = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    sum += w[i] = std::exp(-d * d / (2 * sigma * sigma));
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Mean SSIM over all fully covered 11x11 Gaussian windows (no padding).
inline double ssim(const GrayImage& a, const GrayImage& b) {
  require(a.width == b.width && a.height == b.height, ErrorKind::DimensionMismatch, "ssim: image sizes differ");
  const std::size_t ws = 11;
  require(a.width >= ws && a.height >= ws, ErrorKind::InvalidInput, "ssim: image smaller than the window");
  const auto w = gaussian_window(ws, 1.5);
  const double c1 = std::pow(0.01 * 255.0, 2), c2 = std::pow(0.03 * 255.0, 2);
  const std::size_t ow = a.width - ws + 1, oh = a.height - ws + 1;

  // Separable filter of one field: rows first, then columns.
  auto filter = [&](auto&& field) {
    std::vector<double> tmp(a.height * ow), out(oh * ow);
    for (std::size_t y = 0; y < a.height; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < ws; ++k) s += w[k] * field(y, x + k);
        tmp[y * ow + x] = s;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (std::size_t k = 0; k < ws; ++k) s += w[k] * tmp[(y + k) * ow + x];
        out[y * ow + x] = s;
      }
    return out;
  };
  const auto mu_a = filter([&](std::size_t y, std::size_t x) { return a.at(y, x); });
  const auto mu_b = filter([&](std::size_t y, std::size_t x) { return b.at(y, x); });
  const auto aa = filter([&](std::size_t y, std::size_t x) { return a.at(y, x) * a.at(y, x); });
  const auto bb = filter([&](std::size_t y, std::size_t x) { return b.at(y, x) * b.at(y, x); });
  const auto ab = filter([&](std::size_t y, std::size_t x) { return a.at(y, x) * b.at(y, x); });

  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = aa[i] - ma * ma, vb = bb[i] - mb * mb, cov = ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------------------
// Corpus and curve

/// Smooth synthetic scene: a gradient, Gaussian blobs, a soft-edged disc
/// and a low-frequency grating, rounded to 8 bits.
inline GrayImage synthetic_image(Rng& rng, std::size_t size = kImageSize) {
  GrayImage img(size, size);
  const double n = static_cast<double>(size);
  const double gx = uniform(rng, -60, 60), gy = uniform(rng, -60, 60), base = uniform(rng, 80, 170);
  struct Blob { double cx, cy, r, amp; };
  std::vector<Blob> blobs(3 + static_cast<std::size_t>(uniform(rng, 0, 4)));
  for (auto& b : blobs) b = {uniform(rng, 0, n), uniform(rng, 0, n), uniform(rng, 40, 140), uniform(rng, -70, 70)};
  const double dcx = uniform(rng, 0.25 * n, 0.75 * n), dcy = uniform(rng, 0.25 * n, 0.75 * n);
  const double dr = uniform(rng, 50, 130), damp = uniform(rng, -50, 50), soft = uniform(rng, 8, 20);
  const double fx = uniform(rng, 0.5, 4.0), fy = uniform(rng, 0.5, 4.0), gamp = uniform(rng, 5, 20);
  const double ph = uniform(rng, 0, kTwoPi);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / n, v = static_cast<double>(y) / n;
      double val = base + gx * (u - 0.5) + gy * (v - 0.5);
      for (const auto& b : blobs) {
        const double dx = static_cast<double>(x) - b.cx, dy = static_cast<double>(y) - b.cy;
        val += b.amp * std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
      }
      const double dd = std::hypot(static_cast<double>(x) - dcx, static_cast<double>(y) - dcy);
      val += damp / (1.0 + std::exp((dd - dr) / soft));
      val += gamp * std::sin(kTwoPi * (fx * u + fy * v) + ph);
      img.at(y, x) = std::round(std::clamp(val, 0.0, 255.0));
    }
  return img;
}

inline std::vector<GrayImage> make_corpus(std::size_t count, std::uint64_t seed) {
  std::vector<GrayImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, 0x696d67ull + i);
    out.push_back(synthetic_image(rng));
  }
  return out;
}

struct SsimCurve {
  std::vector<double> snr_db, mean, std_error;
  double ceiling = 0;  // mean noise-free codec SSIM
};

inline SsimCurve ssim_vs_snr_curve(std::span<const GrayImage> corpus, std::span<const double> snr_grid,
                                   std::size_t trials, const uwachan::UwaConfig& cfg, const LinkBudget& budget,
                                   std::uint64_t seed) {
  require(corpus.size() >= 50, ErrorKind::InvalidInput, "ssim_vs_snr_curve: at least 50 images required");
  require(trials >= 5, ErrorKind::InvalidInput, "ssim_vs_snr_curve: at least 5 trials per point required");
  SsimCurve c;
  c.snr_db.assign(snr_grid.begin(), snr_grid.end());
  std::vector<FeatureVector> feats;
  for (const auto& img : corpus) {
    feats.push_back(encode_image(img));
    c.ceiling += ssim(decode_image(feats.back()), img);
  }
  c.ceiling /= static_cast<double>(corpus.size());

  for (std::size_t s = 0; s < snr_grid.size(); ++s) {
    double sum = 0, sum2 = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i)
      for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = make_rng(seed, (s * corpus.size() + i) * trials + t);
        const auto ts = uwachan::build_tap_set(cfg, rng);
        const auto rx = transmit(feats[i], budget, ts, cfg, snr_grid[s], rng);
        const double v = ssim(decode_image(rx), corpus[i]);
        sum += v;
        sum2 += v * v;
        ++count;
      }
    const double n = static_cast<double>(count);
    const double mean = sum / n;
    c.mean.push_back(mean);
    c.std_error.push_back(std::sqrt(std::max(0.0, sum2 / n - mean * mean) / (n - 1)));
  }
  return c;
}

}  // namespace sagsin::semlink
