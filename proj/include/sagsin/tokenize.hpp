#pragma once

// Integer token codec for windows of compressed frames: per-frame real
// interleaving, delta coding across frames, 8-bit quantization and a
// trailing query token.

#include <cstdint>
#include <span>
#include <vector>

#include "sagsin/common.hpp"
#include "sagsin/compress.hpp"

namespace sagsin::tokenize {

using compress::CompressedFrame;

inline constexpr std::uint16_t kQueryToken = 256;
inline constexpr std::uint16_t kZeroDelta = 127;
inline constexpr double kStep = 2.0 / 255.0;

struct TokenStream {
  std::vector<std::uint16_t> tokens;
  std::size_t window_len = 0;
  std::vector<double> scales;  // one per frame
};

inline std::size_t stream_length(std::size_t window_len, std::size_t coeff_len) {
  return window_len * 2 * coeff_len + 1;
}

/// Clamps to [-1, 1] and rounds half-up onto the grid (q - 127) * 2/255.
inline std::uint16_t quantize(double delta) {
  const double d = std::clamp(delta, -1.0, 1.0);
  const double level = std::floor(d / kStep + 0.5) + kZeroDelta;
  return static_cast<std::uint16_t>(std::clamp(level, 0.0, 255.0));
}

inline double dequantize(std::uint16_t q) {
  return (static_cast<double>(q) - kZeroDelta) * kStep;
}

inline TokenStream encode_window(std::span<const CompressedFrame> frames) {
  require(!frames.empty(), ErrorKind::InvalidInput, "encode_window: empty window");
  const std::size_t coeff_len = frames.front().coeffs.size();
  TokenStream ts;
  ts.window_len = frames.size();
  ts.tokens.reserve(stream_length(frames.size(), coeff_len));
  // Deltas are taken against the decoder's running reconstruction so that
  // quantization error does not accumulate along the window.
  std::vector<double> recon(2 * coeff_len, 0.0);
  for (const auto& f : frames) {
    require(f.coeffs.size() == coeff_len, ErrorKind::DimensionMismatch,
            "encode_window: mismatched coefficient lengths");
    for (std::size_t i = 0; i < coeff_len; ++i) {
      const double parts[2] = {f.coeffs[i].real(), f.coeffs[i].imag()};
      for (int r = 0; r < 2; ++r) {
        double& prev = recon[2 * i + static_cast<std::size_t>(r)];
        const std::uint16_t q = quantize(parts[r] - prev);
        prev += dequantize(q);
        ts.tokens.push_back(q);
      }
    }
    ts.scales.push_back(f.scale);
  }
  ts.tokens.push_back(kQueryToken);
  return ts;
}

inline std::vector<CompressedFrame> decode_window(const TokenStream& ts, std::size_t coeff_len) {
  require(coeff_len > 0, ErrorKind::InvalidInput, "decode_window: coeff_len must be > 0");
  require(ts.tokens.size() == stream_length(ts.window_len, coeff_len), ErrorKind::MalformedStream,
          "decode_window: token count does not match window_len and coeff_len");
  require(!ts.tokens.empty() && ts.tokens.back() == kQueryToken, ErrorKind::MalformedStream,
          "decode_window: missing trailing query token");
  require(ts.scales.size() == ts.window_len, ErrorKind::MalformedStream,
          "decode_window: one scale per frame required");
  std::vector<CompressedFrame> frames(ts.window_len);
  std::vector<double> acc(2 * coeff_len, 0.0);
  std::size_t pos = 0;
  for (std::size_t t = 0; t < ts.window_len; ++t) {
    auto& f = frames[t];
    f.frame_index = t;
    f.scale = ts.scales[t];
    f.coeffs.resize(coeff_len);
    for (std::size_t i = 0; i < 2 * coeff_len; ++i) {
      const std::uint16_t q = ts.tokens[pos++];
      require(q <= 255, ErrorKind::MalformedStream, "decode_window: query token inside payload");
      acc[i] += dequantize(q);
    }
    for (std::size_t i = 0; i < coeff_len; ++i) f.coeffs[i] = {acc[2 * i], acc[2 * i + 1]};
  }
  return frames;
}

}  // namespace sagsin::tokenize
