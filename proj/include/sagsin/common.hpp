#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sagsin {

using Complex = std::complex<double>;
using Rng = std::mt19937_64;

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Error classes. The CLI maps each one to its own exit code.
enum class ErrorKind : int {
  InvalidConfig = 2,
  InvalidInput = 3,
  DimensionMismatch = 4,
  MalformedStream = 5,
  Io = 6,
  Format = 7,
  Divergence = 8,
  NotTrained = 9,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::DimensionMismatch: return "dimension-mismatch";
    case ErrorKind::MalformedStream: return "malformed-stream";
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::NotTrained: return "not-trained";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

/// Independent generator stream for (seed, stream id). Used for per-module
/// and per-worker streams so results do not depend on call order.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x5a47u};
  return Rng(seq);
}

/// Circularly-symmetric complex Gaussian with E|z|^2 = power.
inline Complex complex_normal(Rng& rng, double power = 1.0) {
  std::normal_distribution<double> n(0.0, std::sqrt(power / 2.0));
  const double re = n(rng);
  const double im = n(rng);
  return {re, im};
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

/// FNV-1a over raw bytes; stable across runs and platforms of equal endianness.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
std::uint64_t fnv1a_of(std::span<const T> values, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(std::as_bytes(values), h);
}

}  // namespace sagsin
