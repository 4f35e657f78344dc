#pragma once

// Two-stage CSI compression: reference-port selection followed by a
// separable (spatial x delay-Doppler) principal-component projection, and
// the deterministic inverse.

#include <Eigen/Dense>

#include <algorithm>
#include <iostream>
#include <optional>
#include <span>
#include <vector>

#include "sagsin/common.hpp"
#include "sagsin/ddchan.hpp"

namespace sagsin::compress {

using ddchan::ChannelFrame;
using ddchan::DdConfig;
using Matrix = Eigen::MatrixXcd;

struct Calibration {
  std::size_t ref_port = 0;
  std::vector<double> aoa_estimates;  // one per path
  std::vector<double> path_powers;    // mean |gain|^2 per path over the training set
  Matrix spatial_basis;               // n_tx x r_s
  Matrix dd_basis;                    // (n_delay*n_doppler) x r_d
  double energy_captured = 0;
  std::size_t train_frame_count = 0;
  bool rank_deficient = false;

  std::size_t spatial_rank() const { return static_cast<std::size_t>(spatial_basis.cols()); }
  std::size_t dd_rank() const { return static_cast<std::size_t>(dd_basis.cols()); }
  std::size_t coeff_len() const { return spatial_rank() * dd_rank(); }

  /// AoA of the strongest calibrated path, if any AoA is known.
  std::optional<double> dominant_aoa() const {
    if (aoa_estimates.empty()) return std::nullopt;
    std::size_t best = 0;
    for (std::size_t i = 1; i < aoa_estimates.size() && i < path_powers.size(); ++i)
      if (path_powers[i] > path_powers[best]) best = i;
    return aoa_estimates[best];
  }
};

struct CompressedFrame {
  std::vector<Complex> coeffs;
  std::size_t frame_index = 0;
  double scale = 1.0;

  /// Coefficients with the normalization undone.
  std::vector<Complex> absolute() const {
    std::vector<Complex> out(coeffs);
    for (auto& c : out) c *= scale;
    return out;
  }
};

/// Max deviation of B^H B from the identity.
inline double gram_deviation(const Matrix& basis) {
  const Matrix g = basis.adjoint() * basis;
  return (g - Matrix::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

inline std::size_t select_reference_port(std::span<const ChannelFrame> frames) {
  require(!frames.empty(), ErrorKind::InvalidInput, "select_reference_port: empty input");
  const std::size_t n_port = frames.front().n_port;
  std::vector<double> energy(n_port, 0.0);
  for (const auto& f : frames) {
    require(f.n_port == n_port, ErrorKind::DimensionMismatch, "select_reference_port: port count");
    for (std::size_t k = 0; k < n_port; ++k) energy[k] += f.port_energy(k);
  }
  // Ports that differ only by phase ramps have equal energy up to rounding;
  // treat those as ties and keep the lowest index.
  std::size_t best = 0;
  for (std::size_t k = 1; k < n_port; ++k)
    if (energy[k] > energy[best] * (1.0 + 1e-12)) best = k;
  return best;
}

/// Port `k` of a frame viewed as an [n_tx x dd] matrix.
inline Eigen::Map<const Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
port_matrix(const ChannelFrame& f, std::size_t k) {
  return {f.port(k).data(), static_cast<Eigen::Index>(f.n_tx),
          static_cast<Eigen::Index>(f.dd_size())};
}

namespace detail {

/// Leading `rank` eigenvectors of a Hermitian Gram matrix, strongest first.
inline Matrix leading_eigvecs(const Matrix& gram, std::size_t rank, bool& deficient) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const auto& vals = eig.eigenvalues();
  const Eigen::Index n = vals.size();
  const double top = std::max(vals(n - 1), 0.0);
  std::size_t numeric_rank = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (vals(i) > 1e-12 * top && top > 0) ++numeric_rank;
  if (numeric_rank < rank) deficient = true;
  // Eigenvectors of the zero eigenvalues complete the basis orthonormally.
  return eig.eigenvectors().rightCols(static_cast<Eigen::Index>(rank)).rowwise().reverse();
}

}  // namespace detail

inline Calibration fit_calibration(std::span<const ChannelFrame> frames, std::size_t r_s,
                                   std::size_t r_d) {
  require(!frames.empty(), ErrorKind::InvalidInput, "fit_calibration: empty input");
  const ChannelFrame& first = frames.front();
  require(r_s >= 1 && r_s <= first.n_tx, ErrorKind::InvalidConfig,
          "spatial_rank: must lie in [1, n_tx]");
  require(r_d >= 1 && r_d <= first.dd_size(), ErrorKind::InvalidConfig,
          "dd_rank: must lie in [1, n_delay*n_doppler]");
  require(frames.size() >= std::max(r_s, r_d), ErrorKind::InvalidInput,
          "fit_calibration: need at least max(r_s, r_d) frames");

  Calibration cal;
  cal.ref_port = select_reference_port(frames);
  cal.train_frame_count = frames.size();

  const auto n_tx = static_cast<Eigen::Index>(first.n_tx);
  const auto dd = static_cast<Eigen::Index>(first.dd_size());
  Matrix spatial_gram = Matrix::Zero(n_tx, n_tx);
  Matrix dd_gram = Matrix::Zero(dd, dd);
  double total = 0;
  for (const auto& f : frames) {
    require(f.n_tx == first.n_tx && f.dd_size() == first.dd_size(), ErrorKind::DimensionMismatch,
            "fit_calibration: frame shape");
    const auto m = port_matrix(f, cal.ref_port);
    spatial_gram.noalias() += m * m.adjoint();
    dd_gram.noalias() += m.adjoint() * m;
    total += m.squaredNorm();
  }
  cal.spatial_basis = detail::leading_eigvecs(spatial_gram, r_s, cal.rank_deficient);
  cal.dd_basis = detail::leading_eigvecs(dd_gram, r_d, cal.rank_deficient);

  double kept = 0;
  for (const auto& f : frames) {
    const auto m = port_matrix(f, cal.ref_port);
    kept += (cal.spatial_basis.adjoint() * m * cal.dd_basis).squaredNorm();
  }
  cal.energy_captured = total > 0 ? std::clamp(kept / total, 0.0, 1.0) : 0.0;

  // Genie calibration: AoAs and path strengths come from generator ground truth.
  const std::size_t n_paths = first.paths.size();
  cal.aoa_estimates.assign(n_paths, 0.0);
  cal.path_powers.assign(n_paths, 0.0);
  for (std::size_t p = 0; p < n_paths; ++p) cal.aoa_estimates[p] = first.paths[p].aoa;
  for (const auto& f : frames)
    for (std::size_t p = 0; p < std::min(n_paths, f.paths.size()); ++p)
      cal.path_powers[p] += std::norm(f.paths[p].gain) / static_cast<double>(frames.size());
  return cal;
}

inline CompressedFrame compress_frame(const ChannelFrame& frame, const Calibration& cal) {
  require(frame.n_tx == static_cast<std::size_t>(cal.spatial_basis.rows()) &&
              frame.dd_size() == static_cast<std::size_t>(cal.dd_basis.rows()) &&
              cal.ref_port < frame.n_port,
          ErrorKind::DimensionMismatch, "compress_frame: frame does not match calibration");
  const Matrix c = cal.spatial_basis.adjoint() * port_matrix(frame, cal.ref_port) * cal.dd_basis;
  CompressedFrame out;
  out.frame_index = frame.frame_index;
  out.coeffs.resize(cal.coeff_len());
  double peak = 0;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      out.coeffs[static_cast<std::size_t>(i * c.cols() + j)] = c(i, j);
      peak = std::max(peak, std::abs(c(i, j)));
    }
  out.scale = peak > 0 ? peak : 1.0;
  for (auto& v : out.coeffs) v /= out.scale;
  return out;
}

/// Reference-port matrix U * C * V^H for a compressed frame.
inline Matrix expand_reference(const CompressedFrame& cf, const Calibration& cal) {
  require(cf.coeffs.size() == cal.coeff_len(), ErrorKind::DimensionMismatch,
          "reconstruct_frame: coefficient count does not match calibration ranks");
  const auto r_s = static_cast<Eigen::Index>(cal.spatial_rank());
  const auto r_d = static_cast<Eigen::Index>(cal.dd_rank());
  Matrix c(r_s, r_d);
  for (Eigen::Index i = 0; i < r_s; ++i)
    for (Eigen::Index j = 0; j < r_d; ++j)
      c(i, j) = cf.coeffs[static_cast<std::size_t>(i * r_d + j)] * cf.scale;
  return cal.spatial_basis * c * cal.dd_basis.adjoint();
}

inline ChannelFrame reconstruct_frame(const CompressedFrame& cf, const Calibration& cal,
                                      const DdConfig& cfg) {
  require(cfg.n_tx == static_cast<std::size_t>(cal.spatial_basis.rows()) &&
              cfg.dd_size() == static_cast<std::size_t>(cal.dd_basis.rows()) &&
              cal.ref_port < cfg.n_port,
          ErrorKind::DimensionMismatch, "reconstruct_frame: config does not match calibration");
  const Matrix ref = expand_reference(cf, cal);
  ChannelFrame f(cfg.n_port, cfg.n_tx, cfg.n_delay, cfg.n_doppler);
  f.frame_index = cf.frame_index;

  const auto aoa = cal.dominant_aoa();
  if (!aoa) std::cerr << "warning: no AoA estimates; ports copied from the reference port\n";
  const double ramp = aoa ? kTwoPi * cfg.spacing() * std::sin(*aoa) : 0.0;
  for (std::size_t k = 0; k < cfg.n_port; ++k) {
    const double dk = static_cast<double>(k) - static_cast<double>(cal.ref_port);
    const Complex phase = std::polar(1.0, dk * ramp);
    auto port = f.port(k);
    for (Eigen::Index a = 0; a < ref.rows(); ++a)
      for (Eigen::Index i = 0; i < ref.cols(); ++i)
        port[static_cast<std::size_t>(a * ref.cols() + i)] = ref(a, i) * phase;
  }
  return f;
}

}  // namespace sagsin::compress
