#include <gtest/gtest.h>

#include "sagsin/compress.hpp"

using namespace sagsin;
using namespace sagsin::ddchan;
using namespace sagsin::compress;

namespace {

std::vector<ChannelFrame> desk_sequence(std::size_t count, std::uint64_t seed) {
  DdConfig cfg = DdConfig::desk();
  cfg.frame_count = count;
  Rng rng = make_rng(seed);
  return evolve_sequence(cfg, rng);
}

ChannelFrame random_frame(std::size_t ports, std::size_t tx, std::size_t nd, std::size_t ndop,
                          Rng& rng) {
  ChannelFrame f(ports, tx, nd, ndop);
  for (auto& v : f.h) v = complex_normal(rng);
  return f;
}

double rel_err(const Matrix& a, const Matrix& b) { return (a - b).norm() / b.norm(); }

Matrix ref_matrix(const ChannelFrame& f, std::size_t port) { return port_matrix(f, port); }

}  // namespace

TEST(ReferencePort, SinglePort) {
  Rng rng = make_rng(1);
  std::vector<ChannelFrame> frames{random_frame(1, 4, 4, 4, rng)};
  EXPECT_EQ(select_reference_port(frames), 0u);
}

TEST(ReferencePort, DominantByConstruction) {
  auto frames = desk_sequence(70, 2);
  for (auto& f : frames)
    for (auto& v : f.port(3)) v *= 2.0;
  EXPECT_EQ(select_reference_port(frames), 3u);
}

TEST(ReferencePort, MatchesExhaustiveEnergyScan) {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ChannelFrame> frames;
    for (int t = 0; t < 5; ++t) frames.push_back(random_frame(16, 3, 4, 4, rng));
    std::size_t best = 0;
    double best_e = -1;
    for (std::size_t k = 0; k < 16; ++k) {
      double e = 0;
      for (const auto& f : frames)
        for (std::size_t a = 0; a < 3; ++a)
          for (std::size_t m = 0; m < 4; ++m)
            for (std::size_t n = 0; n < 4; ++n) e += std::norm(f.at(k, a, m, n));
      if (e > best_e) {
        best_e = e;
        best = k;
      }
    }
    EXPECT_EQ(select_reference_port(frames), best);
  }
}

TEST(ReferencePort, EmptyInput) {
  std::vector<ChannelFrame> none;
  EXPECT_THROW(select_reference_port(none), Error);
}

TEST(Calibration, DefaultRanksGive64CoefficientsAndOrthonormalBases) {
  const auto frames = desk_sequence(200, 4);
  const Calibration cal = fit_calibration(frames, 4, 16);
  EXPECT_EQ(cal.coeff_len(), 64u);
  EXPECT_LE(gram_deviation(cal.spatial_basis), 1e-9);
  EXPECT_LE(gram_deviation(cal.dd_basis), 1e-9);
  EXPECT_GE(cal.energy_captured, 0.90);
  EXPECT_LE(cal.energy_captured, 1.0);
  EXPECT_FALSE(cal.rank_deficient);
  EXPECT_EQ(cal.aoa_estimates.size(), 6u);
  EXPECT_EQ(compress_frame(frames[0], cal).coeffs.size(), 64u);
}

TEST(Calibration, RankOneEnsembleIsCapturedExactly) {
  DdConfig cfg = DdConfig::desk();
  cfg.n_paths = 1;
  Rng rng = make_rng(5);
  const PathSet ps = sample_path_set(cfg, rng);
  std::vector<ChannelFrame> frames(10, render_frame(ps, cfg, 0));
  const Calibration cal = fit_calibration(frames, 1, 1);
  EXPECT_GE(cal.energy_captured, 1.0 - 1e-9);
}

TEST(Calibration, RankDeficiencyIsFlagged) {
  DdConfig cfg = DdConfig::desk();
  cfg.n_paths = 1;
  Rng rng = make_rng(6);
  const PathSet ps = sample_path_set(cfg, rng);
  std::vector<ChannelFrame> frames(8, render_frame(ps, cfg, 0));
  const Calibration cal = fit_calibration(frames, 3, 4);
  EXPECT_TRUE(cal.rank_deficient);
  EXPECT_LE(gram_deviation(cal.spatial_basis), 1e-9);
  EXPECT_LE(gram_deviation(cal.dd_basis), 1e-9);
}

TEST(Calibration, EnergyNonDecreasingInRanks) {
  const auto frames = desk_sequence(120, 7);
  double prev_row = -1;
  for (std::size_t rs : {1u, 2u, 4u, 8u}) {
    double prev = -1;
    for (std::size_t rd : {1u, 4u, 16u, 64u}) {
      const double e = fit_calibration(frames, rs, rd).energy_captured;
      EXPECT_GE(e, prev - 1e-12);
      prev = e;
    }
    EXPECT_GE(prev, prev_row - 1e-12);
    prev_row = prev;
  }
}

TEST(CompressFrame, ZeroFrame) {
  const auto frames = desk_sequence(70, 8);
  const Calibration cal = fit_calibration(frames, 4, 16);
  ChannelFrame zero(4, 8, 16, 16);
  const auto cf = compress_frame(zero, cal);
  EXPECT_EQ(cf.scale, 1.0);
  for (const auto& c : cf.coeffs) EXPECT_EQ(c, Complex{});
}

TEST(CompressFrame, MatchesNaiveProjection) {
  const auto frames = desk_sequence(70, 9);
  const Calibration cal = fit_calibration(frames, 4, 16);
  Rng rng = make_rng(10);
  const ChannelFrame f = random_frame(4, 8, 16, 16, rng);
  const auto cf = compress_frame(f, cal);
  const std::size_t dd = f.dd_size();
  double peak = 0;
  std::vector<Complex> naive(64);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 16; ++j) {
      Complex acc{};
      for (std::size_t a = 0; a < 8; ++a)
        for (std::size_t d = 0; d < dd; ++d)
          acc += std::conj(cal.spatial_basis(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(i))) *
                 f.port(cal.ref_port)[a * dd + d] *
                 cal.dd_basis(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(j));
      naive[i * 16 + j] = acc;
      peak = std::max(peak, std::abs(acc));
    }
  }
  EXPECT_NEAR(cf.scale, peak, 1e-12 * peak);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_LT(std::abs(cf.coeffs[i] * cf.scale - naive[i]), 1e-10);
}

TEST(CompressFrame, DimensionMismatch) {
  const auto frames = desk_sequence(70, 11);
  const Calibration cal = fit_calibration(frames, 4, 16);
  ChannelFrame wrong(4, 4, 16, 16);
  try {
    compress_frame(wrong, cal);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
}

TEST(Reconstruct, FrameInBasisSpanIsReproduced) {
  const auto frames = desk_sequence(70, 12);
  const Calibration cal = fit_calibration(frames, 4, 16);
  DdConfig cfg = DdConfig::desk();
  // Build a frame whose reference port lies in span(U) x span(V).
  Rng rng = make_rng(13);
  Matrix c(4, 16);
  for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = complex_normal(rng);
  const Matrix m = cal.spatial_basis * c * cal.dd_basis.adjoint();
  ChannelFrame f(4, 8, 16, 16);
  for (Eigen::Index a = 0; a < m.rows(); ++a)
    for (Eigen::Index d = 0; d < m.cols(); ++d)
      f.port(cal.ref_port)[static_cast<std::size_t>(a * m.cols() + d)] = m(a, d);
  const auto back = reconstruct_frame(compress_frame(f, cal), cal, cfg);
  EXPECT_LE(rel_err(ref_matrix(back, cal.ref_port), m), 1e-9);
}

TEST(Reconstruct, SinglePathFullRankIsExact) {
  DdConfig cfg = DdConfig::desk();
  cfg.n_paths = 1;
  Rng rng = make_rng(14);
  const PathSet ps = sample_path_set(cfg, rng);
  // Several frames so the full-rank bases are well defined.
  std::vector<ChannelFrame> frames;
  for (std::size_t t = 0; t < 256; ++t) {
    PathSet moved = ps;
    moved[0].gain *= std::polar(1.0, 0.1 * static_cast<double>(t));
    frames.push_back(render_frame(moved, cfg, t));
  }
  const Calibration cal = fit_calibration(frames, cfg.n_tx, cfg.dd_size());
  for (std::size_t t : {0u, 17u, 255u}) {
    const auto back = reconstruct_frame(compress_frame(frames[t], cal), cal, cfg);
    double err = 0;
    for (std::size_t i = 0; i < back.h.size(); ++i) err += std::norm(back.h[i] - frames[t].h[i]);
    EXPECT_LE(std::sqrt(err / frames[t].energy()), 1e-9);
  }
}

TEST(Reconstruct, FullRankReferencePortIsExact) {
  const auto frames = desk_sequence(300, 15);
  DdConfig cfg = DdConfig::desk();
  const Calibration cal = fit_calibration(frames, cfg.n_tx, cfg.dd_size());
  for (std::size_t t : {0u, 150u, 299u}) {
    const auto back = reconstruct_frame(compress_frame(frames[t], cal), cal, cfg);
    EXPECT_LE(rel_err(ref_matrix(back, cal.ref_port), ref_matrix(frames[t], cal.ref_port)), 1e-9);
  }
}

TEST(Reconstruct, DefaultRanksNmseAndEnergyBound) {
  const auto frames = desk_sequence(200, 16);
  DdConfig cfg = DdConfig::desk();
  const Calibration cal = fit_calibration(frames, 4, 16);
  double err = 0, total = 0;
  for (const auto& f : frames) {
    const auto back = reconstruct_frame(compress_frame(f, cal), cal, cfg);
    const Matrix truth = ref_matrix(f, cal.ref_port);
    err += (ref_matrix(back, cal.ref_port) - truth).squaredNorm();
    total += truth.squaredNorm();
  }
  const double nmse = err / total;
  EXPECT_LE(nmse, 0.12);
  EXPECT_LE(nmse, 1.0 - cal.energy_captured + 1e-6);
}

TEST(Reconstruct, ProjectionIdempotence) {
  const auto frames = desk_sequence(100, 17);
  DdConfig cfg = DdConfig::desk();
  const Calibration cal = fit_calibration(frames, 4, 16);
  for (std::size_t t : {3u, 50u, 99u}) {
    const auto once = compress_frame(frames[t], cal);
    const auto twice = compress_frame(reconstruct_frame(once, cal, cfg), cal);
    EXPECT_NEAR(twice.scale, once.scale, 1e-9 * once.scale);
    for (std::size_t i = 0; i < once.coeffs.size(); ++i)
      EXPECT_LT(std::abs(twice.coeffs[i] - once.coeffs[i]), 1e-9);
  }
}

TEST(Reconstruct, MissingAoaCopiesReferencePort) {
  const auto frames = desk_sequence(70, 18);
  DdConfig cfg = DdConfig::desk();
  Calibration cal = fit_calibration(frames, 4, 16);
  cal.aoa_estimates.clear();
  const auto back = reconstruct_frame(compress_frame(frames[0], cal), cal, cfg);
  for (std::size_t k = 0; k < cfg.n_port; ++k)
    for (std::size_t i = 0; i < back.port_size(); ++i)
      EXPECT_EQ(back.port(k)[i], back.port(cal.ref_port)[i]);
}
