#include <gtest/gtest.h>

#include "sagsin/ddchan.hpp"

using namespace sagsin;
using namespace sagsin::ddchan;

namespace {

// Direct evaluation of the defining sum (1/n) sum_k exp(j 2 pi k x / n).
Complex brute_force_kernel(double x, std::size_t n) {
  Complex acc{};
  for (std::size_t k = 0; k < n; ++k)
    acc += std::polar(1.0, kTwoPi * static_cast<double>(k) * x / static_cast<double>(n));
  return acc / static_cast<double>(n);
}

DdConfig small_cfg() {
  DdConfig c = DdConfig::desk();
  c.n_delay = 8;
  c.n_doppler = 8;
  c.max_doppler = 3000;
  return c;
}

Path on_grid_path(const DdConfig& cfg, double delay_bin, double doppler_bin, Complex gain,
                  double aoa, double aod) {
  Path p;
  p.delay = delay_bin / cfg.delay_scale();
  p.doppler = doppler_bin / cfg.doppler_scale();
  p.gain = gain;
  p.aoa = aoa;
  p.aod = aod;
  p.is_los = true;
  return p;
}

}  // namespace

TEST(DdKernel, PeakAndOnGridZeros) {
  EXPECT_NEAR(std::abs(dd_kernel(0.0, 64) - Complex(1, 0)), 0.0, 1e-15);
  EXPECT_LT(std::abs(dd_kernel(1.0, 64)), 1e-12);
  for (int k = 1; k < 64; ++k) EXPECT_LT(std::abs(dd_kernel(k, 64)), 1e-12) << k;
  // Period n: the removable singularity at multiples of n evaluates to 1.
  EXPECT_NEAR(std::abs(dd_kernel(64.0, 64) - Complex(1, 0)), 0.0, 1e-15);
  EXPECT_NEAR(std::abs(dd_kernel(-128.0, 64) - Complex(1, 0)), 0.0, 1e-15);
}

TEST(DdKernel, MatchesBruteForceDft) {
  for (double x : {0.5, -0.5, 0.25, 3.7, -12.3, 63.5, 100.1, 1e-9}) {
    for (std::size_t n : {1u, 2u, 7u, 16u, 64u}) {
      const Complex want = brute_force_kernel(x, n);
      EXPECT_LT(std::abs(dd_kernel(x, n) - want), 1e-12) << "x=" << x << " n=" << n;
    }
  }
}

TEST(PathSet, ShapeAndSingleLos) {
  DdConfig cfg = DdConfig::desk();
  Rng rng = make_rng(7);
  const PathSet ps = sample_path_set(cfg, rng);
  ASSERT_EQ(ps.size(), 6u);
  int los = 0;
  for (const auto& p : ps) {
    los += p.is_los ? 1 : 0;
    EXPECT_GE(p.delay, 0.0);
    EXPECT_LT(p.delay, static_cast<double>(cfg.n_delay) / cfg.delay_scale());
    EXPECT_LE(std::abs(p.doppler), cfg.max_doppler);
    EXPECT_LE(std::abs(p.aoa), kPi / 2);
    EXPECT_LE(std::abs(p.aod), kPi / 2);
  }
  EXPECT_EQ(los, 1);
  const double k = db_to_linear(6.0);
  EXPECT_NEAR(std::norm(ps[0].gain), k / (k + 1), 1e-12);
}

TEST(PathSet, ZeroPathsRejected) {
  DdConfig cfg = DdConfig::desk();
  cfg.n_paths = 0;
  Rng rng = make_rng(1);
  try {
    sample_path_set(cfg, rng);
    FAIL() << "expected invalid-config";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
  }
}

TEST(PathSet, HugeKFactorLeavesNoScatteredPower) {
  DdConfig cfg = DdConfig::desk();
  cfg.rice_k_db = 1e6;  // capped at 60 dB
  const auto powers = path_mean_powers(cfg);
  double scattered = 0;
  for (std::size_t i = 1; i < powers.size(); ++i) scattered += powers[i];
  EXPECT_LE(scattered, 1e-6);
}

TEST(PathSet, MeanPowerIsOne) {
  DdConfig cfg = DdConfig::desk();
  Rng rng = make_rng(11);
  double total = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    for (const auto& p : sample_path_set(cfg, rng)) total += std::norm(p.gain);
  }
  EXPECT_NEAR(total / draws, 1.0, 0.05);
  const auto powers = path_mean_powers(cfg);
  double sum = 0;
  for (double p : powers) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  for (std::size_t i = 2; i < powers.size(); ++i)
    EXPECT_NEAR(10 * std::log10(powers[i - 1] / powers[i]), 3.0, 1e-12);
}

TEST(Render, OnGridPathCollapsesToOneBin) {
  DdConfig cfg = small_cfg();
  const PathSet ps{on_grid_path(cfg, 3, 2, {1, 0}, 0.0, 0.4)};
  const ChannelFrame f = render_frame(ps, cfg, 0);
  for (std::size_t k = 0; k < cfg.n_port; ++k) {
    for (std::size_t a = 0; a < cfg.n_tx; ++a) {
      for (std::size_t m = 0; m < cfg.n_delay; ++m) {
        for (std::size_t n = 0; n < cfg.n_doppler; ++n) {
          const bool peak = (m == 3 && n == cfg.n_doppler / 2 + 2);
          const double mag = std::abs(f.at(k, a, m, n));
          if (peak) {
            EXPECT_NEAR(mag, 1.0, 1e-12);
            EXPECT_LT(std::abs(f.at(k, a, m, n) - f.at(0, a, m, n)), 1e-15);
          } else {
            EXPECT_LT(mag, 1e-12);
          }
        }
      }
    }
  }
}

TEST(Render, PortMagnitudesAndPhaseRamp) {
  DdConfig cfg = small_cfg();
  const PathSet ps{on_grid_path(cfg, 2.3, -1.6, {0.3, -0.8}, 0.7, -0.2)};
  const ChannelFrame f = render_frame(ps, cfg, 0);
  for (std::size_t k1 = 0; k1 < cfg.n_port; ++k1) {
    for (std::size_t k2 = 0; k2 < cfg.n_port; ++k2) {
      const double dk = static_cast<double>(k2) - static_cast<double>(k1);
      const Complex ramp = std::polar(1.0, kTwoPi * dk * cfg.spacing() * std::sin(0.7));
      for (std::size_t i = 0; i < f.port_size(); ++i) {
        const Complex a = f.port(k1)[i], b = f.port(k2)[i];
        EXPECT_NEAR(std::abs(a), std::abs(b), 1e-12);
        EXPECT_LE(std::abs(b - a * ramp), 1e-12 * std::max(1.0, std::abs(b)));
      }
    }
  }
}

TEST(Render, Superposition) {
  DdConfig cfg = small_cfg();
  const Path p1 = on_grid_path(cfg, 1.25, 0.4, {0.6, 0.2}, 0.3, 0.9);
  Path p2 = on_grid_path(cfg, 5.9, -2.1, {-0.1, 0.5}, -1.1, -0.5);
  p2.is_los = false;
  const auto both = render_frame({p1, p2}, cfg, 0);
  const auto a = render_frame({p1}, cfg, 0);
  const auto b = render_frame({p2}, cfg, 0);
  for (std::size_t i = 0; i < both.h.size(); ++i)
    EXPECT_LE(std::abs(both.h[i] - (a.h[i] + b.h[i])), 1e-12);
}

TEST(Render, EnergyConservationOnGrid) {
  DdConfig cfg = small_cfg();
  PathSet ps{on_grid_path(cfg, 1, 0, {0.8, 0.1}, 0.2, 0.1),
             on_grid_path(cfg, 4, 3, {-0.3, 0.2}, -0.6, 1.0),
             on_grid_path(cfg, 6, -2, {0.05, -0.4}, 1.2, -0.7)};
  double gain_sum = 0;
  for (const auto& p : ps) gain_sum += std::norm(p.gain);
  const auto f = render_frame(ps, cfg, 0);
  const double want = static_cast<double>(cfg.n_port * cfg.n_tx) * gain_sum;
  EXPECT_NEAR(f.energy() / want, 1.0, 1e-9);
}

TEST(Evolve, FrozenChannel) {
  DdConfig cfg = small_cfg();
  cfg.temporal_rho = 1.0;
  cfg.doppler_drift = 0;
  cfg.los_phase_step = 0;
  cfg.max_doppler = 0;  // no delay drift either
  cfg.frame_count = 75;
  Rng rng = make_rng(3);
  const auto frames = evolve_sequence(cfg, rng);
  ASSERT_EQ(frames.size(), 75u);
  for (const auto& f : frames) EXPECT_EQ(f.h, frames.front().h);
}

TEST(Evolve, UncorrelatedGainsAtRhoZero) {
  DdConfig cfg = small_cfg();
  cfg.temporal_rho = 0.0;
  cfg.n_paths = 2;
  Rng rng = make_rng(5);
  SequenceGenerator gen(cfg, rng);
  Complex cross{};
  double p0 = 0, p1 = 0;
  Complex prev = gen.paths()[1].gain;
  for (int i = 0; i < 10000; ++i) {
    gen.advance(rng);
    const Complex cur = gen.paths()[1].gain;
    cross += cur * std::conj(prev);
    p0 += std::norm(prev);
    p1 += std::norm(cur);
    prev = cur;
  }
  EXPECT_LT(std::abs(cross) / std::sqrt(p0 * p1), 0.05);
}

TEST(Evolve, LosMagnitudeFixedAndDopplerBounded) {
  DdConfig cfg = small_cfg();
  cfg.doppler_drift = 50;  // large drift to exercise clipping
  Rng rng = make_rng(9);
  SequenceGenerator gen(cfg, rng);
  const double los_mag = std::abs(gen.paths()[0].gain);
  for (int i = 0; i < 500; ++i) {
    gen.advance(rng);
    EXPECT_NEAR(std::abs(gen.paths()[0].gain), los_mag, 1e-12);
    for (const auto& p : gen.paths()) {
      EXPECT_LE(std::abs(p.doppler), cfg.max_doppler);
      EXPECT_GE(p.delay, 0.0);
      EXPECT_LT(p.delay, cfg.max_delay());
    }
  }
}

TEST(Evolve, PaperProfileFramesSatisfyInvariants) {
  DdConfig cfg = DdConfig::paper();
  cfg.frame_count = 70;
  cfg.validate();
  Rng rng = make_rng(13);
  SequenceGenerator gen(cfg, rng);
  for (std::size_t t = 0; t < cfg.frame_count; ++t) {
    if (t > 0) gen.advance(rng);
    if (t % 10 != 0 && t != cfg.frame_count - 1) continue;  // render a sample; rendering is the cost
    const auto f = gen.current();
    ASSERT_EQ(f.h.size(), 16u * 64u * 64u * 64u);
    EXPECT_TRUE(satisfies_invariants(f)) << t;
    EXPECT_GT(f.energy(), 0.0);
  }
}

TEST(Evolve, DeskSequenceInvariantsAndDeterminism) {
  DdConfig cfg = DdConfig::desk();
  cfg.frame_count = 70;
  Rng r1 = make_rng(21), r2 = make_rng(21);
  const auto a = evolve_sequence(cfg, r1);
  const auto b = evolve_sequence(cfg, r2);
  ASSERT_EQ(a.size(), 70u);
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE(satisfies_invariants(a[t]));
    EXPECT_EQ(a[t].frame_index, t);
    EXPECT_EQ(a[t].h, b[t].h);
  }
}

TEST(Evolve, RejectsShortSequences) {
  DdConfig cfg = DdConfig::desk();
  cfg.frame_count = 60;
  Rng rng = make_rng(1);
  try {
    evolve_sequence(cfg, rng);
    FAIL() << "expected invalid-config";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    EXPECT_NE(std::string(e.what()).find("frame_count"), std::string::npos);
  }
}

TEST(Config, ValidationNamesOffendingKey) {
  DdConfig cfg = DdConfig::desk();
  cfg.max_doppler = 9000;  // 16 bins * 1 kHz / 2 = 8 kHz
  EXPECT_THROW(
      {
        try {
          cfg.validate();
        } catch (const Error& e) {
          EXPECT_NE(std::string(e.what()).find("max_doppler"), std::string::npos);
          throw;
        }
      },
      Error);
}
