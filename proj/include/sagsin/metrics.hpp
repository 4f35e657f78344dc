#pragma once

// Capacity-versus-SNR evaluation where predicted channels drive port
// selection and per-bin MRT beams, and the actual channel sets the rate.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sagsin/common.hpp"
#include "sagsin/compress.hpp"
#include "sagsin/ddchan.hpp"
#include "sagsin/predict.hpp"

namespace sagsin::metrics {

using compress::Calibration;
using compress::CompressedFrame;
using ddchan::ChannelFrame;
using ddchan::DdConfig;

inline constexpr double kOccupancyThreshold = 1e-6;

/// Strongest port by Frobenius energy. Near-ties (1e-12 relative) go to
/// `prefer` when it is among them, else to the lowest index. Reconstructed
/// frames tie on every port, so callers pass the reference port.
inline std::size_t strongest_port(const ChannelFrame& f, std::optional<std::size_t> prefer = {}) {
  double peak = 0;
  for (std::size_t k = 0; k < f.n_port; ++k) peak = std::max(peak, f.port_energy(k));
  const double floor = peak * (1.0 - 1e-12);
  if (prefer && *prefer < f.n_port && f.port_energy(*prefer) >= floor) return *prefer;
  for (std::size_t k = 0; k < f.n_port; ++k)
    if (f.port_energy(k) >= floor) return k;
  return 0;
}

/// Beamforming gains |h_actual[k][., m, n] . w_mn|^2 over the bins occupied
/// in the actual frame (any port). The port and beams come from `decision`; a bin the
/// decision channel leaves empty gets no beam and gain 0.
inline std::vector<double> beam_gains(const ChannelFrame& actual, const ChannelFrame& decision,
                                      std::optional<std::size_t> prefer_port = {}) {
  require(actual.n_port == decision.n_port && actual.n_tx == decision.n_tx &&
              actual.dd_size() == decision.dd_size(),
          ErrorKind::DimensionMismatch, "achieved_rate: frame shapes differ");
  require(decision.energy() > 0, ErrorKind::InvalidInput, "achieved_rate: all-zero decision frame");
  const std::size_t port = strongest_port(decision, prefer_port);
  const std::size_t dd = actual.dd_size();
  const auto act = actual.port(port);
  const auto dec = decision.port(port);

  // Occupancy is summed over all ports so every decision is scored on the
  // same bins, whichever port it picks.
  std::vector<double> act_energy(dd, 0.0), dec_energy(dd, 0.0);
  for (std::size_t k = 0; k < actual.n_port; ++k) {
    const auto h = actual.port(k);
    for (std::size_t a = 0; a < actual.n_tx; ++a)
      for (std::size_t i = 0; i < dd; ++i) act_energy[i] += std::norm(h[a * dd + i]);
  }
  for (std::size_t a = 0; a < actual.n_tx; ++a)
    for (std::size_t i = 0; i < dd; ++i) dec_energy[i] += std::norm(dec[a * dd + i]);
  double act_peak = 0, dec_peak = 0;
  for (std::size_t i = 0; i < dd; ++i) {
    act_peak = std::max(act_peak, act_energy[i]);
    dec_peak = std::max(dec_peak, dec_energy[i]);
  }

  std::vector<double> gains;
  for (std::size_t i = 0; i < dd; ++i) {
    if (act_peak <= 0 || act_energy[i] <= kOccupancyThreshold * act_peak) continue;
    if (dec_energy[i] <= kOccupancyThreshold * dec_peak) {
      gains.push_back(0.0);
      continue;
    }
    Complex inner{};
    for (std::size_t a = 0; a < actual.n_tx; ++a) inner += act[a * dd + i] * std::conj(dec[a * dd + i]);
    gains.push_back(std::norm(inner) / dec_energy[i]);
  }
  return gains;
}

inline double rate_from_gains(std::span<const double> gains, double snr_db) {
  if (gains.empty()) return 0.0;
  const double snr = db_to_linear(snr_db);
  double r = 0;
  for (double g : gains) r += std::log2(1.0 + snr * g);
  return r / static_cast<double>(gains.size());
}

/// Mean spectral efficiency (bit/s/Hz) when `decision` picks port and beams.
inline double achieved_rate(const ChannelFrame& actual, const ChannelFrame& decision, double snr_db,
                            std::optional<std::size_t> prefer_port = {}) {
  const auto g = beam_gains(actual, decision, prefer_port);
  return rate_from_gains(g, snr_db);
}

struct Curve {
  std::string name;
  std::vector<double> mean;                   // per SNR, averaged over windows and steps
  std::vector<std::vector<double>> per_step;  // [step][snr]
  std::vector<double> gap;                    // perfect - mean
};

struct CapacityReport {
  std::vector<double> snr_grid;
  Curve perfect;
  std::vector<Curve> predicted;  // oracle_compressed first, then predictors in the given order
  std::pair<double, double> operating_band{5.0, 14.0};

  const Curve& curve(const std::string& name) const {
    if (name == perfect.name) return perfect;
    for (const auto& c : predicted)
      if (c.name == name) return c;
    throw Error(ErrorKind::InvalidInput, "capacity report has no curve '" + name + "'");
  }
};

/// One evaluation window: the (decoded) compressed history and the actual
/// full future frames.
struct CapacityWindow {
  std::vector<CompressedFrame> history;
  std::vector<ChannelFrame> future;
};

struct NamedPredictor {
  std::string name;
  const predict::ModelState* model;
};

inline CapacityReport ergodic_capacity_curve(std::span<const CapacityWindow> windows,
                                             std::span<const NamedPredictor> predictors,
                                             const Calibration& cal, const DdConfig& cfg,
                                             std::span<const double> snr_grid) {
  require(windows.size() >= 30, ErrorKind::InvalidInput,
          "ergodic_capacity_curve: at least 30 test windows required");
  require(!snr_grid.empty(), ErrorKind::InvalidInput, "ergodic_capacity_curve: empty SNR grid");
  const std::size_t horizon = windows.front().future.size();
  const std::size_t n_snr = snr_grid.size();

  CapacityReport rep;
  rep.snr_grid.assign(snr_grid.begin(), snr_grid.end());
  auto blank = [&](std::string name) {
    Curve c;
    c.name = std::move(name);
    c.mean.assign(n_snr, 0.0);
    c.per_step.assign(horizon, std::vector<double>(n_snr, 0.0));
    return c;
  };
  rep.perfect = blank("perfect");
  rep.predicted.push_back(blank("oracle_compressed"));
  for (const auto& p : predictors) rep.predicted.push_back(blank(p.name));

  auto accumulate = [&](Curve& c, std::size_t step, const std::vector<double>& gains) {
    for (std::size_t s = 0; s < n_snr; ++s) c.per_step[step][s] += rate_from_gains(gains, snr_grid[s]);
  };

  for (const auto& w : windows) {
    require(w.future.size() == horizon, ErrorKind::DimensionMismatch,
            "ergodic_capacity_curve: horizon differs between windows");
    std::vector<std::vector<CompressedFrame>> preds;
    for (const auto& p : predictors) preds.push_back(predict::predict(w.history, *p.model));
    for (std::size_t h = 0; h < horizon; ++h) {
      const ChannelFrame& actual = w.future[h];
      accumulate(rep.perfect, h, beam_gains(actual, actual));
      const auto oracle = compress::reconstruct_frame(compress::compress_frame(actual, cal), cal, cfg);
      accumulate(rep.predicted[0], h, beam_gains(actual, oracle, cal.ref_port));
      for (std::size_t p = 0; p < predictors.size(); ++p) {
        const auto decision = compress::reconstruct_frame(preds[p][h], cal, cfg);
        accumulate(rep.predicted[p + 1], h, beam_gains(actual, decision, cal.ref_port));
      }
    }
  }

  const double nw = static_cast<double>(windows.size());
  auto finish = [&](Curve& c) {
    for (std::size_t h = 0; h < horizon; ++h)
      for (std::size_t s = 0; s < n_snr; ++s) {
        c.per_step[h][s] /= nw;
        c.mean[s] += c.per_step[h][s] / static_cast<double>(horizon);
      }
  };
  finish(rep.perfect);
  for (auto& c : rep.predicted) {
    finish(c);
    c.gap.resize(n_snr);
    for (std::size_t s = 0; s < n_snr; ++s) c.gap[s] = rep.perfect.mean[s] - c.mean[s];
  }
  rep.perfect.gap.assign(n_snr, 0.0);
  return rep;
}

}  // namespace sagsin::metrics
