#pragma once

// Glue for the forecasting task: frames -> calibration -> token codec ->
// training windows and capacity test windows.

#include <span>
#include <vector>

#include "sagsin/compress.hpp"
#include "sagsin/ddchan.hpp"
#include "sagsin/metrics.hpp"
#include "sagsin/predict.hpp"
#include "sagsin/tokenize.hpp"

namespace sagsin::pipeline {

using compress::Calibration;
using compress::CompressedFrame;
using ddchan::ChannelFrame;

struct TaskLayout {
  std::size_t lookback = 50;
  std::size_t horizon = 20;
  std::size_t n_train = 500;
  std::size_t n_test = 100;
  std::size_t stride = 1;  // frames between consecutive window starts

  std::size_t span() const { return lookback + horizon; }
  /// Frames used by the training windows; the calibration sees only these.
  std::size_t train_frames() const { return (n_train - 1) * stride + span(); }
  /// The test region begins one horizon after the last training frame.
  std::size_t test_start() const { return train_frames() + horizon; }
  std::size_t frames_needed() const { return test_start() + (n_test - 1) * stride + span(); }
};

/// Compress then run through the token codec, as a receiver would see it.
inline std::vector<CompressedFrame> coded(std::span<const ChannelFrame> frames, const Calibration& cal) {
  std::vector<CompressedFrame> cf;
  cf.reserve(frames.size());
  for (const auto& f : frames) cf.push_back(compress::compress_frame(f, cal));
  return tokenize::decode_window(tokenize::encode_window(cf), cal.coeff_len());
}

/// Window start frames of the training and test regions.
inline std::vector<std::size_t> train_starts(const TaskLayout& lay) {
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < lay.n_train; ++i) s.push_back(i * lay.stride);
  return s;
}

inline std::vector<std::size_t> test_starts(const TaskLayout& lay) {
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < lay.n_test; ++i) s.push_back(lay.test_start() + i * lay.stride);
  return s;
}

inline void check_frames(std::span<const ChannelFrame> frames, const TaskLayout& lay) {
  require(frames.size() >= lay.frames_needed(), ErrorKind::InvalidInput,
          "need " + std::to_string(lay.frames_needed()) + " frames, got " + std::to_string(frames.size()));
}

/// Calibration fitted on the training region only.
inline Calibration calibrate(std::span<const ChannelFrame> frames, const TaskLayout& lay, std::size_t r_s,
                             std::size_t r_d) {
  check_frames(frames, lay);
  return compress::fit_calibration(frames.first(lay.train_frames()), r_s, r_d);
}

/// Token stream of the window starting at frame `start`.
inline tokenize::TokenStream window_tokens(std::span<const ChannelFrame> frames, std::size_t start,
                                           const TaskLayout& lay, const Calibration& cal) {
  std::vector<CompressedFrame> cf;
  for (const auto& f : frames.subspan(start, lay.span())) cf.push_back(compress::compress_frame(f, cal));
  return tokenize::encode_window(cf);
}

inline predict::Window window_from_tokens(const tokenize::TokenStream& ts, std::size_t lookback,
                                          std::size_t coeff_len) {
  const auto seq = tokenize::decode_window(ts, coeff_len);
  require(seq.size() > lookback, ErrorKind::DimensionMismatch, "window shorter than the look-back");
  predict::Window w;
  w.history.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(lookback));
  w.future.assign(seq.begin() + static_cast<std::ptrdiff_t>(lookback), seq.end());
  return w;
}

/// Capacity window: decoded history plus the actual future frames.
inline metrics::CapacityWindow capacity_window(const predict::Window& coded_window,
                                               std::span<const ChannelFrame> frames, std::size_t start,
                                               const TaskLayout& lay) {
  metrics::CapacityWindow cw;
  cw.history = coded_window.history;
  const auto fut = frames.subspan(start + lay.lookback, lay.horizon);
  cw.future.assign(fut.begin(), fut.end());
  return cw;
}

struct Task {
  Calibration cal;
  std::vector<predict::Window> train;
  std::vector<metrics::CapacityWindow> test;
  std::vector<predict::Window> test_coded;  // test windows with coded futures, for NMSE
};

inline Task build_task(std::span<const ChannelFrame> frames, const TaskLayout& lay, std::size_t r_s,
                       std::size_t r_d) {
  Task t;
  t.cal = calibrate(frames, lay, r_s, r_d);
  const std::size_t c = t.cal.coeff_len();
  for (std::size_t s : train_starts(lay))
    t.train.push_back(window_from_tokens(window_tokens(frames, s, lay, t.cal), lay.lookback, c));
  for (std::size_t s : test_starts(lay)) {
    auto w = window_from_tokens(window_tokens(frames, s, lay, t.cal), lay.lookback, c);
    t.test.push_back(capacity_window(w, frames, s, lay));
    t.test_coded.push_back(std::move(w));
  }
  return t;
}

/// Per-step NMSE of a model over coded test windows.
inline predict::NmseReport evaluate_nmse(const predict::ModelState& m, std::span<const predict::Window> test) {
  std::vector<std::vector<CompressedFrame>> preds, truths;
  for (const auto& w : test) {
    preds.push_back(predict::predict(w.history, m));
    truths.push_back(w.future);
  }
  return predict::nmse(preds, truths);
}

}  // namespace sagsin::pipeline
