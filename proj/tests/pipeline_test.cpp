#include <gtest/gtest.h>

#include "sagsin/pipeline.hpp"

using namespace sagsin;
using namespace sagsin::pipeline;

namespace {

TaskLayout small_layout() {
  TaskLayout lay;
  lay.lookback = 6;
  lay.horizon = 3;
  lay.n_train = 8;
  lay.n_test = 4;
  lay.stride = 2;
  return lay;
}

std::vector<ChannelFrame> frames_for(const TaskLayout& lay, std::uint64_t seed) {
  ddchan::DdConfig cfg = ddchan::DdConfig::desk();
  cfg.lookback = lay.lookback;
  cfg.horizon = lay.horizon;
  cfg.frame_count = lay.frames_needed();
  Rng rng = make_rng(seed);
  return ddchan::evolve_sequence(cfg, rng);
}

}  // namespace

TEST(Layout, DefaultArithmetic) {
  const TaskLayout lay;
  EXPECT_EQ(lay.span(), 70u);
  EXPECT_EQ(lay.train_frames(), 499u + 70u);
  EXPECT_EQ(lay.test_start(), 589u);
  EXPECT_EQ(lay.frames_needed(), 589u + 99u + 70u);
  // Last training window ends before the first test window starts.
  EXPECT_LT(train_starts(lay).back() + lay.span(), test_starts(lay).front());
}

TEST(Task, ShapesAndSources) {
  const TaskLayout lay = small_layout();
  const auto frames = frames_for(lay, 1);
  const Task t = build_task(frames, lay, 4, 16);
  ASSERT_EQ(t.train.size(), 8u);
  ASSERT_EQ(t.test.size(), 4u);
  EXPECT_EQ(t.cal.train_frame_count, lay.train_frames());
  for (const auto& w : t.train) {
    EXPECT_EQ(w.history.size(), 6u);
    EXPECT_EQ(w.future.size(), 3u);
  }
  const auto starts = test_starts(lay);
  for (std::size_t i = 0; i < t.test.size(); ++i) {
    ASSERT_EQ(t.test[i].future.size(), 3u);
    EXPECT_EQ(t.test[i].future[0].h, frames[starts[i] + lay.lookback].h);
    EXPECT_EQ(t.test[i].history.size(), 6u);
  }
  // Token path equals the direct coded path.
  const auto direct = coded(std::span(frames).subspan(starts[1], lay.span()), t.cal);
  for (std::size_t k = 0; k < lay.lookback; ++k) EXPECT_EQ(t.test_coded[1].history[k].coeffs, direct[k].coeffs);
}

TEST(Task, CalibrationIgnoresTestRegion) {
  const TaskLayout lay = small_layout();
  auto frames = frames_for(lay, 2);
  const auto a = calibrate(frames, lay, 4, 16);
  for (std::size_t t = lay.train_frames(); t < frames.size(); ++t)
    for (auto& v : frames[t].h) v *= 3.0;
  const auto b = calibrate(frames, lay, 4, 16);
  EXPECT_TRUE(a.spatial_basis == b.spatial_basis);
  EXPECT_TRUE(a.dd_basis == b.dd_basis);
}

TEST(Task, TooFewFrames) {
  const TaskLayout lay = small_layout();
  auto frames = frames_for(lay, 3);
  frames.pop_back();
  EXPECT_THROW(build_task(frames, lay, 4, 16), Error);
}
