#pragma once

// Multi-step forecasting of compressed channel coefficients.
//
// Three predictor kinds share one interface: persistence, a least-squares
// linear map from the stacked look-back window to the stacked horizon, and a
// small transformer whose backbone is frozen after seeded initialization.
// Only the rank-r adapters on the query/value projections and the two linear
// heads are trained, by Adam on the per-window NMSE. By default the
// transformer output is a correction added to a ridge AR forecast, and the
// epoch with the lowest held-out loss is kept.
//
// All model inputs and targets are expressed relative to the scale of the
// last history frame, so the outputs reuse that scale.

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sagsin/common.hpp"
#include "sagsin/compress.hpp"

namespace sagsin::predict {

using compress::CompressedFrame;
using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

enum class Kind { Persistence, LinearAr, LoraTransformer };

inline std::string to_string(Kind k) {
  switch (k) {
    case Kind::Persistence: return "persistence";
    case Kind::LinearAr: return "linear_ar";
    case Kind::LoraTransformer: return "lora_transformer";
  }
  return "?";
}

inline Kind kind_from_string(const std::string& s) {
  if (s == "persistence") return Kind::Persistence;
  if (s == "linear_ar") return Kind::LinearAr;
  if (s == "lora_transformer" || s == "lora") return Kind::LoraTransformer;
  throw Error(ErrorKind::InvalidConfig, "kind: unknown predictor '" + s + "'");
}

struct PredictorSpec {
  Kind kind = Kind::LoraTransformer;
  std::size_t lookback = 50;
  std::size_t horizon = 20;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t lora_rank = 8;
  std::size_t ffn_dim = 128;
  double lr = 1e-3;
  std::size_t epochs = 500;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  /// Predict the change from the last history frame instead of the frame itself.
  bool residual = true;
  /// linear_ar ridge weight; unset selects it on held-out training windows.
  std::optional<double> ar_ridge;
  /// lora_transformer: learn a correction to a ridge AR forecast fitted first.
  bool ar_anchor = true;
  /// lora_transformer: trailing share of windows held out to pick the best
  /// epoch (the untrained state included). 0 trains on everything and keeps
  /// the last epoch.
  double val_fraction = 0.2;

  void validate() const {
    auto bad = [](const char* key, const char* why) {
      throw Error(ErrorKind::InvalidConfig, std::string(key) + ": " + why);
    };
    if (lookback < 1) bad("lookback", "must be >= 1");
    if (horizon < 1) bad("horizon", "must be >= 1");
    if (d_model < 1) bad("d_model", "must be >= 1");
    if (n_layers < 1) bad("n_layers", "must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) bad("n_heads", "must divide d_model");
    if (lora_rank < 1 || lora_rank > d_model) bad("lora_rank", "must lie in [1, d_model]");
    if (ffn_dim < 1) bad("ffn_dim", "must be >= 1");
    if (!(lr > 0)) bad("lr", "must be > 0");
    if (batch_size < 1) bad("batch_size", "must be >= 1");
    if (ar_ridge && !(*ar_ridge >= 0)) bad("ar_ridge", "must be >= 0");
    if (!(val_fraction >= 0 && val_fraction < 1)) bad("val_fraction", "must lie in [0, 1)");
  }
};

struct Window {
  std::vector<CompressedFrame> history;
  std::vector<CompressedFrame> future;
};

// ---------------------------------------------------------------------------
// Feature mapping

/// [lookback x 2*coeff_len] interleaved (re, im) rows scaled to the last frame.
inline Mat history_features(std::span<const CompressedFrame> history) {
  require(!history.empty(), ErrorKind::InvalidInput, "history: empty");
  const std::size_t c = history.front().coeffs.size();
  const double ref = history.back().scale;
  Mat x(static_cast<Eigen::Index>(history.size()), static_cast<Eigen::Index>(2 * c));
  for (std::size_t t = 0; t < history.size(); ++t) {
    require(history[t].coeffs.size() == c, ErrorKind::DimensionMismatch,
            "history: coefficient lengths differ");
    const double s = history[t].scale / ref;
    for (std::size_t i = 0; i < c; ++i) {
      x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(2 * i)) = history[t].coeffs[i].real() * s;
      x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(2 * i + 1)) = history[t].coeffs[i].imag() * s;
    }
  }
  return x;
}

/// Future frames stacked into one row, scaled to `ref_scale`.
inline RowVec target_features(std::span<const CompressedFrame> future, double ref_scale) {
  const std::size_t c = future.front().coeffs.size();
  RowVec y(static_cast<Eigen::Index>(future.size() * 2 * c));
  Eigen::Index j = 0;
  for (const auto& f : future) {
    require(f.coeffs.size() == c, ErrorKind::DimensionMismatch, "future: coefficient lengths differ");
    const double s = f.scale / ref_scale;
    for (const auto& v : f.coeffs) {
      y(j++) = v.real() * s;
      y(j++) = v.imag() * s;
    }
  }
  return y;
}

inline std::vector<CompressedFrame> frames_from_output(const RowVec& y, std::size_t horizon,
                                                       std::size_t coeff_len, double scale,
                                                       std::size_t first_index) {
  std::vector<CompressedFrame> out(horizon);
  Eigen::Index j = 0;
  for (std::size_t h = 0; h < horizon; ++h) {
    out[h].scale = scale;
    out[h].frame_index = first_index + h;
    out[h].coeffs.resize(coeff_len);
    for (auto& v : out[h].coeffs) {
      v = {y(j), y(j + 1)};
      j += 2;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model state

struct Layer {
  Mat wq, wk, wv, wo;            // d x d
  Mat w1, c1;                    // d x f, 1 x f
  Mat w2, c2;                    // f x d, 1 x d
  Mat ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x d
};

struct Backbone {
  std::vector<Layer> layers;
  Mat pos;  // lookback x d, sinusoidal
  Mat lnf_g, lnf_b;

  template <typename F>
  void for_each(F&& f) const {
    for (const auto& l : layers)
      for (const Mat* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.c1, &l.w2, &l.c2, &l.ln1_g,
                           &l.ln1_b, &l.ln2_g, &l.ln2_b})
        f(*m);
    f(pos);
    f(lnf_g);
    f(lnf_b);
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for_each([&](const Mat& m) {
      h = fnv1a_of(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), h);
    });
    return h;
  }
};

/// x * (W + down * up)
struct Adapter {
  Mat down;  // d x r
  Mat up;    // r x d
};

struct Trainable {
  std::vector<Adapter> q, v;  // one per layer
  Mat w_in, b_in;             // 2C x d, 1 x d
  Mat w_out, b_out;           // d x H*2C, 1 x H*2C

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t l = 0; l < self.q.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "q.down", self.q[l].down);
      f(p + "q.up", self.q[l].up);
      f(p + "v.down", self.v[l].down);
      f(p + "v.up", self.v[l].up);
    }
    f(std::string("w_in"), self.w_in);
    f(std::string("b_in"), self.b_in);
    f(std::string("w_out"), self.w_out);
    f(std::string("b_out"), self.b_out);
  }
  template <typename F> void for_each(F&& f) { visit(*this, f); }
  template <typename F> void for_each(F&& f) const { visit(*this, f); }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  Trainable zeros_like() const {
    Trainable z = *this;
    z.for_each([](const std::string&, Mat& m) { m.setZero(); });
    return z;
  }
};

struct ModelState {
  PredictorSpec spec;
  std::size_t coeff_len = 0;
  bool trained = false;
  Backbone backbone;      // lora_transformer only
  Trainable params;       // lora_transformer only
  Mat ar_weights;         // (L*2C) x (H*2C); linear_ar, or the transformer's AR anchor
  double ar_ridge = 0;    // ridge weight used for ar_weights
  std::size_t best_epoch = 0;  // transformer: epochs kept (0 = untrained)
  std::vector<double> loss_log;

  std::size_t input_dim() const { return 2 * coeff_len; }
  std::size_t output_dim() const { return spec.horizon * 2 * coeff_len; }
};

/// Adapter parameters plus head parameters (weights and biases).
inline std::size_t expected_trainable_count(const PredictorSpec& s, std::size_t coeff_len) {
  const std::size_t d = s.d_model, in = 2 * coeff_len, out = s.horizon * 2 * coeff_len;
  return s.n_layers * 2 * (2 * d * s.lora_rank) + (in * d + d) + (d * out + out);
}

namespace detail {

inline Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline Mat sinusoidal_positions(std::size_t len, std::size_t d) {
  Mat p(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(d));
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      p(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) =
          (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  return p;
}

}  // namespace detail

/// Seeded backbone, adapters with zero up-projections, zero output head.
inline ModelState init_model(const PredictorSpec& spec, std::size_t coeff_len) {
  spec.validate();
  require(coeff_len > 0, ErrorKind::InvalidInput, "coeff_len must be > 0");
  ModelState m;
  m.spec = spec;
  m.coeff_len = coeff_len;
  if (spec.kind != Kind::LoraTransformer) return m;

  Rng rng = make_rng(spec.seed, 0x70726564ull);
  const auto d = static_cast<Eigen::Index>(spec.d_model);
  const auto f = static_cast<Eigen::Index>(spec.ffn_dim);
  const auto r = static_cast<Eigen::Index>(spec.lora_rank);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    Layer layer;
    layer.wq = detail::gaussian(d, d, sd, rng);
    layer.wk = detail::gaussian(d, d, sd, rng);
    layer.wv = detail::gaussian(d, d, sd, rng);
    layer.wo = detail::gaussian(d, d, sd, rng);
    layer.w1 = detail::gaussian(d, f, sd, rng);
    layer.c1 = Mat::Zero(1, f);
    layer.w2 = detail::gaussian(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng);
    layer.c2 = Mat::Zero(1, d);
    layer.ln1_g = layer.ln2_g = Mat::Ones(1, d);
    layer.ln1_b = layer.ln2_b = Mat::Zero(1, d);
    m.backbone.layers.push_back(std::move(layer));
    m.params.q.push_back({detail::gaussian(d, r, sd, rng), Mat::Zero(r, d)});
    m.params.v.push_back({detail::gaussian(d, r, sd, rng), Mat::Zero(r, d)});
  }
  m.backbone.pos = detail::sinusoidal_positions(spec.lookback, spec.d_model);
  m.backbone.lnf_g = Mat::Ones(1, d);
  m.backbone.lnf_b = Mat::Zero(1, d);
  const auto in = static_cast<Eigen::Index>(m.input_dim());
  const auto out = static_cast<Eigen::Index>(m.output_dim());
  m.params.w_in = detail::gaussian(in, d, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  m.params.b_in = Mat::Zero(1, d);
  m.params.w_out = Mat::Zero(d, out);
  m.params.b_out = Mat::Zero(1, out);
  return m;
}

/// Copy of `m` with every adapter folded into its dense projection.
inline ModelState fold_adapters(const ModelState& m) {
  ModelState folded = m;
  for (std::size_t l = 0; l < folded.backbone.layers.size(); ++l) {
    auto& layer = folded.backbone.layers[l];
    layer.wq += m.params.q[l].down * m.params.q[l].up;
    layer.wv += m.params.v[l].down * m.params.v[l].up;
    folded.params.q[l].up.setZero();
    folded.params.v[l].up.setZero();
  }
  return folded;
}

// ---------------------------------------------------------------------------
// Transformer forward / backward

namespace detail {

constexpr double kLnEps = 1e-5;

struct LnCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnCache& c) {
  const Eigen::Index n = x.rows(), d = x.cols();
  c.xhat.resize(n, d);
  c.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    c.rstd(i) = 1.0 / std::sqrt(var + kLnEps);
    c.xhat.row(i) = (x.row(i).array() - mu) * c.rstd(i);
  }
  return (c.xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

inline Mat layer_norm_backward(const Mat& dy, const Mat& g, const LnCache& c) {
  const Mat dxhat = dy.array().rowwise() * g.row(0).array();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double z) {
  return 0.5 * z * (1.0 + std::tanh(kGeluC * (z + 0.044715 * z * z * z)));
}

inline double gelu_grad(double z) {
  const double t = std::tanh(kGeluC * (z + 0.044715 * z * z * z));
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * z * z);
}

struct LayerCache {
  Mat in;  // residual stream entering the layer
  LnCache ln1, ln2;
  Mat a1, tq, tv, q, k, v, ocat, h1, a2, z;
  std::vector<Mat> probs;  // one L x L matrix per head
};

}  // namespace detail

struct ForwardCache {
  Mat x;  // lookback x 2C
  std::vector<detail::LayerCache> layers;
  detail::LnCache lnf;
  Mat hf;  // 1 x d
};

/// Final-position output [1 x horizon*2C] for one window of inputs.
inline RowVec forward(const ModelState& m, const Mat& x, ForwardCache* cache = nullptr) {
  const auto& bb = m.backbone;
  const auto& pr = m.params;
  const Eigen::Index len = x.rows();
  const auto d = static_cast<Eigen::Index>(m.spec.d_model);
  const auto n_heads = static_cast<Eigen::Index>(m.spec.n_heads);
  const Eigen::Index dh = d / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.x = x;
  c.layers.resize(bb.layers.size());

  Mat h = (x * pr.w_in).rowwise() + pr.b_in.row(0);
  h += bb.pos.topRows(len);
  for (std::size_t l = 0; l < bb.layers.size(); ++l) {
    const auto& w = bb.layers[l];
    auto& lc = c.layers[l];
    lc.in = h;
    lc.a1 = detail::layer_norm(h, w.ln1_g, w.ln1_b, lc.ln1);
    lc.tq = lc.a1 * pr.q[l].down;
    lc.tv = lc.a1 * pr.v[l].down;
    lc.q = lc.a1 * w.wq + lc.tq * pr.q[l].up;
    lc.k = lc.a1 * w.wk;
    lc.v = lc.a1 * w.wv + lc.tv * pr.v[l].up;
    lc.ocat.resize(len, d);
    lc.probs.resize(static_cast<std::size_t>(n_heads));
    for (Eigen::Index hd = 0; hd < n_heads; ++hd) {
      Mat s = lc.q.middleCols(hd * dh, dh) * lc.k.middleCols(hd * dh, dh).transpose() * att_scale;
      for (Eigen::Index i = 0; i < len; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0;
        for (Eigen::Index j = 0; j < len; ++j) {
          s(i, j) = j <= i ? std::exp(s(i, j) - mx) : 0.0;
          sum += s(i, j);
        }
        s.row(i) /= sum;
      }
      lc.ocat.middleCols(hd * dh, dh) = s * lc.v.middleCols(hd * dh, dh);
      lc.probs[static_cast<std::size_t>(hd)] = std::move(s);
    }
    lc.h1 = h + lc.ocat * w.wo;
    lc.a2 = detail::layer_norm(lc.h1, w.ln2_g, w.ln2_b, lc.ln2);
    lc.z = (lc.a2 * w.w1).rowwise() + w.c1.row(0);
    const Mat g = lc.z.unaryExpr([](double v) { return detail::gelu(v); });
    h = lc.h1 + ((g * w.w2).rowwise() + w.c2.row(0));
  }
  c.hf = detail::layer_norm(h.bottomRows(1), bb.lnf_g, bb.lnf_b, c.lnf);
  return c.hf * pr.w_out + pr.b_out;
}

/// Accumulates d(loss)/d(trainable) into `grads` given d(loss)/d(output).
inline void backward(const ModelState& m, const ForwardCache& c, const RowVec& dy,
                     Trainable& grads) {
  const auto& bb = m.backbone;
  const auto& pr = m.params;
  const Eigen::Index len = c.x.rows();
  const auto d = static_cast<Eigen::Index>(m.spec.d_model);
  const auto n_heads = static_cast<Eigen::Index>(m.spec.n_heads);
  const Eigen::Index dh = d / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  grads.w_out.noalias() += c.hf.transpose() * dy;
  grads.b_out += dy;
  const Mat dhf = dy * pr.w_out.transpose();
  Mat dh_stream = Mat::Zero(len, d);
  dh_stream.bottomRows(1) = detail::layer_norm_backward(dhf, bb.lnf_g, c.lnf);

  for (std::size_t li = bb.layers.size(); li-- > 0;) {
    const auto& w = bb.layers[li];
    const auto& lc = c.layers[li];
    // Feed-forward branch.
    const Mat dg = dh_stream * w.w2.transpose();
    const Mat dz = dg.array() * lc.z.unaryExpr([](double v) { return detail::gelu_grad(v); }).array();
    Mat dh1 = dh_stream + detail::layer_norm_backward(dz * w.w1.transpose(), w.ln2_g, lc.ln2);
    // Attention branch.
    const Mat docat = dh1 * w.wo.transpose();
    Mat dq(len, d), dk(len, d), dv(len, d);
    for (Eigen::Index hd = 0; hd < n_heads; ++hd) {
      const Mat& p = lc.probs[static_cast<std::size_t>(hd)];
      const auto dout = docat.middleCols(hd * dh, dh);
      const Mat dp = dout * lc.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh) = p.transpose() * dout;
      Mat ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
      ds *= att_scale;
      dq.middleCols(hd * dh, dh) = ds * lc.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh) = ds.transpose() * lc.q.middleCols(hd * dh, dh);
    }
    auto& gq = grads.q[li];
    auto& gv = grads.v[li];
    gq.up.noalias() += lc.tq.transpose() * dq;
    gv.up.noalias() += lc.tv.transpose() * dv;
    gq.down.noalias() += lc.a1.transpose() * (dq * pr.q[li].up.transpose());
    gv.down.noalias() += lc.a1.transpose() * (dv * pr.v[li].up.transpose());
    const Mat da1 = dq * (w.wq + pr.q[li].down * pr.q[li].up).transpose() + dk * w.wk.transpose() +
                    dv * (w.wv + pr.v[li].down * pr.v[li].up).transpose();
    dh_stream = dh1 + detail::layer_norm_backward(da1, w.ln1_g, lc.ln1);
  }
  grads.w_in.noalias() += c.x.transpose() * dh_stream;
  grads.b_in += dh_stream.colwise().sum();
}

// ---------------------------------------------------------------------------
// Loss

/// ||pred - truth||^2 / ||truth||^2; returns 0 and leaves dpred zero for a
/// zero-energy target.
inline double window_nmse(const RowVec& pred, const RowVec& truth, RowVec* dpred = nullptr) {
  const double denom = truth.squaredNorm();
  if (denom <= 0) {
    if (dpred) dpred->setZero(pred.size());
    return 0.0;
  }
  const RowVec diff = pred - truth;
  if (dpred) *dpred = (2.0 / denom) * diff;
  return diff.squaredNorm() / denom;
}

/// Mean window NMSE over a dataset for the transformer with the given parameters.
inline double dataset_loss(const ModelState& m, std::span<const Mat> xs, std::span<const RowVec> ys) {
  double total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) total += window_nmse(forward(m, xs[i]), ys[i]);
  return total / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Fit / predict

namespace detail {

/// Last history row tiled over the horizon (the persistence forecast in feature space).
inline RowVec anchor(const Mat& x, std::size_t horizon) {
  RowVec a(x.cols() * static_cast<Eigen::Index>(horizon));
  for (std::size_t h = 0; h < horizon; ++h) a.segment(static_cast<Eigen::Index>(h) * x.cols(), x.cols()) = x.row(x.rows() - 1);
  return a;
}

inline constexpr double kRidgeGrid[] = {0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};

/// Ridge least squares with the penalty scaled by the sample count, solved in
/// the dual (samples are far fewer than stacked features). lambda = 0 gives
/// the minimum-norm solution.
inline Mat ridge_solve(const Mat& x, const Mat& y, double lambda) {
  if (lambda <= 0) return x.completeOrthogonalDecomposition().solve(y);
  Mat g = x * x.transpose();
  g.diagonal().array() += lambda * static_cast<double>(x.rows());
  return x.transpose() * g.ldlt().solve(y);
}

inline void check_dataset(const PredictorSpec& spec, std::span<const Window> data,
                          std::size_t& coeff_len) {
  require(!data.empty(), ErrorKind::InvalidInput, "fit: empty dataset");
  coeff_len = data.front().history.empty() ? 0 : data.front().history.front().coeffs.size();
  require(coeff_len > 0, ErrorKind::InvalidInput, "fit: empty history");
  for (const auto& w : data) {
    require(w.history.size() == spec.lookback && w.future.size() == spec.horizon,
            ErrorKind::DimensionMismatch, "fit: window length does not match lookback/horizon");
    for (const auto* seq : {&w.history, &w.future})
      for (const auto& f : *seq)
        require(f.coeffs.size() == coeff_len, ErrorKind::DimensionMismatch,
                "fit: coefficient lengths differ");
  }
}

inline RowVec stacked(const Mat& x) {
  // Row-major flattening of the look-back matrix.
  RowVec r(x.size());
  Eigen::Index j = 0;
  for (Eigen::Index t = 0; t < x.rows(); ++t)
    for (Eigen::Index i = 0; i < x.cols(); ++i) r(j++) = x(t, i);
  return r;
}

struct AdamState {
  Trainable m, v;
  std::size_t step = 0;
};

inline void adam_step(Trainable& params, const Trainable& grads, AdamState& st, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++st.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  std::vector<Mat*> p, m, v;
  std::vector<const Mat*> g;
  params.for_each([&](const std::string&, Mat& x) { p.push_back(&x); });
  grads.for_each([&](const std::string&, const Mat& x) { g.push_back(&x); });
  st.m.for_each([&](const std::string&, Mat& x) { m.push_back(&x); });
  st.v.for_each([&](const std::string&, Mat& x) { v.push_back(&x); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    *m[i] = b1 * *m[i] + (1 - b1) * *g[i];
    *v[i] = b2 * *v[i] + (1 - b2) * g[i]->cwiseAbs2();
    p[i]->array() -= lr * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps);
  }
}

/// Ridge AR on stacked look-back rows, written into model.ar_weights. The
/// weight is picked on the trailing fifth of the windows unless fixed, then
/// the map is refit on all of them.
inline void fit_ar(ModelState& model, std::span<const Mat> xs, std::span<const RowVec> ys) {
  const PredictorSpec& spec = model.spec;
  const auto n = static_cast<Eigen::Index>(xs.size());
  Mat x(n, xs.front().size());
  Mat y(n, ys.front().size());
  std::vector<RowVec> anchors;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& xi = xs[static_cast<std::size_t>(i)];
    x.row(i) = stacked(xi);
    y.row(i) = ys[static_cast<std::size_t>(i)];
    anchors.push_back(spec.residual ? anchor(xi, spec.horizon) : RowVec::Zero(y.cols()));
    y.row(i) -= anchors.back();
  }
  double lambda = spec.ar_ridge.value_or(0.0);
  const Eigen::Index n_val = n / 5;
  if (!spec.ar_ridge && n_val >= 1) {
    const Eigen::Index n_fit = n - n_val;
    double best = std::numeric_limits<double>::infinity();
    for (double cand : kRidgeGrid) {
      const Mat w = ridge_solve(x.topRows(n_fit), y.topRows(n_fit), cand);
      double err = 0;
      for (Eigen::Index i = n_fit; i < n; ++i) {
        const RowVec& a = anchors[static_cast<std::size_t>(i)];
        err += window_nmse(x.row(i) * w + a, y.row(i) + a);
      }
      if (err < best) {
        best = err;
        lambda = cand;
      }
    }
  }
  model.ar_ridge = lambda;
  model.ar_weights = ridge_solve(x, y, lambda);
}

/// The forecast the trained part adds to: persistence and/or the AR map.
inline RowVec base_forecast(const ModelState& m, const Mat& x) {
  const auto out = static_cast<Eigen::Index>(m.output_dim());
  RowVec y = m.spec.residual ? anchor(x, m.spec.horizon) : RowVec::Zero(out);
  if (m.ar_weights.size() > 0) y += stacked(x) * m.ar_weights;
  return y;
}

}  // namespace detail

/// Optional per-epoch observer (epoch, loss).
using EpochCallback = std::function<void(std::size_t, double)>;

inline ModelState fit(const PredictorSpec& spec, std::span<const Window> data,
                      const EpochCallback& on_epoch = {}) {
  spec.validate();
  std::size_t coeff_len = 0;
  detail::check_dataset(spec, data, coeff_len);
  ModelState model = init_model(spec, coeff_len);

  std::vector<Mat> xs;
  std::vector<RowVec> ys;
  xs.reserve(data.size());
  ys.reserve(data.size());
  for (const auto& w : data) {
    xs.push_back(history_features(w.history));
    ys.push_back(target_features(w.future, w.history.back().scale));
  }

  switch (spec.kind) {
    case Kind::Persistence:
      break;
    case Kind::LinearAr:
      detail::fit_ar(model, xs, ys);
      break;
    case Kind::LoraTransformer: {
      // The AR anchor sees every window, exactly as the standalone linear_ar does.
      if (spec.ar_anchor) detail::fit_ar(model, xs, ys);
      std::vector<RowVec> base;
      for (const auto& x : xs) base.push_back(detail::base_forecast(model, x));

      const auto n_val = static_cast<std::size_t>(spec.val_fraction * static_cast<double>(data.size()));
      const std::size_t n_fit = data.size() - n_val;
      require(n_fit >= 1, ErrorKind::InvalidInput, "fit: no windows left after the held-out split");
      auto val_loss = [&] {
        double l = 0;
        for (std::size_t i = n_fit; i < data.size(); ++i) l += window_nmse(forward(model, xs[i]) + base[i], ys[i]);
        return l / static_cast<double>(n_val);
      };
      double best_val = n_val > 0 ? val_loss() : 0.0;
      Trainable best = model.params;
      model.best_epoch = 0;

      Rng rng = make_rng(spec.seed, 0x73687566ull);
      detail::AdamState adam{model.params.zeros_like(), model.params.zeros_like(), 0};
      std::vector<std::size_t> order(n_fit);
      std::iota(order.begin(), order.end(), 0);
      ForwardCache cache;
      RowVec dy;
      for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0;
        for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
          const std::size_t end = std::min(order.size(), start + spec.batch_size);
          Trainable grads = model.params.zeros_like();
          const double inv = 1.0 / static_cast<double>(end - start);
          for (std::size_t b = start; b < end; ++b) {
            const std::size_t i = order[b];
            const RowVec pred = forward(model, xs[i], &cache) + base[i];
            const double loss = window_nmse(pred, ys[i], &dy);
            if (!std::isfinite(loss))
              throw Error(ErrorKind::Divergence, "fit: non-finite loss at epoch " + std::to_string(epoch));
            epoch_loss += loss;
            backward(model, cache, dy * inv, grads);
          }
          detail::adam_step(model.params, grads, adam, spec.lr);
        }
        epoch_loss /= static_cast<double>(order.size());
        model.loss_log.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
        if (n_val > 0) {
          const double v = val_loss();
          if (v < best_val) {
            best_val = v;
            best = model.params;
            model.best_epoch = epoch + 1;
          }
        }
      }
      if (n_val > 0) {
        model.params = std::move(best);
      } else {
        model.best_epoch = spec.epochs;
      }
      break;
    }
  }
  model.trained = true;
  return model;
}

inline std::vector<CompressedFrame> predict(std::span<const CompressedFrame> history,
                                            const ModelState& model) {
  require(history.size() == model.spec.lookback, ErrorKind::DimensionMismatch,
          "predict: history length must equal lookback");
  require(model.trained, ErrorKind::NotTrained, "predict: model has not been fitted");
  const std::size_t c = history.front().coeffs.size();
  require(c == model.coeff_len, ErrorKind::DimensionMismatch, "predict: coefficient length");
  const double scale = history.back().scale;
  const std::size_t next = history.back().frame_index + 1;
  switch (model.spec.kind) {
    case Kind::Persistence: {
      std::vector<CompressedFrame> out(model.spec.horizon, history.back());
      for (std::size_t h = 0; h < out.size(); ++h) out[h].frame_index = next + h;
      return out;
    }
    case Kind::LinearAr: {
      const Mat x = history_features(history);
      return frames_from_output(detail::base_forecast(model, x), model.spec.horizon, c, scale, next);
    }
    case Kind::LoraTransformer: {
      const Mat x = history_features(history);
      const RowVec y = forward(model, x) + detail::base_forecast(model, x);
      return frames_from_output(y, model.spec.horizon, c, scale, next);
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Evaluation

struct NmseReport {
  std::vector<double> per_step;
  double aggregate = 0;
  std::size_t excluded = 0;  // zero-energy truth frames
};

/// Per-horizon-step NMSE of absolute coefficients averaged over windows.
inline NmseReport nmse(std::span<const std::vector<CompressedFrame>> preds,
                       std::span<const std::vector<CompressedFrame>> truths) {
  require(preds.size() == truths.size() && !preds.empty(), ErrorKind::DimensionMismatch,
          "nmse: window counts differ");
  const std::size_t steps = truths.front().size();
  NmseReport r;
  r.per_step.assign(steps, 0.0);
  std::vector<std::size_t> counted(steps, 0);
  for (std::size_t w = 0; w < preds.size(); ++w) {
    require(preds[w].size() == steps && truths[w].size() == steps, ErrorKind::DimensionMismatch,
            "nmse: step counts differ");
    for (std::size_t s = 0; s < steps; ++s) {
      const auto p = preds[w][s].absolute();
      const auto t = truths[w][s].absolute();
      require(p.size() == t.size(), ErrorKind::DimensionMismatch, "nmse: coefficient counts differ");
      double num = 0, den = 0;
      for (std::size_t i = 0; i < t.size(); ++i) {
        num += std::norm(p[i] - t[i]);
        den += std::norm(t[i]);
      }
      if (den <= 0) {
        ++r.excluded;
        continue;
      }
      r.per_step[s] += num / den;
      ++counted[s];
    }
  }
  std::size_t used = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    if (counted[s] == 0) continue;
    r.per_step[s] /= static_cast<double>(counted[s]);
    r.aggregate += r.per_step[s];
    ++used;
  }
  if (used > 0) r.aggregate /= static_cast<double>(used);
  return r;
}

inline NmseReport nmse(const std::vector<CompressedFrame>& pred,
                       const std::vector<CompressedFrame>& truth) {
  return nmse(std::span<const std::vector<CompressedFrame>>(&pred, 1),
              std::span<const std::vector<CompressedFrame>>(&truth, 1));
}

}  // namespace sagsin::predict
