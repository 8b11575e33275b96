#pragma once

// Sparse autoencoders with ReLU+L1, TopK and BatchTopK activation rules.
//
// Decoder rows are topic directions and are kept at unit norm, so activation
// magnitudes are the per-topic strengths a_k of the collapsed topic model.

#include "saetm/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace saetm::sae {

enum class ActivationKind : std::uint32_t { ReluL1 = 0, TopK = 1, BatchTopK = 2 };

struct ActivationRule {
  ActivationKind kind = ActivationKind::TopK;
  int k = 1;             // TopK / BatchTopK
  double l1_beta = 0.0;  // ReluL1

  static ActivationRule relu_l1(double beta) { return {ActivationKind::ReluL1, 0, beta}; }
  static ActivationRule topk(int k) { return {ActivationKind::TopK, k, 0.0}; }
  static ActivationRule batch_topk(int k) { return {ActivationKind::BatchTopK, k, 0.0}; }
};

std::string to_string(ActivationKind kind);
ActivationKind parse_activation_kind(const std::string& name);

template <typename Scalar>
struct SaeModel {
  Matrix<Scalar> w_enc;  // d_in x K
  Vector<Scalar> b_enc;  // K
  Matrix<Scalar> w_dec;  // K x d_in
  Vector<Scalar> b_dec;  // d_in
  ActivationRule activation;
  // BatchTopK only: per-activation cutoff used when encoding outside a batch.
  std::optional<Scalar> inference_threshold;
  std::int64_t trained_steps = 0;

  Eigen::Index d_in() const { return w_dec.cols(); }
  Eigen::Index n_features() const { return w_dec.rows(); }

  /// Random unit decoder rows, tied encoder, zero biases.
  static SaeModel initialize(Eigen::Index d_in, Eigen::Index n_features, ActivationRule rule,
                             std::uint64_t seed) {
    require(d_in > 0 && n_features > 0, ErrorCode::InvalidArgument, "dimensions must be > 0");
    SaeModel m;
    m.activation = rule;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    m.w_dec.resize(n_features, d_in);
    for (Eigen::Index i = 0; i < m.w_dec.size(); ++i) m.w_dec.data()[i] = static_cast<Scalar>(normal(rng));
    m.normalize_decoder();
    m.w_enc = m.w_dec.transpose();
    m.b_enc = Vector<Scalar>::Zero(n_features);
    m.b_dec = Vector<Scalar>::Zero(d_in);
    return m;
  }

  /// Sets b_dec and shifts b_enc so the encoder sees centred inputs.
  void set_decoder_bias(const Vector<Scalar>& bias) {
    require(bias.size() == d_in(), ErrorCode::DimensionMismatch, "bias must have d_in entries");
    b_dec = bias;
    b_enc = -(w_enc.transpose() * b_dec);
  }

  void normalize_decoder() {
    for (Eigen::Index k = 0; k < w_dec.rows(); ++k) {
      const Scalar norm = w_dec.row(k).norm();
      if (norm > Scalar(0)) w_dec.row(k) /= norm;
    }
  }
};

/// Sparse nonnegative codes. Rows with zero mass have no stored entries.
template <typename Scalar>
struct Activations {
  SparseRows<Scalar> values;  // N x K

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index n_features() const { return values.cols(); }

  /// Row L1 mass s = ||a||_1.
  Vector<Scalar> mass() const {
    Vector<Scalar> s = Vector<Scalar>::Zero(values.rows());
    for (Eigen::Index r = 0; r < values.outerSize(); ++r)
      for (typename SparseRows<Scalar>::InnerIterator it(values, r); it; ++it) s[r] += it.value();
    return s;
  }

  /// theta = a / s on rows with s > 0; zero-mass rows stay empty.
  SparseRows<Scalar> theta() const {
    SparseRows<Scalar> out = values;
    const Vector<Scalar> s = mass();
    for (Eigen::Index r = 0; r < out.outerSize(); ++r) {
      if (s[r] <= Scalar(0)) continue;
      for (typename SparseRows<Scalar>::InnerIterator it(out, r); it; ++it) it.valueRef() /= s[r];
    }
    return out;
  }

  Matrix<Scalar> dense() const { return Matrix<Scalar>(values); }

  static Activations from_dense(const Matrix<Scalar>& a) {
    Activations out;
    out.values = a.sparseView(Scalar(0), Scalar(0));
    out.values.makeCompressed();
    return out;
  }
};

namespace detail {

// Descending by value, lower index first among ties.
template <typename Scalar>
struct RankedEntry {
  Scalar value;
  Eigen::Index col;
  Eigen::Index row;
};

template <typename Scalar>
bool ranks_before(const RankedEntry<Scalar>& a, const RankedEntry<Scalar>& b) {
  if (a.value != b.value) return a.value > b.value;
  if (a.col != b.col) return a.col < b.col;
  return a.row < b.row;
}

}  // namespace detail

/// Keeps the k largest positive entries of each row; everything else is zero.
template <typename Scalar>
Matrix<Scalar> topk_select(const Matrix<Scalar>& pre, int k) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(pre.rows(), pre.cols());
  std::vector<detail::RankedEntry<Scalar>> entries;
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    entries.clear();
    for (Eigen::Index c = 0; c < pre.cols(); ++c)
      if (pre(r, c) > Scalar(0)) entries.push_back({pre(r, c), c, r});
    const auto keep = std::min<std::size_t>(entries.size(), static_cast<std::size_t>(std::max(k, 0)));
    std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(),
                      detail::ranks_before<Scalar>);
    for (std::size_t i = 0; i < keep; ++i) out(r, entries[i].col) = entries[i].value;
  }
  return out;
}

/// Keeps the k * rows largest positive entries across the whole batch.
template <typename Scalar>
Matrix<Scalar> batch_topk_select(const Matrix<Scalar>& pre, int k) {
  Matrix<Scalar> out = Matrix<Scalar>::Zero(pre.rows(), pre.cols());
  std::vector<detail::RankedEntry<Scalar>> entries;
  for (Eigen::Index r = 0; r < pre.rows(); ++r)
    for (Eigen::Index c = 0; c < pre.cols(); ++c)
      if (pre(r, c) > Scalar(0)) entries.push_back({pre(r, c), c, r});
  const auto budget = static_cast<std::size_t>(std::max(k, 0)) * static_cast<std::size_t>(pre.rows());
  const auto keep = std::min(entries.size(), budget);
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(),
                    detail::ranks_before<Scalar>);
  for (std::size_t i = 0; i < keep; ++i) out(entries[i].row, entries[i].col) = entries[i].value;
  return out;
}

/// How BatchTopK models encode: the batch-wide selection, or the calibrated
/// per-activation threshold (falls back to batch selection when no threshold
/// has been calibrated yet).
enum class BatchRule { Batch, Threshold };

template <typename Scalar>
Matrix<Scalar> pre_activations(const SaeModel<Scalar>& model, const Matrix<Scalar>& x) {
  require(x.cols() == model.d_in(), ErrorCode::DimensionMismatch,
          "input has " + std::to_string(x.cols()) + " columns, model expects " +
              std::to_string(model.d_in()));
  return (x * model.w_enc).rowwise() + model.b_enc.transpose();
}

/// Applies the model's activation rule (always rectified) to pre-activations.
template <typename Scalar>
Matrix<Scalar> apply_activation(const SaeModel<Scalar>& model, const Matrix<Scalar>& pre,
                                BatchRule rule = BatchRule::Threshold) {
  switch (model.activation.kind) {
    case ActivationKind::ReluL1:
      return pre.cwiseMax(Scalar(0));
    case ActivationKind::TopK:
      return topk_select(pre, model.activation.k);
    case ActivationKind::BatchTopK:
      if (rule == BatchRule::Threshold && model.inference_threshold) {
        const Scalar cut = *model.inference_threshold;
        return (pre.array() > cut).select(pre, Scalar(0));
      }
      return batch_topk_select(pre, model.activation.k);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown activation kind");
}

template <typename Scalar>
Activations<Scalar> encode(const SaeModel<Scalar>& model, const Matrix<Scalar>& x,
                           BatchRule rule = BatchRule::Threshold) {
  return Activations<Scalar>::from_dense(apply_activation(model, pre_activations(model, x), rule));
}

template <typename Scalar>
Matrix<Scalar> decode(const SaeModel<Scalar>& model, const Activations<Scalar>& acts) {
  require(acts.n_features() == model.n_features(), ErrorCode::DimensionMismatch,
          "activations have " + std::to_string(acts.n_features()) + " features, model has " +
              std::to_string(model.n_features()));
  Matrix<Scalar> out = acts.values * model.w_dec;
  out.rowwise() += model.b_dec.transpose();
  return out;
}

/// 1 - SS_res / SS_tot over all entries, SS_tot centred at the column means.
template <typename Scalar>
double r_squared(const Matrix<Scalar>& x, const Matrix<Scalar>& reconstruction) {
  require(x.rows() > 0, ErrorCode::InvalidArgument, "empty input");
  require(x.rows() == reconstruction.rows() && x.cols() == reconstruction.cols(),
          ErrorCode::DimensionMismatch, "reconstruction shape differs from input");
  const RowVector<Scalar> mean = x.colwise().mean();
  const double ss_tot = static_cast<double>((x.rowwise() - mean).squaredNorm());
  require(ss_tot > 0.0, ErrorCode::DomainError, "constant data: SS_tot = 0");
  const double ss_res = static_cast<double>((x - reconstruction).squaredNorm());
  return 1.0 - ss_res / ss_tot;
}

template <typename Scalar>
double r_squared(const SaeModel<Scalar>& model, const Matrix<Scalar>& x,
                 BatchRule rule = BatchRule::Threshold) {
  return r_squared(x, decode(model, encode(model, x, rule)));
}

/// Unit-normalized decoder rows (K x d_in).
template <typename Scalar>
Matrix<Scalar> feature_directions(const SaeModel<Scalar>& model) {
  Matrix<Scalar> out = model.w_dec;
  for (Eigen::Index k = 0; k < out.rows(); ++k) {
    const Scalar norm = out.row(k).norm();
    if (norm > Scalar(0)) out.row(k) /= norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int batch_size = 256;
  int steps = 1000;
  double learning_rate = 1e-3;
  int k_active = 2;
  double l1_beta = 0.0;
  std::uint64_t seed = 0;
  int dead_feature_window = 1000;
  bool resample_dead = false;
  // Adam
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 0;
};

template <typename Scalar>
struct SaeGradient {
  double loss = 0.0;
  Matrix<Scalar> w_enc;
  Vector<Scalar> b_enc;
  Matrix<Scalar> w_dec;
  Vector<Scalar> b_dec;
  Matrix<Scalar> activations;  // batch x K, selected codes
};

/// Mean over the batch of ||x - x_hat||^2 (+ beta ||a||_1 for ReluL1), with
/// the analytic gradient. Selection masks are treated as constants.
template <typename Scalar>
SaeGradient<Scalar> loss_and_gradient(const SaeModel<Scalar>& model, const Matrix<Scalar>& x) {
  const auto batch = static_cast<Scalar>(x.rows());
  const Matrix<Scalar> pre = pre_activations(model, x);
  SaeGradient<Scalar> g;
  g.activations = apply_activation(model, pre, BatchRule::Batch);
  Matrix<Scalar> recon = g.activations * model.w_dec;
  recon.rowwise() += model.b_dec.transpose();
  const Matrix<Scalar> residual = recon - x;

  const bool l1 = model.activation.kind == ActivationKind::ReluL1;
  const auto beta = static_cast<Scalar>(model.activation.l1_beta);
  g.loss = static_cast<double>(residual.squaredNorm() / batch);
  if (l1) g.loss += static_cast<double>(beta * g.activations.sum() / batch);

  const Matrix<Scalar> d_recon = (Scalar(2) / batch) * residual;
  g.w_dec = g.activations.transpose() * d_recon;
  g.b_dec = d_recon.colwise().sum().transpose();
  Matrix<Scalar> d_act = d_recon * model.w_dec.transpose();
  if (l1) d_act.array() += beta / batch;
  const Matrix<Scalar> d_pre = (g.activations.array() > Scalar(0)).select(d_act, Scalar(0));
  g.w_enc = x.transpose() * d_pre;
  g.b_enc = d_pre.colwise().sum().transpose();
  return g;
}

/// Source of training minibatches.
template <typename Scalar>
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Eigen::Index dim() const = 0;
  virtual Matrix<Scalar> next(int batch_size) = 0;
};

/// Shuffled epochs over an in-memory matrix.
template <typename Scalar>
class MatrixBatchSource final : public BatchSource<Scalar> {
 public:
  MatrixBatchSource(const Matrix<Scalar>& data, std::uint64_t seed) : data_(data), rng_(seed) {
    require(data_.rows() > 0, ErrorCode::InvalidArgument, "empty training data");
    order_.resize(static_cast<std::size_t>(data_.rows()));
    reshuffle();
  }

  Eigen::Index dim() const override { return data_.cols(); }

  Matrix<Scalar> next(int batch_size) override {
    Matrix<Scalar> out(batch_size, data_.cols());
    for (int i = 0; i < batch_size; ++i) {
      if (cursor_ == order_.size()) reshuffle();
      out.row(i) = data_.row(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), Eigen::Index{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  const Matrix<Scalar>& data_;
  std::mt19937_64 rng_;
  std::vector<Eigen::Index> order_;
  std::size_t cursor_ = 0;
};

struct TrainReport {
  std::vector<double> losses;           // per step
  std::vector<int> dead_features;       // inactive for >= dead_feature_window steps at the end
  std::int64_t resampled = 0;
};

namespace detail {

template <typename Derived>
struct AdamSlot {
  Derived m;
  Derived v;
  void reset_like(const Derived& p) {
    m = Derived::Zero(p.rows(), p.cols());
    v = Derived::Zero(p.rows(), p.cols());
  }
};

template <typename Derived, typename Scalar>
void adam_update(Derived& param, const Derived& grad, AdamSlot<Derived>& slot, const TrainConfig& cfg,
                 std::int64_t t) {
  const auto b1 = static_cast<Scalar>(cfg.adam_beta1);
  const auto b2 = static_cast<Scalar>(cfg.adam_beta2);
  slot.m = b1 * slot.m + (Scalar(1) - b1) * grad;
  slot.v = b2 * slot.v + (Scalar(1) - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  const auto step = static_cast<Scalar>(cfg.learning_rate * std::sqrt(c2) / c1);
  const auto eps = static_cast<Scalar>(cfg.adam_eps);
  param.array() -= step * slot.m.array() / (slot.v.array().sqrt() + eps);
}

}  // namespace detail

/// Trains `model` in place with Adam on minibatches from `source`.
///
/// After every step the decoder rows are renormalized. For BatchTopK the
/// inference threshold is the running mean of the smallest retained
/// activation per batch. Throws Error(NonFinite) when the loss diverges.
template <typename Scalar>
TrainReport train(SaeModel<Scalar>& model, BatchSource<Scalar>& source, const TrainConfig& cfg,
                  const std::function<void(std::int64_t, double)>& on_step = {}) {
  require(cfg.batch_size >= 1, ErrorCode::InvalidArgument, "batch_size must be >= 1");
  require(cfg.steps >= 1, ErrorCode::InvalidArgument, "steps must be >= 1");
  require(source.dim() == model.d_in(), ErrorCode::DimensionMismatch, "batch dimension differs from model");
  if (model.activation.kind != ActivationKind::ReluL1)
    require(model.activation.k >= 1 && model.activation.k <= model.n_features(),
            ErrorCode::InvalidArgument, "k_active must lie in [1, K]");

  using Mat = Matrix<Scalar>;
  using Vec = Vector<Scalar>;
  detail::AdamSlot<Mat> s_wenc, s_wdec;
  detail::AdamSlot<Vec> s_benc, s_bdec;
  s_wenc.reset_like(model.w_enc);
  s_wdec.reset_like(model.w_dec);
  s_benc.reset_like(model.b_enc);
  s_bdec.reset_like(model.b_dec);

  TrainReport report;
  report.losses.reserve(static_cast<std::size_t>(cfg.steps));
  const auto n_features = model.n_features();
  std::vector<std::int64_t> last_active(static_cast<std::size_t>(n_features), 0);
  std::mt19937_64 rng(cfg.seed ^ 0x5ae5ae5aULL);
  double threshold_sum = 0.0;
  std::int64_t threshold_count = 0;

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    const Mat batch = source.next(cfg.batch_size);
    SaeGradient<Scalar> g = loss_and_gradient(model, batch);
    if (!std::isfinite(g.loss))
      throw Error(ErrorCode::NonFinite, "non-finite loss at step " + std::to_string(step) +
                                            " (trained_steps=" + std::to_string(model.trained_steps) + ")");
    report.losses.push_back(g.loss);

    detail::adam_update<Mat, Scalar>(model.w_enc, g.w_enc, s_wenc, cfg, step);
    detail::adam_update<Vec, Scalar>(model.b_enc, g.b_enc, s_benc, cfg, step);
    detail::adam_update<Mat, Scalar>(model.w_dec, g.w_dec, s_wdec, cfg, step);
    detail::adam_update<Vec, Scalar>(model.b_dec, g.b_dec, s_bdec, cfg, step);
    model.normalize_decoder();
    ++model.trained_steps;

    for (Eigen::Index k = 0; k < n_features; ++k)
      if ((g.activations.col(k).array() > Scalar(0)).any()) last_active[static_cast<std::size_t>(k)] = step;

    if (model.activation.kind == ActivationKind::BatchTopK) {
      Scalar smallest = std::numeric_limits<Scalar>::max();
      bool any = false;
      for (Eigen::Index i = 0; i < g.activations.size(); ++i) {
        const Scalar v = g.activations.data()[i];
        if (v > Scalar(0)) {
          smallest = std::min(smallest, v);
          any = true;
        }
      }
      if (any) {
        threshold_sum += static_cast<double>(smallest);
        ++threshold_count;
      }
    }

    if (cfg.resample_dead && cfg.dead_feature_window > 0 && step % cfg.dead_feature_window == 0) {
      Mat recon = g.activations * model.w_dec;
      recon.rowwise() += model.b_dec.transpose();
      const Mat residual = batch - recon;
      std::uniform_int_distribution<Eigen::Index> pick(0, batch.rows() - 1);
      for (Eigen::Index k = 0; k < n_features; ++k) {
        if (step - last_active[static_cast<std::size_t>(k)] < cfg.dead_feature_window) continue;
        RowVector<Scalar> dir = residual.row(pick(rng));
        const Scalar norm = dir.norm();
        if (!(norm > Scalar(0))) continue;
        dir /= norm;
        model.w_dec.row(k) = dir;
        model.w_enc.col(k) = dir.transpose();
        model.b_enc[k] = -dir.dot(model.b_dec.transpose());
        s_wdec.m.row(k).setZero();
        s_wdec.v.row(k).setZero();
        s_wenc.m.col(k).setZero();
        s_wenc.v.col(k).setZero();
        s_benc.m[k] = Scalar(0);
        s_benc.v[k] = Scalar(0);
        last_active[static_cast<std::size_t>(k)] = step;
        ++report.resampled;
      }
    }

    if (on_step) on_step(step, g.loss);
  }

  if (model.activation.kind == ActivationKind::BatchTopK && threshold_count > 0)
    model.inference_threshold = static_cast<Scalar>(threshold_sum / static_cast<double>(threshold_count));

  for (Eigen::Index k = 0; k < n_features; ++k)
    if (cfg.steps - last_active[static_cast<std::size_t>(k)] >= cfg.dead_feature_window)
      report.dead_features.push_back(static_cast<int>(k));
  return report;
}

/// Builds a model sized by `expansion_factor`, initializes b_dec at the data
/// mean, and trains it on `data`.
template <typename Scalar>
SaeModel<Scalar> train_on_matrix(const Matrix<Scalar>& data, int expansion_factor, ActivationKind kind,
                                 const TrainConfig& cfg, TrainReport* report = nullptr) {
  require(expansion_factor >= 1, ErrorCode::InvalidArgument, "expansion_factor must be >= 1");
  ActivationRule rule{kind, cfg.k_active, cfg.l1_beta};
  auto model = SaeModel<Scalar>::initialize(data.cols(), data.cols() * expansion_factor, rule, cfg.seed);
  model.set_decoder_bias(data.colwise().mean().transpose());
  MatrixBatchSource<Scalar> source(data, cfg.seed + 1);
  TrainReport r = train(model, source, cfg);
  if (report) *report = std::move(r);
  return model;
}

}  // namespace saetm::sae
