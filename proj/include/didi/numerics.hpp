#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "didi/errors.hpp"
#include "didi/rng.hpp"

namespace didi {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct ParamBlock {
  std::string name;
  std::vector<Index> shape;
  Index offset = 0;
  Index size = 0;

  bool operator==(const ParamBlock&) const = default;
};

/// Flat parameter vector plus its layout and adaptive-moment state.
/// Networks refer to blocks by offset; the store itself is passed explicitly
/// to every forward/backward call, so a frozen store can be shared by readers.
class ParamStore {
 public:
  Index add_block(std::string name, std::vector<Index> shape) {
    Index size = 1;
    for (Index s : shape) {
      require(s > 0, "parameter block '" + name + "' has a non-positive extent");
      size *= s;
    }
    const Index offset = values_.size();
    layout_.push_back({std::move(name), std::move(shape), offset, size});
    values_.conservativeResize(offset + size);
    values_.segment(offset, size).setZero();
    first_moment_ = Vec::Zero(values_.size());
    second_moment_ = Vec::Zero(values_.size());
    step_ = 0;
    return offset;
  }

  Index size() const noexcept { return values_.size(); }
  const std::vector<ParamBlock>& layout() const noexcept { return layout_; }

  const Vec& values() const noexcept { return values_; }
  Vec& values() noexcept { return values_; }
  const Vec& first_moment() const noexcept { return first_moment_; }
  const Vec& second_moment() const noexcept { return second_moment_; }
  long step() const noexcept { return step_; }

  const double* data() const noexcept { return values_.data(); }

  bool same_layout(const ParamStore& other) const { return layout_ == other.layout_; }

  const ParamBlock& block_containing(Index i) const {
    for (const auto& b : layout_) {
      if (i >= b.offset && i < b.offset + b.size) return b;
    }
    throw Error(ErrorKind::contract, "parameter index out of range");
  }

  void set_optimizer_state(Vec m, Vec v, long step) {
    require(m.size() == size() && v.size() == size(), "optimizer state length mismatch");
    first_moment_ = std::move(m);
    second_moment_ = std::move(v);
    step_ = step;
  }

 private:
  friend struct AdamAccess;
  std::vector<ParamBlock> layout_;
  Vec values_;
  Vec first_moment_;
  Vec second_moment_;
  long step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamAccess {
  static void step(ParamStore& store, const Vec& grad, const AdamConfig& cfg) {
    require(grad.size() == store.size(), "gradient length does not match parameter length");
    for (Index i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(grad[i])) {
        throw Error(ErrorKind::divergence,
                    "non-finite gradient in parameter block '" + store.block_containing(i).name + "'");
      }
    }
    ++store.step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(store.step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(store.step_));
    auto& m = store.first_moment_;
    auto& v = store.second_moment_;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    store.values_.array() -=
        cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
};

/// Bias-corrected adaptive-moment update. Throws a divergence error naming the
/// offending block when the gradient is not finite.
inline void adam_step(ParamStore& store, const Vec& grad, const AdamConfig& cfg) {
  AdamAccess::step(store, grad, cfg);
}

/// Scales all gradients jointly so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(std::initializer_list<Vec*> grads, double max_norm) {
  double sq = 0.0;
  for (const Vec* g : grads) sq += g->squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const double scale = max_norm / norm;
    for (Vec* g : grads) *g *= scale;
  }
  return norm;
}

enum class Activation { tanh, relu, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw Error(ErrorKind::config, "unknown activation '" + s + "'");
}

/// Per-layer inputs and post-activation outputs from a forward pass.
struct Tape {
  std::vector<Mat> inputs;
  std::vector<Mat> outputs;

  bool empty() const noexcept { return inputs.empty(); }
  void clear() {
    inputs.clear();
    outputs.clear();
  }
};

/// Plain dense stack. Hidden layers use `hidden`; the final layer is identity.
/// Batches are column-major: one sample per column.
class DenseNet {
 public:
  DenseNet() = default;

  DenseNet(ParamStore& store, const std::string& name, std::vector<int> widths,
           Activation hidden = Activation::tanh)
      : name_(name), widths_(std::move(widths)), hidden_(hidden) {
    require(widths_.size() >= 2, "a dense net needs at least an input and an output width");
    for (int w : widths_) require(w > 0, "layer widths must be positive");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      const int in = widths_[l];
      const int out = widths_[l + 1];
      weight_offsets_.push_back(store.add_block(name + ".W" + std::to_string(l), {out, in}));
      bias_offsets_.push_back(store.add_block(name + ".b" + std::to_string(l), {out}));
    }
  }

  /// Glorot-uniform weights, zero biases. `final_scale` shrinks the output layer.
  void initialize(ParamStore& store, Rng& rng, double final_scale = 1.0) const {
    for (std::size_t l = 0; l < layers(); ++l) {
      const int in = widths_[l];
      const int out = widths_[l + 1];
      double a = std::sqrt(6.0 / (in + out));
      if (l + 1 == layers()) a *= final_scale;
      auto w = store.values().segment(weight_offsets_[l], Index(in) * out);
      for (Index i = 0; i < w.size(); ++i) w[i] = rng.uniform(-a, a);
      store.values().segment(bias_offsets_[l], out).setZero();
    }
  }

  const std::string& name() const noexcept { return name_; }
  const std::vector<int>& widths() const noexcept { return widths_; }
  Activation hidden_activation() const noexcept { return hidden_; }
  std::size_t layers() const noexcept { return widths_.size() - 1; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }

  Eigen::Map<const Mat> weight(const ParamStore& s, std::size_t l) const {
    return {s.data() + weight_offsets_[l], widths_[l + 1], widths_[l]};
  }
  Eigen::Map<const Vec> bias(const ParamStore& s, std::size_t l) const {
    return {s.data() + bias_offsets_[l], widths_[l + 1]};
  }
  Index weight_offset(std::size_t l) const { return weight_offsets_[l]; }
  Index bias_offset(std::size_t l) const { return bias_offsets_[l]; }

  Mat forward(const ParamStore& store, const Mat& x, Tape* tape = nullptr) const {
    if (x.rows() != input_dim()) {
      throw Error(ErrorKind::contract, name_ + ": input has " + std::to_string(x.rows()) +
                                           " rows, expected " + std::to_string(input_dim()));
    }
    if (tape) tape->clear();
    Mat h = x;
    for (std::size_t l = 0; l < layers(); ++l) {
      Mat z = weight(store, l) * h;
      z.colwise() += bias(store, l);
      apply_activation(z, l + 1 == layers() ? Activation::identity : hidden_);
      if (tape) {
        tape->inputs.push_back(std::move(h));
        tape->outputs.push_back(z);
      }
      h = std::move(z);
    }
    return h;
  }

  Vec forward_one(const ParamStore& store, const Vec& x, Tape* tape = nullptr) const {
    return forward(store, Mat(x), tape).col(0);
  }

  /// Accumulates d<upstream, output>/d(params) into `param_grad` (full store
  /// length) and returns the gradient with respect to the input batch.
  Mat backward(const ParamStore& store, const Tape& tape, const Mat& upstream, Vec& param_grad) const {
    if (tape.empty() || tape.inputs.size() != layers()) {
      throw Error(ErrorKind::contract, name_ + ": backward called without a forward tape");
    }
    require(param_grad.size() == store.size(), name_ + ": gradient buffer has the wrong length");
    require(upstream.rows() == output_dim() && upstream.cols() == tape.outputs.back().cols(),
            name_ + ": upstream shape does not match the recorded output");
    Mat delta = upstream;
    for (std::size_t k = layers(); k-- > 0;) {
      const Activation act = k + 1 == layers() ? Activation::identity : hidden_;
      const Mat& y = tape.outputs[k];
      switch (act) {
        case Activation::tanh: delta.array() *= 1.0 - y.array().square(); break;
        case Activation::relu: delta.array() *= (y.array() > 0.0).cast<double>(); break;
        case Activation::identity: break;
      }
      const int in = widths_[k];
      const int out = widths_[k + 1];
      Eigen::Map<Mat> gw(param_grad.data() + weight_offsets_[k], out, in);
      gw.noalias() += delta * tape.inputs[k].transpose();
      param_grad.segment(bias_offsets_[k], out) += delta.rowwise().sum();
      delta = weight(store, k).transpose() * delta;
    }
    return delta;
  }

 private:
  static void apply_activation(Mat& z, Activation a) {
    switch (a) {
      case Activation::tanh: z = z.array().tanh(); break;
      case Activation::relu: z = z.cwiseMax(0.0); break;
      case Activation::identity: break;
    }
  }

  std::string name_;
  std::vector<int> widths_;
  Activation hidden_ = Activation::tanh;
  std::vector<Index> weight_offsets_;
  std::vector<Index> bias_offsets_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  Index worst_index = -1;
  bool pass = false;
};

/// Relative error |a - n| / max(|a|, |n|, floor). Entries whose magnitude is
/// below `floor` are therefore compared on an absolute scale of `floor`.
inline constexpr double kGradCheckFloor = 1e-3;

/// Compares `analytic` against central differences of `f` around `x0`.
inline GradCheckReport gradient_check(const std::function<double(const Vec&)>& f, const Vec& x0,
                                      const Vec& analytic, double tol, double step = 1e-5,
                                      double floor = kGradCheckFloor) {
  require(analytic.size() == x0.size(), "gradient_check: length mismatch");
  GradCheckReport report;
  Vec x = x0;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = f(x);
    x[i] = orig - step;
    const double fm = f(x);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (!(rel <= report.max_rel_err)) {
      report.max_rel_err = rel;
      report.worst_index = i;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

/// Checks DenseNet::backward for the scalar <u, net(x)> with a fixed random u,
/// over every parameter and every input coordinate.
inline GradCheckReport finite_diff_check(const DenseNet& net, const ParamStore& store, const Mat& x,
                                         double tol, std::uint64_t seed = 17, double step = 1e-5) {
  Rng rng(seed);
  Mat u(net.output_dim(), x.cols());
  for (Index i = 0; i < u.size(); ++i) u.data()[i] = rng.normal();

  Tape tape;
  net.forward(store, x, &tape);
  Vec pgrad = Vec::Zero(store.size());
  const Mat xgrad = net.backward(store, tape, u, pgrad);

  Vec analytic(store.size() + x.size());
  analytic << pgrad, Eigen::Map<const Vec>(xgrad.data(), xgrad.size());

  Vec x0(store.size() + x.size());
  x0 << store.values(), Eigen::Map<const Vec>(x.data(), x.size());

  ParamStore scratch = store;
  const auto f = [&](const Vec& p) {
    scratch.values() = p.head(store.size());
    const Mat xi = Eigen::Map<const Mat>(p.data() + store.size(), x.rows(), x.cols());
    return (u.array() * net.forward(scratch, xi).array()).sum();
  };
  return gradient_check(f, x0, analytic, tol, step);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

/// Numerically stable log-softmax over each column.
inline Mat log_softmax_cols(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

inline Mat standard_normal(Index rows, Index cols, Rng& rng) {
  Mat m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

}  // namespace didi
