#pragma once

// Trajectory-segment DDPM: schedules, forward noising, the Gaussian
// posterior, epsilon-prediction training, ancestral sampling and
// gradient-guided sampling with start-state inpainting.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "didi/cost.hpp"
#include "didi/dataio.hpp"
#include "didi/errors.hpp"
#include "didi/numerics.hpp"
#include "didi/rng.hpp"

namespace didi {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw Error(ErrorKind::config, "unknown schedule kind '" + s + "'");
}

/// beta/alpha/alpha_bar tables. Steps are 1-indexed (n = 1..N); alpha_bar(0) = 1.
struct NoiseSchedule {
  ScheduleParams params;
  Vec betas;
  Vec alphas;
  Vec alpha_bars;

  int steps() const noexcept { return static_cast<int>(betas.size()); }
  double beta(int n) const { return betas[n - 1]; }
  double alpha(int n) const { return alphas[n - 1]; }
  double alpha_bar(int n) const { return n == 0 ? 1.0 : alpha_bars[n - 1]; }
  double posterior_variance(int n) const { return (1.0 - alpha_bar(n - 1)) / (1.0 - alpha_bar(n)) * beta(n); }

  void check_step(int n) const {
    if (n < 1 || n > steps()) {
      throw Error(ErrorKind::contract,
                  "diffusion step " + std::to_string(n) + " outside [1, " + std::to_string(steps()) + "]");
    }
  }
};

inline NoiseSchedule make_schedule(int steps, double beta_min, double beta_max,
                                   ScheduleKind kind = ScheduleKind::linear) {
  require_config(steps >= 1, "schedule needs at least one step");
  require_config(beta_min > 0 && beta_min <= beta_max && beta_max < 1, "schedule needs 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.params = {kind == ScheduleKind::linear ? "linear" : "cosine", steps, beta_min, beta_max};
  s.betas.resize(steps);
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < steps; ++i)
      s.betas[i] = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / (steps - 1);
  } else {
    const double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + off) / (1.0 + off) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < steps; ++i) {
      const double b = 1.0 - f(i + 1.0) / f(static_cast<double>(i));
      s.betas[i] = std::clamp(b, beta_min, beta_max);
    }
  }
  s.alphas = 1.0 - s.betas.array();
  s.alpha_bars.resize(steps);
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

inline NoiseSchedule make_schedule(const ScheduleParams& p) {
  return make_schedule(p.steps, p.beta_min, p.beta_max, schedule_kind_from_string(p.kind));
}

/// tau^n = sqrt(abar_n) tau^0 + sqrt(1 - abar_n) eps.
inline Mat q_sample(const Mat& clean, int n, const Mat& noise, const NoiseSchedule& sched) {
  sched.check_step(n);
  require(clean.rows() == noise.rows() && clean.cols() == noise.cols(), "q_sample: noise shape mismatch");
  const double ab = sched.alpha_bar(n);
  return std::sqrt(ab) * clean + std::sqrt(1.0 - ab) * noise;
}

struct PosteriorParams {
  Mat mean;
  double variance = 0.0;
};

/// Mean and variance of q(tau^{n-1} | tau^n, tau^0).
inline PosteriorParams posterior_params(const Mat& clean, const Mat& noisy, int n, const NoiseSchedule& sched) {
  sched.check_step(n);
  const double ab = sched.alpha_bar(n);
  const double ab_prev = sched.alpha_bar(n - 1);
  const double b = sched.beta(n);
  const double c0 = std::sqrt(ab_prev) * b / (1.0 - ab);
  const double cn = std::sqrt(sched.alpha(n)) * (1.0 - ab_prev) / (1.0 - ab);
  return {c0 * clean + cn * noisy, (1.0 - ab_prev) / (1.0 - ab) * b};
}

/// Sinusoidal features of the diffusion step: [sin(n w_i), cos(n w_i)],
/// w_i = 10000^(-i / (dim/2)).
inline Vec step_embedding(int n, int dim) {
  Vec e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double w = std::pow(10000.0, -static_cast<double>(i) / half);
    e[2 * i] = std::sin(n * w);
    e[2 * i + 1] = std::cos(n * w);
  }
  return e;
}

/// epsilon-prediction network on (noisy segment, embedded step).
struct EpsModel {
  static constexpr int kEmbedDim = 16;

  SegmentLayout layout;
  DenseNet net;

  static EpsModel create(ParamStore& store, const SegmentLayout& layout, const std::vector<int>& hidden,
                         Activation act = Activation::tanh) {
    std::vector<int> widths{layout.dim() + kEmbedDim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(layout.dim());
    return {layout, DenseNet(store, "eps", widths, act)};
  }

  int dim() const { return layout.dim(); }

  Mat input(const Mat& x, std::span<const int> steps) const {
    require(x.rows() == dim(), "eps model: segment dimension mismatch");
    require(static_cast<Index>(steps.size()) == x.cols(), "eps model: one step index per column required");
    Mat in(dim() + kEmbedDim, x.cols());
    in.topRows(dim()) = x;
    for (Index j = 0; j < x.cols(); ++j) in.col(j).tail(kEmbedDim) = step_embedding(steps[j], kEmbedDim);
    return in;
  }

  Mat predict(const ParamStore& store, const Mat& x, std::span<const int> steps, Tape* tape = nullptr) const {
    return net.forward(store, input(x, steps), tape);
  }

  /// Callable form used by the samplers: all columns share step n.
  std::function<Mat(const Mat&, int)> as_fn(const ParamStore& store) const {
    return [this, &store](const Mat& x, int n) {
      const std::vector<int> steps(static_cast<std::size_t>(x.cols()), n);
      return predict(store, x, steps);
    };
  }
};

/// Per-column draws for one evaluation of the epsilon objective.
struct NoiseDraws {
  std::vector<int> steps;
  Mat noise;
};

inline NoiseDraws draw_noise(Index dim, Index count, int num_steps, Rng& rng) {
  NoiseDraws d;
  d.steps.resize(static_cast<std::size_t>(count));
  for (auto& n : d.steps) n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_steps)));
  d.noise = standard_normal(dim, count, rng);
  return d;
}

inline Mat q_sample_columns(const Mat& clean, const NoiseDraws& d, const NoiseSchedule& sched) {
  Mat out(clean.rows(), clean.cols());
  for (Index j = 0; j < clean.cols(); ++j) {
    const int n = d.steps[static_cast<std::size_t>(j)];
    sched.check_step(n);
    const double ab = sched.alpha_bar(n);
    out.col(j) = std::sqrt(ab) * clean.col(j) + std::sqrt(1.0 - ab) * d.noise.col(j);
  }
  return out;
}

struct EpsLossResult {
  double loss = 0.0;
  Mat per_column;  // 1 x B mean-per-element residual of each column
};

/// Mean-per-element ||eps - eps_psi(tau^n, n)||^2 for fixed draws. When
/// `param_grad` is given it receives d loss / d psi (accumulated); when
/// `clean_grad` is given it receives d loss / d clean batch.
inline EpsLossResult eps_loss_with(const EpsModel& model, const ParamStore& store, const Mat& clean,
                                   const NoiseDraws& draws, const NoiseSchedule& sched, Vec* param_grad = nullptr,
                                   Mat* clean_grad = nullptr) {
  require(clean.cols() > 0, "eps loss needs a non-empty batch");
  const Mat noisy = q_sample_columns(clean, draws, sched);
  const bool need_tape = param_grad || clean_grad;
  Tape tape;
  const Mat pred = model.predict(store, noisy, draws.steps, need_tape ? &tape : nullptr);
  const Mat resid = draws.noise - pred;
  const double scale = 1.0 / static_cast<double>(resid.size());
  EpsLossResult r;
  r.loss = resid.squaredNorm() * scale;
  r.per_column = resid.colwise().squaredNorm() / static_cast<double>(resid.rows());
  if (need_tape) {
    const Mat upstream = -2.0 * scale * resid;
    Vec scratch;
    Vec& pg = param_grad ? *param_grad : (scratch = Vec::Zero(store.size()));
    const Mat in_grad = model.net.backward(store, tape, upstream, pg);
    if (clean_grad) {
      clean_grad->resize(clean.rows(), clean.cols());
      for (Index j = 0; j < clean.cols(); ++j)
        clean_grad->col(j) = std::sqrt(sched.alpha_bar(draws.steps[static_cast<std::size_t>(j)])) *
                             in_grad.col(j).head(model.dim());
    }
  }
  return r;
}

/// Draws n uniform in [1, N] and eps ~ N(0, I) per column, then evaluates the objective.
inline EpsLossResult eps_loss(const EpsModel& model, const ParamStore& store, const Mat& clean,
                              const NoiseSchedule& sched, Rng& rng, Vec* param_grad = nullptr) {
  require(clean.cols() > 0, "eps loss needs a non-empty batch");
  const NoiseDraws d = draw_noise(clean.rows(), clean.cols(), sched.steps(), rng);
  return eps_loss_with(model, store, clean, d, sched, param_grad);
}

/// Mean prior residual over `draws` independent (n, eps) draws per segment.
inline double prior_residual(const EpsModel& model, const ParamStore& store, const NoiseSchedule& sched,
                             const Mat& segments, Rng& rng, int draws = 8) {
  require(segments.cols() > 0, "prior residual needs segments");
  double total = 0.0;
  for (int k = 0; k < draws; ++k) total += eps_loss(model, store, segments, sched, rng).loss;
  return total / draws;
}

// ---------------------------------------------------------------------------
// Training

struct PriorTrainConfig {
  std::vector<int> hidden{256, 256};
  int steps = 3000;
  int batch = 128;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
};

class PriorTrainer {
 public:
  PriorTrainer(const Mat& normalized_data, const SegmentLayout& layout, NoiseSchedule sched, PriorTrainConfig cfg)
      : data_(normalized_data), sched_(std::move(sched)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    if (data_.cols() == 0) throw Error(ErrorKind::empty_dataset, "cannot train a prior on an empty dataset");
    require(data_.rows() == layout.dim(), "prior: dataset dimension does not match layout");
    model_ = EpsModel::create(store_, layout, cfg_.hidden);
    Rng init = rng_.fork(0xE95);
    model_.net.initialize(store_, init);
  }

  double step() {
    Mat batch(data_.rows(), cfg_.batch);
    for (int j = 0; j < cfg_.batch; ++j) batch.col(j) = data_.col(static_cast<Index>(rng_.below(data_.cols())));
    Vec grad = Vec::Zero(store_.size());
    const double loss = eps_loss(model_, store_, batch, sched_, rng_, &grad).loss;
    if (!std::isfinite(loss)) throw TrainingError(step_, "prior loss is not finite");
    clip_global_norm({&grad}, cfg_.clip_norm);
    try {
      adam_step(store_, grad, cfg_.adam);
    } catch (const Error& e) {
      throw TrainingError(step_, e.what());
    }
    ++step_;
    losses_.push_back(loss);
    return loss;
  }

  void run(int steps) {
    for (int i = 0; i < steps; ++i) step();
  }

  const EpsModel& model() const noexcept { return model_; }
  const ParamStore& store() const noexcept { return store_; }
  const NoiseSchedule& schedule() const noexcept { return sched_; }
  const std::vector<double>& losses() const noexcept { return losses_; }
  long steps_done() const noexcept { return step_; }

  Checkpoint checkpoint() const {
    Checkpoint c = make_checkpoint("prior", {{model_.net.name(), model_.net.widths(), model_.net.hidden_activation()}},
                                   store_);
    c.schedule = sched_.params;
    c.train_step = step_;
    c.seed = rng_.seed();
    c.rng_position = rng_.position();
    c.meta["horizon"] = std::to_string(model_.layout.horizon);
    c.meta["state_dim"] = std::to_string(model_.layout.state_dim);
    c.meta["action_dim"] = std::to_string(model_.layout.action_dim);
    return c;
  }

  void restore(const Checkpoint& c) {
    restore_into(c, store_);
    step_ = c.train_step;
    rng_ = Rng(c.seed, c.rng_position);
  }

 private:
  Mat data_;
  NoiseSchedule sched_;
  PriorTrainConfig cfg_;
  Rng rng_;
  ParamStore store_;
  EpsModel model_;
  long step_ = 0;
  std::vector<double> losses_;
};

/// Rebuilds a frozen prior from its checkpoint.
struct LoadedPrior {
  ParamStore store;
  EpsModel model;
  NoiseSchedule schedule;
};

inline std::vector<int> hidden_widths(const NetworkSpec& spec) {
  return {spec.widths.begin() + 1, spec.widths.end() - 1};
}

inline LoadedPrior load_prior(const Checkpoint& c) {
  if (c.kind != "prior") throw Error(ErrorKind::config, "expected a prior checkpoint, got '" + c.kind + "'");
  if (!c.schedule) throw Error(ErrorKind::io, "prior checkpoint carries no noise schedule");
  LoadedPrior p;
  const SegmentLayout layout{std::stoi(c.meta_at("horizon")), std::stoi(c.meta_at("state_dim")),
                             std::stoi(c.meta_at("action_dim"))};
  p.model = EpsModel::create(p.store, layout, hidden_widths(c.networks.at(0)), c.networks.at(0).activation);
  restore_into(c, p.store);
  p.schedule = make_schedule(*c.schedule);
  return p;
}

// ---------------------------------------------------------------------------
// Sampling

using EpsFn = std::function<Mat(const Mat&, int)>;

/// Gradient guidance for the reverse process. `discriminator` returns
/// log q_phi(z | x) for the bound target skill at noise level n; `reward`
/// returns R(x). Both write their gradient with respect to x.
struct GuidanceSpec {
  std::function<double(const Vec& x, int n, Vec& grad)> discriminator;
  std::function<double(const Vec& x, Vec& grad)> reward;
  double scale = 1.0;
  std::optional<Vec> target_skill;

  void validate() const {
    if (target_skill && !discriminator) {
      throw Error(ErrorKind::config, "guidance names a target skill but has no discriminator");
    }
  }
};

struct SampleOptions {
  bool inject_noise = true;
  std::optional<Mat> condition;  // state_dim x count, written over the first state after every step
  int state_dim = 0;
};

namespace detail {

inline void inpaint(Mat& x, const SampleOptions& opt) {
  if (!opt.condition) return;
  require(opt.condition->rows() == opt.state_dim && opt.condition->cols() == x.cols(),
          "inpainting condition has the wrong shape");
  x.topRows(opt.state_dim) = *opt.condition;
}

inline Mat reverse_process(const EpsFn& eps, const NoiseSchedule& sched, Rng& rng, Index count, Index dim,
                           const SampleOptions& opt, const GuidanceSpec* guide, CostAudit* audit) {
  Mat x = standard_normal(dim, count, rng);
  inpaint(x, opt);
  for (int n = sched.steps(); n >= 1; --n) {
    const Mat e = eps(x, n);
    if (audit) audit->eps_forwards += static_cast<std::uint64_t>(count);
    Mat mean = (x - (sched.beta(n) / std::sqrt(1.0 - sched.alpha_bar(n))) * e) / std::sqrt(sched.alpha(n));
    const double var = sched.posterior_variance(n);
    if (guide) {
      for (Index j = 0; j < count; ++j) {
        Vec g = Vec::Zero(dim);
        const Vec xj = x.col(j);
        if (guide->discriminator) {
          Vec gd;
          guide->discriminator(xj, n, gd);
          g += gd;
        }
        if (guide->reward) {
          Vec gr;
          guide->reward(xj, gr);
          g += gr;
        }
        if (audit) ++audit->guidance_evals;
        if (!g.allFinite()) throw GuidedSamplingError(n, "guidance gradient is not finite");
        if (guide->scale != 0.0) mean.col(j) += guide->scale * var * g;
      }
    }
    if (n > 1 && opt.inject_noise) {
      x = mean + std::sqrt(var) * standard_normal(dim, count, rng);
    } else {
      x = std::move(mean);
    }
    inpaint(x, opt);
  }
  return x;
}

}  // namespace detail

/// Ancestral sampling from tau^N ~ N(0, I) with fixed reverse variance beta~_n.
inline Mat ddpm_sample(const EpsFn& eps, const NoiseSchedule& sched, Rng& rng, Index count, Index dim,
                       const SampleOptions& opt = {}, CostAudit* audit = nullptr) {
  return detail::reverse_process(eps, sched, rng, count, dim, opt, nullptr, audit);
}

/// Reverse process whose mean is shifted by scale * beta~_n * g at every step,
/// with the start state inpainted. One guidance evaluation per step.
inline Vec guided_sample(const EpsFn& eps, const NoiseSchedule& sched, const GuidanceSpec& guide, const Vec& start_state,
                         Index dim, Rng& rng, CostAudit* audit = nullptr) {
  guide.validate();
  SampleOptions opt;
  opt.state_dim = static_cast<int>(start_state.size());
  opt.condition = Mat(start_state);
  return detail::reverse_process(eps, sched, rng, 1, dim, opt, &guide, audit).col(0);
}

/// Diffuser-style control: one guided sample conditioned on the current
/// state per action (N epsilon forwards, N guidance evaluations). Returns the
/// first action in environment units.
inline Vec diffuser_act(const EpsFn& eps, const NoiseSchedule& sched, const GuidanceSpec& guide,
                        const SegmentLayout& layout, const NormStats& stats, const Vec& state, Rng& rng,
                        CostAudit* audit = nullptr) {
  const SlotStats ss = slot_stats(stats, layout);
  const Vec s = (state - ss.state_mean).cwiseQuotient(ss.state_std);
  const Vec seg = guided_sample(eps, sched, guide, s, layout.dim(), rng, audit);
  return denormalize(Mat(seg), stats, layout).col(0).segment(layout.action_offset(0), layout.action_dim);
}

}  // namespace didi
