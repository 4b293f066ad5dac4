#pragma once

// Contextual policy, skill discriminator, the joint objective and its
// cooperative trainer, single-forward control, and the skill experiments
// (stitching, interpolation, z-only search).

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "didi/cost.hpp"
#include "didi/dataio.hpp"
#include "didi/diffusion.hpp"
#include "didi/digest.hpp"
#include "didi/envs.hpp"
#include "didi/errors.hpp"
#include "didi/numerics.hpp"
#include "didi/rng.hpp"

namespace didi {

// ---------------------------------------------------------------------------
// Skills

enum class SkillKind { categorical, continuous };

inline const char* to_string(SkillKind k) { return k == SkillKind::categorical ? "categorical" : "continuous"; }

inline SkillKind skill_kind_from_string(const std::string& s) {
  if (s == "categorical") return SkillKind::categorical;
  if (s == "continuous") return SkillKind::continuous;
  throw Error(ErrorKind::config, "unknown skill kind '" + s + "'");
}

/// Categorical: K one-hot skills, uniform prior. K = 1 is accepted as the
/// degenerate single-skill case. Continuous: uniform on the unit sphere in R^d.
struct SkillSpec {
  SkillKind kind = SkillKind::categorical;
  int dim = 4;

  static SkillSpec categorical(int k) { return {SkillKind::categorical, k}; }
  static SkillSpec continuous(int d) { return {SkillKind::continuous, d}; }

  void validate() const {
    if (kind == SkillKind::categorical) require_config(dim >= 1, "categorical skill count must be at least 1");
    else require_config(dim >= 2, "continuous skill dimension must be at least 2");
  }

  /// log p(z): -log K, or minus the log surface area of the unit sphere S^{d-1}.
  double log_prior() const {
    if (kind == SkillKind::categorical) return -std::log(static_cast<double>(dim));
    const double h = 0.5 * dim;
    return -(std::log(2.0) + h * std::log(std::numbers::pi) - std::lgamma(h));
  }

  Vec one_hot(int k) const {
    require(kind == SkillKind::categorical && k >= 0 && k < dim, "one_hot: index out of range");
    Vec z = Vec::Zero(dim);
    z[k] = 1.0;
    return z;
  }

  /// Fixed reference skills for evaluation: the one-hots, or 2d signed axes.
  std::vector<Vec> reference_skills() const {
    std::vector<Vec> out;
    if (kind == SkillKind::categorical) {
      for (int k = 0; k < dim; ++k) out.push_back(one_hot(k));
    } else {
      for (int k = 0; k < dim; ++k) {
        for (double sgn : {1.0, -1.0}) {
          Vec z = Vec::Zero(dim);
          z[k] = sgn;
          out.push_back(z);
        }
      }
    }
    return out;
  }
};

struct SkillSample {
  Vec z;
  double log_p = 0.0;
  int index = -1;  // categorical only
};

inline SkillSample sample_skill(const SkillSpec& spec, Rng& rng) {
  spec.validate();
  SkillSample s;
  s.log_p = spec.log_prior();
  if (spec.kind == SkillKind::categorical) {
    s.index = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.dim)));
    s.z = spec.one_hot(s.index);
  } else {
    Vec g(spec.dim);
    double n = 0.0;
    while (n < 1e-12) {
      for (int i = 0; i < spec.dim; ++i) g[i] = rng.normal();
      n = g.norm();
    }
    s.z = g / n;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Contextual policy

/// Maps (normalized s_t, z) to a normalized segment mean. The first-state
/// slot of the output is overwritten with s_t, so only the remaining
/// coordinates depend on theta.
struct ContextualPolicy {
  SegmentLayout layout;
  int skill_dim = 0;
  double sigma = 0.05;
  DenseNet net;

  static ContextualPolicy create(ParamStore& store, const SegmentLayout& layout, int skill_dim,
                                 const std::vector<int>& hidden, double sigma = 0.05,
                                 Activation act = Activation::tanh) {
    require_config(sigma > 0, "policy sigma must be positive");
    std::vector<int> widths{layout.state_dim + skill_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(layout.dim());
    return {layout, skill_dim, sigma, DenseNet(store, "policy", widths, act)};
  }

  int dim() const { return layout.dim(); }

  Mat mean(const ParamStore& store, const Mat& states, const Mat& skills, Tape* tape = nullptr) const {
    require(states.rows() == layout.state_dim && skills.rows() == skill_dim && states.cols() == skills.cols(),
            "policy: state/skill shape mismatch");
    Mat in(layout.state_dim + skill_dim, states.cols());
    in.topRows(layout.state_dim) = states;
    in.bottomRows(skill_dim) = skills;
    Mat out = net.forward(store, in, tape);
    out.topRows(layout.state_dim) = states;
    return out;
  }

  /// Backprop of <upstream, mean>; returns the gradient w.r.t. [states; skills]
  /// through the network path only.
  Mat backward(const ParamStore& store, const Tape& tape, Mat upstream, Vec& param_grad) const {
    upstream.topRows(layout.state_dim).setZero();
    return net.backward(store, tape, upstream, param_grad);
  }
};

/// One reparameterized sample (or the mean when `rng` is null); one forward.
inline Vec policy_forward(const ContextualPolicy& policy, const ParamStore& store, const Vec& state, const Vec& z,
                          Rng* rng = nullptr, CostAudit* audit = nullptr) {
  Vec out = policy.mean(store, Mat(state), Mat(z)).col(0);
  if (audit) ++audit->policy_forwards;
  if (rng) {
    for (int i = policy.layout.state_dim; i < out.size(); ++i) out[i] += policy.sigma * rng->normal();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discriminator

/// q_phi(z | tau): log-softmax logits over K skills, or a Gaussian with fixed
/// std sigma_q around a predicted mean for continuous skills. In noised mode
/// the input is (tau^n, step embedding of n).
struct Discriminator {
  SkillSpec spec;
  SegmentLayout layout;
  bool noised = false;
  double sigma_q = 0.5;
  DenseNet net;

  static constexpr int kEmbedDim = EpsModel::kEmbedDim;

  static Discriminator create(ParamStore& store, const SegmentLayout& layout, const SkillSpec& spec,
                              const std::vector<int>& hidden, bool noised = false, double sigma_q = 0.5,
                              Activation act = Activation::tanh) {
    spec.validate();
    std::vector<int> widths{layout.dim() + (noised ? kEmbedDim : 0)};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(spec.dim);
    return {spec, layout, noised, sigma_q, DenseNet(store, "disc", widths, act)};
  }

  Mat input(const Mat& x, const std::vector<int>* steps) const {
    require(x.rows() == layout.dim(), "discriminator: segment dimension mismatch");
    if (!noised) return x;
    require(!steps || static_cast<Index>(steps->size()) == x.cols(), "noised discriminator needs a step per column");
    Mat in(layout.dim() + kEmbedDim, x.cols());
    in.topRows(layout.dim()) = x;
    for (Index j = 0; j < x.cols(); ++j)
      in.col(j).tail(kEmbedDim) = step_embedding(steps ? (*steps)[j] : 1, kEmbedDim);
    return in;
  }

  /// Categorical: K x B log-probabilities. Continuous: d x B predicted means.
  /// A noised discriminator scores inputs without steps as n = 1.
  Mat head(const ParamStore& store, const Mat& x, const std::vector<int>* steps = nullptr,
           Tape* tape = nullptr) const {
    const Mat out = net.forward(store, input(x, steps), tape);
    return spec.kind == SkillKind::categorical ? log_softmax_cols(out) : out;
  }

  /// log q(z_j | x_j) per column. Categorical uses sum_k z_k log q_k, which
  /// is the exact log-probability for one-hot z.
  Vec log_q_from_head(const Mat& h, const Mat& z) const {
    require(z.rows() == spec.dim && z.cols() == h.cols(), "discriminator: skill shape mismatch");
    if (spec.kind == SkillKind::categorical) return (h.array() * z.array()).colwise().sum().transpose();
    const double c = -0.5 * spec.dim * std::log(2.0 * std::numbers::pi * sigma_q * sigma_q);
    return (c - (z - h).colwise().squaredNorm().array() / (2.0 * sigma_q * sigma_q)).transpose();
  }

  /// Gradient of sum_j w_j log q(z_j | x_j) w.r.t. the raw network output.
  Mat head_upstream(const Mat& h, const Mat& z, const Vec& w) const {
    Mat up(h.rows(), h.cols());
    for (Index j = 0; j < h.cols(); ++j) {
      if (spec.kind == SkillKind::categorical) {
        const Vec p = h.col(j).array().exp();
        up.col(j) = w[j] * (z.col(j) - z.col(j).sum() * p);
      } else {
        up.col(j) = w[j] * (z.col(j) - h.col(j)) / (sigma_q * sigma_q);
      }
    }
    return up;
  }

  /// Backprop to parameters; returns the gradient w.r.t. the segment rows of the input.
  Mat backward(const ParamStore& store, const Tape& tape, const Mat& upstream, Vec& param_grad) const {
    const Mat g = net.backward(store, tape, upstream, param_grad);
    return g.topRows(layout.dim());
  }

  std::vector<int> predict(const ParamStore& store, const Mat& x, const std::vector<int>* steps = nullptr) const {
    const Mat h = head(store, x, steps);
    std::vector<int> out(static_cast<std::size_t>(h.cols()));
    for (Index j = 0; j < h.cols(); ++j) {
      Index k = 0;
      h.col(j).maxCoeff(&k);
      out[static_cast<std::size_t>(j)] = static_cast<int>(k);
    }
    return out;
  }
};

/// log q_phi(z | tau) - log p(z) for one segment, with gradients w.r.t. tau
/// and (accumulated) phi.
inline double diversity_term(const Discriminator& disc, const ParamStore& store, const Vec& tau, const Vec& z,
                             double log_p, Vec* tau_grad = nullptr, Vec* phi_grad = nullptr, int step = 0) {
  const std::vector<int> steps{step};
  Tape tape;
  const bool need = tau_grad || phi_grad;
  const Mat h = disc.head(store, Mat(tau), disc.noised ? &steps : nullptr, need ? &tape : nullptr);
  const double lq = disc.log_q_from_head(h, Mat(z))[0];
  if (need) {
    Vec scratch = Vec::Zero(store.size());
    Vec& pg = phi_grad ? *phi_grad : scratch;
    const Mat g = disc.backward(store, tape, disc.head_upstream(h, Mat(z), Vec::Ones(1)), pg);
    if (tau_grad) *tau_grad = g.col(0);
  }
  return lq - log_p;
}

// ---------------------------------------------------------------------------
// Objective

/// Weights of the three objective terms.
struct DidiLossWeights {
  double diversity = 1.0;
  double reward = 1.0;
  double reg = 1.0;

  void validate() const {
    require_config(diversity >= 0 && reward >= 0 && reg >= 0, "loss weights must be non-negative");
  }
};

/// Batch regularizer on normalized segments: returns its mean value and
/// writes d value / d tau (D x B) when `grad` is non-null.
using RegularizerFn = std::function<double(const Mat& tau, Rng& rng, Mat* grad)>;

/// Reward on one normalized segment with its gradient (normalized space).
using RewardFn = std::function<double(const Vec& tau, Vec* grad)>;

/// Frozen diffusion prior as a regularizer: one (n, eps) draw per column,
/// mean-per-element epsilon residual. Gradients reach tau only.
inline RegularizerFn diffusion_regularizer(const EpsModel& model, const ParamStore& store, const NoiseSchedule& sched,
                                           const ScheduleParams& trained_with) {
  if (!(sched.params == trained_with)) {
    throw Error(ErrorKind::config, "noise schedule differs from the one the prior was trained with");
  }
  return [&model, &store, &sched](const Mat& tau, Rng& rng, Mat* grad) {
    if (tau.rows() != model.dim()) throw Error(ErrorKind::config, "segment dimension differs from the prior's");
    const NoiseDraws d = draw_noise(tau.rows(), tau.cols(), sched.steps(), rng);
    if (!grad) return eps_loss_with(model, store, tau, d, sched).loss;
    Vec frozen = Vec::Zero(store.size());
    return eps_loss_with(model, store, tau, d, sched, &frozen, grad).loss;
  };
}

/// Analytic environment reward lifted to normalized segments.
inline RewardFn segment_reward(const PushEnvConfig& cfg, const NormStats& stats, const SegmentLayout& layout) {
  if (!cfg.goal) throw Error(ErrorKind::config, "reward requested but the environment has no goal");
  const Vec m = stats.full_mean(layout);
  const Vec s = stats.full_std(layout);
  return [cfg, m, s, layout](const Vec& tau, Vec* grad) {
    const Vec raw = tau.cwiseProduct(s) + m;
    const double r = analytic_reward(raw, layout, cfg, grad);
    if (grad) *grad = grad->cwiseProduct(s);
    return r;
  };
}

struct DidiBatch {
  Mat states;        // ds x B, normalized
  Mat skills;        // skill_dim x B
  Vec log_p;         // B
  Mat policy_noise;  // D x B standard normal (zero for the deterministic mean)
};

struct DidiLossParts {
  double total = 0.0;
  double diversity = 0.0;
  double reward = 0.0;
  double reg = 0.0;
};

/// loss = -w_div mean(log q(z|tau) - log p(z)) - w_R mean(R(tau)) + w_reg mean(reg(tau)),
/// tau = mean_theta(s, z) + sigma * noise. Gradients are accumulated into
/// theta_grad / phi_grad when given. Terms with zero weight are skipped.
inline DidiLossParts didi_loss(const ContextualPolicy& policy, const ParamStore& pstore, const Discriminator& disc,
                               const ParamStore& dstore, const RegularizerFn& reg, const RewardFn& reward,
                               const DidiLossWeights& w, const DidiBatch& batch, const NoiseSchedule* disc_sched,
                               Rng& rng, Vec* theta_grad = nullptr, Vec* phi_grad = nullptr) {
  w.validate();
  const Index B = batch.states.cols();
  require(B > 0, "objective needs a non-empty batch");
  if (w.reward > 0 && !reward) throw Error(ErrorKind::config, "reward weight is positive but no reward is provided");
  if (w.reg > 0 && !reg) throw Error(ErrorKind::config, "regularizer weight is positive but no regularizer is provided");

  DidiLossParts parts;
  if (w.diversity == 0 && w.reward == 0 && w.reg == 0) return parts;

  const bool need_grad = theta_grad || phi_grad;
  Tape ptape;
  Mat tau = policy.mean(pstore, batch.states, batch.skills, need_grad ? &ptape : nullptr);
  tau.bottomRows(tau.rows() - policy.layout.state_dim) +=
      policy.sigma * batch.policy_noise.bottomRows(tau.rows() - policy.layout.state_dim);
  Mat dtau = Mat::Zero(tau.rows(), B);
  const double inv_b = 1.0 / static_cast<double>(B);

  if (w.diversity > 0) {
    Mat x = tau;
    std::vector<int> steps;
    Vec scale = Vec::Ones(B);
    if (disc.noised) {
      require(disc_sched != nullptr, "noised discriminator needs a schedule");
      const NoiseDraws d = draw_noise(tau.rows(), B, disc_sched->steps(), rng);
      x = q_sample_columns(tau, d, *disc_sched);
      steps = d.steps;
      for (Index j = 0; j < B; ++j) scale[j] = std::sqrt(disc_sched->alpha_bar(d.steps[static_cast<std::size_t>(j)]));
    }
    Tape dtape;
    const Mat h = disc.head(dstore, x, disc.noised ? &steps : nullptr, need_grad ? &dtape : nullptr);
    const Vec lq = disc.log_q_from_head(h, batch.skills);
    parts.diversity = (lq - batch.log_p).mean();
    if (need_grad) {
      const Mat up = disc.head_upstream(h, batch.skills, Vec::Constant(B, -w.diversity * inv_b));
      Vec scratch;
      Vec& pg = phi_grad ? *phi_grad : (scratch = Vec::Zero(dstore.size()));
      const Mat gx = disc.backward(dstore, dtape, up, pg);
      dtau += gx * scale.asDiagonal();
    }
  }

  if (w.reward > 0) {
    double total = 0.0;
    for (Index j = 0; j < B; ++j) {
      Vec g;
      total += reward(tau.col(j), need_grad ? &g : nullptr);
      if (need_grad) dtau.col(j) -= w.reward * inv_b * g;
    }
    parts.reward = total * inv_b;
  }

  if (w.reg > 0) {
    Mat g;
    parts.reg = reg(tau, rng, need_grad ? &g : nullptr);
    if (need_grad) dtau += w.reg * g;
  }

  parts.total = -w.diversity * parts.diversity - w.reward * parts.reward + w.reg * parts.reg;
  if (!std::isfinite(parts.total)) throw Error(ErrorKind::divergence, "objective is not finite");
  if (theta_grad) policy.backward(pstore, ptape, dtau, *theta_grad);
  return parts;
}

// ---------------------------------------------------------------------------
// Training

struct DidiTrainConfig {
  SkillSpec skills = SkillSpec::categorical(4);
  std::vector<int> policy_hidden{128, 128};
  std::vector<int> disc_hidden{64, 64};
  DidiLossWeights weights;
  double sigma = 0.05;
  bool noised_disc = false;
  double sigma_q = 0.5;
  int steps = 3000;
  int batch = 64;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  double disc_lr_multiplier = 1.0;  // 3 gives the two-timescale mode
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
};

/// Joint cooperative updates of theta and phi: one gradient of the whole
/// objective, clipped by global norm over both, then one Adam step each.
class DidiTrainer {
 public:
  DidiTrainer(const Mat& start_states, const SegmentLayout& layout, DidiTrainConfig cfg, RegularizerFn reg,
              RewardFn reward = {}, const NoiseSchedule* disc_sched = nullptr)
      : starts_(start_states),
        layout_(layout),
        cfg_(std::move(cfg)),
        reg_(std::move(reg)),
        reward_(std::move(reward)),
        disc_sched_(disc_sched),
        rng_(cfg_.seed) {
    cfg_.skills.validate();
    cfg_.weights.validate();
    if (starts_.cols() == 0) throw Error(ErrorKind::empty_dataset, "no start states to train on");
    require(starts_.rows() == layout.state_dim, "start states do not match the layout");
    if (cfg_.weights.reward > 0 && !reward_) {
      throw Error(ErrorKind::config, "reward weight is positive but no reward is provided");
    }
    if (cfg_.noised_disc && !disc_sched_) throw Error(ErrorKind::config, "noised discriminator needs a schedule");
    policy_ = ContextualPolicy::create(pstore_, layout, cfg_.skills.dim, cfg_.policy_hidden, cfg_.sigma);
    disc_ = Discriminator::create(dstore_, layout, cfg_.skills, cfg_.disc_hidden, cfg_.noised_disc, cfg_.sigma_q);
    Rng ip = rng_.fork(0x9011C7);
    Rng id = rng_.fork(0xD15C);
    policy_.net.initialize(pstore_, ip);
    disc_.net.initialize(dstore_, id);
  }

  DidiBatch sample_batch() {
    DidiBatch b;
    const int B = cfg_.batch;
    b.states.resize(layout_.state_dim, B);
    b.skills.resize(cfg_.skills.dim, B);
    b.log_p.resize(B);
    for (int j = 0; j < B; ++j) {
      b.states.col(j) = starts_.col(static_cast<Index>(rng_.below(static_cast<std::uint64_t>(starts_.cols()))));
      const SkillSample s = sample_skill(cfg_.skills, rng_);
      b.skills.col(j) = s.z;
      b.log_p[j] = s.log_p;
    }
    b.policy_noise = standard_normal(layout_.dim(), B, rng_);
    return b;
  }

  DidiLossParts step() {
    const DidiBatch b = sample_batch();
    Vec gt = Vec::Zero(pstore_.size());
    Vec gp = Vec::Zero(dstore_.size());
    DidiLossParts parts;
    try {
      parts = didi_loss(policy_, pstore_, disc_, dstore_, reg_, reward_, cfg_.weights, b, disc_sched_, rng_, &gt, &gp);
      clip_global_norm({&gt, &gp}, cfg_.clip_norm);
      adam_step(pstore_, gt, cfg_.adam);
      AdamConfig dcfg = cfg_.adam;
      dcfg.lr *= cfg_.disc_lr_multiplier;
      adam_step(dstore_, gp, dcfg);
    } catch (const TrainingError&) {
      throw;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::divergence) throw TrainingError(step_, e.what());
      throw;
    }
    ++step_;
    history_.push_back(parts);
    return parts;
  }

  void run(int steps) {
    for (int i = 0; i < steps; ++i) step();
  }

  const ContextualPolicy& policy() const noexcept { return policy_; }
  const Discriminator& discriminator() const noexcept { return disc_; }
  const ParamStore& policy_store() const noexcept { return pstore_; }
  const ParamStore& disc_store() const noexcept { return dstore_; }
  const std::vector<DidiLossParts>& history() const noexcept { return history_; }
  long steps_done() const noexcept { return step_; }
  const DidiTrainConfig& config() const noexcept { return cfg_; }

  Checkpoint policy_checkpoint(const std::string& kind = "policy") const;
  Checkpoint disc_checkpoint() const;

  void restore(const Checkpoint& policy_ckpt, const Checkpoint& disc_ckpt) {
    restore_into(policy_ckpt, pstore_);
    restore_into(disc_ckpt, dstore_);
    step_ = policy_ckpt.train_step;
    rng_ = Rng(policy_ckpt.seed, policy_ckpt.rng_position);
  }

 private:
  Mat starts_;
  SegmentLayout layout_;
  DidiTrainConfig cfg_;
  RegularizerFn reg_;
  RewardFn reward_;
  const NoiseSchedule* disc_sched_;
  Rng rng_;
  ParamStore pstore_;
  ParamStore dstore_;
  ContextualPolicy policy_;
  Discriminator disc_;
  long step_ = 0;
  std::vector<DidiLossParts> history_;

};

inline void put_layout_meta(Checkpoint& c, const SegmentLayout& l) {
  c.meta["horizon"] = std::to_string(l.horizon);
  c.meta["state_dim"] = std::to_string(l.state_dim);
  c.meta["action_dim"] = std::to_string(l.action_dim);
}

inline SegmentLayout layout_from_meta(const Checkpoint& c) {
  return {std::stoi(c.meta_at("horizon")), std::stoi(c.meta_at("state_dim")), std::stoi(c.meta_at("action_dim"))};
}

inline Checkpoint policy_checkpoint(const ContextualPolicy& p, const ParamStore& store, const SkillSpec& spec,
                                    const std::string& kind = "policy") {
  Checkpoint c = make_checkpoint(kind, {{p.net.name(), p.net.widths(), p.net.hidden_activation()}}, store);
  put_layout_meta(c, p.layout);
  c.meta["skill_kind"] = to_string(spec.kind);
  c.meta["skill_dim"] = std::to_string(spec.dim);
  c.meta["sigma"] = format_double(p.sigma);
  return c;
}

inline Checkpoint disc_checkpoint(const Discriminator& d, const ParamStore& store) {
  Checkpoint c = make_checkpoint("discriminator", {{d.net.name(), d.net.widths(), d.net.hidden_activation()}}, store);
  put_layout_meta(c, d.layout);
  c.meta["skill_kind"] = to_string(d.spec.kind);
  c.meta["skill_dim"] = std::to_string(d.spec.dim);
  c.meta["noised"] = d.noised ? "1" : "0";
  c.meta["sigma_q"] = format_double(d.sigma_q);
  return c;
}

inline Checkpoint DidiTrainer::policy_checkpoint(const std::string& kind) const {
  Checkpoint c = didi::policy_checkpoint(policy_, pstore_, cfg_.skills, kind);
  c.train_step = step_;
  c.seed = rng_.seed();
  c.rng_position = rng_.position();
  return c;
}

inline Checkpoint DidiTrainer::disc_checkpoint() const {
  Checkpoint c = didi::disc_checkpoint(disc_, dstore_);
  c.train_step = step_;
  c.seed = rng_.seed();
  c.rng_position = rng_.position();
  return c;
}

struct LoadedPolicy {
  ParamStore store;
  ContextualPolicy policy;
  SkillSpec spec;
};

inline LoadedPolicy load_policy(const Checkpoint& c) {
  LoadedPolicy p;
  p.spec = {skill_kind_from_string(c.meta_at("skill_kind")), std::stoi(c.meta_at("skill_dim"))};
  const NetworkSpec& n = c.networks.at(0);
  p.policy = ContextualPolicy::create(p.store, layout_from_meta(c), p.spec.dim, hidden_widths(n),
                                      std::stod(c.meta_at("sigma")), n.activation);
  restore_into(c, p.store);
  return p;
}

struct LoadedDiscriminator {
  ParamStore store;
  Discriminator disc;
};

inline LoadedDiscriminator load_discriminator(const Checkpoint& c) {
  if (c.kind != "discriminator") throw Error(ErrorKind::config, "expected a discriminator checkpoint");
  LoadedDiscriminator d;
  const SkillSpec spec{skill_kind_from_string(c.meta_at("skill_kind")), std::stoi(c.meta_at("skill_dim"))};
  const NetworkSpec& n = c.networks.at(0);
  d.disc = Discriminator::create(d.store, layout_from_meta(c), spec, hidden_widths(n), c.meta_at("noised") == "1",
                                 std::stod(c.meta_at("sigma_q")), n.activation);
  restore_into(c, d.store);
  return d;
}

// ---------------------------------------------------------------------------
// Control

/// Environment-unit adapter around a policy on normalized segments.
struct PolicyAgent {
  const ContextualPolicy* policy = nullptr;
  const ParamStore* store = nullptr;
  NormStats stats;

  Vec normalize_state(const Vec& s) const {
    const SlotStats ss = slot_stats(stats, policy->layout);
    return (s - ss.state_mean).cwiseQuotient(ss.state_std);
  }

  /// Denormalized planned segment (deterministic mean), one forward.
  Vec plan(const Vec& state, const Vec& z, CostAudit* audit = nullptr) const {
    const Vec seg = policy_forward(*policy, *store, normalize_state(state), z, nullptr, audit);
    return denormalize(Mat(seg), stats, policy->layout).col(0);
  }
};

/// First action of the planned segment: exactly one policy forward.
inline Vec2 act(const PolicyAgent& agent, const Vec& state, const Vec& z, CostAudit* audit = nullptr) {
  const Vec seg = agent.plan(state, z, audit);
  const SegmentLayout& l = agent.policy->layout;
  return seg.segment(l.action_offset(0), 2);
}

/// Receding-horizon closed loop: re-plans at every step.
inline Episode rollout(const PolicyAgent& agent, const PushEnvConfig& env, const EnvState& s0, const Vec& z,
                       int steps, CostAudit* audit = nullptr) {
  Episode ep;
  ep.states.push_back(s0);
  for (int t = 0; t < steps; ++t) {
    const Vec2 a = clip_action(act(agent, ep.states.back().as_vector(), z, audit), env.max_speed);
    ep.actions.push_back(a);
    ep.states.push_back(step(ep.states.back(), a, env));
  }
  return ep;
}

struct StitchResult {
  Episode episode;
  std::vector<int> commanded;  // schedule entry index per executed step
};

inline StitchResult stitch_rollout(const PolicyAgent& agent, const PushEnvConfig& env, const EnvState& s0,
                                   const std::vector<std::pair<Vec, int>>& schedule, CostAudit* audit = nullptr) {
  int total = 0;
  for (const auto& [z, d] : schedule) {
    require(d >= 0, "stitch durations must be non-negative");
    total += d;
  }
  require_config(total <= env.horizon, "stitch schedule is longer than the environment horizon");
  StitchResult r;
  if (schedule.empty()) return r;
  r.episode.states.push_back(s0);
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    for (int t = 0; t < schedule[k].second; ++t) {
      const Vec2 a = clip_action(act(agent, r.episode.states.back().as_vector(), schedule[k].first, audit),
                                 env.max_speed);
      r.episode.actions.push_back(a);
      r.episode.states.push_back(step(r.episode.states.back(), a, env));
      r.commanded.push_back(static_cast<int>(k));
    }
  }
  return r;
}

/// Skill path between z_a and z_b: convex combination (simplex) for
/// categorical skills, re-normalized linear path for continuous ones.
inline Vec interpolate_skill(const SkillSpec& spec, const Vec& za, const Vec& zb, double lambda) {
  Vec z = (1.0 - lambda) * za + lambda * zb;
  if (spec.kind == SkillKind::continuous) {
    const double n = z.norm();
    require(n > 1e-12, "interpolation passes through the origin");
    z /= n;
  }
  return z;
}

/// Final states of `rollout_steps`-step rollouts from s0 for `steps` evenly
/// spaced points on the skill path, in order.
inline std::vector<EnvState> interpolate_skills(const PolicyAgent& agent, const SkillSpec& spec,
                                                const PushEnvConfig& env, const EnvState& s0, const Vec& za,
                                                const Vec& zb, int steps, int rollout_steps,
                                                CostAudit* audit = nullptr) {
  require(steps >= 2, "interpolation needs at least two points");
  require(!za.isApprox(zb), "interpolation endpoints must differ");
  std::vector<EnvState> out;
  for (int i = 0; i < steps; ++i) {
    const double lambda = static_cast<double>(i) / (steps - 1);
    out.push_back(rollout(agent, env, s0, interpolate_skill(spec, za, zb, lambda), rollout_steps, audit).states.back());
  }
  return out;
}

// ---------------------------------------------------------------------------
// z-only search

struct CemConfig {
  int population = 16;
  int elite = 4;
  double init_std = 2.0;
  double min_std = 0.1;
  double success_eps = 0.1;
};

struct FinetuneResult {
  Vec z;
  bool success = false;
  double best_distance = 0.0;
  int rollouts = 0;
};

/// Skill vector for a search point u: softmax(u) for categorical skills, u/|u| for continuous.
inline Vec skill_from_search(const SkillSpec& spec, const Vec& u) {
  if (spec.kind == SkillKind::categorical) {
    const Vec e = (u.array() - u.maxCoeff()).exp();
    return e / e.sum();
  }
  const double n = u.norm();
  return n > 1e-12 ? Vec(u / n) : Vec(Vec::Unit(u.size(), 0));
}

/// Cross-entropy search over the skill embedding with the policy frozen.
/// Fitness is the negative final block-goal distance of a closed-loop
/// rollout; iterations = budget / population.
inline FinetuneResult finetune_skill_embedding(const PolicyAgent& agent, const SkillSpec& spec,
                                               const PushEnvConfig& task, const EnvState& s0, int budget,
                                               int rollout_steps, Rng& rng, const CemConfig& cem = {},
                                               CostAudit* audit = nullptr) {
  if (!task.goal) throw Error(ErrorKind::config, "z search needs a task goal");
  if (budget < cem.population) throw Error(ErrorKind::config, "search budget is smaller than the CEM population");
  require_config(cem.elite >= 1 && cem.elite <= cem.population, "CEM elite count must lie in [1, population]");
  const std::string before = params_digest(agent.store->values());

  const int d = spec.dim;
  Vec mu = Vec::Zero(d);
  Vec sd = Vec::Constant(d, cem.init_std);
  FinetuneResult best;
  best.best_distance = std::numeric_limits<double>::infinity();
  const int iters = budget / cem.population;
  for (int it = 0; it < iters; ++it) {
    std::vector<std::pair<double, Vec>> pop;
    for (int p = 0; p < cem.population; ++p) {
      Vec u(d);
      for (int i = 0; i < d; ++i) u[i] = mu[i] + sd[i] * rng.normal();
      const Vec z = skill_from_search(spec, u);
      const Episode ep = rollout(agent, task, s0, z, rollout_steps, audit);
      const double dist = (ep.states.back().block - *task.goal).norm();
      ++best.rollouts;
      if (dist < best.best_distance) {
        best.best_distance = dist;
        best.z = z;
      }
      pop.emplace_back(dist, u);
    }
    std::stable_sort(pop.begin(), pop.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    Vec m = Vec::Zero(d);
    for (int e = 0; e < cem.elite; ++e) m += pop[static_cast<std::size_t>(e)].second;
    m /= cem.elite;
    Vec v = Vec::Zero(d);
    for (int e = 0; e < cem.elite; ++e) v += (pop[static_cast<std::size_t>(e)].second - m).cwiseAbs2();
    mu = m;
    sd = (v / cem.elite).cwiseSqrt().cwiseMax(cem.min_std);
  }
  best.success = best.best_distance <= cem.success_eps;
  if (params_digest(agent.store->values()) != before) {
    throw Error(ErrorKind::contract, "policy parameters changed during z search");
  }
  return best;
}

}  // namespace didi
