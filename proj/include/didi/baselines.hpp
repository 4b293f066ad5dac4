#pragma once

// Comparison methods: a segment VAE and its two regularizers (target from
// the policy's own encoding, or from the latent prior), and k-means
// partitioning followed by per-cluster behavior cloning.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "didi/dataio.hpp"
#include "didi/didi.hpp"
#include "didi/errors.hpp"
#include "didi/numerics.hpp"
#include "didi/rng.hpp"

namespace didi {

// ---------------------------------------------------------------------------
// VAE

/// KL(N(mean, diag exp(logvar)) || N(0, I)) per column.
inline Vec kl_diag_gaussian(const Mat& mean, const Mat& logvar) {
  return 0.5 * (logvar.array().exp() + mean.array().square() - 1.0 - logvar.array()).colwise().sum().transpose();
}

/// Encoder: segment -> [mean; logvar] of v (dv each). Decoder: v -> segment
/// mean with fixed isotropic std `dec_sigma`.
struct VaePair {
  SegmentLayout layout;
  int latent = 8;
  double dec_sigma = 0.3;
  DenseNet enc;
  DenseNet dec;

  static VaePair create(ParamStore& store, const SegmentLayout& layout, int latent, const std::vector<int>& hidden,
                        double dec_sigma = 0.3, Activation act = Activation::tanh) {
    require_config(latent >= 1, "VAE latent dimension must be positive");
    require_config(dec_sigma > 0, "VAE decoder std must be positive");
    std::vector<int> ew{layout.dim()};
    ew.insert(ew.end(), hidden.begin(), hidden.end());
    ew.push_back(2 * latent);
    std::vector<int> dw{latent};
    dw.insert(dw.end(), hidden.rbegin(), hidden.rend());
    dw.push_back(layout.dim());
    VaePair v{layout, latent, dec_sigma, DenseNet(store, "enc", ew, act), DenseNet()};
    v.dec = DenseNet(store, "dec", dw, act);
    return v;
  }

  void initialize(ParamStore& store, Rng& rng) const {
    enc.initialize(store, rng);
    dec.initialize(store, rng);
  }

  /// Raw encoder output: rows [0, dv) mean, [dv, 2dv) logvar.
  Mat encode(const ParamStore& store, const Mat& x, Tape* tape = nullptr) const {
    require(x.rows() == layout.dim(), "VAE: segment dimension mismatch");
    return enc.forward(store, x, tape);
  }
  Mat decode(const ParamStore& store, const Mat& v, Tape* tape = nullptr) const {
    require(v.rows() == latent, "VAE: latent dimension mismatch");
    return dec.forward(store, v, tape);
  }
};

struct ElboParts {
  double loss = 0.0;   // negative ELBO per segment, up to constants
  double recon = 0.0;  // mean over the batch of sum_d (x - xhat)^2 / (2 sigma^2)
  double kl = 0.0;
};

/// Reparameterized negative ELBO with fixed latent noise `eps` (dv x B).
inline ElboParts elbo_loss(const VaePair& vae, const ParamStore& store, const Mat& x, const Mat& eps,
                           Vec* grad = nullptr) {
  require(x.cols() > 0 && eps.cols() == x.cols() && eps.rows() == vae.latent, "ELBO: batch shape mismatch");
  const Index B = x.cols();
  const int dv = vae.latent;
  Tape te;
  Tape td;
  const Mat h = vae.encode(store, x, grad ? &te : nullptr);
  const Mat mu = h.topRows(dv);
  const Mat lv = h.bottomRows(dv);
  const Mat sd = (0.5 * lv.array()).exp();
  const Mat v = mu + sd.cwiseProduct(eps);
  const Mat xhat = vae.decode(store, v, grad ? &td : nullptr);
  const double s2 = vae.dec_sigma * vae.dec_sigma;
  const Mat r = x - xhat;
  ElboParts p;
  p.recon = r.squaredNorm() / (2.0 * s2) / static_cast<double>(B);
  p.kl = kl_diag_gaussian(mu, lv).mean();
  p.loss = p.recon + p.kl;
  if (grad) {
    const double ib = 1.0 / static_cast<double>(B);
    const Mat dxhat = -r / s2 * ib;
    const Mat dv_ = vae.dec.backward(store, td, dxhat, *grad);
    Mat dh(2 * dv, B);
    dh.topRows(dv) = dv_ + mu * ib;
    dh.bottomRows(dv) = (dv_.cwiseProduct(eps).cwiseProduct(sd) * 0.5).array() + 0.5 * (lv.array().exp() - 1.0) * ib;
    vae.enc.backward(store, te, dh, *grad);
  }
  return p;
}

struct VaeTrainConfig {
  int latent = 8;
  std::vector<int> hidden{128, 128};
  double dec_sigma = 0.3;
  int steps = 3000;
  int batch = 128;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
};

class VaeTrainer {
 public:
  VaeTrainer(const Mat& normalized_data, const SegmentLayout& layout, VaeTrainConfig cfg)
      : data_(normalized_data), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    if (data_.cols() == 0) throw Error(ErrorKind::empty_dataset, "cannot train a VAE on an empty dataset");
    vae_ = VaePair::create(store_, layout, cfg_.latent, cfg_.hidden, cfg_.dec_sigma);
    Rng init = rng_.fork(0x7AE);
    vae_.initialize(store_, init);
  }

  ElboParts step() {
    Mat batch(data_.rows(), cfg_.batch);
    for (int j = 0; j < cfg_.batch; ++j) batch.col(j) = data_.col(static_cast<Index>(rng_.below(data_.cols())));
    const Mat eps = standard_normal(cfg_.latent, cfg_.batch, rng_);
    Vec grad = Vec::Zero(store_.size());
    const ElboParts p = elbo_loss(vae_, store_, batch, eps, &grad);
    if (!std::isfinite(p.loss)) throw TrainingError(step_, "VAE loss is not finite");
    clip_global_norm({&grad}, cfg_.clip_norm);
    try {
      adam_step(store_, grad, cfg_.adam);
    } catch (const Error& e) {
      throw TrainingError(step_, e.what());
    }
    ++step_;
    history_.push_back(p);
    return p;
  }

  void run(int steps) {
    for (int i = 0; i < steps; ++i) step();
  }

  const VaePair& vae() const noexcept { return vae_; }
  const ParamStore& store() const noexcept { return store_; }
  const std::vector<ElboParts>& history() const noexcept { return history_; }

  Checkpoint checkpoint() const {
    Checkpoint c = make_checkpoint("vae",
                                   {{vae_.enc.name(), vae_.enc.widths(), vae_.enc.hidden_activation()},
                                    {vae_.dec.name(), vae_.dec.widths(), vae_.dec.hidden_activation()}},
                                   store_);
    put_layout_meta(c, vae_.layout);
    c.meta["latent"] = std::to_string(vae_.latent);
    c.meta["dec_sigma"] = format_double(vae_.dec_sigma);
    c.train_step = step_;
    c.seed = rng_.seed();
    c.rng_position = rng_.position();
    return c;
  }

  void restore(const Checkpoint& c) {
    restore_into(c, store_);
    step_ = c.train_step;
    rng_ = Rng(c.seed, c.rng_position);
  }

 private:
  Mat data_;
  VaeTrainConfig cfg_;
  Rng rng_;
  ParamStore store_;
  VaePair vae_;
  long step_ = 0;
  std::vector<ElboParts> history_;
};

struct LoadedVae {
  ParamStore store;
  VaePair vae;
};

inline LoadedVae load_vae(const Checkpoint& c) {
  if (c.kind != "vae") throw Error(ErrorKind::config, "expected a VAE checkpoint, got '" + c.kind + "'");
  LoadedVae l;
  l.vae = VaePair::create(l.store, layout_from_meta(c), std::stoi(c.meta_at("latent")),
                          hidden_widths(c.networks.at(0)), std::stod(c.meta_at("dec_sigma")),
                          c.networks.at(0).activation);
  restore_into(c, l.store);
  return l;
}

/// Scaled squared error to the decoded target decode(v):
/// sum (tau - target)^2 / (2 sigma_dec^2 D B). Writes d/d tau (direct path)
/// and, when given, d/d target.
inline double vae_target_reg(const VaePair& vae, const ParamStore& store, const Mat& tau, const Mat& v, Mat* grad,
                             Mat* target_grad = nullptr, Tape* dec_tape = nullptr) {
  const Mat target = vae.decode(store, v, dec_tape);
  const Mat r = tau - target;
  const double denom = 2.0 * vae.dec_sigma * vae.dec_sigma * static_cast<double>(r.size());
  if (grad) *grad = 2.0 * r / denom;
  if (target_grad) *target_grad = -2.0 * r / denom;
  return r.squaredNorm() / denom;
}

/// Target decode(v), v = mu(tau) + sd(tau) * eps: the target is produced from
/// the policy's own output. Gradients reach tau through both paths.
inline double vae_reconstruct_reg(const VaePair& vae, const ParamStore& store, const Mat& tau, const Mat& eps,
                                  Mat* grad) {
  const int dv = vae.latent;
  Tape te;
  Tape td;
  const Mat h = vae.encode(store, tau, grad ? &te : nullptr);
  const Mat mu = h.topRows(dv);
  const Mat sd = (0.5 * h.bottomRows(dv).array()).exp();
  const Mat v = mu + sd.cwiseProduct(eps);
  if (!grad) return vae_target_reg(vae, store, tau, v, nullptr);
  Mat tg;
  const double val = vae_target_reg(vae, store, tau, v, grad, &tg, &td);
  Vec frozen = Vec::Zero(store.size());
  const Mat dv_ = vae.dec.backward(store, td, tg, frozen);
  Mat dh(2 * dv, tau.cols());
  dh.topRows(dv) = dv_;
  dh.bottomRows(dv) = dv_.cwiseProduct(eps).cwiseProduct(sd) * 0.5;
  *grad += vae.enc.backward(store, te, dh, frozen);
  return val;
}

enum class VaeRegKind { reconstruct, prior_sample };

inline RegularizerFn vae_regularizer(const VaePair& vae, const ParamStore& store, VaeRegKind kind) {
  return [&vae, &store, kind](const Mat& tau, Rng& rng, Mat* grad) {
    const Mat noise = standard_normal(vae.latent, tau.cols(), rng);
    if (kind == VaeRegKind::reconstruct) return vae_reconstruct_reg(vae, store, tau, noise, grad);
    return vae_target_reg(vae, store, tau, noise, grad);
  };
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansPartition {
  int k = 0;
  Mat centroids;  // feature_dim x k
  std::vector<int> assignment;
  std::vector<double> wcss;  // within-cluster sum of squares after each assignment step
  int iterations = 0;
  bool converged = false;
};

/// Segment end states (last state slot), environment units.
inline Mat endpoint_features(const Mat& segments, const SegmentLayout& layout) {
  return segments.middleRows(layout.state_offset(layout.horizon - 1), layout.state_dim);
}

namespace detail {

inline double assign_nearest(const Mat& x, const Mat& c, std::vector<int>& assignment, Vec& dist2) {
  double total = 0.0;
  for (Index j = 0; j < x.cols(); ++j) {
    Index best = 0;
    (c.colwise() - x.col(j)).colwise().squaredNorm().minCoeff(&best);
    assignment[static_cast<std::size_t>(j)] = static_cast<int>(best);
    dist2[j] = (c.col(best) - x.col(j)).squaredNorm();
    total += dist2[j];
  }
  return total;
}

}  // namespace detail

/// Lloyd iterations from k-means++ seeding. Stops at an assignment fixed
/// point, when the objective stops decreasing (rounding can otherwise make
/// tied duplicate points hop between equal centroids forever), or after
/// `max_iter` iterations. An empty cluster is re-seeded at the point
/// farthest from its current centroid.
inline KMeansPartition kmeans(const Mat& x, int k, Rng& rng, int max_iter = 100) {
  require_config(k >= 1, "k must be at least 1");
  if (x.cols() == 0) throw Error(ErrorKind::empty_dataset, "cannot cluster an empty set");
  require_config(k <= x.cols(), "k exceeds the number of points");
  const Index n = x.cols();
  KMeansPartition p;
  p.k = k;
  p.centroids.resize(x.rows(), k);
  p.centroids.col(0) = x.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
  Vec d2 = (x.colwise() - p.centroids.col(0)).colwise().squaredNorm().transpose();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Index pick = 0;
    if (total <= 0) {
      pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    } else {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (Index j = 0; j < n; ++j) {
        u -= d2[j];
        if (u < 0) {
          pick = j;
          break;
        }
      }
    }
    p.centroids.col(c) = x.col(pick);
    d2 = d2.cwiseMin((x.colwise() - p.centroids.col(c)).colwise().squaredNorm().transpose());
  }

  p.assignment.assign(static_cast<std::size_t>(n), -1);
  Vec dist2(n);
  std::vector<int> prev;
  for (int it = 0; it < max_iter; ++it) {
    prev = p.assignment;
    p.wcss.push_back(detail::assign_nearest(x, p.centroids, p.assignment, dist2));
    p.iterations = it + 1;
    const std::size_t m = p.wcss.size();
    if (p.assignment == prev || (m > 1 && p.wcss[m - 1] >= p.wcss[m - 2])) {
      p.converged = true;
      break;
    }
    Mat sums = Mat::Zero(x.rows(), k);
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index j = 0; j < n; ++j) {
      const int a = p.assignment[static_cast<std::size_t>(j)];
      sums.col(a) += x.col(j);
      ++counts[static_cast<std::size_t>(a)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        p.centroids.col(c) = sums.col(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      } else {
        Index far = 0;
        dist2.maxCoeff(&far);
        p.centroids.col(c) = x.col(far);
        dist2[far] = 0.0;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Behavior cloning on partitions

struct BcTrainConfig {
  std::vector<int> hidden{128, 128};
  int steps = 3000;
  int batch = 64;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  double clip_norm = 10.0;
  double sigma = 0.05;
  std::uint64_t seed = 0;
};

/// Conditional behavior cloning: regress the normalized segment from
/// (s_t, one-hot label) with mean-per-element squared error. With one label
/// this is a single unconditional BC policy.
class BcTrainer {
 public:
  BcTrainer(const Mat& normalized_segments, std::vector<int> labels, int num_labels, const SegmentLayout& layout,
            BcTrainConfig cfg)
      : data_(normalized_segments), labels_(std::move(labels)), k_(num_labels), layout_(layout),
        cfg_(std::move(cfg)), rng_(cfg_.seed) {
    if (data_.cols() == 0) throw Error(ErrorKind::empty_dataset, "cannot clone an empty dataset");
    require(static_cast<Index>(labels_.size()) == data_.cols(), "one label per segment required");
    policy_ = ContextualPolicy::create(store_, layout, k_, cfg_.hidden, cfg_.sigma);
    Rng init = rng_.fork(0xBC);
    policy_.net.initialize(store_, init);
  }

  double step() {
    const int B = cfg_.batch;
    Mat target(data_.rows(), B);
    Mat z = Mat::Zero(k_, B);
    for (int j = 0; j < B; ++j) {
      const Index i = static_cast<Index>(rng_.below(static_cast<std::uint64_t>(data_.cols())));
      target.col(j) = data_.col(i);
      z(labels_[static_cast<std::size_t>(i)], j) = 1.0;
    }
    const Mat states = target.topRows(layout_.state_dim);
    Tape tape;
    const Mat pred = policy_.mean(store_, states, z, &tape);
    const Mat r = pred - target;
    const double loss = r.squaredNorm() / static_cast<double>(r.size());
    if (!std::isfinite(loss)) throw TrainingError(step_, "behavior cloning loss is not finite");
    Vec grad = Vec::Zero(store_.size());
    policy_.backward(store_, tape, 2.0 * r / static_cast<double>(r.size()), grad);
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

  const ContextualPolicy& policy() const noexcept { return policy_; }
  const ParamStore& store() const noexcept { return store_; }
  const std::vector<double>& losses() const noexcept { return losses_; }

  Checkpoint checkpoint(const std::string& kind = "policy") const {
    Checkpoint c = policy_checkpoint(policy_, store_, SkillSpec::categorical(k_), kind);
    c.train_step = step_;
    c.seed = rng_.seed();
    c.rng_position = rng_.position();
    return c;
  }

 private:
  Mat data_;
  std::vector<int> labels_;
  int k_;
  SegmentLayout layout_;
  BcTrainConfig cfg_;
  Rng rng_;
  ParamStore store_;
  ContextualPolicy policy_;
  long step_ = 0;
  std::vector<double> losses_;
};

struct KMeansDiResult {
  KMeansPartition partition;
  ParamStore store;
  ContextualPolicy policy;
  std::vector<double> losses;
  Checkpoint checkpoint;
};

/// Partition by endpoint-state k-means, then clone one skill per cluster.
/// k = 1 gives a single behavior-cloning policy.
inline KMeansDiResult kmeans_di(const OfflineDataset& ds, int k, const BcTrainConfig& cfg) {
  if (ds.empty()) throw Error(ErrorKind::empty_dataset, "k-means-DI needs a non-empty dataset");
  Rng rng(cfg.seed);
  Rng krng = rng.fork(0x63);
  KMeansDiResult r;
  r.partition = kmeans(endpoint_features(ds.segments, ds.layout), k, krng);
  BcTrainer bc(ds.normalized(), r.partition.assignment, k, ds.layout, cfg);
  bc.run(cfg.steps);
  r.store = bc.store();
  r.policy = bc.policy();
  r.losses = bc.losses();
  r.checkpoint = bc.checkpoint();
  r.checkpoint.meta["baseline"] = k == 1 ? "bc" : "kmeans-di";
  return r;
}

}  // namespace didi
