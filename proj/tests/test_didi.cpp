#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "didi/config.hpp"
#include "didi/didi.hpp"

namespace didi {
namespace {

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::contract;
}

const SegmentLayout kLayout{4, 4, 2};

NormStats identity_stats(const SegmentLayout& l) {
  NormStats s;
  s.mean = Vec::Zero(l.dim());
  s.std = Vec::Ones(l.dim());
  return s;
}

struct PolicyFixture {
  ParamStore store;
  ContextualPolicy policy;
  PolicyFixture(const SegmentLayout& l, int skill_dim, std::vector<int> hidden, std::uint64_t seed,
                double sigma = 0.05) {
    policy = ContextualPolicy::create(store, l, skill_dim, hidden, sigma);
    Rng rng(seed);
    policy.net.initialize(store, rng);
  }
};

struct DiscFixture {
  ParamStore store;
  Discriminator disc;
  DiscFixture(const SegmentLayout& l, const SkillSpec& spec, bool noised, std::uint64_t seed) {
    disc = Discriminator::create(store, l, spec, {12}, noised);
    Rng rng(seed);
    disc.net.initialize(store, rng);
  }
};

struct PriorFixture {
  ParamStore store;
  EpsModel model;
  NoiseSchedule sched = make_schedule(16, 1e-3, 0.3);
  PriorFixture(const SegmentLayout& l, std::uint64_t seed) {
    model = EpsModel::create(store, l, {12});
    Rng rng(seed);
    model.net.initialize(store, rng);
  }
  RegularizerFn reg() const { return diffusion_regularizer(model, store, sched, sched.params); }
};

// --- skills ------------------------------------------------------------------

TEST(Skills, CategoricalLogPrior) {
  EXPECT_DOUBLE_EQ(SkillSpec::categorical(2).log_prior(), -std::log(2.0));
  EXPECT_EQ(SkillSpec::categorical(1).log_prior(), 0.0);
  Rng rng(1);
  EXPECT_DOUBLE_EQ(sample_skill(SkillSpec::categorical(2), rng).log_p, -std::log(2.0));
}

TEST(Skills, SphereLogPriorIsInverseSurfaceArea) {
  EXPECT_NEAR(SkillSpec::continuous(2).log_prior(), -std::log(2 * std::numbers::pi), 1e-14);
  EXPECT_NEAR(SkillSpec::continuous(3).log_prior(), -std::log(4 * std::numbers::pi), 1e-14);
  EXPECT_NEAR(SkillSpec::continuous(4).log_prior(), -std::log(2 * std::numbers::pi * std::numbers::pi), 1e-14);
}

TEST(Skills, CategoricalFrequenciesWithinBinomialBound) {
  const int K = 4, draws = 10000;
  Rng rng(8);
  std::vector<int> counts(K, 0);
  for (int i = 0; i < draws; ++i) {
    const SkillSample s = sample_skill(SkillSpec::categorical(K), rng);
    ASSERT_EQ(s.z.sum(), 1.0);
    ASSERT_EQ(s.z[s.index], 1.0);
    ++counts[s.index];
  }
  const double p = 1.0 / K, sd = std::sqrt(draws * p * (1 - p));
  for (int k = 0; k < K; ++k) EXPECT_NEAR(counts[k], draws * p, 3 * sd);
}

TEST(Skills, ContinuousDrawsAreUnitNorm) {
  Rng rng(2);
  Vec mean = Vec::Zero(3);
  for (int i = 0; i < 5000; ++i) {
    const SkillSample s = sample_skill(SkillSpec::continuous(3), rng);
    ASSERT_NEAR(s.z.norm(), 1.0, 1e-15);
    mean += s.z;
  }
  // Uniform on S^2: each coordinate has variance 1/3.
  EXPECT_LT((mean / 5000).cwiseAbs().maxCoeff(), 4 * std::sqrt(1.0 / 3 / 5000));
}

TEST(Skills, InvalidSpecsAreConfigErrors) {
  Rng rng(1);
  EXPECT_EQ(kind_of([&] { sample_skill(SkillSpec::categorical(0), rng); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { sample_skill(SkillSpec::continuous(1), rng); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { skill_kind_from_string("gaussian"); }), ErrorKind::config);
}

// --- policy ------------------------------------------------------------------

TEST(Policy, DeterministicForwardIsRepeatableAndCountsOnce) {
  PolicyFixture f(kLayout, 3, {16}, 4);
  const Vec s = Vec::LinSpaced(4, -1, 1);
  const Vec z = SkillSpec::categorical(3).one_hot(1);
  CostAudit audit;
  const Vec a = policy_forward(f.policy, f.store, s, z, nullptr, &audit);
  EXPECT_EQ(audit.policy_forwards, 1u);
  const Vec b = policy_forward(f.policy, f.store, s, z, nullptr, &audit);
  EXPECT_EQ(audit.policy_forwards, 2u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), kLayout.dim());
  EXPECT_EQ(Vec(a.head(4)), s);
}

TEST(Policy, SampledForwardPerturbsAllButStartState) {
  PolicyFixture f(kLayout, 2, {16}, 4, 0.3);
  const Vec s = Vec::Constant(4, 0.2), z = Vec::Unit(2, 0);
  Rng rng(9);
  const Vec mean = policy_forward(f.policy, f.store, s, z);
  const Vec sample = policy_forward(f.policy, f.store, s, z, &rng);
  EXPECT_EQ(Vec(sample.head(4)), s);
  Rng replay(9);
  for (Index i = 4; i < sample.size(); ++i) EXPECT_DOUBLE_EQ(sample[i], mean[i] + 0.3 * replay.normal());
}

TEST(Policy, GradientMatchesFiniteDifferences) {
  PolicyFixture f(kLayout, 3, {10, 10}, 6);
  Rng rng(3);
  const Mat s = standard_normal(4, 5, rng);
  const Mat z = standard_normal(3, 5, rng);
  const Mat u = standard_normal(kLayout.dim(), 5, rng);
  Tape tape;
  f.policy.mean(f.store, s, z, &tape);
  Vec grad = Vec::Zero(f.store.size());
  f.policy.backward(f.store, tape, u, grad);
  ParamStore scratch = f.store;
  const auto fn = [&](const Vec& p) {
    scratch.values() = p;
    return (u.array() * f.policy.mean(scratch, s, z).array()).sum();
  };
  const GradCheckReport r = gradient_check(fn, f.store.values(), grad, 1e-5);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Policy, NonPositiveSigmaIsRejected) {
  ParamStore store;
  EXPECT_EQ(kind_of([&] { ContextualPolicy::create(store, kLayout, 2, {4}, 0.0); }), ErrorKind::config);
}

// --- discriminator -----------------------------------------------------------

TEST(Discriminator, CategoricalLogProbabilitiesNormalize) {
  for (bool noised : {false, true}) {
    DiscFixture d(kLayout, SkillSpec::categorical(5), noised, 3);
    Rng rng(4);
    const Mat x = 3.0 * standard_normal(kLayout.dim(), 50, rng);
    const std::vector<int> steps(50, 7);
    const Mat h = d.disc.head(d.store, x, noised ? &steps : nullptr);
    for (Index j = 0; j < h.cols(); ++j) {
      const double m = h.col(j).maxCoeff();
      EXPECT_NEAR(m + std::log((h.col(j).array() - m).exp().sum()), 0.0, 1e-6);
    }
  }
}

TEST(Discriminator, UninformativeDiscriminatorScoresZero) {
  DiscFixture d(kLayout, SkillSpec::categorical(4), false, 3);
  d.store.values().setZero();
  const SkillSpec spec = SkillSpec::categorical(4);
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(diversity_term(d.disc, d.store, Vec::Ones(kLayout.dim()), spec.one_hot(k), spec.log_prior()), 0.0,
                1e-15);
  }
}

TEST(Discriminator, ConfidentBinaryDiscriminatorScoresLogTwo) {
  DiscFixture d(kLayout, SkillSpec::categorical(2), false, 3);
  d.store.values().setZero();
  Vec& v = d.store.values();
  v[d.disc.net.bias_offset(1)] = 50.0;
  v[d.disc.net.bias_offset(1) + 1] = -50.0;
  const SkillSpec spec = SkillSpec::categorical(2);
  EXPECT_NEAR(diversity_term(d.disc, d.store, Vec::Zero(kLayout.dim()), spec.one_hot(0), spec.log_prior()),
              0.6931471805599453, 1e-12);
}

TEST(Discriminator, ContinuousHeadIsGaussianDensity) {
  DiscFixture d(kLayout, SkillSpec::continuous(3), false, 5);
  Rng rng(1);
  const Vec x = standard_normal(kLayout.dim(), 1, rng).col(0);
  const Vec z = sample_skill(SkillSpec::continuous(3), rng).z;
  const Vec mu = d.disc.head(d.store, Mat(x)).col(0);
  double expected = 0;
  for (int i = 0; i < 3; ++i)
    expected += -0.5 * std::log(2 * std::numbers::pi * 0.25) - (z[i] - mu[i]) * (z[i] - mu[i]) / (2 * 0.25);
  EXPECT_NEAR(diversity_term(d.disc, d.store, x, z, 0.0), expected, 1e-13);
}

TEST(Discriminator, DiversityGradientsMatchFiniteDifferences) {
  for (const SkillSpec& spec : {SkillSpec::categorical(4), SkillSpec::continuous(3)}) {
    for (bool noised : {false, true}) {
      DiscFixture d(kLayout, spec, noised, 11);
      Rng rng(2);
      const Vec tau = standard_normal(kLayout.dim(), 1, rng).col(0);
      const Vec z = sample_skill(spec, rng).z;
      Vec tg, pg = Vec::Zero(d.store.size());
      diversity_term(d.disc, d.store, tau, z, spec.log_prior(), &tg, &pg, 5);

      const auto by_tau = [&](const Vec& t) { return diversity_term(d.disc, d.store, t, z, spec.log_prior(), nullptr, nullptr, 5); };
      const GradCheckReport rt = gradient_check(by_tau, tau, tg, 1e-5);
      EXPECT_TRUE(rt.pass) << to_string(spec.kind) << " noised=" << noised << " tau err " << rt.max_rel_err;

      ParamStore scratch = d.store;
      const auto by_phi = [&](const Vec& p) {
        scratch.values() = p;
        return diversity_term(d.disc, scratch, tau, z, spec.log_prior(), nullptr, nullptr, 5);
      };
      const GradCheckReport rp = gradient_check(by_phi, d.store.values(), pg, 1e-5);
      EXPECT_TRUE(rp.pass) << to_string(spec.kind) << " noised=" << noised << " phi err " << rp.max_rel_err;
    }
  }
}

// --- regularizer ---------------------------------------------------------------

TEST(Regularizer, ScheduleOrDimensionMismatchIsConfigError) {
  PriorFixture p(kLayout, 1);
  const NoiseSchedule other = make_schedule(16, 1e-3, 0.2);
  EXPECT_EQ(kind_of([&] { diffusion_regularizer(p.model, p.store, other, p.sched.params); }), ErrorKind::config);
  const RegularizerFn reg = p.reg();
  Rng rng(1);
  EXPECT_EQ(kind_of([&] { reg(Mat::Zero(5, 2), rng, nullptr); }), ErrorKind::config);
}

TEST(Regularizer, GradientReachesSegmentButNotPrior) {
  PriorFixture p(kLayout, 2);
  const Vec before = p.store.values();
  const RegularizerFn reg = p.reg();
  Rng rng(5);
  const Mat tau = standard_normal(kLayout.dim(), 3, rng);
  const Rng fixed(6);
  Rng r = fixed;
  Mat g;
  reg(tau, r, &g);
  EXPECT_EQ(p.store.values(), before);
  const auto fn = [&](const Vec& t) {
    Rng rr = fixed;
    return reg(Eigen::Map<const Mat>(t.data(), tau.rows(), tau.cols()), rr, nullptr);
  };
  const GradCheckReport rep = gradient_check(fn, Eigen::Map<const Vec>(tau.data(), tau.size()),
                                             Eigen::Map<const Vec>(g.data(), g.size()), 1e-5);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

// --- objective ---------------------------------------------------------------

DidiBatch make_batch(const SkillSpec& spec, int B, Rng& rng) {
  DidiBatch b;
  b.states = standard_normal(kLayout.state_dim, B, rng);
  b.skills.resize(spec.dim, B);
  b.log_p.resize(B);
  for (int j = 0; j < B; ++j) {
    const SkillSample s = sample_skill(spec, rng);
    b.skills.col(j) = s.z;
    b.log_p[j] = s.log_p;
  }
  b.policy_noise = standard_normal(kLayout.dim(), B, rng);
  return b;
}

const RewardFn kQuadraticReward = [](const Vec& tau, Vec* grad) {
  const Vec d = tau.array() - 0.5;
  if (grad) *grad = -0.2 * d;
  return -0.1 * d.squaredNorm();
};

TEST(Objective, AllWeightsZeroGiveExactZero) {
  const SkillSpec spec = SkillSpec::categorical(3);
  PolicyFixture pol(kLayout, 3, {8}, 1);
  DiscFixture dis(kLayout, spec, false, 2);
  PriorFixture pri(kLayout, 3);
  Rng rng(4);
  const DidiBatch b = make_batch(spec, 6, rng);
  Vec gt = Vec::Zero(pol.store.size()), gp = Vec::Zero(dis.store.size());
  const DidiLossParts parts = didi_loss(pol.policy, pol.store, dis.disc, dis.store, pri.reg(), kQuadraticReward,
                                        {0, 0, 0}, b, nullptr, rng, &gt, &gp);
  EXPECT_EQ(parts.total, 0.0);
  EXPECT_TRUE(gt.isZero(0.0));
  EXPECT_TRUE(gp.isZero(0.0));
}

TEST(Objective, MissingRewardOrRegularizerIsConfigError) {
  const SkillSpec spec = SkillSpec::categorical(3);
  PolicyFixture pol(kLayout, 3, {8}, 1);
  DiscFixture dis(kLayout, spec, false, 2);
  Rng rng(4);
  const DidiBatch b = make_batch(spec, 2, rng);
  EXPECT_EQ(kind_of([&] { didi_loss(pol.policy, pol.store, dis.disc, dis.store, {}, {}, {1, 1, 0}, b, nullptr, rng); }),
            ErrorKind::config);
  EXPECT_EQ(kind_of([&] { didi_loss(pol.policy, pol.store, dis.disc, dis.store, {}, {}, {1, 0, 1}, b, nullptr, rng); }),
            ErrorKind::config);
  EXPECT_EQ(kind_of([&] { didi_loss(pol.policy, pol.store, dis.disc, dis.store, {}, {}, {-1, 0, 0}, b, nullptr, rng); }),
            ErrorKind::config);
}

TEST(Objective, TermsCombineWithStatedSigns) {
  const SkillSpec spec = SkillSpec::categorical(3);
  PolicyFixture pol(kLayout, 3, {8}, 1);
  DiscFixture dis(kLayout, spec, false, 2);
  PriorFixture pri(kLayout, 3);
  Rng rng(4);
  const DidiBatch b = make_batch(spec, 6, rng);
  const DidiLossWeights w{0.7, 1.3, 2.1};
  Rng r(10);
  const DidiLossParts p = didi_loss(pol.policy, pol.store, dis.disc, dis.store, pri.reg(), kQuadraticReward, w, b,
                                    nullptr, r);
  EXPECT_NEAR(p.total, -0.7 * p.diversity - 1.3 * p.reward + 2.1 * p.reg, 1e-14);
  EXPECT_LT(p.reward, 0.0);
  EXPECT_GT(p.reg, 0.0);
}

TEST(Objective, GradientsToBothNetworksMatchFiniteDifferences) {
  for (bool noised : {false, true}) {
    const SkillSpec spec = SkillSpec::categorical(3);
    PolicyFixture pol(kLayout, 3, {8}, 1);
    DiscFixture dis(kLayout, spec, noised, 2);
    PriorFixture pri(kLayout, 3);
    const RegularizerFn reg = pri.reg();
    Rng rng(4);
    const DidiBatch b = make_batch(spec, 4, rng);
    const DidiLossWeights w{1.0, 0.5, 0.8};
    const Rng fixed(99);
    Rng r = fixed;
    Vec gt = Vec::Zero(pol.store.size()), gp = Vec::Zero(dis.store.size());
    didi_loss(pol.policy, pol.store, dis.disc, dis.store, reg, kQuadraticReward, w, b, &pri.sched, r, &gt, &gp);
    EXPECT_GT(gt.norm(), 0.0);
    EXPECT_GT(gp.norm(), 0.0);

    ParamStore ps = pol.store, ds = dis.store;
    const auto loss = [&] {
      Rng rr = fixed;
      return didi_loss(pol.policy, ps, dis.disc, ds, reg, kQuadraticReward, w, b, &pri.sched, rr).total;
    };
    const auto by_theta = [&](const Vec& v) {
      ps.values() = v;
      return loss();
    };
    const GradCheckReport rt = gradient_check(by_theta, pol.store.values(), gt, 1e-5);
    EXPECT_TRUE(rt.pass) << "noised=" << noised << " theta err " << rt.max_rel_err;
    ps = pol.store;
    const auto by_phi = [&](const Vec& v) {
      ds.values() = v;
      return loss();
    };
    const GradCheckReport rp = gradient_check(by_phi, dis.store.values(), gp, 1e-5);
    EXPECT_TRUE(rp.pass) << "noised=" << noised << " phi err " << rp.max_rel_err;
  }
}

TEST(Objective, RegularizerOnlyLeavesDiscriminatorUntouched) {
  const SkillSpec spec = SkillSpec::categorical(3);
  PolicyFixture pol(kLayout, 3, {8}, 1);
  DiscFixture dis(kLayout, spec, false, 2);
  PriorFixture pri(kLayout, 3);
  Rng rng(4);
  const DidiBatch b = make_batch(spec, 4, rng);
  Vec gt = Vec::Zero(pol.store.size()), gp = Vec::Zero(dis.store.size());
  didi_loss(pol.policy, pol.store, dis.disc, dis.store, pri.reg(), {}, {0, 0, 1}, b, nullptr, rng, &gt, &gp);
  EXPECT_GT(gt.norm(), 0.0);
  EXPECT_TRUE(gp.isZero(0.0));
}

// --- trainer -----------------------------------------------------------------

DidiTrainConfig tiny_config(const SkillSpec& spec, std::uint64_t seed) {
  DidiTrainConfig c;
  c.skills = spec;
  c.policy_hidden = {16};
  c.disc_hidden = {8};
  c.batch = 8;
  c.weights.reward = 0.0;
  c.seed = seed;
  return c;
}

TEST(DidiTrainer, SeedReplayIsBitIdentical) {
  PriorFixture pri(kLayout, 3);
  Rng rng(1);
  const Mat starts = standard_normal(4, 20, rng);
  DidiTrainer a(starts, kLayout, tiny_config(SkillSpec::categorical(3), 5), pri.reg());
  DidiTrainer b(starts, kLayout, tiny_config(SkillSpec::categorical(3), 5), pri.reg());
  a.run(30);
  b.run(30);
  EXPECT_EQ(a.policy_store().values(), b.policy_store().values());
  EXPECT_EQ(a.disc_store().values(), b.disc_store().values());
  EXPECT_EQ(a.history().back().total, b.history().back().total);
}

TEST(DidiTrainer, ResumeMatchesStraightRun) {
  PriorFixture pri(kLayout, 3);
  Rng rng(1);
  const Mat starts = standard_normal(4, 20, rng);
  const DidiTrainConfig cfg = tiny_config(SkillSpec::categorical(3), 7);
  DidiTrainer straight(starts, kLayout, cfg, pri.reg());
  straight.run(20);
  DidiTrainer first(starts, kLayout, cfg, pri.reg());
  first.run(10);
  DidiTrainer second(starts, kLayout, cfg, pri.reg());
  second.restore(first.policy_checkpoint(), first.disc_checkpoint());
  second.run(10);
  EXPECT_EQ(second.policy_store().values(), straight.policy_store().values());
  EXPECT_EQ(second.disc_store().values(), straight.disc_store().values());
}

TEST(DidiTrainer, EmptyStartsAndMissingRewardAreRejected) {
  PriorFixture pri(kLayout, 3);
  DidiTrainConfig cfg = tiny_config(SkillSpec::categorical(2), 1);
  EXPECT_EQ(kind_of([&] { DidiTrainer(Mat(4, 0), kLayout, cfg, pri.reg()); }), ErrorKind::empty_dataset);
  cfg.weights.reward = 1.0;
  EXPECT_EQ(kind_of([&] { DidiTrainer(Mat::Zero(4, 3), kLayout, cfg, pri.reg()); }), ErrorKind::config);
  cfg.weights.reward = 0.0;
  cfg.noised_disc = true;
  EXPECT_EQ(kind_of([&] { DidiTrainer(Mat::Zero(4, 3), kLayout, cfg, pri.reg()); }), ErrorKind::config);
}

// The reference two-mode prior, shared by the grounding tests.
class TrainedPrior : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const RunConfig cfg = RunConfig::load(std::string(DIDI_SOURCE_DIR) + "/configs/two_mode.cfg");
    data_ = new OfflineDataset(dataset_from_config(cfg));
    const PriorTrainConfig tc = prior_config(cfg);
    trainer_ = new PriorTrainer(data_->normalized(), data_->layout, make_schedule(schedule_from_config(cfg)), tc);
    trainer_->run(tc.steps);
  }
  static void TearDownTestSuite() {
    delete trainer_;
    delete data_;
  }
  static RegularizerFn reg() {
    return diffusion_regularizer(trainer_->model(), trainer_->store(), trainer_->schedule(),
                                 trainer_->schedule().params);
  }
  static Mat starts() { return data_->normalized().topRows(data_->layout.state_dim); }

  static OfflineDataset* data_;
  static PriorTrainer* trainer_;
};
OfflineDataset* TrainedPrior::data_ = nullptr;
PriorTrainer* TrainedPrior::trainer_ = nullptr;

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

TEST_F(TrainedPrior, DataSegmentsScoreLikeTheDatasetResidual) {
  // Welch t-test between regularizer values and independent eps_loss draws.
  const Mat data = data_->normalized();
  const RegularizerFn r = reg();
  Rng a(3), b(4);
  std::vector<double> xs, ys;
  for (int i = 0; i < 40; ++i) {
    Mat batch(data.rows(), 32);
    for (int j = 0; j < 32; ++j) batch.col(j) = data.col(static_cast<Index>(a.below(data.cols())));
    xs.push_back(r(batch, a, nullptr));
    ys.push_back(eps_loss(trainer_->model(), trainer_->store(), batch, trainer_->schedule(), b).loss);
  }
  const auto var = [](const std::vector<double>& v, double m) {
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / (v.size() - 1);
  };
  const double mx = mean_of(xs), my = mean_of(ys);
  const double t = (mx - my) / std::sqrt(var(xs, mx) / xs.size() + var(ys, my) / ys.size());
  RecordProperty("t_statistic", std::to_string(t));
  EXPECT_LT(std::abs(t), 2.64);  // two-sided p > 0.01 at ~78 degrees of freedom
}

TEST_F(TrainedPrior, OutOfDistributionConstantScoresHigh) {
  const Mat data = data_->normalized();
  Rng r1(3), r2(3);
  const double base = prior_residual(trainer_->model(), trainer_->store(), trainer_->schedule(), data, r1, 4);
  const Mat ood = Mat::Constant(data.rows(), 256, 5.0);
  double v = 0;
  const RegularizerFn r = reg();
  for (int i = 0; i < 4; ++i) v += r(ood, r2, nullptr) / 4;
  RecordProperty("ratio", std::to_string(v / base));
  EXPECT_GE(v, 2.0 * base);
}

TEST_F(TrainedPrior, RegularizationAloneDrivesResidualDown) {
  DidiTrainConfig cfg = tiny_config(SkillSpec::categorical(4), 3);
  cfg.policy_hidden = {32};
  cfg.batch = 32;
  cfg.weights = {0, 0, 1};
  DidiTrainer t(starts(), data_->layout, cfg, reg());
  t.run(400);
  std::vector<double> reg_values;
  for (const auto& p : t.history()) reg_values.push_back(p.reg);
  const double first = std::accumulate(reg_values.begin(), reg_values.begin() + 20, 0.0) / 20;
  const double last = std::accumulate(reg_values.end() - 50, reg_values.end(), 0.0) / 50;
  RecordProperty("first", std::to_string(first));
  RecordProperty("last", std::to_string(last));
  EXPECT_LT(last, 0.7 * first);
}

TEST_F(TrainedPrior, SingleSkillHasConstantZeroDiversity) {
  DidiTrainConfig cfg = tiny_config(SkillSpec::categorical(1), 3);
  cfg.policy_hidden = {32};
  cfg.batch = 32;
  DidiTrainer t(starts(), data_->layout, cfg, reg());
  t.run(300);
  for (const auto& p : t.history()) ASSERT_EQ(p.diversity, 0.0);
  const double first = (t.history()[0].reg + t.history()[1].reg + t.history()[2].reg) / 3;
  double last = 0;
  for (std::size_t i = t.history().size() - 50; i < t.history().size(); ++i) last += t.history()[i].reg / 50;
  EXPECT_LT(last, 0.7 * first);
}

// --- control -----------------------------------------------------------------

// Linear policy whose first planned action is `gain` * z, independent of state.
struct SkillSteeredPolicy {
  ParamStore store;
  ContextualPolicy policy;
  PolicyAgent agent;
  SkillSteeredPolicy(const SegmentLayout& l, int skill_dim, double gain) {
    policy = ContextualPolicy::create(store, l, skill_dim, {});
    store.values().setZero();
    Mat w = Mat::Zero(l.dim(), l.state_dim + skill_dim);
    for (int t = 0; t < l.horizon; ++t)
      for (int i = 0; i < std::min(skill_dim, l.action_dim); ++i) w(l.action_offset(t) + i, l.state_dim + i) = gain;
    store.values().segment(policy.net.weight_offset(0), w.size()) = Eigen::Map<const Vec>(w.data(), w.size());
    agent = {&policy, &store, identity_stats(l)};
  }
};

TEST(Control, ActReturnsFirstActionSliceOfConstantPlan) {
  ParamStore store;
  ContextualPolicy p = ContextualPolicy::create(store, kLayout, 2, {});
  store.values().setZero();
  Vec bias = Vec::LinSpaced(kLayout.dim(), 0.0, 1.0);
  store.values().segment(p.net.bias_offset(0), bias.size()) = bias;
  NormStats stats = identity_stats(kLayout);
  stats.mean = Vec::Constant(kLayout.dim(), 0.5);
  stats.std = Vec::Constant(kLayout.dim(), 2.0);
  const PolicyAgent agent{&p, &store, stats};
  CostAudit audit;
  const Vec2 a = act(agent, Vec::Constant(4, 0.5), Vec::Unit(2, 1), &audit);
  EXPECT_EQ(audit.policy_forwards, 1u);
  EXPECT_DOUBLE_EQ(a.x(), bias[4] * 2.0 + 0.5);
  EXPECT_DOUBLE_EQ(a.y(), bias[5] * 2.0 + 0.5);
}

TEST(Control, RolloutReplansEveryStep) {
  SkillSteeredPolicy s(kLayout, 2, 0.5);
  PushEnvConfig env;
  CostAudit audit;
  const Episode ep = rollout(s.agent, env, EnvState{}, Vec::Unit(2, 0), 17, &audit);
  EXPECT_EQ(audit.policy_forwards, 17u);
  EXPECT_EQ(ep.actions.size(), 17u);
  EXPECT_EQ(ep.states.size(), 18u);
  EXPECT_NEAR(ep.states.back().effector.x(), 17 * 0.5 * env.dt, 1e-12);
}

TEST(Stitch, SingleEntryEqualsPlainRollout) {
  SkillSteeredPolicy s(kLayout, 2, 0.7);
  PushEnvConfig env;
  const Vec z = Vec(Eigen::Vector2d(0.6, -0.8));
  const StitchResult r = stitch_rollout(s.agent, env, EnvState{}, {{z, 12}});
  const Episode plain = rollout(s.agent, env, EnvState{}, z, 12);
  ASSERT_EQ(r.episode.states.size(), plain.states.size());
  for (std::size_t i = 0; i < plain.states.size(); ++i) EXPECT_EQ(r.episode.states[i].as_vector(), plain.states[i].as_vector());
  EXPECT_EQ(r.commanded, std::vector<int>(12, 0));
}

TEST(Stitch, ScheduleSwitchesSkillsAndRecordsCommands) {
  SkillSteeredPolicy s(kLayout, 2, 0.5);
  PushEnvConfig env;
  CostAudit audit;
  const StitchResult r =
      stitch_rollout(s.agent, env, EnvState{}, {{Vec::Unit(2, 0), 4}, {Vec::Unit(2, 1), 3}, {Vec::Unit(2, 0), 2}}, &audit);
  EXPECT_EQ(r.commanded, (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 2, 2}));
  EXPECT_EQ(audit.policy_forwards, 9u);
  EXPECT_NEAR(r.episode.states.back().effector.x(), 6 * 0.05, 1e-12);
  EXPECT_NEAR(r.episode.states.back().effector.y(), 3 * 0.05, 1e-12);
}

TEST(Stitch, EmptyScheduleAndOverlongScheduleAreHandled) {
  SkillSteeredPolicy s(kLayout, 2, 0.5);
  PushEnvConfig env;
  EXPECT_TRUE(stitch_rollout(s.agent, env, EnvState{}, {}).episode.states.empty());
  EXPECT_EQ(kind_of([&] { stitch_rollout(s.agent, env, EnvState{}, {{Vec::Unit(2, 0), env.horizon + 1}}); }),
            ErrorKind::config);
}

TEST(Interpolation, EndpointsMatchPureSkills) {
  SkillSteeredPolicy s(kLayout, 2, 0.8);
  PushEnvConfig env;
  const SkillSpec spec = SkillSpec::continuous(2);
  const Vec za = Vec::Unit(2, 0), zb = Vec::Unit(2, 1);
  const auto ends = interpolate_skills(s.agent, spec, env, EnvState{}, za, zb, 11, 8);
  ASSERT_EQ(ends.size(), 11u);
  EXPECT_EQ(ends.front().as_vector(), rollout(s.agent, env, EnvState{}, za, 8).states.back().as_vector());
  EXPECT_EQ(ends.back().as_vector(), rollout(s.agent, env, EnvState{}, zb, 8).states.back().as_vector());
}

TEST(Interpolation, PathStaysOnSkillManifold) {
  const SkillSpec sphere = SkillSpec::continuous(3), simplex = SkillSpec::categorical(3);
  const Vec a = Vec::Unit(3, 0), b = Vec::Unit(3, 2);
  for (double l : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    EXPECT_NEAR(interpolate_skill(sphere, a, b, l).norm(), 1.0, 1e-15);
    const Vec c = interpolate_skill(simplex, a, b, l);
    EXPECT_NEAR(c.sum(), 1.0, 1e-15);
    EXPECT_GE(c.minCoeff(), 0.0);
  }
  SkillSteeredPolicy s(kLayout, 3, 0.5);
  EXPECT_EQ(kind_of([&] { interpolate_skills(s.agent, sphere, PushEnvConfig{}, EnvState{}, a, a, 5, 4); }),
            ErrorKind::contract);
}

// --- z search ----------------------------------------------------------------

// A wide effector keeps the push insensitive to small heading errors.
PushEnvConfig push_task() {
  PushEnvConfig task;
  task.effector_radius = 0.3;
  task.goal = Vec2(0.7, 0.0);
  return task;
}

EnvState push_start() { return {Vec2(0.0, 0.0), Vec2(0.4, 0.0), 0}; }

TEST(ZSearch, FindsThePlantedSolvingDirection) {
  SkillSteeredPolicy s(kLayout, 2, 1.0);
  const SkillSpec spec = SkillSpec::continuous(2);
  const std::string before = params_digest(s.store.values());
  Rng rng(12);
  const FinetuneResult r = finetune_skill_embedding(s.agent, spec, push_task(), push_start(), 64, 3, rng);
  EXPECT_TRUE(r.success) << r.best_distance;
  EXPECT_GT(r.z.x(), 0.9);
  EXPECT_EQ(r.rollouts, 64);
  EXPECT_EQ(params_digest(s.store.values()), before);
}

TEST(ZSearch, UnreachableGoalReportsFailure) {
  SkillSteeredPolicy s(kLayout, 2, 1.0);
  PushEnvConfig task = push_task();
  task.goal = Vec2(-0.8, 0.8);
  Rng rng(12);
  const FinetuneResult r = finetune_skill_embedding(s.agent, SkillSpec::continuous(2), task, push_start(), 32, 3, rng);
  EXPECT_FALSE(r.success);
  EXPECT_EQ(r.z.size(), 2);
  EXPECT_TRUE(std::isfinite(r.best_distance));
}

TEST(ZSearch, BudgetBelowPopulationIsConfigError) {
  SkillSteeredPolicy s(kLayout, 2, 1.0);
  Rng rng(1);
  EXPECT_EQ(kind_of([&] {
              finetune_skill_embedding(s.agent, SkillSpec::continuous(2), push_task(), push_start(), 15, 6, rng);
            }),
            ErrorKind::config);
  EXPECT_EQ(kind_of([&] {
              finetune_skill_embedding(s.agent, SkillSpec::continuous(2), PushEnvConfig{}, push_start(), 32, 6, rng);
            }),
            ErrorKind::config);
}

}  // namespace
}  // namespace didi
