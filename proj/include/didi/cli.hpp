#pragma once

// Subcommand driver. Every subcommand writes one stage directory inside a
// run directory (data/, prior/, didi/, ...) holding its artifacts, a
// manifest.json and a run.log; inputs default to sibling stage directories
// of the same run and can be redirected with the input.* config keys.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "didi/baselines.hpp"
#include "didi/config.hpp"
#include "didi/cost.hpp"
#include "didi/dataio.hpp"
#include "didi/diffusion.hpp"
#include "didi/didi.hpp"
#include "didi/envs.hpp"
#include "didi/errors.hpp"
#include "didi/eval.hpp"

namespace didi::cli {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;

/// 0 ok, 1 other, 2 config or usage, 3 missing artifact, 4 digest mismatch,
/// 5 divergence, 6 file format or i/o.
inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::contract: return 2;
    case ErrorKind::missing_artifact: return 3;
    case ErrorKind::digest_mismatch: return 4;
    case ErrorKind::divergence:
    case ErrorKind::guided_sampling: return 5;
    case ErrorKind::io:
    case ErrorKind::version_mismatch:
    case ErrorKind::truncated_file:
    case ErrorKind::checksum_failure:
    case ErrorKind::architecture_mismatch: return 6;
    default: return 1;
  }
}

struct Options {
  std::string subcommand;
  std::string baseline;  // train-baseline only
  std::string config_path;
  std::optional<long long> seed;
  std::string run_dir;
  std::vector<std::string> overrides;
};

inline RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  for (const auto& kv : o.overrides) c.apply_override(kv);
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  return c;
}

inline std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

/// --run-dir, else $DIDI_RUNS_ROOT (default "runs") / <timestamp>-<digest8>.
inline fs::path resolve_run_dir(const Options& o, const RunConfig& c) {
  if (!o.run_dir.empty()) return o.run_dir;
  const char* env = std::getenv("DIDI_RUNS_ROOT");
  const fs::path root = env && *env ? env : "runs";
  return root / (utc_stamp() + "-" + c.digest().substr(0, 8));
}

inline std::string stage_name(const Options& o) {
  if (o.subcommand == "gen-data") return "data";
  if (o.subcommand == "train-prior") return "prior";
  if (o.subcommand == "train-didi") return "didi";
  if (o.subcommand == "train-vae") return "vae";
  if (o.subcommand == "train-baseline") return "baseline-" + o.baseline;
  if (o.subcommand == "finetune-z") return "finetune";
  return o.subcommand;
}

/// One stage directory. Inputs and artifacts are digested into the manifest;
/// wall time goes to run.log so that reruns produce identical manifests.
class StageRun {
 public:
  StageRun(const Options& o, RunConfig cfg)
      : opts_(o), cfg_(std::move(cfg)), root_(resolve_run_dir(o, cfg_)), dir_(root_ / stage_name(o)),
        t0_(std::chrono::steady_clock::now()) {
    if (fs::exists(dir_)) {
      throw Error(ErrorKind::io, "'" + dir_.string() + "' already exists; stage directories are never rewritten");
    }
    fs::create_directories(dir_);
  }

  const RunConfig& cfg() const noexcept { return cfg_; }
  const fs::path& root() const noexcept { return root_; }
  const fs::path& dir() const noexcept { return dir_; }
  std::ostream& log() { return log_; }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Path from `key`, else `fallback` under the run directory; must exist.
  std::string input(const std::string& role, const std::string& key, const std::string& fallback) {
    const std::string configured = cfg_.get_text(key);
    const fs::path p = configured.empty() ? root_ / fallback : fs::path(configured);
    if (!fs::exists(p)) {
      throw Error(ErrorKind::missing_artifact, role + " '" + p.string() + "' not found (set " + key + ")");
    }
    record(role, p);
    return p.string();
  }

  void record(const std::string& role, const fs::path& p) { inputs_[role] = file_sha256(p.string()); }

  /// Like input() but returns nullopt when the default location is absent.
  std::optional<std::string> optional_input(const std::string& role, const std::string& key,
                                            const std::string& fallback) {
    if (cfg_.get_text(key).empty() && !fs::exists(root_ / fallback)) return std::nullopt;
    return input(role, key, fallback);
  }

  Checkpoint stamp(Checkpoint c) const {
    c.config_digest = cfg_.digest();
    return c;
  }

  void finish() {
    nlohmann::json m;
    m["manifest_version"] = kManifestVersion;
    m["subcommand"] = opts_.subcommand + (opts_.baseline.empty() ? "" : " " + opts_.baseline);
    m["config_digest"] = cfg_.digest();
    m["seed"] = cfg_.get_int("seed");
    m["config"] = cfg_.values();
    m["inputs"] = inputs_;
    nlohmann::json arts = nlohmann::json::object();
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir_))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string rel = fs::relative(f, dir_).generic_string();
      if (rel == "manifest.json" || rel == "run.log") continue;
      arts[rel] = file_sha256(f.string());
    }
    m["artifacts"] = arts;
    write_file_atomic(path("manifest.json"), m.dump(2) + "\n");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    log_ << "wall_seconds=" << secs << "\n";
    write_file_atomic(path("run.log"), log_.str());
  }

 private:
  Options opts_;
  RunConfig cfg_;
  fs::path root_;
  fs::path dir_;
  std::chrono::steady_clock::time_point t0_;
  std::map<std::string, std::string> inputs_;
  std::ostringstream log_;
};

inline void write_metrics(const std::string& path, const std::vector<std::pair<std::string, double>>& rows) {
  CsvTable t{kMetricColumns, {}};
  for (const auto& [k, v] : rows) t.rows.push_back({k, csv_number(v)});
  write_csv(path, t);
}

// ---------------------------------------------------------------------------
// Shared loaders

struct PolicyBundle {
  LoadedPolicy policy;
  std::optional<LoadedDiscriminator> disc;
};

/// Policy from input.policy (default didi/policy.didickpt); the discriminator
/// from input.discriminator, else next to the policy file when present.
inline PolicyBundle load_policy_bundle(StageRun& run, bool need_disc) {
  const std::string pp = run.input("policy", "input.policy", "didi/policy.didickpt");
  PolicyBundle b{load_policy(load_checkpoint(pp)), std::nullopt};
  const fs::path sibling = fs::path(pp).parent_path() / "discriminator.didickpt";
  std::optional<std::string> dp;
  if (!run.cfg().get_text("input.discriminator").empty() || fs::exists(sibling)) {
    const std::string configured = run.cfg().get_text("input.discriminator");
    const fs::path p = configured.empty() ? sibling : fs::path(configured);
    if (!fs::exists(p)) throw Error(ErrorKind::missing_artifact, "discriminator '" + p.string() + "' not found");
    dp = p.string();
  }
  if (dp) {
    b.disc = load_discriminator(load_checkpoint(*dp));
  } else if (need_disc) {
    throw Error(ErrorKind::missing_artifact, "this subcommand needs a discriminator (set input.discriminator)");
  }
  return b;
}

inline OfflineDataset load_input_dataset(StageRun& run) {
  return load_dataset(run.input("dataset", "input.dataset", "data/dataset.didiset"));
}

inline std::vector<EnvState> eval_starts(const RunConfig& c, const PushEnvConfig& env) {
  Rng rng(stage_seed(c, Stage::eval));
  std::vector<EnvState> s;
  for (int i = 0; i < c.get_int32("eval.starts"); ++i) s.push_back(reset(env, rng));
  return s;
}

inline std::vector<std::vector<Episode>> skill_rollouts(const PolicyAgent& agent, const SkillSpec& spec,
                                                        const PushEnvConfig& env, const std::vector<EnvState>& starts,
                                                        int steps, CostAudit* audit = nullptr) {
  std::vector<std::vector<Episode>> out;
  for (const Vec& z : spec.reference_skills()) {
    out.emplace_back();
    for (const auto& s0 : starts) out.back().push_back(rollout(agent, env, s0, z, steps, audit));
  }
  return out;
}

inline std::vector<Mat> flatten_groups(const std::vector<std::vector<Episode>>& by_skill) {
  std::vector<Mat> groups;
  for (const auto& eps : by_skill) {
    Mat g(4 * static_cast<Index>(eps.front().states.size()), static_cast<Index>(eps.size()));
    for (std::size_t i = 0; i < eps.size(); ++i) g.col(static_cast<Index>(i)) = flatten_positions(eps[i]);
    groups.push_back(std::move(g));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Subcommands

inline void gen_data(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = dataset_from_config(c);
  const OfflineDataset ho = dataset_from_config(c, true);
  save_dataset(ds, run.path("dataset.didiset"));
  save_dataset(ho, run.path("heldout.didiset"));
  export_segments_csv(ds, run.path("segments.csv"));
  run.log() << "segments=" << ds.size() << " heldout=" << ho.size()
            << " soft_bound_violation=" << ds.soft_bound_violation() << "\n";
}

inline void train_prior(StageRun& run) {
  const RunConfig& c = run.cfg();
  const std::string dpath = run.input("dataset", "input.dataset", "data/dataset.didiset");
  const OfflineDataset ds = load_dataset(dpath);
  const fs::path ho_path = fs::path(dpath).parent_path() / "heldout.didiset";
  const ScheduleParams sp = schedule_from_config(c);
  PriorTrainer tr(ds.normalized(), ds.layout, make_schedule(sp), prior_config(c));
  tr.run(c.get_int32("prior.steps"));
  Checkpoint ck = run.stamp(tr.checkpoint());
  ck.meta["stats_digest"] = ds.stats.digest();
  save_checkpoint(ck, run.path("prior.didickpt"));

  CsvTable losses{{"step", "loss"}, {}};
  for (std::size_t i = 0; i < tr.losses().size(); ++i) losses.rows.push_back({std::to_string(i), csv_number(tr.losses()[i])});
  write_csv(run.path("losses.csv"), losses);

  std::vector<std::pair<std::string, double>> m{{"final_loss", tr.losses().back()}};
  Rng rng(stage_seed(c, Stage::samples));
  const int n = c.get_int32("eval.samples");
  const Mat gen = ddpm_sample(tr.model().as_fn(tr.store()), tr.schedule(), rng, n, ds.layout.dim());
  Rng rr(stage_seed(c, Stage::samples) + 1);
  m.emplace_back("residual_train", prior_residual(tr.model(), tr.store(), tr.schedule(), ds.normalized(), rr));
  // Held-out metrics need the heldout.didiset that gen-data writes next to
  // the dataset.
  if (fs::exists(ho_path)) {
    run.record("heldout dataset", ho_path);
    const OfflineDataset ho = load_dataset(ho_path.string());
    const Mat hn = normalize(ho.segments, ds.stats, ds.layout);
    Mat sub(hn.rows(), n);
    for (int j = 0; j < n; ++j) sub.col(j) = hn.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(hn.cols()))));
    const Mat noise = standard_normal(ds.layout.dim(), n, rng);
    const MmdResult g = mmd(gen, sub);
    const MmdResult z = mmd(noise, sub);
    m.emplace_back("mmd_generated", g.reported);
    m.emplace_back("mmd_generated_unbiased", g.unbiased);
    m.emplace_back("mmd_noise", z.reported);
    m.emplace_back("residual_heldout", prior_residual(tr.model(), tr.store(), tr.schedule(), hn, rr));
  }
  const auto cov = mode_coverage(denormalize(gen, ds.stats, ds.layout), ds.layout, scripts_from_config(c));
  for (std::size_t s = 0; s < cov.size(); ++s) m.emplace_back("mode_coverage_" + std::to_string(s), cov[s]);
  write_metrics(run.path("metrics.csv"), m);
  run.log() << "prior final_loss=" << tr.losses().back() << "\n";
}

inline LoadedPrior load_matching_prior(StageRun& run, const OfflineDataset& ds) {
  const Checkpoint pc = load_checkpoint(run.input("prior", "input.prior", "prior/prior.didickpt"));
  const auto it = pc.meta.find("stats_digest");
  if (it == pc.meta.end() || it->second != ds.stats.digest()) {
    throw Error(ErrorKind::digest_mismatch,
                "the prior was trained on a dataset with different normalization statistics");
  }
  check_config_digest(pc, run.cfg().digest(), run.log());
  return load_prior(pc);
}

inline void save_didi(StageRun& run, const DidiTrainer& tr, const std::string& baseline = "") {
  Checkpoint pc = run.stamp(tr.policy_checkpoint());
  Checkpoint dc = run.stamp(tr.disc_checkpoint());
  if (!baseline.empty()) pc.meta["baseline"] = baseline;
  save_checkpoint(pc, run.path("policy.didickpt"));
  save_checkpoint(dc, run.path("discriminator.didickpt"));
  CsvTable t{{"step", "total", "diversity", "reward", "reg"}, {}};
  for (std::size_t i = 0; i < tr.history().size(); ++i) {
    const auto& h = tr.history()[i];
    t.rows.push_back({std::to_string(i), csv_number(h.total), csv_number(h.diversity), csv_number(h.reward),
                      csv_number(h.reg)});
  }
  write_csv(run.path("losses.csv"), t);
  run.log() << "final_total=" << tr.history().back().total << "\n";
}

inline RewardFn reward_from_config(const RunConfig& c, const OfflineDataset& ds) {
  if (c.get_real("didi.w_reward") == 0.0) return {};
  return segment_reward(env_from_config(c), ds.stats, ds.layout);
}

inline void train_didi(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const LoadedPrior prior = load_matching_prior(run, ds);
  const RegularizerFn reg = diffusion_regularizer(prior.model, prior.store, prior.schedule, schedule_from_config(c));
  const Mat starts = ds.normalized().topRows(ds.layout.state_dim);
  const DidiTrainConfig dc = didi_config(c);
  DidiTrainer tr(starts, ds.layout, dc, reg, reward_from_config(c, ds), &prior.schedule);
  tr.run(dc.steps);
  save_didi(run, tr);
}

inline void train_vae(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  VaeTrainer tr(ds.normalized(), ds.layout, vae_config(c));
  tr.run(c.get_int32("vae.steps"));
  save_checkpoint(run.stamp(tr.checkpoint()), run.path("vae.didickpt"));
  CsvTable t{{"step", "loss", "recon", "kl"}, {}};
  for (std::size_t i = 0; i < tr.history().size(); ++i) {
    const auto& h = tr.history()[i];
    t.rows.push_back({std::to_string(i), csv_number(h.loss), csv_number(h.recon), csv_number(h.kl)});
  }
  write_csv(run.path("losses.csv"), t);
}

inline void train_baseline(StageRun& run, const std::string& which) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  if (which == "kmeans") {
    const KMeansDiResult r = kmeans_di(ds, c.get_int32("kmeans.k"), bc_config(c));
    save_checkpoint(run.stamp(r.checkpoint), run.path("policy.didickpt"));
    CsvTable t{{"cluster", "size", "ex", "ey", "bx", "by"}, {}};
    for (int k = 0; k < r.partition.k; ++k) {
      const auto size = std::count(r.partition.assignment.begin(), r.partition.assignment.end(), k);
      std::vector<std::string> row{std::to_string(k), std::to_string(size)};
      for (Index i = 0; i < r.partition.centroids.rows(); ++i) row.push_back(csv_number(r.partition.centroids(i, k)));
      t.rows.push_back(row);
    }
    write_csv(run.path("partition.csv"), t);
    write_metrics(run.path("metrics.csv"), {{"wcss", r.partition.wcss.back()},
                                            {"iterations", static_cast<double>(r.partition.iterations)},
                                            {"final_loss", r.losses.back()}});
    return;
  }
  const LoadedVae v = load_vae(load_checkpoint(run.input("vae", "input.vae", "vae/vae.didickpt")));
  const RegularizerFn reg =
      vae_regularizer(v.vae, v.store, which == "vaedi" ? VaeRegKind::reconstruct : VaeRegKind::prior_sample);
  const DidiTrainConfig dc = didi_config(c);
  std::optional<NoiseSchedule> sched;
  if (dc.noised_disc) sched = make_schedule(schedule_from_config(c));
  DidiTrainer tr(ds.normalized().topRows(ds.layout.state_dim), ds.layout, dc, reg, reward_from_config(c, ds),
                 sched ? &*sched : nullptr);
  tr.run(dc.steps);
  save_didi(run, tr, which);
}

inline void eval_policy(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const PolicyBundle b = load_policy_bundle(run, false);
  const PushEnvConfig env = env_from_config(c);
  const PolicyAgent agent{&b.policy.policy, &b.policy.store, ds.stats};
  const auto by_skill = skill_rollouts(agent, b.policy.spec, env, eval_starts(c, env), c.get_int32("eval.rollout_steps"));
  write_csv(run.path("rollouts.csv"), rollouts_table(by_skill));
  const auto groups = flatten_groups(by_skill);

  std::vector<std::pair<std::string, double>> m;
  if (groups.size() >= 2) m.emplace_back("diversity", diversity_score(groups).score);
  Rng rng(stage_seed(c, Stage::eval) + 1);
  const Mat starts = ds.normalized().topRows(ds.layout.state_dim);
  const GeneratedBatch gen = generate_segments(b.policy.policy, b.policy.store, b.policy.spec, starts,
                                               c.get_int32("eval.samples"), rng);
  if (b.disc && b.policy.spec.kind == SkillKind::categorical) {
    m.emplace_back("accuracy", discriminator_accuracy(b.disc->disc, b.disc->store, gen.segments, gen.labels));
  }
  if (const auto pp = run.optional_input("prior", "input.prior", "prior/prior.didickpt")) {
    const LoadedPrior prior = load_prior(load_checkpoint(*pp));
    Mat data(ds.layout.dim(), gen.segments.cols());
    const Mat dn = ds.normalized();
    for (Index j = 0; j < data.cols(); ++j) data.col(j) = dn.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(dn.cols()))));
    Rng r1(stage_seed(c, Stage::eval) + 2);
    Rng r2(stage_seed(c, Stage::eval) + 2);
    const double rg = prior_residual(prior.model, prior.store, prior.schedule, gen.segments, r1);
    const double rd = prior_residual(prior.model, prior.store, prior.schedule, data, r2);
    m.emplace_back("residual_generated", rg);
    m.emplace_back("residual_data", rd);
    m.emplace_back("residual_ratio", rg / rd);
  }
  if (env.goal) {
    const GoalReport g = goal_report(groups, *env.goal, c.get_real("eval.success_eps"));
    for (std::size_t k = 0; k < g.success_rate.size(); ++k) m.emplace_back("goal_success_" + std::to_string(k), g.success_rate[k]);
    m.emplace_back("successful_skills", static_cast<double>(g.successful.size()));
    if (g.successful.size() >= 2) m.emplace_back("min_pair_distance", g.min_pair_distance);
  }
  write_metrics(run.path("metrics.csv"), m);
}

inline void rollout_cmd(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const PolicyBundle b = load_policy_bundle(run, false);
  const PushEnvConfig env = env_from_config(c);
  const PolicyAgent agent{&b.policy.policy, &b.policy.store, ds.stats};
  CostAudit audit;
  const int steps = c.get_int32("eval.rollout_steps");
  const auto starts = eval_starts(c, env);
  const auto by_skill = skill_rollouts(agent, b.policy.spec, env, starts, steps, &audit);
  write_csv(run.path("rollouts.csv"), rollouts_table(by_skill));
  const std::uint64_t actions = by_skill.size() * starts.size() * static_cast<std::uint64_t>(steps);
  write_csv(run.path("cost.csv"), cost_table("didi", actions, audit));
}

inline void diffuser_rollout(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const LoadedPrior prior = load_matching_prior(run, ds);
  const PushEnvConfig env = env_from_config(c);
  GuidanceSpec g;
  g.scale = c.get_real("diffuser.scale");
  const int skill = c.get_int32("diffuser.skill");
  std::optional<LoadedDiscriminator> disc;
  if (skill >= 0) {
    disc = load_discriminator(load_checkpoint(run.input("discriminator", "input.discriminator", "didi/discriminator.didickpt")));
    const auto refs = disc->disc.spec.reference_skills();
    require_config(skill < static_cast<int>(refs.size()), "diffuser.skill exceeds the skill count");
    g.target_skill = refs[static_cast<std::size_t>(skill)];
    const Discriminator* d = &disc->disc;
    const ParamStore* s = &disc->store;
    const Vec z = *g.target_skill;
    g.discriminator = [d, s, z](const Vec& x, int n, Vec& grad) {
      return diversity_term(*d, *s, x, z, 0.0, &grad, nullptr, n);
    };
  }
  if (env.goal) {
    const RewardFn r = segment_reward(env, ds.stats, ds.layout);
    g.reward = [r](const Vec& x, Vec& grad) { return r(x, &grad); };
  }
  g.validate();
  const auto eps = prior.model.as_fn(prior.store);
  Rng rng(stage_seed(c, Stage::diffuser));
  CostAudit audit;
  const int steps = c.get_int32("diffuser.actions");
  std::vector<std::vector<Episode>> by_skill(1);
  for (const auto& s0 : eval_starts(c, env)) {
    Episode ep;
    ep.states.push_back(s0);
    for (int t = 0; t < steps; ++t) {
      const Vec2 a = diffuser_act(eps, prior.schedule, g, ds.layout, ds.stats, ep.states.back().as_vector(), rng, &audit);
      ep.actions.push_back(a);
      ep.states.push_back(step(ep.states.back(), a, env));
    }
    by_skill[0].push_back(std::move(ep));
  }
  write_csv(run.path("rollouts.csv"), rollouts_table(by_skill));
  const std::uint64_t actions = by_skill[0].size() * static_cast<std::uint64_t>(steps);
  write_csv(run.path("cost.csv"), cost_table("diffuser", actions, audit));
}

inline void stitch_cmd(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const PolicyBundle b = load_policy_bundle(run, true);
  PushEnvConfig env = env_from_config(c);
  const auto sched = stitch_schedule_from_config(c);
  std::vector<std::pair<Vec, int>> plan;
  std::vector<int> skills;
  const auto refs = b.policy.spec.reference_skills();
  int total = 0;
  for (const auto& [k, d] : sched) {
    require_config(k >= 0 && k < static_cast<int>(refs.size()), "stitch.schedule names an unknown skill");
    plan.emplace_back(refs[static_cast<std::size_t>(k)], d);
    skills.push_back(k);
    total += d;
  }
  env.horizon = std::max(env.horizon, total);
  const PolicyAgent agent{&b.policy.policy, &b.policy.store, ds.stats};
  const StitchResult sr = stitch_rollout(agent, env, state_from_config(c, "stitch.start"), plan);
  const StitchScore score = stitch_accuracy(b.disc->disc, b.disc->store, ds.stats, sr, skills, c.get_int32("stitch.transient"));
  CsvTable t{kStitchColumns, {}};
  for (std::size_t i = 0; i < sr.commanded.size(); ++i) {
    const int phase = sr.commanded[i];
    const EnvState& s = sr.episode.states[i];
    t.rows.push_back({std::to_string(i), std::to_string(phase), std::to_string(skills[static_cast<std::size_t>(phase)]),
                      std::to_string(score.predicted[i]), csv_number(s.effector.x()), csv_number(s.effector.y()),
                      csv_number(s.block.x()), csv_number(s.block.y())});
  }
  write_csv(run.path("stitch.csv"), t);
  write_metrics(run.path("metrics.csv"), {{"stitch_accuracy", score.accuracy},
                                          {"evaluated_steps", static_cast<double>(score.evaluated)}});
}

inline void interp_cmd(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const PolicyBundle b = load_policy_bundle(run, false);
  const PushEnvConfig env = env_from_config(c);
  const auto refs = b.policy.spec.reference_skills();
  const int ia = c.get_int32("interp.skill_a");
  const int ib = c.get_int32("interp.skill_b");
  require_config(ia >= 0 && ib >= 0 && ia < static_cast<int>(refs.size()) && ib < static_cast<int>(refs.size()),
                 "interp skills out of range");
  const int points = c.get_int32("interp.points");
  require_config(points >= 3, "interp.points must be at least 3");
  const int steps = c.get_int32("interp.rollout_steps");
  const EnvState s0 = state_from_config(c, "interp.start");
  const PolicyAgent agent{&b.policy.policy, &b.policy.store, ds.stats};
  CsvTable t{kInterpColumns, {}};
  std::vector<EnvState> ends;
  for (int i = 0; i < points; ++i) {
    const double lambda = static_cast<double>(i) / (points - 1);
    const Vec z = interpolate_skill(b.policy.spec, refs[static_cast<std::size_t>(ia)], refs[static_cast<std::size_t>(ib)], lambda);
    const Episode ep = rollout(agent, env, s0, z, steps);
    for (std::size_t k = 0; k < ep.states.size(); ++k) {
      const EnvState& s = ep.states[k];
      t.rows.push_back({std::to_string(i), csv_number(lambda), std::to_string(k), csv_number(s.effector.x()),
                        csv_number(s.effector.y()), csv_number(s.block.x()), csv_number(s.block.y())});
    }
    ends.push_back(ep.states.back());
  }
  write_csv(run.path("interp.csv"), t);
  const InterpolationReport r = interpolation_report(ends);
  write_metrics(run.path("metrics.csv"), {{"separation", r.separation},
                                          {"max_gap", r.max_gap},
                                          {"max_gap_ratio", r.gap_ratio()},
                                          {"mid_to_a", r.mid_to_a},
                                          {"mid_to_b", r.mid_to_b}});
}

inline void finetune_cmd(StageRun& run) {
  const RunConfig& c = run.cfg();
  const OfflineDataset ds = load_input_dataset(run);
  const PolicyBundle b = load_policy_bundle(run, false);
  const PushEnvConfig env = env_from_config(c);
  Rng rng(stage_seed(c, Stage::finetune));
  const auto tasks = sample_downstream_tasks(env, c.get_int32("finetune.tasks"), rng, task_sampler_from_config(c));
  std::vector<EnvState> starts;
  for (const auto& t : tasks) starts.push_back(reset(t, rng));
  const PolicyAgent agent{&b.policy.policy, &b.policy.store, ds.stats};
  std::optional<LoadedPolicy> bc;
  std::optional<PolicyAgent> bc_agent;
  if (!c.get_text("input.bc").empty()) {
    bc = load_policy(load_checkpoint(run.input("bc policy", "input.bc", "")));
    bc_agent = PolicyAgent{&bc->policy, &bc->store, ds.stats};
  }
  const FinetuneReport r =
      finetune_protocol(agent, b.policy.spec, tasks, starts, c.get_int32("finetune.budget"),
                        c.get_int32("finetune.rollout_steps"), c.get_real("eval.success_eps"), rng,
                        bc_agent ? &*bc_agent : nullptr);
  std::vector<std::string> header{"task", "goal_x", "goal_y", "obstacles", "search_distance", "search_success"};
  for (std::size_t k = 0; k < r.frozen_rate.size(); ++k) header.push_back("frozen_" + std::to_string(k));
  if (r.bc_rate) header.push_back("bc");
  CsvTable t{header, {}};
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& tr = r.tasks[i];
    std::vector<std::string> row{std::to_string(i), csv_number(tasks[i].goal->x()), csv_number(tasks[i].goal->y()),
                                 std::to_string(tasks[i].obstacles.size()), csv_number(tr.search_distance),
                                 tr.search_success ? "1" : "0"};
    for (double d : tr.frozen_distance) row.push_back(csv_number(d));
    if (tr.bc_distance) row.push_back(csv_number(*tr.bc_distance));
    t.rows.push_back(row);
  }
  write_csv(run.path("tasks.csv"), t);
  std::vector<std::pair<std::string, double>> m{{"search_success_rate", r.search_rate},
                                                {"best_frozen_success_rate", r.best_frozen_rate}};
  for (std::size_t k = 0; k < r.frozen_rate.size(); ++k) m.emplace_back("frozen_success_rate_" + std::to_string(k), r.frozen_rate[k]);
  if (r.bc_rate) m.emplace_back("bc_success_rate", *r.bc_rate);
  write_metrics(run.path("metrics.csv"), m);
}

// ---------------------------------------------------------------------------

inline void dispatch(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  // Validate the whole config before touching the file system.
  env_from_config(cfg).validate(cfg.get_int32("data.horizon"));
  if (o.subcommand == "report") {
    const fs::path root = resolve_run_dir(o, cfg);
    for (const char* f : {"eval/rollouts.csv", "eval/metrics.csv"}) {
      if (!fs::exists(root / f)) {
        throw Error(ErrorKind::missing_artifact, "report needs '" + (root / f).string() + "'; run eval first");
      }
    }
  }
  StageRun run(o, cfg);
  const std::string& s = o.subcommand;
  if (s == "gen-data") gen_data(run);
  else if (s == "train-prior") train_prior(run);
  else if (s == "train-didi") train_didi(run);
  else if (s == "train-vae") train_vae(run);
  else if (s == "train-baseline") train_baseline(run, o.baseline);
  else if (s == "eval") eval_policy(run);
  else if (s == "rollout") rollout_cmd(run);
  else if (s == "diffuser-rollout") diffuser_rollout(run);
  else if (s == "stitch") stitch_cmd(run);
  else if (s == "interp") interp_cmd(run);
  else if (s == "finetune-z") finetune_cmd(run);
  else if (s == "report") {
    run.record("eval metrics", run.root() / "eval/metrics.csv");
    run.record("eval rollouts", run.root() / "eval/rollouts.csv");
    emit_report(run.root().string(), cfg.get_real("env.half_extent"));
  } else {
    throw Error(ErrorKind::config, "unknown subcommand '" + s + "'");
  }
  run.finish();
  std::cout << run.dir().string() << "\n";
}

inline int run_cli(int argc, char** argv) {
  CLI::App app{"Diffusion-guided diverse skill learning from offline data"};
  app.require_subcommand(1, 1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> subs{
      {"gen-data", "roll out the behavior scripts into a segment dataset"},
      {"train-prior", "fit the diffusion prior on the dataset"},
      {"train-didi", "train the contextual policy and discriminator"},
      {"train-baseline", "train a baseline: vaedi, vaedi-fixed or kmeans"},
      {"train-vae", "fit the VAE used by the VAE baselines"},
      {"eval", "closed-loop rollouts per skill plus diversity, accuracy and residual metrics"},
      {"rollout", "per-skill rollouts with an inference-cost audit"},
      {"stitch", "switch skills along a schedule and classify the executed windows"},
      {"interp", "roll out skills interpolated between two reference skills"},
      {"finetune-z", "search the skill embedding on sampled obstacle tasks"},
      {"diffuser-rollout", "act by guided sampling from the prior"},
      {"report", "collect metrics and plots of a run directory"},
  };
  for (const auto& [name, help] : subs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config_path, "key = value config file");
    sub->add_option("--seed", o.seed, "master seed, overrides the config");
    sub->add_option("--run-dir", o.run_dir, "run directory (default $DIDI_RUNS_ROOT/<time>-<digest8>)");
    sub->add_option("--override", o.overrides, "key=value, repeatable")->take_all();
    if (name == "train-baseline") {
      sub->add_option("kind", o.baseline, "vaedi | vaedi-fixed | kmeans")
          ->required()
          ->check(CLI::IsMember({"vaedi", "vaedi-fixed", "kmeans"}));
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  o.subcommand = app.get_subcommands().front()->get_name();
  try {
    dispatch(o);
    return 0;
  } catch (const Error& e) {
    std::cerr << "didi " << o.subcommand << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "didi " << o.subcommand << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace didi::cli
