#pragma once

// Flat key=value run configuration. Every key has a type and a default;
// unknown keys are rejected. Values are stored in canonical form so the
// digest is independent of key order and number spelling.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "didi/baselines.hpp"
#include "didi/dataio.hpp"
#include "didi/didi.hpp"
#include "didi/diffusion.hpp"
#include "didi/digest.hpp"
#include "didi/envs.hpp"
#include "didi/errors.hpp"

namespace didi {

enum class KeyType { integer, real, boolean, text, int_list, real_list };

struct KeySpec {
  const char* key;
  KeyType type;
  const char* fallback;
  const char* doc;
};

// clang-format off
inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema{
      {"seed", KeyType::integer, "0", "master seed; every stage forks its own stream from it"},

      {"env.half_extent", KeyType::real, "1", "arena is [-h, h]^2"},
      {"env.effector_radius", KeyType::real, "0.05", ""},
      {"env.block_radius", KeyType::real, "0.1", ""},
      {"env.dt", KeyType::real, "0.1", "seconds per step"},
      {"env.max_speed", KeyType::real, "1", "effector speed limit, length/second"},
      {"env.horizon", KeyType::integer, "24", "episode length T"},
      {"env.goal", KeyType::real_list, "", "x,y of the goal; empty for none"},
      {"env.gamma", KeyType::real, "1", "reward discount within a segment"},
      {"env.obstacles", KeyType::real_list, "", "x0,y0,x1,y1 per rectangle, concatenated"},
      {"env.effector_spawn", KeyType::real_list, "0,0,0.3,0.3", "cx,cy,hx,hy of the effector spawn box"},
      {"env.block_spawn", KeyType::real_list, "0,-0.9,0.3,0.03", "cx,cy,hx,hy of the block spawn box"},

      {"data.scripts", KeyType::text, "reach:0.05:0.65,0.65;reach:0.05:-0.65,-0.65",
       "kind:noise:x,y/x,y/... per script, ';'-separated; kind is reach or push"},
      {"data.episodes_per_script", KeyType::integer, "60", ""},
      {"data.horizon", KeyType::integer, "8", "segment horizon H"},
      {"data.norm_mode", KeyType::text, "per_coordinate", "per_coordinate or per_step"},

      {"diffusion.schedule", KeyType::text, "linear", "linear or cosine"},
      {"diffusion.steps", KeyType::integer, "64", "N"},
      {"diffusion.beta_min", KeyType::real, "1e-4", ""},
      {"diffusion.beta_max", KeyType::real, "0.1", "keeps alpha_bar_N below 0.05 at N = 64"},

      {"prior.hidden", KeyType::int_list, "256,256", ""},
      {"prior.steps", KeyType::integer, "3000", ""},
      {"prior.batch", KeyType::integer, "128", ""},
      {"prior.lr", KeyType::real, "1e-3", ""},

      {"skills.kind", KeyType::text, "categorical", "categorical or continuous"},
      {"skills.dim", KeyType::integer, "4", "K (categorical) or d (continuous)"},

      {"policy.hidden", KeyType::int_list, "128,128", ""},
      {"policy.sigma", KeyType::real, "0.05", "fixed output noise, normalized units"},
      {"disc.hidden", KeyType::int_list, "64,64", ""},
      {"disc.noised", KeyType::boolean, "false", "discriminator sees (tau^n, n) instead of tau"},
      {"disc.sigma_q", KeyType::real, "0.5", "std of the continuous-skill discriminator"},

      {"didi.steps", KeyType::integer, "3000", ""},
      {"didi.batch", KeyType::integer, "64", ""},
      {"didi.lr", KeyType::real, "1e-3", ""},
      {"didi.disc_lr_mult", KeyType::real, "1", "3 gives the two-timescale mode"},
      {"didi.w_div", KeyType::real, "1", ""},
      {"didi.w_reward", KeyType::real, "0", "reward weight; needs env.goal"},
      {"didi.w_reg", KeyType::real, "1", ""},

      {"train.clip_norm", KeyType::real, "10", "global gradient-norm clip"},

      {"vae.latent", KeyType::integer, "8", ""},
      {"vae.hidden", KeyType::int_list, "128,128", ""},
      {"vae.dec_sigma", KeyType::real, "0.3", "fixed decoder std, normalized units"},
      {"vae.steps", KeyType::integer, "3000", ""},
      {"vae.batch", KeyType::integer, "128", ""},
      {"vae.lr", KeyType::real, "1e-3", ""},

      {"kmeans.k", KeyType::integer, "4", ""},
      {"bc.hidden", KeyType::int_list, "128,128", ""},
      {"bc.steps", KeyType::integer, "3000", ""},
      {"bc.batch", KeyType::integer, "64", ""},
      {"bc.lr", KeyType::real, "1e-3", ""},

      {"eval.starts", KeyType::integer, "32", "start states per skill"},
      {"eval.rollout_steps", KeyType::integer, "8", "closed-loop steps per evaluation rollout"},
      {"eval.samples", KeyType::integer, "200", "prior samples for MMD and mode coverage"},
      {"eval.success_eps", KeyType::real, "0.1", ""},

      {"stitch.schedule", KeyType::int_list, "0,20,1,20,0,20", "skill,duration pairs"},
      {"stitch.transient", KeyType::integer, "5", ""},
      {"stitch.start", KeyType::real_list, "0,0,0,-0.9", "ex,ey,bx,by"},

      {"interp.skill_a", KeyType::integer, "0", ""},
      {"interp.skill_b", KeyType::integer, "1", ""},
      {"interp.points", KeyType::integer, "11", ""},
      {"interp.rollout_steps", KeyType::integer, "8", ""},
      {"interp.start", KeyType::real_list, "0,0,0,-0.9", "ex,ey,bx,by"},

      {"finetune.tasks", KeyType::integer, "10", ""},
      {"finetune.budget", KeyType::integer, "50", "rollouts per task"},
      {"finetune.rollout_steps", KeyType::integer, "24", ""},
      {"finetune.goal_center", KeyType::real_list, "0,0", ""},
      {"finetune.goal_radius", KeyType::real_list, "0.45,0.6", "min,max"},
      {"finetune.goal_angle", KeyType::real_list, "30,150", "min,max degrees"},
      {"finetune.obstacles", KeyType::int_list, "1,3", "min,max count"},
      {"finetune.obstacle_half", KeyType::real_list, "0.04,0.12", "min,max half-size"},

      {"diffuser.scale", KeyType::real, "1", "guidance scale"},
      {"diffuser.skill", KeyType::integer, "-1", "target skill for discriminator guidance; -1 for none"},
      {"diffuser.actions", KeyType::integer, "4", "closed-loop actions to take"},

      {"input.dataset", KeyType::text, "", "path of a .didiset"},
      {"input.prior", KeyType::text, "", "path of the prior .didickpt"},
      {"input.policy", KeyType::text, "", ""},
      {"input.discriminator", KeyType::text, "", ""},
      {"input.vae", KeyType::text, "", ""},
      {"input.bc", KeyType::text, "", "single cloned policy (kmeans.k = 1) compared by finetune-z"},
  };
  return schema;
}
// clang-format on

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, sep)) out.push_back(trim(cur));
  return out;
}

namespace detail {

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || !std::isfinite(d)) {
    throw Error(ErrorKind::config, "key '" + key + "': '" + v + "' is not a finite number");
  }
  return d;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw Error(ErrorKind::config, "key '" + key + "': '" + v + "' is not an integer");
  return i;
}

inline std::string canonical_value(const KeySpec& spec, const std::string& raw) {
  const std::string v = trim(raw);
  switch (spec.type) {
    case KeyType::integer:
      return std::to_string(parse_int(spec.key, v));
    case KeyType::real:
      return format_double(parse_real(spec.key, v));
    case KeyType::boolean:
      if (v == "true" || v == "1") return "true";
      if (v == "false" || v == "0") return "false";
      throw Error(ErrorKind::config, std::string("key '") + spec.key + "': expected true or false");
    case KeyType::text:
      return v;
    case KeyType::int_list:
    case KeyType::real_list: {
      if (v.empty()) return "";
      std::string out;
      for (const auto& item : split(v, ',')) {
        if (!out.empty()) out += ",";
        out += spec.type == KeyType::int_list ? std::to_string(parse_int(spec.key, item))
                                              : format_double(parse_real(spec.key, item));
      }
      return out;
    }
  }
  return v;
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.key] = detail::canonical_value(k, k.fallback);
  }

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>") {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::missing_artifact, "cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) {
    values_[key] = detail::canonical_value(spec(key), value);
  }

  /// "key=value" form used by --override.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::config, "override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }

  const std::string& raw(const std::string& key) const {
    spec(key);
    return values_.at(key);
  }

  long long get_int(const std::string& key) const { return detail::parse_int(key, typed(key, KeyType::integer)); }
  int get_int32(const std::string& key) const { return static_cast<int>(get_int(key)); }
  double get_real(const std::string& key) const { return detail::parse_real(key, typed(key, KeyType::real)); }
  bool get_bool(const std::string& key) const { return typed(key, KeyType::boolean) == "true"; }
  std::string get_text(const std::string& key) const { return typed(key, KeyType::text); }

  std::vector<int> get_ints(const std::string& key) const {
    std::vector<int> out;
    const std::string& v = typed(key, KeyType::int_list);
    if (!v.empty())
      for (const auto& s : split(v, ',')) out.push_back(static_cast<int>(detail::parse_int(key, s)));
    return out;
  }

  std::vector<double> get_reals(const std::string& key) const {
    std::vector<double> out;
    const std::string& v = typed(key, KeyType::real_list);
    if (!v.empty())
      for (const auto& s : split(v, ',')) out.push_back(detail::parse_real(key, s));
    return out;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// Sorted "key=value" lines of every key, defaults included.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  std::string digest() const { return sha256_hex(canonical()); }

 private:
  static const KeySpec& spec(const std::string& key) {
    for (const auto& k : config_schema())
      if (key == k.key) return k;
    throw Error(ErrorKind::config, "unknown config key '" + key + "'");
  }

  const std::string& typed(const std::string& key, KeyType t) const {
    if (spec(key).type != t) throw Error(ErrorKind::contract, "config key '" + key + "' read with the wrong type");
    return values_.at(key);
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Builders

inline std::vector<double> expect_len(const RunConfig& c, const std::string& key, std::size_t n) {
  auto v = c.get_reals(key);
  if (v.size() != n) {
    throw Error(ErrorKind::config, "key '" + key + "' needs " + std::to_string(n) + " numbers");
  }
  return v;
}

inline PushEnvConfig env_from_config(const RunConfig& c) {
  PushEnvConfig e;
  e.half_extent = c.get_real("env.half_extent");
  e.effector_radius = c.get_real("env.effector_radius");
  e.block_radius = c.get_real("env.block_radius");
  e.dt = c.get_real("env.dt");
  e.max_speed = c.get_real("env.max_speed");
  e.horizon = c.get_int32("env.horizon");
  e.gamma = c.get_real("env.gamma");
  const auto g = c.get_reals("env.goal");
  if (!g.empty()) {
    if (g.size() != 2) throw Error(ErrorKind::config, "env.goal needs x,y");
    e.goal = Vec2(g[0], g[1]);
  }
  const auto o = c.get_reals("env.obstacles");
  if (o.size() % 4 != 0) throw Error(ErrorKind::config, "env.obstacles needs four numbers per rectangle");
  for (std::size_t i = 0; i < o.size(); i += 4) {
    const Rect r{Vec2(std::min(o[i], o[i + 2]), std::min(o[i + 1], o[i + 3])),
                 Vec2(std::max(o[i], o[i + 2]), std::max(o[i + 1], o[i + 3]))};
    e.obstacles.push_back(r);
  }
  const auto es = expect_len(c, "env.effector_spawn", 4);
  const auto bs = expect_len(c, "env.block_spawn", 4);
  e.effector_spawn = {Vec2(es[0], es[1]), Vec2(es[2], es[3])};
  e.block_spawn = {Vec2(bs[0], bs[1]), Vec2(bs[2], bs[3])};
  e.validate(c.get_int32("data.horizon"));
  return e;
}

/// "kind:noise:x,y/x,y;..." -> scripts with ids 0, 1, ...
inline std::vector<BehaviorScript> scripts_from_config(const RunConfig& c) {
  std::vector<BehaviorScript> out;
  for (const auto& item : split(c.get_text("data.scripts"), ';')) {
    if (item.empty()) continue;
    const auto parts = split(item, ':');
    if (parts.size() != 3) throw Error(ErrorKind::config, "script '" + item + "' is not kind:noise:waypoints");
    BehaviorScript s;
    s.id = static_cast<int>(out.size());
    if (parts[0] == "reach") s.kind = ScriptKind::reach;
    else if (parts[0] == "push") s.kind = ScriptKind::push;
    else throw Error(ErrorKind::config, "unknown script kind '" + parts[0] + "'");
    s.noise = detail::parse_real("data.scripts", parts[1]);
    for (const auto& wp : split(parts[2], '/')) {
      const auto xy = split(wp, ',');
      if (xy.size() != 2) throw Error(ErrorKind::config, "waypoint '" + wp + "' is not x,y");
      s.waypoints.emplace_back(detail::parse_real("data.scripts", xy[0]), detail::parse_real("data.scripts", xy[1]));
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw Error(ErrorKind::config, "data.scripts lists no scripts");
  return out;
}

inline NormMode norm_mode_from_config(const RunConfig& c) {
  const std::string m = c.get_text("data.norm_mode");
  if (m == "per_coordinate") return NormMode::per_coordinate;
  if (m == "per_step") return NormMode::per_step;
  throw Error(ErrorKind::config, "unknown data.norm_mode '" + m + "'");
}

/// Seeds of the independent stages, forked from the master seed.
enum class Stage : std::uint64_t {
  data = 1, heldout, prior, didi, vae, baseline, bc, eval, stitch, interp, finetune, diffuser, samples
};

inline std::uint64_t stage_seed(const RunConfig& c, Stage s) {
  Rng r(static_cast<std::uint64_t>(c.get_int("seed")));
  return r.fork(static_cast<std::uint64_t>(s)).next();
}

inline OfflineDataset dataset_from_config(const RunConfig& c, bool heldout = false) {
  const PushEnvConfig env = env_from_config(c);
  Rng rng(stage_seed(c, heldout ? Stage::heldout : Stage::data));
  return generate_mixture_dataset(env, scripts_from_config(c), c.get_int32("data.episodes_per_script"),
                                  c.get_int32("data.horizon"), rng, norm_mode_from_config(c));
}

inline ScheduleParams schedule_from_config(const RunConfig& c) {
  ScheduleParams p{c.get_text("diffusion.schedule"), c.get_int32("diffusion.steps"), c.get_real("diffusion.beta_min"),
                   c.get_real("diffusion.beta_max")};
  make_schedule(p);
  return p;
}

inline AdamConfig adam_from(const RunConfig& c, const std::string& lr_key) {
  AdamConfig a;
  a.lr = c.get_real(lr_key);
  require_config(a.lr > 0, lr_key + " must be positive");
  return a;
}

inline PriorTrainConfig prior_config(const RunConfig& c) {
  PriorTrainConfig p;
  p.hidden = c.get_ints("prior.hidden");
  p.steps = c.get_int32("prior.steps");
  p.batch = c.get_int32("prior.batch");
  p.adam = adam_from(c, "prior.lr");
  p.clip_norm = c.get_real("train.clip_norm");
  p.seed = stage_seed(c, Stage::prior);
  require_config(p.batch >= 1, "prior.batch must be positive");
  return p;
}

inline SkillSpec skills_from_config(const RunConfig& c) {
  SkillSpec s{skill_kind_from_string(c.get_text("skills.kind")), c.get_int32("skills.dim")};
  s.validate();
  return s;
}

inline DidiTrainConfig didi_config(const RunConfig& c) {
  DidiTrainConfig d;
  d.skills = skills_from_config(c);
  d.policy_hidden = c.get_ints("policy.hidden");
  d.disc_hidden = c.get_ints("disc.hidden");
  d.weights = {c.get_real("didi.w_div"), c.get_real("didi.w_reward"), c.get_real("didi.w_reg")};
  d.weights.validate();
  d.sigma = c.get_real("policy.sigma");
  d.noised_disc = c.get_bool("disc.noised");
  d.sigma_q = c.get_real("disc.sigma_q");
  d.steps = c.get_int32("didi.steps");
  d.batch = c.get_int32("didi.batch");
  d.adam = adam_from(c, "didi.lr");
  d.disc_lr_multiplier = c.get_real("didi.disc_lr_mult");
  d.clip_norm = c.get_real("train.clip_norm");
  d.seed = stage_seed(c, Stage::didi);
  require_config(d.batch >= 1, "didi.batch must be positive");
  return d;
}

inline VaeTrainConfig vae_config(const RunConfig& c) {
  VaeTrainConfig v;
  v.latent = c.get_int32("vae.latent");
  v.hidden = c.get_ints("vae.hidden");
  v.dec_sigma = c.get_real("vae.dec_sigma");
  v.steps = c.get_int32("vae.steps");
  v.batch = c.get_int32("vae.batch");
  v.adam = adam_from(c, "vae.lr");
  v.clip_norm = c.get_real("train.clip_norm");
  v.seed = stage_seed(c, Stage::vae);
  return v;
}

inline BcTrainConfig bc_config(const RunConfig& c) {
  BcTrainConfig b;
  b.hidden = c.get_ints("bc.hidden");
  b.steps = c.get_int32("bc.steps");
  b.batch = c.get_int32("bc.batch");
  b.adam = adam_from(c, "bc.lr");
  b.clip_norm = c.get_real("train.clip_norm");
  b.sigma = c.get_real("policy.sigma");
  b.seed = stage_seed(c, Stage::bc);
  return b;
}

inline TaskSampler task_sampler_from_config(const RunConfig& c) {
  TaskSampler t;
  const auto gc = expect_len(c, "finetune.goal_center", 2);
  const auto gr = expect_len(c, "finetune.goal_radius", 2);
  const auto ga = expect_len(c, "finetune.goal_angle", 2);
  const auto oh = expect_len(c, "finetune.obstacle_half", 2);
  const auto oc = c.get_ints("finetune.obstacles");
  if (oc.size() != 2) throw Error(ErrorKind::config, "finetune.obstacles needs min,max");
  t.goal_center = Vec2(gc[0], gc[1]);
  t.goal_radius_min = gr[0];
  t.goal_radius_max = gr[1];
  t.goal_angle_min_deg = ga[0];
  t.goal_angle_max_deg = ga[1];
  t.obstacles_min = oc[0];
  t.obstacles_max = oc[1];
  t.obstacle_half_min = oh[0];
  t.obstacle_half_max = oh[1];
  return t;
}

inline EnvState state_from_config(const RunConfig& c, const std::string& key) {
  const auto v = expect_len(c, key, 4);
  return {Vec2(v[0], v[1]), Vec2(v[2], v[3]), 0};
}

/// (skill index, duration) pairs.
inline std::vector<std::pair<int, int>> stitch_schedule_from_config(const RunConfig& c) {
  const auto v = c.get_ints("stitch.schedule");
  if (v.size() % 2 != 0) throw Error(ErrorKind::config, "stitch.schedule needs skill,duration pairs");
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < v.size(); i += 2) out.emplace_back(v[i], v[i + 1]);
  return out;
}

}  // namespace didi
