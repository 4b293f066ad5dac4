#pragma once

// Metrics over completed rollouts and the report emitter. Rollout
// trajectories are 4 x T matrices of [effector; block] positions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "didi/cost.hpp"
#include "didi/dataio.hpp"
#include "didi/didi.hpp"
#include "didi/envs.hpp"
#include "didi/errors.hpp"
#include "didi/numerics.hpp"
#include "didi/rng.hpp"

namespace didi {

// ---------------------------------------------------------------------------
// Diversity

struct DiversityReport {
  double score = 0.0;
  std::vector<Vec> skill_means;
  Mat spread;  // Euclidean distance between skill means
  std::vector<Index> counts;
};

inline constexpr double kDiversityScale = 10.0;

/// Score = 10 x mean over coordinates of the (population) variance across
/// skills of the per-skill mean trajectory. `groups[k]` holds one flattened
/// rollout per column.
inline DiversityReport diversity_score(const std::vector<Mat>& groups) {
  if (groups.size() < 2) throw Error(ErrorKind::undefined_score, "diversity needs at least two skills");
  const Index dim = groups.front().rows();
  DiversityReport r;
  for (const Mat& g : groups) {
    require(g.rows() == dim, "diversity: rollouts differ in dimension");
    if (g.cols() < 2) throw Error(ErrorKind::undefined_score, "diversity needs at least two rollouts per skill");
    r.skill_means.push_back(g.rowwise().mean());
    r.counts.push_back(g.cols());
  }
  const auto K = static_cast<Index>(groups.size());
  Mat means(dim, K);
  for (Index k = 0; k < K; ++k) means.col(k) = r.skill_means[static_cast<std::size_t>(k)];
  const Vec centre = means.rowwise().mean();
  const Vec var = (means.colwise() - centre).rowwise().squaredNorm() / static_cast<double>(K);
  r.score = kDiversityScale * var.mean();
  r.spread = Mat::Zero(K, K);
  for (Index a = 0; a < K; ++a)
    for (Index b = a + 1; b < K; ++b) r.spread(a, b) = r.spread(b, a) = (means.col(a) - means.col(b)).norm();
  return r;
}

/// Flattened positions [e_0, b_0, e_1, b_1, ...] of an episode's states.
inline Vec flatten_positions(const Episode& ep) {
  Vec v(4 * static_cast<Index>(ep.states.size()));
  for (std::size_t t = 0; t < ep.states.size(); ++t) v.segment<4>(4 * static_cast<Index>(t)) = ep.states[t].as_vector();
  return v;
}

// ---------------------------------------------------------------------------
// Classification and success

inline double discriminator_accuracy(const std::vector<int>& predicted, const std::vector<int>& commanded) {
  if (predicted.empty()) throw Error(ErrorKind::contract, "accuracy of an empty rollout set is undefined");
  require(predicted.size() == commanded.size(), "accuracy: label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hit += predicted[i] == commanded[i];
  return static_cast<double>(hit) / static_cast<double>(predicted.size());
}

/// Argmax classification of normalized segments (columns) against labels.
inline double discriminator_accuracy(const Discriminator& disc, const ParamStore& store, const Mat& segments,
                                     const std::vector<int>& labels) {
  if (segments.cols() == 0) throw Error(ErrorKind::contract, "accuracy of an empty rollout set is undefined");
  return discriminator_accuracy(disc.predict(store, segments), labels);
}

/// Fraction of final block positions within eps of the goal.
inline double success_rate(const std::vector<Vec2>& final_blocks, const PushEnvConfig& task, double eps = 0.1) {
  if (!task.goal) throw Error(ErrorKind::config, "success rate needs a goal");
  require(!final_blocks.empty(), "success rate of no rollouts is undefined");
  std::size_t ok = 0;
  for (const auto& b : final_blocks) ok += (b - *task.goal).norm() <= eps;
  return static_cast<double>(ok) / static_cast<double>(final_blocks.size());
}

/// Max over time of the distance between two mean trajectories (2 x T each).
inline double max_pointwise_distance(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "trajectory shape mismatch");
  return (a - b).colwise().norm().maxCoeff();
}

/// Mean over time of the distance between two groups' mean trajectories;
/// groups hold flatten_positions columns.
inline double mean_trajectory_distance(const Mat& a, const Mat& b) {
  require(a.rows() == b.rows() && a.rows() % 4 == 0, "trajectory shape mismatch");
  const Vec d = a.rowwise().mean() - b.rowwise().mean();
  const Index T = d.size() / 4;
  double total = 0.0;
  for (Index t = 0; t < T; ++t) total += d.segment<4>(4 * t).norm();
  return total / static_cast<double>(T);
}

/// Goal reaching per skill. A skill succeeds when at least half of its
/// rollouts end with the block within eps of the goal.
struct GoalReport {
  std::vector<double> success_rate;
  std::vector<int> successful;
  double min_pair_distance = 0.0;  // over successful skills; +inf below two
};

inline GoalReport goal_report(const std::vector<Mat>& groups, const Vec2& goal, double eps) {
  GoalReport r;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const Mat& g = groups[k];
    require(g.cols() > 0 && g.rows() >= 4, "goal report needs rollouts");
    Index ok = 0;
    for (Index j = 0; j < g.cols(); ++j) ok += (Vec2(g.col(j).tail<2>()) - goal).norm() <= eps;
    r.success_rate.push_back(static_cast<double>(ok) / static_cast<double>(g.cols()));
    if (2 * ok >= g.cols()) r.successful.push_back(static_cast<int>(k));
  }
  r.min_pair_distance = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < r.successful.size(); ++i)
    for (std::size_t j = i + 1; j < r.successful.size(); ++j)
      r.min_pair_distance =
          std::min(r.min_pair_distance, mean_trajectory_distance(groups[static_cast<std::size_t>(r.successful[i])],
                                                                 groups[static_cast<std::size_t>(r.successful[j])]));
  return r;
}

/// Interpolation path summary over final effector positions.
struct InterpolationReport {
  double separation = 0.0;  // |end_A - end_B|
  double max_gap = 0.0;
  double mid_to_a = 0.0;
  double mid_to_b = 0.0;

  double gap_ratio() const { return separation > 0 ? max_gap / separation : std::numeric_limits<double>::infinity(); }
};

inline InterpolationReport interpolation_report(const std::vector<EnvState>& ends) {
  require(ends.size() >= 3, "interpolation report needs at least three points");
  InterpolationReport r;
  const Vec2 a = ends.front().effector;
  const Vec2 b = ends.back().effector;
  const Vec2 m = ends[ends.size() / 2].effector;
  r.separation = (a - b).norm();
  for (std::size_t i = 1; i < ends.size(); ++i) r.max_gap = std::max(r.max_gap, (ends[i].effector - ends[i - 1].effector).norm());
  r.mid_to_a = (m - a).norm();
  r.mid_to_b = (m - b).norm();
  return r;
}

/// Fraction of segments whose final position is nearest each script's last
/// waypoint (effector for reach scripts, block for push scripts).
inline std::vector<double> mode_coverage(const Mat& raw, const SegmentLayout& layout,
                                         const std::vector<BehaviorScript>& scripts) {
  require(!scripts.empty() && raw.cols() > 0, "mode coverage needs scripts and segments");
  std::vector<double> frac(scripts.size(), 0.0);
  const Index off = layout.state_offset(layout.horizon - 1);
  for (Index j = 0; j < raw.cols(); ++j) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < scripts.size(); ++s) {
      const Index o = off + (scripts[s].kind == ScriptKind::push ? EnvState::kBlockOffset : 0);
      const double d = (Vec2(raw.col(j).segment<2>(o)) - scripts[s].waypoints.back()).norm();
      if (d < best_d) {
        best_d = d;
        best = s;
      }
    }
    frac[best] += 1.0 / static_cast<double>(raw.cols());
  }
  return frac;
}

/// Fresh policy samples for classification: start states drawn from the
/// columns of `starts`, skills cycling through the reference skills, plus
/// the policy's output noise.
struct GeneratedBatch {
  Mat segments;
  std::vector<int> labels;
};

inline GeneratedBatch generate_segments(const ContextualPolicy& policy, const ParamStore& store, const SkillSpec& spec,
                                        const Mat& starts, int count, Rng& rng) {
  require(count > 0 && starts.cols() > 0, "generation needs start states and a positive count");
  const auto refs = spec.reference_skills();
  Mat s(starts.rows(), count);
  Mat z(spec.dim, count);
  GeneratedBatch g;
  for (int j = 0; j < count; ++j) {
    s.col(j) = starts.col(static_cast<Index>(rng.below(static_cast<std::uint64_t>(starts.cols()))));
    const int k = j % static_cast<int>(refs.size());
    z.col(j) = refs[static_cast<std::size_t>(k)];
    g.labels.push_back(k);
  }
  g.segments = policy.mean(store, s, z);
  const Index free_rows = g.segments.rows() - policy.layout.state_dim;
  g.segments.bottomRows(free_rows) += policy.sigma * standard_normal(free_rows, count, rng);
  return g;
}

/// Downstream z-search protocol: per task, CEM over z with a rollout budget,
/// every frozen reference skill once, and optionally a single cloned policy.
struct FinetuneTaskResult {
  std::vector<double> frozen_distance;
  double search_distance = 0.0;
  bool search_success = false;
  std::optional<double> bc_distance;
};

struct FinetuneReport {
  std::vector<FinetuneTaskResult> tasks;
  double search_rate = 0.0;
  std::vector<double> frozen_rate;
  double best_frozen_rate = 0.0;
  std::optional<double> bc_rate;
};

inline FinetuneReport finetune_protocol(const PolicyAgent& agent, const SkillSpec& spec,
                                        const std::vector<PushEnvConfig>& tasks, const std::vector<EnvState>& starts,
                                        int budget, int rollout_steps, double eps, Rng& rng,
                                        const PolicyAgent* bc = nullptr, CostAudit* audit = nullptr) {
  require(!tasks.empty() && tasks.size() == starts.size(), "one start state per task is required");
  require(!bc || bc->policy->skill_dim == 1, "the cloned baseline must be a single-skill policy");
  const auto refs = spec.reference_skills();
  CemConfig cem;
  cem.success_eps = eps;
  FinetuneReport r;
  r.frozen_rate.assign(refs.size(), 0.0);
  int search_ok = 0;
  int bc_ok = 0;
  const double n = static_cast<double>(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const PushEnvConfig& task = tasks[i];
    FinetuneTaskResult t;
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const Episode ep = rollout(agent, task, starts[i], refs[k], rollout_steps, audit);
      const double d = (ep.states.back().block - *task.goal).norm();
      t.frozen_distance.push_back(d);
      if (d <= eps) r.frozen_rate[k] += 1.0 / n;
    }
    const FinetuneResult fr = finetune_skill_embedding(agent, spec, task, starts[i], budget, rollout_steps, rng, cem, audit);
    t.search_distance = fr.best_distance;
    t.search_success = fr.success;
    search_ok += fr.success;
    if (bc) {
      const Episode ep = rollout(*bc, task, starts[i], Vec::Ones(bc->policy->skill_dim), rollout_steps, audit);
      t.bc_distance = (ep.states.back().block - *task.goal).norm();
      bc_ok += *t.bc_distance <= eps;
    }
    r.tasks.push_back(std::move(t));
  }
  r.search_rate = search_ok / n;
  r.best_frozen_rate = *std::max_element(r.frozen_rate.begin(), r.frozen_rate.end());
  if (bc) r.bc_rate = bc_ok / n;
  return r;
}

/// Windowed classification of a stitched rollout: for executed step t the
/// window is the last H executed (state, action) pairs ending at t. Steps
/// without a full window and the first `transient` steps after each switch
/// are excluded.
struct StitchScore {
  double accuracy = 0.0;
  int evaluated = 0;
  std::vector<int> predicted;  // -1 where excluded
};

inline StitchScore stitch_accuracy(const Discriminator& disc, const ParamStore& store, const NormStats& stats,
                                   const StitchResult& sr, const std::vector<int>& commanded_skill, int transient = 5) {
  const SegmentLayout& l = disc.layout;
  const int T = static_cast<int>(sr.commanded.size());
  StitchScore s;
  s.predicted.assign(static_cast<std::size_t>(T), -1);
  int last_switch = -1000000;
  int hits = 0;
  for (int t = 0; t < T; ++t) {
    if (t > 0 && sr.commanded[static_cast<std::size_t>(t)] != sr.commanded[static_cast<std::size_t>(t - 1)])
      last_switch = t;
    if (t < l.horizon - 1 || t - last_switch < transient) continue;
    const Vec seg = slice_segment(sr.episode.states, sr.episode.actions, t - l.horizon + 1, l);
    const Mat n = normalize(Mat(seg), stats, l);
    const int p = disc.predict(store, n)[0];
    s.predicted[static_cast<std::size_t>(t)] = p;
    ++s.evaluated;
    hits += p == commanded_skill.at(static_cast<std::size_t>(sr.commanded[static_cast<std::size_t>(t)]));
  }
  require(s.evaluated > 0, "stitched rollout too short to evaluate");
  s.accuracy = static_cast<double>(hits) / s.evaluated;
  return s;
}

// ---------------------------------------------------------------------------
// MMD

struct MmdResult {
  double unbiased = 0.0;
  double biased = 0.0;
  double reported = 0.0;  // unbiased clamped at 0
  double bandwidth = 0.0;
};

namespace detail {

inline Mat pooled_sq_distances(const Mat& p) {
  const Vec sq = p.colwise().squaredNorm().transpose();
  Mat d = (-2.0 * p.transpose() * p).colwise() + sq;
  d.rowwise() += sq.transpose();
  return d.cwiseMax(0.0);
}

inline double median_distance(const Mat& d2) {
  std::vector<double> v;
  const Index n = d2.rows();
  v.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) v.push_back(std::sqrt(d2(i, j)));
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

/// MMD estimates from a pooled kernel matrix; `idx` lists the pooled
/// indices of sample A first (n of them) then sample B.
inline MmdResult mmd_from_kernel(const Mat& k, const std::vector<Index>& idx, Index n) {
  const Index m = static_cast<Index>(idx.size()) - n;
  double saa = 0, sbb = 0, sab = 0, daa = 0, dbb = 0;
  for (Index i = 0; i < n; ++i) {
    const Index a = idx[static_cast<std::size_t>(i)];
    daa += k(a, a);
    for (Index j = 0; j < n; ++j) saa += k(a, idx[static_cast<std::size_t>(j)]);
    for (Index j = n; j < n + m; ++j) sab += k(a, idx[static_cast<std::size_t>(j)]);
  }
  for (Index i = n; i < n + m; ++i) {
    const Index b = idx[static_cast<std::size_t>(i)];
    dbb += k(b, b);
    for (Index j = n; j < n + m; ++j) sbb += k(b, idx[static_cast<std::size_t>(j)]);
  }
  MmdResult r;
  const double dn = static_cast<double>(n), dm = static_cast<double>(m);
  r.unbiased = (saa - daa) / (dn * (dn - 1)) + (sbb - dbb) / (dm * (dm - 1)) - 2.0 * sab / (dn * dm);
  r.biased = saa / (dn * dn) + sbb / (dm * dm) - 2.0 * sab / (dn * dm);
  r.reported = std::max(0.0, r.unbiased);
  return r;
}

}  // namespace detail

/// Squared MMD with an RBF kernel exp(-|x-y|^2 / (2 h^2)), h = median pairwise
/// distance of the pooled sample. Samples are columns.
inline MmdResult mmd(const Mat& a, const Mat& b) {
  if (a.cols() < 2 || b.cols() < 2) {
    throw Error(ErrorKind::contract, "unbiased MMD needs at least two samples per side");
  }
  require(a.rows() == b.rows(), "MMD: dimension mismatch");
  Mat pooled(a.rows(), a.cols() + b.cols());
  pooled << a, b;
  const Mat d2 = detail::pooled_sq_distances(pooled);
  double h = detail::median_distance(d2);
  if (h <= 0) h = 1.0;
  const Mat k = (-d2 / (2.0 * h * h)).array().exp();
  std::vector<Index> idx(static_cast<std::size_t>(pooled.cols()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
  MmdResult r = detail::mmd_from_kernel(k, idx, a.cols());
  r.bandwidth = h;
  return r;
}

struct PermutationTest {
  double statistic = 0.0;
  double p_value = 1.0;
  double null_q99 = 0.0;
};

/// Permutation test on the unbiased statistic; the bandwidth is fixed from
/// the pooled sample.
inline PermutationTest mmd_permutation_test(const Mat& a, const Mat& b, int permutations, Rng& rng) {
  if (a.cols() < 2 || b.cols() < 2) {
    throw Error(ErrorKind::contract, "unbiased MMD needs at least two samples per side");
  }
  Mat pooled(a.rows(), a.cols() + b.cols());
  pooled << a, b;
  const Mat d2 = detail::pooled_sq_distances(pooled);
  double h = detail::median_distance(d2);
  if (h <= 0) h = 1.0;
  const Mat k = (-d2 / (2.0 * h * h)).array().exp();
  std::vector<Index> idx(static_cast<std::size_t>(pooled.cols()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
  PermutationTest t;
  t.statistic = detail::mmd_from_kernel(k, idx, a.cols()).unbiased;
  std::vector<double> null;
  int exceed = 0;
  for (int p = 0; p < permutations; ++p) {
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      std::swap(idx[i], idx[static_cast<std::size_t>(rng.below(i + 1))]);
    }
    const double s = detail::mmd_from_kernel(k, idx, a.cols()).unbiased;
    null.push_back(s);
    exceed += s >= t.statistic;
  }
  std::sort(null.begin(), null.end());
  t.null_q99 = null.empty() ? 0.0 : null[static_cast<std::size_t>(std::ceil(0.99 * null.size())) - 1];
  t.p_value = (1.0 + exceed) / (1.0 + permutations);
  return t;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorKind::io, "CSV lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string format_csv(const CsvTable& t) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << "\n";
  };
  line(t.header);
  for (const auto& r : t.rows) {
    require(r.size() == t.header.size(), "CSV row width differs from header");
    line(r);
  }
  return os.str();
}

inline void write_csv(const std::string& path, const CsvTable& t) { write_file_atomic(path, format_csv(t)); }

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::missing_artifact, "missing artifact '" + path + "'");
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(in, line)) throw Error(ErrorKind::io, "'" + path + "' is empty");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split(line));
    if (t.rows.back().size() != t.header.size()) throw Error(ErrorKind::io, "'" + path + "' has a ragged row");
  }
  return t;
}

// ---------------------------------------------------------------------------
// Report

/// Column schemas of the run artifacts read by the report and of the report tables.
inline const std::vector<std::string> kRolloutColumns{"skill", "rollout", "step", "ex", "ey", "bx", "by"};
inline const std::vector<std::string> kStitchColumns{"step", "phase", "skill", "predicted", "ex", "ey", "bx", "by"};
inline const std::vector<std::string> kInterpColumns{"index", "lambda", "step", "ex", "ey", "bx", "by"};
inline const std::vector<std::string> kMetricColumns{"metric", "value"};
inline const std::vector<std::string> kCostColumns{"method", "actions", "policy_forwards", "eps_forwards",
                                                   "guidance_evals", "per_action_policy", "per_action_eps",
                                                   "per_action_guidance"};

inline CsvTable rollouts_table(const std::vector<std::vector<Episode>>& by_skill) {
  CsvTable t{kRolloutColumns, {}};
  for (std::size_t k = 0; k < by_skill.size(); ++k)
    for (std::size_t r = 0; r < by_skill[k].size(); ++r)
      for (std::size_t s = 0; s < by_skill[k][r].states.size(); ++s) {
        const EnvState& st = by_skill[k][r].states[s];
        t.rows.push_back({std::to_string(k), std::to_string(r), std::to_string(s), csv_number(st.effector.x()),
                          csv_number(st.effector.y()), csv_number(st.block.x()), csv_number(st.block.y())});
      }
  return t;
}

inline CsvTable cost_table(const std::string& method, std::uint64_t actions, const CostAudit& c) {
  const double a = actions ? static_cast<double>(actions) : 1.0;
  return {kCostColumns,
          {{method, std::to_string(actions), std::to_string(c.policy_forwards), std::to_string(c.eps_forwards),
            std::to_string(c.guidance_evals), csv_number(static_cast<double>(c.policy_forwards) / a),
            csv_number(static_cast<double>(c.eps_forwards) / a), csv_number(static_cast<double>(c.guidance_evals) / a)}}};
}

namespace detail {

inline const char* skill_color(int k) {
  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                             "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  return kPalette[static_cast<std::size_t>(k) % 8];
}

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Arena-framed SVG; y is flipped so +y points up.
class SvgCanvas {
 public:
  explicit SvgCanvas(double half) : half_(half) {
    const std::string h = svg_num(half), w = svg_num(2 * half);
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << "-" << h << " -" << h << " " << w << " " << w
        << "\" width=\"480\" height=\"480\">\n"
        << "<rect x=\"-" << h << "\" y=\"-" << h << "\" width=\"" << w << "\" height=\"" << w
        << "\" fill=\"#ffffff\" stroke=\"#000000\" stroke-width=\"0.01\"/>\n";
  }

  void polyline(const std::vector<Vec2>& pts, const char* color, double width = 0.008, double opacity = 0.6) {
    if (pts.empty()) return;
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << svg_num(width)
        << "\" stroke-opacity=\"" << svg_num(opacity) << "\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i)
      os_ << (i ? " " : "") << svg_num(pts[i].x()) << "," << svg_num(-pts[i].y());
    os_ << "\"/>\n";
  }

  void circle(const Vec2& c, double r, const char* color) {
    os_ << "<circle cx=\"" << svg_num(c.x()) << "\" cy=\"" << svg_num(-c.y()) << "\" r=\"" << svg_num(r)
        << "\" fill=\"" << color << "\"/>\n";
  }

  void rect(double x, double y_top, double w, double h, const char* color) {
    os_ << "<rect x=\"" << svg_num(x) << "\" y=\"" << svg_num(-y_top) << "\" width=\"" << svg_num(w)
        << "\" height=\"" << svg_num(h) << "\" fill=\"" << color << "\"/>\n";
  }

  std::string str() const { return os_.str() + "</svg>\n"; }
  double half() const { return half_; }

 private:
  double half_;
  std::ostringstream os_;
};

inline double cell(const CsvTable& t, std::size_t row, const std::string& col) {
  return std::stod(t.rows[row][t.column(col)]);
}

}  // namespace detail

/// Reads run-dir artifacts and writes report/{metrics.csv, skills.svg,
/// stitch.svg, interp.svg, cost.csv}. eval/rollouts.csv and eval/metrics.csv
/// are required; missing optional artifacts yield empty plots/tables.
inline void emit_report(const std::string& run_dir, double half_extent) {
  namespace fs = std::filesystem;
  const fs::path root(run_dir);
  const fs::path eval_dir = root / "eval";
  for (const char* f : {"rollouts.csv", "metrics.csv"}) {
    if (!fs::exists(eval_dir / f)) {
      throw Error(ErrorKind::missing_artifact,
                  "report needs '" + (eval_dir / f).string() + "'; run the eval subcommand first");
    }
  }
  const fs::path out = root / "report";
  fs::create_directories(out);

  const CsvTable metrics = read_csv((eval_dir / "metrics.csv").string());
  if (metrics.header != kMetricColumns) throw Error(ErrorKind::io, "eval/metrics.csv has an unexpected schema");
  write_csv((out / "metrics.csv").string(), metrics);

  {
    const CsvTable r = read_csv((eval_dir / "rollouts.csv").string());
    if (r.header != kRolloutColumns) throw Error(ErrorKind::io, "eval/rollouts.csv has an unexpected schema");
    detail::SvgCanvas svg(half_extent);
    std::map<std::pair<int, int>, std::vector<Vec2>> eff, blk;
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
      const std::pair key{std::stoi(r.rows[i][0]), std::stoi(r.rows[i][1])};
      eff[key].emplace_back(detail::cell(r, i, "ex"), detail::cell(r, i, "ey"));
      blk[key].emplace_back(detail::cell(r, i, "bx"), detail::cell(r, i, "by"));
    }
    for (const auto& [key, pts] : eff) svg.polyline(pts, detail::skill_color(key.first));
    for (const auto& [key, pts] : blk) svg.polyline(pts, detail::skill_color(key.first), 0.016, 0.3);
    write_file_atomic((out / "skills.svg").string(), svg.str());
  }

  {
    detail::SvgCanvas svg(half_extent);
    const fs::path p = root / "stitch" / "stitch.csv";
    if (fs::exists(p)) {
      const CsvTable s = read_csv(p.string());
      if (s.header != kStitchColumns) throw Error(ErrorKind::io, "stitch/stitch.csv has an unexpected schema");
      const double band = 0.06 * half_extent;
      const double w = 2.0 * half_extent / std::max<std::size_t>(1, s.rows.size());
      std::vector<Vec2> run;
      int prev = -1;
      for (std::size_t i = 0; i < s.rows.size(); ++i) {
        const int skill = std::stoi(s.rows[i][s.column("skill")]);
        svg.rect(-half_extent + w * static_cast<double>(i), half_extent, w, band, detail::skill_color(skill));
        const Vec2 e(detail::cell(s, i, "ex"), detail::cell(s, i, "ey"));
        if (skill != prev && !run.empty()) {
          run.push_back(e);
          svg.polyline(run, detail::skill_color(prev), 0.012, 0.9);
          run.clear();
        }
        run.push_back(e);
        prev = skill;
      }
      if (!run.empty()) svg.polyline(run, detail::skill_color(prev), 0.012, 0.9);
    }
    write_file_atomic((out / "stitch.svg").string(), svg.str());
  }

  {
    detail::SvgCanvas svg(half_extent);
    const fs::path p = root / "interp" / "interp.csv";
    if (fs::exists(p)) {
      const CsvTable s = read_csv(p.string());
      if (s.header != kInterpColumns) throw Error(ErrorKind::io, "interp/interp.csv has an unexpected schema");
      std::map<int, std::vector<Vec2>> paths;
      std::map<int, double> lambdas;
      for (std::size_t i = 0; i < s.rows.size(); ++i) {
        const int idx = std::stoi(s.rows[i][0]);
        paths[idx].emplace_back(detail::cell(s, i, "ex"), detail::cell(s, i, "ey"));
        lambdas[idx] = detail::cell(s, i, "lambda");
      }
      for (const auto& [idx, pts] : paths) {
        char color[8];
        const int red = static_cast<int>(std::lround(255 * lambdas[idx]));
        std::snprintf(color, sizeof color, "#%02x30%02x", red, 255 - red);
        svg.polyline(pts, color, 0.01, 0.9);
        svg.circle(pts.back(), 0.015, color);
      }
    }
    write_file_atomic((out / "interp.svg").string(), svg.str());
  }

  {
    CsvTable cost{kCostColumns, {}};
    for (const char* sub : {"rollout", "diffuser-rollout"}) {
      const fs::path p = root / sub / "cost.csv";
      if (!fs::exists(p)) continue;
      const CsvTable c = read_csv(p.string());
      if (c.header != kCostColumns) throw Error(ErrorKind::io, p.string() + " has an unexpected schema");
      for (const auto& row : c.rows) cost.rows.push_back(row);
    }
    write_csv((out / "cost.csv").string(), cost);
  }
}

}  // namespace didi
