#pragma once

// Deterministic 2D point-push world: a disk effector moves by velocity
// commands and displaces a disk block on contact by projecting the overlap
// away along the center line. Walls and axis-aligned rectangular obstacles
// stop both disks at their boundary.

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>
#include <vector>

#include "didi/dataio.hpp"
#include "didi/errors.hpp"
#include "didi/numerics.hpp"
#include "didi/rng.hpp"

namespace didi {

using Vec2 = Eigen::Vector2d;

struct Rect {
  Vec2 lo = Vec2::Zero();
  Vec2 hi = Vec2::Zero();

  bool overlaps_disk(const Vec2& c, double r) const {
    const Vec2 closest = c.cwiseMax(lo).cwiseMin(hi);
    return (c - closest).squaredNorm() < r * r;
  }
  bool overlaps(const Rect& o, double margin = 0.0) const {
    return lo.x() - margin < o.hi.x() && o.lo.x() - margin < hi.x() && lo.y() - margin < o.hi.y() &&
           o.lo.y() - margin < hi.y();
  }
};

/// Axis-aligned box [center - half, center + half]; a zero half-extent gives a fixed spawn.
struct SpawnRegion {
  Vec2 center = Vec2::Zero();
  Vec2 half = Vec2::Zero();
};

struct PushEnvConfig {
  double half_extent = 1.0;
  double effector_radius = 0.05;
  double block_radius = 0.1;
  double dt = 0.1;
  double max_speed = 1.0;
  int horizon = 24;
  std::optional<Vec2> goal;
  std::vector<Rect> obstacles;
  SpawnRegion effector_spawn{Vec2(0.0, 0.0), Vec2(0.5, 0.5)};
  SpawnRegion block_spawn{Vec2(0.0, -0.9), Vec2(0.3, 0.03)};
  double gamma = 1.0;

  double contact_distance() const { return effector_radius + block_radius; }

  void validate(int segment_horizon = 1) const {
    require_config(effector_radius > 0 && block_radius > 0, "radii must be positive");
    require_config(effector_radius + block_radius < half_extent,
                   "effector radius + block radius must be below the arena half-extent");
    require_config(dt > 0, "dt must be positive");
    require_config(max_speed > 0, "max speed must be positive");
    require_config(horizon >= segment_horizon, "episode horizon must be at least the segment horizon");
    require_config(gamma > 0 && gamma <= 1, "gamma must lie in (0, 1]");
  }
};

/// Environment state; as a vector it is [effector.x, effector.y, block.x, block.y].
struct EnvState {
  Vec2 effector = Vec2::Zero();
  Vec2 block = Vec2::Zero();
  int step = 0;

  static constexpr int kDim = 4;
  static constexpr int kBlockOffset = 2;

  Vec as_vector() const {
    Vec v(kDim);
    v << effector, block;
    return v;
  }
  static EnvState from_vector(const Vec& v, int step = 0) {
    return {Vec2(v[0], v[1]), Vec2(v[2], v[3]), step};
  }
};

inline constexpr int kActionDim = 2;

namespace detail {

inline Vec2 push_out_of_rect(Vec2 c, double r, const Rect& rect) {
  const Vec2 closest = c.cwiseMax(rect.lo).cwiseMin(rect.hi);
  const Vec2 d = c - closest;
  const double dist = d.norm();
  if (dist >= r) return c;
  if (dist > 0) return closest + d / dist * r;
  const double left = c.x() - rect.lo.x();
  const double right = rect.hi.x() - c.x();
  const double down = c.y() - rect.lo.y();
  const double up = rect.hi.y() - c.y();
  const double m = std::min({left, right, down, up});
  if (m == left) c.x() = rect.lo.x() - r;
  else if (m == right) c.x() = rect.hi.x() + r;
  else if (m == down) c.y() = rect.lo.y() - r;
  else c.y() = rect.hi.y() + r;
  return c;
}

/// Projects a disk center back into the arena and out of every obstacle.
inline Vec2 resolve_static(Vec2 c, double r, const PushEnvConfig& cfg) {
  const double lim = cfg.half_extent - r;
  for (int pass = 0; pass < 4; ++pass) {
    c = c.cwiseMax(Vec2(-lim, -lim)).cwiseMin(Vec2(lim, lim));
    bool moved = false;
    for (const auto& o : cfg.obstacles) {
      const Vec2 n = push_out_of_rect(c, r, o);
      if (n != c) {
        c = n;
        moved = true;
      }
    }
    if (!moved) break;
  }
  return c.cwiseMax(Vec2(-lim, -lim)).cwiseMin(Vec2(lim, lim));
}

inline bool disk_is_free(const Vec2& c, double r, const PushEnvConfig& cfg) {
  const double lim = cfg.half_extent - r;
  if (std::abs(c.x()) > lim + 1e-12 || std::abs(c.y()) > lim + 1e-12) return false;
  for (const auto& o : cfg.obstacles) {
    if (o.overlaps_disk(c, r * (1.0 - 1e-9))) return false;
  }
  return true;
}

inline Vec2 sample_box(const SpawnRegion& region, Rng& rng) {
  return {region.center.x() + region.half.x() * rng.uniform(-1.0, 1.0),
          region.center.y() + region.half.y() * rng.uniform(-1.0, 1.0)};
}

}  // namespace detail

/// Effector and block drawn independently and uniformly from their spawn
/// boxes (effector first, two uniforms each), rejected and redrawn until the
/// pose is collision-free. Zero-extent boxes give a fixed pose.
inline EnvState reset(const PushEnvConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    EnvState s;
    s.effector = detail::sample_box(cfg.effector_spawn, rng);
    s.block = detail::sample_box(cfg.block_spawn, rng);
    if (detail::disk_is_free(s.effector, cfg.effector_radius, cfg) &&
        detail::disk_is_free(s.block, cfg.block_radius, cfg) &&
        (s.effector - s.block).norm() >= cfg.contact_distance()) {
      return s;
    }
  }
  throw Error(ErrorKind::config, "spawn regions admit no collision-free pose");
}

inline Vec2 clip_action(const Vec2& a, double max_speed) {
  const double n = a.norm();
  return n > max_speed ? Vec2(a * (max_speed / n)) : a;
}

/// One transition. Pure function of (state, action, cfg).
inline EnvState step(const EnvState& s, const Vec2& action, const PushEnvConfig& cfg) {
  const Vec2 a = clip_action(action, cfg.max_speed);
  const double contact = cfg.contact_distance();
  EnvState out = s;
  out.step = s.step + 1;
  out.effector = detail::resolve_static(s.effector + a * cfg.dt, cfg.effector_radius, cfg);

  Vec2 d = out.block - out.effector;
  double dist = d.norm();
  if (dist < contact) {
    const Vec2 dir = dist > 0 ? Vec2(d / dist) : (a.norm() > 0 ? Vec2(a.normalized()) : Vec2(1.0, 0.0));
    out.block = detail::resolve_static(out.block + dir * (contact - dist), cfg.block_radius, cfg);
    d = out.block - out.effector;
    dist = d.norm();
    if (dist < contact) {
      // Block is pinned against a wall or obstacle: the effector stops at contact.
      const Vec2 back = dist > 0 ? Vec2(d / dist) : dir;
      out.effector = detail::resolve_static(out.block - back * contact, cfg.effector_radius, cfg);
    }
  }
  return out;
}

/// R = -sum_t gamma^t ||block_t - goal||^2 / H over the segment's block
/// positions (environment units), with its gradient over the whole segment.
inline double analytic_reward(const Vec& segment, const SegmentLayout& layout, const PushEnvConfig& cfg,
                              Vec* grad = nullptr) {
  if (!cfg.goal) throw Error(ErrorKind::config, "analytic reward needs a goal");
  require(segment.size() == layout.dim(), "reward: segment dimension mismatch");
  require(layout.state_dim >= EnvState::kBlockOffset + 2, "reward: state has no block coordinates");
  if (grad) *grad = Vec::Zero(segment.size());
  double total = 0.0;
  double discount = 1.0;
  const double inv_h = 1.0 / layout.horizon;
  for (int t = 0; t < layout.horizon; ++t) {
    const int off = layout.state_offset(t) + EnvState::kBlockOffset;
    const Vec2 diff = segment.segment<2>(off) - *cfg.goal;
    total -= discount * diff.squaredNorm() * inv_h;
    if (grad) grad->segment<2>(off) = -2.0 * discount * inv_h * diff;
    discount *= cfg.gamma;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Scripted behavior policies

/// reach: proportional controller driving the effector through the waypoints.
/// push: waypoints are block targets; the effector steers to the contact
/// point behind the block and pushes with lateral feedback.
enum class ScriptKind { reach, push };

struct BehaviorScript {
  std::vector<Vec2> waypoints;
  double noise = 0.0;  // std of Gaussian action noise, in units of max speed
  int id = 0;
  ScriptKind kind = ScriptKind::reach;
};

class ScriptController {
 public:
  ScriptController(const BehaviorScript& script, const PushEnvConfig& cfg) : script_(script), cfg_(cfg) {
    require_config(!script_.waypoints.empty(), "behavior script needs at least one waypoint");
    require_config(script_.noise >= 0, "behavior script noise must be non-negative");
  }

  Vec2 act(const EnvState& s, Rng& rng) {
    Vec2 a = script_.kind == ScriptKind::reach ? reach(s) : push(s);
    if (script_.noise > 0) {
      const double n0 = rng.normal();
      const double n1 = rng.normal();
      a += script_.noise * cfg_.max_speed * Vec2(n0, n1);
    }
    return clip_action(a, cfg_.max_speed);
  }

 private:
  Vec2 reach(const EnvState& s) {
    const double tol = 0.05;
    while (waypoint_ + 1 < script_.waypoints.size() && (script_.waypoints[waypoint_] - s.effector).norm() < tol)
      ++waypoint_;
    const double gain = 0.5 / cfg_.dt;
    return gain * (script_.waypoints[waypoint_] - s.effector);
  }

  Vec2 push(const EnvState& s) {
    // Intermediate waypoints only shape the route, so they are passed loosely.
    const double tol = 0.03;
    while (waypoint_ + 1 < script_.waypoints.size() &&
           (script_.waypoints[waypoint_] - s.block).norm() < cfg_.block_radius)
      ++waypoint_;
    const Vec2 to_goal = script_.waypoints[waypoint_] - s.block;
    if (to_goal.norm() < tol) return Vec2::Zero();
    const Vec2 u = to_goal.normalized();
    const Vec2 perp(-u.y(), u.x());
    const double contact = cfg_.contact_distance();
    const Vec2 rel = s.effector - s.block;
    const double gain = 0.5 / cfg_.dt;
    if (rel.dot(u) > -0.6 * contact) {
      // Not behind the block yet: circle around its side.
      const double side = rel.dot(perp) >= 0 ? 1.0 : -1.0;
      const Vec2 target = s.block + side * perp * (1.6 * contact) - u * (0.8 * contact);
      return gain * (target - s.effector);
    }
    if (std::abs(rel.dot(perp)) > 0.3 * contact) {
      // Behind but off the push line: back off to the stand-off point first.
      return gain * (s.block - u * (1.3 * contact) - s.effector);
    }
    const Vec2 contact_point = s.block - u * contact;
    const double speed = std::min(0.6 * cfg_.max_speed, to_goal.norm() / cfg_.dt);
    return speed * u + gain * (contact_point - s.effector);
  }

  const BehaviorScript& script_;
  const PushEnvConfig& cfg_;
  std::size_t waypoint_ = 0;
};

struct Episode {
  std::vector<EnvState> states;  // horizon + 1 entries
  std::vector<Vec2> actions;     // horizon entries
};

inline Episode run_script(const BehaviorScript& script, const PushEnvConfig& cfg, Rng& rng) {
  ScriptController ctl(script, cfg);
  Episode ep;
  ep.states.push_back(reset(cfg, rng));
  for (int t = 0; t < cfg.horizon; ++t) {
    const Vec2 a = ctl.act(ep.states.back(), rng);
    ep.actions.push_back(a);
    ep.states.push_back(step(ep.states.back(), a, cfg));
  }
  return ep;
}

/// Flattens [s_t, a_t, ..., s_{t+H-1}, a_{t+H-1}] for one window of an episode.
inline Vec slice_segment(const std::vector<EnvState>& states, const std::vector<Vec2>& actions, int t,
                         const SegmentLayout& layout) {
  Vec seg(layout.dim());
  for (int k = 0; k < layout.horizon; ++k) {
    seg.segment(layout.state_offset(k), layout.state_dim) = states.at(static_cast<std::size_t>(t + k)).as_vector();
    seg.segment(layout.action_offset(k), layout.action_dim) = actions.at(static_cast<std::size_t>(t + k));
  }
  return seg;
}

/// Rolls out every script for `episodes_per_script` episodes (each on its own
/// forked stream) and slices every episode into stride-1 windows of `horizon`.
inline OfflineDataset generate_mixture_dataset(const PushEnvConfig& cfg, const std::vector<BehaviorScript>& scripts,
                                               int episodes_per_script, int horizon, Rng& rng,
                                               NormMode mode = NormMode::per_coordinate) {
  cfg.validate(horizon);
  require_config(!scripts.empty(), "at least one behavior script is required");
  for (const auto& s : scripts) {
    require_config(!s.waypoints.empty(), "behavior script needs at least one waypoint");
    for (const auto& w : s.waypoints) {
      if (std::abs(w.x()) > cfg.half_extent || std::abs(w.y()) > cfg.half_extent) {
        throw Error(ErrorKind::config, "script " + std::to_string(s.id) + " has a waypoint outside the arena");
      }
    }
  }
  if (episodes_per_script <= 0) throw Error(ErrorKind::empty_dataset, "no episodes requested");

  OfflineDataset ds;
  ds.layout = {horizon, EnvState::kDim, kActionDim};
  const int per_episode = cfg.horizon - horizon + 1;
  const Index total = static_cast<Index>(scripts.size()) * episodes_per_script * per_episode;
  ds.segments.resize(ds.layout.dim(), total);
  ds.start_times.reserve(static_cast<std::size_t>(total));
  std::vector<int> prov;
  prov.reserve(static_cast<std::size_t>(total));
  Index col = 0;
  for (std::size_t si = 0; si < scripts.size(); ++si) {
    for (int e = 0; e < episodes_per_script; ++e) {
      Rng ep_rng = rng.fork(si * 1000003ULL + static_cast<std::uint64_t>(e));
      const Episode ep = run_script(scripts[si], cfg, ep_rng);
      for (int t = 0; t < per_episode; ++t) {
        ds.segments.col(col++) = slice_segment(ep.states, ep.actions, t, ds.layout);
        ds.start_times.push_back(t);
        prov.push_back(scripts[si].id);
      }
    }
  }
  ds.stats = compute_stats(ds.segments, ds.layout, mode);
  ds.provenance = std::move(prov);
  return ds;
}

// ---------------------------------------------------------------------------
// Downstream obstacle tasks

/// Goal distribution and obstacle ranges for sampled downstream tasks. Goals
/// are goal_center + r (cos a, sin a), r and a uniform in their ranges.
struct TaskSampler {
  Vec2 goal_center = Vec2::Zero();
  double goal_radius_min = 0.45;
  double goal_radius_max = 0.6;
  double goal_angle_min_deg = 30.0;
  double goal_angle_max_deg = 150.0;
  int obstacles_min = 1;
  int obstacles_max = 3;
  double obstacle_half_min = 0.04;
  double obstacle_half_max = 0.12;
  double grid_resolution = 0.025;
};

/// Grid flood fill over block-center positions: a cell is free when a block
/// disk at its center stays inside the arena and clear of all obstacles.
inline bool block_path_exists(const PushEnvConfig& cfg, const Vec2& from, const Vec2& to, double resolution) {
  const int n = static_cast<int>(std::ceil(2.0 * cfg.half_extent / resolution));
  auto cell_of = [&](const Vec2& p) {
    const int i = std::clamp(static_cast<int>((p.x() + cfg.half_extent) / resolution), 0, n - 1);
    const int j = std::clamp(static_cast<int>((p.y() + cfg.half_extent) / resolution), 0, n - 1);
    return std::pair{i, j};
  };
  auto center_of = [&](int i, int j) {
    return Vec2(-cfg.half_extent + (i + 0.5) * resolution, -cfg.half_extent + (j + 0.5) * resolution);
  };
  auto free = [&](int i, int j) { return detail::disk_is_free(center_of(i, j), cfg.block_radius, cfg); };
  const auto [si, sj] = cell_of(from);
  const auto [gi, gj] = cell_of(to);
  // The endpoints themselves are tested, not their cell centers, so a spawn
  // flush against a wall still counts as free.
  if (!detail::disk_is_free(from, cfg.block_radius, cfg) || !detail::disk_is_free(to, cfg.block_radius, cfg)) return false;
  std::vector<char> seen(static_cast<std::size_t>(n) * n, 0);
  std::deque<std::pair<int, int>> q{{si, sj}};
  seen[static_cast<std::size_t>(si) * n + sj] = 1;
  while (!q.empty()) {
    const auto [i, j] = q.front();
    q.pop_front();
    if (i == gi && j == gj) return true;
    const int di[] = {1, -1, 0, 0};
    const int dj[] = {0, 0, 1, -1};
    for (int k = 0; k < 4; ++k) {
      const int a = i + di[k];
      const int b = j + dj[k];
      if (a < 0 || b < 0 || a >= n || b >= n) continue;
      auto& s = seen[static_cast<std::size_t>(a) * n + b];
      if (s || (!free(a, b) && !(a == gi && b == gj))) continue;
      s = 1;
      q.emplace_back(a, b);
    }
  }
  return false;
}

/// Rejection-samples `count` tasks with 1-3 non-overlapping obstacles and a
/// random goal (gives up after 10^6 rejected draws); every emitted task keeps the spawn boxes and goal clear and
/// admits a block path from the block spawn center to the goal.
inline std::vector<PushEnvConfig> sample_downstream_tasks(const PushEnvConfig& base, int count, Rng& rng,
                                                          const TaskSampler& ts = {}) {
  require(count >= 1, "task count must be at least 1");
  require_config(ts.obstacles_min >= 0 && ts.obstacles_max >= ts.obstacles_min, "invalid obstacle count range");
  std::vector<PushEnvConfig> tasks;
  const double pi = 3.14159265358979323846;
  long attempts = 0;
  while (static_cast<int>(tasks.size()) < count) {
    if (++attempts > 1000000) throw Error(ErrorKind::config, "task sampler rejects every draw; widen its ranges");
    PushEnvConfig task = base;
    task.obstacles.clear();
    const double r = rng.uniform(ts.goal_radius_min, ts.goal_radius_max);
    const double ang = rng.uniform(ts.goal_angle_min_deg, ts.goal_angle_max_deg) * pi / 180.0;
    const Vec2 goal = ts.goal_center + r * Vec2(std::cos(ang), std::sin(ang));
    task.goal = goal;
    const int n_obs =
        ts.obstacles_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(ts.obstacles_max - ts.obstacles_min + 1)));
    bool ok = std::abs(goal.x()) <= base.half_extent - base.block_radius &&
              std::abs(goal.y()) <= base.half_extent - base.block_radius;
    for (int k = 0; k < n_obs && ok; ++k) {
      const Vec2 c(rng.uniform(-base.half_extent, base.half_extent), rng.uniform(-base.half_extent, base.half_extent));
      const Vec2 h(rng.uniform(ts.obstacle_half_min, ts.obstacle_half_max),
                   rng.uniform(ts.obstacle_half_min, ts.obstacle_half_max));
      const Rect rect{c - h, c + h};
      for (const auto& o : task.obstacles) ok = ok && !o.overlaps(rect);
      const Rect eff{base.effector_spawn.center - base.effector_spawn.half,
                     base.effector_spawn.center + base.effector_spawn.half};
      const Rect blk{base.block_spawn.center - base.block_spawn.half, base.block_spawn.center + base.block_spawn.half};
      ok = ok && !rect.overlaps(eff, base.effector_radius) && !rect.overlaps(blk, base.block_radius);
      ok = ok && !rect.overlaps_disk(goal, base.block_radius + 0.05);
      task.obstacles.push_back(rect);
    }
    if (!ok) continue;
    if (!block_path_exists(task, base.block_spawn.center, goal, ts.grid_resolution)) continue;
    tasks.push_back(std::move(task));
  }
  return tasks;
}

}  // namespace didi
