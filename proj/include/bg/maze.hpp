#pragma once

// Deterministic point-mass maze. The layout comes from an ASCII grid
// ('#' wall, '.' free, 'S' start cell, 'G' goal cell); the agent is a point
// with clamped velocity integrated by explicit Euler. Collisions resolve per
// axis: a move whose x (or y) component would land inside a wall loses that
// component and zeroes the corresponding velocity.

#include <optional>
#include <string>
#include <vector>

#include "bg/common.hpp"
#include "bg/dataset.hpp"

namespace bg::env {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline double dist(const Vec2& a, const Vec2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

enum class RewardMode { Sparse, Dense };

struct Box {
  Vec2 lo, hi;
  bool contains(const Vec2& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
  }
};

struct MazeSpec {
  std::vector<std::string> layout;       // validated ASCII rows
  std::vector<std::vector<bool>> walls;  // [row][col]
  double cell = 1.0;
  double dt = 0.1;
  double vmax = 1.0;
  int max_episode_steps = 300;
  RewardMode reward_mode = RewardMode::Sparse;
  Box start_region;
  Vec2 goal;
  double goal_radius = 0.5;

  size_t rows() const { return walls.size(); }
  size_t cols() const { return walls.empty() ? 0 : walls[0].size(); }

  bool is_wall(double x, double y) const {
    if (x < 0.0 || y < 0.0) return true;
    const size_t c = static_cast<size_t>(x / cell);
    const size_t r = static_cast<size_t>(y / cell);
    if (r >= rows() || c >= cols()) return true;
    return walls[r][c];
  }
};

// start_jitter: half-width of the spawn box around the S cell center, in
// world units. goal_radius_cells: goal capture radius in cell units.
inline MazeSpec parse_maze(const std::vector<std::string>& layout, double cell = 1.0,
                           double start_jitter = 0.25, double goal_radius_cells = 0.5) {
  require(!layout.empty(), "parse_maze: empty layout");
  const size_t cols = layout[0].size();
  require(cols >= 3 && layout.size() >= 3, "parse_maze: maze too small");

  MazeSpec spec;
  spec.layout = layout;
  spec.cell = cell;
  spec.goal_radius = goal_radius_cells * cell;
  int starts = 0, goals = 0;
  for (size_t r = 0; r < layout.size(); ++r) {
    require(layout[r].size() == cols, "parse_maze: ragged rows");
    std::vector<bool> wall_row(cols, false);
    for (size_t c = 0; c < cols; ++c) {
      const char ch = layout[r][c];
      const Vec2 center{(c + 0.5) * cell, (r + 0.5) * cell};
      switch (ch) {
        case '#':
          wall_row[c] = true;
          break;
        case '.':
          break;
        case 'S':
          ++starts;
          spec.start_region = Box{{center.x - start_jitter, center.y - start_jitter},
                                  {center.x + start_jitter, center.y + start_jitter}};
          break;
        case 'G':
          ++goals;
          spec.goal = center;
          break;
        default:
          fail(std::string("parse_maze: invalid character '") + ch + "'");
      }
      const bool border = r == 0 || c == 0 || r + 1 == layout.size() || c + 1 == cols;
      if (border) require(ch == '#', "parse_maze: border must be wall");
    }
    spec.walls.push_back(std::move(wall_row));
  }
  require(starts == 1, "parse_maze: need exactly one start cell");
  require(goals == 1, "parse_maze: need exactly one goal cell");
  return spec;
}

// ============================================================================
// Dynamics
// ============================================================================

struct EnvState {
  Vec2 pos, vel;
  int step_index = 0;
};

struct StepResult {
  EnvState next;
  double reward = 0.0;
  bool done = false;
  bool reached_goal = false;
};

inline void validate_state(const MazeSpec& spec, const EnvState& s) {
  require(!spec.is_wall(s.pos.x, s.pos.y), "env: state position inside a wall");
  require(std::abs(s.vel.x) <= spec.vmax + 1e-9 && std::abs(s.vel.y) <= spec.vmax + 1e-9,
          "env: velocity exceeds vmax");
  require(s.step_index >= 0 && s.step_index < spec.max_episode_steps,
          "env: step index out of range");
}

inline StepResult step(const MazeSpec& spec, const EnvState& state, Vec2 action) {
  validate_state(spec, state);
  require(std::isfinite(action.x) && std::isfinite(action.y),
          "env: non-finite action");
  action.x = std::clamp(action.x, -1.0, 1.0);
  action.y = std::clamp(action.y, -1.0, 1.0);

  Vec2 v{std::clamp(state.vel.x + action.x * spec.dt, -spec.vmax, spec.vmax),
         std::clamp(state.vel.y + action.y * spec.dt, -spec.vmax, spec.vmax)};
  Vec2 p = state.pos;

  const double nx = p.x + v.x * spec.dt;
  if (spec.is_wall(nx, p.y)) {
    v.x = 0.0;
  } else {
    p.x = nx;
  }
  const double ny = p.y + v.y * spec.dt;
  if (spec.is_wall(p.x, ny)) {
    v.y = 0.0;
  } else {
    p.y = ny;
  }

  StepResult out;
  out.next = EnvState{p, v, state.step_index + 1};
  out.reached_goal = dist(p, spec.goal) <= spec.goal_radius;
  if (spec.reward_mode == RewardMode::Sparse) {
    out.reward = out.reached_goal ? 1.0 : 0.0;
    out.done = out.reached_goal;
  } else {
    out.reward = -dist(p, spec.goal) * spec.dt;
    out.done = false;
  }
  if (out.next.step_index >= spec.max_episode_steps) out.done = true;
  return out;
}

// ============================================================================
// Scripted waypoint collector — PD steering toward the current waypoint,
// advancing when within the capture radius. Exploration noise is added to
// the action before clipping.
// ============================================================================

struct RouteSpec {
  std::string name;
  std::optional<Box> spawn;  // defaults to the maze start region
  std::vector<Vec2> waypoints;
  size_t count = 0;
  double noise_scale = 0.1;
};

class WaypointController {
 public:
  WaypointController(std::vector<Vec2> waypoints, double capture_radius = 0.4,
                     double kp = 5.0, double kd = 3.0)
      : waypoints_(std::move(waypoints)), capture_(capture_radius), kp_(kp), kd_(kd) {
    require(!waypoints_.empty(), "WaypointController: no waypoints");
  }

  Vec2 act(const EnvState& s, double noise_scale, Rng& rng) {
    while (current_ + 1 < waypoints_.size() &&
           dist(s.pos, waypoints_[current_]) < capture_)
      ++current_;
    if (!finished_ && dist(s.pos, waypoints_.back()) < capture_ &&
        current_ + 1 == waypoints_.size())
      finished_ = true;
    const Vec2& w = waypoints_[current_];
    Vec2 a{kp_ * (w.x - s.pos.x) - kd_ * s.vel.x,
           kp_ * (w.y - s.pos.y) - kd_ * s.vel.y};
    if (noise_scale > 0.0) {
      a.x += noise_scale * rng.normal();
      a.y += noise_scale * rng.normal();
    }
    a.x = std::clamp(a.x, -1.0, 1.0);
    a.y = std::clamp(a.y, -1.0, 1.0);
    return a;
  }

  bool finished() const { return finished_; }

 private:
  std::vector<Vec2> waypoints_;
  double capture_, kp_, kd_;
  size_t current_ = 0;
  bool finished_ = false;
};

// Stateless form: one action toward the first unreached waypoint.
inline Vec2 scripted_policy(const EnvState& state, const std::vector<Vec2>& waypoints,
                            double noise_scale, Rng& rng) {
  WaypointController ctrl(waypoints);
  return ctrl.act(state, noise_scale, rng);
}

// ============================================================================
// Collection
// ============================================================================

// Runs every route for its episode count and fits normalization stats with
// the given discount. Each episode draws from an independent seed stream, so
// collection is reproducible and insensitive to route order changes that
// preserve (route, episode) indexing.
inline data::Dataset collect_dataset(const MazeSpec& spec,
                                     const std::vector<RouteSpec>& routes,
                                     uint64_t seed, double gamma) {
  require(!routes.empty(), "collect_dataset: no routes");
  data::Dataset dataset;
  uint32_t next_index = 0;
  for (size_t ri = 0; ri < routes.size(); ++ri) {
    const RouteSpec& route = routes[ri];
    require(route.count > 0, "collect_dataset: route with zero episodes");
    require(!route.waypoints.empty(), "collect_dataset: route without waypoints");
    const Box spawn = route.spawn.value_or(spec.start_region);
    for (size_t ep = 0; ep < route.count; ++ep) {
      Rng rng(derive_seed(derive_seed(seed, ri), ep));
      EnvState s;
      for (int tries = 0;; ++tries) {
        s.pos = Vec2{rng.uniform(spawn.lo.x, spawn.hi.x),
                     rng.uniform(spawn.lo.y, spawn.hi.y)};
        if (!spec.is_wall(s.pos.x, s.pos.y)) break;
        require(tries < 100, "collect_dataset: spawn box lies inside walls");
      }
      s.vel = Vec2{0.0, 0.0};
      s.step_index = 0;

      WaypointController ctrl(route.waypoints);
      std::vector<double> states, actions, rewards;
      bool terminal = false;
      while (true) {
        const Vec2 a = ctrl.act(s, route.noise_scale, rng);
        const StepResult r = step(spec, s, a);
        states.insert(states.end(), {s.pos.x, s.pos.y, s.vel.x, s.vel.y});
        actions.insert(actions.end(), {a.x, a.y});
        rewards.push_back(r.reward);
        terminal = r.reached_goal && spec.reward_mode == RewardMode::Sparse;
        s = r.next;
        if (r.done || ctrl.finished()) break;
      }
      data::Trajectory traj;
      const size_t T = rewards.size();
      traj.states = nn::Tensor({T, 4}, std::move(states));
      traj.actions = nn::Tensor({T, 2}, std::move(actions));
      traj.rewards = std::move(rewards);
      traj.terminal = terminal;
      traj.index = next_index++;
      traj.provenance = data::Provenance::Collected;
      traj.validate();
      dataset.trajectories.push_back(std::move(traj));
    }
  }
  dataset.stats = data::fit_norm_stats(dataset, gamma);
  return dataset;
}

// ============================================================================
// Canonical stitch layout: route A crosses the junction column but never the
// goal arm; route B covers the junction neighborhood through to the goal. No
// collected trajectory both starts at S and reaches G, so reaching the goal
// from S requires stitching behavior across families.
// ============================================================================

inline std::vector<std::string> stitch_layout() {
  return {
      "########",
      "#S.....#",
      "######.#",
      "######.#",
      "##G....#",
      "######.#",
      "####...#",
      "########",
  };
}

inline std::vector<RouteSpec> stitch_routes(size_t count_a = 60, size_t count_b = 40,
                                            double noise_a = 0.25, double noise_b = 0.25) {
  RouteSpec a;
  a.name = "corridor";
  a.waypoints = {{6.5, 1.5}, {6.5, 6.5}, {4.5, 6.5}};
  a.count = count_a;
  a.noise_scale = noise_a;

  RouteSpec b;
  b.name = "goal_arm";
  b.spawn = Box{{6.2, 3.6}, {6.8, 5.4}};
  b.waypoints = {{6.5, 4.5}, {4.5, 4.5}, {2.5, 4.5}};
  b.count = count_b;
  b.noise_scale = noise_b;

  return {a, b};
}

}  // namespace bg::env
