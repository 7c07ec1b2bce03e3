#pragma once

// Run configuration: a single JSON file drives the whole pipeline. Parsing is
// strict (unknown or missing keys are errors) and the canonical re-serialized
// form is hashed so artifacts can refuse to mix across config edits.

#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"

#include "bg/branch.hpp"
#include "bg/common.hpp"
#include "bg/diffusion.hpp"
#include "bg/dt.hpp"
#include "bg/maze.hpp"
#include "bg/tvf.hpp"

namespace bg::cfg {

using nlohmann::json;

struct RunConfig {
  uint64_t master_seed = 0;

  // maze
  std::vector<std::string> layout;
  double cell = 1.0;
  double time_step = 0.1;
  double vmax = 1.0;
  int max_episode_steps = 300;
  double start_jitter = 0.25;
  double goal_radius_cells = 0.5;
  env::RewardMode reward_mode = env::RewardMode::Sparse;

  // collection; one shared discount feeds dataset stats and the value heads
  double gamma = 0.99;
  std::vector<env::RouteSpec> routes;

  tvf::TvfConfig tvf;
  diff::DiffusionConfig diffusion;
  branch::BranchConfig branch;
  dt::DtConfig dt;
  double target_rtg_scale = 1.0;

  // evaluation
  size_t eval_episodes = 20;
  size_t reference_episodes = 100;
  std::vector<env::Vec2> expert_waypoints;

  std::string hash;  // canonical config hash, filled by load_config
};

namespace detail {

inline void check_keys(const json& obj, const std::string& section,
                       std::initializer_list<const char*> required,
                       std::initializer_list<const char*> optional = {}) {
  require(obj.is_object(), "config: '" + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : required)
      if (it.key() == k) known = true;
    for (const char* k : optional)
      if (it.key() == k) known = true;
    if (!known) fail("config: unknown key '" + it.key() + "' in '" + section + "'");
  }
  for (const char* k : required)
    if (!obj.contains(k))
      fail("config: missing key '" + std::string(k) + "' in '" + section + "'");
}

inline double get_f64(const json& obj, const std::string& section, const char* key) {
  const json& v = obj.at(key);
  require(v.is_number(), "config: '" + section + "." + key + "' must be a number");
  return v.get<double>();
}

inline uint64_t get_u64(const json& obj, const std::string& section, const char* key) {
  const json& v = obj.at(key);
  require(v.is_number_integer() && v.get<int64_t>() >= 0,
          "config: '" + section + "." + key + "' must be a non-negative integer");
  return v.get<uint64_t>();
}

inline std::string get_str(const json& obj, const std::string& section,
                           const char* key) {
  const json& v = obj.at(key);
  require(v.is_string(), "config: '" + section + "." + key + "' must be a string");
  return v.get<std::string>();
}

inline env::Vec2 get_vec2(const json& v, const std::string& where) {
  require(v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number(),
          "config: '" + where + "' must be a [x, y] pair");
  return env::Vec2{v[0].get<double>(), v[1].get<double>()};
}

inline std::vector<env::Vec2> get_points(const json& obj, const std::string& section,
                                         const char* key) {
  const json& v = obj.at(key);
  require(v.is_array() && !v.empty(),
          "config: '" + section + "." + key + "' must be a non-empty array");
  std::vector<env::Vec2> out;
  for (const json& p : v) out.push_back(get_vec2(p, section + "." + key + "[]"));
  return out;
}

}  // namespace detail

// FNV-1a over the canonical (sorted-key, minimal) serialization: whitespace
// and key order in the file never change the hash, any field value does.
inline std::string config_hash(const json& j) { return hex64(fnv1a64(j.dump())); }

inline RunConfig parse_config(const json& j) {
  using namespace detail;
  check_keys(j, "config",
             {"master_seed", "maze", "collect", "tvf", "diffusion", "branch", "dt",
              "eval"});
  RunConfig c;
  c.master_seed = get_u64(j, "config", "master_seed");

  const json& mz = j.at("maze");
  check_keys(mz, "maze",
             {"layout", "cell", "dt", "vmax", "max_episode_steps", "start_jitter",
              "goal_radius_cells", "reward"});
  require(mz.at("layout").is_array() && !mz.at("layout").empty(),
          "config: 'maze.layout' must be a non-empty array of strings");
  for (const json& row : mz.at("layout")) {
    require(row.is_string(), "config: 'maze.layout' rows must be strings");
    c.layout.push_back(row.get<std::string>());
  }
  c.cell = get_f64(mz, "maze", "cell");
  c.time_step = get_f64(mz, "maze", "dt");
  c.vmax = get_f64(mz, "maze", "vmax");
  c.max_episode_steps = static_cast<int>(get_u64(mz, "maze", "max_episode_steps"));
  c.start_jitter = get_f64(mz, "maze", "start_jitter");
  c.goal_radius_cells = get_f64(mz, "maze", "goal_radius_cells");
  const std::string reward = get_str(mz, "maze", "reward");
  if (reward == "sparse") {
    c.reward_mode = env::RewardMode::Sparse;
  } else if (reward == "dense") {
    c.reward_mode = env::RewardMode::Dense;
  } else {
    fail("config: 'maze.reward' must be \"sparse\" or \"dense\"");
  }

  const json& co = j.at("collect");
  check_keys(co, "collect", {"gamma", "routes"});
  c.gamma = get_f64(co, "collect", "gamma");
  require(c.gamma > 0.0 && c.gamma <= 1.0, "config: 'collect.gamma' out of (0, 1]");
  require(co.at("routes").is_array() && !co.at("routes").empty(),
          "config: 'collect.routes' must be a non-empty array");
  for (const json& r : co.at("routes")) {
    const std::string section = "collect.routes[]";
    check_keys(r, section, {"name", "waypoints", "count", "noise_scale"}, {"spawn"});
    env::RouteSpec route;
    route.name = get_str(r, section, "name");
    route.waypoints = get_points(r, section, "waypoints");
    route.count = get_u64(r, section, "count");
    route.noise_scale = get_f64(r, section, "noise_scale");
    if (r.contains("spawn")) {
      const json& s = r.at("spawn");
      require(s.is_array() && s.size() == 2,
              "config: '" + section + ".spawn' must be [[lox, loy], [hix, hiy]]");
      route.spawn = env::Box{get_vec2(s[0], section + ".spawn"),
                             get_vec2(s[1], section + ".spawn")};
    }
    c.routes.push_back(std::move(route));
  }

  const json& tv = j.at("tvf");
  check_keys(tv, "tvf", {"tau", "w", "polyak", "lr", "hidden", "layers", "batch",
                         "steps"});
  c.tvf.tau = get_f64(tv, "tvf", "tau");
  c.tvf.w = get_f64(tv, "tvf", "w");
  c.tvf.gamma = c.gamma;
  c.tvf.polyak = get_f64(tv, "tvf", "polyak");
  c.tvf.lr = get_f64(tv, "tvf", "lr");
  c.tvf.hidden = get_u64(tv, "tvf", "hidden");
  c.tvf.layers = get_u64(tv, "tvf", "layers");
  c.tvf.batch = get_u64(tv, "tvf", "batch");
  c.tvf.steps = get_u64(tv, "tvf", "steps");
  require(c.tvf.tau > 0.0 && c.tvf.tau < 1.0, "config: 'tvf.tau' out of (0, 1)");
  require(c.tvf.w >= 0.0 && c.tvf.w <= 1.0, "config: 'tvf.w' out of [0, 1]");

  const json& df = j.at("diffusion");
  check_keys(df, "diffusion",
             {"H", "n_sigma", "sigma_min", "sigma_max", "sigma_data", "rho", "p_mean",
              "p_std", "width", "blocks", "heads", "lr", "batch", "steps"},
             {"K"});
  c.diffusion.H = get_u64(df, "diffusion", "H");
  c.diffusion.K =
      df.contains("K") ? get_u64(df, "diffusion", "K") : c.diffusion.H;
  c.diffusion.n_sigma = get_u64(df, "diffusion", "n_sigma");
  c.diffusion.sigma_min = get_f64(df, "diffusion", "sigma_min");
  c.diffusion.sigma_max = get_f64(df, "diffusion", "sigma_max");
  c.diffusion.sigma_data = get_f64(df, "diffusion", "sigma_data");
  c.diffusion.rho = get_f64(df, "diffusion", "rho");
  c.diffusion.p_mean = get_f64(df, "diffusion", "p_mean");
  c.diffusion.p_std = get_f64(df, "diffusion", "p_std");
  c.diffusion.width = get_u64(df, "diffusion", "width");
  c.diffusion.blocks = get_u64(df, "diffusion", "blocks");
  c.diffusion.heads = get_u64(df, "diffusion", "heads");
  c.diffusion.lr = get_f64(df, "diffusion", "lr");
  c.diffusion.batch = get_u64(df, "diffusion", "batch");
  c.diffusion.steps = get_u64(df, "diffusion", "steps");

  const json& br = j.at("branch");
  check_keys(br, "branch",
             {"attempts", "percentile", "calib_samples", "action_lo", "action_hi"});
  c.branch.attempts = get_u64(br, "branch", "attempts");
  c.branch.percentile = get_f64(br, "branch", "percentile");
  c.branch.calib_samples = get_u64(br, "branch", "calib_samples");
  c.branch.action_lo = get_f64(br, "branch", "action_lo");
  c.branch.action_hi = get_f64(br, "branch", "action_hi");
  require(c.branch.percentile >= 0.0 && c.branch.percentile <= 100.0,
          "config: 'branch.percentile' out of [0, 100]");

  const json& dj = j.at("dt");
  check_keys(dj, "dt", {"context", "width", "blocks", "heads", "lr", "batch", "steps",
                        "target_rtg_scale"});
  c.dt.context = get_u64(dj, "dt", "context");
  c.dt.width = get_u64(dj, "dt", "width");
  c.dt.blocks = get_u64(dj, "dt", "blocks");
  c.dt.heads = get_u64(dj, "dt", "heads");
  c.dt.lr = get_f64(dj, "dt", "lr");
  c.dt.batch = get_u64(dj, "dt", "batch");
  c.dt.steps = get_u64(dj, "dt", "steps");
  c.target_rtg_scale = get_f64(dj, "dt", "target_rtg_scale");

  const json& ev = j.at("eval");
  check_keys(ev, "eval", {"episodes", "reference_episodes", "expert_waypoints"});
  c.eval_episodes = get_u64(ev, "eval", "episodes");
  c.reference_episodes = get_u64(ev, "eval", "reference_episodes");
  c.expert_waypoints = detail::get_points(ev, "eval", "expert_waypoints");
  require(c.eval_episodes >= 1, "config: 'eval.episodes' must be at least 1");
  require(c.reference_episodes >= 1,
          "config: 'eval.reference_episodes' must be at least 1");

  c.hash = config_hash(j);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("config: parse error in '" + path + "': " + e.what());
  }
  return parse_config(j);
}

inline env::MazeSpec maze_spec(const RunConfig& c) {
  env::MazeSpec spec =
      env::parse_maze(c.layout, c.cell, c.start_jitter, c.goal_radius_cells);
  spec.dt = c.time_step;
  spec.vmax = c.vmax;
  spec.max_episode_steps = c.max_episode_steps;
  spec.reward_mode = c.reward_mode;
  return spec;
}

}  // namespace bg::cfg
