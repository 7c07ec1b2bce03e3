#pragma once

// Offline trajectory datasets: storage, return computations, normalization
// statistics, segment-pair sampling for the generative model, and binary
// serialization.
//
// File layout "BGDATA1" (little-endian):
//   magic "BGDATA1", u8 format version
//   u8 dataset provenance (0 collected, 1 expanded)
//   u32 ds, u32 da, u64 trajectory count
//   per trajectory:
//     u32 index, u64 T
//     f64 states[T*ds], f64 actions[T*da], f64 rewards[T]
//     u8 terminal, u8 provenance, f64 rtg bootstrap offset
//   norm stats block:
//     f64 gamma, f64 state mean/std[ds], f64 action mean/std[da],
//     f64 reward mean, f64 reward std, f64 return mean, f64 return std

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "bg/common.hpp"
#include "bg/tensor.hpp"

namespace bg::data {

using nn::Tensor;

enum class Provenance : uint8_t { Collected = 0, Expanded = 1 };

struct Trajectory {
  Tensor states;   // [T, ds]
  Tensor actions;  // [T, da]
  std::vector<double> rewards;
  bool terminal = false;  // episode ended by reaching the goal
  uint32_t index = 0;     // stable id within the dataset
  Provenance provenance = Provenance::Collected;
  // Return-to-go labels are rtg(traj) + rtg_bootstrap at every step; nonzero
  // only on generated extensions, where the tail return past the trajectory
  // end is estimated by the value function.
  double rtg_bootstrap = 0.0;

  size_t length() const { return rewards.size(); }

  void validate() const {
    require(length() > 0, "Trajectory: empty trajectory");
    require(states.rows() == length() && actions.rows() == length(),
            "Trajectory: states/actions/rewards length mismatch");
    require(states.all_finite() && actions.all_finite(),
            "Trajectory: non-finite states or actions");
    for (double r : rewards)
      require(std::isfinite(r), "Trajectory: non-finite reward");
  }
};

// Per-dimension z-score statistics with a 1e-6 floor on every scale.
struct NormStats {
  double gamma = 0.99;  // discount used for the return statistics
  std::vector<double> state_mean, state_std;
  std::vector<double> action_mean, action_std;
  double reward_mean = 0.0, reward_std = 1.0;
  double return_mean = 0.0, return_std = 1.0;

  size_t ds() const { return state_mean.size(); }
  size_t da() const { return action_mean.size(); }
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  NormStats stats;

  size_t ds() const {
    require(!trajectories.empty(), "Dataset: empty dataset");
    return trajectories.front().states.cols();
  }
  size_t da() const {
    require(!trajectories.empty(), "Dataset: empty dataset");
    return trajectories.front().actions.cols();
  }

  bool expanded() const {
    for (const auto& t : trajectories)
      if (t.provenance == Provenance::Expanded) return true;
    return false;
  }

  size_t total_steps() const {
    size_t n = 0;
    for (const auto& t : trajectories) n += t.length();
    return n;
  }

  void validate() const {
    require(!trajectories.empty(), "Dataset: empty dataset");
    std::vector<bool> seen;
    for (const auto& t : trajectories) {
      t.validate();
      require(t.states.cols() == trajectories.front().states.cols() &&
                  t.actions.cols() == trajectories.front().actions.cols(),
              "Dataset: inconsistent state/action dimensions");
      if (t.index >= seen.size()) seen.resize(t.index + 1, false);
      require(!seen[t.index], "Dataset: duplicate trajectory index");
      seen[t.index] = true;
    }
  }

  // Indices into `trajectories` ordered by trajectory id, so downstream
  // sampling does not depend on storage order.
  std::vector<size_t> ordered() const {
    std::vector<size_t> order(trajectories.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return trajectories[a].index < trajectories[b].index;
    });
    return order;
  }
};

// ============================================================================
// Returns
// ============================================================================

// Undiscounted return-to-go: g_t = sum_{t' >= t} r_{t'}.
inline std::vector<double> rtg(const Trajectory& traj) {
  std::vector<double> g(traj.length());
  double acc = 0.0;
  for (size_t t = traj.length(); t-- > 0;) {
    acc += traj.rewards[t];
    g[t] = acc;
  }
  return g;
}

// Discounted return from step t: R_t = sum_{i >= t} gamma^(i-t) r_i.
inline std::vector<double> discounted_returns(const Trajectory& traj, double gamma) {
  std::vector<double> r(traj.length());
  double acc = 0.0;
  for (size_t t = traj.length(); t-- > 0;) {
    acc = traj.rewards[t] + gamma * acc;
    r[t] = acc;
  }
  return r;
}

inline double discounted_return(const Trajectory& traj, size_t t, double gamma) {
  require(t < traj.length(), "discounted_return: step out of range");
  double acc = 0.0;
  for (size_t i = traj.length(); i-- > t;) acc = traj.rewards[i] + gamma * acc;
  return acc;
}

// ============================================================================
// Normalization
// ============================================================================

inline NormStats fit_norm_stats(const Dataset& dataset, double gamma) {
  dataset.validate();
  const size_t ds = dataset.ds(), da = dataset.da();
  NormStats st;
  st.gamma = gamma;
  st.state_mean.assign(ds, 0.0);
  st.state_std.assign(ds, 0.0);
  st.action_mean.assign(da, 0.0);
  st.action_std.assign(da, 0.0);

  const double n = static_cast<double>(dataset.total_steps());
  for (const auto& t : dataset.trajectories) {
    for (size_t i = 0; i < t.length(); ++i) {
      for (size_t c = 0; c < ds; ++c) st.state_mean[c] += t.states.at(i, c);
      for (size_t c = 0; c < da; ++c) st.action_mean[c] += t.actions.at(i, c);
      st.reward_mean += t.rewards[i];
    }
  }
  for (auto& v : st.state_mean) v /= n;
  for (auto& v : st.action_mean) v /= n;
  st.reward_mean /= n;

  double rvar = 0.0, ret_sum = 0.0, ret_sq = 0.0;
  for (const auto& t : dataset.trajectories) {
    const auto rets = discounted_returns(t, gamma);
    for (size_t i = 0; i < t.length(); ++i) {
      for (size_t c = 0; c < ds; ++c) {
        const double d = t.states.at(i, c) - st.state_mean[c];
        st.state_std[c] += d * d;
      }
      for (size_t c = 0; c < da; ++c) {
        const double d = t.actions.at(i, c) - st.action_mean[c];
        st.action_std[c] += d * d;
      }
      const double dr = t.rewards[i] - st.reward_mean;
      rvar += dr * dr;
      ret_sum += rets[i];
      ret_sq += rets[i] * rets[i];
    }
  }
  constexpr double kFloor = 1e-6;
  for (auto& v : st.state_std) v = std::max(std::sqrt(v / n), kFloor);
  for (auto& v : st.action_std) v = std::max(std::sqrt(v / n), kFloor);
  st.reward_std = std::max(std::sqrt(rvar / n), kFloor);
  st.return_mean = ret_sum / n;
  st.return_std = std::max(std::sqrt(ret_sq / n - st.return_mean * st.return_mean), kFloor);
  return st;
}

enum class Role { State, Action, Reward, Return };

inline Role role_from_string(const std::string& role) {
  if (role == "state") return Role::State;
  if (role == "action") return Role::Action;
  if (role == "reward") return Role::Reward;
  if (role == "return") return Role::Return;
  fail("normalize: unknown role '" + role + "'");
}

inline void normalize_rows(const NormStats& st, Role role, Tensor& x) {
  const std::vector<double>* mean = nullptr;
  const std::vector<double>* stdv = nullptr;
  std::vector<double> scalar_mean, scalar_std;
  switch (role) {
    case Role::State: mean = &st.state_mean; stdv = &st.state_std; break;
    case Role::Action: mean = &st.action_mean; stdv = &st.action_std; break;
    case Role::Reward:
      scalar_mean = {st.reward_mean}; scalar_std = {st.reward_std};
      mean = &scalar_mean; stdv = &scalar_std;
      break;
    case Role::Return:
      scalar_mean = {st.return_mean}; scalar_std = {st.return_std};
      mean = &scalar_mean; stdv = &scalar_std;
      break;
  }
  const size_t d = mean->size();
  require(x.cols() == d, "normalize: dimension mismatch for role");
  for (size_t r = 0; r < x.rows(); ++r)
    for (size_t c = 0; c < d; ++c)
      x.at(r, c) = (x.at(r, c) - (*mean)[c]) / (*stdv)[c];
}

inline void denormalize_rows(const NormStats& st, Role role, Tensor& x) {
  const std::vector<double>* mean = nullptr;
  const std::vector<double>* stdv = nullptr;
  std::vector<double> scalar_mean, scalar_std;
  switch (role) {
    case Role::State: mean = &st.state_mean; stdv = &st.state_std; break;
    case Role::Action: mean = &st.action_mean; stdv = &st.action_std; break;
    case Role::Reward:
      scalar_mean = {st.reward_mean}; scalar_std = {st.reward_std};
      mean = &scalar_mean; stdv = &scalar_std;
      break;
    case Role::Return:
      scalar_mean = {st.return_mean}; scalar_std = {st.return_std};
      mean = &scalar_mean; stdv = &scalar_std;
      break;
  }
  const size_t d = mean->size();
  require(x.cols() == d, "denormalize: dimension mismatch for role");
  for (size_t r = 0; r < x.rows(); ++r)
    for (size_t c = 0; c < d; ++c)
      x.at(r, c) = x.at(r, c) * (*stdv)[c] + (*mean)[c];
}

inline double normalize_scalar(const NormStats& st, Role role, double v) {
  Tensor t({1, 1}, {v});
  normalize_rows(st, role, t);
  return t.data[0];
}

inline double denormalize_scalar(const NormStats& st, Role role, double v) {
  Tensor t({1, 1}, {v});
  denormalize_rows(st, role, t);
  return t.data[0];
}

// ============================================================================
// Segment pairs — condition window of K steps ending at t, successor window
// of H steps starting at t+1, plus the discounted return from t.
// ============================================================================

struct SegmentPair {
  size_t traj_pos = 0;  // position in dataset.trajectories
  uint32_t traj_index = 0;
  size_t t = 0;  // last step of the condition window
  Tensor cond_states, cond_actions;  // [K, ds], [K, da]
  std::vector<double> cond_rewards;  // K
  Tensor succ_states, succ_actions;  // [H, ds], [H, da]
  std::vector<double> succ_rewards;  // H
  double ret = 0.0;  // discounted return from step t
};

// Number of valid condition anchors t for one trajectory: K-1 <= t <= T-1-H.
inline size_t valid_anchor_count(size_t T, size_t K, size_t H) {
  return T >= K + H ? T - K - H + 1 : 0;
}

inline SegmentPair make_segment_pair(const Dataset& dataset, size_t traj_pos,
                                     size_t t, size_t K, size_t H) {
  const Trajectory& traj = dataset.trajectories[traj_pos];
  const size_t T = traj.length();
  require(t + 1 >= K && t + H <= T - 1, "make_segment_pair: anchor out of range");
  const size_t ds = traj.states.cols(), da = traj.actions.cols();

  SegmentPair p;
  p.traj_pos = traj_pos;
  p.traj_index = traj.index;
  p.t = t;
  p.cond_states = Tensor::zeros({K, ds});
  p.cond_actions = Tensor::zeros({K, da});
  p.cond_rewards.resize(K);
  for (size_t i = 0; i < K; ++i) {
    const size_t src = t + 1 - K + i;
    for (size_t c = 0; c < ds; ++c) p.cond_states.at(i, c) = traj.states.at(src, c);
    for (size_t c = 0; c < da; ++c) p.cond_actions.at(i, c) = traj.actions.at(src, c);
    p.cond_rewards[i] = traj.rewards[src];
  }
  p.succ_states = Tensor::zeros({H, ds});
  p.succ_actions = Tensor::zeros({H, da});
  p.succ_rewards.resize(H);
  for (size_t i = 0; i < H; ++i) {
    const size_t src = t + 1 + i;
    for (size_t c = 0; c < ds; ++c) p.succ_states.at(i, c) = traj.states.at(src, c);
    for (size_t c = 0; c < da; ++c) p.succ_actions.at(i, c) = traj.actions.at(src, c);
    p.succ_rewards[i] = traj.rewards[src];
  }
  p.ret = discounted_return(traj, t, dataset.stats.gamma);
  return p;
}

// Uniform over all valid (trajectory, anchor) pairs; iteration over
// trajectories follows the stable id order.
inline SegmentPair sample_segment_pair(const Dataset& dataset, size_t K, size_t H,
                                       Rng& rng) {
  require(K >= 1 && H >= 1, "sample_segment_pair: K and H must be positive");
  const auto order = dataset.ordered();
  size_t total = 0;
  for (size_t pos : order) {
    total += valid_anchor_count(dataset.trajectories[pos].length(), K, H);
  }
  require(total > 0,
          "sample_segment_pair: no trajectory is long enough for K+H steps");
  size_t pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(total) - 1));
  for (size_t pos : order) {
    const size_t count = valid_anchor_count(dataset.trajectories[pos].length(), K, H);
    if (pick < count) return make_segment_pair(dataset, pos, K - 1 + pick, K, H);
    pick -= count;
  }
  fail("sample_segment_pair: unreachable");
}

// ============================================================================
// Serialization
// ============================================================================

namespace detail {

constexpr char kDataMagic[7] = {'B', 'G', 'D', 'A', 'T', 'A', '1'};
constexpr uint8_t kDataVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), "dataset: truncated while reading " + what);
  return v;
}

inline void write_f64s(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64s(std::istream& is, size_t n, const std::string& what) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  require(static_cast<bool>(is), "dataset: truncated while reading " + what);
  return v;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& dataset) {
  dataset.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), "dataset: cannot open '" + path + "' for writing");
  os.write(detail::kDataMagic, sizeof(detail::kDataMagic));
  detail::write_pod<uint8_t>(os, detail::kDataVersion);
  detail::write_pod<uint8_t>(os, dataset.expanded() ? 1 : 0);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(dataset.ds()));
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(dataset.da()));
  detail::write_pod<uint64_t>(os, dataset.trajectories.size());
  for (const auto& t : dataset.trajectories) {
    detail::write_pod<uint32_t>(os, t.index);
    detail::write_pod<uint64_t>(os, t.length());
    detail::write_f64s(os, t.states.data);
    detail::write_f64s(os, t.actions.data);
    detail::write_f64s(os, t.rewards);
    detail::write_pod<uint8_t>(os, t.terminal ? 1 : 0);
    detail::write_pod<uint8_t>(os, static_cast<uint8_t>(t.provenance));
    detail::write_pod<double>(os, t.rtg_bootstrap);
  }
  const NormStats& st = dataset.stats;
  require(st.ds() == dataset.ds() && st.da() == dataset.da(),
          "dataset: norm stats dimensions do not match data");
  detail::write_pod<double>(os, st.gamma);
  detail::write_f64s(os, st.state_mean);
  detail::write_f64s(os, st.state_std);
  detail::write_f64s(os, st.action_mean);
  detail::write_f64s(os, st.action_std);
  detail::write_pod<double>(os, st.reward_mean);
  detail::write_pod<double>(os, st.reward_std);
  detail::write_pod<double>(os, st.return_mean);
  detail::write_pod<double>(os, st.return_std);
  require(static_cast<bool>(os), "dataset: write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "dataset: cannot open '" + path + "'");
  char magic[sizeof(detail::kDataMagic)];
  is.read(magic, sizeof(magic));
  require(static_cast<bool>(is) &&
              std::memcmp(magic, detail::kDataMagic, sizeof(magic)) == 0,
          "dataset: bad magic in '" + path + "'");
  const auto version = detail::read_pod<uint8_t>(is, "version");
  require(version == detail::kDataVersion, "dataset: unsupported format version");
  detail::read_pod<uint8_t>(is, "provenance");  // derived from trajectories below
  const auto ds = detail::read_pod<uint32_t>(is, "state dim");
  const auto da = detail::read_pod<uint32_t>(is, "action dim");
  const auto count = detail::read_pod<uint64_t>(is, "trajectory count");
  require(ds > 0 && da > 0 && count > 0, "dataset: empty or corrupt header");

  Dataset dataset;
  for (uint64_t i = 0; i < count; ++i) {
    Trajectory t;
    t.index = detail::read_pod<uint32_t>(is, "trajectory index");
    const auto T = detail::read_pod<uint64_t>(is, "trajectory length");
    require(T > 0 && T < (1ULL << 24), "dataset: implausible trajectory length");
    t.states = Tensor({static_cast<size_t>(T), ds},
                      detail::read_f64s(is, T * ds, "states"));
    t.actions = Tensor({static_cast<size_t>(T), da},
                       detail::read_f64s(is, T * da, "actions"));
    t.rewards = detail::read_f64s(is, T, "rewards");
    t.terminal = detail::read_pod<uint8_t>(is, "terminal flag") != 0;
    t.provenance = static_cast<Provenance>(detail::read_pod<uint8_t>(is, "provenance"));
    t.rtg_bootstrap = detail::read_pod<double>(is, "rtg bootstrap");
    dataset.trajectories.push_back(std::move(t));
  }
  NormStats st;
  st.gamma = detail::read_pod<double>(is, "gamma");
  st.state_mean = detail::read_f64s(is, ds, "state mean");
  st.state_std = detail::read_f64s(is, ds, "state std");
  st.action_mean = detail::read_f64s(is, da, "action mean");
  st.action_std = detail::read_f64s(is, da, "action std");
  st.reward_mean = detail::read_pod<double>(is, "reward mean");
  st.reward_std = detail::read_pod<double>(is, "reward std");
  st.return_mean = detail::read_pod<double>(is, "return mean");
  st.return_std = detail::read_pod<double>(is, "return std");
  dataset.stats = std::move(st);
  dataset.validate();
  return dataset;
}

}  // namespace bg::data
