#pragma once

// Branch generation: sample plausible H-step continuations from the diffusion
// model at anchors drawn from real trajectories, keep the ones a value
// function considers self-consistent, and splice the survivors back into the
// dataset as new trajectories.
//
// The acceptance test is n-step temporal-difference continuity. From an
// anchor (s_t, a_t) with real reward r_t and a generated continuation
// (s~_1..s~_H, a~_1..a~_H, r~_1..r~_H):
//
//   Q^(n) = r_t + sum_{i=1}^{n-1} gamma^i r~_i + gamma^n Q(s~_n, a~_n)
//
// statistic = | Q(s_t, a_t) - mean_{n=1..H} Q^(n) |. A faithful continuation
// makes every Q^(n) a valid bootstrap of the anchor value, so the statistic
// concentrates near the value function's own noise floor; the acceptance
// threshold delta is calibrated as a percentile of the same statistic over
// real successor windows, where continuations are correct by construction.

#include <functional>
#include <string>
#include <vector>

#include "bg/dataset.hpp"
#include "bg/diffusion.hpp"
#include "bg/tvf.hpp"

namespace bg::branch {

using data::Dataset;
using data::SegmentPair;
using data::Trajectory;
using diff::DiffusionModel;
using diff::RawSegment;
using nn::Tensor;
using tvf::ValueHeads;

// Any state-action value oracle; tests can use exact tabular values.
using QFn =
    std::function<double(const std::vector<double>&, const std::vector<double>&)>;

inline QFn q_fn(ValueHeads& heads) {
  return [&heads](const std::vector<double>& s, const std::vector<double>& a) {
    return tvf::predict_future_return(heads, s, a);
  };
}

struct BranchConfig {
  size_t attempts = 300;        // candidate budget
  double percentile = 90.0;     // calibration percentile for delta
  size_t calib_samples = 2000;  // real successor windows used to calibrate
  double action_lo = -1.0, action_hi = 1.0;
  uint64_t seed = 0;
};

// ============================================================================
// TD(n) continuity
// ============================================================================

// Q^(1..H) along one continuation.
inline std::vector<double> td_n_targets(double r_anchor, const RawSegment& seg,
                                        double gamma, const QFn& q) {
  const size_t H = seg.rewards.size();
  require(H >= 1 && seg.states.rows() == H && seg.actions.rows() == H,
          "td_n_targets: segment shape mismatch");
  const size_t ds = seg.states.cols(), da = seg.actions.cols();
  std::vector<double> targets(H);
  double reward_sum = r_anchor;  // r_t + sum_{i=1}^{n-1} gamma^i r~_i
  double g = gamma;              // gamma^n
  for (size_t n = 1; n <= H; ++n) {
    std::vector<double> s(seg.states.data.begin() + (n - 1) * ds,
                          seg.states.data.begin() + n * ds);
    std::vector<double> a(seg.actions.data.begin() + (n - 1) * da,
                          seg.actions.data.begin() + n * da);
    targets[n - 1] = reward_sum + g * q(s, a);
    reward_sum += g * seg.rewards[n - 1];
    g *= gamma;
  }
  return targets;
}

inline double continuity_statistic(double q_anchor, double r_anchor,
                                   const RawSegment& seg, double gamma, const QFn& q) {
  const auto targets = td_n_targets(r_anchor, seg, gamma, q);
  return std::abs(q_anchor - mean_of(targets));
}

// ============================================================================
// Delta calibration — the statistic over real continuations
// ============================================================================

inline double calibration_statistic(const SegmentPair& pair, double gamma,
                                    const QFn& q) {
  RawSegment seg{pair.succ_states, pair.succ_actions, pair.succ_rewards};
  std::vector<double> s(pair.cond_states.data.end() - pair.cond_states.cols(),
                        pair.cond_states.data.end());
  std::vector<double> a(pair.cond_actions.data.end() - pair.cond_actions.cols(),
                        pair.cond_actions.data.end());
  return continuity_statistic(q(s, a), pair.cond_rewards.back(), seg, gamma, q);
}

// p-th percentile of the statistic over real successor windows, bumped by one
// representable value so boundary samples pass a strict '<' test.
inline double calibrate_delta(const Dataset& dataset, const QFn& q, double gamma,
                              size_t K, size_t H, const BranchConfig& cfg) {
  size_t total = 0;
  for (const auto& traj : dataset.trajectories)
    total += data::valid_anchor_count(traj.length(), K, H);
  require(total >= 100, "calibrate_delta: need at least 100 real successor windows, have " +
                            std::to_string(total));
  Rng rng(derive_seed(cfg.seed, "branch/calibrate"));
  std::vector<double> stats;
  stats.reserve(cfg.calib_samples);
  for (size_t i = 0; i < cfg.calib_samples; ++i) {
    const SegmentPair pair = data::sample_segment_pair(dataset, K, H, rng);
    stats.push_back(calibration_statistic(pair, gamma, q));
  }
  const double p = percentile(stats, cfg.percentile);
  return std::nextafter(p, std::numeric_limits<double>::infinity());
}

inline double calibrate_delta(const Dataset& dataset, ValueHeads& heads,
                              const DiffusionModel& model, const BranchConfig& cfg) {
  return calibrate_delta(dataset, q_fn(heads), heads.cfg.gamma, model.cfg.K,
                         model.cfg.H, cfg);
}

// ============================================================================
// Candidate generation
// ============================================================================

struct Anchor {
  size_t pos = 0;  // position in dataset.trajectories
  size_t t = 0;    // anchor step; the condition window is [t+1-K, t]
};

struct BranchCandidate {
  uint32_t src_index = 0;
  size_t src_pos = 0;
  size_t t = 0;
  RawSegment seg;   // raw units, actions clipped to the action box
  Tensor tokens;    // z-scored tokens of the clipped segment [H, ds+da+1]
  double guidance_return = 0.0;  // raw return the condition asked for
  double statistic = 0.0;
  bool accepted = false;
};

inline BranchCandidate generate_branch(DiffusionModel& model, ValueHeads& heads,
                                       const Dataset& dataset, Anchor anchor,
                                       uint64_t seed, const BranchConfig& cfg) {
  const size_t K = model.cfg.K;
  const Trajectory& traj = dataset.trajectories[anchor.pos];
  const size_t T = traj.length(), ds = traj.states.cols(), da = traj.actions.cols();
  require(anchor.t + 1 >= K && anchor.t < T, "generate_branch: anchor out of range");

  Tensor win_s = Tensor::zeros({K, ds});
  Tensor win_a = Tensor::zeros({K, da});
  std::vector<double> win_r(K);
  for (size_t i = 0; i < K; ++i) {
    const size_t src = anchor.t + 1 - K + i;
    for (size_t c = 0; c < ds; ++c) win_s.at(i, c) = traj.states.at(src, c);
    for (size_t c = 0; c < da; ++c) win_a.at(i, c) = traj.actions.at(src, c);
    win_r[i] = traj.rewards[src];
  }

  std::vector<double> s_t(win_s.data.end() - ds, win_s.data.end());
  std::vector<double> a_t(win_a.data.end() - da, win_a.data.end());
  const double q_anchor = tvf::predict_future_return(heads, s_t, a_t);

  BranchCandidate cand;
  cand.src_index = traj.index;
  cand.src_pos = anchor.pos;
  cand.t = anchor.t;
  cand.guidance_return = q_anchor;

  const Tensor cond = diff::make_condition(model, win_s, win_a, win_r, q_anchor);
  cand.seg = diff::raw_from_tokens(model.stats, diff::sample_tokens(model, cond, seed));
  for (auto& v : cand.seg.actions.data)
    v = std::min(std::max(v, cfg.action_lo), cfg.action_hi);
  cand.tokens = diff::tokens_from_raw(model.stats, cand.seg.states, cand.seg.actions,
                                      cand.seg.rewards);

  cand.statistic = continuity_statistic(q_anchor, traj.rewards[anchor.t], cand.seg,
                                        heads.cfg.gamma, q_fn(heads));
  return cand;
}

struct BranchResult {
  std::vector<BranchCandidate> candidates;
  double delta = 0.0;
  size_t accepted_count = 0;
};

// Draws anchors uniformly over every step with a full K-step history (in
// stable trajectory id order), generates one candidate per attempt, and
// marks the ones whose continuity statistic clears the calibrated threshold.
inline BranchResult generate_branches(DiffusionModel& model, ValueHeads& heads,
                                      const Dataset& dataset, const BranchConfig& cfg) {
  dataset.validate();
  const size_t K = model.cfg.K;
  BranchResult result;
  result.delta = calibrate_delta(dataset, heads, model, cfg);

  const auto order = dataset.ordered();
  std::vector<Anchor> anchors;
  for (size_t pos : order) {
    const size_t T = dataset.trajectories[pos].length();
    for (size_t t = K - 1; t < T; ++t) anchors.push_back({pos, t});
  }
  require(!anchors.empty(), "generate_branches: no step has a full condition window");

  Rng rng(derive_seed(cfg.seed, "branch/anchors"));
  const uint64_t sample_base = derive_seed(cfg.seed, "branch/sample");
  for (size_t i = 0; i < cfg.attempts; ++i) {
    const size_t pick = static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(anchors.size()) - 1));
    BranchCandidate cand = generate_branch(model, heads, dataset, anchors[pick],
                                           derive_seed(sample_base, i), cfg);
    cand.accepted = cand.statistic < result.delta;
    result.accepted_count += cand.accepted ? 1 : 0;
    result.candidates.push_back(std::move(cand));
  }
  return result;
}

// ============================================================================
// Dataset expansion
// ============================================================================

// Splices each accepted candidate into a new trajectory: the source prefix up
// to and including the anchor step, then the generated segment. The final
// return-to-go label gap is bridged with a value bootstrap so return labels
// on the extension stay meaningful: rtg_bootstrap = Q(s~_H, a~_H) - r~_H
// makes the label at the last step equal the value estimate exactly.
inline Dataset expand_dataset(const Dataset& dataset,
                              const std::vector<BranchCandidate>& candidates,
                              ValueHeads& heads) {
  Dataset out = dataset;
  uint32_t next_index = 0;
  for (const auto& t : dataset.trajectories)
    next_index = std::max(next_index, t.index + 1);

  for (const auto& cand : candidates) {
    if (!cand.accepted) continue;
    require(cand.src_pos < dataset.trajectories.size(),
            "expand_dataset: candidate source position out of range");
    const Trajectory& src = dataset.trajectories[cand.src_pos];
    require(src.index == cand.src_index,
            "expand_dataset: candidate source index does not match the dataset");
    require(cand.t < src.length(), "expand_dataset: candidate anchor out of range");
    const size_t ds = src.states.cols(), da = src.actions.cols();
    const size_t P = cand.t + 1;  // prefix length
    const size_t H = cand.seg.rewards.size();

    Trajectory nt;
    nt.states = Tensor::zeros({P + H, ds});
    nt.actions = Tensor::zeros({P + H, da});
    nt.rewards.resize(P + H);
    std::copy_n(src.states.data.begin(), P * ds, nt.states.data.begin());
    std::copy_n(src.actions.data.begin(), P * da, nt.actions.data.begin());
    std::copy_n(src.rewards.begin(), P, nt.rewards.begin());
    std::copy_n(cand.seg.states.data.begin(), H * ds, nt.states.data.begin() + P * ds);
    std::copy_n(cand.seg.actions.data.begin(), H * da, nt.actions.data.begin() + P * da);
    std::copy_n(cand.seg.rewards.begin(), H, nt.rewards.begin() + P);
    nt.terminal = false;
    nt.provenance = data::Provenance::Expanded;
    nt.index = next_index++;

    std::vector<double> s_end(cand.seg.states.data.end() - ds,
                              cand.seg.states.data.end());
    std::vector<double> a_end(cand.seg.actions.data.end() - da,
                              cand.seg.actions.data.end());
    nt.rtg_bootstrap =
        tvf::predict_future_return(heads, s_end, a_end) - cand.seg.rewards.back();

    out.trajectories.push_back(std::move(nt));
  }
  out.validate();
  return out;
}

}  // namespace bg::branch
