#pragma once

// Return-conditioned sequence policy. Each timestep contributes three tokens
// (return-to-go, state, action) to a causal transformer; actions are predicted
// from the state-token positions and trained with masked mean squared error.
// Return labels are reward-to-go plus the trajectory's rtg_bootstrap, so
// generated branches carry value-consistent targets. At evaluation time the
// policy rolls out autoregressively with g_{t+1} = g_t - r_t.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bg/adam.hpp"
#include "bg/autodiff.hpp"
#include "bg/checkpoint.hpp"
#include "bg/common.hpp"
#include "bg/dataset.hpp"
#include "bg/layers.hpp"
#include "bg/maze.hpp"

namespace bg::dt {

using nn::AdamState;
using nn::ParamSet;
using nn::Tape;
using nn::Tensor;

struct DtConfig {
  size_t context = 20;  // timesteps per window; the transformer sees 3x tokens
  size_t width = 128;
  size_t blocks = 3;
  size_t heads = 1;
  double lr = 1e-4;
  size_t batch = 64;
  size_t steps = 50000;
  uint64_t seed = 0;
};

struct DtPolicy {
  DtConfig cfg;
  size_t ds = 0, da = 0;
  ParamSet params;
  data::NormStats stats;
  double rtg_scale = 1.0;  // raw return labels are divided by this at the input
};

inline DtPolicy init_dt(size_t ds, size_t da, const DtConfig& cfg,
                        const data::NormStats& stats, double rtg_scale) {
  require(ds > 0 && da > 0, "init_dt: empty state or action dims");
  require(cfg.context > 0, "init_dt: zero context");
  require(cfg.width > 0 && cfg.width % cfg.heads == 0,
          "init_dt: width must be divisible by heads");
  require(std::isfinite(rtg_scale) && rtg_scale > 0.0,
          "init_dt: rtg_scale must be positive");

  DtPolicy p;
  p.cfg = cfg;
  p.ds = ds;
  p.da = da;
  p.stats = stats;
  p.rtg_scale = rtg_scale;
  const size_t W = cfg.width;
  auto seed_of = [&](const std::string& tag) { return derive_seed(cfg.seed, tag); };

  nn::init_affine(p.params, "dt/g", 1, W, seed_of("dt/g"));
  nn::init_affine(p.params, "dt/s", ds, W, seed_of("dt/s"));
  nn::init_affine(p.params, "dt/a", da, W, seed_of("dt/a"));
  nn::init_embedding(p.params, "dt/time", cfg.context, W, seed_of("dt/time"));
  for (size_t i = 0; i < cfg.blocks; ++i) {
    const std::string blk = "dt/blk" + std::to_string(i);
    nn::init_layer_norm(p.params, blk + "/ln1", W);
    nn::init_affine(p.params, blk + "/qkv", W, 3 * W, seed_of(blk + "/qkv"));
    nn::init_affine(p.params, blk + "/proj", W, W, seed_of(blk + "/proj"));
    nn::init_layer_norm(p.params, blk + "/ln2", W);
    nn::init_affine(p.params, blk + "/fc1", W, 4 * W, seed_of(blk + "/fc1"));
    nn::init_affine(p.params, blk + "/fc2", 4 * W, W, seed_of(blk + "/fc2"));
  }
  nn::init_layer_norm(p.params, "dt/final/ln", W);
  nn::init_affine(p.params, "dt/head", W, da, seed_of("dt/head"));
  return p;
}

// ============================================================================
// Windows
// ============================================================================

// A batch of fixed-length windows. Windows that would start before step 0 are
// left-padded: padded slots hold zeros, are masked out of attention, and carry
// zero loss weight. Row b*K + k is window b, slot k.
struct DtBatch {
  size_t B = 0;
  Tensor g;                    // [B*K, 1] scaled return labels
  Tensor s;                    // [B*K, ds] z-scored states
  Tensor a;                    // [B*K, da] z-scored actions (inputs = targets)
  std::vector<size_t> time_idx;    // window slot per step row
  std::vector<size_t> pad_tokens;  // per window, 3 * padded slots
  std::vector<double> weights;     // per action element, masked mean
};

// Fills one window ending at step t of the given trajectory.
inline void fill_window(const DtPolicy& p, const data::Trajectory& traj,
                        const std::vector<double>& returns, size_t t, size_t b,
                        DtBatch& batch) {
  const size_t K = p.cfg.context;
  const size_t pad = t + 1 >= K ? 0 : K - 1 - t;
  batch.pad_tokens[b] = 3 * pad;
  for (size_t k = pad; k < K; ++k) {
    const size_t u = t + 1 - K + k;  // trajectory step for slot k
    const size_t row = b * K + k;
    batch.g.at(row, 0) = (returns[u] + traj.rtg_bootstrap) / p.rtg_scale;
    for (size_t c = 0; c < p.ds; ++c) batch.s.at(row, c) = traj.states.at(u, c);
    for (size_t c = 0; c < p.da; ++c) batch.a.at(row, c) = traj.actions.at(u, c);
  }
}

inline DtBatch make_dt_batch(const DtPolicy& p, const data::Dataset& dataset,
                             Rng& rng) {
  const size_t K = p.cfg.context;
  const size_t B = p.cfg.batch;
  const auto order = dataset.ordered();
  require(!order.empty(), "make_dt_batch: empty dataset");
  const size_t total = dataset.total_steps();

  DtBatch batch;
  batch.B = B;
  batch.g = Tensor::zeros({B * K, 1});
  batch.s = Tensor::zeros({B * K, p.ds});
  batch.a = Tensor::zeros({B * K, p.da});
  batch.time_idx.resize(B * K);
  for (size_t r = 0; r < B * K; ++r) batch.time_idx[r] = r % K;
  batch.pad_tokens.assign(B, 0);

  for (size_t b = 0; b < B; ++b) {
    // uniform over every (trajectory, endpoint) position
    size_t r = static_cast<size_t>(rng.uniform_int(0, int64_t(total) - 1));
    size_t pick = 0;
    while (r >= dataset.trajectories[order[pick]].length()) {
      r -= dataset.trajectories[order[pick]].length();
      ++pick;
    }
    const data::Trajectory& traj = dataset.trajectories[order[pick]];
    fill_window(p, traj, data::rtg(traj), r, b, batch);
  }

  data::normalize_rows(dataset.stats, data::Role::State, batch.s);
  data::normalize_rows(dataset.stats, data::Role::Action, batch.a);
  // keep padded slots at exact zero after normalization
  for (size_t b = 0; b < B; ++b)
    for (size_t k = 0; k < batch.pad_tokens[b] / 3; ++k) {
      const size_t row = b * K + k;
      for (size_t c = 0; c < p.ds; ++c) batch.s.at(row, c) = 0.0;
      for (size_t c = 0; c < p.da; ++c) batch.a.at(row, c) = 0.0;
    }

  size_t real_rows = 0;
  for (size_t b = 0; b < B; ++b) real_rows += K - batch.pad_tokens[b] / 3;
  const double w = 1.0 / double(real_rows * p.da);
  batch.weights.assign(B * K * p.da, 0.0);
  for (size_t b = 0; b < B; ++b)
    for (size_t k = batch.pad_tokens[b] / 3; k < K; ++k)
      for (size_t c = 0; c < p.da; ++c) batch.weights[(b * K + k) * p.da + c] = w;
  return batch;
}

// ============================================================================
// Forward pass
// ============================================================================

// Interleaves per-step (g, s, a) embeddings into a 3K-token causal sequence
// and returns action predictions at the state-token positions, [B*K, da].
inline Tape::Ref policy_forward(Tape& tape, DtPolicy& p, const DtBatch& batch) {
  const size_t K = p.cfg.context;
  const size_t B = batch.B;
  const size_t W = p.cfg.width;
  auto& ps = p.params;

  const Tape::Ref time = tape.gather_rows(tape.param("dt/time", ps.at("dt/time")),
                                        batch.time_idx, "dt/time/rows");
  const Tape::Ref eg =
      tape.add(nn::affine(tape, ps, "dt/g", tape.input(batch.g, "dt/in_g")), time);
  const Tape::Ref es =
      tape.add(nn::affine(tape, ps, "dt/s", tape.input(batch.s, "dt/in_s")), time);
  const Tape::Ref ea =
      tape.add(nn::affine(tape, ps, "dt/a", tape.input(batch.a, "dt/in_a")), time);

  // row-major reshape turns [B*K, 3W] into token order (g, s, a) per step
  Tape::Ref h = tape.reshape(tape.concat_cols({eg, es, ea}, "dt/interleave"),
                           {3 * B * K, W}, "dt/tokens");

  for (size_t i = 0; i < p.cfg.blocks; ++i) {
    const std::string blk = "dt/blk" + std::to_string(i);
    const Tape::Ref x1 = nn::layer_norm(tape, ps, blk + "/ln1", h);
    const Tape::Ref qkv = nn::affine(tape, ps, blk + "/qkv", x1);
    const Tape::Ref att = tape.attention(
        tape.slice_cols(qkv, 0, W), tape.slice_cols(qkv, W, W),
        tape.slice_cols(qkv, 2 * W, W), B, p.cfg.heads, /*causal=*/true,
        batch.pad_tokens, blk + "/att");
    h = tape.add(h, nn::affine(tape, ps, blk + "/proj", att));
    const Tape::Ref x2 = nn::layer_norm(tape, ps, blk + "/ln2", h);
    const Tape::Ref m = nn::affine(tape, ps, blk + "/fc2",
                                 tape.gelu(nn::affine(tape, ps, blk + "/fc1", x2)));
    h = tape.add(h, m);
  }
  h = nn::layer_norm(tape, ps, "dt/final/ln", h);

  std::vector<size_t> state_rows(B * K);
  for (size_t j = 0; j < B * K; ++j) state_rows[j] = 3 * j + 1;
  const Tape::Ref at_state = tape.gather_rows(h, state_rows, "dt/state_rows");
  return nn::affine(tape, ps, "dt/head", at_state);
}

inline Tape::Ref policy_loss(Tape& tape, DtPolicy& p, const DtBatch& batch) {
  const Tape::Ref pred = policy_forward(tape, p, batch);
  return tape.weighted_squared_loss(pred, batch.a, batch.weights, "dt/loss");
}

// ============================================================================
// Training
// ============================================================================

inline double dt_train_step(DtPolicy& p, AdamState& adam, const DtBatch& batch) {
  Tape tape;
  const Tape::Ref loss = policy_loss(tape, p, batch);
  const auto grads = tape.backward(loss);
  adam.step(p.params, grads);
  return tape.value(loss).data[0];
}

// Largest absolute return label in the dataset, used to scale the g input.
inline double fit_rtg_scale(const data::Dataset& dataset) {
  double mx = 0.0;
  for (size_t pos : dataset.ordered()) {
    const data::Trajectory& traj = dataset.trajectories[pos];
    const auto g = data::rtg(traj);
    for (double v : g) mx = std::max(mx, std::abs(v + traj.rtg_bootstrap));
  }
  return std::max(mx, 1e-8);
}

struct DtTrainResult {
  DtPolicy policy;
  std::vector<double> loss_trace;
};

inline DtTrainResult train_dt(const data::Dataset& dataset, const DtConfig& cfg) {
  dataset.validate();
  DtTrainResult result;
  result.policy =
      init_dt(dataset.ds(), dataset.da(), cfg, dataset.stats, fit_rtg_scale(dataset));
  AdamState adam(result.policy.params, {.lr = cfg.lr});
  Rng rng(derive_seed(cfg.seed, "dt/batches"));
  for (size_t step = 0; step < cfg.steps; ++step) {
    const DtBatch batch = make_dt_batch(result.policy, dataset, rng);
    const double loss = dt_train_step(result.policy, adam, batch);
    if (step % 100 == 0 || step + 1 == cfg.steps) result.loss_trace.push_back(loss);
  }
  return result;
}

// ============================================================================
// Acting
// ============================================================================

struct HistoryStep {
  double g = 0.0;  // raw return-to-go label fed at this step
  std::vector<double> s, a;
};

// Builds a single left-padded window from the most recent context-1 history
// steps plus the current (g, s) with a zero action token. The zero token sits
// after the state token in sequence order, so causal masking keeps it inert.
inline std::vector<double> predict_action(DtPolicy& p,
                                          const std::vector<HistoryStep>& history,
                                          double g_now, const std::vector<double>& s_now) {
  require(std::isfinite(g_now), "predict_action: non-finite return-to-go");
  require(s_now.size() == p.ds, "predict_action: state dim mismatch");
  for (const HistoryStep& h : history) {
    require(std::isfinite(h.g), "predict_action: non-finite history return");
    require(h.s.size() == p.ds, "predict_action: history state dim mismatch");
    require(h.a.size() == p.da, "predict_action: history action dim mismatch");
  }

  const size_t K = p.cfg.context;
  const size_t keep = std::min(history.size(), K - 1);
  const size_t n = keep + 1;  // history steps plus the current one
  const size_t pad = K - n;

  DtBatch batch;
  batch.B = 1;
  batch.g = Tensor::zeros({K, 1});
  batch.s = Tensor::zeros({K, p.ds});
  batch.a = Tensor::zeros({K, p.da});
  batch.time_idx.resize(K);
  for (size_t k = 0; k < K; ++k) batch.time_idx[k] = k;
  batch.pad_tokens = {3 * pad};

  for (size_t j = 0; j < keep; ++j) {
    const HistoryStep& h = history[history.size() - keep + j];
    const size_t row = pad + j;
    batch.g.at(row, 0) = h.g / p.rtg_scale;
    for (size_t c = 0; c < p.ds; ++c) batch.s.at(row, c) = h.s[c];
    for (size_t c = 0; c < p.da; ++c) batch.a.at(row, c) = h.a[c];
  }
  batch.g.at(K - 1, 0) = g_now / p.rtg_scale;
  for (size_t c = 0; c < p.ds; ++c) batch.s.at(K - 1, c) = s_now[c];

  data::normalize_rows(p.stats, data::Role::State, batch.s);
  data::normalize_rows(p.stats, data::Role::Action, batch.a);
  for (size_t k = 0; k < pad; ++k) {
    for (size_t c = 0; c < p.ds; ++c) batch.s.at(k, c) = 0.0;
    for (size_t c = 0; c < p.da; ++c) batch.a.at(k, c) = 0.0;
  }
  // the current action token is a placeholder; normalization of a zero row is
  // harmless because the state token it would inform cannot attend to it
  for (size_t c = 0; c < p.da; ++c) batch.a.at(K - 1, c) = 0.0;

  Tape tape;
  const Tape::Ref pred = policy_forward(tape, p, batch);
  const Tensor& out = tape.value(pred);
  Tensor last = Tensor::zeros({1, p.da});
  for (size_t c = 0; c < p.da; ++c) last.at(0, c) = out.at(K - 1, c);
  data::denormalize_rows(p.stats, data::Role::Action, last);
  return last.data;
}

// ============================================================================
// Evaluation
// ============================================================================

struct EvalConfig {
  double target_rtg = 1.0;
  size_t episodes = 20;
  double random_ref = 0.0;  // mean return of a uniform-random policy
  double expert_ref = 1.0;  // mean return of the scripted expert
  uint64_t seed = 0;
};

struct EpisodeTrace {
  Tensor states;   // [T, ds], state before each action
  Tensor actions;  // [T, da], clipped actions as executed
  std::vector<double> rewards;
  std::vector<double> rtg;  // g fed at each step; g[t+1] = g[t] - r[t]
  double ret = 0.0;
  bool success = false;
};

struct EvalReport {
  size_t episodes = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double normalized_score = 0.0;
  std::vector<EpisodeTrace> traces;
};

inline double normalized_score(double mean_return, double random_ref,
                               double expert_ref) {
  require(expert_ref != random_ref, "normalized_score: references coincide");
  return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref);
}

inline EpisodeTrace run_episode(DtPolicy& p, const env::MazeSpec& spec,
                                double target_rtg, uint64_t episode_seed) {
  Rng rng(episode_seed);
  env::EnvState s;
  for (int tries = 0;; ++tries) {
    s.pos = env::Vec2{rng.uniform(spec.start_region.lo.x, spec.start_region.hi.x),
                      rng.uniform(spec.start_region.lo.y, spec.start_region.hi.y)};
    if (!spec.is_wall(s.pos.x, s.pos.y)) break;
    require(tries < 100, "run_episode: start region lies inside walls");
  }
  s.vel = env::Vec2{0.0, 0.0};
  s.step_index = 0;

  std::vector<double> states, actions;
  EpisodeTrace trace;
  std::vector<HistoryStep> history;
  double g = target_rtg;
  while (true) {
    const std::vector<double> sv{s.pos.x, s.pos.y, s.vel.x, s.vel.y};
    std::vector<double> a = predict_action(p, history, g, sv);
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
    const env::StepResult r = env::step(spec, s, env::Vec2{a[0], a[1]});

    states.insert(states.end(), sv.begin(), sv.end());
    actions.insert(actions.end(), a.begin(), a.end());
    trace.rewards.push_back(r.reward);
    trace.rtg.push_back(g);
    history.push_back(HistoryStep{g, sv, a});

    trace.ret += r.reward;
    trace.success = trace.success || r.reached_goal;
    g -= r.reward;
    s = r.next;
    if (r.done) break;
  }
  const size_t T = trace.rewards.size();
  trace.states = Tensor({T, 4}, std::move(states));
  trace.actions = Tensor({T, 2}, std::move(actions));
  return trace;
}

inline EvalReport evaluate(DtPolicy& p, const env::MazeSpec& spec,
                           const EvalConfig& cfg) {
  require(cfg.episodes >= 1, "evaluate: need at least one episode");
  require(p.ds == 4 && p.da == 2, "evaluate: policy dims do not match the maze");
  EvalReport report;
  report.episodes = cfg.episodes;
  const uint64_t base = derive_seed(cfg.seed, "dt/eval");
  for (size_t ep = 0; ep < cfg.episodes; ++ep) {
    report.traces.push_back(run_episode(p, spec, cfg.target_rtg, derive_seed(base, ep)));
    report.mean_return += report.traces.back().ret;
    report.success_rate += report.traces.back().success ? 1.0 : 0.0;
  }
  report.mean_return /= double(cfg.episodes);
  report.success_rate /= double(cfg.episodes);
  report.normalized_score =
      normalized_score(report.mean_return, cfg.random_ref, cfg.expert_ref);
  return report;
}

// Reference returns for score normalization, computed once per maze spec.
inline double random_policy_return(const env::MazeSpec& spec, size_t episodes,
                                   uint64_t seed) {
  require(episodes >= 1, "random_policy_return: need at least one episode");
  double total = 0.0;
  const uint64_t base = derive_seed(seed, "dt/random_ref");
  for (size_t ep = 0; ep < episodes; ++ep) {
    Rng rng(derive_seed(base, ep));
    env::EnvState s;
    for (int tries = 0;; ++tries) {
      s.pos = env::Vec2{rng.uniform(spec.start_region.lo.x, spec.start_region.hi.x),
                        rng.uniform(spec.start_region.lo.y, spec.start_region.hi.y)};
      if (!spec.is_wall(s.pos.x, s.pos.y)) break;
      require(tries < 100, "random_policy_return: start region lies inside walls");
    }
    while (true) {
      const env::Vec2 a{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      const env::StepResult r = env::step(spec, s, a);
      total += r.reward;
      s = r.next;
      if (r.done) break;
    }
  }
  return total / double(episodes);
}

inline double expert_policy_return(const env::MazeSpec& spec,
                                   const std::vector<env::Vec2>& waypoints,
                                   size_t episodes, uint64_t seed) {
  require(episodes >= 1, "expert_policy_return: need at least one episode");
  double total = 0.0;
  const uint64_t base = derive_seed(seed, "dt/expert_ref");
  for (size_t ep = 0; ep < episodes; ++ep) {
    Rng rng(derive_seed(base, ep));
    env::EnvState s;
    for (int tries = 0;; ++tries) {
      s.pos = env::Vec2{rng.uniform(spec.start_region.lo.x, spec.start_region.hi.x),
                        rng.uniform(spec.start_region.lo.y, spec.start_region.hi.y)};
      if (!spec.is_wall(s.pos.x, s.pos.y)) break;
      require(tries < 100, "expert_policy_return: start region lies inside walls");
    }
    env::WaypointController ctrl(waypoints);
    while (true) {
      const env::Vec2 a = ctrl.act(s, 0.0, rng);
      const env::StepResult r = env::step(spec, s, a);
      total += r.reward;
      s = r.next;
      if (r.done || ctrl.finished()) break;
    }
  }
  return total / double(episodes);
}

// ============================================================================
// Checkpointing
// ============================================================================

inline void save_dt(const std::string& path, const DtPolicy& p) {
  ParamSet out;
  for (const auto& name : p.params.paths()) out.add(name, p.params.at(name));
  out.add("meta/cfg",
          Tensor::row({double(p.cfg.context), double(p.cfg.width),
                           double(p.cfg.blocks), double(p.cfg.heads), p.cfg.lr,
                           double(p.ds), double(p.da), p.rtg_scale}));
  out.add("meta/stats/state_mean", Tensor::row(p.stats.state_mean));
  out.add("meta/stats/state_std", Tensor::row(p.stats.state_std));
  out.add("meta/stats/action_mean", Tensor::row(p.stats.action_mean));
  out.add("meta/stats/action_std", Tensor::row(p.stats.action_std));
  out.add("meta/stats/scalars",
          Tensor::row({p.stats.gamma, p.stats.reward_mean, p.stats.reward_std,
                           p.stats.return_mean, p.stats.return_std}));
  nn::save_checkpoint(path, out);
}

inline DtPolicy load_dt(const std::string& path) {
  const ParamSet in = nn::load_checkpoint(path);
  const Tensor& cfg_row = in.at("meta/cfg");
  require(cfg_row.size() == 8, "load_dt: bad config header");
  DtConfig cfg;
  cfg.context = size_t(cfg_row.data[0]);
  cfg.width = size_t(cfg_row.data[1]);
  cfg.blocks = size_t(cfg_row.data[2]);
  cfg.heads = size_t(cfg_row.data[3]);
  cfg.lr = cfg_row.data[4];

  data::NormStats stats;
  stats.state_mean = in.at("meta/stats/state_mean").data;
  stats.state_std = in.at("meta/stats/state_std").data;
  stats.action_mean = in.at("meta/stats/action_mean").data;
  stats.action_std = in.at("meta/stats/action_std").data;
  const Tensor& sc = in.at("meta/stats/scalars");
  require(sc.size() == 5, "load_dt: bad stats header");
  stats.gamma = sc.data[0];
  stats.reward_mean = sc.data[1];
  stats.reward_std = sc.data[2];
  stats.return_mean = sc.data[3];
  stats.return_std = sc.data[4];

  DtPolicy p = init_dt(size_t(cfg_row.data[5]), size_t(cfg_row.data[6]), cfg, stats,
                       cfg_row.data[7]);
  for (const auto& name : p.params.paths()) p.params.at(name) = in.at(name);
  return p;
}

}  // namespace bg::dt
