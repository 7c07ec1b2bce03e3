#pragma once

// Trajectory value function: a state-action head Q and a state head V
// trained together on offline transitions.
//
//   V minimizes  (1-w) * E[ L2^tau( Q_target(s,a) - V(s) ) ]
//              +   w   * E[ L2^tau( R_own(s) - V(s) ) ]
//   Q minimizes  E[ ( r + gamma * (1-done) * V(s') - Q(s,a) )^2 ]
//
// where L2^tau(u) = |tau - 1(u<0)| * u^2 and R_own is the discounted return
// actually realized from (s,a) in its source trajectory. The R_own term
// anchors the expectile toward returns the dataset really achieves; w = 0
// recovers plain expectile regression against the target critic. Q_target
// tracks Q by Polyak averaging.
//
// Networks consume z-scored states/actions and produce raw-scale discounted
// returns, so downstream consumers compare Q against real reward sums.

#include <functional>
#include <string>
#include <vector>

#include "bg/adam.hpp"
#include "bg/checkpoint.hpp"
#include "bg/dataset.hpp"
#include "bg/layers.hpp"

namespace bg::tvf {

using data::Dataset;
using data::NormStats;
using nn::AdamState;
using nn::GradSet;
using nn::ParamSet;
using nn::Tape;
using nn::Tensor;

struct TvfConfig {
  double tau = 0.9;
  double w = 0.5;
  double gamma = 0.99;
  double polyak = 0.005;
  double lr = 3e-4;
  size_t hidden = 256;
  size_t layers = 2;  // hidden layer count
  size_t batch = 256;
  size_t steps = 10000;
  uint64_t seed = 0;
};

// Asymmetric squared loss; tau > 0.5 penalizes underestimates harder.
inline double expectile_loss(double u, double tau) {
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return w * u * u;
}

struct ValueHeads {
  TvfConfig cfg;
  size_t ds = 0, da = 0;
  ParamSet q, v, q_target;
  NormStats stats;
};

inline ValueHeads init_value_heads(size_t ds, size_t da, const TvfConfig& cfg,
                                   const NormStats& stats) {
  require(stats.ds() == ds && stats.da() == da,
          "init_value_heads: norm stats dimensions mismatch");
  ValueHeads h;
  h.cfg = cfg;
  h.ds = ds;
  h.da = da;
  h.stats = stats;
  const std::vector<size_t> hidden(cfg.layers, cfg.hidden);
  nn::init_mlp(h.q, "q", ds + da, hidden, 1, derive_seed(cfg.seed, "tvf/q"));
  nn::init_mlp(h.v, "v", ds, hidden, 1, derive_seed(cfg.seed, "tvf/v"));
  for (const auto& path : h.q.paths()) h.q_target.add(path, h.q.at(path));
  return h;
}

// ============================================================================
// Evaluation — raw-unit inputs, raw-unit return estimates.
// ============================================================================

namespace detail {

inline std::vector<double> mlp_eval(ParamSet& ps, const std::string& prefix,
                                    const Tensor& input, size_t hidden_layers) {
  Tape tape;
  auto out = nn::mlp_forward(tape, ps, prefix, tape.input(input, prefix + "/input"),
                             hidden_layers);
  return tape.value(out).data;
}

inline Tensor normalized_sa(const ValueHeads& h, const Tensor& states,
                            const Tensor& actions) {
  require(states.cols() == h.ds && actions.cols() == h.da &&
              states.rows() == actions.rows(),
          "tvf: state/action batch shape mismatch");
  Tensor s = states, a = actions;
  data::normalize_rows(h.stats, data::Role::State, s);
  data::normalize_rows(h.stats, data::Role::Action, a);
  Tensor sa = Tensor::zeros({states.rows(), h.ds + h.da});
  for (size_t r = 0; r < states.rows(); ++r) {
    for (size_t c = 0; c < h.ds; ++c) sa.at(r, c) = s.at(r, c);
    for (size_t c = 0; c < h.da; ++c) sa.at(r, h.ds + c) = a.at(r, c);
  }
  return sa;
}

}  // namespace detail

// Q(s, a) for a batch of raw states/actions.
inline std::vector<double> eval_q(ValueHeads& h, const Tensor& states,
                                  const Tensor& actions) {
  return detail::mlp_eval(h.q, "q", detail::normalized_sa(h, states, actions),
                          h.cfg.layers);
}

// V(s) for a batch of raw states.
inline std::vector<double> eval_v(ValueHeads& h, const Tensor& states) {
  Tensor s = states;
  data::normalize_rows(h.stats, data::Role::State, s);
  return detail::mlp_eval(h.v, "v", s, h.cfg.layers);
}

// Scalar convenience: predicted discounted future return from one (s, a).
inline double predict_future_return(ValueHeads& h, const std::vector<double>& state,
                                    const std::vector<double>& action) {
  Tensor s({1, state.size()}, state);
  Tensor a({1, action.size()}, action);
  return eval_q(h, s, a)[0];
}

// ============================================================================
// Transition pool
// ============================================================================

struct Transition {
  std::vector<double> s, a, s2;
  double r = 0.0;
  double done = 0.0;   // 1 only when the episode ended at the goal here
  double r_own = 0.0;  // realized discounted return from (s, a)
};

// Flattens dataset steps into transitions, ordered by trajectory id. The
// final step of a truncated trajectory has no successor state and is skipped;
// goal-terminal final steps keep done = 1 (their bootstrap is masked anyway).
inline std::vector<Transition> build_transition_pool(const Dataset& dataset,
                                                     double gamma) {
  std::vector<Transition> pool;
  const size_t ds = dataset.ds(), da = dataset.da();
  for (size_t pos : dataset.ordered()) {
    const auto& traj = dataset.trajectories[pos];
    const auto rets = data::discounted_returns(traj, gamma);
    for (size_t t = 0; t < traj.length(); ++t) {
      const bool last = t + 1 == traj.length();
      if (last && !traj.terminal) continue;
      Transition tr;
      tr.s.assign(traj.states.data.begin() + t * ds,
                  traj.states.data.begin() + (t + 1) * ds);
      tr.a.assign(traj.actions.data.begin() + t * da,
                  traj.actions.data.begin() + (t + 1) * da);
      const size_t t2 = last ? t : t + 1;
      tr.s2.assign(traj.states.data.begin() + t2 * ds,
                   traj.states.data.begin() + (t2 + 1) * ds);
      tr.r = traj.rewards[t];
      tr.done = (last && traj.terminal) ? 1.0 : 0.0;
      tr.r_own = rets[t];
      pool.push_back(std::move(tr));
    }
  }
  require(!pool.empty(), "build_transition_pool: no usable transitions");
  return pool;
}

// ============================================================================
// Training
// ============================================================================

struct TvfStepResult {
  double loss_v = 0.0;
  double loss_q = 0.0;
};

struct TvfTrainer {
  ValueHeads heads;
  AdamState adam_v, adam_q;

  explicit TvfTrainer(ValueHeads h)
      : heads(std::move(h)),
        adam_v(heads.v, {.lr = heads.cfg.lr}),
        adam_q(heads.q, {.lr = heads.cfg.lr}) {}
};

// One optimization step on a batch of transitions: V first (against the
// frozen target critic and realized returns), then Q against the updated V,
// then the Polyak target update.
inline TvfStepResult tvf_train_step(TvfTrainer& tr, const std::vector<Transition>& batch) {
  ValueHeads& h = tr.heads;
  const TvfConfig& cfg = h.cfg;
  const size_t B = batch.size();
  require(B > 0, "tvf_train_step: empty batch");

  Tensor s = Tensor::zeros({B, h.ds});
  Tensor a = Tensor::zeros({B, h.da});
  Tensor s2 = Tensor::zeros({B, h.ds});
  std::vector<double> r(B), done(B), r_own(B);
  for (size_t i = 0; i < B; ++i) {
    const Transition& t = batch[i];
    std::copy(t.s.begin(), t.s.end(), s.data.begin() + i * h.ds);
    std::copy(t.a.begin(), t.a.end(), a.data.begin() + i * h.da);
    std::copy(t.s2.begin(), t.s2.end(), s2.data.begin() + i * h.ds);
    r[i] = t.r;
    done[i] = t.done;
    r_own[i] = t.r_own;
  }
  const Tensor sa = detail::normalized_sa(h, s, a);
  Tensor sn = s;
  data::normalize_rows(h.stats, data::Role::State, sn);
  Tensor s2n = s2;
  data::normalize_rows(h.stats, data::Role::State, s2n);

  // frozen target critic values
  const std::vector<double> qt =
      detail::mlp_eval(h.q_target, "q", sa, cfg.layers);

  TvfStepResult out;
  {
    Tape tape;
    auto v_pred = nn::mlp_forward(tape, h.v, "v", tape.input(sn, "v/input"), cfg.layers);
    const auto& v_now = tape.value(v_pred).data;
    std::vector<double> w_q(B), w_own(B);
    for (size_t i = 0; i < B; ++i) {
      const double u_q = qt[i] - v_now[i];
      const double u_own = r_own[i] - v_now[i];
      w_q[i] = (1.0 - cfg.w) * (u_q < 0.0 ? 1.0 - cfg.tau : cfg.tau) / double(B);
      w_own[i] = cfg.w * (u_own < 0.0 ? 1.0 - cfg.tau : cfg.tau) / double(B);
    }
    auto l1 = tape.weighted_squared_loss(v_pred, Tensor::column(qt), w_q, "v/loss_target");
    auto l2 = tape.weighted_squared_loss(v_pred, Tensor::column(r_own), w_own, "v/loss_own");
    auto loss = tape.add(l1, l2, "v/loss");
    out.loss_v = tape.value(loss).data[0];
    GradSet g = tape.backward(loss);
    tr.adam_v.step(h.v, g);
  }

  // bootstrap targets from the updated V
  const std::vector<double> v2 = detail::mlp_eval(h.v, "v", s2n, cfg.layers);
  std::vector<double> y(B);
  for (size_t i = 0; i < B; ++i) y[i] = r[i] + cfg.gamma * (1.0 - done[i]) * v2[i];

  {
    Tape tape;
    auto q_pred = nn::mlp_forward(tape, h.q, "q", tape.input(sa, "q/input"), cfg.layers);
    std::vector<double> w(B, 1.0 / double(B));
    auto loss = tape.weighted_squared_loss(q_pred, Tensor::column(y), w, "q/loss");
    out.loss_q = tape.value(loss).data[0];
    GradSet g = tape.backward(loss);
    tr.adam_q.step(h.q, g);
  }

  for (const auto& path : h.q.paths()) {
    const auto& src = h.q.at(path).data;
    auto& dst = h.q_target.at(path).data;
    for (size_t i = 0; i < src.size(); ++i)
      dst[i] = (1.0 - cfg.polyak) * dst[i] + cfg.polyak * src[i];
  }
  return out;
}

struct TvfTrainResult {
  ValueHeads heads;
  std::vector<std::pair<double, double>> loss_trace;  // (loss_v, loss_q) samples
};

inline TvfTrainResult train_tvf(const Dataset& dataset, const TvfConfig& cfg) {
  dataset.validate();
  const auto pool = build_transition_pool(dataset, cfg.gamma);
  TvfTrainer tr(init_value_heads(dataset.ds(), dataset.da(), cfg, dataset.stats));
  Rng rng(derive_seed(cfg.seed, "tvf/batches"));

  TvfTrainResult result;
  std::vector<Transition> batch;
  for (size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (size_t i = 0; i < cfg.batch; ++i) {
      const size_t pick =
          static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1));
      batch.push_back(pool[pick]);
    }
    TvfStepResult sr = tvf_train_step(tr, batch);
    if (step % 100 == 0 || step + 1 == cfg.steps)
      result.loss_trace.emplace_back(sr.loss_v, sr.loss_q);
  }
  result.heads = std::move(tr.heads);
  return result;
}

// ============================================================================
// Checkpointing — the three networks plus config and normalization stats in
// one parameter file; target-critic entries carry a "target/" prefix.
// ============================================================================

inline void save_tvf(const std::string& path, const ValueHeads& h) {
  ParamSet all;
  for (const auto& p : h.q.paths()) all.add(p, h.q.at(p));
  for (const auto& p : h.v.paths()) all.add(p, h.v.at(p));
  for (const auto& p : h.q_target.paths()) all.add("target/" + p, h.q_target.at(p));
  all.add("meta/cfg", Tensor({9}, {h.cfg.tau, h.cfg.w, h.cfg.gamma, h.cfg.polyak,
                                   h.cfg.lr, double(h.cfg.hidden), double(h.cfg.layers),
                                   double(h.ds), double(h.da)}));
  all.add("meta/stats/state_mean", Tensor({h.ds}, h.stats.state_mean));
  all.add("meta/stats/state_std", Tensor({h.ds}, h.stats.state_std));
  all.add("meta/stats/action_mean", Tensor({h.da}, h.stats.action_mean));
  all.add("meta/stats/action_std", Tensor({h.da}, h.stats.action_std));
  all.add("meta/stats/scalars",
          Tensor({5}, {h.stats.gamma, h.stats.reward_mean, h.stats.reward_std,
                       h.stats.return_mean, h.stats.return_std}));
  nn::save_checkpoint(path, all);
}

inline ValueHeads load_tvf(const std::string& path) {
  ParamSet all = nn::load_checkpoint(path);
  const auto& meta = all.at("meta/cfg").data;
  require(meta.size() == 9, "load_tvf: bad meta block");
  ValueHeads h;
  h.cfg.tau = meta[0];
  h.cfg.w = meta[1];
  h.cfg.gamma = meta[2];
  h.cfg.polyak = meta[3];
  h.cfg.lr = meta[4];
  h.cfg.hidden = static_cast<size_t>(meta[5]);
  h.cfg.layers = static_cast<size_t>(meta[6]);
  h.ds = static_cast<size_t>(meta[7]);
  h.da = static_cast<size_t>(meta[8]);
  h.stats.state_mean = all.at("meta/stats/state_mean").data;
  h.stats.state_std = all.at("meta/stats/state_std").data;
  h.stats.action_mean = all.at("meta/stats/action_mean").data;
  h.stats.action_std = all.at("meta/stats/action_std").data;
  const auto& sc = all.at("meta/stats/scalars").data;
  h.stats.gamma = sc[0];
  h.stats.reward_mean = sc[1];
  h.stats.reward_std = sc[2];
  h.stats.return_mean = sc[3];
  h.stats.return_std = sc[4];
  for (const auto& p : all.paths()) {
    if (p.rfind("q/", 0) == 0) h.q.add(p, all.at(p));
    else if (p.rfind("v/", 0) == 0) h.v.add(p, all.at(p));
    else if (p.rfind("target/", 0) == 0) h.q_target.add(p.substr(7), all.at(p));
  }
  require(h.q.paths().size() == h.q_target.paths().size() && !h.q.paths().empty(),
          "load_tvf: incomplete checkpoint");
  return h;
}

}  // namespace bg::tvf
