#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include "bg/maze.hpp"
#include "bg/tvf.hpp"

using namespace bg;
using data::Dataset;
using data::Trajectory;
using nn::Tensor;

namespace {

// Root of sum L2^tau(x_i - m): monotone in m, so bisection nails the
// expectile of a sample to machine precision.
double expectile_bisect(std::vector<double> xs, double tau) {
  auto deriv = [&](double m) {
    double g = 0.0;
    for (double x : xs) g += (x < m ? 1.0 - tau : tau) * (m - x);
    return g;
  };
  double lo = *std::min_element(xs.begin(), xs.end());
  double hi = *std::max_element(xs.begin(), xs.end());
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (deriv(mid) > 0.0 ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    size_t i = 0;
    while (i < idx.size()) {
      size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (double(i) + double(j)) + 1.0;
      for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double num = 0.0, da = 0.0, db = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

// Length-T single-trajectory builder for hand-made MDP datasets.
Trajectory make_traj(uint32_t index, const std::vector<double>& xs,
                     const std::vector<double>& as, const std::vector<double>& rs,
                     bool terminal) {
  Trajectory t;
  const size_t T = xs.size();
  t.states = Tensor({T, 1}, xs);
  t.actions = Tensor({T, 1}, as);
  t.rewards = rs;
  t.terminal = terminal;
  t.index = index;
  return t;
}

}  // namespace

TEST_CASE("expectile loss values and symmetry") {
  CHECK(tvf::expectile_loss(1.0, 0.9) == Catch::Approx(0.9));
  CHECK(tvf::expectile_loss(-1.0, 0.9) == Catch::Approx(0.1));
  CHECK(tvf::expectile_loss(2.0, 0.9) == Catch::Approx(3.6));
  CHECK(tvf::expectile_loss(0.0, 0.9) == 0.0);
  // tau = 1/2 is half of the squared error
  for (double u : {-2.0, -0.5, 0.3, 1.7})
    CHECK(tvf::expectile_loss(u, 0.5) == Catch::Approx(0.5 * u * u));
  // reflection: swapping the sign of u mirrors tau about 1/2
  for (double u : {-1.3, 0.2, 2.4})
    CHECK(tvf::expectile_loss(u, 0.8) == Catch::Approx(tvf::expectile_loss(-u, 0.2)));
}

TEST_CASE("expectile gradient through the tape matches the closed form") {
  Rng rng(7);
  const size_t B = 32;
  std::vector<double> xs(B);
  for (auto& x : xs) x = rng.normal(0.3, 1.2);
  const double tau = 0.85;

  for (double m : {-0.4, 0.1, 0.8}) {
    nn::ParamSet ps;
    ps.add("fit/w", Tensor({1, 1}, {m}));
    ps.add("fit/b", Tensor::zeros({1}));
    nn::Tape tape;
    auto ones = tape.input(Tensor::filled({B, 1}, 1.0), "ones");
    auto pred = nn::affine(tape, ps, "fit", ones);
    std::vector<double> w(B);
    for (size_t i = 0; i < B; ++i)
      w[i] = (xs[i] - m < 0.0 ? 1.0 - tau : tau) / double(B);
    auto loss = tape.weighted_squared_loss(pred, Tensor::column(xs), w, "loss");

    double expected_loss = 0.0, expected_grad = 0.0;
    for (size_t i = 0; i < B; ++i) {
      expected_loss += tvf::expectile_loss(xs[i] - m, tau) / double(B);
      expected_grad += 2.0 * w[i] * (m - xs[i]);
    }
    CHECK(tape.value(loss).data[0] == Catch::Approx(expected_loss).epsilon(1e-12));
    auto g = tape.backward(loss);
    CHECK(g.at("fit/w")[0] == Catch::Approx(expected_grad).epsilon(1e-10));
    CHECK(g.at("fit/b")[0] == Catch::Approx(expected_grad).epsilon(1e-10));
  }
}

TEST_CASE("sign-reweighted squared loss converges to the bisection expectile") {
  Rng rng(11);
  const size_t B = 64;
  std::vector<double> xs(B);
  for (size_t i = 0; i < B; ++i)
    xs[i] = (i % 3 == 0) ? rng.normal(2.0, 0.3) : rng.normal(-0.5, 0.8);

  for (double tau : {0.5, 0.9}) {
    nn::ParamSet ps;
    ps.add("fit/w", Tensor({1, 1}, {0.0}));
    ps.add("fit/b", Tensor::zeros({1}));
    nn::AdamState adam(ps, {.lr = 2e-2});
    double pred_value = 0.0;
    for (int step = 0; step < 4000; ++step) {
      nn::Tape tape;
      auto ones = tape.input(Tensor::filled({B, 1}, 1.0), "ones");
      auto pred = nn::affine(tape, ps, "fit", ones);
      pred_value = tape.value(pred).data[0];
      std::vector<double> w(B);
      for (size_t i = 0; i < B; ++i)
        w[i] = (xs[i] - pred_value < 0.0 ? 1.0 - tau : tau) / double(B);
      auto loss = tape.weighted_squared_loss(pred, Tensor::column(xs), w, "loss");
      auto g = tape.backward(loss);
      adam.step(ps, g);
    }
    const double oracle = expectile_bisect(xs, tau);
    CHECK(std::abs(pred_value - oracle) < 1e-3);
    if (tau == 0.5)  // the 1/2-expectile is the mean
      CHECK(oracle == Catch::Approx(mean_of(xs)).epsilon(1e-9));
  }
}

TEST_CASE("transition pool: ordering, successors, terminal flags, realized returns") {
  Dataset ds;
  // inserted out of index order on purpose
  ds.trajectories.push_back(make_traj(3, {0, 1, 2}, {1, 1, 1}, {0.5, 0.25, 0.125}, false));
  ds.trajectories.push_back(make_traj(1, {5, 6}, {1, 1}, {0.0, 1.0}, true));
  ds.stats = data::fit_norm_stats(ds, 0.5);

  const auto pool = tvf::build_transition_pool(ds, 0.5);
  // index 1 first (2 steps, terminal keeps its last), index 3 second (3 steps,
  // truncated drops its last)
  REQUIRE(pool.size() == 4);
  CHECK(pool[0].s[0] == 5.0);
  CHECK(pool[0].s2[0] == 6.0);
  CHECK(pool[0].done == 0.0);
  CHECK(pool[0].r_own == Catch::Approx(0.5));  // 0 + 0.5 * 1
  CHECK(pool[1].s[0] == 6.0);
  CHECK(pool[1].s2[0] == 6.0);  // terminal self-successor, masked by done
  CHECK(pool[1].done == 1.0);
  CHECK(pool[1].r == 1.0);
  CHECK(pool[2].s[0] == 0.0);
  CHECK(pool[2].s2[0] == 1.0);
  CHECK(pool[2].r_own == Catch::Approx(0.5 + 0.5 * 0.25 + 0.25 * 0.125));
  CHECK(pool[3].s[0] == 1.0);
  CHECK(pool[3].done == 0.0);
}

TEST_CASE("w=0 value loss equals the expectile regression against the target critic") {
  Dataset ds;
  ds.trajectories.push_back(make_traj(0, {0, 1, 2, 3, 4}, {1, 1, 1, 1, 1},
                                      {0, 0, 0, 0, 1}, true));
  ds.stats = data::fit_norm_stats(ds, 0.99);

  tvf::TvfConfig cfg;
  cfg.w = 0.0;
  cfg.tau = 0.8;
  cfg.hidden = 8;
  cfg.layers = 1;
  cfg.seed = 3;
  tvf::TvfTrainer tr(tvf::init_value_heads(1, 1, cfg, ds.stats));
  const auto pool = tvf::build_transition_pool(ds, cfg.gamma);

  // expected: mean_i L2^tau(Q_target(s,a) - V(s)); fresh heads so Q_target == Q
  Tensor s = Tensor::zeros({pool.size(), 1});
  Tensor a = Tensor::zeros({pool.size(), 1});
  for (size_t i = 0; i < pool.size(); ++i) {
    s.at(i, 0) = pool[i].s[0];
    a.at(i, 0) = pool[i].a[0];
  }
  const auto qt = tvf::eval_q(tr.heads, s, a);
  const auto v = tvf::eval_v(tr.heads, s);
  double expected = 0.0;
  for (size_t i = 0; i < pool.size(); ++i)
    expected += tvf::expectile_loss(qt[i] - v[i], cfg.tau) / double(pool.size());

  const auto sr = tvf::tvf_train_step(tr, pool);
  CHECK(sr.loss_v == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("deterministic chain: learned Q and V match exact policy evaluation") {
  // five states in a row, unit action, reward 1 on entering the goal state;
  // exact values are Q(s_t) = V(s_t) = gamma^(4 - t)
  Dataset ds;
  for (uint32_t k = 0; k < 8; ++k)
    ds.trajectories.push_back(
        make_traj(k, {0, 1, 2, 3, 4}, {1, 1, 1, 1, 1}, {0, 0, 0, 0, 1}, true));
  ds.stats = data::fit_norm_stats(ds, 0.99);

  tvf::TvfConfig cfg;
  cfg.tau = 0.9;
  cfg.w = 0.0;
  cfg.gamma = 0.99;
  cfg.polyak = 0.02;
  cfg.lr = 3e-3;
  cfg.hidden = 32;
  cfg.layers = 2;
  cfg.batch = 40;
  cfg.steps = 3000;
  cfg.seed = 1;
  auto heads = tvf::train_tvf(ds, cfg).heads;

  for (size_t t = 0; t < 5; ++t) {
    const double exact = std::pow(0.99, 4.0 - double(t));
    CHECK(std::abs(tvf::predict_future_return(heads, {double(t)}, {1.0}) - exact) < 0.05);
    Tensor st({1, 1}, {double(t)});
    CHECK(std::abs(tvf::eval_v(heads, st)[0] - exact) < 0.05);
  }
}

TEST_CASE("w=1 value head fits the expectile of realized returns") {
  // one state, two observed one-step returns {0, 2}; the tau-expectile of an
  // equal two-point mass {0, 2} is 2*tau
  auto run = [](double tau) {
    Dataset ds;
    ds.trajectories.push_back(make_traj(0, {0}, {0}, {2.0}, true));
    ds.trajectories.push_back(make_traj(1, {0}, {0}, {0.0}, true));
    ds.stats = data::fit_norm_stats(ds, 0.99);
    tvf::TvfConfig cfg;
    cfg.tau = tau;
    cfg.w = 1.0;
    cfg.lr = 4e-3;  // small steps and large batches keep the equilibrium tight
    cfg.hidden = 16;
    cfg.layers = 1;
    cfg.batch = 128;
    cfg.steps = 2500;
    cfg.seed = 5;
    auto heads = tvf::train_tvf(ds, cfg).heads;
    Tensor st({1, 1}, {0.0});
    return std::pair{tvf::eval_v(heads, st)[0],
                     tvf::predict_future_return(heads, {0.0}, {0.0})};
  };
  auto [v_mid, q_mid] = run(0.5);
  CHECK(std::abs(v_mid - 1.0) < 0.05);
  CHECK(std::abs(q_mid - 1.0) < 0.05);  // squared loss mixes {0,2} to the mean
  auto [v_hi, q_hi] = run(0.9);
  CHECK(std::abs(v_hi - 1.8) < 0.05);
}

TEST_CASE("training is deterministic in the seed") {
  Dataset ds;
  for (uint32_t k = 0; k < 4; ++k)
    ds.trajectories.push_back(
        make_traj(k, {0, 1, 2}, {1, 1, 1}, {0, 0, 1}, true));
  ds.stats = data::fit_norm_stats(ds, 0.99);

  tvf::TvfConfig cfg;
  cfg.hidden = 16;
  cfg.layers = 1;
  cfg.batch = 8;
  cfg.steps = 60;
  cfg.seed = 9;
  auto a = tvf::train_tvf(ds, cfg).heads;
  auto b = tvf::train_tvf(ds, cfg).heads;
  auto same = [](const nn::ParamSet& x, const nn::ParamSet& y) {
    REQUIRE(x.paths() == y.paths());
    for (const auto& p : x.paths()) REQUIRE(x.at(p).data == y.at(p).data);
  };
  same(a.q, b.q);
  same(a.v, b.v);
  same(a.q_target, b.q_target);
}

TEST_CASE("value head checkpoint round trip preserves predictions and metadata") {
  Dataset ds;
  for (uint32_t k = 0; k < 4; ++k)
    ds.trajectories.push_back(
        make_traj(k, {0, 1, 2}, {0.5, 0.5, 0.5}, {0, 0, 1}, true));
  ds.stats = data::fit_norm_stats(ds, 0.97);

  tvf::TvfConfig cfg;
  cfg.tau = 0.77;
  cfg.w = 0.25;
  cfg.gamma = 0.97;
  cfg.hidden = 12;
  cfg.layers = 2;
  cfg.batch = 8;
  cfg.steps = 40;
  cfg.seed = 13;
  auto heads = tvf::train_tvf(ds, cfg).heads;
  tvf::save_tvf("tvf_rt.bgc", heads);
  auto back = tvf::load_tvf("tvf_rt.bgc");

  CHECK(back.cfg.tau == heads.cfg.tau);
  CHECK(back.cfg.w == heads.cfg.w);
  CHECK(back.cfg.gamma == heads.cfg.gamma);
  CHECK(back.cfg.hidden == heads.cfg.hidden);
  CHECK(back.cfg.layers == heads.cfg.layers);
  CHECK(back.ds == heads.ds);
  CHECK(back.da == heads.da);
  CHECK(back.stats.state_mean == heads.stats.state_mean);
  CHECK(back.stats.return_std == heads.stats.return_std);
  for (const auto& p : heads.q.paths()) CHECK(back.q.at(p).data == heads.q.at(p).data);
  for (const auto& p : heads.v.paths()) CHECK(back.v.at(p).data == heads.v.at(p).data);
  for (const auto& p : heads.q_target.paths())
    CHECK(back.q_target.at(p).data == heads.q_target.at(p).data);
  CHECK(tvf::predict_future_return(back, {1.0}, {0.5}) ==
        tvf::predict_future_return(heads, {1.0}, {0.5}));
}

TEST_CASE("maze dataset: predictions track realized returns on scoring routes") {
  auto spec = env::parse_maze(env::stitch_layout());
  auto routes = env::stitch_routes(16, 12);
  auto ds = env::collect_dataset(spec, routes, 42, 0.99);

  tvf::TvfConfig cfg;
  cfg.tau = 0.8;
  cfg.w = 0.3;
  cfg.gamma = 0.99;
  cfg.hidden = 64;
  cfg.layers = 2;
  cfg.lr = 1e-3;
  cfg.batch = 128;
  cfg.steps = 1500;
  cfg.seed = 0;
  auto heads = tvf::train_tvf(ds, cfg).heads;

  // rank agreement on the scoring family, where realized discounted return is
  // the exact future value of every step
  std::vector<double> pred, realized;
  for (const auto& traj : ds.trajectories) {
    if (!traj.terminal) continue;
    const auto rets = data::discounted_returns(traj, 0.99);
    for (size_t t = 0; t < traj.length(); t += 3) {
      std::vector<double> s(traj.states.data.begin() + t * 4,
                            traj.states.data.begin() + (t + 1) * 4);
      std::vector<double> a(traj.actions.data.begin() + t * 2,
                            traj.actions.data.begin() + (t + 1) * 2);
      pred.push_back(tvf::predict_future_return(heads, s, a));
      realized.push_back(rets[t]);
    }
  }
  REQUIRE(pred.size() > 50);
  CHECK(spearman(pred, realized) > 0.7);

  // early scoring-route steps carry substantial predicted return
  double first_step_pred = 0.0;
  size_t n = 0;
  for (const auto& traj : ds.trajectories) {
    if (!traj.terminal) continue;
    std::vector<double> s(traj.states.data.begin(), traj.states.data.begin() + 4);
    std::vector<double> a(traj.actions.data.begin(), traj.actions.data.begin() + 2);
    first_step_pred += tvf::predict_future_return(heads, s, a);
    ++n;
  }
  REQUIRE(n > 0);
  CHECK(first_step_pred / double(n) > 0.2);
}
