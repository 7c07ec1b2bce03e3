#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "bg/diffusion.hpp"

using namespace bg;
using data::Dataset;
using data::Trajectory;
using nn::Tensor;

namespace {

// Smooth deterministic curves; enough variety that z-scoring is well posed.
Dataset toy_dataset(size_t n_traj, size_t T, size_t ds, size_t da, double gamma) {
  Dataset dset;
  for (size_t k = 0; k < n_traj; ++k) {
    Trajectory t;
    t.states = Tensor::zeros({T, ds});
    t.actions = Tensor::zeros({T, da});
    t.rewards.resize(T);
    for (size_t i = 0; i < T; ++i) {
      for (size_t c = 0; c < ds; ++c)
        t.states.at(i, c) = std::sin(0.3 * double(i) + double(c) + double(k));
      for (size_t c = 0; c < da; ++c)
        t.actions.at(i, c) = 0.5 * std::cos(0.2 * double(i) + 0.7 * double(c) - double(k));
      t.rewards[i] = ((i + k) % 5 == 0) ? 0.3 : -0.1;
    }
    t.terminal = false;
    t.index = static_cast<uint32_t>(k);
    dset.trajectories.push_back(std::move(t));
  }
  dset.stats = data::fit_norm_stats(dset, gamma);
  return dset;
}

double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / double(a.size()));
}

}  // namespace

TEST_CASE("sigma ladder hits both endpoints and decreases monotonically") {
  diff::DiffusionConfig cfg;
  auto sig = diff::karras_sigmas(cfg);
  REQUIRE(sig.size() == cfg.n_sigma + 1);
  CHECK(sig[0] == Catch::Approx(80.0).epsilon(1e-12));
  CHECK(sig[cfg.n_sigma - 1] == Catch::Approx(0.002).epsilon(1e-12));
  CHECK(sig[cfg.n_sigma] == 0.0);
  for (size_t i = 0; i + 1 < sig.size(); ++i) CHECK(sig[i] > sig[i + 1]);

  cfg.n_sigma = 1;
  auto one = diff::karras_sigmas(cfg);
  REQUIRE(one.size() == 2);
  CHECK(one[0] == Catch::Approx(80.0).epsilon(1e-12));
  CHECK(one[1] == 0.0);

  cfg.n_sigma = 25;
  auto many = diff::karras_sigmas(cfg);
  CHECK(many[0] == Catch::Approx(80.0).epsilon(1e-12));
  CHECK(many[24] == Catch::Approx(0.002).epsilon(1e-12));
  for (size_t i = 0; i + 1 < many.size(); ++i) CHECK(many[i] > many[i + 1]);
}

TEST_CASE("preconditioning coefficients satisfy their algebraic identities") {
  for (double sd : {1.0, 0.5}) {
    diff::DiffusionConfig cfg;
    cfg.sigma_data = sd;
    for (double sigma : {0.002, 0.1, 1.0, 7.0, 80.0}) {
      const double ci = diff::c_in(cfg, sigma);
      const double cs = diff::c_skip(cfg, sigma);
      const double co = diff::c_out(cfg, sigma);
      // c_in normalizes the variance sigma^2 + sd^2 of a noised signal
      CHECK(ci * ci * (sigma * sigma + sd * sd) == Catch::Approx(1.0).epsilon(1e-12));
      // skip and output scales in terms of c_in
      CHECK(cs == Catch::Approx(sd * sd * ci * ci).epsilon(1e-12));
      CHECK(co == Catch::Approx(sigma * sd * ci).epsilon(1e-12));
      // the training weight exactly cancels c_out^2
      CHECK(diff::loss_weight(cfg, sigma) * co * co == Catch::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(diff::c_noise(1.0) == 0.0);
  CHECK(diff::c_noise(std::exp(4.0)) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("perturb adds noise of the requested scale") {
  Tensor clean = Tensor::zeros({50, 40});
  Rng rng(3);
  CHECK(diff::perturb(clean, 0.0, rng).data == clean.data);

  Rng rng2(4);
  auto noised = diff::perturb(clean, 0.7, rng2);
  CHECK(std::abs(mean_of(noised.data)) < 0.05);
  CHECK(stddev_of(noised.data) == Catch::Approx(0.7).margin(0.03));

  // same generator state, same draw
  Rng a(9), b(9);
  auto na = diff::perturb(clean, 1.3, a);
  auto nb = diff::perturb(clean, 1.3, b);
  CHECK(na.data == nb.data);
}

TEST_CASE("token packing round-trips raw segments and lays out the condition row") {
  auto dset = toy_dataset(3, 12, 2, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 3;
  cfg.H = 4;
  cfg.width = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  auto m = diff::init_diffusion(2, 1, cfg, dset.stats);

  auto pair = data::make_segment_pair(dset, 0, 4, cfg.K, cfg.H);
  const Tensor clean = diff::clean_of_pair(m, pair);
  REQUIRE(clean.rows() == 4);
  REQUIRE(clean.cols() == 4);  // ds + da + 1
  // z-scored first state element of the successor window
  const double expect0 = (pair.succ_states.at(0, 0) - dset.stats.state_mean[0]) /
                         dset.stats.state_std[0];
  CHECK(clean.at(0, 0) == Catch::Approx(expect0).epsilon(1e-12));
  const double expect_r = (pair.succ_rewards[2] - dset.stats.reward_mean) /
                          dset.stats.reward_std;
  CHECK(clean.at(2, 3) == Catch::Approx(expect_r).epsilon(1e-12));

  // raw -> tokens -> raw
  auto seg = diff::raw_from_tokens(m.stats, clean);
  for (size_t i = 0; i < seg.states.size(); ++i)
    CHECK(seg.states.data[i] == Catch::Approx(pair.succ_states.data[i]).margin(1e-12));
  for (size_t i = 0; i < seg.actions.size(); ++i)
    CHECK(seg.actions.data[i] == Catch::Approx(pair.succ_actions.data[i]).margin(1e-12));
  for (size_t i = 0; i < seg.rewards.size(); ++i)
    CHECK(seg.rewards[i] == Catch::Approx(pair.succ_rewards[i]).margin(1e-12));

  // condition: K z-scored tokens then the z-scored return
  const Tensor cond = diff::condition_of_pair(m, pair);
  REQUIRE(cond.cols() == cfg.K * 4 + 1);
  const double cond0 = (pair.cond_states.at(0, 0) - dset.stats.state_mean[0]) /
                       dset.stats.state_std[0];
  CHECK(cond.data[0] == Catch::Approx(cond0).epsilon(1e-12));
  const double condr = (pair.ret - dset.stats.return_mean) / dset.stats.return_std;
  CHECK(cond.data.back() == Catch::Approx(condr).epsilon(1e-12));
}

TEST_CASE("fresh denoiser is the exact skip connection") {
  auto dset = toy_dataset(2, 10, 2, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 3;
  cfg.H = 4;
  cfg.width = 16;
  cfg.blocks = 2;
  cfg.heads = 2;
  auto m = diff::init_diffusion(2, 1, cfg, dset.stats);

  auto pair = data::make_segment_pair(dset, 0, 3, cfg.K, cfg.H);
  const Tensor cond = diff::condition_of_pair(m, pair);
  Rng rng(17);
  Tensor x = Tensor::zeros({cfg.H, 4});
  for (auto& v : x.data) v = rng.normal();

  for (double sigma : {0.5, 3.0}) {
    const Tensor d = diff::denoise(m, x, sigma, cond);
    const double cs = diff::c_skip(cfg, sigma);
    for (size_t i = 0; i < x.size(); ++i)
      CHECK(d.data[i] == Catch::Approx(cs * x.data[i]).margin(1e-13));
  }
}

TEST_CASE("denoiser training loss gradients match central differences") {
  auto dset = toy_dataset(3, 8, 1, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 2;
  cfg.H = 3;
  cfg.width = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.batch = 2;
  auto m = diff::init_diffusion(1, 1, cfg, dset.stats);
  // move off the zero-init saddle so gates and heads carry signal
  Rng jitter(23);
  for (const auto& p : m.params.paths())
    for (auto& v : m.params.at(p).data) v += 0.05 * jitter.normal();

  Rng rng(derive_seed(5, "gradcheck"));
  const diff::TrainBatch tb = diff::make_train_batch(m, dset, rng);

  const double err = nn::grad_check_fn(m.params, [&](nn::Tape& tape) {
    auto d = diff::denoiser_forward(tape, m, tb.den);
    return tape.weighted_squared_loss(d, tb.clean, tb.weights, "dn/loss");
  });
  CHECK(err < 1e-4);
}

TEST_CASE("reported training loss equals the weighted squared error") {
  auto dset = toy_dataset(3, 9, 1, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 2;
  cfg.H = 3;
  cfg.width = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.batch = 4;
  auto m = diff::init_diffusion(1, 1, cfg, dset.stats);
  Rng rng(derive_seed(8, "bookkeeping"));
  const diff::TrainBatch tb = diff::make_train_batch(m, dset, rng);

  // independent evaluation of the same batch
  nn::Tape tape;
  auto d = diff::denoiser_forward(tape, m, tb.den);
  const auto& dv = tape.value(d).data;
  double manual = 0.0;
  for (size_t i = 0; i < dv.size(); ++i) {
    const double diff_i = dv[i] - tb.clean.data[i];
    manual += tb.weights[i] * diff_i * diff_i;
  }

  nn::AdamState adam(m.params, {.lr = cfg.lr});
  const double reported = diff::diffusion_train_step(m, adam, tb);
  CHECK(reported == Catch::Approx(manual).epsilon(1e-12));
}

TEST_CASE("diffusion training is deterministic in the seed") {
  auto dset = toy_dataset(3, 9, 1, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 2;
  cfg.H = 3;
  cfg.width = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.batch = 4;
  cfg.steps = 30;
  cfg.seed = 21;
  auto a = diff::train_diffusion(dset, cfg).model;
  auto b = diff::train_diffusion(dset, cfg).model;
  REQUIRE(a.params.paths() == b.params.paths());
  for (const auto& p : a.params.paths()) REQUIRE(a.params.at(p).data == b.params.at(p).data);
}

TEST_CASE("single-pair overfit: denoising and sampling reproduce the segment") {
  // one trajectory of exactly K+H steps means every batch is the same pair
  auto dset = toy_dataset(1, 20, 4, 2, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 10;
  cfg.H = 10;
  cfg.width = 32;
  cfg.blocks = 1;
  cfg.heads = 4;
  cfg.batch = 8;
  cfg.steps = 900;
  cfg.lr = 2e-3;
  cfg.seed = 2;
  auto res = diff::train_diffusion(dset, cfg);
  auto& m = res.model;

  auto pair = data::make_segment_pair(dset, 0, 9, cfg.K, cfg.H);
  const Tensor clean = diff::clean_of_pair(m, pair);
  const Tensor cond = diff::condition_of_pair(m, pair);

  // denoising a lightly-noised segment recovers it
  Rng rng(31);
  Tensor x = clean;
  for (auto& v : x.data) v += 0.05 * rng.normal();
  const Tensor d = diff::denoise(m, x, 0.05, cond);
  CHECK(rmse(d.data, clean.data) < 0.05);

  // the full sampler lands on the memorized segment from pure noise
  const Tensor sampled = diff::sample_tokens(m, cond, 77);
  CHECK(rmse(sampled.data, clean.data) < 0.1);
}

TEST_CASE("one-step ladder reduces the sampler to a single denoiser call") {
  auto dset = toy_dataset(2, 10, 2, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 3;
  cfg.H = 4;
  cfg.width = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.n_sigma = 1;
  auto m = diff::init_diffusion(2, 1, cfg, dset.stats);
  Rng jitter(41);
  for (const auto& p : m.params.paths())
    for (auto& v : m.params.at(p).data) v += 0.05 * jitter.normal();

  auto pair = data::make_segment_pair(dset, 0, 3, cfg.K, cfg.H);
  const Tensor cond = diff::condition_of_pair(m, pair);

  const uint64_t seed = 55;
  const Tensor out = diff::sample_tokens(m, cond, seed);

  // replay the sampler's initial draw and apply one denoiser evaluation
  Rng rng(derive_seed(seed, "diffusion/sample"));
  Tensor x0 = Tensor::zeros({cfg.H, 4});
  for (auto& v : x0.data) v = cfg.sigma_max * rng.normal();
  const Tensor direct = diff::denoise(m, x0, cfg.sigma_max, cond);
  for (size_t i = 0; i < out.size(); ++i)
    CHECK(out.data[i] == Catch::Approx(direct.data[i]).margin(1e-10));
}

TEST_CASE("sampling is deterministic per seed and independent of other calls") {
  auto dset = toy_dataset(2, 10, 2, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 3;
  cfg.H = 4;
  cfg.width = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.n_sigma = 4;
  auto m = diff::init_diffusion(2, 1, cfg, dset.stats);
  Rng jitter(43);
  for (const auto& p : m.params.paths())
    for (auto& v : m.params.at(p).data) v += 0.05 * jitter.normal();

  auto pa = data::make_segment_pair(dset, 0, 3, cfg.K, cfg.H);
  auto pb = data::make_segment_pair(dset, 1, 4, cfg.K, cfg.H);
  const Tensor ca = diff::condition_of_pair(m, pa);
  const Tensor cb = diff::condition_of_pair(m, pb);

  const Tensor first = diff::sample_tokens(m, ca, 100);
  (void)diff::sample_tokens(m, cb, 101);
  (void)diff::sample_tokens(m, ca, 102);
  const Tensor again = diff::sample_tokens(m, ca, 100);
  CHECK(first.data == again.data);

  const Tensor other = diff::sample_tokens(m, ca, 101);
  CHECK(first.data != other.data);
}

TEST_CASE("sampler reports the sigma at which the denoiser blew up") {
  auto dset = toy_dataset(2, 10, 2, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 3;
  cfg.H = 4;
  cfg.width = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  auto m = diff::init_diffusion(2, 1, cfg, dset.stats);
  m.params.at("dn/token/w").data[0] = std::numeric_limits<double>::quiet_NaN();

  auto pair = data::make_segment_pair(dset, 0, 3, cfg.K, cfg.H);
  const Tensor cond = diff::condition_of_pair(m, pair);
  try {
    (void)diff::sample_tokens(m, cond, 1);
    FAIL("expected the sampler to throw");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find("sigma=") != std::string::npos);
    CHECK(msg.find("dn/") != std::string::npos);
  }
}

TEST_CASE("diffusion checkpoint round trip preserves behavior") {
  auto dset = toy_dataset(3, 9, 1, 1, 0.99);
  diff::DiffusionConfig cfg;
  cfg.K = 2;
  cfg.H = 3;
  cfg.width = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.batch = 4;
  cfg.steps = 25;
  cfg.seed = 77;
  auto m = diff::train_diffusion(dset, cfg).model;
  diff::save_diffusion("diff_rt.bgc", m);
  auto back = diff::load_diffusion("diff_rt.bgc");

  CHECK(back.cfg.K == m.cfg.K);
  CHECK(back.cfg.H == m.cfg.H);
  CHECK(back.cfg.n_sigma == m.cfg.n_sigma);
  CHECK(back.cfg.sigma_min == m.cfg.sigma_min);
  CHECK(back.cfg.rho == m.cfg.rho);
  CHECK(back.cfg.width == m.cfg.width);
  CHECK(back.ds == m.ds);
  CHECK(back.da == m.da);
  CHECK(back.stats.state_mean == m.stats.state_mean);
  REQUIRE(back.params.paths() == m.params.paths());
  for (const auto& p : m.params.paths())
    REQUIRE(back.params.at(p).data == m.params.at(p).data);

  auto pair = data::make_segment_pair(dset, 0, 2, cfg.K, cfg.H);
  const Tensor cond = diff::condition_of_pair(m, pair);
  const Tensor sa = diff::sample_tokens(m, cond, 5);
  const Tensor sb = diff::sample_tokens(back, cond, 5);
  CHECK(sa.data == sb.data);
}
