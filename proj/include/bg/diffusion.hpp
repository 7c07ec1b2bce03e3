#pragma once

// Conditional diffusion over fixed-length trajectory segments, in the
// preconditioned formulation:
//
//   D(x; sigma, cond) = c_skip(sigma) * x + c_out(sigma) * F(c_in(sigma) * x;
//                                                            c_noise(sigma), cond)
//
// with  c_skip = sd^2 / (sigma^2 + sd^2)        c_out = sigma * sd / sqrt(sigma^2 + sd^2)
//       c_in   = 1 / sqrt(sigma^2 + sd^2)       c_noise = ln(sigma) / 4
//
// Training draws sigma log-normally, perturbs clean segments with Gaussian
// noise of that scale, and regresses D back to the clean segment under the
// weight lambda(sigma) = 1 / c_out(sigma)^2, which keeps the effective
// regression target unit-scale at every noise level.
//
// A segment is H tokens of (state, action, reward), z-scored per column. The
// condition is the flattened K-step window that precedes the segment plus the
// z-scored discounted return from the anchor step. Sampling integrates the
// probability-flow ODE down a Karras sigma ladder with Heun's method, one
// condition at a time, so results do not depend on how requests are batched.
//
// The denoiser is a small transformer: modulation vectors derived from the
// condition shift/scale/gate every block (zero-initialized, so the network
// starts as D = c_skip * x), bidirectional attention mixes the H tokens, and
// a zero-initialized head emits per-token outputs.

#include <cmath>
#include <string>
#include <vector>

#include "bg/adam.hpp"
#include "bg/checkpoint.hpp"
#include "bg/dataset.hpp"
#include "bg/layers.hpp"

namespace bg::diff {

using data::Dataset;
using data::NormStats;
using data::SegmentPair;
using nn::AdamState;
using nn::ParamSet;
using nn::Tape;
using nn::Tensor;

struct DiffusionConfig {
  size_t K = 10;        // condition window length
  size_t H = 10;        // generated segment length
  size_t n_sigma = 10;  // sampler ladder steps
  double sigma_min = 0.002, sigma_max = 80.0, sigma_data = 1.0;
  double rho = 7.0;              // ladder curvature
  double p_mean = -1.2, p_std = 1.2;  // log-normal training noise draw
  size_t width = 128, blocks = 4, heads = 4;
  double lr = 2e-4;
  size_t batch = 128, steps = 5000;
  uint64_t seed = 0;
};

// ============================================================================
// Noise schedule and preconditioning coefficients
// ============================================================================

inline double c_skip(const DiffusionConfig& c, double sigma) {
  const double sd2 = c.sigma_data * c.sigma_data;
  return sd2 / (sigma * sigma + sd2);
}

inline double c_out(const DiffusionConfig& c, double sigma) {
  const double sd2 = c.sigma_data * c.sigma_data;
  return sigma * c.sigma_data / std::sqrt(sigma * sigma + sd2);
}

inline double c_in(const DiffusionConfig& c, double sigma) {
  const double sd2 = c.sigma_data * c.sigma_data;
  return 1.0 / std::sqrt(sigma * sigma + sd2);
}

inline double c_noise(double sigma) { return 0.25 * std::log(sigma); }

inline double loss_weight(const DiffusionConfig& c, double sigma) {
  const double co = c_out(c, sigma);
  return 1.0 / (co * co);
}

// Descending ladder sigma_0 = sigma_max .. sigma_{n-1} = sigma_min, plus a
// final exact zero. n_sigma = 1 degenerates to {sigma_max, 0}.
inline std::vector<double> karras_sigmas(const DiffusionConfig& c) {
  require(c.n_sigma >= 1, "karras_sigmas: need at least one step");
  std::vector<double> s(c.n_sigma + 1, 0.0);
  const double inv_rho = 1.0 / c.rho;
  const double a = std::pow(c.sigma_max, inv_rho);
  const double b = std::pow(c.sigma_min, inv_rho);
  for (size_t i = 0; i < c.n_sigma; ++i) {
    const double f = c.n_sigma == 1 ? 0.0
                                    : static_cast<double>(i) /
                                          static_cast<double>(c.n_sigma - 1);
    s[i] = std::pow(a + f * (b - a), c.rho);
  }
  return s;
}

inline double draw_sigma(const DiffusionConfig& c, Rng& rng) {
  return std::exp(rng.normal(c.p_mean, c.p_std));
}

// x + sigma * eps with eps drawn elementwise from the unit normal.
inline Tensor perturb(const Tensor& clean, double sigma, Rng& rng) {
  Tensor x = clean;
  if (sigma != 0.0)
    for (auto& v : x.data) v += sigma * rng.normal();
  return x;
}

// ============================================================================
// Model
// ============================================================================

struct DiffusionModel {
  DiffusionConfig cfg;
  size_t ds = 0, da = 0;
  ParamSet params;
  NormStats stats;

  size_t token_dim() const { return ds + da + 1; }
  size_t cond_dim() const { return cfg.K * token_dim() + 1; }
};

namespace detail {

inline void init_affine_zero(ParamSet& ps, const std::string& prefix, size_t in,
                             size_t out) {
  ps.add(prefix + "/w", Tensor::zeros({in, out}));
  ps.add(prefix + "/b", Tensor::zeros({out}));
}

}  // namespace detail

inline DiffusionModel init_diffusion(size_t ds, size_t da, const DiffusionConfig& cfg,
                                     const NormStats& stats) {
  require(cfg.width % 2 == 0, "init_diffusion: width must be even");
  require(cfg.width % cfg.heads == 0, "init_diffusion: width not divisible by heads");
  require(stats.ds() == ds && stats.da() == da,
          "init_diffusion: norm stats dimensions mismatch");
  DiffusionModel m;
  m.cfg = cfg;
  m.ds = ds;
  m.da = da;
  m.stats = stats;
  const size_t W = cfg.width, D = m.token_dim();
  const uint64_t seed = derive_seed(cfg.seed, "diffusion/init");
  ParamSet& ps = m.params;

  nn::init_affine(ps, "dn/token", D, W, derive_seed(seed, "token"));
  nn::init_embedding(ps, "dn/pos", cfg.H, W, derive_seed(seed, "pos"));
  nn::init_mlp(ps, "dn/cond", m.cond_dim(), {W}, W, derive_seed(seed, "cond"));
  nn::init_mlp(ps, "dn/noise", W, {W}, W, derive_seed(seed, "noise"));
  for (size_t i = 0; i < cfg.blocks; ++i) {
    const std::string blk = "dn/blk" + std::to_string(i);
    detail::init_affine_zero(ps, blk + "/mod", W, 6 * W);
    nn::init_affine(ps, blk + "/qkv", W, 3 * W, derive_seed(seed, blk + "/qkv"));
    nn::init_affine(ps, blk + "/proj", W, W, derive_seed(seed, blk + "/proj"));
    nn::init_affine(ps, blk + "/fc1", W, 4 * W, derive_seed(seed, blk + "/fc1"));
    nn::init_affine(ps, blk + "/fc2", 4 * W, W, derive_seed(seed, blk + "/fc2"));
  }
  detail::init_affine_zero(ps, "dn/final/mod", W, 2 * W);
  detail::init_affine_zero(ps, "dn/final/head", W, D);
  return m;
}

// ============================================================================
// Token packing — z-scored (state, action, reward) rows
// ============================================================================

inline Tensor tokens_from_raw(const NormStats& st, const Tensor& states,
                              const Tensor& actions, const std::vector<double>& rewards) {
  const size_t T = states.rows(), ds = st.ds(), da = st.da();
  require(actions.rows() == T && rewards.size() == T,
          "tokens_from_raw: row count mismatch");
  Tensor s = states, a = actions;
  data::normalize_rows(st, data::Role::State, s);
  data::normalize_rows(st, data::Role::Action, a);
  Tensor tok = Tensor::zeros({T, ds + da + 1});
  for (size_t r = 0; r < T; ++r) {
    for (size_t c = 0; c < ds; ++c) tok.at(r, c) = s.at(r, c);
    for (size_t c = 0; c < da; ++c) tok.at(r, ds + c) = a.at(r, c);
    tok.at(r, ds + da) = data::normalize_scalar(st, data::Role::Reward, rewards[r]);
  }
  return tok;
}

struct RawSegment {
  Tensor states, actions;  // [H, ds], [H, da]
  std::vector<double> rewards;
};

inline RawSegment raw_from_tokens(const NormStats& st, const Tensor& tokens) {
  const size_t T = tokens.rows(), ds = st.ds(), da = st.da();
  require(tokens.cols() == ds + da + 1, "raw_from_tokens: token width mismatch");
  RawSegment seg;
  seg.states = Tensor::zeros({T, ds});
  seg.actions = Tensor::zeros({T, da});
  seg.rewards.resize(T);
  for (size_t r = 0; r < T; ++r) {
    for (size_t c = 0; c < ds; ++c) seg.states.at(r, c) = tokens.at(r, c);
    for (size_t c = 0; c < da; ++c) seg.actions.at(r, c) = tokens.at(r, ds + c);
    seg.rewards[r] = data::denormalize_scalar(st, data::Role::Reward, tokens.at(r, ds + da));
  }
  data::denormalize_rows(st, data::Role::State, seg.states);
  data::denormalize_rows(st, data::Role::Action, seg.actions);
  return seg;
}

// Condition row: flattened z-scored K-step window, then the z-scored
// discounted return the generated segment should realize.
inline Tensor make_condition(const DiffusionModel& m, const Tensor& states,
                             const Tensor& actions, const std::vector<double>& rewards,
                             double raw_return) {
  require(states.rows() == m.cfg.K, "make_condition: window length mismatch");
  const Tensor tok = tokens_from_raw(m.stats, states, actions, rewards);
  Tensor cond = Tensor::zeros({1, m.cond_dim()});
  std::copy(tok.data.begin(), tok.data.end(), cond.data.begin());
  cond.data.back() = data::normalize_scalar(m.stats, data::Role::Return, raw_return);
  return cond;
}

inline Tensor condition_of_pair(const DiffusionModel& m, const SegmentPair& p) {
  return make_condition(m, p.cond_states, p.cond_actions, p.cond_rewards, p.ret);
}

inline Tensor clean_of_pair(const DiffusionModel& m, const SegmentPair& p) {
  return tokens_from_raw(m.stats, p.succ_states, p.succ_actions, p.succ_rewards);
}

// ============================================================================
// Denoiser forward
// ============================================================================

// Half sines, half cosines over log-spaced frequencies.
inline std::vector<double> sinusoidal_embedding(double value, size_t dim) {
  require(dim % 2 == 0, "sinusoidal_embedding: dim must be even");
  const size_t half = dim / 2;
  std::vector<double> e(dim);
  for (size_t j = 0; j < half; ++j) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    e[j] = std::sin(value * freq);
    e[half + j] = std::cos(value * freq);
  }
  return e;
}

// Numeric inputs for one denoiser evaluation: everything sigma-dependent is
// folded into constants so the tape sees plain tensors.
struct DenoiserBatch {
  size_t B = 0;
  Tensor xin;        // [B*H, D] c_in-scaled noised tokens
  Tensor skip;       // [B*H, D] c_skip * noised tokens
  Tensor cout_full;  // [B*H, D] c_out broadcast per element
  Tensor cond;       // [B, cond_dim]
  Tensor noise_emb;  // [B, width]
  std::vector<double> sigmas;
};

inline DenoiserBatch make_denoiser_batch(const DiffusionModel& m, const Tensor& x_noised,
                                         const std::vector<double>& sigmas,
                                         const Tensor& cond) {
  const size_t D = m.token_dim(), H = m.cfg.H, B = sigmas.size();
  require(x_noised.rows() == B * H && x_noised.cols() == D,
          "make_denoiser_batch: noised tokens shape mismatch");
  require(cond.rows() == B && cond.cols() == m.cond_dim(),
          "make_denoiser_batch: condition shape mismatch");
  DenoiserBatch b;
  b.B = B;
  b.sigmas = sigmas;
  b.cond = cond;
  b.xin = Tensor::zeros({B * H, D});
  b.skip = Tensor::zeros({B * H, D});
  b.cout_full = Tensor::zeros({B * H, D});
  b.noise_emb = Tensor::zeros({B, m.cfg.width});
  for (size_t i = 0; i < B; ++i) {
    const double sig = sigmas[i];
    require(sig > 0.0 && std::isfinite(sig),
            "make_denoiser_batch: sigma must be positive and finite");
    const double ci = c_in(m.cfg, sig), cs = c_skip(m.cfg, sig), co = c_out(m.cfg, sig);
    for (size_t r = i * H; r < (i + 1) * H; ++r)
      for (size_t c = 0; c < D; ++c) {
        const double x = x_noised.at(r, c);
        b.xin.at(r, c) = ci * x;
        b.skip.at(r, c) = cs * x;
        b.cout_full.at(r, c) = co;
      }
    const auto emb = sinusoidal_embedding(c_noise(sig), m.cfg.width);
    std::copy(emb.begin(), emb.end(), b.noise_emb.data.begin() + i * m.cfg.width);
  }
  return b;
}

// Builds D(x; sigma, cond) on the tape and returns its ref ([B*H, D]).
inline Tape::Ref denoiser_forward(Tape& tape, DiffusionModel& m, const DenoiserBatch& in) {
  const DiffusionConfig& cfg = m.cfg;
  const size_t W = cfg.width, H = cfg.H, B = in.B;
  ParamSet& ps = m.params;

  auto cond_path = nn::mlp_forward(tape, ps, "dn/cond",
                                   tape.input(in.cond, "dn/cond/input"), 1);
  auto noise_path = nn::mlp_forward(tape, ps, "dn/noise",
                                    tape.input(in.noise_emb, "dn/noise/input"), 1);
  auto c = tape.add(cond_path, noise_path, "dn/condvec");  // [B, W]

  auto h = nn::affine(tape, ps, "dn/token", tape.input(in.xin, "dn/x/input"));
  std::vector<size_t> pos_idx(B * H);
  for (size_t i = 0; i < B * H; ++i) pos_idx[i] = i % H;
  auto pos = tape.gather_rows(tape.param("dn/pos", ps.at("dn/pos")), pos_idx, "dn/pos/rows");
  h = tape.add(h, pos, "dn/tokens");

  const Tensor ln_gain = Tensor::filled({W}, 1.0);
  const Tensor ln_bias = Tensor::zeros({W});
  auto plain_ln = [&](Tape::Ref x, const std::string& name) {
    return tape.layer_norm(x, tape.input(ln_gain, name + "/gain"),
                           tape.input(ln_bias, name + "/bias"), name);
  };

  for (size_t i = 0; i < cfg.blocks; ++i) {
    const std::string blk = "dn/blk" + std::to_string(i);
    auto mod = nn::affine(tape, ps, blk + "/mod", c);  // [B, 6W]
    auto sc1 = tape.slice_cols(mod, 0, W, blk + "/sc1");
    auto sh1 = tape.slice_cols(mod, W, W, blk + "/sh1");
    auto g1 = tape.slice_cols(mod, 2 * W, W, blk + "/g1");
    auto sc2 = tape.slice_cols(mod, 3 * W, W, blk + "/sc2");
    auto sh2 = tape.slice_cols(mod, 4 * W, W, blk + "/sh2");
    auto g2 = tape.slice_cols(mod, 5 * W, W, blk + "/g2");

    auto m1 = tape.row_scale_shift(plain_ln(h, blk + "/ln1"), sc1, sh1, H, blk + "/mod1");
    auto qkv = nn::affine(tape, ps, blk + "/qkv", m1);
    auto q = tape.slice_cols(qkv, 0, W, blk + "/q");
    auto k = tape.slice_cols(qkv, W, W, blk + "/k");
    auto v = tape.slice_cols(qkv, 2 * W, W, blk + "/v");
    auto att = tape.attention(q, k, v, B, cfg.heads, false, {}, blk + "/attn");
    att = nn::affine(tape, ps, blk + "/proj", att);
    h = tape.add(h, tape.row_gate(att, g1, H, blk + "/gate1"), blk + "/res1");

    auto m2 = tape.row_scale_shift(plain_ln(h, blk + "/ln2"), sc2, sh2, H, blk + "/mod2");
    auto f = nn::affine(tape, ps, blk + "/fc2",
                        tape.gelu(nn::affine(tape, ps, blk + "/fc1", m2), blk + "/gelu"));
    h = tape.add(h, tape.row_gate(f, g2, H, blk + "/gate2"), blk + "/res2");
  }

  auto fmod = nn::affine(tape, ps, "dn/final/mod", c);  // [B, 2W]
  auto scf = tape.slice_cols(fmod, 0, W, "dn/final/sc");
  auto shf = tape.slice_cols(fmod, W, W, "dn/final/sh");
  auto hf = tape.row_scale_shift(plain_ln(h, "dn/final/ln"), scf, shf, H, "dn/final/mod1");
  auto F = nn::affine(tape, ps, "dn/final/head", hf);  // [B*H, D]

  auto scaled = tape.mul_const(F, in.cout_full, "dn/cout");
  return tape.add(scaled, tape.input(in.skip, "dn/skip"), "dn/out");
}

// No-grad evaluation of D for a single segment ([H, D] in, [H, D] out).
inline Tensor denoise(DiffusionModel& m, const Tensor& x, double sigma,
                      const Tensor& cond) {
  Tensor flat = x;
  flat.shape = {m.cfg.H, m.token_dim()};
  require(flat.size() == m.cfg.H * m.token_dim(), "denoise: segment shape mismatch");
  const DenoiserBatch b = make_denoiser_batch(m, flat, {sigma}, cond);
  Tape tape;
  auto out = denoiser_forward(tape, m, b);
  return tape.value(out);
}

// ============================================================================
// Training
// ============================================================================

struct TrainBatch {
  DenoiserBatch den;
  Tensor clean;                 // [B*H, D]
  std::vector<double> weights;  // per element: lambda(sigma) / (B*H*D)
};

inline TrainBatch make_train_batch(const DiffusionModel& m, const Dataset& dataset,
                                   Rng& rng) {
  const DiffusionConfig& cfg = m.cfg;
  const size_t D = m.token_dim(), H = cfg.H, B = cfg.batch;
  Tensor clean = Tensor::zeros({B * H, D});
  Tensor cond = Tensor::zeros({B, m.cond_dim()});
  Tensor noised = Tensor::zeros({B * H, D});
  std::vector<double> sigmas(B), weights(B * H * D);
  for (size_t i = 0; i < B; ++i) {
    const SegmentPair pair = data::sample_segment_pair(dataset, cfg.K, H, rng);
    const Tensor tok = clean_of_pair(m, pair);
    std::copy(tok.data.begin(), tok.data.end(), clean.data.begin() + i * H * D);
    const Tensor c = condition_of_pair(m, pair);
    std::copy(c.data.begin(), c.data.end(), cond.data.begin() + i * m.cond_dim());
    sigmas[i] = draw_sigma(cfg, rng);
    for (size_t j = 0; j < H * D; ++j)
      noised.data[i * H * D + j] = tok.data[j] + sigmas[i] * rng.normal();
    const double w = loss_weight(cfg, sigmas[i]) / static_cast<double>(B * H * D);
    std::fill(weights.begin() + i * H * D, weights.begin() + (i + 1) * H * D, w);
  }
  TrainBatch tb;
  tb.den = make_denoiser_batch(m, noised, sigmas, cond);
  tb.clean = std::move(clean);
  tb.weights = std::move(weights);
  return tb;
}

inline double diffusion_train_step(DiffusionModel& m, AdamState& adam,
                                   const TrainBatch& tb) {
  Tape tape;
  auto d = denoiser_forward(tape, m, tb.den);
  auto loss = tape.weighted_squared_loss(d, tb.clean, tb.weights, "dn/loss");
  const double value = tape.value(loss).data[0];
  auto grads = tape.backward(loss);
  adam.step(m.params, grads);
  return value;
}

struct DiffusionTrainResult {
  DiffusionModel model;
  std::vector<double> loss_trace;  // sampled every 100 steps
};

inline DiffusionTrainResult train_diffusion(const Dataset& dataset,
                                            const DiffusionConfig& cfg) {
  dataset.validate();
  DiffusionTrainResult result;
  result.model = init_diffusion(dataset.ds(), dataset.da(), cfg, dataset.stats);
  AdamState adam(result.model.params, {.lr = cfg.lr});
  Rng rng(derive_seed(cfg.seed, "diffusion/batches"));
  for (size_t step = 0; step < cfg.steps; ++step) {
    const TrainBatch tb = make_train_batch(result.model, dataset, rng);
    const double loss = diffusion_train_step(result.model, adam, tb);
    if (step % 100 == 0 || step + 1 == cfg.steps) result.loss_trace.push_back(loss);
  }
  return result;
}

// ============================================================================
// Sampling — deterministic Heun integration of the probability-flow ODE,
// one condition at a time.
// ============================================================================

inline Tensor sample_tokens(DiffusionModel& m, const Tensor& cond, uint64_t seed) {
  const DiffusionConfig& cfg = m.cfg;
  const size_t H = cfg.H, D = m.token_dim();
  require(cond.rows() == 1 && cond.cols() == m.cond_dim(),
          "sample_tokens: condition shape mismatch");
  const std::vector<double> sig = karras_sigmas(cfg);

  Rng rng(derive_seed(seed, "diffusion/sample"));
  Tensor x = Tensor::zeros({H, D});
  for (auto& v : x.data) v = sig[0] * rng.normal();

  auto denoise_at = [&](const Tensor& xt, double sigma) {
    try {
      return denoise(m, xt, sigma, cond);
    } catch (const std::exception& e) {
      fail("sample_tokens: denoiser failed at sigma=" + std::to_string(sigma) + ": " +
           e.what());
    }
  };

  for (size_t i = 0; i < cfg.n_sigma; ++i) {
    const double s0 = sig[i], s1 = sig[i + 1];
    const Tensor d0 = denoise_at(x, s0);
    Tensor slope = x;
    for (size_t j = 0; j < slope.size(); ++j)
      slope.data[j] = (x.data[j] - d0.data[j]) / s0;
    Tensor x1 = x;
    for (size_t j = 0; j < x1.size(); ++j) x1.data[j] += (s1 - s0) * slope.data[j];
    if (s1 > 0.0) {
      const Tensor d1 = denoise_at(x1, s1);
      for (size_t j = 0; j < x.size(); ++j) {
        const double slope1 = (x1.data[j] - d1.data[j]) / s1;
        x.data[j] += (s1 - s0) * 0.5 * (slope.data[j] + slope1);
      }
    } else {
      x = std::move(x1);
    }
    require(x.all_finite(), "sample_tokens: non-finite state after step to sigma=" +
                                std::to_string(s1));
  }
  return x;
}

// Convenience: sample and unpack to raw units.
inline RawSegment sample_segment(DiffusionModel& m, const Tensor& cond, uint64_t seed) {
  return raw_from_tokens(m.stats, sample_tokens(m, cond, seed));
}

// ============================================================================
// Checkpointing
// ============================================================================

inline void save_diffusion(const std::string& path, const DiffusionModel& m) {
  ParamSet all;
  for (const auto& p : m.params.paths()) all.add(p, m.params.at(p));
  all.add("meta/cfg",
          Tensor({15}, {double(m.cfg.K), double(m.cfg.H), double(m.cfg.n_sigma),
                        m.cfg.sigma_min, m.cfg.sigma_max, m.cfg.sigma_data, m.cfg.rho,
                        m.cfg.p_mean, m.cfg.p_std, double(m.cfg.width),
                        double(m.cfg.blocks), double(m.cfg.heads), m.cfg.lr,
                        double(m.ds), double(m.da)}));
  all.add("meta/stats/state_mean", Tensor({m.ds}, m.stats.state_mean));
  all.add("meta/stats/state_std", Tensor({m.ds}, m.stats.state_std));
  all.add("meta/stats/action_mean", Tensor({m.da}, m.stats.action_mean));
  all.add("meta/stats/action_std", Tensor({m.da}, m.stats.action_std));
  all.add("meta/stats/scalars",
          Tensor({5}, {m.stats.gamma, m.stats.reward_mean, m.stats.reward_std,
                       m.stats.return_mean, m.stats.return_std}));
  nn::save_checkpoint(path, all);
}

inline DiffusionModel load_diffusion(const std::string& path) {
  ParamSet all = nn::load_checkpoint(path);
  const auto& meta = all.at("meta/cfg").data;
  require(meta.size() == 15, "load_diffusion: bad meta block");
  DiffusionModel m;
  m.cfg.K = static_cast<size_t>(meta[0]);
  m.cfg.H = static_cast<size_t>(meta[1]);
  m.cfg.n_sigma = static_cast<size_t>(meta[2]);
  m.cfg.sigma_min = meta[3];
  m.cfg.sigma_max = meta[4];
  m.cfg.sigma_data = meta[5];
  m.cfg.rho = meta[6];
  m.cfg.p_mean = meta[7];
  m.cfg.p_std = meta[8];
  m.cfg.width = static_cast<size_t>(meta[9]);
  m.cfg.blocks = static_cast<size_t>(meta[10]);
  m.cfg.heads = static_cast<size_t>(meta[11]);
  m.cfg.lr = meta[12];
  m.ds = static_cast<size_t>(meta[13]);
  m.da = static_cast<size_t>(meta[14]);
  m.stats.state_mean = all.at("meta/stats/state_mean").data;
  m.stats.state_std = all.at("meta/stats/state_std").data;
  m.stats.action_mean = all.at("meta/stats/action_mean").data;
  m.stats.action_std = all.at("meta/stats/action_std").data;
  const auto& sc = all.at("meta/stats/scalars").data;
  m.stats.gamma = sc[0];
  m.stats.reward_mean = sc[1];
  m.stats.reward_std = sc[2];
  m.stats.return_mean = sc[3];
  m.stats.return_std = sc[4];
  for (const auto& p : all.paths())
    if (p.rfind("dn/", 0) == 0) m.params.add(p, all.at(p));
  require(!m.params.paths().empty(), "load_diffusion: incomplete checkpoint");
  return m;
}

}  // namespace bg::diff
