#pragma once

// Parameter containers, deterministic initialization, simple feed-forward
// graph specs, and gradient checking against central finite differences.

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bg/autodiff.hpp"
#include "bg/common.hpp"
#include "bg/tensor.hpp"

namespace bg::nn {

// ============================================================================
// ParamSet — ordered map path -> Tensor. Iteration follows insertion order,
// which is fixed by construction code, so runs are reproducible.
// ============================================================================

class ParamSet {
 public:
  Tensor& add(const std::string& path, Tensor t) {
    require(map_.find(path) == map_.end(),
            "ParamSet: duplicate parameter path '" + path + "'");
    order_.push_back(path);
    auto [it, ok] = map_.emplace(path, std::move(t));
    (void)ok;
    return it->second;
  }

  bool contains(const std::string& path) const { return map_.count(path) > 0; }

  Tensor& at(const std::string& path) {
    auto it = map_.find(path);
    require(it != map_.end(), "ParamSet: unknown parameter path '" + path + "'");
    return it->second;
  }
  const Tensor& at(const std::string& path) const {
    auto it = map_.find(path);
    require(it != map_.end(), "ParamSet: unknown parameter path '" + path + "'");
    return it->second;
  }

  const std::vector<std::string>& paths() const { return order_; }

  size_t total_elements() const {
    size_t n = 0;
    for (const auto& p : order_) n += map_.at(p).size();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> map_;
};

// Copies gradients into the matching tensors' grad fields.
inline void attach_grads(ParamSet& params, const GradSet& grads) {
  for (const auto& [path, g] : grads.items) {
    Tensor& t = params.at(path);
    require(g.size() == t.size(), "attach_grads: length mismatch for '" + path + "'");
    t.grad = g;
  }
}

// ============================================================================
// Initialization — every tensor is seeded by hash(master_seed, path), so the
// values depend only on the seed and the path, not on registration order.
// ============================================================================

inline Tensor init_uniform(std::vector<size_t> shape, double bound,
                           uint64_t master_seed, const std::string& path) {
  Rng rng(derive_seed(master_seed, path));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

// Dense layer: weight uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), bias zero.
inline void init_affine(ParamSet& ps, const std::string& prefix, size_t in,
                        size_t out, uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  ps.add(prefix + "/w", init_uniform({in, out}, bound, seed, prefix + "/w"));
  ps.add(prefix + "/b", Tensor::zeros({out}));
}

inline void init_layer_norm(ParamSet& ps, const std::string& prefix, size_t dim) {
  ps.add(prefix + "/gain", Tensor::filled({dim}, 1.0));
  ps.add(prefix + "/bias", Tensor::zeros({dim}));
}

// Embedding table: uniform(-1/sqrt(dim), +1/sqrt(dim)).
inline void init_embedding(ParamSet& ps, const std::string& path, size_t rows,
                           size_t dim, uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  ps.add(path, init_uniform({rows, dim}, bound, seed, path));
}

// ============================================================================
// Forward helpers binding a ParamSet to tape ops
// ============================================================================

inline Tape::Ref affine(Tape& tape, ParamSet& ps, const std::string& prefix,
                        Tape::Ref x) {
  return tape.affine(x, tape.param(prefix + "/w", ps.at(prefix + "/w")),
                     tape.param(prefix + "/b", ps.at(prefix + "/b")), prefix);
}

inline Tape::Ref layer_norm(Tape& tape, ParamSet& ps, const std::string& prefix,
                            Tape::Ref x) {
  return tape.layer_norm(x, tape.param(prefix + "/gain", ps.at(prefix + "/gain")),
                         tape.param(prefix + "/bias", ps.at(prefix + "/bias")),
                         prefix);
}

// GELU MLP with hidden widths; final layer linear.
inline void init_mlp(ParamSet& ps, const std::string& prefix, size_t in,
                     const std::vector<size_t>& hidden, size_t out, uint64_t seed) {
  size_t d = in;
  for (size_t i = 0; i < hidden.size(); ++i) {
    init_affine(ps, prefix + "/fc" + std::to_string(i), d, hidden[i], seed);
    d = hidden[i];
  }
  init_affine(ps, prefix + "/head", d, out, seed);
}

inline Tape::Ref mlp_forward(Tape& tape, ParamSet& ps, const std::string& prefix,
                             Tape::Ref x, size_t hidden_layers) {
  Tape::Ref h = x;
  for (size_t i = 0; i < hidden_layers; ++i)
    h = tape.gelu(affine(tape, ps, prefix + "/fc" + std::to_string(i), h),
                  prefix + "/gelu" + std::to_string(i));
  return affine(tape, ps, prefix + "/head", h);
}

// ============================================================================
// GraphSpec — declarative feed-forward stack used by tests and the gradient
// checker; production models build on the tape directly.
// ============================================================================

struct LayerDesc {
  enum Kind { Affine, LayerNorm, Gelu, Softmax } kind;
  size_t out_dim = 0;  // Affine only
};

struct GraphSpec {
  std::string name = "net";
  size_t input_dim = 0;
  std::vector<LayerDesc> layers;

  size_t output_dim() const {
    size_t d = input_dim;
    for (const auto& l : layers)
      if (l.kind == LayerDesc::Affine) d = l.out_dim;
    return d;
  }
};

inline ParamSet init_params(const GraphSpec& spec, uint64_t seed) {
  ParamSet ps;
  size_t d = spec.input_dim;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string prefix = spec.name + "/l" + std::to_string(i);
    switch (l.kind) {
      case LayerDesc::Affine:
        init_affine(ps, prefix, d, l.out_dim, seed);
        d = l.out_dim;
        break;
      case LayerDesc::LayerNorm:
        init_layer_norm(ps, prefix, d);
        break;
      default:
        break;
    }
  }
  return ps;
}

struct ForwardResult {
  Tensor output;
  Tape tape;
  Tape::Ref output_ref;
};

inline ForwardResult net_forward(ParamSet& params, const Tensor& input,
                                 const GraphSpec& spec) {
  require(input.cols() == spec.input_dim, "net_forward: input dim mismatch");
  ForwardResult r;
  Tape::Ref h = r.tape.input(input, spec.name + "/input");
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string prefix = spec.name + "/l" + std::to_string(i);
    switch (l.kind) {
      case LayerDesc::Affine:
        h = affine(r.tape, params, prefix, h);
        break;
      case LayerDesc::LayerNorm:
        h = layer_norm(r.tape, params, prefix, h);
        break;
      case LayerDesc::Gelu:
        h = r.tape.gelu(h, prefix);
        break;
      case LayerDesc::Softmax:
        h = r.tape.softmax(h, prefix);
        break;
    }
  }
  r.output = r.tape.value(h);
  r.output_ref = h;
  return r;
}

inline GradSet backprop(ForwardResult& fwd, std::vector<double> output_grad) {
  return fwd.tape.backward(fwd.output_ref, std::move(output_grad));
}

// ============================================================================
// Gradient checking — central finite differences over every parameter
// element; reports the max relative error
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// The default eps balances cancellation noise (ulp(loss)/2eps) against
// truncation (eps^2); keep the loss near unit scale for best resolution.
// ============================================================================

// General form: the builder records a scalar loss for the current parameter
// values. Called repeatedly with perturbed parameters.
inline double grad_check_fn(ParamSet& params,
                            const std::function<Tape::Ref(Tape&)>& build_loss,
                            double eps = 1e-4) {
  Tape tape;
  Tape::Ref loss = build_loss(tape);
  require(tape.value(loss).size() == 1, "grad_check: loss must be scalar");
  GradSet analytic = tape.backward(loss);

  auto eval_loss = [&]() {
    Tape t2;
    return t2.value(build_loss(t2)).data[0];
  };

  double max_rel = 0.0;
  for (const auto& [path, g] : analytic.items) {
    Tensor& t = params.at(path);
    for (size_t i = 0; i < t.size(); ++i) {
      const double saved = t.data[i];
      t.data[i] = saved + eps;
      const double up = eval_loss();
      t.data[i] = saved - eps;
      const double down = eval_loss();
      t.data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g[i];
      // central differences cannot resolve gradients below their own noise
      // floor (~ulp(loss)/2eps); both sides that small agree on "zero"
      if (std::abs(a) < 1e-9 && std::abs(numeric) < 1e-9) continue;
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// Spec form: random input and a fixed random linear functional as the loss.
inline double grad_check(const GraphSpec& spec, uint64_t seed, double eps = 1e-4) {
  ParamSet params = init_params(spec, seed);
  Rng rng(derive_seed(seed, spec.name + "/grad_check"));
  const size_t batch = 3;
  Tensor input = Tensor::zeros({batch, spec.input_dim});
  for (auto& v : input.data) v = rng.normal();
  std::vector<double> probe(batch * spec.output_dim());
  const double probe_scale = 1.0 / std::sqrt(static_cast<double>(probe.size()));
  for (auto& v : probe) v = rng.normal() * probe_scale;

  auto build = [&](Tape& tape) {
    Tape::Ref h = tape.input(input, spec.name + "/input");
    for (size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& l = spec.layers[i];
      const std::string prefix = spec.name + "/l" + std::to_string(i);
      switch (l.kind) {
        case LayerDesc::Affine:
          h = affine(tape, params, prefix, h);
          break;
        case LayerDesc::LayerNorm:
          h = layer_norm(tape, params, prefix, h);
          break;
        case LayerDesc::Gelu:
          h = tape.gelu(h, prefix);
          break;
        case LayerDesc::Softmax:
          h = tape.softmax(h, prefix);
          break;
      }
    }
    return tape.weighted_sum(h, probe, spec.name + "/probe_loss");
  };
  return grad_check_fn(params, build, eps);
}

}  // namespace bg::nn
