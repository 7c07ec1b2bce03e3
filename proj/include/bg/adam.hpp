#pragma once

// Adam with bias correction. One AdamState per parameter set being trained;
// the state is keyed by parameter path and sized at init.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "bg/layers.hpp"

namespace bg::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(const ParamSet& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& path : params.paths()) {
      const size_t n = params.at(path).size();
      m_.emplace(path, std::vector<double>(n, 0.0));
      v_.emplace(path, std::vector<double>(n, 0.0));
      order_.push_back(path);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  uint64_t step_count() const { return step_; }

  // Updates every tracked parameter; grads must contain a gradient for each.
  void step(ParamSet& params, const GradSet& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& path : order_) {
      const std::vector<double>& g = grads.at(path);
      Tensor& p = params.at(path);
      require(g.size() == p.size(), "adam_step: gradient length mismatch for '" + path + "'");
      auto& m = m_.at(path);
      auto& v = v_.at(path);
      for (size_t i = 0; i < g.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  uint64_t step_ = 0;
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::vector<double>> m_, v_;
};

inline void adam_step(ParamSet& params, const GradSet& grads, AdamState& state) {
  state.step(params, grads);
}

}  // namespace bg::nn
