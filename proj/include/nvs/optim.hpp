#pragma once

#include "nvs/params.hpp"

#include <cmath>
#include <vector>

namespace nvs {

/// Adam with bias correction and optional decoupled weight decay.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;

  struct State {
    std::vector<Tensor<float>> m, v;
    std::int64_t count = 0;
  };

  template <typename S>
  State init(const ParamStore<S>& params) const {
    State s;
    for (std::size_t i = 0; i < params.size(); ++i) {
      s.m.push_back(Tensor<float>::zeros(params[i].shape()));
      s.v.push_back(Tensor<float>::zeros(params[i].shape()));
    }
    return s;
  }

  /// One update from the gradients accumulated on `params`; `scale` multiplies
  /// every gradient first (used for clipping).
  template <typename S>
  void update(ParamStore<S>& params, State& s, double lr, double scale = 1.0) const {
    ++s.count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.requires_grad()) continue;
      const auto g = (p.grad().array().template cast<float>() * static_cast<float>(scale)).eval();
      auto& m = s.m[i].array();
      auto& v = s.v[i].array();
      m = static_cast<float>(beta1) * m + static_cast<float>(1 - beta1) * g;
      v = static_cast<float>(beta2) * v + static_cast<float>(1 - beta2) * g.square();
      auto& w = p.mutable_value().array();
      const auto step = ((m / static_cast<float>(c1)) / ((v / static_cast<float>(c2)).sqrt() + static_cast<float>(eps)) +
                         static_cast<float>(weight_decay) * w.template cast<float>())
                            .eval();
      w -= (static_cast<float>(lr) * step).template cast<S>();
    }
  }
};

/// Global L2 norm of the gradients held by `params`.
template <typename S>
double gradient_norm(const ParamStore<S>& params) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) sq += params[i].grad().array().template cast<double>().square().sum();
  return std::sqrt(sq);
}

}  // namespace nvs
