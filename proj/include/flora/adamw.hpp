#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "flora/error.hpp"
#include "flora/nn.hpp"
#include "flora/tensor.hpp"

namespace flora {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moment estimates for one parameter group. Moments are created lazily on
/// the first step to match the parameter shapes.
struct AdamWState {
  AdamWConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update over `params`, reading `grads`.
inline void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamWState& state) {
  if (params.size() != grads.size()) throw ShapeError("adamw: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw: state tracks a different number of parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    check_same_shape(*params[i], grads[i], "adamw gradient");
    check_same_shape(*params[i], state.m[i], "adamw moment");
  }

  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - c.lr * c.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->mutable_data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] = p[j] * decay - c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

/// AdamW over a named parameter list, reading each tensor's own gradient.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig config) : params_(std::move(params)) { state_.config = config; }

  void step() {
    std::vector<Tensor*> ptrs;
    std::vector<Tensor> grads;
    ptrs.reserve(params_.size());
    grads.reserve(params_.size());
    for (const auto& p : params_) {
      ptrs.push_back(p.tensor);
      if (p.tensor->has_grad()) {
        grads.emplace_back(p.tensor->shape(), std::vector<double>(p.tensor->grad().begin(), p.tensor->grad().end()));
      } else {
        grads.emplace_back(p.tensor->shape());
      }
    }
    adamw_step(ptrs, grads, state_);
  }

  const AdamWState& state() const { return state_; }

 private:
  ParamList params_;
  AdamWState state_;
};

}  // namespace flora
