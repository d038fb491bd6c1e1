#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "flora/ops.hpp"
#include "flora/rng.hpp"
#include "flora/tape.hpp"
#include "flora/tensor.hpp"

namespace flora {

/// A parameter tensor and the stable name it is checkpointed under.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};

using ParamList = std::vector<NamedParam>;

inline void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) {
    p.tensor->set_requires_grad(trainable);
    p.tensor->clear_grad();
  }
}

/// Affine map y = x W + b, with W stored [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;

  /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  Linear(std::size_t in, std::size_t out, Rng& rng) : weight(Shape{in, out}), bias(Shape{1, out}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : weight.mutable_data()) w = bound * (2.0 * rng.uniform() - 1.0);
    for (double& b : bias.mutable_data()) b = bound * (2.0 * rng.uniform() - 1.0);
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  static Linear zeros(std::size_t in, std::size_t out) {
    Linear l;
    l.weight = Tensor(Shape{in, out});
    l.bias = Tensor(Shape{1, out});
    l.weight.set_requires_grad(true);
    l.bias.set_requires_grad(true);
    return l;
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Var operator()(Tape& tape, Var x) {
    if (x.cols() != in_features()) {
      throw ShapeError("linear: input width " + std::to_string(x.cols()) + " != " + std::to_string(in_features()));
    }
    return ops::add_bias(ops::matmul(x, tape.param(weight)), tape.param(bias));
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

}  // namespace flora
