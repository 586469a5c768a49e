#pragma once

// Random small instances per op kind, shared by the unit tests and the
// acceptance gradient suite.

#include <string>
#include <utility>
#include <vector>

#include "lsc/gradcheck.hpp"
#include "lsc/ops.hpp"
#include "lsc/rng.hpp"

namespace lsc_test {

template <class R>
lsc::Tensor<R> random_tensor(lsc::Shape shape, lsc::Rng& rng, double scale = 1.0,
                             double keep_away = 0.0) {
  std::vector<R> d(static_cast<std::size_t>(lsc::shape_numel(shape)));
  for (auto& v : d) {
    double x = rng.normal() * scale;
    if (keep_away > 0 && std::abs(x) < keep_away) x = x < 0 ? x - keep_away : x + keep_away;
    v = static_cast<R>(x);
  }
  return lsc::Tensor<R>::from_data(std::move(shape), std::move(d));
}

template <class R>
struct OpInstance {
  std::vector<lsc::Tensor<R>> inputs;
  std::vector<std::pair<std::string, lsc::Tensor<R>>> params;  // differentiable inputs
};

// Every input participates as a parameter unless noted. Kinked ops get inputs
// bounded away from their kinks so finite differences stay valid.
template <class R>
OpInstance<R> make_op_instance(lsc::OpKind kind, lsc::Rng& rng) {
  using lsc::OpKind;
  using T = lsc::Tensor<R>;
  OpInstance<R> inst;
  auto take = [&](const char* name, T t) {
    t.set_requires_grad(true);
    inst.inputs.push_back(t);
    inst.params.emplace_back(name, t);
  };
  switch (kind) {
    case OpKind::matmul:
      take("a", random_tensor<R>({3, 4}, rng));
      take("b", random_tensor<R>({4, 5}, rng));
      break;
    case OpKind::conv2d_3x3:
      take("x", random_tensor<R>({2, 3, 6, 6}, rng));
      take("w", random_tensor<R>({4, 3, 3, 3}, rng, 0.5));
      take("b", random_tensor<R>({4}, rng, 0.5));
      break;
    case OpKind::add:
      take("a", random_tensor<R>({2, 3, 4, 4}, rng));
      take("b", random_tensor<R>({3}, rng));
      break;
    case OpKind::mul:
      take("a", random_tensor<R>({3, 7}, rng));
      take("b", random_tensor<R>({3, 7}, rng));
      break;
    case OpKind::concat_channels:
      take("a", random_tensor<R>({3, 4}, rng));
      take("b", random_tensor<R>({3, 6}, rng));
      break;
    case OpKind::leaky_relu:
      take("x", random_tensor<R>({4, 9}, rng, 1.0, 0.05));
      break;
    case OpKind::avg_pool2:
      take("x", random_tensor<R>({2, 3, 6, 6}, rng));
      break;
    case OpKind::upsample_nearest2:
      take("x", random_tensor<R>({2, 3, 3, 3}, rng));
      break;
    case OpKind::instance_norm:
      take("x", random_tensor<R>({2, 3, 4, 4}, rng));
      break;
    case OpKind::adain:
      take("x", random_tensor<R>({2, 3, 4, 4}, rng));
      take("gamma", random_tensor<R>({2, 3}, rng));
      take("beta", random_tensor<R>({2, 3}, rng));
      break;
    case OpKind::reduce_l1:
      take("x", random_tensor<R>({5, 6}, rng, 1.0, 0.05));
      break;
    case OpKind::reduce_l2:
      take("x", random_tensor<R>({5, 6}, rng));
      break;
    case OpKind::softplus:
      take("x", random_tensor<R>({4, 8}, rng));
      break;
    case OpKind::tanh:
      take("x", random_tensor<R>({4, 8}, rng));
      break;
    case OpKind::sqrt: {
      T x = random_tensor<R>({4, 6}, rng);
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        R v = x.mutable_data()[i];
        x.mutable_data()[i] = v * v + R(0.1);
      }
      take("x", x);
      break;
    }
    case OpKind::stack_rows:
      take("a", random_tensor<R>({2, 5}, rng));
      take("b", random_tensor<R>({1, 5}, rng));
      take("c", random_tensor<R>({3, 5}, rng));
      break;
  }
  return inst;
}

inline std::vector<lsc::OpKind> all_op_kinds() {
  using lsc::OpKind;
  return {OpKind::matmul,        OpKind::conv2d_3x3,
          OpKind::add,           OpKind::mul,
          OpKind::concat_channels, OpKind::leaky_relu,
          OpKind::avg_pool2,     OpKind::upsample_nearest2,
          OpKind::instance_norm, OpKind::adain,
          OpKind::reduce_l1,     OpKind::reduce_l2,
          OpKind::softplus,      OpKind::tanh,
          OpKind::sqrt,          OpKind::stack_rows};
}

// Scalarizes an op output through a smooth quadratic head so the whole chain
// has a well-defined dense gradient.
template <class R>
lsc::GradCheckReport<R> grad_check_op(lsc::OpKind kind, lsc::Rng& rng, R step, double tol) {
  auto inst = make_op_instance<R>(kind, rng);
  lsc::Tensor<R> target;
  {
    lsc::NoGradScope<R> ng;
    target = random_tensor<R>(lsc::forward_op(kind, inst.inputs).shape(), rng);
  }
  auto f = [&]() {
    auto out = lsc::forward_op(kind, inst.inputs);
    return lsc::scale(lsc::reduce_l2(lsc::sub(out, target)),
                      R(1) / static_cast<R>(out.numel()));
  };
  return lsc::grad_check<R>(f, inst.params, step, tol);
}

}  // namespace lsc_test
