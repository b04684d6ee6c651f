#pragma once

// Finite-difference oracle for single ops. The op under test is written once
// as a generic lambda and instantiated twice: in fp32 on the tape (the
// analytic gradient being checked) and in fp64 without a tape (the shadow
// used for central differences).

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ttd/ops.hpp"
#include "ttd/rng.hpp"
#include "ttd/tensor.hpp"

namespace ttd::oracle {

struct OpCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct OpInput {
  Shape shape;
  std::vector<double> values;
};

/// Uniform values in [lo, hi]; `avoid` keeps |x| away from zero (kinks).
inline OpInput random_input(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0, double avoid = 0.0) {
  CounterRng rng(seed);
  OpInput in{shape, std::vector<double>(shape_numel(shape))};
  for (auto& v : in.values) {
    do {
      v = rng.uniform(lo, hi);
    } while (std::abs(v) < avoid);
  }
  return in;
}

template <class Real>
std::vector<Tensor<Real>> make_tensors(const std::vector<OpInput>& inputs, bool requires_grad) {
  std::vector<Tensor<Real>> out;
  for (const auto& in : inputs) {
    std::vector<Real> data(in.values.begin(), in.values.end());
    out.emplace_back(in.shape, std::move(data), requires_grad);
  }
  return out;
}

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Checks d/d(inputs) of sum(op(inputs) * R) for a fixed random R. Inputs in
/// `constant` are not differentiated (e.g. labels).
template <class Op>
OpCheck check_op(Op op, const std::vector<OpInput>& inputs, std::uint64_t seed = 99, double h = 1e-3,
                 double floor = 1e-6) {
  // Projection weights, sized from a probe evaluation.
  std::vector<double> proj;
  {
    Tape<double> probe(false);
    const auto t = make_tensors<double>(inputs, false);
    const auto out = op(probe, t);
    CounterRng rng(seed);
    proj.resize(out.numel());
    for (auto& r : proj) r = rng.uniform(0.5, 1.5);
  }
  auto project = [&]<class Real>(Tape<Real>& tape, const Tensor<Real>& out) {
    std::vector<Real> r(proj.begin(), proj.end());
    return sum(tape, mul(tape, out, Tensor<Real>(out.shape(), std::move(r))));
  };

  Tape<float> tape;
  auto t32 = make_tensors<float>(inputs, true);
  auto loss32 = project(tape, op(tape, t32));
  tape.backward(loss32);

  auto t64 = make_tensors<double>(inputs, false);
  auto loss64 = [&]() {
    Tape<double> t(false);
    return project(t, op(t, t64)).item();
  };

  OpCheck result;
  for (std::size_t k = 0; k < t64.size(); ++k) {
    auto data = t64[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x = data[i];
      data[i] = x + h;
      const double up = loss64();
      data[i] = x - h;
      const double down = loss64();
      data[i] = x;
      const double numeric = (up - down) / (2 * h);
      const double analytic = t32[k].has_grad() ? t32[k].grad()[i] : 0.0;
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic, numeric, floor));
      ++result.checked;
    }
  }
  return result;
}

struct NamedOpCheck {
  std::string op;
  OpCheck check;
};

/// Every differentiable op on random inputs in [-2, 2].
inline std::vector<NamedOpCheck> check_all_ops(std::uint64_t seed = 1) {
  std::vector<NamedOpCheck> out;
  auto in = [&](Shape s, double lo = -2.0, double hi = 2.0, double avoid = 0.0) {
    return random_input(std::move(s), seed++, lo, hi, avoid);
  };
  auto run = [&](std::string name, auto op, std::vector<OpInput> inputs) {
    out.push_back({std::move(name), check_op(op, inputs, seed++)});
  };

  run("matmul", [](auto& t, const auto& x) { return matmul(t, x[0], x[1]); }, {in({4, 3}), in({3, 2})});
  run("linear", [](auto& t, const auto& x) { return linear(t, x[0], x[1], x[2]); }, {in({2, 3, 4}), in({4, 5}), in({5})});
  run("batched_matmul", [](auto& t, const auto& x) { return batched_matmul(t, x[0], x[1]); }, {in({2, 3, 4}), in({2, 4, 2})});
  run("batched_matmul_bt",
      [](auto& t, const auto& x) {
        using R = typename std::remove_cvref_t<decltype(x[0])>::value_type;
        return batched_matmul(t, x[0], x[1], true, static_cast<R>(0.5));
      },
      {in({2, 3, 4}), in({2, 5, 4})});
  run("add", [](auto& t, const auto& x) { return add(t, x[0], x[1]); }, {in({3, 4}), in({3, 4})});
  run("add_bias", [](auto& t, const auto& x) { return add_bias(t, x[0], x[1]); }, {in({2, 3, 4}), in({4})});
  run("mul", [](auto& t, const auto& x) { return mul(t, x[0], x[1]); }, {in({3, 4}), in({3, 4})});
  run("scale",
      [](auto& t, const auto& x) {
        using R = typename std::remove_cvref_t<decltype(x[0])>::value_type;
        return scale(t, x[0], static_cast<R>(-1.5));
      },
      {in({3, 4})});
  run("relu", [](auto& t, const auto& x) { return relu(t, x[0]); }, {in({4, 5}, -2.0, 2.0, 0.01)});
  run("sigmoid", [](auto& t, const auto& x) { return sigmoid(t, x[0]); }, {in({4, 5})});
  run("softmax_lastdim", [](auto& t, const auto& x) { return softmax_lastdim(t, x[0]); }, {in({3, 5})});
  run("layer_norm", [](auto& t, const auto& x) { return layer_norm(t, x[0], x[1], x[2], 1e-5); },
      {in({3, 6}), in({6}), in({6})});
  run("dropout_train",
      [](auto& t, const auto& x) { return dropout(t, x[0], 0.3, CounterRng(5), true); }, {in({4, 6})});
  run("mean_lastdim", [](auto& t, const auto& x) { return mean_lastdim(t, x[0]); }, {in({3, 5})});
  run("sum", [](auto& t, const auto& x) { return sum(t, x[0]); }, {in({3, 5})});
  run("transpose_last2", [](auto& t, const auto& x) { return transpose_last2(t, x[0]); }, {in({2, 3, 4})});
  run("reshape", [](auto& t, const auto& x) { return reshape(t, x[0], Shape{4, 3}); }, {in({2, 6})});
  run("embedding_lookup",
      [](auto& t, const auto& x) {
        static const std::vector<std::int32_t> ids = {3, 0, 3, 1, 4, 2};
        return embedding_lookup(t, x[0], ids, Shape{2, 3});
      },
      {in({5, 4})});
  run("split_heads", [](auto& t, const auto& x) { return split_heads(t, x[0], 2); }, {in({2, 3, 4})});
  run("merge_heads", [](auto& t, const auto& x) { return merge_heads(t, x[0], 2); }, {in({4, 3, 2})});
  run("mask_keys+softmax",
      [](auto& t, const auto& x) {
        static const std::vector<float> mask = {1, 1, 0, 1, 1, 1};
        return softmax_lastdim(t, mask_keys(t, x[0], mask, 2));
      },
      {in({4, 3, 3})});
  run("masked_mean_pool",
      [](auto& t, const auto& x) {
        static const std::vector<float> mask = {1, 1, 1, 1, 1, 0, 0, 0};
        return masked_mean_pool(t, x[0], mask);
      },
      {in({2, 4, 3})});
  run("bce_loss",
      [](auto& t, const auto& x) {
        static const std::vector<float> labels = {1, 0, 1, 0};
        return bce_loss(t, x[0], labels, 2.0);
      },
      {in({4}, 0.05, 0.95)});
  return out;
}

}  // namespace ttd::oracle
