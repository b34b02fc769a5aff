#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "dplc/autodiff.hpp"
#include "dplc/rng.hpp"

using namespace dplc;
using namespace dplc::ad;

namespace {

Tensor random_tensor(Shape s, Rng& rng) {
  Tensor t(std::move(s));
  rng.fill_normal(t.data.data(), t.numel());
  return t;
}

// Central finite differences of a scalar-valued function of several leaves.
double fd_partial(const std::function<double(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, std::size_t which, std::int64_t idx,
                  double h = 1e-6) {
  inputs[which][idx] += h;
  const double up = f(inputs);
  inputs[which][idx] -= 2 * h;
  const double down = f(inputs);
  return (up - down) / (2 * h);
}

void check_grads(const std::function<Var(const std::vector<Var>&)>& build,
                 const std::vector<Tensor>& inputs, double tol = 1e-6) {
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(leaf(t));
  Var out = build(leaves);
  auto grads = grad(out, leaves);

  auto eval = [&](const std::vector<Tensor>& xs) {
    NoGradGuard guard;
    std::vector<Var> ls;
    for (const auto& t : xs) ls.push_back(constant(t));
    return build(ls)->value[0];
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::int64_t j = 0; j < inputs[i].numel(); ++j) {
      const double fd = fd_partial(eval, inputs, i, j);
      const double an = grads[i]->value[j];
      CHECK(std::abs(fd - an) <= tol * (1.0 + std::abs(fd)));
    }
  }
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  // Keep b away from zero for div.
  for (auto& v : b.data) v = 2.0 + std::abs(v);

  check_grads(
      [](const std::vector<Var>& v) {
        Var x = mul(v[0], v[1]);
        x = add(x, square(v[0]));
        x = sub(x, scale(v[1], 0.5));
        x = div(x, add_scalar(square(v[1]), 1.0));
        return mean_all(x);
      },
      {a, b});
}

TEST_CASE("transcendental op gradients") {
  Rng rng(12);
  Tensor a = random_tensor({2, 5}, rng);
  for (auto& v : a.data) v = 0.5 + std::abs(v);  // positive for log/sqrt

  check_grads(
      [](const std::vector<Var>& v) {
        Var x = add(exp_(scale(v[0], 0.3)), log_(v[0]));
        x = add(x, sqrt_(v[0]));
        x = add(x, tanh_(v[0]));
        x = add(x, recip(v[0]));
        return mean_all(x);
      },
      {a});
}

TEST_CASE("activation gradients away from kinks") {
  Rng rng(13);
  Tensor a = random_tensor({4, 4}, rng);
  for (auto& v : a.data)
    if (std::abs(v) < 0.05) v = 0.1;  // stay off the kink for the FD probe

  check_grads(
      [](const std::vector<Var>& v) {
        return mean_all(add(relu(v[0]), leaky_relu(v[0], 0.2)));
      },
      {a});
}

TEST_CASE("matmul / reduction / broadcast gradients") {
  Rng rng(14);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = random_tensor({1, 2}, rng);

  check_grads(
      [](const std::vector<Var>& v) {
        Var y = matmul(v[0], v[1]);                    // (3,2)
        y = add(y, broadcast_rows(v[2], 3));           // bias
        Var n = row_norm(y);                           // (3,1)
        Var s = col_sum(square(y));                    // (1,2)
        return add(mean_all(n), mean_all(s));
      },
      {a, b, c});
}

TEST_CASE("structural op gradients") {
  Rng rng(15);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 2}, rng);

  check_grads(
      [](const std::vector<Var>& v) {
        Var y = concat_cols(v[0], v[1]);               // (3,6)
        Var z = slice_cols(y, 2, 3);                   // (3,3)
        z = reshape(z, {9, 1});
        return sum_all(mul(z, z));
      },
      {a, b});
}

TEST_CASE("gather and scatter_add are adjoint with correct gradients") {
  Rng rng(16);
  Tensor a = random_tensor({2, 3}, rng);
  auto idx = std::make_shared<const std::vector<std::int64_t>>(
      std::vector<std::int64_t>{5, 4, -1, 0, 0, 2, 1, 3});

  check_grads(
      [&](const std::vector<Var>& v) {
        Var y = gather(v[0], idx, {4, 2});
        return sum_all(square(y));
      },
      {a});

  Tensor src = random_tensor({4, 2}, rng);
  auto idx2 = std::make_shared<const std::vector<std::int64_t>>(
      std::vector<std::int64_t>{0, 1, 2, 0, -1, 5, 3, 3});
  check_grads(
      [&](const std::vector<Var>& v) {
        Var y = scatter_add(v[0], idx2, {2, 3});
        return sum_all(square(y));
      },
      {src});
}

TEST_CASE("softmax rows sum to one and gradient is correct") {
  Rng rng(17);
  Tensor a = random_tensor({3, 5}, rng);
  {
    NoGradGuard guard;
    Var w = softmax_rows(constant(a));
    for (std::int64_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::int64_t c = 0; c < 5; ++c) s += w->value.at(r, c);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  Tensor weights = random_tensor({3, 5}, rng);
  check_grads(
      [&](const std::vector<Var>& v) {
        return mean_all(mul(softmax_rows(v[0]), constant(weights)));
      },
      {a});
}

TEST_CASE("second-order gradients through grad(create_graph)") {
  // y = sum(x^3): dy/dx = 3x^2, d/dx sum(dy/dx) = 6x.
  Rng rng(18);
  Tensor x0 = random_tensor({4, 1}, rng);
  Var x = leaf(x0);
  Var y = sum_all(mul(mul(x, x), x));
  auto g1 = grad(y, {x}, /*create_graph=*/true);
  Var gsum = sum_all(g1[0]);
  auto g2 = grad(gsum, {x});
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(g1[0]->value[i] == doctest::Approx(3 * x0[i] * x0[i]).epsilon(1e-10));
    CHECK(g2[0]->value[i] == doctest::Approx(6 * x0[i]).epsilon(1e-10));
  }
}

TEST_CASE("second-order through matmul chain (gradient-penalty pattern)") {
  // f(x) = w2 . tanh(W1 x); penalty = (||df/dx|| - 1)^2. Check d(penalty)/dW
  // against finite differences.
  Rng rng(19);
  Tensor w1 = random_tensor({3, 4}, rng);
  Tensor w2 = random_tensor({4, 1}, rng);
  Tensor xv = random_tensor({2, 3}, rng);

  auto build = [&](const std::vector<Var>& v) {
    Var x = v[2];
    Var h = tanh_(matmul(x, v[0]));
    Var f = matmul(h, v[1]);  // (2,1)
    auto gx = grad(sum_all(f), {x}, /*create_graph=*/true);
    Var nrm = row_norm(gx[0]);
    return mean_all(square(add_scalar(nrm, -1.0)));
  };

  std::vector<Var> leaves = {leaf(w1), leaf(w2), leaf(xv)};
  Var out = build(leaves);
  auto gw = grad(out, {leaves[0], leaves[1]});

  auto eval = [&](const std::vector<Tensor>& xs) {
    std::vector<Var> ls;
    for (const auto& t : xs) ls.push_back(leaf(t));
    double v = build(ls)->value[0];
    return v;
  };

  std::vector<Tensor> inputs = {w1, w2, xv};
  for (std::size_t which : {std::size_t{0}, std::size_t{1}}) {
    for (std::int64_t j = 0; j < inputs[which].numel(); ++j) {
      const double fd = fd_partial(eval, inputs, which, j, 1e-6);
      const double an = gw[which]->value[j];
      CHECK(std::abs(fd - an) <= 1e-5 * (1.0 + std::abs(fd)));
    }
  }
}

TEST_CASE("value_override is exact in the forward pass") {
  Tensor hard({2, 2}, {1.0, -1.0, 1.0, 1.0});
  Var soft = leaf(Tensor({2, 2}, {0.9, -0.8, 0.7, 0.95}));
  Var st = value_override(hard, soft);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(st->value[i] == hard[i]);
  auto g = grad(sum_all(mul(st, st)), {soft});
  // d/dsoft sum(st*st) with st treated as value: 2*st through the override.
  for (std::int64_t i = 0; i < 4; ++i)
    CHECK(g[0]->value[i] == doctest::Approx(2.0 * hard[i]));
}

TEST_CASE("grad returns zeros for unreachable leaves") {
  Var a = leaf(Tensor::scalar(2.0));
  Var b = leaf(Tensor::scalar(3.0));
  Var y = mul(a, a);
  auto g = grad(y, {a, b});
  CHECK(g[0]->value[0] == doctest::Approx(4.0));
  CHECK(g[1]->value[0] == 0.0);
}

TEST_CASE("shape validation raises") {
  Var a = leaf(Tensor({2, 3}));
  Var b = leaf(Tensor({3, 2}));
  CHECK_THROWS_AS((void)add(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS((void)grad(a, {b}), std::invalid_argument);  // non-scalar
}
