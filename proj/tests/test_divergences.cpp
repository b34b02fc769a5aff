#include <cmath>

#include "doctest.h"
#include "dplc/autodiff.hpp"
#include "dplc/divergences.hpp"
#include "dplc/rng.hpp"

using namespace dplc;

namespace {

Batch batch1d(std::vector<double> values) {
  const std::int64_t b = static_cast<std::int64_t>(values.size());
  return Batch{Tensor({b, 1}, std::move(values)), Space::Z};
}

}  // namespace

TEST_CASE("imq kernel worked values and symmetry") {
  KernelSpec k = make_kernel_spec(2.0);
  CHECK(imq_kernel({1.0, 2.0}, {1.0, 2.0}, k) == 1.0);
  CHECK(imq_kernel({0.0}, {1.0}, k) == doctest::Approx(2.0 / 3.0));

  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> a = {rng.normal(), rng.normal(), rng.normal()};
    std::vector<double> b = {rng.normal(), rng.normal(), rng.normal()};
    const double kab = imq_kernel(a, b, k);
    CHECK(kab == imq_kernel(b, a, k));
    CHECK(kab > 0.0);
    CHECK(kab <= 1.0);
  }
  CHECK_THROWS_AS((void)imq_kernel({1.0}, {1.0, 2.0}, k), std::invalid_argument);
  CHECK_THROWS_AS((void)make_kernel_spec(0.0), std::invalid_argument);
}

TEST_CASE("MMD U-statistic worked example equals -1/3") {
  KernelSpec k = make_kernel_spec(2.0);
  Batch z = batch1d({0.0, 1.0});
  Batch zb = batch1d({0.0, 1.0});
  CHECK(mmd_u_statistic(z, zb, k) == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS((void)mmd_u_statistic(batch1d({0.0}), batch1d({1.0}), k),
                  std::invalid_argument);
}

TEST_CASE("MMD U-statistic symmetry in its two arguments") {
  Rng rng(5);
  KernelSpec k = make_kernel_spec(4.0);
  Tensor a({16, 2}), b({16, 2});
  rng.fill_normal(a.data.data(), a.numel());
  rng.fill_normal(b.data.data(), b.numel());
  Batch za{a, Space::Z}, zb{b, Space::Z};
  CHECK(mmd_u_statistic(za, zb, k) ==
        doctest::Approx(mmd_u_statistic(zb, za, k)).epsilon(1e-14));
}

TEST_CASE("MMD null calibration: unbiased around zero") {
  KernelSpec k = make_kernel_spec(2.0);
  Rng rng(6);
  const int trials = 1000;
  const std::int64_t b = 32;
  double sum = 0.0, sumsq = 0.0;
  for (int t = 0; t < trials; ++t) {
    Tensor z({b, 1}), w({b, 1});
    rng.fill_normal(z.data.data(), z.numel());
    rng.fill_normal(w.data.data(), w.numel());
    const double v = mmd_u_statistic(Batch{z, Space::Z}, Batch{w, Space::Z}, k);
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / trials;
  const double var = sumsq / trials - mean * mean;
  const double se = std::sqrt(var / trials);
  CHECK(std::abs(mean) < 3.0 * se);
}

TEST_CASE("MMD separates distant distributions") {
  KernelSpec k = make_kernel_spec(2.0);
  Rng rng(7);
  const std::int64_t b = 256;
  Tensor z({b, 1}), w({b, 1});
  for (std::int64_t i = 0; i < b; ++i) {
    z[i] = rng.normal();
    w[i] = 5.0 + rng.normal();
  }
  const double v = mmd_u_statistic(Batch{z, Space::Z}, Batch{w, Space::Z}, k);
  CHECK(v > 0.5);
}

TEST_CASE("differentiable MMD matches the plain evaluation") {
  Rng rng(8);
  KernelSpec k = make_kernel_spec(3.0);
  Tensor a({12, 3}), b({12, 3});
  rng.fill_normal(a.data.data(), a.numel());
  rng.fill_normal(b.data.data(), b.numel());
  const double plain = mmd_u_statistic(Batch{a, Space::Z}, Batch{b, Space::Z}, k);
  ad::Var av = ad::leaf(a), bv = ad::leaf(b);
  ad::Var mv = mmd_u_statistic(av, bv, k);
  CHECK(mv->value[0] == doctest::Approx(plain).epsilon(1e-12));

  // Gradient against finite differences through one input entry.
  auto g = ad::grad(mv, {av});
  const double h = 1e-6;
  Tensor ap = a;
  ap[5] += h;
  Tensor am = a;
  am[5] -= h;
  const double fd = (mmd_u_statistic(Batch{ap, Space::Z}, Batch{b, Space::Z}, k) -
                     mmd_u_statistic(Batch{am, Space::Z}, Batch{b, Space::Z}, k)) /
                    (2 * h);
  CHECK(g[0]->value[5] == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("critic loss analytic cases") {
  // Identity critic f(x) = x is exactly 1-Lipschitz: zero penalty.
  ModelFn identity = [](const ad::Var& x) { return x; };
  Batch x = batch1d({0.5, -0.5, 1.0, 0.0});
  Batch xh = batch1d({0.4, -0.1, 0.3, 0.2});
  auto parts = critic_loss(identity, x, xh, 10.0, 123);
  CHECK(parts.penalty == doctest::Approx(0.0).epsilon(1e-15));

  // f(x) = 2x: per-sample penalty 10 * (2-1)^2 = 10.
  ModelFn doubler = [](const ad::Var& x) { return ad::scale(x, 2.0); };
  auto parts2 = critic_loss(doubler, x, xh, 10.0, 123);
  CHECK(parts2.penalty == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(parts2.total->value[0] ==
        doctest::Approx(parts2.wasserstein + 10.0 * 1.0).epsilon(1e-12));

  // Identical batches under a linear critic: pure penalty.
  auto parts3 = critic_loss(doubler, x, x, 10.0, 7);
  CHECK(parts3.wasserstein == doctest::Approx(0.0).epsilon(1e-15));

  Batch bad = batch1d({1.0, 2.0});
  CHECK_THROWS_AS((void)critic_loss(identity, x, bad, 10.0, 0),
                  std::invalid_argument);
}

TEST_CASE("gradient penalty parameter gradients match finite differences") {
  // Two-layer critic f(x) = w2 . tanh(W1 x + b1): check d(loss)/d(params)
  // through the second-order penalty path.
  Rng rng(9);
  Tensor w1({2, 8}), b1({1, 8}), w2({8, 1});
  rng.fill_normal(w1.data.data(), w1.numel());
  rng.fill_normal(b1.data.data(), b1.numel());
  rng.fill_normal(w2.data.data(), w2.numel());

  Tensor xv({6, 2}), xhv({6, 2});
  rng.fill_normal(xv.data.data(), xv.numel());
  rng.fill_normal(xhv.data.data(), xhv.numel());
  Batch x{xv, Space::X}, xh{xhv, Space::X};
  std::vector<double> nu;
  for (int i = 0; i < 6; ++i) nu.push_back(rng.uniform());

  auto loss_value = [&](const Tensor& w1t, const Tensor& b1t, const Tensor& w2t) {
    ModelFn critic = [&](const ad::Var& in) {
      ad::Var h = ad::tanh_(ad::add(ad::matmul(in, ad::constant(w1t)),
                                    ad::broadcast_rows(ad::constant(b1t),
                                                       in->value.shape[0])));
      return ad::matmul(h, ad::constant(w2t));
    };
    return critic_loss_with_nu(critic, x, xh, 10.0, nu).total->value[0];
  };

  ad::Var w1v = ad::leaf(w1), b1v = ad::leaf(b1), w2v = ad::leaf(w2);
  ModelFn critic = [&](const ad::Var& in) {
    ad::Var h = ad::tanh_(ad::add(ad::matmul(in, w1v),
                                  ad::broadcast_rows(b1v, in->value.shape[0])));
    return ad::matmul(h, w2v);
  };
  auto parts = critic_loss_with_nu(critic, x, xh, 10.0, nu);
  auto grads = ad::grad(parts.total, {w1v, b1v, w2v});

  const double h = 1e-6;
  auto check_param = [&](Tensor& t, std::size_t which) {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      Tensor tp = t, tm = t;
      tp[i] += h;
      tm[i] -= h;
      double up, down;
      if (which == 0) {
        up = loss_value(tp, b1, w2);
        down = loss_value(tm, b1, w2);
      } else if (which == 1) {
        up = loss_value(w1, tp, w2);
        down = loss_value(w1, tm, w2);
      } else {
        up = loss_value(w1, b1, tp);
        down = loss_value(w1, b1, tm);
      }
      const double fd = (up - down) / (2 * h);
      const double an = grads[which]->value[i];
      CHECK(std::abs(fd - an) <= 1e-4 * (1.0 + std::abs(fd)));
    }
  };
  check_param(w1, 0);
  check_param(b1, 1);
  check_param(w2, 2);
}

TEST_CASE("generator adversarial loss") {
  // Constant critic: loss is -c with zero gradient into the fake batch.
  ModelFn constant_critic = [](const ad::Var& x) {
    const std::int64_t b = x->value.shape[0];
    ad::Var zero = ad::scale(ad::row_sum(x), 0.0);
    return ad::add(zero, ad::constant(Tensor::full({b, 1}, 2.5)));
  };
  ad::Var xh = ad::leaf(Tensor({4, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}));
  ad::Var loss = generator_adversarial_loss(constant_critic, xh);
  CHECK(loss->value[0] == doctest::Approx(-2.5));
  auto g = ad::grad(loss, {xh});
  CHECK(g[0]->value.max_abs() == 0.0);

  // Doubling critic outputs doubles the loss magnitude; value matches the
  // direct -mean(f) recomputation.
  Rng rng(10);
  Tensor w({2, 1});
  rng.fill_normal(w.data.data(), w.numel());
  ModelFn lin = [&](const ad::Var& x) { return ad::matmul(x, ad::constant(w)); };
  ModelFn lin2 = [&](const ad::Var& x) {
    return ad::scale(ad::matmul(x, ad::constant(w)), 2.0);
  };
  ad::Var l1 = generator_adversarial_loss(lin, xh);
  ad::Var l2 = generator_adversarial_loss(lin2, xh);
  CHECK(l2->value[0] == doctest::Approx(2.0 * l1->value[0]).epsilon(1e-12));

  double direct = 0.0;
  {
    ad::NoGradGuard guard;
    auto f = lin(xh);
    for (std::int64_t i = 0; i < 4; ++i) direct -= f->value[i];
    direct /= 4.0;
  }
  CHECK(l1->value[0] == doctest::Approx(direct).epsilon(1e-7));
}

TEST_CASE("embed_and_fit moments") {
  // Constant batch: zero covariance.
  Batch constant_batch{Tensor::full({8, 3}, 1.5), Space::X};
  auto s = embed_and_fit(constant_batch);
  CHECK(s.covariance.max_abs() == 0.0);
  for (std::int64_t j = 0; j < 3; ++j) CHECK(s.mean[j] == 1.5);

  // Standard normal at 1e5: identity moments.
  Rng rng(11);
  Tensor z({100000, 2});
  rng.fill_normal(z.data.data(), z.numel());
  auto sn = embed_and_fit(Batch{z, Space::X});
  CHECK(std::abs(sn.mean[0]) < 0.02);
  CHECK(std::abs(sn.mean[1]) < 0.02);
  CHECK(std::abs(sn.covariance.at(0, 0) - 1.0) < 0.02);
  CHECK(std::abs(sn.covariance.at(1, 1) - 1.0) < 0.02);

  // Permutation invariance.
  Tensor p({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor q({4, 2}, {7, 8, 1, 2, 5, 6, 3, 4});
  auto sp = embed_and_fit(Batch{p, Space::X});
  auto sq = embed_and_fit(Batch{q, Space::X});
  for (std::int64_t i = 0; i < 2; ++i)
    CHECK(sp.mean[i] == doctest::Approx(sq.mean[i]).epsilon(1e-14));
  for (std::int64_t i = 0; i < 4; ++i)
    CHECK(sp.covariance[i] == doctest::Approx(sq.covariance[i]).epsilon(1e-14));

  CHECK_THROWS_AS((void)embed_and_fit(Batch{Tensor({1, 2}), Space::X}),
                  std::invalid_argument);
}

TEST_CASE("frechet distance closed forms") {
  auto gauss1d = [](double mu, double var) {
    GaussianStats s;
    s.mean = Tensor({1, 1}, {mu});
    s.covariance = Tensor({1, 1}, {var});
    s.sample_count = 100;
    return s;
  };
  CHECK(frechet_distance(gauss1d(0, 1), gauss1d(0, 1)) ==
        doctest::Approx(0.0).epsilon(1e-8));
  CHECK(frechet_distance(gauss1d(0, 1), gauss1d(1, 1)) == doctest::Approx(1.0));
  // N(0,1) vs N(0,4): (sigma1 - sigma2)^2 = (1-2)^2 = 1.
  CHECK(frechet_distance(gauss1d(0, 1), gauss1d(0, 4)) == doctest::Approx(1.0));
  // Symmetry.
  Rng rng(12);
  Tensor a({500, 3}), b({500, 3});
  rng.fill_normal(a.data.data(), a.numel());
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = 0.3 + 1.7 * rng.normal();
  auto sa = embed_and_fit(Batch{a, Space::X});
  auto sb = embed_and_fit(Batch{b, Space::X});
  CHECK(frechet_distance(sa, sb) ==
        doctest::Approx(frechet_distance(sb, sa)).epsilon(1e-9));
  CHECK(frechet_distance(sa, sb) > 0.0);
  CHECK_THROWS_AS((void)frechet_distance(gauss1d(0, 1), sa), std::invalid_argument);
}

TEST_CASE("blocked MMD separates and calibrates") {
  Rng rng(13);
  const std::int64_t n = 4000;
  Tensor a({n, 2}), b({n, 2}), c({n, 2});
  rng.fill_normal(a.data.data(), a.numel());
  rng.fill_normal(b.data.data(), b.numel());
  for (std::int64_t i = 0; i < c.numel(); ++i) c[i] = 2.0 + rng.normal();
  KernelSpec k = make_kernel_spec(4.0);

  auto null_test = blocked_mmd(Batch{a, Space::Z}, Batch{b, Space::Z}, k, 400);
  CHECK(std::abs(null_test.mean) < 3.0 * null_test.std_error);

  auto alt_test = blocked_mmd(Batch{a, Space::Z}, Batch{c, Space::Z}, k, 400);
  CHECK(alt_test.mean > 3.0 * alt_test.std_error);

  const double se = bootstrap_std_error(null_test.block_values, 200, 0);
  CHECK(se > 0.0);
}
