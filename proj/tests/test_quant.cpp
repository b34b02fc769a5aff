#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dplc/autodiff.hpp"
#include "dplc/divergences.hpp"
#include "dplc/quant.hpp"

using namespace dplc;

namespace {

Batch batch2d(std::vector<double> values, std::int64_t dim) {
  const std::int64_t b = static_cast<std::int64_t>(values.size()) / dim;
  return Batch{Tensor({b, dim}, std::move(values)), Space::Z};
}

// Kolmogorov-Smirnov p-value against Uniform(lo, hi); asymptotic series.
double ks_uniform_pvalue(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double cdf = (xs[i] - lo) / (hi - lo);
    d = std::max(d, std::abs(cdf - static_cast<double>(i + 1) / n));
    d = std::max(d, std::abs(cdf - static_cast<double>(i) / n));
  }
  const double t = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * t * t);
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace

TEST_CASE("sign-corners hard quantization and tie-break") {
  auto spec = make_sign_corners_spec(2);
  auto r = hard_quantize(batch2d({0.3, -0.7}, 2), spec);
  CHECK(r.embedded.at(0, 0) == 1.0);
  CHECK(r.embedded.at(0, 1) == -1.0);

  auto tie = hard_quantize(batch2d({0.0, 0.5}, 2), spec);
  CHECK(tie.embedded.at(0, 0) == -1.0);  // tie at 0 -> lowest center index
  CHECK(tie.embedded.at(0, 1) == 1.0);
}

TEST_CASE("explicit centers distance comparison") {
  auto spec = make_explicit_centers_spec(Tensor({2, 2}, {0, 0, 1, 1}));
  auto r = hard_quantize(batch2d({0.4, 0.4}, 2), spec);
  CHECK(r.indices[0] == 0);  // 0.32 < 0.72
  CHECK(r.embedded.at(0, 0) == 0.0);

  CHECK_THROWS_AS((void)hard_quantize(batch2d({0.0, 0.0, 0.0}, 3), spec),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      (void)make_explicit_centers_spec(Tensor({2, 1}, {1.0, 1.0})),
      std::invalid_argument);
}

TEST_CASE("quantization idempotence and partition") {
  Rng rng(4);
  Tensor z({64, 3});
  rng.fill_normal(z.data.data(), z.numel());
  auto spec = make_sign_corners_spec(3);
  auto r1 = hard_quantize(Batch{z, Space::Z}, spec);
  auto r2 = hard_quantize(Batch{r1.embedded, Space::Z}, spec);
  CHECK(r1.indices == r2.indices);

  Tensor centers({4, 3});
  rng.fill_normal(centers.data.data(), centers.numel());
  auto espec = make_explicit_centers_spec(centers);
  auto r3 = hard_quantize(Batch{z, Space::Z}, espec);
  for (auto idx : r3.indices) {
    CHECK(idx >= 0);
    CHECK(idx < 4);
  }
  auto r4 = hard_quantize(Batch{r3.embedded, Space::Z}, espec);
  CHECK(r3.indices == r4.indices);
}

TEST_CASE("straight-through forward equals hard forward bit-exactly") {
  Rng rng(5);
  Tensor z({32, 4});
  rng.fill_normal(z.data.data(), z.numel());
  auto spec = make_sign_corners_spec(4);
  auto hard = hard_quantize(Batch{z, Space::Z}, spec);
  auto soft = soft_quantize(ad::leaf(z), spec, 1.0);
  CHECK(soft.surrogate->value.data == hard.embedded.data);
  CHECK(soft.indices == hard.indices);
  CHECK_THROWS_AS((void)soft_quantize(ad::leaf(z), spec, 0.0),
                  std::invalid_argument);
}

TEST_CASE("surrogate backward matches finite differences of the soft average") {
  // Sign-corners surrogate at z = 0.5, tau = 1: the soft average is
  // tanh(2 z / tau); its derivative at 0.5 is 2 sech^2(1).
  auto spec = make_sign_corners_spec(1);
  const double z0 = 0.5, tau = 1.0;

  ad::Var z = ad::leaf(Tensor({1, 1}, {z0}));
  auto q = soft_quantize(z, spec, tau);
  auto g = ad::grad(ad::sum_all(q.surrogate), {z});
  const double analytic = g[0]->value[0];

  auto soft_value = [&](double x) {
    ad::NoGradGuard guard;
    return soft_center_average(ad::constant(Tensor({1, 1}, {x})), spec, tau)
        ->value[0];
  };
  const double h = 1e-6;
  const double fd = (soft_value(z0 + h) - soft_value(z0 - h)) / (2 * h);
  CHECK(std::abs(analytic - fd) < 1e-5);
  CHECK(analytic == doctest::Approx(2.0 / std::cosh(1.0) / std::cosh(1.0))
                        .epsilon(1e-9));

  // The per-dimension tanh shortcut agrees with the generic two-center
  // softmax average.
  auto two_centers = make_explicit_centers_spec(Tensor({2, 1}, {-1.0, 1.0}));
  for (double x : {-1.3, -0.2, 0.0, 0.4, 2.0}) {
    ad::NoGradGuard guard;
    const double a =
        soft_center_average(ad::constant(Tensor({1, 1}, {x})), spec, tau)->value[0];
    const double b =
        soft_center_average(ad::constant(Tensor({1, 1}, {x})), two_centers, tau)
            ->value[0];
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("soft average converges to the hard center as temperature -> 0") {
  auto spec = make_sign_corners_spec(1);
  for (double z0 : {-2.0, -0.5, -0.1, 0.1, 0.7, 3.0}) {
    ad::NoGradGuard guard;
    const double soft =
        soft_center_average(ad::constant(Tensor({1, 1}, {z0})), spec, 1e-3)
            ->value[0];
    const double hard = z0 > 0 ? 1.0 : -1.0;
    CHECK(std::abs(soft - hard) < 1e-6);
  }
}

TEST_CASE("bitrate_bpp worked examples") {
  CHECK(bitrate_bpp({4, 4, 2}, {64, 64}) == doctest::Approx(0.0078125));
  CHECK(bitrate_bpp({4, 4, 128}, {64, 64}) == doctest::Approx(0.5));
  CHECK(bitrate_bpp({4, 4, 0}, {64, 64}) == 0.0);
  CHECK_THROWS_AS((void)bitrate_bpp({4, 4, 2}, {0, 64}), std::invalid_argument);
  CHECK_THROWS_AS((void)bitrate_bpp({}, {64, 64}), std::invalid_argument);
}

TEST_CASE("fit_centers matches analytic Lloyd fixed points") {
  // Standard normal, two centers: +-sqrt(2/pi).
  Rng rng(8);
  Tensor z({20000, 1});
  rng.fill_normal(z.data.data(), z.numel());
  auto spec = fit_centers(Batch{z, Space::Z}, 2, 0);
  std::vector<double> c = {spec.centers[0], spec.centers[1]};
  std::sort(c.begin(), c.end());
  const double target = std::sqrt(2.0 / M_PI);
  CHECK(c[0] == doctest::Approx(-target).epsilon(0.03));
  CHECK(c[1] == doctest::Approx(target).epsilon(0.03));

  // One center: the sample mean.
  auto one = fit_centers(Batch{z, Space::Z}, 1, 0);
  double mean = 0;
  for (double v : z.data) mean += v;
  mean /= static_cast<double>(z.numel());
  CHECK(one.centers[0] == doctest::Approx(mean).epsilon(1e-9));

  // Uniform [0,1], two centers: {0.25, 0.75}.
  Tensor u({20000, 1});
  rng.fill_uniform(u.data.data(), u.numel());
  auto uspec = fit_centers(Batch{u, Space::Z}, 2, 0);
  std::vector<double> uc = {uspec.centers[0], uspec.centers[1]};
  std::sort(uc.begin(), uc.end());
  CHECK(uc[0] == doctest::Approx(0.25).epsilon(0.05));
  CHECK(uc[1] == doctest::Approx(0.75).epsilon(0.05));

  CHECK_THROWS_AS((void)fit_centers(Batch{Tensor({3, 1}), Space::Z}, 4, 0),
                  std::invalid_argument);
}

TEST_CASE("Lloyd objective is non-increasing over iterations") {
  Rng rng(9);
  Tensor z({5000, 2});
  rng.fill_normal(z.data.data(), z.numel());
  std::vector<double> trace;
  (void)fit_centers(Batch{z, Space::Z}, 8, 3, 50, 0.0, &trace);
  REQUIRE(trace.size() > 2);
  for (std::size_t i = 1; i < trace.size(); ++i)
    CHECK(trace[i] <= trace[i - 1] + 1e-12);
}

TEST_CASE("more centers never hurt the quantization error") {
  Rng rng(10);
  Tensor z({8000, 2});
  rng.fill_normal(z.data.data(), z.numel());
  Batch b{z, Space::Z};
  double prev = 1e18;
  for (std::int64_t count : {2, 4, 8, 16}) {
    auto spec = fit_centers(b, count, 1);
    const double err = quantization_error(b, spec);
    CHECK(err <= prev * 1.001);
    prev = err;
  }
}

TEST_CASE("hypercube quantizer construction") {
  auto spec = build_hypercube_quantizer(2, 2);
  REQUIRE(spec.centers.shape == Shape{4, 2});
  // Dimension-major order, dim 0 most significant.
  CHECK(spec.centers.at(0, 0) == 0.25);
  CHECK(spec.centers.at(0, 1) == 0.25);
  CHECK(spec.centers.at(1, 0) == 0.25);
  CHECK(spec.centers.at(1, 1) == 0.75);
  CHECK(spec.centers.at(2, 0) == 0.75);
  CHECK(spec.centers.at(2, 1) == 0.25);
  CHECK(spec.centers.at(3, 0) == 0.75);
  CHECK(spec.centers.at(3, 1) == 0.75);

  CHECK_THROWS_AS((void)build_hypercube_quantizer(2, 3), std::invalid_argument);
}

TEST_CASE("hypercube cell distance statistics and worst-case bound") {
  auto spec = build_hypercube_quantizer(2, 2);
  auto prior = make_prior_spec(PriorFamily::UniformHypercube, 2);
  Batch z = sample_prior(prior, 20000, 21);
  auto r = hard_quantize(z, spec);
  double mean_dist = 0.0, max_dist = 0.0;
  for (std::int64_t i = 0; i < z.size(); ++i) {
    const double dx = z.data.at(i, 0) - r.embedded.at(i, 0);
    const double dy = z.data.at(i, 1) - r.embedded.at(i, 1);
    const double d = std::hypot(dx, dy);
    mean_dist += d;
    max_dist = std::max(max_dist, d);
  }
  mean_dist /= static_cast<double>(z.size());
  // Uniform in an edge-0.5 square around its center: 0.5 * 0.38259...
  CHECK(mean_dist == doctest::Approx(0.5 * 0.3825978582).epsilon(0.01));
  CHECK(max_dist <= std::sqrt(2.0) * std::pow(2.0, -1.0));

  for (std::int64_t m : {1, 2, 3}) {
    for (std::int64_t k = 1; k <= 3; ++k) {
      auto s = build_hypercube_quantizer(m, k * m);
      auto pr = make_prior_spec(PriorFamily::UniformHypercube, m);
      Batch zz = sample_prior(pr, 2000, 100 + static_cast<std::uint64_t>(m * 10 + k));
      auto rr = hard_quantize(zz, s);
      const double bound = std::sqrt(static_cast<double>(m)) *
                           std::pow(2.0, -static_cast<double>(k));
      for (std::int64_t i = 0; i < zz.size(); ++i) {
        double d2 = 0;
        for (std::int64_t j = 0; j < m; ++j) {
          const double diff = zz.data.at(i, j) - rr.embedded.at(i, j);
          d2 += diff * diff;
        }
        CHECK(std::sqrt(d2) <= bound);
      }
    }
  }
}

TEST_CASE("voronoi resampling: half-normal cell statistics") {
  auto spec = make_sign_corners_spec(1);
  auto prior = make_prior_spec(PriorFamily::StandardNormal, 1);
  VoronoiSampler sampler{spec, prior};
  Rng rng(31);
  const std::int64_t n = 30000;
  double mean = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    auto z = sampler.sample(1, rng);  // cell of center +1
    CHECK(z[0] >= 0.0);
    mean += z[0];
  }
  mean /= static_cast<double>(n);
  CHECK(std::abs(mean - std::sqrt(2.0 / M_PI)) < 0.01);
}

TEST_CASE("voronoi resampling: uniform-in-cube KS test") {
  auto spec = build_hypercube_quantizer(2, 2);
  auto prior = make_prior_spec(PriorFamily::UniformHypercube, 2);
  VoronoiSampler sampler{spec, prior};
  Rng rng(32);
  std::vector<double> xs, ys;
  for (int i = 0; i < 10000; ++i) {
    auto z = sampler.sample(0, rng);  // cell [0,0.5)^2
    CHECK(z[0] < 0.5);
    CHECK(z[1] < 0.5);
    xs.push_back(z[0]);
    ys.push_back(z[1]);
  }
  CHECK(ks_uniform_pvalue(xs, 0.0, 0.5) > 0.01);
  CHECK(ks_uniform_pvalue(ys, 0.0, 0.5) > 0.01);
}

TEST_CASE("quantize-then-resample preserves the prior distribution") {
  // F(X) := B(E(X)) ~ Z by construction: push prior draws through the
  // quantizer and the cell resampler, then run a two-sample MMD test.
  auto prior = make_prior_spec(PriorFamily::StandardNormal, 2);
  auto spec = make_sign_corners_spec(2);
  VoronoiSampler sampler{spec, prior};

  const std::int64_t n = 10000;
  Batch z = sample_prior(prior, n, 51);
  auto q = hard_quantize(z, spec);
  Tensor resampled({n, 2});
  Rng rng(52);
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<std::int64_t> bits = {q.indices[static_cast<std::size_t>(i * 2)],
                                      q.indices[static_cast<std::size_t>(i * 2 + 1)]};
    auto s = sampler.sample_sign_corners(bits, rng);
    resampled.at(i, 0) = s[0];
    resampled.at(i, 1) = s[1];
  }
  Batch fresh = sample_prior(prior, n, 53);
  auto kernel = make_kernel_spec(default_kernel_scale(2));
  auto test = blocked_mmd(fresh, Batch{resampled, Space::Z}, kernel, 500);
  CHECK(std::abs(test.mean) < 3.0 * test.std_error);
}

TEST_CASE("voronoi resampling rejects when the budget is exhausted") {
  auto spec = make_explicit_centers_spec(Tensor({2, 1}, {0.0, 100.0}));
  auto prior = make_prior_spec(PriorFamily::StandardNormal, 1);
  CHECK_THROWS_AS((void)voronoi_resample(spec, 1, prior, 0, 1000),
                  std::runtime_error);
  CHECK_THROWS_AS((void)voronoi_resample(spec, 7, prior, 0), std::invalid_argument);
}
