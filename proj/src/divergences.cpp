#include "dplc/divergences.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "dplc/rng.hpp"

namespace dplc {

KernelSpec make_kernel_spec(double scale_c) {
  if (scale_c <= 0.0) throw std::invalid_argument("KernelSpec: C must be > 0");
  return KernelSpec{scale_c};
}

double default_kernel_scale(std::int64_t latent_dim, double prior_variance) {
  if (latent_dim < 1) throw std::invalid_argument("default_kernel_scale: m >= 1");
  return 2.0 * static_cast<double>(latent_dim) * prior_variance;
}

double imq_kernel(const std::vector<double>& a, const std::vector<double>& b,
                  const KernelSpec& spec) {
  if (a.size() != b.size())
    throw std::invalid_argument("imq_kernel: dimension mismatch");
  if (spec.scale_c <= 0.0) throw std::invalid_argument("imq_kernel: C must be > 0");
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    d2 += d * d;
  }
  return spec.scale_c / (spec.scale_c + d2);
}

namespace {

MatrixRM imq_matrix(const ConstMatMap& a, const ConstMatMap& b, double c) {
  MatrixRM d2 = -2.0 * (a * b.transpose());
  Eigen::VectorXd an = a.rowwise().squaredNorm();
  Eigen::VectorXd bn = b.rowwise().squaredNorm();
  d2.colwise() += an;
  d2.rowwise() += bn.transpose();
  return (c / (d2.array() + c)).matrix();
}

void check_mmd_inputs(std::int64_t bz, std::int64_t bz2, std::int64_t dz,
                      std::int64_t dz2) {
  if (bz != bz2) throw std::invalid_argument("mmd_u_statistic: batch sizes differ");
  if (dz != dz2) throw std::invalid_argument("mmd_u_statistic: dimensions differ");
  if (bz < 2) throw std::invalid_argument("mmd_u_statistic: batch size must be >= 2");
}

}  // namespace

double mmd_u_statistic(const Batch& z, const Batch& z_bar, const KernelSpec& spec) {
  const std::int64_t b = z.size(), d = z.sample_dim();
  check_mmd_inputs(b, z_bar.size(), d, z_bar.sample_dim());
  ConstMatMap zm = as_matrix(z.data, b, d);
  ConstMatMap wm = as_matrix(z_bar.data, b, d);

  MatrixRM kzz = imq_matrix(zm, zm, spec.scale_c);
  MatrixRM kww = imq_matrix(wm, wm, spec.scale_c);
  MatrixRM kzw = imq_matrix(zm, wm, spec.scale_c);

  const double n = static_cast<double>(b);
  const double off_zz = kzz.sum() - kzz.trace();
  const double off_ww = kww.sum() - kww.trace();
  return off_zz / (n * (n - 1.0)) + off_ww / (n * (n - 1.0)) -
         2.0 * kzw.sum() / (n * n);
}

namespace {

using namespace ad;

Var imq_matrix_var(const Var& a, const Var& b, double c) {
  const std::int64_t n = a->value.shape[0];
  const std::int64_t m = b->value.shape[0];
  Var cross = matmul(a, transpose(b));
  Var an = broadcast_cols(row_sum(square(a)), m);
  Var bn = broadcast_rows(transpose(row_sum(square(b))), n);
  Var d2 = add(sub(an, scale(cross, 2.0)), bn);
  return scale(recip(add_scalar(d2, c)), c);
}

Var offdiag_sum(const Var& k) {
  const std::int64_t n = k->value.shape[0];
  auto diag_map = std::make_shared<std::vector<std::int64_t>>();
  diag_map->reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) diag_map->push_back(i * n + i);
  Var diag = gather(k, diag_map, {n, 1});
  return sub(sum_all(k), sum_all(diag));
}

}  // namespace

ad::Var mmd_u_statistic(const ad::Var& z, const ad::Var& z_bar,
                        const KernelSpec& spec) {
  check_mmd_inputs(z->value.shape[0], z_bar->value.shape[0], z->value.shape[1],
                   z_bar->value.shape[1]);
  const double n = static_cast<double>(z->value.shape[0]);
  Var kzz = imq_matrix_var(z, z, spec.scale_c);
  Var kww = imq_matrix_var(z_bar, z_bar, spec.scale_c);
  Var kzw = imq_matrix_var(z, z_bar, spec.scale_c);
  Var result = add(scale(add(offdiag_sum(kzz), offdiag_sum(kww)), 1.0 / (n * (n - 1.0))),
                   scale(sum_all(kzw), -2.0 / (n * n)));
  return result;
}

MmdTestResult blocked_mmd(const Batch& a, const Batch& b, const KernelSpec& spec,
                          std::int64_t block_size) {
  const std::int64_t n = std::min(a.size(), b.size());
  if (block_size < 2) throw std::invalid_argument("blocked_mmd: block_size >= 2");
  const std::int64_t blocks = n / block_size;
  if (blocks < 2)
    throw std::invalid_argument("blocked_mmd: need at least 2 full blocks");
  const std::int64_t d = a.sample_dim();
  if (d != b.sample_dim())
    throw std::invalid_argument("blocked_mmd: dimensions differ");

  MmdTestResult r;
  for (std::int64_t k = 0; k < blocks; ++k) {
    Tensor za({block_size, d});
    Tensor zb({block_size, d});
    std::copy(a.data.data.begin() + k * block_size * d,
              a.data.data.begin() + (k + 1) * block_size * d, za.data.begin());
    std::copy(b.data.data.begin() + k * block_size * d,
              b.data.data.begin() + (k + 1) * block_size * d, zb.data.begin());
    r.block_values.push_back(
        mmd_u_statistic(Batch{za, a.space}, Batch{zb, b.space}, spec));
  }
  double mean = 0.0;
  for (double v : r.block_values) mean += v;
  mean /= static_cast<double>(blocks);
  double var = 0.0;
  for (double v : r.block_values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(blocks - 1);
  r.mean = mean;
  r.std_error = std::sqrt(var / static_cast<double>(blocks));
  return r;
}

double bootstrap_std_error(const std::vector<double>& values,
                           std::int64_t replicates, std::uint64_t seed) {
  if (values.size() < 2)
    throw std::invalid_argument("bootstrap_std_error: need at least 2 values");
  Rng rng(derive_seed(seed, "bootstrap"));
  const std::int64_t n = static_cast<std::int64_t>(values.size());
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(replicates));
  for (std::int64_t r = 0; r < replicates; ++r) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      s += values[static_cast<std::size_t>(rng.uniform_int(n))];
    means.push_back(s / static_cast<double>(n));
  }
  double mu = 0.0;
  for (double v : means) mu += v;
  mu /= static_cast<double>(means.size());
  double var = 0.0;
  for (double v : means) var += (v - mu) * (v - mu);
  var /= static_cast<double>(means.size() - 1);
  return std::sqrt(var);
}

CriticLossParts critic_loss_with_nu(const ModelFn& critic, const Batch& x,
                                    const Batch& x_hat, double lambda_gp,
                                    const std::vector<double>& nu) {
  if (!x.data.same_shape(x_hat.data))
    throw std::invalid_argument("critic_loss: batch shapes differ");
  const std::int64_t b = x.size();
  if (static_cast<std::int64_t>(nu.size()) != b)
    throw std::invalid_argument("critic_loss: one interpolation coefficient per sample");
  const std::int64_t per = x.sample_dim();

  Tensor interp(x.data.shape);
  for (std::int64_t i = 0; i < b; ++i) {
    const double v = nu[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < per; ++j)
      interp[i * per + j] = v * x.data[i * per + j] + (1.0 - v) * x_hat.data[i * per + j];
  }

  ad::Var x_tilde = ad::leaf(std::move(interp));
  ad::Var f_tilde = critic(x_tilde);
  auto gx = ad::grad(ad::sum_all(f_tilde), {x_tilde}, /*create_graph=*/true);
  ad::Var flat = ad::reshape(gx[0], {b, per});
  ad::Var penalty = ad::mean_all(ad::square(ad::add_scalar(ad::row_norm(flat), -1.0)));

  ad::Var f_hat = critic(ad::constant(x_hat.data));
  ad::Var f_real = critic(ad::constant(x.data));
  ad::Var wasserstein = ad::sub(ad::mean_all(f_hat), ad::mean_all(f_real));

  CriticLossParts parts;
  parts.total = ad::add(wasserstein, ad::scale(penalty, lambda_gp));
  parts.wasserstein = wasserstein->value[0];
  parts.penalty = penalty->value[0];
  return parts;
}

CriticLossParts critic_loss(const ModelFn& critic, const Batch& x,
                            const Batch& x_hat, double lambda_gp,
                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, "critic.nu"));
  std::vector<double> nu(static_cast<std::size_t>(x.size()));
  for (auto& v : nu) v = rng.uniform();
  return critic_loss_with_nu(critic, x, x_hat, lambda_gp, nu);
}

ad::Var generator_adversarial_loss(const ModelFn& critic, const ad::Var& x_hat) {
  return ad::neg(ad::mean_all(critic(x_hat)));
}

GaussianStats embed_and_fit(const Batch& batch,
                            const std::function<Tensor(const Batch&)>& embedder) {
  if (batch.size() < 2)
    throw std::invalid_argument("embed_and_fit: need at least 2 samples");
  Tensor features = embedder ? embedder(batch)
                             : Tensor({batch.size(), batch.sample_dim()},
                                      batch.data.data);
  if (features.rank() != 2 || features.shape[0] != batch.size())
    throw std::invalid_argument("embed_and_fit: embedder must return (n, d)");
  const std::int64_t n = features.shape[0], d = features.shape[1];
  ConstMatMap fm = as_matrix(std::as_const(features));

  GaussianStats s;
  s.sample_count = n;
  s.mean = Tensor({1, d});
  Eigen::RowVectorXd mu = fm.colwise().mean();
  for (std::int64_t j = 0; j < d; ++j) s.mean[j] = mu[j];

  MatrixRM centered = fm.rowwise() - mu;
  MatrixRM cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.covariance = Tensor({d, d});
  for (std::int64_t i = 0; i < d; ++i)
    for (std::int64_t j = 0; j < d; ++j) s.covariance.at(i, j) = cov(i, j);
  return s;
}

double frechet_distance(const GaussianStats& s1, const GaussianStats& s2) {
  const std::int64_t d = s1.mean.shape[1];
  if (s2.mean.shape[1] != d)
    throw std::invalid_argument("frechet_distance: dimension mismatch");

  constexpr double kEigFloor = 1e-10;
  auto psd_sqrt = [&](const MatrixRM& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<MatrixRM> es(
        0.5 * (m + MatrixRM(m.transpose())));
    Eigen::VectorXd ev = es.eigenvalues();
    const double scale = std::max(1.0, std::abs(ev.maxCoeff()));
    for (std::int64_t i = 0; i < ev.size(); ++i) {
      if (ev[i] < -1e-6 * scale)
        throw std::runtime_error(std::string("frechet_distance: ") + what +
                                 " is not PSD after regularization");
      ev[i] = ev[i] < kEigFloor ? 0.0 : std::sqrt(ev[i]);
    }
    return MatrixRM(es.eigenvectors() * ev.asDiagonal() *
                    es.eigenvectors().transpose());
  };

  ConstMatMap c1 = as_matrix(s1.covariance);
  ConstMatMap c2 = as_matrix(s2.covariance);
  MatrixRM s1h = psd_sqrt(MatrixRM(c1), "covariance 1");
  // tr((S1 S2)^{1/2}) = tr((S1^{1/2} S2 S1^{1/2})^{1/2}) with a symmetric
  // inner matrix, which keeps the eigendecomposition real.
  MatrixRM inner = s1h * MatrixRM(c2) * s1h;
  MatrixRM inner_sqrt = psd_sqrt(inner, "product covariance");

  double mean_term = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    const double diff = s1.mean[j] - s2.mean[j];
    mean_term += diff * diff;
  }
  const double value = mean_term + c1.trace() + c2.trace() - 2.0 * inner_sqrt.trace();
  // Numerical jitter can leave a tiny negative residue for identical stats.
  return value < 0.0 && value > -1e-8 ? 0.0 : value;
}

}  // namespace dplc
