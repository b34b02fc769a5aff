#pragma once

#include <cstdint>
#include <functional>

#include "dplc/autodiff.hpp"
#include "dplc/data.hpp"
#include "dplc/tensor.hpp"

namespace dplc {

// Inverse multiquadratics kernel k(a,b) = C / (C + ||a-b||^2).
struct KernelSpec {
  double scale_c = 2.0;
};

KernelSpec make_kernel_spec(double scale_c);

/// Default kernel scale heuristic: C = 2 * m * sigma_z^2.
double default_kernel_scale(std::int64_t latent_dim, double prior_variance = 1.0);

double imq_kernel(const std::vector<double>& a, const std::vector<double>& b,
                  const KernelSpec& spec);

/// Unbiased MMD^2 U-statistic between two equally sized batches (b >= 2):
///   1/(b(b-1)) sum_{l != j} k(z_l, z_j) + 1/(b(b-1)) sum_{l != j} k(zb_l, zb_j)
///   - 2/b^2 sum_{l,j} k(z_l, zb_j).
/// May be negative.
double mmd_u_statistic(const Batch& z, const Batch& z_bar, const KernelSpec& spec);

/// Differentiable MMD U-statistic for training paths.
ad::Var mmd_u_statistic(const ad::Var& z, const ad::Var& z_bar,
                        const KernelSpec& spec);

// Disjoint-block MMD estimate with a standard error, for two-sample tests at
// sizes where the full b x b kernel matrix is not worth materializing. The
// mean of per-block U-statistics is an unbiased estimate of MMD^2.
struct MmdTestResult {
  double mean = 0.0;
  double std_error = 0.0;
  std::vector<double> block_values;
};

MmdTestResult blocked_mmd(const Batch& a, const Batch& b, const KernelSpec& spec,
                          std::int64_t block_size = 500);

/// Bootstrap standard error of the mean of `values` (resampling with
/// replacement, `replicates` rounds).
double bootstrap_std_error(const std::vector<double>& values,
                           std::int64_t replicates, std::uint64_t seed);

// Models enter divergence computations as differentiable batch maps.
using ModelFn = std::function<ad::Var(const ad::Var&)>;

struct CriticLossParts {
  ad::Var total;        // wasserstein + lambda_gp * penalty
  double wasserstein;   // mean f(x_hat) - mean f(x)
  double penalty;       // mean (||grad f(x_tilde)|| - 1)^2
};

/// WGAN-GP critic loss with per-sample interpolation coefficients nu drawn
/// from the given seed. The penalty differentiates through the critic's
/// input gradient, so the returned Var supports second-order training.
CriticLossParts critic_loss(const ModelFn& critic, const Batch& x,
                            const Batch& x_hat, double lambda_gp,
                            std::uint64_t seed);

/// Same loss with caller-supplied interpolation coefficients (one per sample).
CriticLossParts critic_loss_with_nu(const ModelFn& critic, const Batch& x,
                                    const Batch& x_hat, double lambda_gp,
                                    const std::vector<double>& nu);

/// Generator-side adversarial loss: -mean f(x_hat), differentiable through
/// x_hat into the generator parameters.
ad::Var generator_adversarial_loss(const ModelFn& critic, const ad::Var& x_hat);

// Gaussian fit of an embedded sample set, for the Frechet surrogate metric.
struct GaussianStats {
  Tensor mean;        // (1, d)
  Tensor covariance;  // (d, d), symmetric
  std::int64_t sample_count = 0;
};

/// Fit mean and covariance (n-1 divisor) of the embedded batch; identity
/// embedder = flattened raw samples.
GaussianStats embed_and_fit(const Batch& batch,
                            const std::function<Tensor(const Batch&)>& embedder = {});

/// Frechet distance ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}). The matrix
/// square root uses symmetric eigendecompositions with a 1e-10 eigenvalue
/// floor.
double frechet_distance(const GaussianStats& s1, const GaussianStats& s2);

}  // namespace dplc
