#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "dplc/autodiff.hpp"
#include "dplc/data.hpp"
#include "dplc/tensor.hpp"

namespace dplc {

enum class QuantMode {
  // One independent 1-bit quantizer per code dimension with the implicit
  // centers {-1, +1}; rate = number of code dimensions.
  SignCorners,
  // Arbitrary center set; one index per sample.
  ExplicitCenters,
  // Regular grid over [0,1]^m with 2^R cube centers; requires R = k*m.
  Hypercube,
};

struct CodeSpec {
  QuantMode mode = QuantMode::SignCorners;
  std::int64_t rate_bits = 0;  // R
  std::int64_t dim = 0;        // dimensionality of the embedding space
  // Explicit centers, (count, dim) row-major; empty in sign-corners mode.
  Tensor centers;

  std::int64_t center_count() const {
    if (mode != QuantMode::SignCorners) return centers.shape[0];
    if (rate_bits >= 62) return std::numeric_limits<std::int64_t>::max();
    return std::int64_t{1} << rate_bits;
  }
};

CodeSpec make_sign_corners_spec(std::int64_t dims);
CodeSpec make_explicit_centers_spec(Tensor centers);

/// 2^R cube centers over [0,1]^m in dimension-major (dim 0 most significant)
/// order; R must be divisible by m.
CodeSpec build_hypercube_quantizer(std::int64_t m, std::int64_t rate_bits);

struct QuantizationResult {
  // (b, sites) integer codes; sites == dim for sign-corners (one bit per
  // dimension, 0 -> -1, 1 -> +1), 1 otherwise.
  std::vector<std::int64_t> indices;
  std::int64_t sites = 1;
  // (b, dim) embedded center values; equals centers[index] exactly.
  Tensor embedded;
  // Straight-through surrogate: forward value is `embedded` bit-exactly,
  // backward follows the temperature-tau softmax center average. Only
  // populated by soft_quantize.
  ad::Var surrogate;
};

/// Nearest-center assignment under the Euclidean norm; equidistant ties break
/// to the lowest center index.
QuantizationResult hard_quantize(const Batch& z, const CodeSpec& spec);

/// Same forward values as hard_quantize plus a differentiable surrogate.
QuantizationResult soft_quantize(const ad::Var& z, const CodeSpec& spec,
                                 double temperature);

/// The softmax-weighted center average behind the surrogate's backward pass,
/// exposed for oracle tests.
ad::Var soft_center_average(const ad::Var& z, const CodeSpec& spec,
                            double temperature);

/// Code bits divided by pixel count. Bits = product of code dims (one bit per
/// sign-corner site); an empty code (a zero dimension) carries 0 bits.
double bitrate_bpp(const Shape& code_dims, const Shape& data_dims);

/// Lloyd iterations from k-means++ seeding; stops after `max_iters` rounds or
/// when the relative improvement of the mean quantization error drops below
/// `tol`. Centers are pairwise distinct on exit.
CodeSpec fit_centers(const Batch& prior_samples, std::int64_t count,
                     std::uint64_t seed, std::int64_t max_iters = 100,
                     double tol = 1e-6,
                     std::vector<double>* objective_trace = nullptr);

/// Mean Euclidean distance to the assigned center (the Lloyd objective).
double quantization_error(const Batch& samples, const CodeSpec& spec);

/// Draw from the prior conditioned on Voronoi cell i: rejection sampling with
/// a proposal cap (default 10^6), or direct in-cube sampling for the
/// hypercube construction. Sign-corners draws use per-dimension half-space
/// sampling when the prior factorizes.
struct VoronoiSampler {
  CodeSpec spec;
  PriorSpec prior;
  std::int64_t max_proposals = 1000000;

  std::vector<double> sample(std::int64_t cell_index, Rng& rng) const;
  std::vector<double> sample_sign_corners(const std::vector<std::int64_t>& bits,
                                          Rng& rng) const;
};

std::vector<double> voronoi_resample(const CodeSpec& spec, std::int64_t cell_index,
                                     const PriorSpec& prior, std::uint64_t seed,
                                     std::int64_t max_proposals = 1000000);

}  // namespace dplc
