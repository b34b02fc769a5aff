#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dplc/rng.hpp"
#include "dplc/tensor.hpp"

namespace dplc {

enum class Space { X, Z, Code };

// A finite sample batch. Row 0 of `data` is the batch axis; vector batches
// are (b, d), image batches (b, c, h, w). Construction rejects NaN/Inf.
struct Batch {
  Tensor data;
  Space space = Space::X;

  std::int64_t size() const { return data.shape.empty() ? 0 : data.shape[0]; }
  std::int64_t sample_dim() const { return size() == 0 ? 0 : data.numel() / size(); }
};

Batch make_batch(Tensor data, Space space);

enum class PriorFamily { StandardNormal, UniformHypercube };

struct PriorSpec {
  PriorFamily family = PriorFamily::StandardNormal;
  std::int64_t dimension = 1;
};

PriorSpec make_prior_spec(PriorFamily family, std::int64_t dimension);

// Decoder noise: i.i.d. Uniform[0,1] entries, dimension m.
struct NoiseSpec {
  std::int64_t dimension = 1;
};

NoiseSpec make_noise_spec(std::int64_t dimension);

Batch sample_prior(const PriorSpec& spec, std::int64_t b, std::uint64_t seed);
Batch sample_noise(const NoiseSpec& spec, std::int64_t b, std::uint64_t seed);

// ---- datasets ----

enum class DatasetKind { GaussianMixture, Rings, ImageFolder };

struct GaussianMixtureParams {
  std::vector<std::vector<double>> means;       // one entry per component
  std::vector<double> weights;                  // nonnegative, sum to 1
  std::vector<std::vector<double>> variances;   // per-component diagonal
};

/// Mixture of `components` isotropic Gaussians with means equally spaced on a
/// circle of the given radius. The default synthetic benchmark.
GaussianMixtureParams gaussian_ring_params(int components, double radius,
                                           double sigma);

struct RingsParams {
  std::vector<double> radii;
  std::vector<double> weights;
  double sigma = 0.1;  // radial jitter
};

// Materialized dataset with a deterministic shuffled cursor. Batching wraps
// around epoch boundaries, reshuffling with an advanced per-epoch seed, so
// batch shapes are stable regardless of the dataset size.
class DatasetHandle {
 public:
  DatasetKind kind() const { return kind_; }
  std::int64_t size() const { return samples_.shape[0]; }
  Shape sample_shape() const;
  const Tensor& samples() const { return samples_; }

  /// Next b samples under deterministic shuffling. Not safe for concurrent
  /// use on one handle; the cursor is single-owner.
  Batch next_batch(std::int64_t b);

  /// Rows [0, n) in storage order, without touching the cursor.
  Batch head(std::int64_t n) const;

  void reset_cursor();

  /// Ground-truth generator parameters, retained for oracle tests.
  const GaussianMixtureParams* mixture_params() const {
    return kind_ == DatasetKind::GaussianMixture ? &mixture_ : nullptr;
  }

  /// Sequence of sample indices emitted so far (for batching-contract tests).
  const std::vector<std::int64_t>& emitted_indices() const { return emitted_; }

  friend DatasetHandle make_gaussian_mixture_dataset(const GaussianMixtureParams&,
                                                     std::int64_t, std::uint64_t);
  friend DatasetHandle make_rings_dataset(const RingsParams&, std::int64_t,
                                          std::uint64_t);
  friend DatasetHandle load_image_dataset(const std::string& path,
                                          std::int64_t resolution,
                                          std::uint64_t seed);
  friend std::pair<DatasetHandle, DatasetHandle> split_dataset(
      const DatasetHandle& d, double test_fraction, std::uint64_t seed);

 private:
  DatasetHandle() = default;
  void reshuffle();

  DatasetKind kind_ = DatasetKind::GaussianMixture;
  Tensor samples_;
  GaussianMixtureParams mixture_;
  std::uint64_t seed_ = 0;
  std::int64_t epoch_ = 0;
  std::int64_t cursor_ = 0;
  std::vector<std::int64_t> order_;
  std::vector<std::int64_t> emitted_;
};

DatasetHandle make_gaussian_mixture_dataset(const GaussianMixtureParams& params,
                                            std::int64_t n, std::uint64_t seed);
DatasetHandle make_rings_dataset(const RingsParams& params, std::int64_t n,
                                 std::uint64_t seed);

/// Flat folder of PNG/JPEG files -> center-cropped, bilinearly resized,
/// [-1,1]-normalized (b, 3, res, res) samples. Undecodable files are skipped
/// with a warning; an empty result is an error.
DatasetHandle load_image_dataset(const std::string& path, std::int64_t resolution,
                                 std::uint64_t seed);

/// Split into train/test by held-out fraction (test takes the trailing rows
/// of the storage order).
std::pair<DatasetHandle, DatasetHandle> split_dataset(const DatasetHandle& d,
                                                      double test_fraction,
                                                      std::uint64_t seed);

}  // namespace dplc
