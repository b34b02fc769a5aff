#include "dplc/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "dplc/imageio.hpp"

namespace dplc {

Batch make_batch(Tensor data, Space space) {
  if (data.shape.empty() || data.shape[0] < 1)
    throw std::invalid_argument("Batch: batch size must be >= 1");
  if (!data.all_finite())
    throw std::invalid_argument("Batch: NaN/Inf entries are not allowed");
  return Batch{std::move(data), space};
}

PriorSpec make_prior_spec(PriorFamily family, std::int64_t dimension) {
  if (dimension < 1)
    throw std::invalid_argument("PriorSpec: dimension must be >= 1");
  return PriorSpec{family, dimension};
}

NoiseSpec make_noise_spec(std::int64_t dimension) {
  if (dimension < 1)
    throw std::invalid_argument("NoiseSpec: dimension must be >= 1");
  return NoiseSpec{dimension};
}

Batch sample_prior(const PriorSpec& spec, std::int64_t b, std::uint64_t seed) {
  if (spec.dimension < 1)
    throw std::invalid_argument("sample_prior: dimension must be >= 1");
  if (b < 1) throw std::invalid_argument("sample_prior: b must be >= 1");
  Tensor t({b, spec.dimension});
  Rng rng(derive_seed(seed, "prior"));
  if (spec.family == PriorFamily::StandardNormal)
    rng.fill_normal(t.data.data(), t.numel());
  else
    rng.fill_uniform(t.data.data(), t.numel());
  return make_batch(std::move(t), Space::Z);
}

Batch sample_noise(const NoiseSpec& spec, std::int64_t b, std::uint64_t seed) {
  if (spec.dimension < 1)
    throw std::invalid_argument("sample_noise: dimension must be >= 1");
  if (b < 1) throw std::invalid_argument("sample_noise: b must be >= 1");
  Tensor t({b, spec.dimension});
  Rng rng(derive_seed(seed, "noise"));
  rng.fill_uniform(t.data.data(), t.numel());
  return make_batch(std::move(t), Space::Z);
}

GaussianMixtureParams gaussian_ring_params(int components, double radius,
                                           double sigma) {
  if (components < 1)
    throw std::invalid_argument("gaussian_ring_params: components >= 1");
  GaussianMixtureParams p;
  for (int i = 0; i < components; ++i) {
    const double angle = 2.0 * M_PI * i / components;
    p.means.push_back({radius * std::cos(angle), radius * std::sin(angle)});
    p.weights.push_back(1.0 / components);
    p.variances.push_back({sigma * sigma, sigma * sigma});
  }
  return p;
}

namespace {

void validate_mixture(const GaussianMixtureParams& p) {
  if (p.means.empty()) throw std::invalid_argument("mixture: no components");
  if (p.means.size() != p.weights.size() || p.means.size() != p.variances.size())
    throw std::invalid_argument("mixture: means/weights/variances sizes differ");
  const std::size_t d = p.means[0].size();
  double wsum = 0.0;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    if (p.weights[i] < 0.0)
      throw std::invalid_argument("mixture: weights must be nonnegative");
    wsum += p.weights[i];
    if (p.means[i].size() != d || p.variances[i].size() != d)
      throw std::invalid_argument("mixture: inconsistent component dimensions");
    for (double v : p.variances[i])
      if (v < 0.0) throw std::invalid_argument("mixture: negative variance");
  }
  if (std::abs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument("mixture: weights must sum to 1");
}

std::size_t pick_component(const std::vector<double>& weights, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace

DatasetHandle make_gaussian_mixture_dataset(const GaussianMixtureParams& params,
                                            std::int64_t n, std::uint64_t seed) {
  validate_mixture(params);
  if (n < 1) throw std::invalid_argument("make_gaussian_mixture_dataset: n >= 1");
  const std::int64_t d = static_cast<std::int64_t>(params.means[0].size());

  DatasetHandle h;
  h.kind_ = DatasetKind::GaussianMixture;
  h.mixture_ = params;
  h.seed_ = seed;
  h.samples_ = Tensor({n, d});
  Rng rng(derive_seed(seed, "dataset.mixture"));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t c = pick_component(params.weights, rng.uniform());
    for (std::int64_t j = 0; j < d; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      h.samples_.at(i, j) =
          params.means[c][ju] + std::sqrt(params.variances[c][ju]) * rng.normal();
    }
  }
  h.reshuffle();
  return h;
}

DatasetHandle make_rings_dataset(const RingsParams& params, std::int64_t n,
                                 std::uint64_t seed) {
  if (params.radii.empty() || params.radii.size() != params.weights.size())
    throw std::invalid_argument("make_rings_dataset: radii/weights mismatch");
  double wsum = std::accumulate(params.weights.begin(), params.weights.end(), 0.0);
  if (std::abs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument("make_rings_dataset: weights must sum to 1");
  if (n < 1) throw std::invalid_argument("make_rings_dataset: n >= 1");

  DatasetHandle h;
  h.kind_ = DatasetKind::Rings;
  h.seed_ = seed;
  h.samples_ = Tensor({n, 2});
  Rng rng(derive_seed(seed, "dataset.rings"));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t c = pick_component(params.weights, rng.uniform());
    const double r = params.radii[c] + params.sigma * rng.normal();
    const double a = rng.uniform(0.0, 2.0 * M_PI);
    h.samples_.at(i, 0) = r * std::cos(a);
    h.samples_.at(i, 1) = r * std::sin(a);
  }
  h.reshuffle();
  return h;
}

DatasetHandle load_image_dataset(const std::string& path, std::int64_t resolution,
                                 std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (resolution < 1)
    throw std::invalid_argument("load_image_dataset: resolution must be >= 1");
  if (!fs::exists(path) || !fs::is_directory(path))
    throw std::runtime_error("load_image_dataset: no such directory: " + path);

  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(path)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
      files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw std::runtime_error("load_image_dataset: no PNG/JPEG files in " + path);

  std::vector<Tensor> images;
  for (const auto& f : files) {
    try {
      images.push_back(load_image_chw(f, resolution));
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping undecodable image " << f << ": " << e.what()
                << "\n";
    }
  }
  if (images.empty())
    throw std::runtime_error("load_image_dataset: all files undecodable in " + path);

  const std::int64_t n = static_cast<std::int64_t>(images.size());
  DatasetHandle h;
  h.kind_ = DatasetKind::ImageFolder;
  h.seed_ = seed;
  h.samples_ = Tensor({n, 3, resolution, resolution});
  const std::int64_t per = 3 * resolution * resolution;
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(images[static_cast<std::size_t>(i)].data.begin(),
              images[static_cast<std::size_t>(i)].data.end(),
              h.samples_.data.begin() + i * per);
  h.reshuffle();
  return h;
}

Shape DatasetHandle::sample_shape() const {
  return Shape(samples_.shape.begin() + 1, samples_.shape.end());
}

void DatasetHandle::reshuffle() {
  const std::int64_t n = size();
  order_.resize(static_cast<std::size_t>(n));
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(derive_seed(seed_, "dataset.shuffle", static_cast<std::uint64_t>(epoch_)));
  rng.shuffle(order_);
  cursor_ = 0;
}

void DatasetHandle::reset_cursor() {
  epoch_ = 0;
  emitted_.clear();
  reshuffle();
}

Batch DatasetHandle::next_batch(std::int64_t b) {
  if (b < 1) throw std::invalid_argument("next_batch: b must be >= 1");
  const std::int64_t n = size();
  const std::int64_t per = samples_.numel() / n;
  Shape out_shape = samples_.shape;
  out_shape[0] = b;
  Tensor out(out_shape);
  for (std::int64_t i = 0; i < b; ++i) {
    if (cursor_ >= n) {
      ++epoch_;
      reshuffle();
    }
    const std::int64_t src = order_[static_cast<std::size_t>(cursor_++)];
    emitted_.push_back(src);
    std::copy(samples_.data.begin() + src * per,
              samples_.data.begin() + (src + 1) * per, out.data.begin() + i * per);
  }
  return make_batch(std::move(out), Space::X);
}

Batch DatasetHandle::head(std::int64_t n) const {
  if (n < 1 || n > size())
    throw std::invalid_argument("DatasetHandle::head: n out of range");
  const std::int64_t per = samples_.numel() / size();
  Shape out_shape = samples_.shape;
  out_shape[0] = n;
  Tensor out(out_shape);
  std::copy(samples_.data.begin(), samples_.data.begin() + n * per,
            out.data.begin());
  return Batch{std::move(out), Space::X};
}

std::pair<DatasetHandle, DatasetHandle> split_dataset(const DatasetHandle& d,
                                                      double test_fraction,
                                                      std::uint64_t seed) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw std::invalid_argument("split_dataset: test_fraction must be in (0,1)");
  const std::int64_t n = d.size();
  std::int64_t n_test = static_cast<std::int64_t>(std::floor(n * test_fraction));
  n_test = std::max<std::int64_t>(1, std::min(n_test, n - 1));
  const std::int64_t n_train = n - n_test;
  const std::int64_t per = d.samples_.numel() / n;

  auto carve = [&](std::int64_t start, std::int64_t count, std::uint64_t s) {
    DatasetHandle h;
    h.kind_ = d.kind_;
    h.mixture_ = d.mixture_;
    h.seed_ = s;
    Shape shape = d.samples_.shape;
    shape[0] = count;
    h.samples_ = Tensor(shape);
    std::copy(d.samples_.data.begin() + start * per,
              d.samples_.data.begin() + (start + count) * per,
              h.samples_.data.begin());
    h.reshuffle();
    return h;
  };
  return {carve(0, n_train, derive_seed(seed, "split.train")),
          carve(n_train, n_test, derive_seed(seed, "split.test"))};
}

}  // namespace dplc
