#include "dplc/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <stdexcept>

namespace dplc {

namespace {

void check_dim(const CodeSpec& spec, std::int64_t dim, const char* op) {
  if (spec.dim != dim)
    throw std::invalid_argument(std::string(op) + ": sample dimension " +
                                std::to_string(dim) + " does not match code space " +
                                std::to_string(spec.dim));
}

/// Squared distances (n, K) between rows of a (n,d) and rows of c (K,d).
MatrixRM pairwise_sqdist(const ConstMatMap& a, const ConstMatMap& c) {
  MatrixRM d2 = -2.0 * (a * c.transpose());
  Eigen::VectorXd an = a.rowwise().squaredNorm();
  Eigen::VectorXd cn = c.rowwise().squaredNorm();
  d2.colwise() += an;
  d2.rowwise() += cn.transpose();
  return d2;
}

std::int64_t argmin_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::int64_t best = 0;
  double bestv = row[0];
  for (std::int64_t j = 1; j < row.size(); ++j) {
    if (row[j] < bestv) {
      bestv = row[j];
      best = j;
    }
  }
  return best;
}

std::int64_t per_dim_cells(const CodeSpec& spec) {
  // Hypercube: k bits per dimension.
  return std::int64_t{1} << (spec.rate_bits / spec.dim);
}

}  // namespace

CodeSpec make_sign_corners_spec(std::int64_t dims) {
  if (dims < 0) throw std::invalid_argument("make_sign_corners_spec: dims >= 0");
  CodeSpec s;
  s.mode = QuantMode::SignCorners;
  s.rate_bits = dims;
  s.dim = dims;
  return s;
}

CodeSpec make_explicit_centers_spec(Tensor centers) {
  if (centers.rank() != 2 || centers.shape[0] < 1)
    throw std::invalid_argument("make_explicit_centers_spec: centers must be (K,d)");
  const std::int64_t k = centers.shape[0];
  // Pairwise distinct.
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = i + 1; j < k; ++j) {
      bool same = true;
      for (std::int64_t d = 0; d < centers.shape[1] && same; ++d)
        same = centers.at(i, d) == centers.at(j, d);
      if (same)
        throw std::invalid_argument("make_explicit_centers_spec: duplicate centers");
    }
  CodeSpec s;
  s.mode = QuantMode::ExplicitCenters;
  s.dim = centers.shape[1];
  s.rate_bits = static_cast<std::int64_t>(std::ceil(std::log2(static_cast<double>(k))));
  s.centers = std::move(centers);
  return s;
}

CodeSpec build_hypercube_quantizer(std::int64_t m, std::int64_t rate_bits) {
  if (m < 1) throw std::invalid_argument("build_hypercube_quantizer: m >= 1");
  if (rate_bits < 1 || rate_bits % m != 0)
    throw std::invalid_argument(
        "build_hypercube_quantizer: rate must be a positive multiple of m");
  const std::int64_t k = rate_bits / m;
  const std::int64_t cells = std::int64_t{1} << k;
  const std::int64_t count = std::int64_t{1} << rate_bits;

  CodeSpec s;
  s.mode = QuantMode::Hypercube;
  s.dim = m;
  s.rate_bits = rate_bits;
  s.centers = Tensor({count, m});
  // Dimension-major order: dimension 0 is the most significant digit.
  for (std::int64_t i = 0; i < count; ++i) {
    std::int64_t rem = i;
    for (std::int64_t d = m - 1; d >= 0; --d) {
      const std::int64_t cell = rem % cells;
      rem /= cells;
      s.centers.at(i, d) = (static_cast<double>(cell) + 0.5) / static_cast<double>(cells);
    }
  }
  return s;
}

QuantizationResult hard_quantize(const Batch& z, const CodeSpec& spec) {
  const std::int64_t b = z.size();
  const std::int64_t d = z.sample_dim();
  check_dim(spec, d, "hard_quantize");
  ConstMatMap zm = as_matrix(z.data, b, d);

  QuantizationResult r;
  r.embedded = Tensor({b, d});

  switch (spec.mode) {
    case QuantMode::SignCorners: {
      r.sites = d;
      r.indices.resize(static_cast<std::size_t>(b * d));
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
          // Tie at 0 resolves to the lower center index, i.e. -1.
          const bool plus = zm(i, j) > 0.0;
          r.indices[static_cast<std::size_t>(i * d + j)] = plus ? 1 : 0;
          r.embedded.at(i, j) = plus ? 1.0 : -1.0;
        }
      break;
    }
    case QuantMode::Hypercube: {
      r.sites = 1;
      r.indices.resize(static_cast<std::size_t>(b));
      const std::int64_t cells = per_dim_cells(spec);
      for (std::int64_t i = 0; i < b; ++i) {
        std::int64_t index = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          const double u = zm(i, j) * static_cast<double>(cells);
          std::int64_t cell = static_cast<std::int64_t>(std::floor(u));
          // Exact boundaries are equidistant between neighboring centers;
          // take the lower cell.
          if (u == std::floor(u) && cell > 0) cell -= 1;
          cell = std::clamp<std::int64_t>(cell, 0, cells - 1);
          index = index * cells + cell;
          r.embedded.at(i, j) =
              (static_cast<double>(cell) + 0.5) / static_cast<double>(cells);
        }
        r.indices[static_cast<std::size_t>(i)] = index;
      }
      break;
    }
    case QuantMode::ExplicitCenters: {
      r.sites = 1;
      r.indices.resize(static_cast<std::size_t>(b));
      ConstMatMap cm = as_matrix(spec.centers);
      MatrixRM d2 = pairwise_sqdist(zm, cm);
      for (std::int64_t i = 0; i < b; ++i) {
        const std::int64_t idx = argmin_lowest(d2.row(i));
        r.indices[static_cast<std::size_t>(i)] = idx;
        for (std::int64_t j = 0; j < d; ++j) r.embedded.at(i, j) = cm(idx, j);
      }
      break;
    }
  }
  return r;
}

ad::Var soft_center_average(const ad::Var& z, const CodeSpec& spec,
                            double temperature) {
  using namespace ad;
  if (temperature <= 0.0)
    throw std::invalid_argument("soft_center_average: temperature must be > 0");
  const std::int64_t d = z->value.shape[1];
  check_dim(spec, d, "soft_center_average");

  if (spec.mode == QuantMode::SignCorners) {
    // Per-dimension two-center softmax average collapses to tanh(2z/tau).
    return tanh_(scale(z, 2.0 / temperature));
  }
  // General case: softmax(-||z - c_i||^2 / tau) weighted center average.
  Var centers = constant(spec.centers);
  const std::int64_t kc = spec.centers.shape[0];
  Var cross = matmul(z, transpose(centers));                   // (n,K)
  Var zn = broadcast_cols(row_sum(square(z)), kc);             // (n,K)
  Tensor cn({1, kc});
  for (std::int64_t i = 0; i < kc; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < d; ++j) s += spec.centers.at(i, j) * spec.centers.at(i, j);
    cn[i] = s;
  }
  Var d2 = add(sub(zn, scale(cross, 2.0)),
               broadcast_rows(constant(cn), z->value.shape[0]));
  Var weights = softmax_rows(scale(d2, -1.0 / temperature));
  return matmul(weights, centers);
}

QuantizationResult soft_quantize(const ad::Var& z, const CodeSpec& spec,
                                 double temperature) {
  if (temperature <= 0.0)
    throw std::invalid_argument("soft_quantize: temperature must be > 0");
  Batch zb{z->value, Space::Z};
  QuantizationResult r = hard_quantize(zb, spec);
  ad::Var soft = soft_center_average(z, spec, temperature);
  r.surrogate = ad::value_override(r.embedded, soft);
  return r;
}

double bitrate_bpp(const Shape& code_dims, const Shape& data_dims) {
  if (code_dims.empty() || data_dims.empty())
    throw std::invalid_argument("bitrate_bpp: empty shape");
  double bits = 1.0;
  for (auto d : code_dims) {
    if (d < 0) throw std::invalid_argument("bitrate_bpp: negative code dim");
    bits *= static_cast<double>(d);
  }
  double pixels = 1.0;
  for (auto d : data_dims) {
    if (d <= 0) throw std::invalid_argument("bitrate_bpp: nonpositive data dim");
    pixels *= static_cast<double>(d);
  }
  return bits / pixels;
}

double quantization_error(const Batch& samples, const CodeSpec& spec) {
  QuantizationResult r = hard_quantize(samples, spec);
  const std::int64_t b = samples.size(), d = samples.sample_dim();
  ConstMatMap zm = as_matrix(samples.data, b, d);
  ConstMatMap em = as_matrix(std::as_const(r.embedded));
  return (zm - em).rowwise().norm().mean();
}

CodeSpec fit_centers(const Batch& prior_samples, std::int64_t count,
                     std::uint64_t seed, std::int64_t max_iters, double tol,
                     std::vector<double>* objective_trace) {
  const std::int64_t n = prior_samples.size();
  const std::int64_t d = prior_samples.sample_dim();
  if (count < 1) throw std::invalid_argument("fit_centers: count >= 1");
  if (n < count)
    throw std::invalid_argument("fit_centers: fewer samples than centers");
  ConstMatMap xm = as_matrix(prior_samples.data, n, d);

  Rng rng(derive_seed(seed, "fit_centers"));
  MatrixRM centers(count, d);

  // k-means++ seeding.
  {
    const std::int64_t first = rng.uniform_int(n);
    centers.row(0) = xm.row(first);
    Eigen::VectorXd mind2 =
        (xm.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (std::int64_t c = 1; c < count; ++c) {
      const double total = mind2.sum();
      std::int64_t pick = 0;
      if (total > 0.0) {
        double u = rng.uniform() * total;
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          acc += mind2[i];
          if (u < acc) {
            pick = i;
            break;
          }
        }
      } else {
        pick = rng.uniform_int(n);
      }
      centers.row(c) = xm.row(pick);
      mind2 = mind2.cwiseMin(
          (xm.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }
  }

  std::vector<std::int64_t> assign(static_cast<std::size_t>(n));
  double prev_obj = std::numeric_limits<double>::infinity();
  for (std::int64_t iter = 0; iter < max_iters; ++iter) {
    MatrixRM d2 = pairwise_sqdist(ConstMatMap(xm.data(), n, d),
                                  ConstMatMap(centers.data(), count, d));
    double obj = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t a = argmin_lowest(d2.row(i));
      assign[static_cast<std::size_t>(i)] = a;
      obj += d2(i, a);
    }
    obj /= static_cast<double>(n);
    if (objective_trace) objective_trace->push_back(obj);

    MatrixRM sums = MatrixRM::Zero(count, d);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(count);
    for (std::int64_t i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += xm.row(i);
      counts[assign[static_cast<std::size_t>(i)]] += 1.0;
    }
    for (std::int64_t c = 0; c < count; ++c) {
      if (counts[c] > 0.0) {
        centers.row(c) = sums.row(c) / counts[c];
      } else {
        // Re-seed an empty cell at the point farthest from its center.
        std::int64_t far = 0;
        double fard = -1.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const double dist = d2(i, assign[static_cast<std::size_t>(i)]);
          if (dist > fard) {
            fard = dist;
            far = i;
          }
        }
        centers.row(c) = xm.row(far);
      }
    }

    if (std::isfinite(prev_obj) && prev_obj > 0.0 &&
        (prev_obj - obj) / prev_obj < tol)
      break;
    prev_obj = obj;
  }

  Tensor ct({count, d});
  for (std::int64_t c = 0; c < count; ++c)
    for (std::int64_t j = 0; j < d; ++j) ct.at(c, j) = centers(c, j);

  // Nudge exact duplicates apart so the spec invariant (pairwise distinct)
  // holds even on degenerate inputs.
  for (std::int64_t i = 0; i < count; ++i)
    for (std::int64_t j = i + 1; j < count; ++j) {
      bool same = true;
      for (std::int64_t kd = 0; kd < d && same; ++kd)
        same = ct.at(i, kd) == ct.at(j, kd);
      if (same) ct.at(j, 0) = std::nextafter(ct.at(j, 0), std::numeric_limits<double>::max());
    }

  CodeSpec s;
  s.mode = QuantMode::ExplicitCenters;
  s.dim = d;
  s.rate_bits = static_cast<std::int64_t>(
      std::ceil(std::log2(static_cast<double>(count))));
  s.centers = std::move(ct);
  return s;
}

std::vector<double> VoronoiSampler::sample_sign_corners(
    const std::vector<std::int64_t>& bits, Rng& rng) const {
  if (static_cast<std::int64_t>(bits.size()) != spec.dim)
    throw std::invalid_argument("voronoi_resample: bit vector length mismatch");
  std::vector<double> z(static_cast<std::size_t>(spec.dim));
  if (prior.family == PriorFamily::StandardNormal) {
    // Orthant conditionals factorize into half-normals.
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double mag = std::abs(rng.normal());
      z[j] = bits[j] ? mag : -mag;
    }
    return z;
  }
  // Generic rejection against the per-dimension sign cells.
  for (std::int64_t attempt = 0; attempt < max_proposals; ++attempt) {
    bool ok = true;
    for (std::size_t j = 0; j < z.size() && ok; ++j) {
      z[j] = rng.uniform();
      ok = (z[j] > 0.0) == (bits[j] == 1);
    }
    if (ok) return z;
  }
  throw std::runtime_error("voronoi_resample: proposal budget exhausted");
}

std::vector<double> VoronoiSampler::sample(std::int64_t cell_index, Rng& rng) const {
  if (cell_index < 0 || cell_index >= spec.center_count())
    throw std::invalid_argument("voronoi_resample: cell index out of range");
  const std::int64_t m = spec.dim;

  if (spec.mode == QuantMode::SignCorners) {
    std::vector<std::int64_t> bits(static_cast<std::size_t>(m));
    for (std::int64_t j = m - 1; j >= 0; --j) {
      bits[static_cast<std::size_t>(j)] = cell_index & 1;
      cell_index >>= 1;
    }
    return sample_sign_corners(bits, rng);
  }

  if (spec.mode == QuantMode::Hypercube) {
    if (prior.family != PriorFamily::UniformHypercube)
      throw std::invalid_argument(
          "voronoi_resample: hypercube cells require the uniform prior");
    // Direct uniform draw inside the cube.
    const std::int64_t cells = per_dim_cells(spec);
    std::vector<double> z(static_cast<std::size_t>(m));
    std::int64_t rem = cell_index;
    for (std::int64_t j = m - 1; j >= 0; --j) {
      const std::int64_t cell = rem % cells;
      rem /= cells;
      z[static_cast<std::size_t>(j)] =
          (static_cast<double>(cell) + rng.uniform()) / static_cast<double>(cells);
    }
    return z;
  }

  // Explicit centers: rejection sampling from the prior.
  Tensor zt({1, m});
  for (std::int64_t attempt = 0; attempt < max_proposals; ++attempt) {
    for (std::int64_t j = 0; j < m; ++j)
      zt.at(0, j) = prior.family == PriorFamily::StandardNormal ? rng.normal()
                                                                : rng.uniform();
    Batch zb{zt, Space::Z};
    QuantizationResult r = hard_quantize(zb, spec);
    if (r.indices[0] == cell_index)
      return std::vector<double>(zt.data.begin(), zt.data.end());
  }
  throw std::runtime_error("voronoi_resample: proposal budget exhausted");
}

std::vector<double> voronoi_resample(const CodeSpec& spec, std::int64_t cell_index,
                                     const PriorSpec& prior, std::uint64_t seed,
                                     std::int64_t max_proposals) {
  VoronoiSampler s{spec, prior, max_proposals};
  Rng rng(derive_seed(seed, "voronoi"));
  return s.sample(cell_index, rng);
}

}  // namespace dplc
