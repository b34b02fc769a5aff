#include "dplc/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace dplc::nn {

using namespace ad;

namespace {

Tensor normal_init(Shape shape, Rng& rng, double std) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = std * rng.normal();
  return t;
}

std::int64_t rows_of(const Var& x) { return x->value.shape[0]; }

}  // namespace

// ---- Linear ----

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, double weight_std)
    : in_(in), out_(out) {
  if (in < 1 || out < 1) throw std::invalid_argument("Linear: bad dimensions");
  weight_ = leaf(normal_init({in, out}, rng, weight_std));
  bias_ = leaf(Tensor::zeros({1, out}));
}

Var Linear::forward(const Var& x, bool) {
  if (x->value.shape[1] != in_)
    throw std::invalid_argument("Linear: input features " +
                                std::to_string(x->value.shape[1]) + ", expected " +
                                std::to_string(in_));
  return add(matmul(x, weight_), broadcast_rows(bias_, rows_of(x)));
}

void Linear::params(std::vector<Var>& out) {
  out.push_back(weight_);
  out.push_back(bias_);
}

// ---- Activation ----

Var Activation::forward(const Var& x, bool) {
  switch (kind_) {
    case ActKind::Relu:
      return relu(x);
    case ActKind::LeakyRelu:
      return leaky_relu(x, slope_);
    case ActKind::Tanh:
      return tanh_(x);
  }
  throw std::logic_error("Activation: unknown kind");
}

// ---- Conv2d ----

Conv2d::Conv2d(std::int64_t in_c, std::int64_t out_c, std::int64_t kernel,
               std::int64_t stride, std::int64_t pad, std::int64_t in_h,
               std::int64_t in_w, Rng& rng, double weight_std)
    : in_c_(in_c),
      out_c_(out_c),
      k_(kernel),
      s_(stride),
      p_(pad),
      in_h_(in_h),
      in_w_(in_w) {
  out_h_ = (in_h + 2 * pad - kernel) / stride + 1;
  out_w_ = (in_w + 2 * pad - kernel) / stride + 1;
  if (out_h_ < 1 || out_w_ < 1)
    throw std::invalid_argument("Conv2d: kernel does not fit the input");
  weight_ = leaf(normal_init({out_c, kernel * kernel * in_c}, rng, weight_std));
  bias_ = leaf(Tensor::zeros({1, out_c}));
}

IndexMap Conv2d::im2col_map(std::int64_t b) {
  auto it = map_cache_.find(b);
  if (it != map_cache_.end()) return it->second;
  auto map = std::make_shared<std::vector<std::int64_t>>();
  map->reserve(static_cast<std::size_t>(b * out_h_ * out_w_ * k_ * k_ * in_c_));
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t oy = 0; oy < out_h_; ++oy)
      for (std::int64_t ox = 0; ox < out_w_; ++ox)
        for (std::int64_t ky = 0; ky < k_; ++ky)
          for (std::int64_t kx = 0; kx < k_; ++kx) {
            const std::int64_t y = oy * s_ - p_ + ky;
            const std::int64_t x = ox * s_ - p_ + kx;
            for (std::int64_t ci = 0; ci < in_c_; ++ci) {
              if (y < 0 || y >= in_h_ || x < 0 || x >= in_w_)
                map->push_back(-1);
              else
                map->push_back(((n * in_h_ + y) * in_w_ + x) * in_c_ + ci);
            }
          }
  IndexMap shared = map;
  map_cache_[b] = shared;
  return shared;
}

Var Conv2d::forward(const Var& x, bool) {
  const std::int64_t rows = rows_of(x);
  if (x->value.shape[1] != in_c_ || rows % (in_h_ * in_w_) != 0)
    throw std::invalid_argument("Conv2d: unexpected input geometry");
  const std::int64_t b = rows / (in_h_ * in_w_);
  Var cols = gather(x, im2col_map(b), {b * out_h_ * out_w_, k_ * k_ * in_c_});
  Var y = matmul(cols, transpose(weight_));
  return add(y, broadcast_rows(bias_, b * out_h_ * out_w_));
}

void Conv2d::params(std::vector<Var>& out) {
  out.push_back(weight_);
  out.push_back(bias_);
}

// ---- ConvTranspose2d ----

ConvTranspose2d::ConvTranspose2d(std::int64_t in_c, std::int64_t out_c,
                                 std::int64_t kernel, std::int64_t stride,
                                 std::int64_t pad, std::int64_t in_h,
                                 std::int64_t in_w, Rng& rng, double weight_std)
    : in_c_(in_c),
      out_c_(out_c),
      k_(kernel),
      s_(stride),
      p_(pad),
      in_h_(in_h),
      in_w_(in_w) {
  out_h_ = (in_h - 1) * stride - 2 * pad + kernel;
  out_w_ = (in_w - 1) * stride - 2 * pad + kernel;
  if (out_h_ < 1 || out_w_ < 1)
    throw std::invalid_argument("ConvTranspose2d: empty output");
  weight_ = leaf(normal_init({in_c, kernel * kernel * out_c}, rng, weight_std));
  bias_ = leaf(Tensor::zeros({1, out_c}));
}

IndexMap ConvTranspose2d::scatter_map(std::int64_t b) {
  auto it = map_cache_.find(b);
  if (it != map_cache_.end()) return it->second;
  // Adjoint of a conv mapping (out -> in): element (n,y,x,ky,kx,co) of the
  // GEMM result lands at output position (y*s - p + ky, x*s - p + kx).
  auto map = std::make_shared<std::vector<std::int64_t>>();
  map->reserve(static_cast<std::size_t>(b * in_h_ * in_w_ * k_ * k_ * out_c_));
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < in_h_; ++y)
      for (std::int64_t x = 0; x < in_w_; ++x)
        for (std::int64_t ky = 0; ky < k_; ++ky)
          for (std::int64_t kx = 0; kx < k_; ++kx) {
            const std::int64_t oy = y * s_ - p_ + ky;
            const std::int64_t ox = x * s_ - p_ + kx;
            for (std::int64_t co = 0; co < out_c_; ++co) {
              if (oy < 0 || oy >= out_h_ || ox < 0 || ox >= out_w_)
                map->push_back(-1);
              else
                map->push_back(((n * out_h_ + oy) * out_w_ + ox) * out_c_ + co);
            }
          }
  IndexMap shared = map;
  map_cache_[b] = shared;
  return shared;
}

Var ConvTranspose2d::forward(const Var& x, bool) {
  const std::int64_t rows = rows_of(x);
  if (x->value.shape[1] != in_c_ || rows % (in_h_ * in_w_) != 0)
    throw std::invalid_argument("ConvTranspose2d: unexpected input geometry");
  const std::int64_t b = rows / (in_h_ * in_w_);
  Var cols = matmul(x, weight_);  // (b*h*w, k*k*out_c)
  Var y = scatter_add(cols, scatter_map(b), {b * out_h_ * out_w_, out_c_});
  return add(y, broadcast_rows(bias_, b * out_h_ * out_w_));
}

void ConvTranspose2d::params(std::vector<Var>& out) {
  out.push_back(weight_);
  out.push_back(bias_);
}

// ---- BatchNorm ----

BatchNorm::BatchNorm(std::int64_t features, bool affine, Rng& rng,
                     double momentum, double eps)
    : features_(features), affine_(affine), momentum_(momentum), eps_(eps) {
  if (affine_) {
    gamma_ = leaf(normal_init({1, features}, rng, 0.02));
    for (std::int64_t i = 0; i < features; ++i) gamma_->value[i] += 1.0;
    beta_ = leaf(Tensor::zeros({1, features}));
  }
  running_mean_ = Tensor::zeros({1, features});
  running_var_ = Tensor::full({1, features}, 1.0);
}

Var BatchNorm::forward(const Var& x, bool training) {
  if (x->value.shape[1] != features_)
    throw std::invalid_argument("BatchNorm: feature count mismatch");
  const std::int64_t rows = rows_of(x);

  Var xhat;
  if (training) {
    const double inv_n = 1.0 / static_cast<double>(rows);
    Var mean = scale(col_sum(x), inv_n);                // (1, f)
    Var centered = sub(x, broadcast_rows(mean, rows));
    Var var = scale(col_sum(square(centered)), inv_n);  // biased
    xhat = div(centered, broadcast_rows(sqrt_(add_scalar(var, eps_)), rows));
    // Running statistics live outside the graph.
    for (std::int64_t i = 0; i < features_; ++i) {
      running_mean_[i] =
          (1.0 - momentum_) * running_mean_[i] + momentum_ * mean->value[i];
      running_var_[i] =
          (1.0 - momentum_) * running_var_[i] + momentum_ * var->value[i];
    }
  } else {
    Tensor denom({1, features_});
    for (std::int64_t i = 0; i < features_; ++i)
      denom[i] = std::sqrt(running_var_[i] + eps_);
    Var centered = sub(x, broadcast_rows(constant(running_mean_), rows));
    xhat = div(centered, broadcast_rows(constant(denom), rows));
  }
  if (!affine_) return xhat;
  return add(mul(xhat, broadcast_rows(gamma_, rows)),
             broadcast_rows(beta_, rows));
}

void BatchNorm::params(std::vector<Var>& out) {
  if (affine_) {
    out.push_back(gamma_);
    out.push_back(beta_);
  }
}

void BatchNorm::buffers(std::vector<Tensor*>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

// ---- LayerNorm ----

Var LayerNorm::forward(const Var& x, bool) {
  const std::int64_t rows = rows_of(x);
  const std::int64_t f = x->value.shape[1];
  if (rows % group_ != 0) throw std::invalid_argument("LayerNorm: bad grouping");
  const std::int64_t b = rows / group_;
  Var grouped = group_ == 1 ? x : reshape(x, {b, group_ * f});
  const std::int64_t m = group_ * f;

  const double inv_m = 1.0 / static_cast<double>(m);
  Var mean = scale(row_sum(grouped), inv_m);  // (b, 1)
  Var centered = sub(grouped, broadcast_cols(mean, m));
  Var var = scale(row_sum(square(centered)), inv_m);
  Var xhat = div(centered, broadcast_cols(sqrt_(add_scalar(var, eps_)), m));
  return group_ == 1 ? xhat : reshape(xhat, {rows, f});
}

// ---- RegroupRows ----

Var RegroupRows::forward(const Var& x, bool) {
  const std::int64_t rows = rows_of(x);
  const std::int64_t f = x->value.shape[1];
  if (merge_) {
    if (rows % group_ != 0) throw std::invalid_argument("RegroupRows: bad grouping");
    return reshape(x, {rows / group_, group_ * f});
  }
  if (f % group_ != 0) throw std::invalid_argument("RegroupRows: bad grouping");
  return reshape(x, {rows * group_, f / group_});
}

// ---- ResidualConvBlock ----

ResidualConvBlock::ResidualConvBlock(std::int64_t channels, std::int64_t h,
                                     std::int64_t w, Rng& rng)
    : conv1_(channels, channels, 3, 1, 1, h, w, rng),
      conv2_(channels, channels, 3, 1, 1, h, w, rng),
      bn1_(channels, true, rng),
      bn2_(channels, true, rng) {}

Var ResidualConvBlock::forward(const Var& x, bool training) {
  Var h = relu(bn1_.forward(conv1_.forward(x, training), training));
  h = bn2_.forward(conv2_.forward(h, training), training);
  return relu(add(x, h));
}

void ResidualConvBlock::params(std::vector<Var>& out) {
  conv1_.params(out);
  bn1_.params(out);
  conv2_.params(out);
  bn2_.params(out);
}

void ResidualConvBlock::buffers(std::vector<Tensor*>& out) {
  bn1_.buffers(out);
  bn2_.buffers(out);
}

// ---- layout conversions ----

Var NchwToNhwc::forward(const Var& x, bool) {
  if (x->value.rank() != 4 || x->value.shape[1] != c_ || x->value.shape[2] != h_ ||
      x->value.shape[3] != w_)
    throw std::invalid_argument("NchwToNhwc: unexpected input shape " +
                                shape_to_string(x->value.shape));
  const std::int64_t b = x->value.shape[0];
  auto it = map_cache_.find(b);
  if (it == map_cache_.end()) {
    auto map = std::make_shared<std::vector<std::int64_t>>();
    map->reserve(static_cast<std::size_t>(b * c_ * h_ * w_));
    for (std::int64_t n = 0; n < b; ++n)
      for (std::int64_t y = 0; y < h_; ++y)
        for (std::int64_t x2 = 0; x2 < w_; ++x2)
          for (std::int64_t ci = 0; ci < c_; ++ci)
            map->push_back(((n * c_ + ci) * h_ + y) * w_ + x2);
    it = map_cache_.emplace(b, IndexMap(map)).first;
  }
  return gather(x, it->second, {b * h_ * w_, c_});
}

Var NhwcToNchw::forward(const Var& x, bool) {
  const std::int64_t rows = rows_of(x);
  if (x->value.shape[1] != c_ || rows % (h_ * w_) != 0)
    throw std::invalid_argument("NhwcToNchw: unexpected input shape");
  const std::int64_t b = rows / (h_ * w_);
  auto it = map_cache_.find(b);
  if (it == map_cache_.end()) {
    auto map = std::make_shared<std::vector<std::int64_t>>();
    map->reserve(static_cast<std::size_t>(b * c_ * h_ * w_));
    for (std::int64_t n = 0; n < b; ++n)
      for (std::int64_t ci = 0; ci < c_; ++ci)
        for (std::int64_t y = 0; y < h_; ++y)
          for (std::int64_t x2 = 0; x2 < w_; ++x2)
            map->push_back(((n * h_ + y) * w_ + x2) * c_ + ci);
    it = map_cache_.emplace(b, IndexMap(map)).first;
  }
  return gather(x, it->second, {b, c_, h_, w_});
}

// ---- Sequential ----

Var Sequential::forward(const Var& x, bool training) {
  Var h = x;
  for (auto& l : layers_) h = l->forward(h, training);
  return h;
}

void Sequential::params(std::vector<Var>& out) {
  for (auto& l : layers_) l->params(out);
}

void Sequential::buffers(std::vector<Tensor*>& out) {
  for (auto& l : layers_) l->buffers(out);
}

}  // namespace dplc::nn
