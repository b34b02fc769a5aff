#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "dplc/autodiff.hpp"
#include "dplc/rng.hpp"
#include "dplc/tensor.hpp"

namespace dplc::nn {

// Layers pass activations as flat matrices. Vector data flows as (b, f);
// image data flows in NHWC order as (b*h*w, c) with the spatial geometry
// fixed per layer at construction time, which turns convolutions into an
// index-map gather followed by a GEMM. Every backward pass is built from
// differentiable ops, so losses that include input gradients (the WGAN-GP
// penalty) can train through these layers.

class Layer {
 public:
  virtual ~Layer() = default;
  virtual ad::Var forward(const ad::Var& x, bool training) = 0;
  virtual void params(std::vector<ad::Var>& out) { (void)out; }
  virtual void buffers(std::vector<Tensor*>& out) { (void)out; }
};

using LayerPtr = std::unique_ptr<Layer>;

class Linear : public Layer {
 public:
  Linear(std::int64_t in, std::int64_t out, Rng& rng, double weight_std);
  ad::Var forward(const ad::Var& x, bool training) override;
  void params(std::vector<ad::Var>& out) override;

 private:
  std::int64_t in_, out_;
  ad::Var weight_, bias_;
};

enum class ActKind { Relu, LeakyRelu, Tanh };

class Activation : public Layer {
 public:
  explicit Activation(ActKind kind, double slope = 0.2) : kind_(kind), slope_(slope) {}
  ad::Var forward(const ad::Var& x, bool) override;

 private:
  ActKind kind_;
  double slope_;
};

class Conv2d : public Layer {
 public:
  Conv2d(std::int64_t in_c, std::int64_t out_c, std::int64_t kernel,
         std::int64_t stride, std::int64_t pad, std::int64_t in_h,
         std::int64_t in_w, Rng& rng, double weight_std = 0.02);
  ad::Var forward(const ad::Var& x, bool training) override;
  void params(std::vector<ad::Var>& out) override;
  std::int64_t out_h() const { return out_h_; }
  std::int64_t out_w() const { return out_w_; }

 private:
  ad::IndexMap im2col_map(std::int64_t batch);

  std::int64_t in_c_, out_c_, k_, s_, p_, in_h_, in_w_, out_h_, out_w_;
  ad::Var weight_;  // (out_c, k*k*in_c), patch order (ky, kx, ci)
  ad::Var bias_;    // (1, out_c)
  std::map<std::int64_t, ad::IndexMap> map_cache_;
};

class ConvTranspose2d : public Layer {
 public:
  ConvTranspose2d(std::int64_t in_c, std::int64_t out_c, std::int64_t kernel,
                  std::int64_t stride, std::int64_t pad, std::int64_t in_h,
                  std::int64_t in_w, Rng& rng, double weight_std = 0.02);
  ad::Var forward(const ad::Var& x, bool training) override;
  void params(std::vector<ad::Var>& out) override;
  std::int64_t out_h() const { return out_h_; }
  std::int64_t out_w() const { return out_w_; }

 private:
  ad::IndexMap scatter_map(std::int64_t batch);

  std::int64_t in_c_, out_c_, k_, s_, p_, in_h_, in_w_, out_h_, out_w_;
  ad::Var weight_;  // (in_c, k*k*out_c), patch order (ky, kx, co)
  ad::Var bias_;    // (1, out_c)
  std::map<std::int64_t, ad::IndexMap> map_cache_;
};

// Per-channel batch normalization over the row axis of a (rows, c) activation
// matrix (rows = b*h*w for images). Training mode uses batch statistics and
// updates running estimates; inference mode uses the frozen running values.
class BatchNorm : public Layer {
 public:
  BatchNorm(std::int64_t features, bool affine, Rng& rng, double momentum = 0.1,
            double eps = 1e-5);
  ad::Var forward(const ad::Var& x, bool training) override;
  void params(std::vector<ad::Var>& out) override;
  void buffers(std::vector<Tensor*>& out) override;

 private:
  std::int64_t features_;
  bool affine_;
  double momentum_, eps_;
  ad::Var gamma_, beta_;
  Tensor running_mean_, running_var_;
};

// Per-sample normalization over all non-batch features. For image stacks the
// (b*spatial, c) matrix is regrouped to (b, spatial*c) rows first.
class LayerNorm : public Layer {
 public:
  explicit LayerNorm(std::int64_t spatial_rows_per_sample, double eps = 1e-5)
      : group_(spatial_rows_per_sample), eps_(eps) {}
  ad::Var forward(const ad::Var& x, bool) override;

 private:
  std::int64_t group_;
  double eps_;
};

/// (b*g, f) -> (b, g*f) when merge, the inverse otherwise.
class RegroupRows : public Layer {
 public:
  RegroupRows(std::int64_t group, bool merge) : group_(group), merge_(merge) {}
  ad::Var forward(const ad::Var& x, bool) override;

 private:
  std::int64_t group_;
  bool merge_;
};

class ResidualConvBlock : public Layer {
 public:
  ResidualConvBlock(std::int64_t channels, std::int64_t h, std::int64_t w,
                    Rng& rng);
  ad::Var forward(const ad::Var& x, bool training) override;
  void params(std::vector<ad::Var>& out) override;
  void buffers(std::vector<Tensor*>& out) override;

 private:
  Conv2d conv1_, conv2_;
  BatchNorm bn1_, bn2_;
};

/// (b, c, h, w) tensor -> (b*h*w, c) activation matrix.
class NchwToNhwc : public Layer {
 public:
  NchwToNhwc(std::int64_t c, std::int64_t h, std::int64_t w) : c_(c), h_(h), w_(w) {}
  ad::Var forward(const ad::Var& x, bool) override;

 private:
  std::int64_t c_, h_, w_;
  std::map<std::int64_t, ad::IndexMap> map_cache_;
};

/// (b*h*w, c) activation matrix -> (b, c, h, w) tensor.
class NhwcToNchw : public Layer {
 public:
  NhwcToNchw(std::int64_t c, std::int64_t h, std::int64_t w) : c_(c), h_(h), w_(w) {}
  ad::Var forward(const ad::Var& x, bool) override;

 private:
  std::int64_t c_, h_, w_;
  std::map<std::int64_t, ad::IndexMap> map_cache_;
};

class Sequential : public Layer {
 public:
  void add(LayerPtr layer) { layers_.push_back(std::move(layer)); }
  ad::Var forward(const ad::Var& x, bool training) override;
  void params(std::vector<ad::Var>& out) override;
  void buffers(std::vector<Tensor*>& out) override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<LayerPtr> layers_;
};

}  // namespace dplc::nn
