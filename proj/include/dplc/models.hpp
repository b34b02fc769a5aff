#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dplc/autodiff.hpp"
#include "dplc/data.hpp"
#include "dplc/layers.hpp"
#include "dplc/quant.hpp"

namespace dplc {

enum class Role { Generator, WaeEncoder, Critic, RateEncoder, Mapper };

std::string role_to_string(Role role);
Role role_from_string(const std::string& s);

enum class ArchFamily { Mlp, ConvDcgan };

// One architecture record covers every role; build_model() reads the fields
// relevant to the requested role and validates shape consistency.
struct ArchSpec {
  ArchFamily family = ArchFamily::Mlp;

  std::int64_t latent_dim = 2;  // m
  std::int64_t data_dim = 2;    // X-space dimension (mlp family)
  std::int64_t code_dims = 0;   // number of sign-corner code dimensions (mlp)
  std::int64_t noise_dim = 0;   // entries of the uniform noise vector fed to B

  std::vector<std::int64_t> hidden = {128, 128, 128};
  double lrelu_slope = 0.2;
  // Trailing non-affine normalization on latent outputs (encoder F, mapper B),
  // whitening them toward the prior's scale.
  bool final_whiten = true;

  // Conv family.
  std::int64_t resolution = 64;
  std::int64_t image_channels = 3;
  std::int64_t base_channels = 64;
  std::int64_t stages = 4;          // stride-2 stages
  std::int64_t code_channels = 0;   // k channels of the quantized feature map
  std::int64_t residual_blocks = 2; // n blocks in the mapper

  std::int64_t code_map_side() const { return resolution >> stages; }
  std::string to_json_string() const;
  static ArchSpec from_json_string(const std::string& s);
};

/// Total per-sample dimensionality of the quantized code.
std::int64_t code_site_count(const ArchSpec& arch);
/// Per-sample code shape, e.g. {k} for vectors or {k, s, s} for images.
Shape code_shape(const ArchSpec& arch);

// A parametric function with a role contract:
//   Generator:    (b, m) -> X-space batch
//   WaeEncoder:   X-space batch -> (b, m)
//   Critic:       X-space batch -> (b, 1)
//   RateEncoder:  X-space batch -> code (b, k) or (b, k, s, s)
//   Mapper:       (b, code+noise) or (b, k+nc, s, s) -> (b, m)
class Model {
 public:
  Model(Role role, const ArchSpec& arch, std::uint64_t seed);

  Role role() const { return role_; }
  const ArchSpec& arch() const { return arch_; }
  std::uint64_t init_seed() const { return seed_; }

  ad::Var forward(const ad::Var& input);
  /// No-graph forward in inference mode (frozen normalization statistics).
  Tensor forward_inference(const Tensor& input);

  void set_training(bool t) { training_ = t; }
  bool is_training() const { return training_; }

  /// Toggle gradient tracking of all parameters (freezing a model when off).
  void set_requires_grad(bool enabled);

  const std::vector<ad::Var>& parameters() { return params_; }
  std::vector<Tensor*> buffers();
  std::int64_t parameter_count() const;

  Tensor flat_parameters() const;
  void set_flat_parameters(const Tensor& flat);
  std::vector<Tensor> buffer_values() const;
  void set_buffer_values(const std::vector<Tensor>& values);

  /// Hash of parameters and buffers; detects any mutation of a frozen model.
  std::uint64_t fingerprint() const;

  std::unique_ptr<Model> clone() const;

 private:
  void check_input(const ad::Var& input) const;

  Role role_;
  ArchSpec arch_;
  std::uint64_t seed_;
  nn::Sequential net_;
  std::vector<ad::Var> params_;
  bool training_ = true;
};

using ModelPtr = std::unique_ptr<Model>;

ModelPtr build_model(Role role, const ArchSpec& arch, std::uint64_t seed);

/// Generator forward over a plain latent batch (inference mode).
Batch generator_forward(Model& generator, const Batch& z);

/// Mapper forward over an assembled code-plus-noise input (inference mode).
Batch mapper_forward(Model& mapper, const Batch& code_plus_noise);

// Rate-constrained encoding: run E, quantize each code site to {-1, +1} with
// the straight-through surrogate, and append the reshaped noise channels to
// form the mapper input. With zero code dimensions the mapper input is the
// noise alone and the quantization result is empty.
struct RateEncodeResult {
  QuantizationResult quant;
  ad::Var code;          // straight-through code values, pre-noise
  ad::Var mapper_input;  // what B consumes
};

RateEncodeResult rate_encode(Model* rate_encoder, const ad::Var& x,
                             const Batch& noise, const ArchSpec& arch,
                             double temperature = 1.0);

/// Assemble a mapper input from an already-quantized code (or nothing, at
/// zero rate) plus optional noise; used by the deterministic CAE baseline.
ad::Var assemble_mapper_input(const ad::Var* code, const Batch* noise,
                              const ArchSpec& arch);

}  // namespace dplc
