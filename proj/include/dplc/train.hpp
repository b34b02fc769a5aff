#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dplc/checkpoint.hpp"
#include "dplc/data.hpp"
#include "dplc/divergences.hpp"
#include "dplc/models.hpp"
#include "dplc/optim.hpp"

namespace dplc {

// Learning-rate decay at fixed milestones: after the i-th milestone has
// passed, the rate is initial * factor^i exactly.
struct LrSchedule {
  std::vector<std::int64_t> milestones;
  double factor = 0.4;

  double at(double initial, std::int64_t iteration) const;
};

struct TrainConfig {
  double lr_encoder = 1e-3;    // encoder F
  double lr_generator = 1e-3;  // generator G
  double lr_critic = 1e-4;     // critic f
  double lr_codec = 1e-3;      // rate-constrained stage (E, B)
  double beta1 = 0.5;
  double beta2 = 0.999;
  double lambda_mmd = 100.0;
  double lambda_gp = 10.0;
  double gamma = 1e-3;         // blend between primal and dual objectives
  std::int64_t n_critic = 5;
  std::int64_t batch_size = 128;
  std::int64_t iterations = 5000;
  LrSchedule schedule;
  std::uint64_t seed = 0;
  std::int64_t log_interval = 50;
  double kernel_scale = 0.0;   // 0 -> 2 * latent_dim heuristic
  double quant_temperature = 1.0;

  void validate() const;
  double kernel_scale_for(std::int64_t latent_dim) const;
};

struct LossRecord {
  std::int64_t iteration = 0;
  double l_f = 0.0;     // critic loss, last inner iteration
  double l_d = 0.0;     // unsquared-norm distortion
  double l_mmd = 0.0;   // latent MMD U-statistic
  double l_wgan = 0.0;  // adversarial generator term
  double l_total = 0.0;

  bool finite() const;
};

// Everything a training loop owns: the models in play, their optimizer
// moments, and the iteration counter. Randomness discipline: sub-draw t of
// iteration i reads stream derive_seed(run_seed, tag, i * n_critic + t) with
// tags "z" (prior), "eta" (latent mixing), "nu" (penalty interpolation),
// "noise" (decoder noise). Data batches come from the dataset cursor.
struct TrainState {
  ModelPtr generator;
  ModelPtr encoder;       // F (wae / wpp)
  ModelPtr critic;        // f (wgan-gp / wpp / gc)
  ModelPtr rate_encoder;  // E (codec stage)
  ModelPtr mapper;        // B (codec stage)

  AdamState opt_generator, opt_encoder, opt_critic, opt_rate_encoder, opt_mapper;
  std::int64_t iteration = 0;
  std::uint64_t run_seed = 0;
  std::vector<LossRecord> history;
};

using BatchFn = std::function<Batch(std::int64_t)>;
BatchFn dataset_source(DatasetHandle& ds);
BatchFn fixed_source(const Batch& b);

// The raw draws of the final critic iteration, for oracle tests.
struct StepDiagnostics {
  Tensor x, z, eta, nu;
  std::int64_t critic_updates = 0;
};

/// One blended-objective iteration: n_critic critic updates on mixed latents
/// (each on a freshly drawn batch; z_tilde = eta*z + (1-eta)*F(x)), then one
/// update of G and F from (1-gamma)*L_d + gamma*L_WGAN and
/// (1-gamma)*(L_d + lambda*L_MMD) respectively, computed on the final
/// critic batch. NaN losses raise TrainDivergence.
LossRecord wpp_step(TrainState& st, const BatchFn& data, const TrainConfig& cfg,
                    StepDiagnostics* diag = nullptr);

/// One encoder/generator update from L_d + lambda * L_MMD on the given batch;
/// the prior draw comes from the same stream slot the blended step would use
/// for its final critic iteration, so the gamma = 0 blend reduces to this
/// step exactly.
LossRecord wae_mmd_step(TrainState& st, const BatchFn& data, const TrainConfig& cfg,
                        StepDiagnostics* diag = nullptr);

/// One dual-form iteration: n_critic critic updates on G(z) fakes, then a
/// generator update from -mean f(G(z)). `latent_override` substitutes the
/// generator-stage latents (used by equivalence tests).
LossRecord wgan_gp_step(TrainState& st, const BatchFn& data, const TrainConfig& cfg,
                        StepDiagnostics* diag = nullptr,
                        const Tensor* latent_override = nullptr);

/// The dual-form generator update alone: theta <- Adam(theta, d(-mean f(G(z)))).
LossRecord wgan_generator_update(TrainState& st, const Tensor& latent,
                                 const TrainConfig& cfg);

class TrainDivergence : public std::runtime_error {
 public:
  explicit TrainDivergence(const std::string& msg) : std::runtime_error(msg) {}
};

enum class TrainStatus { Completed, NanAbort };
enum class GenAlgo { WaeMmd, WganGp, Wpp };
GenAlgo gen_algo_from_string(const std::string& s);
std::string gen_algo_to_string(GenAlgo a);

struct GeneratorTrainResult {
  TrainStatus status = TrainStatus::Completed;
  ModelPtr generator;
  ModelPtr encoder;  // null for wgan-gp
  ModelPtr critic;   // null for wae-mmd
  std::vector<LossRecord> history;
  std::int64_t completed_iterations = 0;
};

using LogCallback = std::function<void(const LossRecord&)>;

/// Full first-stage run. On a NaN abort the returned models are the last
/// snapshot taken at a log boundary, never the diverged parameters.
GeneratorTrainResult train_generator(GenAlgo algo, DatasetHandle& dataset,
                                     const ArchSpec& arch, const TrainConfig& cfg,
                                     const LogCallback& on_log = {});

struct CodecTrainResult {
  TrainStatus status = TrainStatus::Completed;
  ModelPtr rate_encoder;  // null at zero rate
  ModelPtr mapper;
  std::vector<LossRecord> history;
  double lambda_mmd_used = 0.0;
  std::int64_t code_sites = 0;
};

/// Rate-constrained stage: minimizes distortion + lambda * MMD(B(E(X)), P_Z)
/// over E and B with the generator frozen (its parameters and buffers are
/// fingerprint-checked). `code_sites` is the number of one-bit code
/// dimensions; zero trains the mapper on pure noise.
CodecTrainResult train_codec(Model& frozen_generator, std::int64_t code_sites,
                             DatasetHandle& dataset, const TrainConfig& cfg,
                             const LogCallback& on_log = {});

/// lambda_MMD(R) = base * table[R] / table[reference_R]; absent rates fall
/// back to the nearest tabulated rate with a warning.
double lambda_schedule(double rate, const std::map<double, double>& mse_cae_table,
                       double base_lambda, double reference_rate);

struct JointCodecTrainResult {
  TrainStatus status = TrainStatus::Completed;
  ModelPtr generator;
  ModelPtr rate_encoder;  // null at zero rate
  ModelPtr mapper;
  ModelPtr critic;  // gc only
  std::vector<LossRecord> history;
};

/// Distortion-only joint baseline: G, B, E trained together, deterministic
/// decoder (no noise input).
JointCodecTrainResult train_cae(DatasetHandle& dataset, std::int64_t code_sites,
                                const ArchSpec& arch, const TrainConfig& cfg,
                                const LogCallback& on_log = {});

/// Regularized joint baseline: distortion + lambda * critic-based divergence,
/// noise fed to the mapper, critic trained with the gradient penalty in an
/// inner loop mirroring the blended trainer.
JointCodecTrainResult train_gc(DatasetHandle& dataset, std::int64_t code_sites,
                               double lambda_divergence, const ArchSpec& arch,
                               const TrainConfig& cfg,
                               const LogCallback& on_log = {});

}  // namespace dplc
