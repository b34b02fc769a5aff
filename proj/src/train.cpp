#include "dplc/train.hpp"

#include <cmath>
#include <iostream>

namespace dplc {

// ---- optimizer ----

AdamState AdamState::for_params(const std::vector<ad::Var>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(Tensor::zeros(p->value.shape));
    s.v.push_back(Tensor::zeros(p->value.shape));
  }
  return s;
}

void adam_update(const std::vector<ad::Var>& params,
                 const std::vector<Tensor>& grads, AdamState& state,
                 const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_update: mismatched parameter lists");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i]->value;
    const Tensor& g = grads[i];
    if (!p.same_shape(g))
      throw std::invalid_argument("adam_update: gradient shape mismatch");
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

std::vector<Tensor> parameter_gradients(const ad::Var& loss,
                                        const std::vector<ad::Var>& params) {
  auto gvars = ad::grad(loss, params);
  std::vector<Tensor> out;
  out.reserve(gvars.size());
  for (auto& g : gvars) out.push_back(g->value);
  return out;
}

// ---- schedule / config ----

double LrSchedule::at(double initial, std::int64_t iteration) const {
  double lr = initial;
  for (auto ms : milestones)
    if (iteration >= ms) lr *= factor;
  return lr;
}

void TrainConfig::validate() const {
  if (lr_encoder <= 0 || lr_generator <= 0 || lr_critic <= 0 || lr_codec <= 0)
    throw std::invalid_argument("TrainConfig: learning rates must be > 0");
  if (gamma < 0.0 || gamma > 1.0)
    throw std::invalid_argument("TrainConfig: gamma must lie in [0,1]");
  if (n_critic < 1) throw std::invalid_argument("TrainConfig: n_critic >= 1");
  if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size >= 2");
  if (iterations < 1) throw std::invalid_argument("TrainConfig: iterations >= 1");
  if (quant_temperature <= 0.0)
    throw std::invalid_argument("TrainConfig: quant_temperature > 0");
}

double TrainConfig::kernel_scale_for(std::int64_t latent_dim) const {
  return kernel_scale > 0.0 ? kernel_scale : default_kernel_scale(latent_dim);
}

bool LossRecord::finite() const {
  return std::isfinite(l_f) && std::isfinite(l_d) && std::isfinite(l_mmd) &&
         std::isfinite(l_wgan) && std::isfinite(l_total);
}

BatchFn dataset_source(DatasetHandle& ds) {
  return [&ds](std::int64_t b) { return ds.next_batch(b); };
}

BatchFn fixed_source(const Batch& b) {
  return [b](std::int64_t n) {
    if (n != b.size())
      throw std::invalid_argument("fixed_source: unexpected batch size");
    return b;
  };
}

namespace {

Tensor draw_normal(std::uint64_t run_seed, const char* tag, std::uint64_t index,
                   Shape shape) {
  Tensor t(std::move(shape));
  Rng rng(derive_seed(run_seed, tag, index));
  rng.fill_normal(t.data.data(), t.numel());
  return t;
}

Tensor draw_uniform(std::uint64_t run_seed, const char* tag, std::uint64_t index,
                    Shape shape) {
  Tensor t(std::move(shape));
  Rng rng(derive_seed(run_seed, tag, index));
  rng.fill_uniform(t.data.data(), t.numel());
  return t;
}

std::vector<double> as_vector(const Tensor& t) {
  return std::vector<double>(t.data.begin(), t.data.end());
}

/// mean_i || x_i - y_i || with per-sample flattening (the training
/// distortion; unsquared norm).
ad::Var distortion_norm(const Tensor& x, const ad::Var& y) {
  const std::int64_t b = x.shape[0];
  const std::int64_t per = x.numel() / b;
  ad::Var diff = ad::sub(ad::constant(Tensor({b, per}, x.data)),
                         ad::reshape(y, {b, per}));
  return ad::mean_all(ad::row_norm(diff));
}

double critic_inner_update(Model& critic, AdamState& opt, const Batch& x,
                           const Tensor& x_hat, const Tensor& nu, double lr,
                           const TrainConfig& cfg) {
  ModelFn fn = [&critic](const ad::Var& in) { return critic.forward(in); };
  auto parts = critic_loss_with_nu(fn, x, Batch{x_hat, x.space}, cfg.lambda_gp,
                                   as_vector(nu));
  auto grads = parameter_gradients(parts.total, critic.parameters());
  adam_update(critic.parameters(), grads, opt,
              {lr, cfg.beta1, cfg.beta2, 1e-8});
  return parts.total->value[0];
}

void check_finite_or_throw(const LossRecord& rec, const char* where) {
  if (!rec.finite())
    throw TrainDivergence(std::string(where) +
                          ": non-finite loss at iteration " +
                          std::to_string(rec.iteration));
}

struct PrimalLosses {
  ad::Var z_bar;   // F(x), with graph
  ad::Var x_rec;   // G(F(x)), with graph
  ad::Var l_d;     // unsquared-norm distortion
  ad::Var l_mmd;   // MMD(prior z, F(x))
};

// Shared by the pure primal step and the blended step so that the gamma = 0
// blend produces bit-identical arithmetic.
PrimalLosses build_primal_losses(Model& F, Model& G, const Batch& x,
                                 const Tensor& z, double kernel_c) {
  PrimalLosses out;
  out.z_bar = F.forward(ad::constant(x.data));
  out.x_rec = G.forward(out.z_bar);
  out.l_d = distortion_norm(x.data, out.x_rec);
  out.l_mmd = mmd_u_statistic(ad::constant(z), out.z_bar,
                              KernelSpec{kernel_c});
  return out;
}

}  // namespace

LossRecord wpp_step(TrainState& st, const BatchFn& data, const TrainConfig& cfg,
                    StepDiagnostics* diag) {
  cfg.validate();
  Model& G = *st.generator;
  Model& F = *st.encoder;
  Model& f = *st.critic;
  const std::int64_t b = cfg.batch_size;
  const std::int64_t m = G.arch().latent_dim;
  const double kernel_c = cfg.kernel_scale_for(m);
  const std::uint64_t iter = static_cast<std::uint64_t>(st.iteration);
  const std::uint64_t nc = static_cast<std::uint64_t>(cfg.n_critic);

  Batch x;
  Tensor z, eta, nu;
  LossRecord rec;
  rec.iteration = st.iteration;

  // Critic inner loop on mixed latents; each iteration resamples the data.
  for (std::uint64_t t = 0; t < nc; ++t) {
    x = data(b);
    z = draw_normal(st.run_seed, "z", iter * nc + t, {b, m});
    eta = draw_uniform(st.run_seed, "eta", iter * nc + t, {b, 1});
    nu = draw_uniform(st.run_seed, "nu", iter * nc + t, {b, 1});

    Tensor z_bar, z_tilde({b, m});
    {
      ad::NoGradGuard guard;
      z_bar = F.forward(ad::constant(x.data))->value;
    }
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t j = 0; j < m; ++j)
        z_tilde.at(i, j) =
            eta[i] * z.at(i, j) + (1.0 - eta[i]) * z_bar.at(i, j);

    Tensor x_hat;
    {
      ad::NoGradGuard guard;
      x_hat = G.forward(ad::constant(z_tilde))->value;
    }
    rec.l_f = critic_inner_update(f, st.opt_critic, x, x_hat, nu,
                                  cfg.schedule.at(cfg.lr_critic, st.iteration), cfg);
  }

  // Generator/encoder stage on the final critic batch.
  PrimalLosses pl = build_primal_losses(F, G, x, z, kernel_c);
  ModelFn critic_fn = [&f](const ad::Var& in) { return f.forward(in); };
  ad::Var l_wgan = generator_adversarial_loss(critic_fn, pl.x_rec);

  ad::Var loss_theta =
      ad::add(ad::scale(pl.l_d, 1.0 - cfg.gamma), ad::scale(l_wgan, cfg.gamma));
  ad::Var loss_phi = ad::scale(
      ad::add(pl.l_d, ad::scale(pl.l_mmd, cfg.lambda_mmd)), 1.0 - cfg.gamma);

  auto theta_grads = parameter_gradients(loss_theta, G.parameters());
  auto phi_grads = parameter_gradients(loss_phi, F.parameters());
  adam_update(G.parameters(), theta_grads, st.opt_generator,
              {cfg.schedule.at(cfg.lr_generator, st.iteration), cfg.beta1,
               cfg.beta2, 1e-8});
  adam_update(F.parameters(), phi_grads, st.opt_encoder,
              {cfg.schedule.at(cfg.lr_encoder, st.iteration), cfg.beta1,
               cfg.beta2, 1e-8});

  rec.l_d = pl.l_d->value[0];
  rec.l_mmd = pl.l_mmd->value[0];
  rec.l_wgan = l_wgan->value[0];
  rec.l_total = loss_theta->value[0];
  check_finite_or_throw(rec, "wpp_step");

  if (diag) {
    diag->x = x.data;
    diag->z = z;
    diag->eta = eta;
    diag->nu = nu;
    diag->critic_updates = cfg.n_critic;
  }
  st.iteration += 1;
  st.history.push_back(rec);
  return rec;
}

LossRecord wae_mmd_step(TrainState& st, const BatchFn& data, const TrainConfig& cfg,
                        StepDiagnostics* diag) {
  cfg.validate();
  Model& G = *st.generator;
  Model& F = *st.encoder;
  const std::int64_t b = cfg.batch_size;
  const std::int64_t m = G.arch().latent_dim;
  const std::uint64_t iter = static_cast<std::uint64_t>(st.iteration);
  const std::uint64_t nc = static_cast<std::uint64_t>(cfg.n_critic);

  Batch x = data(b);
  // Same stream slot as the blended trainer's final critic iteration.
  Tensor z = draw_normal(st.run_seed, "z", iter * nc + (nc - 1), {b, m});

  PrimalLosses pl = build_primal_losses(F, G, x, z, cfg.kernel_scale_for(m));
  ad::Var loss_phi = ad::add(pl.l_d, ad::scale(pl.l_mmd, cfg.lambda_mmd));

  auto theta_grads = parameter_gradients(pl.l_d, G.parameters());
  auto phi_grads = parameter_gradients(loss_phi, F.parameters());
  adam_update(G.parameters(), theta_grads, st.opt_generator,
              {cfg.schedule.at(cfg.lr_generator, st.iteration), cfg.beta1,
               cfg.beta2, 1e-8});
  adam_update(F.parameters(), phi_grads, st.opt_encoder,
              {cfg.schedule.at(cfg.lr_encoder, st.iteration), cfg.beta1,
               cfg.beta2, 1e-8});

  LossRecord rec;
  rec.iteration = st.iteration;
  rec.l_d = pl.l_d->value[0];
  rec.l_mmd = pl.l_mmd->value[0];
  rec.l_total = loss_phi->value[0];
  check_finite_or_throw(rec, "wae_mmd_step");

  if (diag) {
    diag->x = x.data;
    diag->z = z;
  }
  st.iteration += 1;
  st.history.push_back(rec);
  return rec;
}

LossRecord wgan_gp_step(TrainState& st, const BatchFn& data, const TrainConfig& cfg,
                        StepDiagnostics* diag, const Tensor* latent_override) {
  cfg.validate();
  Model& G = *st.generator;
  Model& f = *st.critic;
  const std::int64_t b = cfg.batch_size;
  const std::int64_t m = G.arch().latent_dim;
  const std::uint64_t iter = static_cast<std::uint64_t>(st.iteration);
  const std::uint64_t nc = static_cast<std::uint64_t>(cfg.n_critic);

  LossRecord rec;
  rec.iteration = st.iteration;

  Batch x;
  Tensor z, nu;
  for (std::uint64_t t = 0; t < nc; ++t) {
    x = data(b);
    z = draw_normal(st.run_seed, "z", iter * nc + t, {b, m});
    nu = draw_uniform(st.run_seed, "nu", iter * nc + t, {b, 1});
    Tensor x_hat;
    {
      ad::NoGradGuard guard;
      x_hat = G.forward(ad::constant(z))->value;
    }
    rec.l_f = critic_inner_update(f, st.opt_critic, x, x_hat, nu,
                                  cfg.schedule.at(cfg.lr_critic, st.iteration), cfg);
  }

  Tensor z_gen = latent_override
                     ? *latent_override
                     : draw_normal(st.run_seed, "z.gen", iter, {b, m});
  LossRecord gen_rec = wgan_generator_update(st, z_gen, cfg);
  rec.l_wgan = gen_rec.l_wgan;
  rec.l_total = rec.l_wgan;
  check_finite_or_throw(rec, "wgan_gp_step");

  if (diag) {
    diag->x = x.data;
    diag->z = z;
    diag->nu = nu;
    diag->critic_updates = cfg.n_critic;
  }
  st.iteration += 1;
  st.history.push_back(rec);
  return rec;
}

LossRecord wgan_generator_update(TrainState& st, const Tensor& latent,
                                 const TrainConfig& cfg) {
  Model& G = *st.generator;
  Model& f = *st.critic;
  ModelFn critic_fn = [&f](const ad::Var& in) { return f.forward(in); };
  ad::Var x_fake = G.forward(ad::constant(latent));
  ad::Var l_wgan = generator_adversarial_loss(critic_fn, x_fake);
  auto theta_grads = parameter_gradients(l_wgan, G.parameters());
  adam_update(G.parameters(), theta_grads, st.opt_generator,
              {cfg.schedule.at(cfg.lr_generator, st.iteration), cfg.beta1,
               cfg.beta2, 1e-8});
  LossRecord rec;
  rec.iteration = st.iteration;
  rec.l_wgan = l_wgan->value[0];
  rec.l_total = rec.l_wgan;
  return rec;
}

GenAlgo gen_algo_from_string(const std::string& s) {
  if (s == "wae" || s == "wae-mmd") return GenAlgo::WaeMmd;
  if (s == "wgan-gp" || s == "wgan") return GenAlgo::WganGp;
  if (s == "wpp" || s == "wassersteinpp") return GenAlgo::Wpp;
  throw std::invalid_argument("unknown generator algorithm: " + s);
}

std::string gen_algo_to_string(GenAlgo a) {
  switch (a) {
    case GenAlgo::WaeMmd: return "wae";
    case GenAlgo::WganGp: return "wgan-gp";
    case GenAlgo::Wpp: return "wpp";
  }
  throw std::logic_error("unknown algo");
}

GeneratorTrainResult train_generator(GenAlgo algo, DatasetHandle& dataset,
                                     const ArchSpec& arch, const TrainConfig& cfg,
                                     const LogCallback& on_log) {
  cfg.validate();
  TrainState st;
  st.run_seed = cfg.seed;
  st.generator = build_model(Role::Generator, arch, derive_seed(cfg.seed, "init.g"));
  st.opt_generator = AdamState::for_params(st.generator->parameters());
  if (algo != GenAlgo::WganGp) {
    st.encoder =
        build_model(Role::WaeEncoder, arch, derive_seed(cfg.seed, "init.f"));
    st.opt_encoder = AdamState::for_params(st.encoder->parameters());
  }
  if (algo != GenAlgo::WaeMmd) {
    st.critic = build_model(Role::Critic, arch, derive_seed(cfg.seed, "init.c"));
    st.opt_critic = AdamState::for_params(st.critic->parameters());
  }

  GeneratorTrainResult result;
  auto snapshot = [&]() {
    result.generator = st.generator->clone();
    result.encoder = st.encoder ? st.encoder->clone() : nullptr;
    result.critic = st.critic ? st.critic->clone() : nullptr;
    result.completed_iterations = st.iteration;
  };
  snapshot();

  BatchFn source = dataset_source(dataset);
  try {
    for (std::int64_t i = 0; i < cfg.iterations; ++i) {
      LossRecord rec;
      switch (algo) {
        case GenAlgo::WaeMmd: rec = wae_mmd_step(st, source, cfg); break;
        case GenAlgo::WganGp: rec = wgan_gp_step(st, source, cfg); break;
        case GenAlgo::Wpp: rec = wpp_step(st, source, cfg); break;
      }
      if ((i + 1) % cfg.log_interval == 0 || i + 1 == cfg.iterations) {
        snapshot();
        if (on_log) on_log(rec);
      }
    }
    result.status = TrainStatus::Completed;
    snapshot();
  } catch (const TrainDivergence& e) {
    std::cerr << "warning: " << e.what() << "; keeping last snapshot at iteration "
              << result.completed_iterations << "\n";
    result.status = TrainStatus::NanAbort;
  }
  result.history = st.history;
  return result;
}

CodecTrainResult train_codec(Model& frozen_generator, std::int64_t code_sites,
                             DatasetHandle& dataset, const TrainConfig& cfg,
                             const LogCallback& on_log) {
  cfg.validate();
  if (code_sites < 0) throw std::invalid_argument("train_codec: code_sites >= 0");
  if (frozen_generator.role() != Role::Generator)
    throw std::invalid_argument("train_codec: generator checkpoint required");

  const std::uint64_t fingerprint_before = frozen_generator.fingerprint();
  frozen_generator.set_training(false);
  frozen_generator.set_requires_grad(false);

  ArchSpec arch = frozen_generator.arch();
  arch.noise_dim = arch.latent_dim;
  if (arch.family == ArchFamily::Mlp) {
    arch.code_dims = code_sites;
  } else {
    const std::int64_t s0 = arch.code_map_side();
    if (code_sites % (s0 * s0) != 0)
      throw std::invalid_argument(
          "train_codec: code_sites must fill whole code-map channels");
    arch.code_channels = code_sites / (s0 * s0);
  }

  TrainState st;
  st.run_seed = derive_seed(cfg.seed, "codec");
  if (code_sites > 0) {
    st.rate_encoder =
        build_model(Role::RateEncoder, arch, derive_seed(cfg.seed, "init.e"));
    st.opt_rate_encoder = AdamState::for_params(st.rate_encoder->parameters());
  }
  st.mapper = build_model(Role::Mapper, arch, derive_seed(cfg.seed, "init.b"));
  st.opt_mapper = AdamState::for_params(st.mapper->parameters());

  const std::int64_t b = cfg.batch_size;
  const std::int64_t m = arch.latent_dim;
  const double kernel_c = cfg.kernel_scale_for(m);

  CodecTrainResult result;
  result.lambda_mmd_used = cfg.lambda_mmd;
  result.code_sites = code_sites;
  auto snapshot = [&]() {
    result.rate_encoder = st.rate_encoder ? st.rate_encoder->clone() : nullptr;
    result.mapper = st.mapper->clone();
  };
  snapshot();

  try {
    for (std::int64_t i = 0; i < cfg.iterations; ++i) {
      const std::uint64_t iter = static_cast<std::uint64_t>(st.iteration);
      Batch x = dataset.next_batch(b);
      Tensor noise = draw_uniform(st.run_seed, "noise", iter, {b, arch.noise_dim});
      Tensor z = draw_normal(st.run_seed, "z", iter, {b, m});

      Batch noise_batch{noise, Space::Z};
      auto enc = rate_encode(st.rate_encoder.get(), ad::constant(x.data),
                             noise_batch, arch, cfg.quant_temperature);
      ad::Var z_bar = st.mapper->forward(enc.mapper_input);
      ad::Var x_hat = frozen_generator.forward(z_bar);

      ad::Var l_rec = distortion_norm(x.data, x_hat);
      ad::Var l_mmd =
          mmd_u_statistic(ad::constant(z), z_bar, KernelSpec{kernel_c});
      ad::Var loss = ad::add(l_rec, ad::scale(l_mmd, cfg.lambda_mmd));

      std::vector<ad::Var> params = st.mapper->parameters();
      const std::size_t mapper_count = params.size();
      if (st.rate_encoder)
        for (const auto& p : st.rate_encoder->parameters()) params.push_back(p);
      auto grads = parameter_gradients(loss, params);

      std::vector<Tensor> mapper_grads(grads.begin(),
                                       grads.begin() + mapper_count);
      adam_update(st.mapper->parameters(), mapper_grads, st.opt_mapper,
                  {cfg.schedule.at(cfg.lr_codec, st.iteration), cfg.beta1,
                   cfg.beta2, 1e-8});
      if (st.rate_encoder) {
        std::vector<Tensor> enc_grads(grads.begin() + mapper_count, grads.end());
        adam_update(st.rate_encoder->parameters(), enc_grads,
                    st.opt_rate_encoder,
                    {cfg.schedule.at(cfg.lr_codec, st.iteration), cfg.beta1,
                     cfg.beta2, 1e-8});
      }

      LossRecord rec;
      rec.iteration = st.iteration;
      rec.l_d = l_rec->value[0];
      rec.l_mmd = l_mmd->value[0];
      rec.l_total = loss->value[0];
      check_finite_or_throw(rec, "train_codec");
      st.history.push_back(rec);
      st.iteration += 1;
      if ((i + 1) % cfg.log_interval == 0 || i + 1 == cfg.iterations) {
        snapshot();
        if (on_log) on_log(rec);
      }
    }
    result.status = TrainStatus::Completed;
    snapshot();
  } catch (const TrainDivergence& e) {
    std::cerr << "warning: " << e.what() << "; keeping last snapshot\n";
    result.status = TrainStatus::NanAbort;
  }

  frozen_generator.set_requires_grad(true);
  if (frozen_generator.fingerprint() != fingerprint_before)
    throw std::logic_error("train_codec: frozen generator was mutated");
  result.history = st.history;
  return result;
}

double lambda_schedule(double rate, const std::map<double, double>& mse_cae_table,
                       double base_lambda, double reference_rate) {
  if (mse_cae_table.empty())
    throw std::invalid_argument("lambda_schedule: empty MSE table");
  auto lookup = [&](double r) {
    auto exact = mse_cae_table.find(r);
    if (exact != mse_cae_table.end()) return exact->second;
    double best_key = mse_cae_table.begin()->first;
    double best_dist = std::abs(best_key - r);
    for (const auto& [k, v] : mse_cae_table) {
      const double d = std::abs(k - r);
      if (d < best_dist) {
        best_dist = d;
        best_key = k;
      }
    }
    std::cerr << "warning: lambda_schedule: rate " << r
              << " not tabulated, using nearest rate " << best_key << "\n";
    return mse_cae_table.at(best_key);
  };
  auto ref = mse_cae_table.find(reference_rate);
  if (ref == mse_cae_table.end())
    throw std::invalid_argument("lambda_schedule: reference rate not tabulated");
  if (ref->second <= 0.0)
    throw std::invalid_argument("lambda_schedule: reference MSE must be > 0");
  return base_lambda * lookup(rate) / ref->second;
}

namespace {

struct JointModels {
  Model* generator;
  Model* rate_encoder;  // may be null
  Model* mapper;
};

ad::Var joint_decode(JointModels mdl, const Batch& x, const Batch* noise,
                     const ArchSpec& arch, double temperature) {
  ad::Var mapper_in;
  if (code_site_count(arch) > 0) {
    auto enc = rate_encode(mdl.rate_encoder, ad::constant(x.data),
                           noise ? *noise : Batch{Tensor({x.size(), 0}), Space::Z},
                           arch, temperature);
    mapper_in = enc.mapper_input;
  } else if (noise && noise->data.numel() > 0) {
    mapper_in = assemble_mapper_input(nullptr, noise, arch);
  } else {
    // Zero-rate deterministic baseline: a constant placeholder input.
    mapper_in = ad::constant(Tensor::zeros({x.size(), 1}));
  }
  ad::Var z_bar = mdl.mapper->forward(mapper_in);
  return mdl.generator->forward(z_bar);
}

}  // namespace

JointCodecTrainResult train_cae(DatasetHandle& dataset, std::int64_t code_sites,
                                const ArchSpec& base_arch, const TrainConfig& cfg,
                                const LogCallback& on_log) {
  cfg.validate();
  ArchSpec arch = base_arch;
  arch.noise_dim = 0;  // deterministic decoder
  if (arch.family == ArchFamily::Mlp) {
    arch.code_dims = code_sites;
  } else {
    const std::int64_t s0 = arch.code_map_side();
    if (code_sites % (s0 * s0) != 0)
      throw std::invalid_argument("train_cae: code_sites must fill channels");
    arch.code_channels = code_sites / (s0 * s0);
  }

  TrainState st;
  st.run_seed = derive_seed(cfg.seed, "cae");
  st.generator = build_model(Role::Generator, arch, derive_seed(cfg.seed, "init.g"));
  st.opt_generator = AdamState::for_params(st.generator->parameters());
  st.mapper = build_model(Role::Mapper, arch, derive_seed(cfg.seed, "init.b"));
  st.opt_mapper = AdamState::for_params(st.mapper->parameters());
  if (code_sites > 0) {
    st.rate_encoder =
        build_model(Role::RateEncoder, arch, derive_seed(cfg.seed, "init.e"));
    st.opt_rate_encoder = AdamState::for_params(st.rate_encoder->parameters());
  }

  JointCodecTrainResult result;
  auto snapshot = [&]() {
    result.generator = st.generator->clone();
    result.mapper = st.mapper->clone();
    result.rate_encoder = st.rate_encoder ? st.rate_encoder->clone() : nullptr;
  };
  snapshot();

  try {
    for (std::int64_t i = 0; i < cfg.iterations; ++i) {
      Batch x = dataset.next_batch(cfg.batch_size);
      ad::Var x_hat = joint_decode(
          {st.generator.get(), st.rate_encoder.get(), st.mapper.get()}, x,
          nullptr, arch, cfg.quant_temperature);
      ad::Var loss = distortion_norm(x.data, x_hat);

      std::vector<ad::Var> params = st.generator->parameters();
      const std::size_t g_count = params.size();
      for (const auto& p : st.mapper->parameters()) params.push_back(p);
      const std::size_t gb_count = params.size();
      if (st.rate_encoder)
        for (const auto& p : st.rate_encoder->parameters()) params.push_back(p);
      auto grads = parameter_gradients(loss, params);

      const AdamConfig ac{cfg.schedule.at(cfg.lr_codec, st.iteration), cfg.beta1,
                          cfg.beta2, 1e-8};
      adam_update(st.generator->parameters(),
                  {grads.begin(), grads.begin() + g_count}, st.opt_generator, ac);
      adam_update(st.mapper->parameters(),
                  {grads.begin() + g_count, grads.begin() + gb_count},
                  st.opt_mapper, ac);
      if (st.rate_encoder)
        adam_update(st.rate_encoder->parameters(),
                    {grads.begin() + gb_count, grads.end()}, st.opt_rate_encoder,
                    ac);

      LossRecord rec;
      rec.iteration = st.iteration;
      rec.l_d = loss->value[0];
      rec.l_total = rec.l_d;
      check_finite_or_throw(rec, "train_cae");
      st.history.push_back(rec);
      st.iteration += 1;
      if ((i + 1) % cfg.log_interval == 0 || i + 1 == cfg.iterations) {
        snapshot();
        if (on_log) on_log(rec);
      }
    }
    result.status = TrainStatus::Completed;
    snapshot();
  } catch (const TrainDivergence& e) {
    std::cerr << "warning: " << e.what() << "; keeping last snapshot\n";
    result.status = TrainStatus::NanAbort;
  }
  result.history = st.history;
  return result;
}

JointCodecTrainResult train_gc(DatasetHandle& dataset, std::int64_t code_sites,
                               double lambda_divergence, const ArchSpec& base_arch,
                               const TrainConfig& cfg, const LogCallback& on_log) {
  cfg.validate();
  ArchSpec arch = base_arch;
  arch.noise_dim = arch.latent_dim;
  if (arch.family == ArchFamily::Mlp) {
    arch.code_dims = code_sites;
  } else {
    const std::int64_t s0 = arch.code_map_side();
    if (code_sites % (s0 * s0) != 0)
      throw std::invalid_argument("train_gc: code_sites must fill channels");
    arch.code_channels = code_sites / (s0 * s0);
  }

  TrainState st;
  st.run_seed = derive_seed(cfg.seed, "gc");
  st.generator = build_model(Role::Generator, arch, derive_seed(cfg.seed, "init.g"));
  st.opt_generator = AdamState::for_params(st.generator->parameters());
  st.mapper = build_model(Role::Mapper, arch, derive_seed(cfg.seed, "init.b"));
  st.opt_mapper = AdamState::for_params(st.mapper->parameters());
  st.critic = build_model(Role::Critic, arch, derive_seed(cfg.seed, "init.c"));
  st.opt_critic = AdamState::for_params(st.critic->parameters());
  if (code_sites > 0) {
    st.rate_encoder =
        build_model(Role::RateEncoder, arch, derive_seed(cfg.seed, "init.e"));
    st.opt_rate_encoder = AdamState::for_params(st.rate_encoder->parameters());
  }

  JointCodecTrainResult result;
  auto snapshot = [&]() {
    result.generator = st.generator->clone();
    result.mapper = st.mapper->clone();
    result.rate_encoder = st.rate_encoder ? st.rate_encoder->clone() : nullptr;
    result.critic = st.critic->clone();
  };
  snapshot();

  const std::int64_t b = cfg.batch_size;
  const std::uint64_t nc = static_cast<std::uint64_t>(cfg.n_critic);
  JointModels mdl{st.generator.get(), st.rate_encoder.get(), st.mapper.get()};

  try {
    for (std::int64_t i = 0; i < cfg.iterations; ++i) {
      const std::uint64_t iter = static_cast<std::uint64_t>(st.iteration);

      Batch x;
      Batch noise;
      double l_f_last = 0.0;
      // Critic inner loop on reconstructions, mirroring the blended trainer.
      for (std::uint64_t t = 0; t < nc; ++t) {
        x = dataset.next_batch(b);
        noise = Batch{draw_uniform(st.run_seed, "noise", iter * nc + t,
                                   {b, arch.noise_dim}),
                      Space::Z};
        Tensor nu = draw_uniform(st.run_seed, "nu", iter * nc + t, {b, 1});
        Tensor x_hat;
        {
          ad::NoGradGuard guard;
          x_hat = joint_decode(mdl, x, &noise, arch, cfg.quant_temperature)->value;
        }
        l_f_last = critic_inner_update(
            *st.critic, st.opt_critic, x, x_hat, nu,
            cfg.schedule.at(cfg.lr_critic, st.iteration), cfg);
      }

      // Joint update of G, B, E on the final critic batch.
      ad::Var x_hat = joint_decode(mdl, x, &noise, arch, cfg.quant_temperature);
      ad::Var l_d = distortion_norm(x.data, x_hat);
      ModelFn critic_fn = [&](const ad::Var& in) { return st.critic->forward(in); };
      ad::Var l_adv = generator_adversarial_loss(critic_fn, x_hat);
      ad::Var loss = ad::add(l_d, ad::scale(l_adv, lambda_divergence));

      std::vector<ad::Var> params = st.generator->parameters();
      const std::size_t g_count = params.size();
      for (const auto& p : st.mapper->parameters()) params.push_back(p);
      const std::size_t gb_count = params.size();
      if (st.rate_encoder)
        for (const auto& p : st.rate_encoder->parameters()) params.push_back(p);
      auto grads = parameter_gradients(loss, params);

      const AdamConfig ac{cfg.schedule.at(cfg.lr_codec, st.iteration), cfg.beta1,
                          cfg.beta2, 1e-8};
      adam_update(st.generator->parameters(),
                  {grads.begin(), grads.begin() + g_count}, st.opt_generator, ac);
      adam_update(st.mapper->parameters(),
                  {grads.begin() + g_count, grads.begin() + gb_count},
                  st.opt_mapper, ac);
      if (st.rate_encoder)
        adam_update(st.rate_encoder->parameters(),
                    {grads.begin() + gb_count, grads.end()}, st.opt_rate_encoder,
                    ac);

      LossRecord rec;
      rec.iteration = st.iteration;
      rec.l_f = l_f_last;
      rec.l_d = l_d->value[0];
      rec.l_wgan = l_adv->value[0];
      rec.l_total = loss->value[0];
      check_finite_or_throw(rec, "train_gc");
      st.history.push_back(rec);
      st.iteration += 1;
      if ((i + 1) % cfg.log_interval == 0 || i + 1 == cfg.iterations) {
        snapshot();
        if (on_log) on_log(rec);
      }
    }
    result.status = TrainStatus::Completed;
    snapshot();
  } catch (const TrainDivergence& e) {
    std::cerr << "warning: " << e.what() << "; keeping last snapshot\n";
    result.status = TrainStatus::NanAbort;
  }
  result.history = st.history;
  return result;
}

}  // namespace dplc
