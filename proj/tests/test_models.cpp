#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dplc/checkpoint.hpp"
#include "dplc/models.hpp"

using namespace dplc;

namespace {

ArchSpec toy_mlp() {
  ArchSpec a;
  a.family = ArchFamily::Mlp;
  a.latent_dim = 2;
  a.data_dim = 3;
  a.code_dims = 2;
  a.noise_dim = 2;
  a.hidden = {8, 8};
  return a;
}

ArchSpec tiny_conv() {
  ArchSpec a;
  a.family = ArchFamily::ConvDcgan;
  a.latent_dim = 4;
  a.resolution = 8;
  a.image_channels = 3;
  a.base_channels = 4;
  a.stages = 2;
  a.code_channels = 2;
  a.noise_dim = 4;  // one channel on the 2x2 code map
  a.residual_blocks = 1;
  return a;
}

Tensor random_input(Role role, const ArchSpec& a, std::int64_t b, Rng& rng) {
  Shape shape;
  if (role == Role::Generator) {
    shape = {b, a.latent_dim};
  } else if (a.family == ArchFamily::Mlp) {
    shape = {b, role == Role::Mapper ? a.code_dims + a.noise_dim : a.data_dim};
  } else if (role == Role::Mapper) {
    const std::int64_t s0 = a.code_map_side();
    shape = {b, a.code_channels + a.noise_dim / (s0 * s0), s0, s0};
  } else {
    shape = {b, a.image_channels, a.resolution, a.resolution};
  }
  Tensor t(shape);
  rng.fill_normal(t.data.data(), t.numel());
  return t;
}

// Probe loss: fixed random weighting of the outputs. Gradients of every
// parameter are compared against central finite differences.
void gradient_check(Role role, const ArchSpec& arch, double tol = 1e-4) {
  Model model(role, arch, 99);
  Rng rng(7);
  const std::int64_t b = 3;
  Tensor input = random_input(role, arch, b, rng);

  Tensor out_probe;
  {
    ad::NoGradGuard guard;
    out_probe = model.forward(ad::constant(input))->value;
  }
  Tensor probe(out_probe.shape);
  rng.fill_normal(probe.data.data(), probe.numel());

  auto loss_of = [&]() {
    ad::Var out = model.forward(ad::constant(input));
    ad::Var flat_out = ad::reshape(out, {1, out->value.numel()});
    ad::Var flat_probe = ad::constant(Tensor({1, probe.numel()}, probe.data));
    return ad::sum_all(ad::mul(flat_out, flat_probe));
  };

  ad::Var loss = loss_of();
  auto grads = ad::grad(loss, model.parameters());

  Tensor flat = model.flat_parameters();
  const double h = 1e-5;
  // Probe a deterministic subset of parameters to keep runtime sane: every
  // parameter for small tensors, strided samples for large ones.
  std::int64_t flat_off = 0;
  for (std::size_t pi = 0; pi < model.parameters().size(); ++pi) {
    const auto& p = model.parameters()[pi];
    const std::int64_t n = p->value.numel();
    const std::int64_t stride = n <= 24 ? 1 : n / 12;
    for (std::int64_t j = 0; j < n; j += stride) {
      const std::int64_t fj = flat_off + j;
      Tensor fp = flat;
      fp[fj] += h;
      model.set_flat_parameters(fp);
      double up;
      {
        ad::NoGradGuard guard;
        up = loss_of()->value[0];
      }
      fp[fj] -= 2 * h;
      model.set_flat_parameters(fp);
      double down;
      {
        ad::NoGradGuard guard;
        down = loss_of()->value[0];
      }
      model.set_flat_parameters(flat);
      const double fd = (up - down) / (2 * h);
      const double an = grads[pi]->value[j];
      CHECK(std::abs(fd - an) <= tol * (1.0 + std::abs(fd)));
    }
    flat_off += n;
  }
}

}  // namespace

TEST_CASE("mlp shape contracts") {
  ArchSpec a = toy_mlp();
  Model gen(Role::Generator, a, 1);
  Tensor z({5, 2});
  CHECK(gen.forward_inference(z).shape == Shape{5, 3});

  Model enc(Role::WaeEncoder, a, 2);
  Tensor x({5, 3});
  CHECK(enc.forward_inference(x).shape == Shape{5, 2});

  Model critic(Role::Critic, a, 3);
  CHECK(critic.forward_inference(x).shape == Shape{5, 1});

  Model rate(Role::RateEncoder, a, 4);
  CHECK(rate.forward_inference(x).shape == Shape{5, 2});

  Model mapper(Role::Mapper, a, 5);
  Tensor cn({5, 4});
  CHECK(mapper.forward_inference(cn).shape == Shape{5, 2});

  CHECK_THROWS_AS((void)gen.forward_inference(x), std::invalid_argument);
}

TEST_CASE("conv shape contracts") {
  ArchSpec a = tiny_conv();
  Model gen(Role::Generator, a, 1);
  Tensor z({2, 4});
  CHECK(gen.forward_inference(z).shape == Shape{2, 3, 8, 8});

  Model enc(Role::WaeEncoder, a, 2);
  Tensor x({2, 3, 8, 8});
  CHECK(enc.forward_inference(x).shape == Shape{2, 4});

  Model critic(Role::Critic, a, 3);
  CHECK(critic.forward_inference(x).shape == Shape{2, 1});

  // Stride-2 stages reduce the resolution to the code map side.
  Model rate(Role::RateEncoder, a, 4);
  CHECK(rate.forward_inference(x).shape == Shape{2, 2, 2, 2});

  Model mapper(Role::Mapper, a, 5);
  Tensor cn({2, 3, 2, 2});
  CHECK(mapper.forward_inference(cn).shape == Shape{2, 4});
}

TEST_CASE("64x64 encoder reduces to a 4x4 code map") {
  ArchSpec a;
  a.family = ArchFamily::ConvDcgan;
  a.latent_dim = 8;
  a.resolution = 64;
  a.base_channels = 4;  // thin for test speed; geometry is what matters
  a.stages = 4;
  a.code_channels = 3;
  a.noise_dim = 16;
  Model rate(Role::RateEncoder, a, 0);
  Tensor x({1, 3, 64, 64});
  CHECK(rate.forward_inference(x).shape == Shape{1, 3, 4, 4});
}

TEST_CASE("generator image outputs live in [-1,1] and stay finite") {
  ArchSpec a = tiny_conv();
  Model gen(Role::Generator, a, 7);
  Rng rng(8);
  Tensor z({4, 4});
  rng.fill_normal(z.data.data(), z.numel());
  for (auto& v : z.data) v *= 1000.0;  // extreme latents
  Tensor out = gen.forward_inference(z);
  for (double v : out.data) {
    CHECK(std::isfinite(v));
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("deterministic initialization and forwards") {
  ArchSpec a = toy_mlp();
  Model m1(Role::Generator, a, 42);
  Model m2(Role::Generator, a, 42);
  CHECK(m1.flat_parameters().data == m2.flat_parameters().data);
  Model m3(Role::Generator, a, 43);
  CHECK(m1.flat_parameters().data != m3.flat_parameters().data);

  Tensor z({3, 2}, {0.1, -0.2, 0.5, 1.0, -1.0, 0.0});
  CHECK(m1.forward_inference(z).data == m2.forward_inference(z).data);
}

TEST_CASE("gradient checks: mlp families") {
  ArchSpec a = toy_mlp();
  gradient_check(Role::Generator, a);
  gradient_check(Role::WaeEncoder, a);
  gradient_check(Role::Critic, a);
  gradient_check(Role::RateEncoder, a);
  gradient_check(Role::Mapper, a);
}

TEST_CASE("gradient checks: conv families") {
  ArchSpec a = tiny_conv();
  gradient_check(Role::Generator, a);
  gradient_check(Role::WaeEncoder, a);
  gradient_check(Role::Critic, a);
  gradient_check(Role::RateEncoder, a);
  gradient_check(Role::Mapper, a);
}

TEST_CASE("critic exposes input gradients (both families)") {
  for (bool conv : {false, true}) {
    ArchSpec a = conv ? tiny_conv() : toy_mlp();
    Model critic(Role::Critic, a, 11);
    Rng rng(12);
    Tensor x = random_input(Role::Critic, a, 2, rng);

    ad::Var xv = ad::leaf(x);
    ad::Var out = ad::sum_all(critic.forward(xv));
    auto g = ad::grad(out, {xv});

    const double h = 1e-5;
    const std::int64_t stride = std::max<std::int64_t>(1, x.numel() / 10);
    for (std::int64_t j = 0; j < x.numel(); j += stride) {
      Tensor xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      double up, down;
      {
        ad::NoGradGuard guard;
        up = ad::sum_all(critic.forward(ad::constant(xp)))->value[0];
        down = ad::sum_all(critic.forward(ad::constant(xm)))->value[0];
      }
      const double fd = (up - down) / (2 * h);
      CHECK(std::abs(fd - g[0]->value[j]) <= 1e-4 * (1.0 + std::abs(fd)));
    }
  }
}

TEST_CASE("rate_encode emits hard codes and consistent bitrate") {
  ArchSpec a = toy_mlp();
  Model enc(Role::RateEncoder, a, 3);
  Rng rng(4);
  Tensor x({6, 3});
  rng.fill_normal(x.data.data(), x.numel());
  Batch noise = sample_noise(make_noise_spec(a.noise_dim), 6, 5);

  auto r = rate_encode(&enc, ad::constant(x), noise, a);
  for (double v : r.code->value.data) CHECK((v == 1.0 || v == -1.0));
  CHECK(r.mapper_input->value.shape == Shape{6, 4});

  // Bits = product of the code dims; matches the quantization accounting.
  CHECK(bitrate_bpp(code_shape(a), {a.data_dim}) ==
        doctest::Approx(static_cast<double>(a.code_dims) / a.data_dim));
}

TEST_CASE("zero-rate encoding depends only on noise") {
  ArchSpec a = toy_mlp();
  a.code_dims = 0;
  Batch noise = sample_noise(make_noise_spec(a.noise_dim), 4, 9);
  Tensor x1({4, 3}), x2({4, 3});
  Rng rng(10);
  rng.fill_normal(x1.data.data(), x1.numel());
  rng.fill_normal(x2.data.data(), x2.numel());

  auto r1 = rate_encode(nullptr, ad::constant(x1), noise, a);
  auto r2 = rate_encode(nullptr, ad::constant(x2), noise, a);
  CHECK(r1.mapper_input->value.data == r2.mapper_input->value.data);
  CHECK(r1.quant.indices.empty());
}

TEST_CASE("mapper is sensitive to its noise input") {
  ArchSpec a = toy_mlp();
  Model mapper(Role::Mapper, a, 21);
  mapper.set_training(false);
  Tensor code({3, 2}, {1, -1, -1, -1, 1, 1});
  Batch n1 = sample_noise(make_noise_spec(2), 3, 100);
  Batch n2 = sample_noise(make_noise_spec(2), 3, 101);
  ad::Var c = ad::constant(code);
  Tensor out1, out2;
  {
    ad::NoGradGuard guard;
    out1 = mapper.forward(assemble_mapper_input(&c, &n1, a))->value;
    out2 = mapper.forward(assemble_mapper_input(&c, &n2, a))->value;
  }
  CHECK(out1.shape == Shape{3, 2});
  double diff = 0;
  for (std::int64_t i = 0; i < out1.numel(); ++i)
    diff += std::abs(out1[i] - out2[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  namespace fs = std::filesystem;
  const std::string path =
      (fs::temp_directory_path() / "dplc_ckpt_test.bin").string();

  ArchSpec a = toy_mlp();
  Model model(Role::WaeEncoder, a, 31);
  // Run one training-mode forward so running stats are nontrivial.
  Rng rng(32);
  Tensor x({8, 3});
  rng.fill_normal(x.data.data(), x.numel());
  (void)model.forward(ad::constant(x));

  Tensor probe({2, 3});
  rng.fill_normal(probe.data.data(), probe.numel());
  Tensor before = model.forward_inference(probe);

  AdamState opt = AdamState::for_params(model.parameters());
  opt.step = 17;
  for (auto& t : opt.m)
    for (auto& v : t.data) v = rng.normal();

  save_checkpoint(model, path, &opt, "fingerprint-abc", 123, 777);
  Checkpoint loaded = load_checkpoint(path);

  CHECK(loaded.model->role() == Role::WaeEncoder);
  CHECK(loaded.config_fingerprint == "fingerprint-abc");
  CHECK(loaded.iteration == 123);
  CHECK(loaded.seed == 777);
  CHECK(loaded.optimizer.step == 17);
  CHECK(loaded.optimizer.m[0].data == opt.m[0].data);

  Tensor after = loaded.model->forward_inference(probe);
  CHECK(before.data == after.data);  // bit-exact
  CHECK(loaded.model->fingerprint() == model.fingerprint());

  CHECK_THROWS_AS((void)load_checkpoint(path, Role::Generator),
                  std::runtime_error);

  // Corrupt file.
  {
    std::ofstream f(path, std::ios::binary);
    f << "garbage";
  }
  CHECK_THROWS_AS((void)load_checkpoint(path), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("clone preserves behavior, arch validation raises") {
  ArchSpec a = tiny_conv();
  Model gen(Role::Generator, a, 50);
  auto copy = gen.clone();
  Tensor z({2, 4}, {0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4});
  CHECK(gen.forward_inference(z).data == copy->forward_inference(z).data);

  ArchSpec bad = tiny_conv();
  bad.resolution = 10;  // not a multiple of 2^stages
  CHECK_THROWS_AS((void)Model(Role::Generator, bad, 0), std::invalid_argument);

  ArchSpec bad2 = tiny_conv();
  bad2.noise_dim = 3;  // does not fill whole code-map channels
  CHECK_THROWS_AS((void)Model(Role::Mapper, bad2, 0), std::invalid_argument);
}

TEST_CASE("arch spec json round trip rejects unknown keys") {
  ArchSpec a = tiny_conv();
  ArchSpec b = ArchSpec::from_json_string(a.to_json_string());
  CHECK(b.family == a.family);
  CHECK(b.resolution == a.resolution);
  CHECK(b.hidden == a.hidden);
  CHECK_THROWS_AS(
      (void)ArchSpec::from_json_string("{\"family\":\"mlp\",\"bogus\":1}"),
      std::invalid_argument);
}
