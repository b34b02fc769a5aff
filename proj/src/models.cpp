#include "dplc/models.hpp"

#include <cstring>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace dplc {

using nlohmann::json;
using namespace nn;

std::string role_to_string(Role role) {
  switch (role) {
    case Role::Generator: return "generator";
    case Role::WaeEncoder: return "wae-encoder";
    case Role::Critic: return "critic";
    case Role::RateEncoder: return "rate-encoder";
    case Role::Mapper: return "mapper";
  }
  throw std::logic_error("unknown role");
}

Role role_from_string(const std::string& s) {
  if (s == "generator") return Role::Generator;
  if (s == "wae-encoder") return Role::WaeEncoder;
  if (s == "critic") return Role::Critic;
  if (s == "rate-encoder") return Role::RateEncoder;
  if (s == "mapper") return Role::Mapper;
  throw std::invalid_argument("unknown role: " + s);
}

std::string ArchSpec::to_json_string() const {
  json j;
  j["family"] = family == ArchFamily::Mlp ? "mlp" : "conv-dcgan";
  j["latent_dim"] = latent_dim;
  j["data_dim"] = data_dim;
  j["code_dims"] = code_dims;
  j["noise_dim"] = noise_dim;
  j["hidden"] = hidden;
  j["lrelu_slope"] = lrelu_slope;
  j["final_whiten"] = final_whiten;
  j["resolution"] = resolution;
  j["image_channels"] = image_channels;
  j["base_channels"] = base_channels;
  j["stages"] = stages;
  j["code_channels"] = code_channels;
  j["residual_blocks"] = residual_blocks;
  return j.dump();
}

ArchSpec ArchSpec::from_json_string(const std::string& s) {
  json j = json::parse(s);
  static const std::set<std::string> known = {
      "family", "latent_dim", "data_dim", "code_dims", "noise_dim",
      "hidden", "lrelu_slope", "final_whiten", "resolution", "image_channels",
      "base_channels", "stages", "code_channels", "residual_blocks"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw std::invalid_argument("ArchSpec: unknown key '" + it.key() + "'");
  ArchSpec a;
  const std::string fam = j.at("family").get<std::string>();
  if (fam == "mlp")
    a.family = ArchFamily::Mlp;
  else if (fam == "conv-dcgan")
    a.family = ArchFamily::ConvDcgan;
  else
    throw std::invalid_argument("ArchSpec: unknown family " + fam);
  a.latent_dim = j.at("latent_dim").get<std::int64_t>();
  a.data_dim = j.at("data_dim").get<std::int64_t>();
  a.code_dims = j.at("code_dims").get<std::int64_t>();
  a.noise_dim = j.at("noise_dim").get<std::int64_t>();
  a.hidden = j.at("hidden").get<std::vector<std::int64_t>>();
  a.lrelu_slope = j.at("lrelu_slope").get<double>();
  a.final_whiten = j.at("final_whiten").get<bool>();
  a.resolution = j.at("resolution").get<std::int64_t>();
  a.image_channels = j.at("image_channels").get<std::int64_t>();
  a.base_channels = j.at("base_channels").get<std::int64_t>();
  a.stages = j.at("stages").get<std::int64_t>();
  a.code_channels = j.at("code_channels").get<std::int64_t>();
  a.residual_blocks = j.at("residual_blocks").get<std::int64_t>();
  return a;
}

std::int64_t code_site_count(const ArchSpec& arch) {
  if (arch.family == ArchFamily::Mlp) return arch.code_dims;
  return arch.code_channels * arch.code_map_side() * arch.code_map_side();
}

Shape code_shape(const ArchSpec& arch) {
  if (arch.family == ArchFamily::Mlp) return {arch.code_dims};
  return {arch.code_channels, arch.code_map_side(), arch.code_map_side()};
}

namespace {

double he_std(std::int64_t fan_in, double slope) {
  return std::sqrt(2.0 / (1.0 + slope * slope) / static_cast<double>(fan_in));
}

std::int64_t mapper_in_dim_mlp(const ArchSpec& a) {
  return std::max<std::int64_t>(1, a.code_dims + a.noise_dim);
}

std::int64_t mapper_in_channels_conv(const ArchSpec& a) {
  const std::int64_t s0 = a.code_map_side();
  const std::int64_t nc = a.noise_dim / (s0 * s0);
  return std::max<std::int64_t>(1, a.code_channels + nc);
}

void validate_arch(Role role, const ArchSpec& a) {
  if (a.latent_dim < 1) throw std::invalid_argument("ArchSpec: latent_dim >= 1");
  if (a.family == ArchFamily::Mlp) {
    if (a.data_dim < 1) throw std::invalid_argument("ArchSpec: data_dim >= 1");
    if (a.hidden.empty()) throw std::invalid_argument("ArchSpec: hidden layers required");
    for (auto h : a.hidden)
      if (h < 1) throw std::invalid_argument("ArchSpec: hidden width >= 1");
    if (role == Role::RateEncoder && a.code_dims < 1)
      throw std::invalid_argument("ArchSpec: rate encoder needs code_dims >= 1");
    return;
  }
  if (a.stages < 1) throw std::invalid_argument("ArchSpec: stages >= 1");
  if (a.resolution < (std::int64_t{1} << a.stages) ||
      a.resolution % (std::int64_t{1} << a.stages) != 0)
    throw std::invalid_argument(
        "ArchSpec: resolution must be a multiple of 2^stages");
  if (a.image_channels < 1)
    throw std::invalid_argument("ArchSpec: image_channels >= 1");
  if (a.base_channels < 1)
    throw std::invalid_argument("ArchSpec: base_channels >= 1");
  const std::int64_t s0 = a.code_map_side();
  if (role == Role::Mapper && a.noise_dim % (s0 * s0) != 0)
    throw std::invalid_argument(
        "ArchSpec: noise_dim must fill whole channels of the code map");
  if (role == Role::RateEncoder && a.code_channels < 1)
    throw std::invalid_argument("ArchSpec: rate encoder needs code_channels >= 1");
  if (role == Role::Mapper && a.residual_blocks < 1)
    throw std::invalid_argument("ArchSpec: mapper needs residual_blocks >= 1");
}

void build_mlp(Role role, const ArchSpec& a, Rng& rng, Sequential& net) {
  std::int64_t in = 0, out = 0;
  bool whiten_out = false;
  switch (role) {
    case Role::Generator: in = a.latent_dim; out = a.data_dim; break;
    case Role::WaeEncoder: in = a.data_dim; out = a.latent_dim; whiten_out = a.final_whiten; break;
    case Role::Critic: in = a.data_dim; out = 1; break;
    case Role::RateEncoder: in = a.data_dim; out = a.code_dims; break;
    case Role::Mapper: in = mapper_in_dim_mlp(a); out = a.latent_dim; whiten_out = a.final_whiten; break;
  }
  std::int64_t prev = in;
  for (auto h : a.hidden) {
    net.add(std::make_unique<Linear>(prev, h, rng, he_std(prev, a.lrelu_slope)));
    net.add(std::make_unique<Activation>(ActKind::LeakyRelu, a.lrelu_slope));
    prev = h;
  }
  net.add(std::make_unique<Linear>(prev, out, rng,
                                   1.0 / std::sqrt(static_cast<double>(prev))));
  if (whiten_out) net.add(std::make_unique<BatchNorm>(out, false, rng));
}

void build_conv(Role role, const ArchSpec& a, Rng& rng, Sequential& net) {
  const std::int64_t res = a.resolution;
  const std::int64_t s0 = a.code_map_side();
  const std::int64_t c_top = a.base_channels << (a.stages - 1);

  auto encoder_trunk = [&](std::int64_t in_c) {
    // conv(4,2,1) ladder; batch norm from the second stage on.
    std::int64_t c = in_c, h = res;
    for (std::int64_t i = 0; i < a.stages; ++i) {
      const std::int64_t oc = a.base_channels << i;
      net.add(std::make_unique<Conv2d>(c, oc, 4, 2, 1, h, h, rng));
      if (i > 0) net.add(std::make_unique<BatchNorm>(oc, true, rng));
      net.add(std::make_unique<Activation>(ActKind::Relu));
      c = oc;
      h /= 2;
    }
    return c;
  };

  switch (role) {
    case Role::Generator: {
      net.add(std::make_unique<Linear>(a.latent_dim, c_top * s0 * s0, rng, 0.02));
      net.add(std::make_unique<RegroupRows>(s0 * s0, /*merge=*/false));
      net.add(std::make_unique<BatchNorm>(c_top, true, rng));
      net.add(std::make_unique<Activation>(ActKind::Relu));
      std::int64_t c = c_top, h = s0;
      for (std::int64_t i = 0; i < a.stages; ++i) {
        const std::int64_t oc =
            std::max(a.base_channels, c_top >> (i + 1));
        net.add(std::make_unique<ConvTranspose2d>(c, oc, 4, 2, 1, h, h, rng));
        net.add(std::make_unique<BatchNorm>(oc, true, rng));
        net.add(std::make_unique<Activation>(ActKind::Relu));
        c = oc;
        h *= 2;
      }
      net.add(std::make_unique<Conv2d>(c, a.image_channels, 3, 1, 1, h, h, rng));
      net.add(std::make_unique<Activation>(ActKind::Tanh));
      net.add(std::make_unique<NhwcToNchw>(a.image_channels, res, res));
      break;
    }
    case Role::WaeEncoder: {
      net.add(std::make_unique<NchwToNhwc>(a.image_channels, res, res));
      const std::int64_t c = encoder_trunk(a.image_channels);
      net.add(std::make_unique<RegroupRows>(s0 * s0, /*merge=*/true));
      net.add(std::make_unique<Linear>(c * s0 * s0, a.latent_dim, rng, 0.02));
      if (a.final_whiten)
        net.add(std::make_unique<BatchNorm>(a.latent_dim, false, rng));
      break;
    }
    case Role::RateEncoder: {
      net.add(std::make_unique<NchwToNhwc>(a.image_channels, res, res));
      const std::int64_t c = encoder_trunk(a.image_channels);
      net.add(std::make_unique<Conv2d>(c, a.code_channels, 3, 1, 1, s0, s0, rng));
      net.add(std::make_unique<NhwcToNchw>(a.code_channels, s0, s0));
      break;
    }
    case Role::Critic: {
      net.add(std::make_unique<NchwToNhwc>(a.image_channels, res, res));
      net.add(std::make_unique<Conv2d>(a.image_channels, a.base_channels, 3, 1, 1,
                                       res, res, rng));
      net.add(std::make_unique<Activation>(ActKind::LeakyRelu, a.lrelu_slope));
      std::int64_t c = a.base_channels, h = res;
      for (std::int64_t i = 0; i < a.stages; ++i) {
        const std::int64_t oc = a.base_channels << std::min<std::int64_t>(i, 3);
        net.add(std::make_unique<Conv2d>(c, oc, 4, 2, 1, h, h, rng));
        h /= 2;
        // Layer normalization keeps per-sample gradients independent, which
        // the gradient penalty requires.
        net.add(std::make_unique<LayerNorm>(h * h));
        net.add(std::make_unique<Activation>(ActKind::LeakyRelu, a.lrelu_slope));
        c = oc;
      }
      net.add(std::make_unique<RegroupRows>(h * h, /*merge=*/true));
      net.add(std::make_unique<Linear>(c * h * h, 1, rng, 0.02));
      break;
    }
    case Role::Mapper: {
      const std::int64_t in_c = mapper_in_channels_conv(a);
      net.add(std::make_unique<NchwToNhwc>(in_c, s0, s0));
      net.add(std::make_unique<Conv2d>(in_c, c_top, 3, 1, 1, s0, s0, rng));
      net.add(std::make_unique<Activation>(ActKind::Relu));
      for (std::int64_t i = 0; i < a.residual_blocks; ++i)
        net.add(std::make_unique<ResidualConvBlock>(c_top, s0, s0, rng));
      net.add(std::make_unique<RegroupRows>(s0 * s0, /*merge=*/true));
      net.add(std::make_unique<Linear>(c_top * s0 * s0, a.latent_dim, rng, 0.02));
      if (a.final_whiten)
        net.add(std::make_unique<BatchNorm>(a.latent_dim, false, rng));
      break;
    }
  }
}

}  // namespace

Model::Model(Role role, const ArchSpec& arch, std::uint64_t seed)
    : role_(role), arch_(arch), seed_(seed) {
  validate_arch(role, arch);
  Rng rng(derive_seed(seed, "model." + role_to_string(role)));
  if (arch.family == ArchFamily::Mlp)
    build_mlp(role, arch, rng, net_);
  else
    build_conv(role, arch, rng, net_);
  net_.params(params_);
}

void Model::check_input(const ad::Var& input) const {
  const Shape& s = input->value.shape;
  auto fail = [&](const std::string& expected) {
    throw std::invalid_argument("Model(" + role_to_string(role_) + "): input " +
                                shape_to_string(s) + ", expected " + expected);
  };
  if (role_ == Role::Generator) {
    if (s.size() != 2 || s[1] != arch_.latent_dim)
      fail("(b, " + std::to_string(arch_.latent_dim) + ")");
    return;
  }
  if (arch_.family == ArchFamily::Mlp) {
    std::int64_t want = arch_.data_dim;
    if (role_ == Role::Mapper) want = mapper_in_dim_mlp(arch_);
    if (s.size() != 2 || s[1] != want) fail("(b, " + std::to_string(want) + ")");
    return;
  }
  if (role_ == Role::Mapper) {
    const std::int64_t s0 = arch_.code_map_side();
    if (s.size() != 4 || s[1] != mapper_in_channels_conv(arch_) || s[2] != s0 ||
        s[3] != s0)
      fail("(b, k+noise channels, " + std::to_string(s0) + ", " +
           std::to_string(s0) + ")");
    return;
  }
  if (s.size() != 4 || s[1] != arch_.image_channels || s[2] != arch_.resolution ||
      s[3] != arch_.resolution)
    fail("(b, " + std::to_string(arch_.image_channels) + ", " +
         std::to_string(arch_.resolution) + ", " + std::to_string(arch_.resolution) +
         ")");
}

ad::Var Model::forward(const ad::Var& input) {
  check_input(input);
  return net_.forward(input, training_);
}

Tensor Model::forward_inference(const Tensor& input) {
  ad::NoGradGuard guard;
  const bool was_training = training_;
  training_ = false;
  Tensor out = forward(ad::constant(input))->value;
  training_ = was_training;
  return out;
}

void Model::set_requires_grad(bool enabled) {
  for (auto& p : params_) p->requires_grad = enabled;
}

std::vector<Tensor*> Model::buffers() {
  std::vector<Tensor*> out;
  net_.buffers(out);
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

Tensor Model::flat_parameters() const {
  Tensor flat({parameter_count()});
  std::int64_t off = 0;
  for (const auto& p : params_) {
    std::copy(p->value.data.begin(), p->value.data.end(),
              flat.data.begin() + off);
    off += p->value.numel();
  }
  return flat;
}

void Model::set_flat_parameters(const Tensor& flat) {
  if (flat.numel() != parameter_count())
    throw std::invalid_argument("set_flat_parameters: size mismatch");
  std::int64_t off = 0;
  for (auto& p : params_) {
    std::copy(flat.data.begin() + off, flat.data.begin() + off + p->value.numel(),
              p->value.data.begin());
    off += p->value.numel();
  }
}

std::vector<Tensor> Model::buffer_values() const {
  std::vector<Tensor> out;
  for (auto* b : const_cast<Model*>(this)->buffers()) out.push_back(*b);
  return out;
}

void Model::set_buffer_values(const std::vector<Tensor>& values) {
  auto bufs = buffers();
  if (bufs.size() != values.size())
    throw std::invalid_argument("set_buffer_values: count mismatch");
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    if (!bufs[i]->same_shape(values[i]))
      throw std::invalid_argument("set_buffer_values: shape mismatch");
    *bufs[i] = values[i];
  }
}

std::uint64_t Model::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const Tensor& t) {
    for (double v : t.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h ^= bits;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) mix(p->value);
  for (const auto& b : buffer_values()) mix(b);
  return h;
}

std::unique_ptr<Model> Model::clone() const {
  auto copy = std::make_unique<Model>(role_, arch_, seed_);
  copy->set_flat_parameters(flat_parameters());
  copy->set_buffer_values(buffer_values());
  copy->training_ = training_;
  return copy;
}

ModelPtr build_model(Role role, const ArchSpec& arch, std::uint64_t seed) {
  return std::make_unique<Model>(role, arch, seed);
}

Batch generator_forward(Model& generator, const Batch& z) {
  if (generator.role() != Role::Generator)
    throw std::invalid_argument("generator_forward: model is not a generator");
  return make_batch(generator.forward_inference(z.data), Space::X);
}

Batch mapper_forward(Model& mapper, const Batch& code_plus_noise) {
  if (mapper.role() != Role::Mapper)
    throw std::invalid_argument("mapper_forward: model is not a mapper");
  return make_batch(mapper.forward_inference(code_plus_noise.data), Space::Z);
}

ad::Var assemble_mapper_input(const ad::Var* code, const Batch* noise,
                              const ArchSpec& arch) {
  if (!code && !noise)
    throw std::invalid_argument("assemble_mapper_input: nothing to assemble");
  if (arch.family == ArchFamily::Mlp) {
    if (code && noise)
      return ad::concat_cols(*code, ad::constant(noise->data));
    if (code) return *code;
    return ad::constant(noise->data);
  }
  const std::int64_t s0 = arch.code_map_side();
  ad::Var noise_map;
  if (noise) {
    const std::int64_t b = noise->size();
    const std::int64_t nc = arch.noise_dim / (s0 * s0);
    if (noise->sample_dim() != arch.noise_dim)
      throw std::invalid_argument("assemble_mapper_input: noise dimension mismatch");
    noise_map = ad::reshape(ad::constant(noise->data), {b, nc, s0, s0});
  }
  if (code && noise) return ad::concat_channels(*code, noise_map);
  if (code) return *code;
  return noise_map;
}

RateEncodeResult rate_encode(Model* rate_encoder, const ad::Var& x,
                             const Batch& noise, const ArchSpec& arch,
                             double temperature) {
  RateEncodeResult r;
  const std::int64_t sites = code_site_count(arch);
  if (sites == 0) {
    // Zero-rate: the code carries nothing; the mapper sees only noise.
    r.mapper_input = assemble_mapper_input(nullptr, &noise, arch);
    return r;
  }
  if (!rate_encoder || rate_encoder->role() != Role::RateEncoder)
    throw std::invalid_argument("rate_encode: need a rate-encoder model");
  ad::Var raw = rate_encoder->forward(x);
  const std::int64_t b = raw->value.shape[0];

  CodeSpec spec = make_sign_corners_spec(sites);
  ad::Var flat = arch.family == ArchFamily::Mlp ? raw : ad::reshape(raw, {b, sites});
  QuantizationResult q = soft_quantize(flat, spec, temperature);
  r.quant = q;
  r.code = arch.family == ArchFamily::Mlp
               ? q.surrogate
               : ad::reshape(q.surrogate,
                             {b, arch.code_channels, arch.code_map_side(),
                              arch.code_map_side()});
  if (noise.data.numel() > 0 && arch.noise_dim > 0)
    r.mapper_input = assemble_mapper_input(&r.code, &noise, arch);
  else
    r.mapper_input = assemble_mapper_input(&r.code, nullptr, arch);
  return r;
}

}  // namespace dplc
