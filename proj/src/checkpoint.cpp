#include "dplc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace dplc {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'P', 'L', 'C', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

void write_doubles(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor read_doubles(std::ifstream& in, Shape shape) {
  Tensor t(std::move(shape));
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
  return t;
}

json shape_to_json(const Shape& s) { return json(s); }
Shape shape_from_json(const json& j) { return j.get<Shape>(); }

}  // namespace

void save_checkpoint(Model& model, const std::string& path,
                     const AdamState* optimizer,
                     const std::string& config_fingerprint,
                     std::int64_t iteration, std::uint64_t seed) {
  json header;
  header["version"] = kVersion;
  header["role"] = role_to_string(model.role());
  header["arch"] = json::parse(model.arch().to_json_string());
  header["config_fingerprint"] = config_fingerprint;
  header["iteration"] = iteration;
  header["seed"] = seed;
  header["init_seed"] = model.init_seed();

  json param_shapes = json::array();
  for (const auto& p : model.parameters()) param_shapes.push_back(shape_to_json(p->value.shape));
  header["param_shapes"] = param_shapes;

  json buffer_shapes = json::array();
  for (const auto& b : model.buffer_values()) buffer_shapes.push_back(shape_to_json(b.shape));
  header["buffer_shapes"] = buffer_shapes;

  header["adam_present"] = optimizer != nullptr && !optimizer->empty();
  if (optimizer && !optimizer->empty()) header["adam_step"] = optimizer->step;

  const std::string header_str = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_str.data(), static_cast<std::streamsize>(hlen));

  for (const auto& p : model.parameters()) write_doubles(out, p->value);
  for (const auto& b : model.buffer_values()) write_doubles(out, b);
  if (optimizer && !optimizer->empty()) {
    for (const auto& t : optimizer->m) write_doubles(out, t);
    for (const auto& t : optimizer->v) write_doubles(out, t);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path,
                           std::optional<Role> expected_role) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1u << 24))
    throw std::runtime_error("checkpoint: corrupt header length in " + path);
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);

  json header = json::parse(header_str, nullptr, /*allow_exceptions=*/false);
  if (header.is_discarded())
    throw std::runtime_error("checkpoint: unparsable header in " + path);
  if (header.at("version").get<std::uint32_t>() != kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);

  const Role role = role_from_string(header.at("role").get<std::string>());
  if (expected_role && role != *expected_role)
    throw std::runtime_error("checkpoint: role mismatch, file holds '" +
                             role_to_string(role) + "', expected '" +
                             role_to_string(*expected_role) + "'");

  Checkpoint ckpt;
  ArchSpec arch = ArchSpec::from_json_string(header.at("arch").dump());
  ckpt.model = std::make_unique<Model>(role, arch,
                                       header.at("init_seed").get<std::uint64_t>());
  ckpt.config_fingerprint = header.at("config_fingerprint").get<std::string>();
  ckpt.iteration = header.at("iteration").get<std::int64_t>();
  ckpt.seed = header.at("seed").get<std::uint64_t>();

  // Parameters.
  std::vector<Shape> param_shapes;
  for (const auto& j : header.at("param_shapes")) param_shapes.push_back(shape_from_json(j));
  if (param_shapes.size() != ckpt.model->parameters().size())
    throw std::runtime_error("checkpoint: parameter layout mismatch in " + path);
  std::int64_t total = 0;
  for (const auto& s : param_shapes) total += shape_numel(s);
  Tensor flat({total});
  std::int64_t off = 0;
  for (const auto& s : param_shapes) {
    Tensor t = read_doubles(in, s);
    std::copy(t.data.begin(), t.data.end(), flat.data.begin() + off);
    off += t.numel();
  }
  ckpt.model->set_flat_parameters(flat);

  // Buffers.
  std::vector<Tensor> buffers;
  for (const auto& j : header.at("buffer_shapes"))
    buffers.push_back(read_doubles(in, shape_from_json(j)));
  ckpt.model->set_buffer_values(buffers);

  if (header.at("adam_present").get<bool>()) {
    ckpt.optimizer.step = header.at("adam_step").get<std::int64_t>();
    for (const auto& s : param_shapes)
      ckpt.optimizer.m.push_back(read_doubles(in, shape_from_json(json(s))));
    for (const auto& s : param_shapes)
      ckpt.optimizer.v.push_back(read_doubles(in, shape_from_json(json(s))));
  }
  return ckpt;
}

}  // namespace dplc
