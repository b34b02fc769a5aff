#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "dplc/models.hpp"
#include "dplc/optim.hpp"

namespace dplc {

// Self-describing single-file container: magic + version, a JSON header
// (role, architecture, config fingerprint, iteration, seed record, section
// sizes) and raw little-endian doubles for parameters, normalization
// buffers, and optimizer moments. Round trips are bit-exact.
struct Checkpoint {
  ModelPtr model;
  AdamState optimizer;
  std::string config_fingerprint;
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(Model& model, const std::string& path,
                     const AdamState* optimizer = nullptr,
                     const std::string& config_fingerprint = "",
                     std::int64_t iteration = 0, std::uint64_t seed = 0);

/// Loads a checkpoint; if `expected_role` is given, a role mismatch is an
/// error. Corrupt or version-mismatched files raise std::runtime_error.
Checkpoint load_checkpoint(const std::string& path,
                           std::optional<Role> expected_role = std::nullopt);

}  // namespace dplc
