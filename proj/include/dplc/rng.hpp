#pragma once

#include <algorithm>
#include <cstdint>
#include <string_view>
#include <vector>

namespace dplc {

// Deterministic random stream (xoshiro256** seeded via splitmix64).
// All sampling in the project goes through this class so that runs are
// reproducible across platforms; std::normal_distribution et al. are
// implementation-defined and deliberately avoided.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform draw in [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller (pairs cached).
  double normal();

  /// Uniform integer in [0, n). Requires n >= 1.
  std::int64_t uniform_int(std::int64_t n);

  void fill_uniform(double* dst, std::int64_t n);
  void fill_normal(double* dst, std::int64_t n);

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

 private:
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// Substream derivation. One root seed per run; every consumer derives its
// own stream as derive_seed(root, tag, index), where `tag` names the
// consumer (e.g. "wpp.prior") and `index` is a counter (iteration, worker
// id, ...). The scheme is splitmix64 applied to root ^ fnv1a(tag) + index,
// which decorrelates streams without any shared state between modules.
std::uint64_t fnv1a64(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                          std::uint64_t index = 0);

}  // namespace dplc
