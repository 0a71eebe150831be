#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace zonas {

/// SplitMix64 finalizer; used to derive independent streams from a root seed.
std::uint64_t mix64(std::uint64_t x);

/// Stable 64-bit FNV-1a hash of a byte string.
std::uint64_t fnv1a64(std::string_view bytes);
/// fnv1a64 as 16 lowercase hex digits.
std::string digest_hex(std::string_view bytes);

/// Derive a child seed from a root seed and a label. Weights of a given
/// operation are seeded by their name, so they do not depend on which other
/// operations exist in the network.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

/// xoshiro256** generator with portable uniform/normal draws. The standard
/// library distributions are implementation-defined, which would break
/// byte-identical replay across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace zonas
