#pragma once

#include <string>
#include <utility>
#include <vector>

#include "zonas/tensor.hpp"

namespace zonas {

/// Versioned binary container of named tensors.
///
/// Layout (little-endian): magic "ZNSC", u32 version, u32 count, then per
/// entry: u32 name length, name bytes, u32 rank, rank x u64 dims, f64 data.
struct NamedTensor {
  std::string name;
  Tensor value;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::string& path, const std::vector<NamedTensor>& entries);
/// Throws FormatError on a bad magic, unknown version or truncated file.
std::vector<NamedTensor> read_container(const std::string& path);

}  // namespace zonas
