#pragma once

// Binary parameter container shared by regressor weights and pose priors:
//   "EFTW" | u32 version | u32 n | n x u32 sizes | u8 tag | u64 count | count x f64
// All integers and floats little-endian.

#include <cstdint>
#include <string>
#include <vector>

namespace eft::detail {

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint8_t kTagGmmDiagonal = 0xF0;

struct Container {
  std::vector<std::uint32_t> sizes;
  std::uint8_t tag = 0;
  std::vector<double> values;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

}  // namespace eft::detail
