#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string_view>

namespace recunlearn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Fans a global seed out to named pipeline stages so that stages draw from
// independent streams: derive_seed(seed, "train"), derive_seed(seed, "request", 2), ...
// FNV-1a over the stage name, mixed with the seed through splitmix64.
inline uint64_t derive_seed(uint64_t seed, std::string_view stage) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return splitmix64(seed ^ splitmix64(h));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view stage, uint64_t index) {
  return splitmix64(derive_seed(seed, stage) ^ splitmix64(index ^ 0x51ed2700a1b3c2d4ull));
}

}  // namespace recunlearn
