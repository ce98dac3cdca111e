#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vbtree {

/// Deterministic random stream addressed by (seed, purpose tag, counter).
/// Distinct triples give independent engines, so sample k can be drawn on
/// any thread in any order and still produce the same values.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view tag, std::uint64_t counter);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::mt19937_64& engine() { return engine_; }

  static std::uint64_t derive_key(std::uint64_t seed, std::string_view tag, std::uint64_t counter);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace vbtree
