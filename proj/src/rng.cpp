#include "vbtree/rng.hpp"

namespace vbtree {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t RngStream::derive_key(std::uint64_t seed, std::string_view tag, std::uint64_t counter) {
  return splitmix64(splitmix64(splitmix64(seed) ^ fnv1a(tag)) ^ counter);
}

RngStream::RngStream(std::uint64_t seed, std::string_view tag, std::uint64_t counter) {
  const std::uint64_t key = derive_key(seed, tag, counter);
  std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32),
                    static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(seed)};
  engine_.seed(seq);
}

}  // namespace vbtree
