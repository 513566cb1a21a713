#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace pcgan {

using Rng = std::mt19937_64;

//! 64-bit FNV-1a, used for seed derivation and configuration hashes.
inline std::uint64_t
fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL)
{
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t
splitmix64(std::uint64_t x)
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

//! Seed of an independent sub-stream identified by a tag and up to three
//! integer coordinates. Same inputs always give the same seed.
inline std::uint64_t
derive_seed(std::uint64_t master,
            std::string_view tag,
            std::uint64_t i = 0,
            std::uint64_t j = 0,
            std::uint64_t k = 0)
{
  std::uint64_t h = splitmix64(master ^ fnv1a(tag));
  h = splitmix64(h ^ splitmix64(i + 1));
  h = splitmix64(h ^ splitmix64(j + 0x100));
  h = splitmix64(h ^ splitmix64(k + 0x10000));
  return h;
}

inline double
uniform01(Rng& rng)
{
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double
standard_normal(Rng& rng)
{
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline std::size_t
uniform_index(Rng& rng, std::size_t n)
{
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline std::string
rng_state(const Rng& rng)
{
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void
set_rng_state(Rng& rng, const std::string& state)
{
  std::istringstream is(state);
  is >> rng;
  if (!is)
    throw std::invalid_argument("corrupt random generator state");
}

} // namespace pcgan
