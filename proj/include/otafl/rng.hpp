#pragma once

#include <cstdint>
#include <random>

namespace otafl {

using Rng = std::mt19937_64;

// Every random quantity in a run is drawn from its own stream, keyed by the run
// seed, a purpose tag and up to two indices (client, round, replication...).
// Streams never share state, so the draw order of one consumer cannot perturb
// another.
enum class StreamTag : std::uint64_t {
  client_sgd = 1,
  channel_noise = 2,
  channel_gain = 3,
  partition = 4,
  synth_problem = 5,
  constant_probe = 6,
  model_init = 7,
  oracle = 8,
  dirichlet = 9,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng make_stream(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0,
                       std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(tag));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

}  // namespace otafl
