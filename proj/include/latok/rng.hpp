#pragma once
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latok {

// Deterministic PRNG (xoshiro256** seeded via splitmix64). Deliberately not
// std::mt19937 + std distributions: those are implementation-defined, and the
// byte-identical-output guarantees must hold independent of the standard
// library. Every consumer of randomness in the library draws from this.
struct Rng {
  uint64_t s[4];

  explicit Rng(uint64_t seed = 0, uint64_t stream = 0) { reseed(seed, stream); }

  void reseed(uint64_t seed, uint64_t stream = 0) {
    uint64_t x = seed ^ (0x6a09e667f3bcc909ull * (stream + 1));
    for (auto& w : s) w = splitmix(x);
  }

  // Derived generator for (seed, stream) fan-out, e.g. one stream per episode.
  static Rng stream(uint64_t seed, uint64_t idx) { return Rng(seed, idx); }

  uint64_t u64() {
    uint64_t r = rotl(s[1] * 5, 7) * 9;
    uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return r;
  }

  // Uniform in [0, n). Widening multiply keeps bias below 2^-64.
  uint64_t below(uint64_t n) {
    return (uint64_t)(((unsigned __int128)u64() * n) >> 64);
  }
  int below_int(int n) { return (int)below((uint64_t)n); }

  float uniform() { return (float)((u64() >> 40) * 0x1.0p-24); }  // [0,1)
  double uniform_double() { return (u64() >> 11) * 0x1.0p-53; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller without a cached spare: two draws per call, no hidden state.
    double u1 = (u64() >> 11) * 0x1.0p-53;
    double u2 = (u64() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return mean + stddev * r * std::cos(6.283185307179586477 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  // First m entries of a uniform random permutation of v. Consumes exactly m
  // draws, so m = 0 leaves the generator untouched (trace-identity reductions
  // depend on that).
  template <typename T>
  std::vector<T> perm_prefix(std::vector<T> v, size_t m) {
    if (m > v.size()) m = v.size();
    for (size_t i = 0; i < m; ++i) {
      size_t j = i + (size_t)below((uint64_t)(v.size() - i));
      std::swap(v[i], v[j]);
    }
    v.resize(m);
    return v;
  }

  std::string state_string() const {
    std::ostringstream os;
    for (int i = 0; i < 4; ++i) {
      if (i) os << ':';
      os << std::hex << s[i];
    }
    return os.str();
  }

  void set_state(const std::string& str) {
    std::istringstream is(str);
    std::string part;
    for (int i = 0; i < 4; ++i) {
      if (!std::getline(is, part, ':'))
        throw std::runtime_error("Rng::set_state: malformed state string");
      s[i] = std::stoull(part, nullptr, 16);
    }
  }

 private:
  static uint64_t splitmix(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }
};

}  // namespace latok
