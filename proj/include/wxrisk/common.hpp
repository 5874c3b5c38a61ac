// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace wxrisk {

inline constexpr double kPi = 3.14159265358979323846;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

template <class... Args>
[[noreturn]] void fail(Args&&... args) {
  throw Error(cat(std::forward<Args>(args)...));
}

template <class... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

// FNV-1a 64-bit; used for artifact hashes and seed substream derivation.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

// Independent substream seed for (root, label). Label collisions aside, the
// derived streams are unrelated, so per-item work can be farmed out in any
// order without changing results.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = char((root >> (8 * i)) & 0xff);
  return fnv1a64(label, fnv1a64(std::string_view(buf, 8)));
}

// Deterministic RNG. mt19937_64 has a standardized algorithm, and all
// variate transforms are written out here instead of using libstdc++
// distributions (whose streams are implementation defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Box-Muller; one variate per call, u1 shifted into (0, 1].
  double normal() {
    double u1 = (double(eng_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double laplace(double scale) {
    double u = uniform01() - 0.5;
    double t = -std::log(1.0 - 2.0 * std::abs(u));
    return (u < 0.0 ? -scale : scale) * t;
  }

  // Uniform integer in [0, n), n > 0.
  std::size_t below(std::size_t n) {
    return std::size_t((unsigned __int128)eng_() * n >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 eng_;
};

// Shortest round-trip decimal form; keeps CSV/JSON artifacts byte-stable.
inline std::string fmt_double(double v) {
  char buf[40];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto r = std::from_chars(b, e, out);
  return r.ec == std::errc() && r.ptr == e;
}

inline bool parse_u64(std::string_view s, std::uint64_t& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto r = std::from_chars(b, e, out);
  return r.ec == std::errc() && r.ptr == e;
}

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      out.emplace_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

// Inverse of softplus; y > 0.
inline double softplus_inv(double y) {
  return y > 30.0 ? y : std::log(std::expm1(y));
}

}  // namespace wxrisk
