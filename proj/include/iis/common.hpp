#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace iis {

inline constexpr const char* kToolVersion = "0.1.0";

// Bad arguments or preconditions (CLI exit 1).
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class DataCode {
  io,
  bad_magic,
  bad_version,
  bad_dtype,
  truncated,
  dim_overflow,
  zero_samples,
  invariant,
};

// Malformed or inconsistent data artifacts (CLI exit 2).
class DataError : public std::runtime_error {
 public:
  DataError(DataCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  DataCode code() const noexcept { return code_; }

 private:
  DataCode code_;
};

// Numeric failures: non-finite values, singular systems, divergence (CLI exit 3).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

//! Deterministic counter-based generator (splitmix64). Identical seed,
//! identical stream; no global state anywhere in the library.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) noexcept
      : seed_(seed), state_(seed) {}

  static constexpr const char* algorithm() noexcept { return "splitmix64"; }
  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  //! Uniform double in [0, 1).
  double uniform() noexcept { return double(next_u64() >> 11) * 0x1.0p-53; }

  //! Standard normal via Box-Muller (no cached spare, fully deterministic).
  double normal() noexcept {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  //! Standard Gumbel(0, 1) draw.
  double gumbel() noexcept {
    double u = uniform();
    if (u < 0x1.0p-53) u = 0x1.0p-53;
    return -std::log(-std::log(u));
  }

  //! Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  //! Independent substream derived from the original seed, not the current
  //! state, so forks are reproducible regardless of consumption order.
  RandomSource fork(std::uint64_t stream) const noexcept {
    std::uint64_t z = seed_ + (stream + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return RandomSource(z ^ (z >> 31));
  }

  template <typename It>
  void shuffle(It first, It last) noexcept {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

  Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal();
    return m;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

//! ceil(s * m) guarded against ulp noise (0.3 * 10 must give 3, not 4).
inline Eigen::Index ceil_count(double s, Eigen::Index m) {
  const double raw = std::ceil(s * double(m) - 1e-9);
  Eigen::Index k = raw <= 0.0 ? 0 : Eigen::Index(raw);
  return k > m ? m : k;
}

inline void ensure_finite(const Eigen::Ref<const Eigen::MatrixXd>& m,
                          const char* what) {
  if (!m.allFinite()) {
    throw NumericError(std::string(what) + ": non-finite values");
  }
}

}  // namespace iis
