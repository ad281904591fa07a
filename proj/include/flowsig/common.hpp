// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace flowsig {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Single safeguard added to every l2-norm denominator in the flow pipeline.
inline constexpr double kEpsNum = 1e-8;

// Error hierarchy. kind() is the machine-readable tag the CLI prints.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define FLOWSIG_ERROR_TYPE(Name, Tag)                                        \
  class Name : public Error {                                                \
  public:                                                                    \
    using Error::Error;                                                      \
    const char* kind() const noexcept override { return Tag; }               \
  };

FLOWSIG_ERROR_TYPE(FormatError, "format")
FLOWSIG_ERROR_TYPE(ParameterError, "parameter")
FLOWSIG_ERROR_TYPE(RangeError, "range")
FLOWSIG_ERROR_TYPE(StructuralError, "structural")
FLOWSIG_ERROR_TYPE(PreconditionError, "precondition")
FLOWSIG_ERROR_TYPE(TrainingError, "training")
FLOWSIG_ERROR_TYPE(LocalizationError, "localization")
FLOWSIG_ERROR_TYPE(CalibrationError, "calibration")

#undef FLOWSIG_ERROR_TYPE

// Median of a copy; averages the two middle elements for even sizes.
template <typename Range>
double median_of(Range values) {
  if (values.empty()) return 0.0;
  const auto n = values.size();
  auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  double hi = *mid;
  if (n % 2 == 1) return hi;
  double lo = *std::max_element(values.begin(), mid);
  return 0.5 * (lo + hi);
}

// 64-bit FNV-1a over a sequence of 64-bit words (little-endian bytes).
inline std::uint64_t fnv1a64(std::initializer_list<std::uint64_t> words) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint64_t w : words) {
    for (int i = 0; i < 8; ++i) {
      h ^= (w >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// Unbiased draw in [0, n) from a 64-bit engine; std distributions are not
// portable across standard libraries, so determinism needs this by hand.
template <typename Engine>
std::uint64_t uniform_index(Engine& rng, std::uint64_t n) {
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t x;
  do { x = rng(); } while (x >= limit);
  return x % n;
}

template <typename Engine>
double uniform01(Engine& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

// Box-Muller; one draw per call keeps streams simple to reason about.
template <typename Engine>
double standard_normal(Engine& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace flowsig
