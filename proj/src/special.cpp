#include "sep/special.hpp"

#include <cmath>

namespace sep {

namespace {

constexpr double kTailSwitch = -6.0;
constexpr int kFractionTerms = 80;

// Phi(-t) / phi(t) for t > 6: 1 / (t + 1 / (t + 2 / (t + 3 / ...))), evaluated backwards.
double mills_ratio_tail(double t) {
  double tail = t;
  for (int k = kFractionTerms; k >= 1; --k) tail = t + k / tail;
  return 1.0 / tail;
}

}  // namespace

double normal_log_pdf(double z) { return -0.5 * z * z - kLogSqrt2Pi; }

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double log_normal_cdf(double z) {
  if (z < kTailSwitch) return normal_log_pdf(z) + std::log(mills_ratio_tail(-z));
  if (z > 5.0) return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  return std::log(normal_cdf(z));
}

double inverse_mills_ratio(double z) {
  if (z < kTailSwitch) return 1.0 / mills_ratio_tail(-z);
  return std::exp(normal_log_pdf(z) - log_normal_cdf(z));
}

}  // namespace sep
