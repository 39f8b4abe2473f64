#pragma once

#include <numbers>

namespace sep {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

double normal_log_pdf(double z);
double normal_cdf(double z);

/// log Phi(z), finite for every finite z. Below z = -6 the Gaussian tail is
/// evaluated through the Mills-ratio continued fraction in log space.
double log_normal_cdf(double z);

/// phi(z) / Phi(z), the derivative of log Phi(z).
double inverse_mills_ratio(double z);

}  // namespace sep
