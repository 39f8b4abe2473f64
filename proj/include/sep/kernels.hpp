#pragma once

// Data-parallel inner loops. Each OpenMP kernel has a plain serial twin kept as
// the reference implementation for tests and benchmarks. Parallel reductions
// accumulate fixed-size chunks and combine them in chunk order, so results do
// not depend on the thread count.

#include <vector>

#include "sep/expfam.hpp"
#include "sep/likelihoods.hpp"

namespace sep::kernels {

inline constexpr Eigen::Index kChunkRows = 256;

/// sum_n log Phi(y_n theta^T x_n)
double probit_log_likelihood_serial(const Matrix& x, const Vector& y, const Vector& theta);
double probit_log_likelihood(const Matrix& x, const Vector& y, const Vector& theta);

/// sum_n log sum_j pi_j N(x_n; mu_j, sigma^2 I)
double mog_log_likelihood_serial(const Matrix& x, const std::vector<Vector>& means, const MoGModel& model);
double mog_log_likelihood(const Matrix& x, const std::vector<Vector>& means, const MoGModel& model);

}  // namespace sep::kernels
