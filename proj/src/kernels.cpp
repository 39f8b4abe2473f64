#include "sep/kernels.hpp"

#include "sep/special.hpp"

namespace sep::kernels {

namespace {

template <class RowTerm>
double chunked_sum(Eigen::Index rows, RowTerm&& term) {
  const Eigen::Index chunks = (rows + kChunkRows - 1) / kChunkRows;
  std::vector<double> partial(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index end = std::min(rows, (c + 1) * kChunkRows);
    double acc = 0.0;
    for (Eigen::Index i = c * kChunkRows; i < end; ++i) acc += term(i);
    partial[static_cast<std::size_t>(c)] = acc;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace

double probit_log_likelihood_serial(const Matrix& x, const Vector& y, const Vector& theta) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) acc += log_normal_cdf(y[i] * x.row(i).dot(theta));
  return acc;
}

double probit_log_likelihood(const Matrix& x, const Vector& y, const Vector& theta) {
  return chunked_sum(x.rows(), [&](Eigen::Index i) { return log_normal_cdf(y[i] * x.row(i).dot(theta)); });
}

double mog_log_likelihood_serial(const Matrix& x, const std::vector<Vector>& means, const MoGModel& model) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) acc += sep::mog_log_likelihood(x.row(i).transpose(), means, model);
  return acc;
}

double mog_log_likelihood(const Matrix& x, const std::vector<Vector>& means, const MoGModel& model) {
  return chunked_sum(x.rows(),
                     [&](Eigen::Index i) { return sep::mog_log_likelihood(x.row(i).transpose(), means, model); });
}

}  // namespace sep::kernels
