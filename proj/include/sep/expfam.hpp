#pragma once

// Gaussian exponential-family algebra.
//
// Factors are stored in natural form (r = precision * mean, lam = precision) so
// that products, quotients and powers are linear operations on the parameters.
// Moment form is only produced at projection boundaries.

#include <Eigen/Dense>

#include <optional>
#include <vector>

namespace sep {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct GaussianMoment;

/// Gaussian factor in natural parameters. lam may be indefinite (site factors).
struct GaussianNatural {
  Vector r;
  Matrix lam;

  GaussianNatural() = default;
  GaussianNatural(Vector r_, Matrix lam_);

  /// The unit factor f(theta) = 1.
  static GaussianNatural unit(Eigen::Index dim);

  Eigen::Index dim() const noexcept { return r.size(); }
};

/// Normalizable Gaussian in mean/covariance form.
struct GaussianMoment {
  Vector mean;
  Matrix cov;

  GaussianMoment() = default;
  GaussianMoment(Vector mean_, Matrix cov_);

  static GaussianMoment standard(Eigen::Index dim);

  Eigen::Index dim() const noexcept { return mean.size(); }
};

/// Unnormalized log probabilities over J categories.
struct CategoricalDist {
  Vector log_weights;

  /// exp(log_weights); only meaningful after categorical_normalize.
  Vector probabilities() const { return log_weights.array().exp().matrix(); }
};

/// Jitter ladder added to the diagonal before a matrix is declared non-PD.
inline constexpr double kJitterLadder[] = {0.0, 1e-9, 1e-7};

/// Cholesky factor of m, retrying with the jitter ladder. Empty if m is not PD.
std::optional<Eigen::LLT<Matrix>> pd_cholesky(const Matrix& m);

bool is_normalizable(const GaussianNatural& g);

/// (m + m^T) / 2
Matrix symmetrized(const Matrix& m);

GaussianMoment to_moments(const GaussianNatural& g);
GaussianNatural to_natural(const GaussianMoment& m);

GaussianNatural factor_multiply(const GaussianNatural& a, const GaussianNatural& b);
GaussianNatural factor_divide(const GaussianNatural& a, const GaussianNatural& b);
GaussianNatural factor_power(const GaussianNatural& a, double beta);

/// KL[p || q] between two normalizable Gaussians, via Cholesky factors.
double kl_gaussian(const GaussianMoment& p, const GaussianMoment& q);

/// Log-sum-exp normalization; returned log_weights are log probabilities.
CategoricalDist categorical_normalize(const CategoricalDist& c);

/// Largest absolute difference over all natural parameters.
double max_abs_diff(const GaussianNatural& a, const GaussianNatural& b);

// Block-structured factors: a product of independent Gaussians over disjoint
// parameter blocks (one block for probit, one per cluster mean for mixtures).
using FactorBlocks = std::vector<GaussianNatural>;
using MomentBlocks = std::vector<GaussianMoment>;

FactorBlocks unit_blocks(std::size_t blocks, Eigen::Index dim);
FactorBlocks blocks_multiply(const FactorBlocks& a, const FactorBlocks& b);
FactorBlocks blocks_divide(const FactorBlocks& a, const FactorBlocks& b);
FactorBlocks blocks_power(const FactorBlocks& a, double beta);
bool blocks_normalizable(const FactorBlocks& a);
MomentBlocks blocks_to_moments(const FactorBlocks& a);
FactorBlocks blocks_to_natural(const MomentBlocks& a);
double max_abs_diff(const FactorBlocks& a, const FactorBlocks& b);

/// Number of stored scalars: D + D^2 per block.
std::size_t parameter_count(const FactorBlocks& a);

}  // namespace sep
