#include "sep/expfam.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "sep/errors.hpp"

namespace sep {

namespace {

void require_same_dim(const GaussianNatural& a, const GaussianNatural& b, const char* op) {
  if (a.dim() != b.dim()) {
    throw DimensionMismatch(std::string(op) + ": dimension " + std::to_string(a.dim()) + " vs " +
                            std::to_string(b.dim()));
  }
}

void require_same_size(const FactorBlocks& a, const FactorBlocks& b) {
  if (a.size() != b.size()) throw DimensionMismatch("block count mismatch");
}

}  // namespace

GaussianNatural::GaussianNatural(Vector r_, Matrix lam_) : r(std::move(r_)), lam(std::move(lam_)) {
  if (lam.rows() != r.size() || lam.cols() != r.size()) {
    throw DimensionMismatch("natural parameters: r has length " + std::to_string(r.size()) +
                            " but lam is " + std::to_string(lam.rows()) + "x" +
                            std::to_string(lam.cols()));
  }
}

GaussianNatural GaussianNatural::unit(Eigen::Index dim) {
  return {Vector::Zero(dim), Matrix::Zero(dim, dim)};
}

GaussianMoment::GaussianMoment(Vector mean_, Matrix cov_) : mean(std::move(mean_)), cov(std::move(cov_)) {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
    throw DimensionMismatch("moments: mean has length " + std::to_string(mean.size()) +
                            " but cov is " + std::to_string(cov.rows()) + "x" +
                            std::to_string(cov.cols()));
  }
}

GaussianMoment GaussianMoment::standard(Eigen::Index dim) {
  return {Vector::Zero(dim), Matrix::Identity(dim, dim)};
}

std::optional<Eigen::LLT<Matrix>> pd_cholesky(const Matrix& m) {
  if (!m.allFinite()) return std::nullopt;
  // Jitter repairs rounding, not missing information: a zero or negative pivot is final.
  if ((m.diagonal().array() <= 0.0).any()) return std::nullopt;
  for (double jitter : kJitterLadder) {
    Matrix a = m;
    a.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success) return llt;
  }
  return std::nullopt;
}

bool is_normalizable(const GaussianNatural& g) { return pd_cholesky(g.lam).has_value(); }

Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

GaussianMoment to_moments(const GaussianNatural& g) {
  auto llt = pd_cholesky(g.lam);
  if (!llt) throw NotNormalizable("to_moments: precision matrix is not positive definite");
  const Eigen::Index d = g.dim();
  Matrix cov = symmetrized(llt->solve(Matrix::Identity(d, d)));
  Vector mean = llt->solve(g.r);
  return {std::move(mean), std::move(cov)};
}

GaussianNatural to_natural(const GaussianMoment& m) {
  auto llt = pd_cholesky(m.cov);
  if (!llt) throw NotNormalizable("to_natural: covariance matrix is not positive definite");
  const Eigen::Index d = m.dim();
  Matrix lam = symmetrized(llt->solve(Matrix::Identity(d, d)));
  Vector r = llt->solve(m.mean);
  return {std::move(r), std::move(lam)};
}

GaussianNatural factor_multiply(const GaussianNatural& a, const GaussianNatural& b) {
  require_same_dim(a, b, "factor_multiply");
  return {a.r + b.r, symmetrized(a.lam + b.lam)};
}

GaussianNatural factor_divide(const GaussianNatural& a, const GaussianNatural& b) {
  require_same_dim(a, b, "factor_divide");
  return {a.r - b.r, symmetrized(a.lam - b.lam)};
}

GaussianNatural factor_power(const GaussianNatural& a, double beta) {
  return {beta * a.r, symmetrized(beta * a.lam)};
}

double kl_gaussian(const GaussianMoment& p, const GaussianMoment& q) {
  if (p.dim() != q.dim()) throw DimensionMismatch("kl_gaussian: dimension mismatch");
  Eigen::LLT<Matrix> lp(p.cov);
  Eigen::LLT<Matrix> lq(q.cov);
  if (lp.info() != Eigen::Success || lq.info() != Eigen::Success) {
    throw NotNormalizable("kl_gaussian: covariance is not positive definite");
  }
  const Eigen::Index d = p.dim();
  // tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
  const Matrix lp_mat = lp.matrixL();
  const Matrix a = lq.matrixL().solve(lp_mat);
  const Vector diff = q.mean - p.mean;
  const Vector b = lq.matrixL().solve(diff);
  const double logdet_p = 2.0 * lp.matrixLLT().diagonal().array().log().sum();
  const double logdet_q = 2.0 * lq.matrixLLT().diagonal().array().log().sum();
  const double kl = 0.5 * (a.squaredNorm() + b.squaredNorm() - static_cast<double>(d) + logdet_q - logdet_p);
  return std::max(kl, 0.0);
}

CategoricalDist categorical_normalize(const CategoricalDist& c) {
  const double mx = c.log_weights.size() ? c.log_weights.maxCoeff() : -std::numeric_limits<double>::infinity();
  if (!(mx > -std::numeric_limits<double>::infinity()) || std::isnan(mx)) {
    throw DegenerateInput("categorical_normalize: no finite log weight");
  }
  const double lse = mx + std::log((c.log_weights.array() - mx).exp().sum());
  return {(c.log_weights.array() - lse).matrix()};
}

double max_abs_diff(const GaussianNatural& a, const GaussianNatural& b) {
  require_same_dim(a, b, "max_abs_diff");
  return std::max((a.r - b.r).cwiseAbs().maxCoeff(), (a.lam - b.lam).cwiseAbs().maxCoeff());
}

FactorBlocks unit_blocks(std::size_t blocks, Eigen::Index dim) {
  return FactorBlocks(blocks, GaussianNatural::unit(dim));
}

FactorBlocks blocks_multiply(const FactorBlocks& a, const FactorBlocks& b) {
  require_same_size(a, b);
  FactorBlocks out;
  out.reserve(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out.push_back(factor_multiply(a[j], b[j]));
  return out;
}

FactorBlocks blocks_divide(const FactorBlocks& a, const FactorBlocks& b) {
  require_same_size(a, b);
  FactorBlocks out;
  out.reserve(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out.push_back(factor_divide(a[j], b[j]));
  return out;
}

FactorBlocks blocks_power(const FactorBlocks& a, double beta) {
  FactorBlocks out;
  out.reserve(a.size());
  for (const auto& g : a) out.push_back(factor_power(g, beta));
  return out;
}

bool blocks_normalizable(const FactorBlocks& a) {
  for (const auto& g : a) {
    if (!is_normalizable(g)) return false;
  }
  return true;
}

MomentBlocks blocks_to_moments(const FactorBlocks& a) {
  MomentBlocks out;
  out.reserve(a.size());
  for (const auto& g : a) out.push_back(to_moments(g));
  return out;
}

FactorBlocks blocks_to_natural(const MomentBlocks& a) {
  FactorBlocks out;
  out.reserve(a.size());
  for (const auto& m : a) out.push_back(to_natural(m));
  return out;
}

double max_abs_diff(const FactorBlocks& a, const FactorBlocks& b) {
  require_same_size(a, b);
  double m = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, max_abs_diff(a[j], b[j]));
  return m;
}

std::size_t parameter_count(const FactorBlocks& a) {
  std::size_t n = 0;
  for (const auto& g : a) n += static_cast<std::size_t>(g.r.size() + g.lam.size());
  return n;
}

}  // namespace sep
