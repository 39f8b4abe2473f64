#include "sep/likelihoods.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "sep/errors.hpp"
#include "sep/quadrature.hpp"
#include "sep/special.hpp"

namespace sep {

ProbitSite::ProbitSite(Vector x_, double y_) : x(std::move(x_)), y(y_) {
  if (y != 1.0 && y != -1.0) throw ConfigInvalid("probit label must be -1 or +1, got " + std::to_string(y));
  if (!x.allFinite()) throw ConfigInvalid("probit input has non-finite entries");
}

MoGModel::MoGModel(int components_, double sigma_, GaussianMoment mean_prior_)
    : components(components_), sigma(sigma_), mean_prior(std::move(mean_prior_)) {
  if (components < 2) throw ConfigInvalid("mixture needs at least 2 components");
  if (!(sigma > 0.0)) throw ConfigInvalid("mixture sigma must be positive");
  log_mix = Vector::Constant(components, -std::log(static_cast<double>(components)));
}

namespace {

constexpr double kHermiteSkewLimit = 4.0;
constexpr double kPanelDepth = 40.0;
constexpr int kPanelOrder = 16;

// Lift moments of the scalar u = theta^T x back to theta. sx = S x, var_u = x^T S x.
GaussianMoment lift_projection(const GaussianMoment& cavity, const Vector& sx, double var_u,
                               double mean_shift, double tilted_var_u) {
  Vector mean = cavity.mean + sx * (mean_shift / var_u);
  Matrix cov = cavity.cov + (sx * sx.transpose()) * ((tilted_var_u - var_u) / (var_u * var_u));
  return {std::move(mean), symmetrized(cov)};
}

}  // namespace

TiltedResult probit_tilted_moments(const GaussianMoment& cavity, const ProbitSite& site) {
  if (cavity.dim() != site.x.size()) throw DimensionMismatch("probit_tilted_moments: dimension mismatch");
  const Vector sx = cavity.cov * site.x;
  const double var_u = site.x.dot(sx);
  const double mean_u = site.x.dot(cavity.mean);
  const double s2 = var_u + 1.0;
  const double s = std::sqrt(s2);
  const double z = site.y * mean_u / s;
  const double log_z = log_normal_cdf(z);
  if (var_u <= 0.0) return {cavity, log_z};
  const double ratio = inverse_mills_ratio(z);
  const double mean_shift = site.y * ratio * var_u / s;
  const double tilted_var_u = var_u - ratio * (z + ratio) * var_u * var_u / s2;
  return {lift_projection(cavity, sx, var_u, mean_shift, tilted_var_u), log_z};
}

TiltedResult tilted_moments_quadrature(const GaussianMoment& cavity, const ProbitSite& site, double alpha,
                                       int order) {
  if (cavity.dim() != site.x.size()) throw DimensionMismatch("tilted_moments_quadrature: dimension mismatch");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigInvalid("alpha must be finite and positive");
  const Vector sx = cavity.cov * site.x;
  const double var_u = site.x.dot(sx);
  const double mean_u = site.x.dot(cavity.mean);
  const double y = site.y;
  if (var_u < kDegenerateProjection) return {cavity, alpha * log_normal_cdf(y * mean_u)};

  auto log_tilted = [&](double u) {
    const double d = u - mean_u;
    return alpha * log_normal_cdf(y * u) - 0.5 * d * d / var_u;
  };

  // Newton on the (log-concave) tilted density in u to find its mode and curvature.
  double mode = mean_u;
  double curvature = 1.0 / var_u;
  for (int it = 0; it < 100; ++it) {
    const double z = y * mode;
    const double r = inverse_mills_ratio(z);
    const double grad = alpha * y * r - (mode - mean_u) / var_u;
    curvature = alpha * r * (z + r) + 1.0 / var_u;
    const double step = grad / curvature;
    mode += step;
    if (std::abs(step) <= 1e-14 * std::max(1.0, std::abs(mode))) break;
  }
  {
    const double z = y * mode;
    const double r = inverse_mills_ratio(z);
    curvature = alpha * r * (z + r) + 1.0 / var_u;
  }
  // Gauss-Hermite at the mode suits a near-Gaussian tilt. A broad cavity against the
  // unit-scale probit edge gives a skewed, half-truncated shape, integrated in panels instead.
  std::vector<double> offsets, log_terms;
  if (alpha * var_u <= kHermiteSkewLimit) {
    const double width = std::sqrt(2.0 / curvature);
    const GaussHermiteRule& rule = gauss_hermite_rule(order);
    for (int i = 0; i < rule.order(); ++i) {
      const double t = rule.nodes[i];
      // integrand / exp(-t^2), with du = width dt
      offsets.push_back(width * t);
      log_terms.push_back(std::log(rule.weights[i] * width) + log_tilted(mode + width * t) + t * t);
    }
  } else {
    // Concavity makes the level set {log_tilted >= peak - kPanelDepth} an interval.
    const double peak = log_tilted(mode);
    auto edge = [&](double dir) {
      double inside = 0.0, step = 1.0 / std::sqrt(curvature);
      while (log_tilted(mode + dir * step) > peak - kPanelDepth) {
        inside = step;
        step *= 2.0;
      }
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (inside + step);
        (log_tilted(mode + dir * mid) > peak - kPanelDepth ? inside : step) = mid;
      }
      return step;
    };
    const double lo = -edge(-1.0), hi = edge(1.0);
    // The log density bends no faster than alpha + 1/var_u anywhere.
    const double panel = 1.0 / std::sqrt(alpha + 1.0 / var_u);
    const int panels = std::max(1, static_cast<int>(std::ceil((hi - lo) / panel)));
    const double h = (hi - lo) / panels;
    const GaussLegendreRule& rule = gauss_legendre_rule(kPanelOrder);
    for (int p = 0; p < panels; ++p) {
      const double c = lo + h * (p + 0.5);
      for (int i = 0; i < rule.order(); ++i) {
        const double off = c + 0.5 * h * rule.nodes[i];
        offsets.push_back(off);
        log_terms.push_back(std::log(0.5 * h * rule.weights[i]) + log_tilted(mode + off));
      }
    }
  }
  const double max_log = *std::max_element(log_terms.begin(), log_terms.end());
  double z0 = 0.0, z1 = 0.0, z2 = 0.0;
  for (std::size_t i = 0; i < log_terms.size(); ++i) {
    const double w = std::exp(log_terms[i] - max_log);
    z0 += w;
    z1 += w * offsets[i];
    z2 += w * offsets[i] * offsets[i];
  }
  const double e1 = z1 / z0;
  const double tilted_var_u = std::max(z2 / z0 - e1 * e1, 0.0);
  // log of int exp(log_tilted) du, normalized by the cavity's sqrt(2 pi var_u).
  const double log_z = max_log + std::log(z0) - 0.5 * std::log(2.0 * std::numbers::pi * var_u);
  const double mean_shift = mode + e1 - mean_u;
  return {lift_projection(cavity, sx, var_u, mean_shift, tilted_var_u), log_z};
}

MogTilted mog_tilted_update(const MomentBlocks& cavity, const Vector& x, const MoGModel& model) {
  const auto J = static_cast<std::size_t>(model.components);
  if (cavity.size() != J) throw DimensionMismatch("mog_tilted_update: expected one cavity block per component");
  if (!x.allFinite()) throw DegenerateInput("mog_tilted_update: observation has non-finite entries");
  const Eigen::Index d = x.size();
  const double noise = model.sigma * model.sigma;

  std::vector<Vector> post_mean(J);
  std::vector<Matrix> post_cov(J);
  CategoricalDist log_marg{Vector(J)};
  for (std::size_t j = 0; j < J; ++j) {
    const GaussianMoment& c = cavity[j];
    if (c.dim() != d) throw DimensionMismatch("mog_tilted_update: block dimension mismatch");
    Matrix s = c.cov;
    s.diagonal().array() += noise;
    Eigen::LLT<Matrix> llt(s);
    if (llt.info() != Eigen::Success) throw NotNormalizable("mog_tilted_update: predictive covariance not PD");
    const Vector resid = x - c.mean;
    const Vector alpha = llt.solve(resid);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    log_marg.log_weights[static_cast<Eigen::Index>(j)] =
        model.log_mix[static_cast<Eigen::Index>(j)] - 0.5 * resid.dot(alpha) - 0.5 * logdet -
        static_cast<double>(d) * kLogSqrt2Pi;
    // Conditional update of block j given that x came from component j.
    const Matrix gain = llt.solve(c.cov).transpose();  // V S^-1 (S, V symmetric)
    post_mean[j] = c.mean + gain * resid;
    post_cov[j] = symmetrized(c.cov - gain * c.cov);
  }

  const double mx = log_marg.log_weights.maxCoeff();
  if (!std::isfinite(mx)) throw DegenerateInput("mog_tilted_update: all responsibilities underflowed");
  const double log_z = mx + std::log((log_marg.log_weights.array() - mx).exp().sum());

  Vector g = categorical_normalize(log_marg).probabilities();
  g = g.cwiseMax(kResponsibilityFloor);
  g /= g.sum();

  MogTilted out;
  out.log_z = log_z;
  out.responsibilities = CategoricalDist{g.array().log().matrix()};
  out.moments.reserve(J);
  for (std::size_t j = 0; j < J; ++j) {
    const double gj = g[static_cast<Eigen::Index>(j)];
    const GaussianMoment& c = cavity[j];
    const Vector delta = post_mean[j] - c.mean;
    Vector mean = c.mean + gj * delta;
    Matrix cov = gj * post_cov[j] + (1.0 - gj) * c.cov + (gj * (1.0 - gj)) * (delta * delta.transpose());
    out.moments.emplace_back(std::move(mean), symmetrized(cov));
  }
  return out;
}

double mog_log_likelihood(const Vector& x, const std::vector<Vector>& means, const MoGModel& model) {
  const double noise = model.sigma * model.sigma;
  const double d = static_cast<double>(x.size());
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(means.size());
  for (std::size_t j = 0; j < means.size(); ++j) {
    terms[j] = model.log_mix[static_cast<Eigen::Index>(j)] - 0.5 * (x - means[j]).squaredNorm() / noise -
               0.5 * d * std::log(2.0 * std::numbers::pi * noise);
    mx = std::max(mx, terms[j]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - mx);
  return mx + std::log(acc);
}

}  // namespace sep
