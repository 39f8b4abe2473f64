#pragma once

// Site computations: moments of the tilted distribution cavity(theta) * likelihood(theta)
// for probit regression and mixture-of-Gaussians sites.

#include "sep/expfam.hpp"

namespace sep {

inline constexpr int kDefaultHermiteOrder = 64;
inline constexpr double kResponsibilityFloor = 1e-12;
inline constexpr double kDegenerateProjection = 1e-14;

/// One probit observation: P(y | theta) = Phi(y * theta^T x), y in {-1, +1}.
struct ProbitSite {
  Vector x;
  double y = 1.0;

  ProbitSite() = default;
  ProbitSite(Vector x_, double y_);
};

/// Mixture of J isotropic Gaussians with known std and mixing weights; the unknowns
/// are the J component means, each with prior mean_prior.
struct MoGModel {
  int components = 2;
  double sigma = 0.5;
  GaussianMoment mean_prior;
  Vector log_mix;  // normalized log mixing weights, uniform unless set

  MoGModel() = default;
  MoGModel(int components_, double sigma_, GaussianMoment mean_prior_);

  Eigen::Index dim() const noexcept { return mean_prior.dim(); }
};

struct TiltedResult {
  GaussianMoment moments;
  double log_z = 0.0;
};

/// Closed-form probit tilted moments. With s^2 = x^T S x + 1 and z = y x^T m / s,
/// log_z = log Phi(z) and the moments shift along S x by phi(z) / Phi(z).
TiltedResult probit_tilted_moments(const GaussianMoment& cavity, const ProbitSite& site);

/// Moments of Phi(y theta^T x)^alpha * cavity(theta), computed by Gauss-Hermite
/// quadrature on the scalar projection u = theta^T x (re-centred at the mode of the
/// tilted density in u) and lifted back to D dimensions through the conditional
/// Gaussian of theta given u. With alpha = 1 this is an oracle for the closed form.
TiltedResult tilted_moments_quadrature(const GaussianMoment& cavity, const ProbitSite& site,
                                       double alpha, int order = kDefaultHermiteOrder);

struct MogTilted {
  MomentBlocks moments;  // block-diagonal projection, one block per component mean
  double log_z = 0.0;
  CategoricalDist responsibilities;  // normalized log responsibilities g_n
};

/// Tilted update for one observation of a mixture, with the cluster label summed out.
/// The J-way mixture over the stacked means is projected onto independent blocks.
MogTilted mog_tilted_update(const MomentBlocks& cavity, const Vector& x, const MoGModel& model);

/// log p(x | means) with the label marginalized.
double mog_log_likelihood(const Vector& x, const std::vector<Vector>& means, const MoGModel& model);

}  // namespace sep
