#pragma once

// Ground truth for the approximations: a random-walk Metropolis sampler and a dense
// grid integrator for reference posterior moments, plus the evaluation metrics.

#include <cstdint>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "sep/data.hpp"
#include "sep/expfam.hpp"
#include "sep/inference.hpp"
#include "sep/likelihoods.hpp"

namespace sep {

using LogDensity = std::function<double(const Vector&)>;

struct McmcConfig {
  std::size_t steps = 50000;    // per chain, burn-in included
  std::size_t burn_in = 10000;
  double proposal_scale = 0.5;
  std::uint64_t seed = 0;
  bool adapt = true;            // tune scale and shape during burn-in
  int chains = 4;

  void validate() const;
};

struct McmcResult {
  Matrix samples;  // pooled post-burn-in draws, one per row, chains in index order
  double acceptance = 0.0;
  std::vector<double> chain_acceptance;
  double split_rhat = 1.0;  // max over coordinates
  bool rhat_warning = false;
};

inline constexpr double kRhatWarning = 1.1;
inline constexpr double kAdaptTargetAcceptance = 0.25;

/// Chains run concurrently; each owns the stream (seed, chain index). log_density
/// must be safe to call from several threads.
McmcResult metropolis_sample(const LogDensity& log_density, const Vector& init, const McmcConfig& cfg);
McmcResult metropolis_sample_serial(const LogDensity& log_density, const Vector& init, const McmcConfig& cfg);

/// Sample mean and unbiased sample covariance.
GaussianMoment fit_gaussian(const Matrix& samples);

/// KL[reference || q], reference first.
double calibration_kl(const GaussianMoment& reference, const GaussianMoment& q);

struct FnormErrors {
  double mean_err = 0.0;
  double cov_err = 0.0;
};

FnormErrors fnorm_errors(const GaussianMoment& ref, const GaussianMoment& q);
/// Averaged over blocks (blocks must already correspond).
FnormErrors fnorm_errors(const MomentBlocks& ref, const MomentBlocks& q);

/// Greedy matching by block means: result[i] is the candidate block paired with
/// reference block i. Pairs are fixed in order of increasing mean distance.
std::vector<std::size_t> match_blocks(const std::vector<Vector>& reference_means,
                                      const std::vector<Vector>& candidate_means);
MomentBlocks reorder_blocks(const MomentBlocks& blocks, const std::vector<std::size_t>& order);

struct GridSpec {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<std::size_t> points;

  static GridSpec uniform(std::size_t dims, double lo, double hi, std::size_t pts);
  void validate() const;
};

inline constexpr double kGridBoundaryMass = 1e-6;
inline constexpr std::size_t kGridMaxPoints = 10'000'000;

struct ProbitGridModel {
  GaussianMoment prior;
};
using GridModel = std::variant<ProbitGridModel, MoGModel>;

/// Posterior moments by brute-force summation over a regular grid (D <= 2). For
/// the mixture the grid runs over the stacked component means (J * D <= 2).
GaussianMoment grid_posterior_moments(const GridModel& model, const Dataset& data, const GridSpec& grid);
GaussianMoment grid_posterior_moments_serial(const GridModel& model, const Dataset& data, const GridSpec& grid);

struct TestMetrics {
  double error_rate = 0.0;
  double mean_log_likelihood = 0.0;
};

/// Predictive Phi(x^T m / sqrt(x^T S x + 1)); predicts +1 when x^T m >= 0.
TestMetrics test_metrics(const GaussianMoment& q, const Dataset& test);

/// Unnormalized log posteriors for the sampler.
LogDensity probit_log_posterior(const Dataset& data, const GaussianMoment& prior);
/// Over the stacked means (J * D), labels marginalized.
LogDensity mog_log_posterior(const Dataset& data, const MoGModel& model);

/// Max over coordinates of the split R-hat of pooled draws from `chains` equal-length chains.
double split_rhat(const Matrix& pooled, int chains);

/// Relabel every stacked-means sample to the block order that best matches
/// anchor_means (greedy).
Matrix align_samples(const Matrix& samples, int components, const std::vector<Vector>& anchor_means);

/// Relabel every stacked-means sample to the block order that best matches
/// anchor_means (greedy), then fit one Gaussian per block.
MomentBlocks fit_aligned_blocks(const Matrix& samples, int components, const std::vector<Vector>& anchor_means);

/// Trace metrics against an optional reference and an optional probit test set.
/// Blocks of q are matched to the reference blocks by mean before comparing.
std::function<void(TraceRow&, const MomentBlocks&)> make_trace_metrics(std::optional<MomentBlocks> reference,
                                                                        std::optional<Dataset> test);

}  // namespace sep
