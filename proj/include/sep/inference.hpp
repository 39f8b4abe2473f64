#pragma once

// The expectation-propagation family as update steps over an ApproxState:
// EP (one factor per datapoint), ADF (no factors), SEP (one tied factor,
// recovered from q on demand), parallel SEP (minibatches sharing one cavity),
// distributed SEP (one tied factor per data partition) and latent-variable SEP.
//
// All factors live in natural parameters, so every update is additions and
// scalings of (r, lam) blocks; moment form is produced only to hand cavities to
// the site computations and to read tilted moments back.

#include <chrono>
#include <cmath>
#include <limits>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sep/data.hpp"
#include "sep/expfam.hpp"
#include "sep/likelihoods.hpp"

namespace sep {

enum class Algorithm { EP, ADF, SEP, ParallelSEP, DSEP, LatentSEP };

std::string_view to_string(Algorithm alg);
std::optional<Algorithm> parse_algorithm(std::string_view name);

enum class DampingKind { fixed, one_over_n, robbins_monro };

std::string_view to_string(DampingKind kind);
std::optional<DampingKind> parse_damping(std::string_view name);

/// Step size for the damped factor update f <- f^(1 - eps) f_new^eps.
struct DampingSchedule {
  DampingKind kind = DampingKind::one_over_n;
  double epsilon0 = 1.0;
  double tau = 1.0;
  double kappa = 1.0;

  static DampingSchedule fixed(double eps) { return {DampingKind::fixed, eps, 1.0, 1.0}; }
  static DampingSchedule one_over_n() { return {DampingKind::one_over_n, 1.0, 1.0, 1.0}; }
  static DampingSchedule robbins_monro(double eps0, double tau, double kappa) {
    return {DampingKind::robbins_monro, eps0, tau, kappa};
  }

  void validate() const;
};

/// fixed: epsilon0; one_over_n: 1 / count; robbins_monro: epsilon0 (tau / (tau + t))^kappa.
double epsilon_at(const DampingSchedule& schedule, std::size_t t, std::size_t count);

struct SiteProjection {
  MomentBlocks moments;  // proj[tilted], one entry per parameter block
  double log_z = 0.0;
  std::optional<CategoricalDist> latent;  // g_n for latent-variable sites
};

/// The likelihood side of the algorithms: N sites over a block-structured parameter.
/// Implementations must be safe to call concurrently (parallel SEP evaluates a
/// minibatch of sites at once).
class SiteModel {
 public:
  virtual ~SiteModel() = default;

  virtual std::size_t size() const = 0;
  virtual std::size_t blocks() const = 0;
  virtual Eigen::Index block_dim() const = 0;
  virtual FactorBlocks prior() const = 0;
  /// Moment projection of cavity * likelihood_n^alpha. Throws sep::Error on failure.
  virtual SiteProjection project(std::size_t n, const MomentBlocks& cavity, double alpha) const = 0;
  /// Starting value of site n. Unit factors unless the model needs symmetry breaking.
  virtual FactorBlocks initial_site(std::size_t n) const;
  virtual bool supports_alpha(double alpha) const { return alpha == 1.0; }
};

/// Probit regression sites. alpha == 1 uses the closed form, any other finite
/// alpha goes through Gauss-Hermite quadrature.
class ProbitSiteModel final : public SiteModel {
 public:
  ProbitSiteModel(const Dataset& data, GaussianMoment prior, int hermite_order = kDefaultHermiteOrder);

  std::size_t size() const override { return static_cast<std::size_t>(inputs_.rows()); }
  std::size_t blocks() const override { return 1; }
  Eigen::Index block_dim() const override { return inputs_.cols(); }
  FactorBlocks prior() const override { return {to_natural(prior_)}; }
  SiteProjection project(std::size_t n, const MomentBlocks& cavity, double alpha) const override;
  bool supports_alpha(double alpha) const override { return alpha > 0.0 && std::isfinite(alpha); }

  ProbitSite site(std::size_t n) const;
  const GaussianMoment& prior_moments() const noexcept { return prior_; }

 private:
  Matrix inputs_;
  Vector labels_;
  GaussianMoment prior_;
  int hermite_order_;
};

/// Mixture-of-Gaussians sites over the J component means, labels summed out.
/// The parameter is block-diagonal: one D-dimensional block per component.
///
/// Starting from unit factors, every block is identical and the updates can never
/// tell the components apart. Sites therefore start as weak pseudo-observations
/// (weight init_weight) of x_n on the block chosen by a seeded k-means pass.
class MogSiteModel final : public SiteModel {
 public:
  MogSiteModel(const Dataset& data, MoGModel model, std::uint64_t init_seed = 0, double init_weight = 0.1);

  std::size_t size() const override { return static_cast<std::size_t>(inputs_.rows()); }
  std::size_t blocks() const override { return static_cast<std::size_t>(model_.components); }
  Eigen::Index block_dim() const override { return inputs_.cols(); }
  FactorBlocks prior() const override;
  SiteProjection project(std::size_t n, const MomentBlocks& cavity, double alpha) const override;
  FactorBlocks initial_site(std::size_t n) const override;

  const MoGModel& mixture() const noexcept { return model_; }
  const std::vector<int>& initial_assignment() const noexcept { return init_assignment_; }

 private:
  Matrix inputs_;
  MoGModel model_;
  double init_weight_;
  std::vector<int> init_assignment_;
};

/// Full state of one algorithm run. Which containers are populated depends on mode:
/// EP keeps N site factors, DSEP keeps K partition factors and their counts, and
/// ADF / SEP / ParallelSEP / LatentSEP keep only prior and q.
struct ApproxState {
  Algorithm mode = Algorithm::SEP;
  FactorBlocks prior;
  FactorBlocks q;
  std::size_t data_count = 0;
  std::vector<FactorBlocks> sites;
  std::vector<FactorBlocks> partition_factors;
  std::vector<std::size_t> partition_counts;
  std::vector<int> partition_of;  // DSEP routing, size N
  std::size_t steps = 0;          // update attempts so far; drives decreasing schedules
};

/// q = prior, and sites / tied factors at the model's initial values (unit for probit).
ApproxState init_state(Algorithm alg, const SiteModel& model, const std::vector<int>& partition_of = {});

/// Stored scalars across prior, q and any site / partition factors.
std::size_t parameter_count(const ApproxState& state);

/// SEP's implicit global factor f = (q / prior)^(1/N).
FactorBlocks global_factor(const ApproxState& state);

/// Max abs deviation of q from prior * prod(factors) (EP, DSEP); 0 for tied modes.
double invariant_error(const ApproxState& state);

/// Recompute q from prior and the stored factors, removing accumulated rounding.
void resync(ApproxState& state);

struct UpdateResult {
  bool applied = false;
  double factor_delta = 0.0;  // inf-norm change of the updated factor
  std::optional<CategoricalDist> latent;
};

UpdateResult ep_update(ApproxState& state, const SiteModel& model, std::size_t n, double eps, double alpha = 1.0);
UpdateResult adf_update(ApproxState& state, const SiteModel& model, std::size_t n, double alpha = 1.0);
UpdateResult sep_update(ApproxState& state, const SiteModel& model, std::size_t n, double eps, double alpha = 1.0);
UpdateResult dsep_update(ApproxState& state, const SiteModel& model, std::size_t k, std::size_t n, double eps,
                         double alpha = 1.0);
/// SEP step on a mixture site; g_n is returned for reporting and not stored.
UpdateResult latent_sep_update(ApproxState& state, const MogSiteModel& model, std::size_t n, double eps);

struct BatchResult {
  std::size_t applied = 0;
  std::size_t skipped = 0;
  double factor_delta = 0.0;
};

/// f_new = f_old^(1 - S eps) prod_m f_m^eps over the S sites whose projection
/// succeeded; eps = 1/N gives the minibatch rule. Intermediate factors are computed
/// concurrently when parallel is set and always combined in ascending site index.
BatchResult parallel_sep_update(ApproxState& state, const SiteModel& model, std::span<const std::size_t> batch,
                                double eps, double alpha = 1.0, bool parallel = true);

/// Intermediate factors f_m = (proj[tilted_m] / cavity)^(1/alpha) for a shared cavity.
/// Empty entries mark failed projections.
std::vector<std::optional<FactorBlocks>> intermediate_factors_serial(const SiteModel& model,
                                                                     std::span<const std::size_t> batch,
                                                                     const FactorBlocks& cavity, double alpha);
std::vector<std::optional<FactorBlocks>> intermediate_factors(const SiteModel& model,
                                                              std::span<const std::size_t> batch,
                                                              const FactorBlocks& cavity, double alpha);

enum class SweepOrder { sequential, shuffled };

struct RunConfig {
  Algorithm algorithm = Algorithm::SEP;
  std::size_t minibatch = 1;   // ParallelSEP
  int partitions = 1;          // DSEP
  double alpha = 1.0;
  std::size_t passes = 50;
  SweepOrder order = SweepOrder::shuffled;
  std::uint64_t seed = 0;
  double tol = 1e-4;           // <= 0 disables the convergence stop
  std::optional<DampingSchedule> damping;  // default depends on the algorithm
  std::size_t stride = 0;      // steps between trace rows; 0 = once per pass
  bool record_wall_time = false;

  /// EP: fixed(1); ADF: unused; SEP family and DSEP: one_over_n.
  DampingSchedule resolved_damping() const;
  void validate(std::size_t n) const;
};

struct TraceRow {
  std::size_t iter = 0;
  double kl = std::numeric_limits<double>::quiet_NaN();
  double mean_fnorm = std::numeric_limits<double>::quiet_NaN();
  double cov_fnorm = std::numeric_limits<double>::quiet_NaN();
  double test_ll = std::numeric_limits<double>::quiet_NaN();
  double test_err = std::numeric_limits<double>::quiet_NaN();
  double factor_delta = std::numeric_limits<double>::quiet_NaN();
  double trace_cov = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
};

struct RunHooks {
  /// Fills oracle metrics (kl, F-norms, test metrics) for the current q.
  std::function<void(TraceRow&, const MomentBlocks&)> metrics;
  std::function<void(const TraceRow&, const ApproxState&)> on_record;
  std::function<bool()> should_stop;
};

struct RunTrace {
  std::vector<TraceRow> rows;
  std::size_t steps = 0;
  std::size_t applied = 0;
  std::size_t skipped = 0;
  std::size_t passes_completed = 0;
  bool converged = false;
  ApproxState final_state;
};

/// Runs the configured algorithm for at most config.passes passes, stopping early
/// once the largest natural-parameter change of any factor over a full pass drops
/// below tol. Deterministic given config.seed.
RunTrace run(const RunConfig& config, const SiteModel& model, const std::vector<int>& partition_of = {},
             const RunHooks& hooks = {});

/// Sweep order for one pass: identity, or a permutation seeded by (seed, pass).
std::vector<std::size_t> sweep_order(SweepOrder order, std::size_t n, std::uint64_t seed, std::size_t pass);

/// Responsibilities of every datapoint under the state's cavity (latent reporting).
std::vector<CategoricalDist> latent_responsibilities(const ApproxState& state, const MogSiteModel& model);

}  // namespace sep
