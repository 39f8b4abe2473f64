#include "sep/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sep/errors.hpp"
#include "sep/rng.hpp"

namespace sep {

std::string_view to_string(Algorithm alg) {
  switch (alg) {
    case Algorithm::EP: return "ep";
    case Algorithm::ADF: return "adf";
    case Algorithm::SEP: return "sep";
    case Algorithm::ParallelSEP: return "psep";
    case Algorithm::DSEP: return "dsep";
    case Algorithm::LatentSEP: return "lsep";
  }
  return "?";
}

std::optional<Algorithm> parse_algorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::EP, Algorithm::ADF, Algorithm::SEP, Algorithm::ParallelSEP, Algorithm::DSEP,
                      Algorithm::LatentSEP}) {
    if (to_string(a) == name) return a;
  }
  return std::nullopt;
}

std::string_view to_string(DampingKind kind) {
  switch (kind) {
    case DampingKind::fixed: return "fixed";
    case DampingKind::one_over_n: return "one_over_n";
    case DampingKind::robbins_monro: return "robbins_monro";
  }
  return "?";
}

std::optional<DampingKind> parse_damping(std::string_view name) {
  for (DampingKind k : {DampingKind::fixed, DampingKind::one_over_n, DampingKind::robbins_monro}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

void DampingSchedule::validate() const {
  if (kind == DampingKind::one_over_n) return;
  if (!(epsilon0 > 0.0 && epsilon0 <= 1.0)) throw ConfigInvalid("epsilon0 must lie in (0, 1]");
  if (kind == DampingKind::robbins_monro) {
    if (!(tau > 0.0)) throw ConfigInvalid("tau must be positive");
    if (!(kappa > 0.5 && kappa <= 1.0)) throw ConfigInvalid("kappa must lie in (0.5, 1]");
  }
}

double epsilon_at(const DampingSchedule& schedule, std::size_t t, std::size_t count) {
  switch (schedule.kind) {
    case DampingKind::fixed: return schedule.epsilon0;
    case DampingKind::one_over_n: return 1.0 / static_cast<double>(std::max<std::size_t>(count, 1));
    case DampingKind::robbins_monro:
      return schedule.epsilon0 * std::pow(schedule.tau / (schedule.tau + static_cast<double>(t)), schedule.kappa);
  }
  return schedule.epsilon0;
}

// ---------------------------------------------------------------------------
// Site models

FactorBlocks SiteModel::initial_site(std::size_t) const { return unit_blocks(blocks(), block_dim()); }

ProbitSiteModel::ProbitSiteModel(const Dataset& data, GaussianMoment prior, int hermite_order)
    : inputs_(data.inputs), prior_(std::move(prior)), hermite_order_(hermite_order) {
  if (!data.labels) throw ConfigInvalid("probit model needs labelled data");
  if (prior_.dim() != data.dim()) throw DimensionMismatch("probit prior dimension differs from input dimension");
  data.validate();
  labels_ = *data.labels;
}

ProbitSite ProbitSiteModel::site(std::size_t n) const {
  const auto i = static_cast<Eigen::Index>(n);
  return {inputs_.row(i).transpose(), labels_[i]};
}

SiteProjection ProbitSiteModel::project(std::size_t n, const MomentBlocks& cavity, double alpha) const {
  const ProbitSite s = site(n);
  TiltedResult t = alpha == 1.0 ? probit_tilted_moments(cavity.front(), s)
                                : tilted_moments_quadrature(cavity.front(), s, alpha, hermite_order_);
  return {{std::move(t.moments)}, t.log_z, std::nullopt};
}

namespace {

std::vector<int> seeded_kmeans(const Matrix& x, int k, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(x.rows());
  CounterRng rng(seed, 0x6b6d);
  const std::vector<std::size_t> perm = random_permutation(n, rng);
  std::vector<Vector> centers;
  for (int j = 0; j < k; ++j) centers.push_back(x.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(j)])).transpose());
  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 20; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const double d = (x.row(static_cast<Eigen::Index>(i)).transpose() - centers[static_cast<std::size_t>(j)]).squaredNorm();
        if (d < best) {
          best = d;
          assign[i] = j;
        }
      }
    }
    for (int j = 0; j < k; ++j) {
      Vector sum = Vector::Zero(x.cols());
      int count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] == j) {
          sum += x.row(static_cast<Eigen::Index>(i)).transpose();
          ++count;
        }
      }
      if (count > 0) centers[static_cast<std::size_t>(j)] = sum / count;
    }
  }
  return assign;
}

}  // namespace

MogSiteModel::MogSiteModel(const Dataset& data, MoGModel model, std::uint64_t init_seed, double init_weight)
    : inputs_(data.inputs), model_(std::move(model)), init_weight_(init_weight) {
  data.validate();
  if (model_.dim() != data.dim()) throw DimensionMismatch("mixture prior dimension differs from input dimension");
  if (data.size() < static_cast<std::size_t>(model_.components)) throw ConfigInvalid("need at least J datapoints");
  if (!(init_weight_ >= 0.0)) throw ConfigInvalid("init weight must be non-negative");
  init_assignment_ = seeded_kmeans(inputs_, model_.components, init_seed);
}

FactorBlocks MogSiteModel::prior() const {
  return FactorBlocks(static_cast<std::size_t>(model_.components), to_natural(model_.mean_prior));
}

SiteProjection MogSiteModel::project(std::size_t n, const MomentBlocks& cavity, double alpha) const {
  if (alpha != 1.0) throw ConfigInvalid("mixture sites support alpha = 1 only");
  MogTilted t = mog_tilted_update(cavity, inputs_.row(static_cast<Eigen::Index>(n)).transpose(), model_);
  return {std::move(t.moments), t.log_z, std::move(t.responsibilities)};
}

FactorBlocks MogSiteModel::initial_site(std::size_t n) const {
  FactorBlocks site = unit_blocks(blocks(), block_dim());
  if (init_weight_ == 0.0) return site;
  const double prec = init_weight_ / (model_.sigma * model_.sigma);
  auto& b = site[static_cast<std::size_t>(init_assignment_[n])];
  b.r = prec * inputs_.row(static_cast<Eigen::Index>(n)).transpose();
  b.lam = prec * Matrix::Identity(block_dim(), block_dim());
  return site;
}

// ---------------------------------------------------------------------------
// State

namespace {

bool is_ep_like(Algorithm a) { return a == Algorithm::EP; }
bool is_tied(Algorithm a) {
  return a == Algorithm::SEP || a == Algorithm::ParallelSEP || a == Algorithm::LatentSEP;
}

FactorBlocks blend(const FactorBlocks& old_factor, const FactorBlocks& new_factor, double eps) {
  return blocks_multiply(blocks_power(old_factor, 1.0 - eps), blocks_power(new_factor, eps));
}

void require_mode(const ApproxState& s, std::initializer_list<Algorithm> modes, const char* op) {
  if (std::find(modes.begin(), modes.end(), s.mode) == modes.end()) {
    throw ConfigInvalid(std::string(op) + " called on a state in mode " + std::string(to_string(s.mode)));
  }
}

// Intermediate factor (proj[tilted] / cavity)^(1/alpha); empty when the cavity is not
// normalizable or the projection fails.
std::optional<FactorBlocks> intermediate_factor(const SiteModel& model, std::size_t n, const FactorBlocks& cavity,
                                                const MomentBlocks& cavity_moments, double alpha,
                                                std::optional<CategoricalDist>* latent) {
  try {
    SiteProjection proj = model.project(n, cavity_moments, alpha);
    const FactorBlocks tilted = blocks_to_natural(proj.moments);
    if (latent) *latent = std::move(proj.latent);
    FactorBlocks f = blocks_divide(tilted, cavity);
    if (alpha != 1.0) f = blocks_power(f, 1.0 / alpha);
    for (const auto& b : f) {
      if (!b.r.allFinite() || !b.lam.allFinite()) return std::nullopt;
    }
    return f;
  } catch (const Error&) {
    return std::nullopt;
  }
}

std::optional<MomentBlocks> cavity_moments(const FactorBlocks& cavity) {
  if (!blocks_normalizable(cavity)) return std::nullopt;
  try {
    return blocks_to_moments(cavity);
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

ApproxState init_state(Algorithm alg, const SiteModel& model, const std::vector<int>& partition_of) {
  const std::size_t n = model.size();
  if (n == 0) throw ConfigInvalid("empty dataset");
  ApproxState s;
  s.mode = alg;
  s.prior = model.prior();
  s.data_count = n;

  // Site initial values; unit for probit, so q starts at the prior.
  std::vector<FactorBlocks> init;
  init.reserve(n);
  bool all_unit = true;
  for (std::size_t i = 0; i < n; ++i) {
    init.push_back(model.initial_site(i));
    for (const auto& b : init.back()) {
      if (!b.r.isZero(0.0) || !b.lam.isZero(0.0)) all_unit = false;
    }
  }

  switch (alg) {
    case Algorithm::EP:
      s.sites = std::move(init);
      break;
    case Algorithm::DSEP: {
      if (partition_of.size() != n) throw ConfigInvalid("DSEP needs one partition id per datapoint");
      const int k = *std::max_element(partition_of.begin(), partition_of.end()) + 1;
      s.partition_of = partition_of;
      s.partition_counts.assign(static_cast<std::size_t>(k), 0);
      s.partition_factors.assign(static_cast<std::size_t>(k), unit_blocks(model.blocks(), model.block_dim()));
      for (std::size_t i = 0; i < n; ++i) {
        const auto p = static_cast<std::size_t>(partition_of[i]);
        ++s.partition_counts[p];
        if (!all_unit) s.partition_factors[p] = blocks_multiply(s.partition_factors[p], init[i]);
      }
      if (!all_unit) {
        for (std::size_t p = 0; p < s.partition_factors.size(); ++p) {
          if (s.partition_counts[p] > 0) {
            s.partition_factors[p] = blocks_power(s.partition_factors[p], 1.0 / static_cast<double>(s.partition_counts[p]));
          }
        }
      }
      break;
    }
    default:
      break;
  }

  if (all_unit) {
    s.q = s.prior;
  } else if (alg == Algorithm::EP || alg == Algorithm::DSEP) {
    resync(s);
  } else {
    FactorBlocks q = s.prior;
    for (const auto& site : init) q = blocks_multiply(q, site);
    s.q = std::move(q);
  }
  return s;
}

std::size_t parameter_count(const ApproxState& state) {
  std::size_t n = parameter_count(state.prior) + parameter_count(state.q);
  for (const auto& s : state.sites) n += parameter_count(s);
  for (const auto& f : state.partition_factors) n += parameter_count(f);
  return n;
}

FactorBlocks global_factor(const ApproxState& state) {
  return blocks_power(blocks_divide(state.q, state.prior), 1.0 / static_cast<double>(state.data_count));
}

namespace {

FactorBlocks product_of_factors(const ApproxState& state) {
  FactorBlocks q = state.prior;
  if (state.mode == Algorithm::EP) {
    for (const auto& s : state.sites) q = blocks_multiply(q, s);
  } else if (state.mode == Algorithm::DSEP) {
    for (std::size_t k = 0; k < state.partition_factors.size(); ++k) {
      q = blocks_multiply(q, blocks_power(state.partition_factors[k], static_cast<double>(state.partition_counts[k])));
    }
  }
  return q;
}

}  // namespace

double invariant_error(const ApproxState& state) {
  if (state.mode != Algorithm::EP && state.mode != Algorithm::DSEP) return 0.0;
  return max_abs_diff(state.q, product_of_factors(state));
}

void resync(ApproxState& state) {
  if (state.mode != Algorithm::EP && state.mode != Algorithm::DSEP) return;
  state.q = product_of_factors(state);
}

// ---------------------------------------------------------------------------
// Updates

UpdateResult ep_update(ApproxState& state, const SiteModel& model, std::size_t n, double eps, double alpha) {
  require_mode(state, {Algorithm::EP}, "ep_update");
  const FactorBlocks& old_site = state.sites.at(n);
  const FactorBlocks cavity = blocks_divide(state.q, alpha == 1.0 ? old_site : blocks_power(old_site, alpha));
  const auto moments = cavity_moments(cavity);
  if (!moments) return {};
  UpdateResult out;
  const auto f_new = intermediate_factor(model, n, cavity, *moments, alpha, &out.latent);
  if (!f_new) return {};
  FactorBlocks site = blend(old_site, *f_new, eps);
  FactorBlocks q = blocks_multiply(state.q, blocks_divide(site, old_site));
  if (!blocks_normalizable(q)) return {};
  out.applied = true;
  out.factor_delta = max_abs_diff(site, old_site);
  state.q = std::move(q);
  state.sites[n] = std::move(site);
  return out;
}

UpdateResult adf_update(ApproxState& state, const SiteModel& model, std::size_t n, double alpha) {
  require_mode(state, {Algorithm::ADF}, "adf_update");
  const auto moments = cavity_moments(state.q);
  if (!moments) return {};
  UpdateResult out;
  const auto f_new = intermediate_factor(model, n, state.q, *moments, alpha, &out.latent);
  if (!f_new) return {};
  FactorBlocks q = blocks_multiply(state.q, *f_new);
  if (!blocks_normalizable(q)) return {};
  out.applied = true;
  out.factor_delta = max_abs_diff(q, state.q);
  state.q = std::move(q);
  return out;
}

UpdateResult sep_update(ApproxState& state, const SiteModel& model, std::size_t n, double eps, double alpha) {
  require_mode(state, {Algorithm::SEP, Algorithm::ParallelSEP, Algorithm::LatentSEP}, "sep_update");
  const double count = static_cast<double>(state.data_count);
  const FactorBlocks f = global_factor(state);
  const FactorBlocks cavity = blocks_divide(state.q, alpha == 1.0 ? f : blocks_power(f, alpha));
  const auto moments = cavity_moments(cavity);
  if (!moments) return {};
  UpdateResult out;
  const auto f_n = intermediate_factor(model, n, cavity, *moments, alpha, &out.latent);
  if (!f_n) return {};
  const FactorBlocks f_new = blend(f, *f_n, eps);
  FactorBlocks q = blocks_multiply(state.prior, blocks_power(f_new, count));
  if (!blocks_normalizable(q)) return {};
  out.applied = true;
  out.factor_delta = max_abs_diff(f_new, f);
  state.q = std::move(q);
  return out;
}

UpdateResult dsep_update(ApproxState& state, const SiteModel& model, std::size_t k, std::size_t n, double eps,
                         double alpha) {
  require_mode(state, {Algorithm::DSEP}, "dsep_update");
  if (k >= state.partition_factors.size()) throw ConfigInvalid("dsep_update: partition index out of range");
  if (!state.partition_of.empty() && static_cast<std::size_t>(state.partition_of.at(n)) != k) {
    throw ConfigInvalid("dsep_update: datapoint does not belong to the partition");
  }
  const FactorBlocks& f_k = state.partition_factors[k];
  const FactorBlocks cavity = blocks_divide(state.q, alpha == 1.0 ? f_k : blocks_power(f_k, alpha));
  const auto moments = cavity_moments(cavity);
  if (!moments) return {};
  UpdateResult out;
  const auto f_n = intermediate_factor(model, n, cavity, *moments, alpha, &out.latent);
  if (!f_n) return {};
  FactorBlocks f_new = blend(f_k, *f_n, eps);
  FactorBlocks q = blocks_multiply(
      state.q, blocks_power(blocks_divide(f_new, f_k), static_cast<double>(state.partition_counts[k])));
  if (!blocks_normalizable(q)) return {};
  out.applied = true;
  out.factor_delta = max_abs_diff(f_new, f_k);
  state.q = std::move(q);
  state.partition_factors[k] = std::move(f_new);
  return out;
}

UpdateResult latent_sep_update(ApproxState& state, const MogSiteModel& model, std::size_t n, double eps) {
  require_mode(state, {Algorithm::LatentSEP, Algorithm::SEP}, "latent_sep_update");
  return sep_update(state, model, n, eps, 1.0);
}

std::vector<std::optional<FactorBlocks>> intermediate_factors_serial(const SiteModel& model,
                                                                     std::span<const std::size_t> batch,
                                                                     const FactorBlocks& cavity, double alpha) {
  std::vector<std::optional<FactorBlocks>> out(batch.size());
  const auto moments = cavity_moments(cavity);
  if (!moments) return out;
  for (std::size_t m = 0; m < batch.size(); ++m) {
    out[m] = intermediate_factor(model, batch[m], cavity, *moments, alpha, nullptr);
  }
  return out;
}

std::vector<std::optional<FactorBlocks>> intermediate_factors(const SiteModel& model,
                                                              std::span<const std::size_t> batch,
                                                              const FactorBlocks& cavity, double alpha) {
  std::vector<std::optional<FactorBlocks>> out(batch.size());
  const auto moments = cavity_moments(cavity);
  if (!moments) return out;
  const auto count = static_cast<std::ptrdiff_t>(batch.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t m = 0; m < count; ++m) {
    const auto i = static_cast<std::size_t>(m);
    out[i] = intermediate_factor(model, batch[i], cavity, *moments, alpha, nullptr);
  }
  return out;
}

BatchResult parallel_sep_update(ApproxState& state, const SiteModel& model, std::span<const std::size_t> batch,
                                double eps, double alpha, bool parallel) {
  require_mode(state, {Algorithm::SEP, Algorithm::ParallelSEP, Algorithm::LatentSEP}, "parallel_sep_update");
  if (batch.empty()) return {};
  const double count = static_cast<double>(state.data_count);
  const FactorBlocks f = global_factor(state);
  const FactorBlocks cavity = blocks_divide(state.q, alpha == 1.0 ? f : blocks_power(f, alpha));
  const auto factors =
      parallel ? intermediate_factors(model, batch, cavity, alpha) : intermediate_factors_serial(model, batch, cavity, alpha);

  // Reduce in ascending site index (ties by batch position) for a schedule-free result.
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return batch[a] < batch[b]; });
  std::vector<const FactorBlocks*> ok;
  for (std::size_t m : order) {
    if (factors[m]) ok.push_back(&*factors[m]);
  }
  BatchResult out;
  out.skipped = batch.size() - ok.size();
  if (ok.empty()) return out;

  FactorBlocks sum = *ok.front();
  for (std::size_t i = 1; i < ok.size(); ++i) sum = blocks_multiply(sum, *ok[i]);
  double old_exponent = 1.0 - static_cast<double>(ok.size()) * eps;
  if (std::abs(old_exponent) < 1e-14) old_exponent = 0.0;
  const FactorBlocks f_new = blocks_multiply(blocks_power(f, old_exponent), blocks_power(sum, eps));
  FactorBlocks q = blocks_multiply(state.prior, blocks_power(f_new, count));
  if (!blocks_normalizable(q)) {
    out.skipped = batch.size();
    return out;
  }
  out.applied = ok.size();
  out.factor_delta = max_abs_diff(f_new, f);
  state.q = std::move(q);
  return out;
}

// ---------------------------------------------------------------------------
// Driver

DampingSchedule RunConfig::resolved_damping() const {
  if (damping) return *damping;
  if (algorithm == Algorithm::EP) return DampingSchedule::fixed(1.0);
  return DampingSchedule::one_over_n();
}

void RunConfig::validate(std::size_t n) const {
  if (n == 0) throw ConfigInvalid("empty dataset");
  if (algorithm == Algorithm::ParallelSEP && (minibatch < 1 || minibatch > n)) {
    throw ConfigInvalid("minibatch size M must satisfy 1 <= M <= N");
  }
  if (algorithm == Algorithm::DSEP && (partitions < 1 || static_cast<std::size_t>(partitions) > n)) {
    throw ConfigInvalid("partition count K must satisfy 1 <= K <= N");
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigInvalid("alpha must be finite and positive");
  resolved_damping().validate();
  const DampingSchedule d = resolved_damping();
  if (algorithm == Algorithm::ParallelSEP && d.kind != DampingKind::one_over_n &&
      d.epsilon0 * static_cast<double>(minibatch) > 1.0 + 1e-12) {
    throw ConfigInvalid("parallel SEP needs M * epsilon <= 1");
  }
}

std::vector<std::size_t> sweep_order(SweepOrder order, std::size_t n, std::uint64_t seed, std::size_t pass) {
  if (order == SweepOrder::sequential) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  }
  CounterRng rng(derive_seed(seed, pass), 0);
  return random_permutation(n, rng);
}

namespace {

double trace_of_cov(const MomentBlocks& q) {
  double t = 0.0;
  for (const auto& b : q) t += b.cov.trace();
  return t;
}

// The factors whose pass-to-pass change defines convergence. EP is handled through
// per-update deltas since each site is visited once per pass.
FactorBlocks convergence_snapshot(const ApproxState& s) {
  switch (s.mode) {
    case Algorithm::ADF: return s.q;
    case Algorithm::DSEP: {
      FactorBlocks all;
      for (const auto& f : s.partition_factors) all.insert(all.end(), f.begin(), f.end());
      return all;
    }
    case Algorithm::EP: return {};
    default: return global_factor(s);
  }
}

}  // namespace

RunTrace run(const RunConfig& config, const SiteModel& model, const std::vector<int>& partition_of,
             const RunHooks& hooks) {
  const std::size_t n = model.size();
  config.validate(n);
  if (!model.supports_alpha(config.alpha)) throw ConfigInvalid("this model does not support the requested alpha");

  std::vector<int> partitions = partition_of;
  if (config.algorithm == Algorithm::DSEP) {
    if (partitions.empty()) {
      partitions.resize(n);
      for (std::size_t i = 0; i < n; ++i) partitions[i] = static_cast<int>(i % static_cast<std::size_t>(config.partitions));
    }
    if (partitions.size() != n) throw ConfigInvalid("partition vector length differs from N");
    const int k = *std::max_element(partitions.begin(), partitions.end()) + 1;
    if (k != config.partitions) {
      throw ConfigInvalid("partition vector has " + std::to_string(k) + " groups but K = " +
                          std::to_string(config.partitions));
    }
  }

  RunTrace trace;
  trace.final_state = init_state(config.algorithm, model, partitions);
  ApproxState& state = trace.final_state;
  const DampingSchedule damping = config.resolved_damping();
  const auto start = std::chrono::steady_clock::now();

  const std::size_t steps_per_pass =
      config.algorithm == Algorithm::ParallelSEP ? (n + config.minibatch - 1) / config.minibatch : n;
  const std::size_t stride = config.stride > 0 ? config.stride : steps_per_pass;
  double last_pass_delta = std::numeric_limits<double>::quiet_NaN();
  std::size_t last_recorded = std::numeric_limits<std::size_t>::max();

  auto record = [&]() {
    TraceRow row;
    row.iter = trace.steps;
    row.factor_delta = last_pass_delta;
    const MomentBlocks q = blocks_to_moments(state.q);
    row.trace_cov = trace_of_cov(q);
    if (hooks.metrics) hooks.metrics(row, q);
    if (config.record_wall_time) {
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    trace.rows.push_back(row);
    last_recorded = trace.steps;
    if (hooks.on_record) hooks.on_record(row, state);
  };
  auto count = [&](std::size_t applied, std::size_t skipped) {
    ++trace.steps;
    ++state.steps;
    trace.applied += applied;
    trace.skipped += skipped;
  };

  record();
  bool stop = false;
  for (std::size_t pass = 0; pass < config.passes && !stop; ++pass) {
    const std::vector<std::size_t> order = sweep_order(config.order, n, config.seed, pass);
    const FactorBlocks snapshot = convergence_snapshot(state);
    double ep_delta = 0.0;
    std::size_t pass_steps = 0;

    // Rows falling on the last step of a pass are written after the pass bookkeeping.
    auto after_step = [&]() {
      ++pass_steps;
      if (trace.steps % stride == 0 && pass_steps < steps_per_pass) record();
      if (hooks.should_stop && hooks.should_stop()) stop = true;
    };

    if (config.algorithm == Algorithm::ParallelSEP) {
      for (std::size_t b = 0; b < order.size() && !stop; b += config.minibatch) {
        const std::size_t e = std::min(order.size(), b + config.minibatch);
        const double eps = epsilon_at(damping, state.steps, n);
        const BatchResult r =
            parallel_sep_update(state, model, std::span<const std::size_t>(order.data() + b, e - b), eps, config.alpha);
        count(r.applied, r.skipped);
        after_step();
      }
    } else {
      for (std::size_t idx = 0; idx < order.size() && !stop; ++idx) {
        const std::size_t i = order[idx];
        UpdateResult r;
        switch (config.algorithm) {
          case Algorithm::EP:
            r = ep_update(state, model, i, epsilon_at(damping, state.steps, n), config.alpha);
            ep_delta = std::max(ep_delta, r.factor_delta);
            break;
          case Algorithm::ADF:
            r = adf_update(state, model, i, config.alpha);
            break;
          case Algorithm::DSEP: {
            const auto k = static_cast<std::size_t>(partitions[i]);
            r = dsep_update(state, model, k, i, epsilon_at(damping, state.steps, state.partition_counts[k]),
                            config.alpha);
            break;
          }
          default:
            r = sep_update(state, model, i, epsilon_at(damping, state.steps, n), config.alpha);
            break;
        }
        count(r.applied ? 1 : 0, r.applied ? 0 : 1);
        after_step();
      }
    }
    if (stop) break;

    resync(state);
    ++trace.passes_completed;
    last_pass_delta = config.algorithm == Algorithm::EP ? ep_delta : max_abs_diff(convergence_snapshot(state), snapshot);
    if (trace.steps % stride == 0) record();
    if (config.tol > 0.0 && last_pass_delta < config.tol) {
      trace.converged = true;
      break;
    }
  }
  if (last_recorded != trace.steps) record();
  return trace;
}

std::vector<CategoricalDist> latent_responsibilities(const ApproxState& state, const MogSiteModel& model) {
  std::vector<CategoricalDist> out;
  out.reserve(model.size());
  const FactorBlocks f = is_tied(state.mode) ? global_factor(state) : FactorBlocks{};
  for (std::size_t i = 0; i < model.size(); ++i) {
    FactorBlocks cavity;
    if (is_ep_like(state.mode)) {
      cavity = blocks_divide(state.q, state.sites[i]);
    } else if (state.mode == Algorithm::DSEP) {
      cavity = blocks_divide(state.q, state.partition_factors[static_cast<std::size_t>(state.partition_of[i])]);
    } else if (state.mode == Algorithm::ADF) {
      cavity = state.q;
    } else {
      cavity = blocks_divide(state.q, f);
    }
    const auto moments = cavity_moments(cavity);
    const SiteProjection p = model.project(i, moments ? *moments : blocks_to_moments(state.q), 1.0);
    out.push_back(*p.latent);
  }
  return out;
}

}  // namespace sep
