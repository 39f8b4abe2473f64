#include "sep/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>

#include "sep/errors.hpp"
#include "sep/kernels.hpp"
#include "sep/rng.hpp"
#include "sep/special.hpp"

namespace sep {

void McmcConfig::validate() const {
  if (burn_in >= steps) throw ConfigInvalid("MCMC burn-in must be smaller than the step count");
  if (!(proposal_scale > 0.0)) throw ConfigInvalid("MCMC proposal scale must be positive");
  if (chains < 1) throw ConfigInvalid("MCMC needs at least one chain");
}

namespace {

struct ChainOutput {
  Matrix samples;
  double acceptance = 0.0;
};

ChainOutput run_chain(const LogDensity& log_density, const Vector& init, const McmcConfig& cfg, int chain) {
  const Eigen::Index d = init.size();
  CounterRng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(chain)), 0);
  auto draw_normal = [&]() {
    Vector z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = rng.normal();
    return z;
  };

  Vector x = init;
  if (chain > 0) x += cfg.proposal_scale * draw_normal();
  double lp = log_density(x);
  if (!std::isfinite(lp)) {
    x = init;
    lp = log_density(x);
  }
  if (!std::isfinite(lp)) throw ConfigInvalid("log density is not finite at the initial point");

  double scale = cfg.proposal_scale;
  Matrix shape = Matrix::Identity(d, d);
  Matrix chol = shape;

  const std::size_t kept = cfg.steps - cfg.burn_in;
  ChainOutput out;
  out.samples.resize(static_cast<Eigen::Index>(kept), d);

  constexpr std::size_t kBatch = 100;
  std::size_t batch_accepts = 0;
  std::size_t batch_index = 0;
  std::size_t accepted_after_burn = 0;
  std::size_t rejected_infinite = 0;
  // Burn-in history for the proposal shape, gathered over the second quarter onwards.
  Vector hist_sum = Vector::Zero(d);
  Matrix hist_outer = Matrix::Zero(d, d);
  std::size_t hist_count = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Vector proposal = x + scale * (chol * draw_normal());
    const double lp_new = log_density(proposal);
    bool accept = false;
    if (std::isfinite(lp_new)) {
      const double log_u = std::log(rng.uniform());
      accept = log_u < lp_new - lp;
    } else {
      ++rejected_infinite;
    }
    if (accept) {
      x = proposal;
      lp = lp_new;
    }

    if (step < cfg.burn_in) {
      batch_accepts += accept ? 1 : 0;
      if (cfg.adapt && step >= cfg.burn_in / 4) {
        hist_sum += x;
        hist_outer += x * x.transpose();
        ++hist_count;
      }
      if (cfg.adapt && (step + 1) % kBatch == 0) {
        const double rate = static_cast<double>(batch_accepts) / kBatch;
        ++batch_index;
        scale *= std::exp((rate - kAdaptTargetAcceptance) / std::sqrt(static_cast<double>(batch_index)));
        batch_accepts = 0;
      }
      const bool reshape = cfg.adapt && hist_count > static_cast<std::size_t>(10 * d + 10) &&
                           (step + 1 == cfg.burn_in / 2 || step + 1 == (3 * cfg.burn_in) / 4);
      if (reshape) {
        const double n = static_cast<double>(hist_count);
        const Vector mean = hist_sum / n;
        Matrix cov = (hist_outer - n * mean * mean.transpose()) / (n - 1.0);
        cov = symmetrized(cov);
        cov.diagonal().array() += 1e-12 * std::max(1.0, cov.diagonal().maxCoeff());
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() == Eigen::Success) {
          shape = cov;
          chol = llt.matrixL();
          scale = 2.38 / std::sqrt(static_cast<double>(d));
          batch_index = 0;
        }
      }
    } else {
      accepted_after_burn += accept ? 1 : 0;
      out.samples.row(static_cast<Eigen::Index>(step - cfg.burn_in)) = x.transpose();
    }
  }
  if (static_cast<double>(rejected_infinite) > 0.99 * static_cast<double>(cfg.steps)) {
    throw ChainDiverged("more than 99% of proposals had zero posterior density");
  }
  out.acceptance = static_cast<double>(accepted_after_burn) / static_cast<double>(kept);
  return out;
}

McmcResult pool(std::vector<ChainOutput>&& chains) {
  McmcResult r;
  Eigen::Index rows = 0;
  for (const auto& c : chains) rows += c.samples.rows();
  r.samples.resize(rows, chains.front().samples.cols());
  Eigen::Index at = 0;
  double acc = 0.0;
  for (const auto& c : chains) {
    r.samples.middleRows(at, c.samples.rows()) = c.samples;
    at += c.samples.rows();
    r.chain_acceptance.push_back(c.acceptance);
    acc += c.acceptance;
  }
  r.acceptance = acc / static_cast<double>(chains.size());
  r.split_rhat = split_rhat(r.samples, static_cast<int>(chains.size()));
  r.rhat_warning = std::isfinite(r.split_rhat) && r.split_rhat > kRhatWarning;
  return r;
}

}  // namespace

double split_rhat(const Matrix& pooled, int chains) {
  if (chains < 1 || pooled.rows() % chains != 0) throw DimensionMismatch("split_rhat: rows are not a multiple of chains");
  const Eigen::Index per_chain = pooled.rows() / chains;
  const Eigen::Index half = per_chain / 2;
  if (half < 2) return std::numeric_limits<double>::quiet_NaN();
  double worst = 0.0;
  for (Eigen::Index c = 0; c < pooled.cols(); ++c) {
    std::vector<double> means, vars;
    for (int ch = 0; ch < chains; ++ch) {
      for (int h = 0; h < 2; ++h) {
        const auto seg = pooled.col(c).segment(ch * per_chain + h * half, half);
        const double m = seg.mean();
        means.push_back(m);
        vars.push_back((seg.array() - m).square().sum() / static_cast<double>(half - 1));
      }
    }
    const double m_all = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
    double b = 0.0;
    for (double m : means) b += (m - m_all) * (m - m_all);
    b *= static_cast<double>(half) / static_cast<double>(means.size() - 1);
    const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(vars.size());
    const double var_plus = (static_cast<double>(half - 1) / static_cast<double>(half)) * w + b / static_cast<double>(half);
    if (w > 0.0) worst = std::max(worst, std::sqrt(var_plus / w));
  }
  return worst;
}

McmcResult metropolis_sample_serial(const LogDensity& log_density, const Vector& init, const McmcConfig& cfg) {
  cfg.validate();
  std::vector<ChainOutput> chains;
  for (int c = 0; c < cfg.chains; ++c) chains.push_back(run_chain(log_density, init, cfg, c));
  return pool(std::move(chains));
}

McmcResult metropolis_sample(const LogDensity& log_density, const Vector& init, const McmcConfig& cfg) {
  cfg.validate();
  std::vector<ChainOutput> chains(static_cast<std::size_t>(cfg.chains));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.chains));
#pragma omp parallel for schedule(dynamic, 1)
  for (int c = 0; c < cfg.chains; ++c) {
    try {
      chains[static_cast<std::size_t>(c)] = run_chain(log_density, init, cfg, c);
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return pool(std::move(chains));
}

GaussianMoment fit_gaussian(const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n < d + 2) throw DegenerateInput("fit_gaussian needs at least D + 2 samples");
  const Vector mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - mean.transpose();
  const Matrix cov = symmetrized(centered.transpose() * centered / static_cast<double>(n - 1));
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw NotNormalizable("fit_gaussian: sample covariance is singular");
  return {mean, cov};
}

double calibration_kl(const GaussianMoment& reference, const GaussianMoment& q) { return kl_gaussian(reference, q); }

FnormErrors fnorm_errors(const GaussianMoment& ref, const GaussianMoment& q) {
  if (ref.dim() != q.dim()) throw DimensionMismatch("fnorm_errors: dimension mismatch");
  return {(ref.mean - q.mean).norm(), (ref.cov - q.cov).norm()};
}

FnormErrors fnorm_errors(const MomentBlocks& ref, const MomentBlocks& q) {
  if (ref.size() != q.size() || ref.empty()) throw DimensionMismatch("fnorm_errors: block count mismatch");
  FnormErrors acc;
  for (std::size_t j = 0; j < ref.size(); ++j) {
    const FnormErrors e = fnorm_errors(ref[j], q[j]);
    acc.mean_err += e.mean_err;
    acc.cov_err += e.cov_err;
  }
  acc.mean_err /= static_cast<double>(ref.size());
  acc.cov_err /= static_cast<double>(ref.size());
  return acc;
}

std::vector<std::size_t> match_blocks(const std::vector<Vector>& reference_means,
                                      const std::vector<Vector>& candidate_means) {
  const std::size_t j = reference_means.size();
  if (candidate_means.size() != j) throw DimensionMismatch("match_blocks: block count mismatch");
  struct Pair {
    double dist;
    std::size_t ref;
    std::size_t cand;
  };
  std::vector<Pair> pairs;
  pairs.reserve(j * j);
  for (std::size_t a = 0; a < j; ++a) {
    for (std::size_t b = 0; b < j; ++b) pairs.push_back({(reference_means[a] - candidate_means[b]).squaredNorm(), a, b});
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.dist < y.dist; });
  std::vector<std::size_t> out(j, j);
  std::vector<bool> used(j, false);
  for (const Pair& p : pairs) {
    if (out[p.ref] != j || used[p.cand]) continue;
    out[p.ref] = p.cand;
    used[p.cand] = true;
  }
  return out;
}

MomentBlocks reorder_blocks(const MomentBlocks& blocks, const std::vector<std::size_t>& order) {
  MomentBlocks out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(blocks.at(i));
  return out;
}

GridSpec GridSpec::uniform(std::size_t dims, double lo, double hi, std::size_t pts) {
  return {std::vector<double>(dims, lo), std::vector<double>(dims, hi), std::vector<std::size_t>(dims, pts)};
}

void GridSpec::validate() const {
  if (lower.empty() || lower.size() > 2) throw ConfigInvalid("grid oracle supports 1 or 2 dimensions");
  if (upper.size() != lower.size() || points.size() != lower.size()) throw ConfigInvalid("grid spec sizes differ");
  std::size_t total = 1;
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (!(upper[i] > lower[i])) throw ConfigInvalid("grid upper bound must exceed lower bound");
    if (points[i] < 3) throw ConfigInvalid("grid needs at least 3 points per dimension");
    total *= points[i];
  }
  if (total > kGridMaxPoints) throw ConfigInvalid("grid exceeds the point budget");
}

namespace {

Eigen::Index grid_dims(const GridModel& model, const Dataset& data) {
  if (const auto* p = std::get_if<ProbitGridModel>(&model)) {
    if (!data.labels && data.size() > 0) throw ConfigInvalid("probit grid needs labels");
    if (data.size() > 0 && data.dim() != p->prior.dim()) throw DimensionMismatch("probit grid: prior/input dimension");
    return p->prior.dim();
  }
  const auto& m = std::get<MoGModel>(model);
  if (data.size() > 0 && data.dim() != m.dim()) throw DimensionMismatch("mixture grid: prior/input dimension");
  return m.components * m.dim();
}

// Log of the unnormalized posterior at one grid point.
struct GridLogDensity {
  const GridModel& model;
  const Dataset& data;
  Eigen::LLT<Matrix> prior_llt;
  Vector prior_mean;

  GridLogDensity(const GridModel& m, const Dataset& d) : model(m), data(d) {
    const GaussianMoment& pr =
        std::holds_alternative<ProbitGridModel>(m) ? std::get<ProbitGridModel>(m).prior : std::get<MoGModel>(m).mean_prior;
    prior_llt.compute(pr.cov);
    prior_mean = pr.mean;
  }

  double log_prior_block(const Vector& v) const {
    const Vector z = prior_llt.matrixL().solve(v - prior_mean);
    return -0.5 * z.squaredNorm();
  }

  double operator()(const Vector& theta) const {
    if (std::holds_alternative<ProbitGridModel>(model)) {
      double lp = log_prior_block(theta);
      if (data.size() > 0) lp += kernels::probit_log_likelihood_serial(data.inputs, *data.labels, theta);
      return lp;
    }
    const auto& m = std::get<MoGModel>(model);
    std::vector<Vector> means;
    double lp = 0.0;
    for (int j = 0; j < m.components; ++j) {
      means.push_back(theta.segment(j * m.dim(), m.dim()));
      lp += log_prior_block(means.back());
    }
    if (data.size() > 0) lp += kernels::mog_log_likelihood_serial(data.inputs, means, m);
    return lp;
  }
};

struct GridLayout {
  std::vector<std::vector<double>> axes;
  std::size_t total = 1;

  explicit GridLayout(const GridSpec& g) {
    for (std::size_t i = 0; i < g.lower.size(); ++i) {
      std::vector<double> axis(g.points[i]);
      for (std::size_t k = 0; k < g.points[i]; ++k) {
        axis[k] = g.lower[i] + (g.upper[i] - g.lower[i]) * static_cast<double>(k) / static_cast<double>(g.points[i] - 1);
      }
      axes.push_back(std::move(axis));
      total *= g.points[i];
    }
  }

  // Row-major: the last axis varies fastest.
  Vector point(std::size_t flat) const {
    Vector p(static_cast<Eigen::Index>(axes.size()));
    for (std::size_t i = axes.size(); i-- > 0;) {
      p[static_cast<Eigen::Index>(i)] = axes[i][flat % axes[i].size()];
      flat /= axes[i].size();
    }
    return p;
  }

  // Trapezoid weight (up to the constant cell volume) and boundary flag.
  std::pair<double, bool> weight(std::size_t flat) const {
    double w = 1.0;
    bool boundary = false;
    for (std::size_t i = axes.size(); i-- > 0;) {
      const std::size_t k = flat % axes[i].size();
      flat /= axes[i].size();
      if (k == 0 || k + 1 == axes[i].size()) {
        w *= 0.5;
        boundary = true;
      }
    }
    return {w, boundary};
  }
};

GaussianMoment grid_moments_from_logs(const GridLayout& layout, const std::vector<double>& logs, bool parallel) {
  const std::size_t total = layout.total;
  const Eigen::Index d = static_cast<Eigen::Index>(layout.axes.size());
  const double mx = *std::max_element(logs.begin(), logs.end());
  if (!std::isfinite(mx)) throw GridTooCoarse("posterior has no finite mass on the grid");

  // Chunked accumulation, combined in chunk order.
  constexpr std::size_t kChunk = 4096;
  const std::size_t chunks = (total + kChunk - 1) / kChunk;
  struct Partial {
    double mass = 0.0;
    double boundary = 0.0;
    Vector first;
  };
  std::vector<Partial> part(chunks);
  auto first_pass = [&](std::size_t c) {
    Partial p;
    p.first = Vector::Zero(d);
    const std::size_t end = std::min(total, (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      const auto [w0, edge] = layout.weight(i);
      const double w = w0 * std::exp(logs[i] - mx);
      p.mass += w;
      if (edge) p.boundary += w;
      p.first += w * layout.point(i);
    }
    part[c] = std::move(p);
  };
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) first_pass(static_cast<std::size_t>(c));
  } else {
    for (std::size_t c = 0; c < chunks; ++c) first_pass(c);
  }
  double mass = 0.0, boundary = 0.0;
  Vector first = Vector::Zero(d);
  for (const auto& p : part) {
    mass += p.mass;
    boundary += p.boundary;
    first += p.first;
  }
  if (boundary > kGridBoundaryMass * mass) {
    throw GridTooCoarse("grid boundary holds " + std::to_string(boundary / mass) + " of the posterior mass");
  }
  const Vector mean = first / mass;

  std::vector<Matrix> second(chunks);
  auto second_pass = [&](std::size_t c) {
    Matrix s = Matrix::Zero(d, d);
    const std::size_t end = std::min(total, (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      const double w = layout.weight(i).first * std::exp(logs[i] - mx);
      const Vector dv = layout.point(i) - mean;
      s += w * dv * dv.transpose();
    }
    second[c] = std::move(s);
  };
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) second_pass(static_cast<std::size_t>(c));
  } else {
    for (std::size_t c = 0; c < chunks; ++c) second_pass(c);
  }
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& s : second) cov += s;
  return {mean, symmetrized(cov / mass)};
}

}  // namespace

GaussianMoment grid_posterior_moments_serial(const GridModel& model, const Dataset& data, const GridSpec& grid) {
  grid.validate();
  if (static_cast<std::size_t>(grid_dims(model, data)) != grid.lower.size()) {
    throw DimensionMismatch("grid dimension differs from the parameter dimension");
  }
  const GridLayout layout(grid);
  const GridLogDensity f(model, data);
  std::vector<double> logs(layout.total);
  for (std::size_t i = 0; i < layout.total; ++i) logs[i] = f(layout.point(i));
  return grid_moments_from_logs(layout, logs, false);
}

GaussianMoment grid_posterior_moments(const GridModel& model, const Dataset& data, const GridSpec& grid) {
  grid.validate();
  if (static_cast<std::size_t>(grid_dims(model, data)) != grid.lower.size()) {
    throw DimensionMismatch("grid dimension differs from the parameter dimension");
  }
  const GridLayout layout(grid);
  const GridLogDensity f(model, data);
  std::vector<double> logs(layout.total);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(layout.total); ++i) {
    logs[static_cast<std::size_t>(i)] = f(layout.point(static_cast<std::size_t>(i)));
  }
  return grid_moments_from_logs(layout, logs, true);
}

TestMetrics test_metrics(const GaussianMoment& q, const Dataset& test) {
  if (test.size() == 0) throw EmptyTestSet("test set is empty");
  if (!test.labels) throw ConfigInvalid("test set has no labels");
  if (test.dim() != q.dim()) throw DimensionMismatch("test_metrics: dimension mismatch");
  std::size_t errors = 0;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < test.inputs.rows(); ++i) {
    const Vector x = test.inputs.row(i).transpose();
    const double y = (*test.labels)[i];
    const double m = x.dot(q.mean);
    const double s = std::sqrt(x.dot(q.cov * x) + 1.0);
    ll += log_normal_cdf(y * m / s);
    const double predicted = m >= 0.0 ? 1.0 : -1.0;
    if (predicted != y) ++errors;
  }
  const double n = static_cast<double>(test.size());
  return {static_cast<double>(errors) / n, ll / n};
}

LogDensity probit_log_posterior(const Dataset& data, const GaussianMoment& prior) {
  if (!data.labels) throw ConfigInvalid("probit posterior needs labels");
  Eigen::LLT<Matrix> llt(prior.cov);
  if (llt.info() != Eigen::Success) throw NotNormalizable("prior covariance is not positive definite");
  Matrix x = data.inputs;
  Vector y = *data.labels;
  Matrix prior_chol = llt.matrixL();
  Vector prior_mean = prior.mean;
  return [x = std::move(x), y = std::move(y), prior_chol = std::move(prior_chol),
          prior_mean = std::move(prior_mean)](const Vector& theta) {
    const Vector z = prior_chol.triangularView<Eigen::Lower>().solve(theta - prior_mean);
    return -0.5 * z.squaredNorm() + kernels::probit_log_likelihood(x, y, theta);
  };
}

LogDensity mog_log_posterior(const Dataset& data, const MoGModel& model) {
  Eigen::LLT<Matrix> llt(model.mean_prior.cov);
  if (llt.info() != Eigen::Success) throw NotNormalizable("mean prior covariance is not positive definite");
  Matrix x = data.inputs;
  Matrix prior_chol = llt.matrixL();
  return [x = std::move(x), prior_chol = std::move(prior_chol), model](const Vector& theta) {
    const Eigen::Index d = model.dim();
    std::vector<Vector> means;
    double lp = 0.0;
    for (int j = 0; j < model.components; ++j) {
      means.push_back(theta.segment(j * d, d));
      const Vector z = prior_chol.triangularView<Eigen::Lower>().solve(means.back() - model.mean_prior.mean);
      lp -= 0.5 * z.squaredNorm();
    }
    return lp + kernels::mog_log_likelihood(x, means, model);
  };
}

Matrix align_samples(const Matrix& samples, int components, const std::vector<Vector>& anchor_means) {
  const Eigen::Index d = samples.cols() / components;
  if (components < 1 || d * components != samples.cols()) throw DimensionMismatch("sample width is not a multiple of J");
  Matrix out(samples.rows(), samples.cols());
  std::vector<Vector> means(static_cast<std::size_t>(components));
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    for (int j = 0; j < components; ++j) means[static_cast<std::size_t>(j)] = samples.row(i).segment(j * d, d).transpose();
    const std::vector<std::size_t> order = match_blocks(anchor_means, means);
    for (int j = 0; j < components; ++j) out.row(i).segment(j * d, d) = means[order[static_cast<std::size_t>(j)]].transpose();
  }
  return out;
}

MomentBlocks fit_aligned_blocks(const Matrix& samples, int components, const std::vector<Vector>& anchor_means) {
  const Matrix aligned = align_samples(samples, components, anchor_means);
  const Eigen::Index d = samples.cols() / components;
  MomentBlocks out;
  for (int j = 0; j < components; ++j) out.push_back(fit_gaussian(aligned.middleCols(j * d, d)));
  return out;
}

std::function<void(TraceRow&, const MomentBlocks&)> make_trace_metrics(std::optional<MomentBlocks> reference,
                                                                        std::optional<Dataset> test) {
  return [reference = std::move(reference), test = std::move(test)](TraceRow& row, const MomentBlocks& q) {
    if (reference) {
      if (reference->size() != q.size()) throw MissingReference("reference block count differs from the model");
      std::vector<Vector> ref_means, q_means;
      for (const auto& b : *reference) ref_means.push_back(b.mean);
      for (const auto& b : q) q_means.push_back(b.mean);
      const MomentBlocks matched = reorder_blocks(q, match_blocks(ref_means, q_means));
      double kl = 0.0;
      for (std::size_t j = 0; j < matched.size(); ++j) kl += calibration_kl((*reference)[j], matched[j]);
      row.kl = kl;
      const FnormErrors e = fnorm_errors(*reference, matched);
      row.mean_fnorm = e.mean_err;
      row.cov_fnorm = e.cov_err;
    }
    if (test && q.size() == 1) {
      const TestMetrics m = test_metrics(q.front(), *test);
      row.test_ll = m.mean_log_likelihood;
      row.test_err = m.error_rate;
    }
  };
}

}  // namespace sep
