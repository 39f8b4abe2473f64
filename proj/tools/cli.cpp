#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "sep/data.hpp"
#include "sep/errors.hpp"
#include "sep/inference.hpp"
#include "sep/oracle.hpp"
#include "sep/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sep::cli {

namespace {

class IoFailure : public Error {
 public:
  using Error::Error;
};

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted.store(true); }

struct SigintGuard {
  using Handler = void (*)(int);
  Handler previous;
  SigintGuard() : previous(std::signal(SIGINT, on_sigint)) { g_interrupted.store(false); }
  ~SigintGuard() { std::signal(SIGINT, previous == SIG_ERR ? SIG_DFL : previous); }
};

fs::path default_prefix(const std::string& name) {
  const char* dir = std::getenv(kOutputDirEnv);
  return (dir && *dir) ? fs::path(dir) / name : fs::path(name);
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoFailure("cannot write " + p.string());
  return f;
}

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) { return fs::path(prefix.string() + suffix); }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingReference("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError(p.string() + ": " + e.what());
  }
}

json vector_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Vector vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json nan_safe(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------
// gen

struct GenProbitArgs {
  std::size_t n = 5000;
  int d = 4;
  std::string inputs = "gaussian";
  int j = 5;
  double gamma = 1.0;
  std::uint64_t seed = 0;
  std::string out;
};

struct GenMogArgs {
  std::size_t n = 200;
  int d = 2;
  int j = 4;
  double sigma = 0.5;
  double center = 0.0;
  std::uint64_t seed = 0;
  std::string out;
};

ProbitGenConfig to_config(const GenProbitArgs& a) {
  ProbitGenConfig c;
  c.n = a.n;
  c.d = a.d;
  if (a.inputs == "gaussian") {
    c.inputs = InputDist::gaussian;
  } else if (a.inputs == "mog") {
    c.inputs = InputDist::mog;
  } else {
    throw ConfigInvalid("--inputs must be gaussian or mog");
  }
  c.components = a.j;
  c.gamma = a.gamma;
  c.seed = a.seed;
  c.validate();
  return c;
}

MoGGenConfig to_config(const GenMogArgs& a) {
  MoGGenConfig c;
  c.n = a.n;
  c.d = a.d;
  c.components = a.j;
  c.sigma = a.sigma;
  c.center = a.center;
  c.seed = a.seed;
  c.validate();
  return c;
}

void write_dataset_csv(const fs::path& path, const Dataset& data) {
  std::ofstream f = open_out(path);
  for (Eigen::Index c = 0; c < data.dim(); ++c) f << (c ? "," : "") << 'x' << c;
  if (data.labels) f << ",y";
  if (data.partition_of) f << ",partition";
  f << '\n';
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
    for (Eigen::Index c = 0; c < data.dim(); ++c) f << (c ? "," : "") << format_double(data.inputs(i, c));
    if (data.labels) f << ',' << ((*data.labels)[i] > 0 ? "1" : "-1");
    if (data.partition_of) f << ',' << (*data.partition_of)[static_cast<std::size_t>(i)];
    f << '\n';
  }
  if (!f) throw IoFailure("failed writing " + path.string());
}

json truth_json(const ProbitGenConfig& c, const Dataset& data) {
  json t;
  t["kind"] = "probit";
  t["version"] = kVersion;
  t["config"] = {{"n", c.n},
                 {"d", c.d},
                 {"inputs", c.inputs == InputDist::mog ? "mog" : "gaussian"},
                 {"j", c.components},
                 {"gamma", c.gamma},
                 {"seed", c.seed}};
  t["theta"] = vector_json(*data.truth->theta);
  if (data.truth->centers) {
    json centers = json::array();
    for (const auto& v : *data.truth->centers) centers.push_back(vector_json(v));
    t["centers"] = centers;
  }
  return t;
}

json truth_json(const MoGGenConfig& c, const Dataset& data) {
  json t;
  t["kind"] = "mog";
  t["version"] = kVersion;
  t["config"] = {{"n", c.n}, {"d", c.d}, {"j", c.components}, {"sigma", c.sigma}, {"center", c.center}, {"seed", c.seed}};
  json means = json::array();
  for (const auto& v : *data.truth->means) means.push_back(vector_json(v));
  t["means"] = means;
  t["assignments"] = *data.truth->assignments;
  return t;
}

void write_generated(const fs::path& prefix, const Dataset& data, const json& truth, std::ostream& out) {
  write_dataset_csv(with_suffix(prefix, ".csv"), data);
  std::ofstream f = open_out(with_suffix(prefix, ".truth.json"));
  f << truth.dump(2) << '\n';
  out << "wrote " << with_suffix(prefix, ".csv").string() << " (" << data.size() << " rows)\n";
}

// ---------------------------------------------------------------------------
// run

struct RunArgs {
  std::string data;
  std::string truth;
  std::string model = "auto";
  std::string label = "y";
  std::string partition_column = "auto";
  std::string standardize = "auto";
  std::string alg = "sep";
  std::size_t passes = 50;
  std::string epsilon = "auto";
  std::string damping = "auto";
  double tau = 1.0;
  double kappa = 1.0;
  std::size_t minibatch = 1;
  int k = 1;
  double alpha = 1.0;
  std::string order = "shuffled";
  std::uint64_t seed = 0;
  double tol = 1e-4;
  std::size_t stride = 0;
  double test_fraction = 0.0;
  std::int64_t split_seed = -1;
  double gamma = 0.0;
  double sigma = 0.0;
  int j = 0;
  double init_weight = 0.1;
  int hermite_order = kDefaultHermiteOrder;
  std::string oracle = "none";
  std::string reference;
  std::size_t mcmc_steps = 50000;
  std::size_t mcmc_burn = 10000;
  int mcmc_chains = 4;
  std::int64_t mcmc_seed = -1;
  std::string out;
  bool timing = false;
  json generate;  // optional in-memory dataset source (spec files only)
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunArgs, data, truth, model, label, partition_column, standardize, alg,
                                                passes, epsilon, damping, tau, kappa, minibatch, k, alpha, order, seed,
                                                tol, stride, test_fraction, split_seed, gamma, sigma, j, init_weight,
                                                hermite_order, oracle, reference, mcmc_steps, mcmc_burn, mcmc_chains,
                                                mcmc_seed, out, timing, generate)

void apply_spec(const fs::path& path, RunArgs& args) {
  const json spec = read_json(path);
  if (!spec.is_object()) throw ConfigInvalid("--spec must contain a JSON object");
  const json known = json(RunArgs{});
  for (const auto& [key, value] : spec.items()) {
    if (!known.contains(key)) throw ConfigInvalid("--spec: unknown key '" + key + "'");
  }
  json merged = known;
  merged.update(spec);
  try {
    args = merged.get<RunArgs>();
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("--spec: ") + e.what());
  }
}

std::vector<std::string> csv_header(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0, 0);
  std::string line;
  std::getline(in, line);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  return cols;
}

struct Problem {
  std::string kind;  // probit | mog
  Dataset train;
  std::optional<Dataset> test;
  json truth;  // empty when absent
  bool standardized = false;
};

Problem load_problem(const RunArgs& a) {
  Problem p;
  Dataset full;
  if (!a.generate.is_null()) {
    if (!a.data.empty()) throw ConfigInvalid("spec names both data and generate");
    const std::string kind = a.generate.value("kind", "probit");
    if (kind == "probit") {
      GenProbitArgs g;
      g.n = a.generate.value("n", g.n);
      g.d = a.generate.value("d", g.d);
      g.inputs = a.generate.value("inputs", g.inputs);
      g.j = a.generate.value("j", g.j);
      g.gamma = a.generate.value("gamma", g.gamma);
      g.seed = a.generate.value("seed", g.seed);
      const ProbitGenConfig c = to_config(g);
      full = gen_probit(c);
      p.truth = truth_json(c, full);
    } else if (kind == "mog") {
      GenMogArgs g;
      g.n = a.generate.value("n", g.n);
      g.d = a.generate.value("d", g.d);
      g.j = a.generate.value("j", g.j);
      g.sigma = a.generate.value("sigma", g.sigma);
      g.center = a.generate.value("center", g.center);
      g.seed = a.generate.value("seed", g.seed);
      const MoGGenConfig c = to_config(g);
      full = gen_mog(c);
      p.truth = truth_json(c, full);
    } else {
      throw ConfigInvalid("generate.kind must be probit or mog");
    }
    p.kind = kind;
  } else {
    if (a.data.empty()) throw ConfigInvalid("--data is required");
    const fs::path data_path(a.data);
    fs::path truth_path(a.truth);
    if (truth_path.empty()) {
      fs::path guess = data_path;
      guess.replace_extension(".truth.json");
      if (fs::exists(guess)) truth_path = guess;
    }
    if (!truth_path.empty()) p.truth = read_json(truth_path);

    const std::vector<std::string> header = csv_header(data_path);
    auto has = [&](const std::string& c) { return std::find(header.begin(), header.end(), c) != header.end(); };
    if (a.model == "auto") {
      p.kind = p.truth.contains("kind") ? p.truth["kind"].get<std::string>() : (has(a.label) ? "probit" : "mog");
    } else if (a.model == "probit" || a.model == "mog") {
      p.kind = a.model;
    } else {
      throw ConfigInvalid("--model must be auto, probit or mog");
    }
    CsvSchema schema;
    schema.label_column = p.kind == "probit" ? a.label : "";
    schema.partition_column = a.partition_column == "auto" ? (has("partition") ? "partition" : "")
                              : a.partition_column == "none" ? ""
                                                             : a.partition_column;
    schema.standardize = false;
    CsvLoad loaded = load_csv(data_path, schema);
    full = std::move(loaded.data);
  }

  if (a.standardize != "auto" && a.standardize != "on" && a.standardize != "off") {
    throw ConfigInvalid("--standardize must be auto, on or off");
  }
  const bool standardize = a.standardize == "on" || (a.standardize == "auto" && p.truth.is_null());

  if (a.test_fraction < 0.0 || a.test_fraction >= 1.0) throw ConfigInvalid("--test-fraction must be in [0, 1)");
  if (a.test_fraction > 0.0) {
    if (p.kind != "probit") throw ConfigInvalid("--test-fraction needs a labelled probit dataset");
    const std::uint64_t split_seed = a.split_seed >= 0 ? static_cast<std::uint64_t>(a.split_seed) : a.seed;
    auto [train, test] = split(full, a.test_fraction, split_seed);
    p.train = std::move(train);
    p.test = std::move(test);
  } else {
    p.train = std::move(full);
  }
  if (standardize) {
    const Standardizer s = Standardizer::fit(p.train.inputs);
    if (s.kept.empty()) throw SchemaError("every feature column is constant");
    p.train.inputs = s.apply(p.train.inputs);
    if (p.test) p.test->inputs = s.apply(p.test->inputs);
    p.standardized = true;
  }
  p.train.validate();
  return p;
}

RunConfig to_run_config(const RunArgs& a) {
  RunConfig c;
  const auto alg = parse_algorithm(a.alg);
  if (!alg) throw ConfigInvalid("--alg must be one of ep, adf, sep, psep, dsep, lsep");
  c.algorithm = *alg;
  c.passes = a.passes;
  c.minibatch = a.minibatch;
  c.partitions = a.k;
  c.alpha = a.alpha;
  if (a.order == "shuffled") {
    c.order = SweepOrder::shuffled;
  } else if (a.order == "sequential") {
    c.order = SweepOrder::sequential;
  } else {
    throw ConfigInvalid("--order must be shuffled or sequential");
  }
  c.seed = a.seed;
  c.tol = a.tol;
  c.stride = a.stride;
  c.record_wall_time = a.timing;

  std::optional<double> eps;
  if (a.epsilon != "auto") {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(a.epsilon.data(), a.epsilon.data() + a.epsilon.size(), v);
    if (ec != std::errc() || ptr != a.epsilon.data() + a.epsilon.size()) {
      throw ConfigInvalid("--epsilon must be 'auto' or a number");
    }
    eps = v;
  }
  if (a.damping == "auto") {
    if (eps) c.damping = DampingSchedule::fixed(*eps);
  } else {
    const auto kind = parse_damping(a.damping);
    if (!kind) throw ConfigInvalid("--damping must be auto, fixed, one_over_n or robbins_monro");
    switch (*kind) {
      case DampingKind::fixed:
        if (!eps) throw ConfigInvalid("--damping fixed needs a numeric --epsilon");
        c.damping = DampingSchedule::fixed(*eps);
        break;
      case DampingKind::one_over_n: c.damping = DampingSchedule::one_over_n(); break;
      case DampingKind::robbins_monro:
        c.damping = DampingSchedule::robbins_monro(eps.value_or(1.0), a.tau, a.kappa);
        break;
    }
  }
  return c;
}

json damping_json(const DampingSchedule& d) {
  return {{"kind", std::string(to_string(d.kind))}, {"epsilon0", d.epsilon0}, {"tau", d.tau}, {"kappa", d.kappa}};
}

std::unique_ptr<SiteModel> make_model(const Problem& p, const RunArgs& a, MoGModel* mog_out) {
  if (p.kind == "probit") {
    double gamma = a.gamma;
    if (gamma <= 0.0) gamma = p.truth.is_null() ? 1.0 : p.truth["config"].value("gamma", 1.0);
    const Eigen::Index d = p.train.dim();
    const GaussianMoment prior{Vector::Zero(d), gamma * Matrix::Identity(d, d)};
    return std::make_unique<ProbitSiteModel>(p.train, prior, a.hermite_order);
  }
  const json cfg = p.truth.is_null() ? json::object() : p.truth["config"];
  const double sigma = a.sigma > 0.0 ? a.sigma : cfg.value("sigma", 0.5);
  const int j = a.j > 0 ? a.j : cfg.value("j", 4);
  const double center = cfg.value("center", 0.0);
  const Eigen::Index d = p.train.dim();
  const GaussianMoment mean_prior{Vector::Constant(d, center), Matrix::Identity(d, d)};
  MoGModel m(j, sigma, mean_prior);
  *mog_out = m;
  return std::make_unique<MogSiteModel>(p.train, m, a.seed, a.init_weight);
}

// Starting means for the mixture sampler and the labels it is aligned to.
std::vector<Vector> mog_anchor_means(const Problem& p, const MogSiteModel& model) {
  std::vector<Vector> anchors;
  if (p.truth.contains("means") && !p.standardized) {
    for (const auto& m : p.truth["means"]) anchors.push_back(vector_from_json(m));
    if (anchors.size() == model.blocks()) return anchors;
    anchors.clear();
  }
  const auto& assign = model.initial_assignment();
  const Eigen::Index d = model.block_dim();
  std::vector<Vector> sums(model.blocks(), Vector::Zero(d));
  std::vector<double> counts(model.blocks(), 0.0);
  for (std::size_t i = 0; i < assign.size(); ++i) {
    sums[static_cast<std::size_t>(assign[i])] += p.train.inputs.row(static_cast<Eigen::Index>(i)).transpose();
    counts[static_cast<std::size_t>(assign[i])] += 1.0;
  }
  for (std::size_t k = 0; k < sums.size(); ++k) anchors.push_back(counts[k] > 0 ? Vector(sums[k] / counts[k]) : sums[k]);
  return anchors;
}

struct Reference {
  MomentBlocks blocks;
  json info;
};

std::optional<Reference> build_reference(const RunArgs& a, const Problem& p, const SiteModel& model,
                                         const std::optional<MoGModel>& mog, std::ostream& err) {
  if (!a.reference.empty()) {
    if (a.oracle != "none" && a.oracle != "file") throw ConfigInvalid("--reference conflicts with --oracle");
    const json j = read_json(a.reference);
    Reference r{blocks_from_json(j.at("blocks")), {{"source", "file"}, {"path", a.reference}}};
    if (r.blocks.size() != model.blocks() || r.blocks.front().dim() != model.block_dim()) {
      throw MissingReference("reference moments do not match the model dimensions");
    }
    return r;
  }
  if (a.oracle == "none") return std::nullopt;
  if (a.oracle != "mcmc") throw ConfigInvalid("--oracle must be none or mcmc");

  McmcConfig mc;
  mc.steps = a.mcmc_steps;
  mc.burn_in = a.mcmc_burn;
  mc.chains = a.mcmc_chains;
  mc.seed = a.mcmc_seed >= 0 ? static_cast<std::uint64_t>(a.mcmc_seed) : derive_seed(a.seed, 0x6d636d63);
  mc.validate();

  Reference r;
  McmcResult res;
  if (p.kind == "probit") {
    const auto& pm = dynamic_cast<const ProbitSiteModel&>(model);
    res = metropolis_sample(probit_log_posterior(p.train, pm.prior_moments()), pm.prior_moments().mean, mc);
    r.blocks = {fit_gaussian(res.samples)};
  } else {
    const auto& mm = dynamic_cast<const MogSiteModel&>(model);
    const std::vector<Vector> anchors = mog_anchor_means(p, mm);
    Vector init(static_cast<Eigen::Index>(anchors.size()) * mm.block_dim());
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      init.segment(static_cast<Eigen::Index>(k) * mm.block_dim(), mm.block_dim()) = anchors[k];
    }
    res = metropolis_sample(mog_log_posterior(p.train, *mog), init, mc);
    r.blocks = fit_aligned_blocks(res.samples, mog->components, anchors);
    // Convergence is judged on relabelled draws; raw draws mix under label switching.
    res.split_rhat = split_rhat(align_samples(res.samples, mog->components, anchors), mc.chains);
    res.rhat_warning = std::isfinite(res.split_rhat) && res.split_rhat > kRhatWarning;
  }
  if (res.rhat_warning) err << "warning: split R-hat " << res.split_rhat << " exceeds " << kRhatWarning << '\n';
  r.info = {{"source", "mcmc"},
            {"steps", mc.steps},
            {"burn_in", mc.burn_in},
            {"chains", mc.chains},
            {"seed", mc.seed},
            {"acceptance", res.acceptance},
            {"split_rhat", nan_safe(res.split_rhat)}};
  return r;
}

const std::vector<std::string> kTraceColumns = {"iter",    "kl",       "mean_fnorm",   "cov_fnorm", "test_ll",
                                                "test_err", "factor_delta", "trace_cov", "wall_ms"};

std::string trace_line(const TraceRow& r) {
  std::string s = std::to_string(r.iter);
  for (double v : {r.kl, r.mean_fnorm, r.cov_fnorm, r.test_ll, r.test_err, r.factor_delta, r.trace_cov, r.wall_ms}) {
    s += ',';
    s += format_double(v);
  }
  return s;
}

json row_json(const TraceRow& r) {
  return {{"iter", r.iter},
          {"kl", nan_safe(r.kl)},
          {"mean_fnorm", nan_safe(r.mean_fnorm)},
          {"cov_fnorm", nan_safe(r.cov_fnorm)},
          {"test_ll", nan_safe(r.test_ll)},
          {"test_err", nan_safe(r.test_err)},
          {"factor_delta", nan_safe(r.factor_delta)},
          {"trace_cov", nan_safe(r.trace_cov)},
          {"wall_ms", r.wall_ms}};
}

int cmd_run(RunArgs a, std::ostream& out, std::ostream& err) {
  const RunConfig config = to_run_config(a);
  const Problem p = load_problem(a);
  if (config.algorithm == Algorithm::LatentSEP && p.kind != "mog") throw ConfigInvalid("--alg lsep needs mixture data");

  std::optional<MoGModel> mog;
  MoGModel mog_tmp(2, 1.0, GaussianMoment::standard(1));
  std::unique_ptr<SiteModel> model = make_model(p, a, &mog_tmp);
  if (p.kind == "mog") mog = mog_tmp;

  std::vector<int> partitions;
  if (config.algorithm == Algorithm::DSEP) {
    if (a.k < 1 || static_cast<std::size_t>(a.k) > p.train.size()) throw ConfigInvalid("--k must be in [1, N]");
    partitions = resolve_partitions(p.train, a.k);
  }
  config.validate(model->size());

  const std::optional<Reference> reference = build_reference(a, p, *model, mog, err);

  const fs::path prefix = a.out.empty() ? default_prefix(a.alg) : fs::path(a.out);
  if (reference) {
    std::ofstream f = open_out(with_suffix(prefix, ".reference.json"));
    f << json{{"blocks", blocks_to_json(reference->blocks)}, {"oracle", reference->info}}.dump(2) << '\n';
  }

  std::ofstream trace_csv = open_out(with_suffix(prefix, ".trace.csv"));
  std::ofstream qtrace = open_out(with_suffix(prefix, ".qtrace.jsonl"));
  for (std::size_t i = 0; i < kTraceColumns.size(); ++i) trace_csv << (i ? "," : "") << kTraceColumns[i];
  trace_csv << '\n';

  RunHooks hooks;
  hooks.metrics = make_trace_metrics(reference ? std::optional<MomentBlocks>(reference->blocks) : std::nullopt, p.test);
  hooks.on_record = [&](const TraceRow& row, const ApproxState& state) {
    trace_csv << trace_line(row) << '\n' << std::flush;
    qtrace << json{{"iter", row.iter}, {"blocks", blocks_to_json(blocks_to_moments(state.q))}}.dump() << '\n'
           << std::flush;
  };
  hooks.should_stop = [] { return g_interrupted.load(); };

  SigintGuard guard;
  RunTrace trace = run(config, *model, partitions, hooks);
  const bool interrupted = g_interrupted.load();

  const ApproxState& st = trace.final_state;
  json factors;
  if (st.mode == Algorithm::EP) {
    factors = {{"count", st.sites.size()}, {"per_factor", parameter_count(st.sites.front())}};
  } else if (st.mode == Algorithm::DSEP) {
    std::size_t per = parameter_count(st.partition_factors.front());
    factors = {{"count", st.partition_factors.size()}, {"per_factor", per}, {"partition_sizes", st.partition_counts}};
  } else {
    factors = {{"count", 0}, {"per_factor", 0}};
  }

  json resolved = a;
  resolved.erase("generate");
  if (!a.generate.is_null()) resolved["generate"] = a.generate;
  resolved["out"] = prefix.string();
  resolved["damping_resolved"] = damping_json(config.resolved_damping());
  resolved["split_seed"] = a.split_seed >= 0 ? a.split_seed : static_cast<std::int64_t>(a.seed);

  json summary;
  summary["version"] = kVersion;
  summary["config"] = resolved;
  summary["data"] = {{"kind", p.kind},
                     {"n_train", p.train.size()},
                     {"n_test", p.test ? p.test->size() : 0},
                     {"d", p.train.dim()},
                     {"standardized", p.standardized}};
  summary["result"] = {{"steps", trace.steps},
                       {"applied", trace.applied},
                       {"skipped", trace.skipped},
                       {"passes_completed", trace.passes_completed},
                       {"converged", trace.converged},
                       {"interrupted", interrupted},
                       {"final", row_json(trace.rows.back())}};
  summary["parameter_count"] = parameter_count(st);
  summary["factors"] = factors;
  if (reference) summary["oracle"] = reference->info;
  summary["q"] = blocks_to_json(blocks_to_moments(st.q));
  if (config.algorithm == Algorithm::LatentSEP) {
    const auto resp = latent_responsibilities(st, dynamic_cast<const MogSiteModel&>(*model));
    std::vector<int> hard;
    for (const auto& r : resp) {
      const Vector pr = r.probabilities();
      Eigen::Index best = 0;
      pr.maxCoeff(&best);
      hard.push_back(static_cast<int>(best));
    }
    summary["assignments"] = hard;
  }
  std::ofstream f = open_out(with_suffix(prefix, ".summary.json"));
  f << summary.dump(2) << '\n';

  out << to_string(config.algorithm) << ": " << trace.steps << " steps, " << trace.skipped << " skipped, "
      << trace.passes_completed << " passes" << (trace.converged ? " (converged)" : "") << '\n';
  if (interrupted) {
    err << "interrupted; partial trace written\n";
    return kExitInterrupted;
  }
  if (trace.applied == 0 && trace.skipped > 0) {
    err << "error: every update was skipped\n";
    return kExitNumerical;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct TraceTable {
  std::vector<std::string> columns;
  std::map<std::size_t, std::vector<double>> rows;  // keyed by iter
};

double parse_cell(const std::string& s) {
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw SchemaError("bad trace value '" + s + "'");
  return v;
}

TraceTable read_trace(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingReference("cannot read " + path.string());
  TraceTable t;
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + " is empty");
  std::stringstream hs(line);
  for (std::string c; std::getline(hs, c, ',');) t.columns.push_back(c);
  if (t.columns.empty() || t.columns.front() != "iter") throw SchemaError(path.string() + " is not a trace file");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<double> vals;
    for (std::string c; std::getline(ss, c, ',');) vals.push_back(parse_cell(c));
    if (vals.size() != t.columns.size()) throw SchemaError(path.string() + ": ragged row");
    t.rows[static_cast<std::size_t>(vals.front())] = vals;
  }
  return t;
}

std::map<std::size_t, MomentBlocks> read_qtrace(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingReference("cannot read " + path.string());
  std::map<std::size_t, MomentBlocks> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out[j.at("iter").get<std::size_t>()] = blocks_from_json(j.at("blocks"));
  }
  return out;
}

struct EvalArgs {
  std::vector<std::string> runs;
  std::string reference;
  std::string truth;
  std::string out;
};

// Mean error of q against the generating parameters (blocks matched by mean).
double truth_error(const json& truth, const MomentBlocks& q) {
  std::vector<Vector> ref;
  if (truth.contains("theta")) {
    ref.push_back(vector_from_json(truth["theta"]));
  } else if (truth.contains("means")) {
    for (const auto& m : truth["means"]) ref.push_back(vector_from_json(m));
  } else {
    throw MissingReference("truth file has neither theta nor means");
  }
  if (ref.size() != q.size() || ref.front().size() != q.front().dim()) {
    throw MissingReference("truth dimensions do not match the trace");
  }
  std::vector<Vector> qm;
  for (const auto& b : q) qm.push_back(b.mean);
  const auto order = match_blocks(ref, qm);
  double e = 0.0;
  for (std::size_t j = 0; j < ref.size(); ++j) e += (ref[j] - qm[order[j]]).norm();
  return e / static_cast<double>(ref.size());
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.runs.empty()) throw ConfigInvalid("eval needs at least one --run");
  if (a.reference.empty() && a.truth.empty()) throw MissingReference("eval needs --reference or --truth");
  std::optional<MomentBlocks> reference;
  if (!a.reference.empty()) reference = blocks_from_json(read_json(a.reference).at("blocks"));
  json truth;
  if (!a.truth.empty()) truth = read_json(a.truth);

  const std::vector<std::string> metrics = {"kl",       "mean_fnorm",   "cov_fnorm", "test_ll",
                                            "test_err", "factor_delta", "trace_cov"};
  std::vector<std::string> labels;
  std::vector<std::map<std::size_t, std::map<std::string, double>>> values;
  std::set<std::size_t> iters;
  for (const std::string& spec : a.runs) {
    const auto eq = spec.find('=');
    const fs::path prefix = eq == std::string::npos ? fs::path(spec) : fs::path(spec.substr(eq + 1));
    std::string label = eq == std::string::npos ? prefix.filename().string() : spec.substr(0, eq);
    if (std::find(labels.begin(), labels.end(), label) != labels.end()) label += "_" + std::to_string(labels.size());
    labels.push_back(label);

    const TraceTable table = read_trace(with_suffix(prefix, ".trace.csv"));
    const auto qtrace = read_qtrace(with_suffix(prefix, ".qtrace.jsonl"));
    std::map<std::size_t, std::map<std::string, double>> v;
    for (const auto& [iter, row] : table.rows) {
      auto& cell = v[iter];
      for (std::size_t c = 1; c < table.columns.size(); ++c) cell[table.columns[c]] = row[c];
      iters.insert(iter);
      const auto q = qtrace.find(iter);
      if (q == qtrace.end()) continue;
      if (reference) {
        TraceRow r;
        make_trace_metrics(reference, std::nullopt)(r, q->second);
        cell["kl"] = r.kl;
        cell["mean_fnorm"] = r.mean_fnorm;
        cell["cov_fnorm"] = r.cov_fnorm;
      }
      if (!truth.is_null()) cell["truth_err"] = truth_error(truth, q->second);
    }
    values.push_back(std::move(v));
  }

  std::vector<std::string> cols = metrics;
  if (!truth.is_null()) cols.push_back("truth_err");
  const fs::path out_path = a.out.empty() ? default_prefix("compare.csv") : fs::path(a.out);
  std::ofstream f = open_out(out_path);
  f << "iter";
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (const auto& c : cols) f << ',' << labels[r] << '_' << c;
    if (r > 0) {
      for (const auto& c : cols) f << ',' << labels[r] << '_' << c << "_diff";
    }
  }
  f << '\n';
  auto lookup = [&](std::size_t r, std::size_t iter, const std::string& c) {
    const auto it = values[r].find(iter);
    if (it == values[r].end()) return std::numeric_limits<double>::quiet_NaN();
    const auto jt = it->second.find(c);
    return jt == it->second.end() ? std::numeric_limits<double>::quiet_NaN() : jt->second;
  };
  for (std::size_t iter : iters) {
    f << iter;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      for (const auto& c : cols) f << ',' << format_double(lookup(r, iter, c));
      if (r > 0) {
        for (const auto& c : cols) f << ',' << format_double(lookup(r, iter, c) - lookup(0, iter, c));
      }
    }
    f << '\n';
  }
  out << "wrote " << out_path.string() << " (" << iters.size() << " rows, " << labels.size() << " runs)\n";
  return kExitOk;
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const ConfigInvalid*>(&e)) return kExitConfig;
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const SchemaError*>(&e) ||
      dynamic_cast<const MissingReference*>(&e) || dynamic_cast<const DimensionMismatch*>(&e) ||
      dynamic_cast<const EmptyTestSet*>(&e) || dynamic_cast<const IoFailure*>(&e)) {
    return kExitData;
  }
  return kExitNumerical;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ec == std::errc() ? ptr : buf);
}

json blocks_to_json(const MomentBlocks& blocks) {
  json arr = json::array();
  for (const auto& b : blocks) {
    json cov = json::array();
    for (Eigen::Index i = 0; i < b.cov.rows(); ++i) cov.push_back(vector_json(b.cov.row(i).transpose()));
    arr.push_back({{"mean", vector_json(b.mean)}, {"cov", cov}});
  }
  return arr;
}

MomentBlocks blocks_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw SchemaError("expected a non-empty array of moment blocks");
  MomentBlocks out;
  try {
    for (const auto& b : j) {
      GaussianMoment g;
      g.mean = vector_from_json(b.at("mean"));
      const auto& rows = b.at("cov");
      g.cov.resize(g.mean.size(), g.mean.size());
      if (rows.size() != static_cast<std::size_t>(g.mean.size())) throw SchemaError("covariance shape mismatch");
      for (Eigen::Index i = 0; i < g.mean.size(); ++i) {
        const Vector r = vector_from_json(rows[static_cast<std::size_t>(i)]);
        if (r.size() != g.mean.size()) throw SchemaError("covariance shape mismatch");
        g.cov.row(i) = r.transpose();
      }
      out.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("moment blocks: ") + e.what());
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Expectation propagation family: generate data, run inference, compare against oracles", "sep"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset and its truth sidecar");
  gen->require_subcommand(1);
  GenProbitArgs gp;
  auto* gen_probit_cmd = gen->add_subcommand("probit", "Probit regression data");
  gen_probit_cmd->add_option("--n", gp.n, "Datapoints")->capture_default_str();
  gen_probit_cmd->add_option("--d", gp.d, "Input dimension")->capture_default_str();
  gen_probit_cmd->add_option("--inputs", gp.inputs, "gaussian or mog")->capture_default_str();
  gen_probit_cmd->add_option("--j", gp.j, "Input clusters for mog inputs")->capture_default_str();
  gen_probit_cmd->add_option("--gamma", gp.gamma, "Prior variance of theta")->capture_default_str();
  gen_probit_cmd->add_option("--seed", gp.seed)->capture_default_str();
  gen_probit_cmd->add_option("--out", gp.out, "Output prefix (writes <out>.csv, <out>.truth.json)");
  GenMogArgs gm;
  auto* gen_mog_cmd = gen->add_subcommand("mog", "Mixture-of-Gaussians clustering data");
  gen_mog_cmd->add_option("--n", gm.n)->capture_default_str();
  gen_mog_cmd->add_option("--d", gm.d)->capture_default_str();
  gen_mog_cmd->add_option("--j", gm.j, "Components")->capture_default_str();
  gen_mog_cmd->add_option("--sigma", gm.sigma, "Within-cluster std")->capture_default_str();
  gen_mog_cmd->add_option("--center", gm.center, "Mean prior centre")->capture_default_str();
  gen_mog_cmd->add_option("--seed", gm.seed)->capture_default_str();
  gen_mog_cmd->add_option("--out", gm.out, "Output prefix");

  RunArgs ra;
  std::string spec_path;
  auto* run_cmd = app.add_subcommand("run", "Run one algorithm and write its trace and summary");
  run_cmd->add_option("--spec", spec_path, "JSON experiment spec; explicit flags override it");
  run_cmd->add_option("--data", ra.data, "Dataset CSV");
  run_cmd->add_option("--truth", ra.truth, "Truth sidecar (default: <data>.truth.json when present)");
  run_cmd->add_option("--model", ra.model, "auto, probit or mog");
  run_cmd->add_option("--label", ra.label, "Label column for probit data");
  run_cmd->add_option("--partition-column", ra.partition_column, "auto, none or a column name");
  run_cmd->add_option("--standardize", ra.standardize, "auto, on or off");
  run_cmd->add_option("--alg", ra.alg, "ep, adf, sep, psep, dsep or lsep");
  run_cmd->add_option("--passes", ra.passes);
  run_cmd->add_option("--epsilon", ra.epsilon, "auto or a step size");
  run_cmd->add_option("--damping", ra.damping, "auto, fixed, one_over_n or robbins_monro");
  run_cmd->add_option("--tau", ra.tau);
  run_cmd->add_option("--kappa", ra.kappa);
  run_cmd->add_option("--minibatch", ra.minibatch, "Minibatch size for psep");
  run_cmd->add_option("--k", ra.k, "Partition count for dsep");
  run_cmd->add_option("--alpha", ra.alpha, "Power-EP exponent");
  run_cmd->add_option("--order", ra.order, "shuffled or sequential");
  run_cmd->add_option("--seed", ra.seed);
  run_cmd->add_option("--tol", ra.tol, "Convergence tolerance; <= 0 runs every pass");
  run_cmd->add_option("--stride", ra.stride, "Steps between trace rows; 0 records once per pass");
  run_cmd->add_option("--test-fraction", ra.test_fraction);
  run_cmd->add_option("--split-seed", ra.split_seed);
  run_cmd->add_option("--gamma", ra.gamma, "Probit prior variance (default from truth, else 1)");
  run_cmd->add_option("--sigma", ra.sigma, "Mixture noise std (default from truth, else 0.5)");
  run_cmd->add_option("--j", ra.j, "Mixture components (default from truth, else 4)");
  run_cmd->add_option("--init-weight", ra.init_weight);
  run_cmd->add_option("--hermite-order", ra.hermite_order);
  run_cmd->add_option("--oracle", ra.oracle, "none or mcmc");
  run_cmd->add_option("--reference", ra.reference, "Reference moments JSON");
  run_cmd->add_option("--mcmc-steps", ra.mcmc_steps);
  run_cmd->add_option("--mcmc-burn", ra.mcmc_burn);
  run_cmd->add_option("--mcmc-chains", ra.mcmc_chains);
  run_cmd->add_option("--mcmc-seed", ra.mcmc_seed);
  run_cmd->add_option("--out", ra.out, "Output prefix");
  run_cmd->add_flag("--timing", ra.timing, "Record wall-clock time in the trace");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Compare run traces against a reference");
  eval_cmd->add_option("--run", ea.runs, "label=prefix of a run (repeatable)")->required();
  eval_cmd->add_option("--reference", ea.reference, "Reference moments JSON");
  eval_cmd->add_option("--truth", ea.truth, "Truth sidecar");
  eval_cmd->add_option("--out", ea.out, "Comparison CSV");

  try {
    // The spec is applied first so that explicit flags overwrite its values.
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] == "--spec") apply_spec(args[i + 1], ra);
      if (args[i].rfind("--spec=", 0) == 0) apply_spec(args[i].substr(7), ra);
    }
    if (!args.empty() && args.back() == "--spec") throw ConfigInvalid("--spec needs a file");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);

    if (gen_probit_cmd->parsed()) {
      const ProbitGenConfig c = to_config(gp);
      const Dataset d = gen_probit(c);
      write_generated(gp.out.empty() ? default_prefix("probit") : fs::path(gp.out), d, truth_json(c, d), out);
      return kExitOk;
    }
    if (gen_mog_cmd->parsed()) {
      const MoGGenConfig c = to_config(gm);
      const Dataset d = gen_mog(c);
      write_generated(gm.out.empty() ? default_prefix("mog") : fs::path(gm.out), d, truth_json(c, d), out);
      return kExitOk;
    }
    if (run_cmd->parsed()) return cmd_run(ra, out, err);
    if (eval_cmd->parsed()) return cmd_eval(ea, out);
    return kExitConfig;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace sep::cli
