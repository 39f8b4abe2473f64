// End-to-end acceptance checks. One line per criterion: PASS/FAIL, the measured
// quantities and the wall time against its budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli.hpp"
#include "sep/data.hpp"
#include "sep/inference.hpp"
#include "sep/likelihoods.hpp"
#include "sep/oracle.hpp"
#include "sep/rng.hpp"

using namespace sep;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double rel_gap(const FactorBlocks& a, const FactorBlocks& b) {
  double scale = 1.0;
  for (const auto& g : a) scale = std::max({scale, g.r.lpNorm<Eigen::Infinity>(), g.lam.lpNorm<Eigen::Infinity>()});
  return max_abs_diff(a, b) / scale;
}

Dataset probit_data(std::size_t n, int d, std::uint64_t seed, InputDist inputs = InputDist::gaussian) {
  ProbitGenConfig cfg;
  cfg.n = n;
  cfg.d = d;
  cfg.inputs = inputs;
  cfg.seed = seed;
  return gen_probit(cfg);
}

GaussianMoment prior_for(const Dataset& data) { return GaussianMoment::standard(data.dim()); }

RunConfig converge(Algorithm alg, std::size_t passes) {
  RunConfig c;
  c.algorithm = alg;
  c.passes = passes;
  c.seed = 0;
  return c;
}

GaussianMoment final_q(const RunTrace& t) { return to_moments(t.final_state.q.front()); }

GaussianMoment mcmc_reference(const Dataset& data, const GaussianMoment& prior) {
  McmcConfig mc;
  mc.seed = derive_seed(0, 0x6d636d63);
  const McmcResult res = metropolis_sample(probit_log_posterior(data, prior), prior.mean, mc);
  return fit_gaussian(res.samples);
}

// 1. Limiting-case identities between the algorithms.
Verdict identities() {
  double sep_proj = 0.0, psep_sep = 0.0, dsep1_sep = 0.0, dsepn_ep = 0.0;
  for (std::uint64_t toy = 0; toy < 6; ++toy) {
    const std::size_t n = 8u << (toy % 3);
    const int d = 1 + static_cast<int>(toy % 4);
    const Dataset data = probit_data(n, d, 100 + toy);
    const ProbitSiteModel model(data, prior_for(data));
    const double eps = 1.0 / static_cast<double>(n);

    ApproxState s = init_state(Algorithm::SEP, model);
    ApproxState p = init_state(Algorithm::ParallelSEP, model);
    ApproxState k1 = init_state(Algorithm::DSEP, model, std::vector<int>(n, 0));
    std::vector<int> own(n);
    std::iota(own.begin(), own.end(), 0);
    ApproxState ep = init_state(Algorithm::EP, model);
    ApproxState kn = init_state(Algorithm::DSEP, model, own);
    for (std::size_t pass = 0; pass < 5; ++pass) {
      for (std::size_t i : sweep_order(SweepOrder::shuffled, n, toy, pass)) {
        const GaussianMoment cavity = to_moments(blocks_divide(s.q, global_factor(s)).front());
        const GaussianMoment proj = probit_tilted_moments(cavity, model.site(i)).moments;
        sep_update(s, model, i, eps);
        sep_proj = std::max(sep_proj, rel_gap(s.q, {to_natural(proj)}));

        const std::size_t batch[] = {i};
        parallel_sep_update(p, model, batch, eps);
        psep_sep = std::max(psep_sep, rel_gap(p.q, s.q));

        dsep_update(k1, model, 0, i, eps);
        dsep1_sep = std::max(dsep1_sep, rel_gap(k1.q, s.q));

        ep_update(ep, model, i, 1.0);
        dsep_update(kn, model, i, i, 1.0);
        dsepn_ep = std::max(dsepn_ep, rel_gap(kn.q, ep.q));
      }
    }

    // Same identities through the driver.
    RunConfig c = converge(Algorithm::SEP, 5);
    c.tol = 0.0;
    const RunTrace sep_run = run(c, model);
    c.algorithm = Algorithm::ParallelSEP;
    psep_sep = std::max(psep_sep, rel_gap(run(c, model).final_state.q, sep_run.final_state.q));
    c.algorithm = Algorithm::DSEP;
    const RunTrace k1_run = run(c, model, std::vector<int>(n, 0));
    dsep1_sep = std::max(dsep1_sep, rel_gap(k1_run.final_state.q, sep_run.final_state.q));
    c.algorithm = Algorithm::EP;
    const RunTrace ep_run = run(c, model);
    c.algorithm = Algorithm::DSEP;
    c.partitions = static_cast<int>(n);
    c.damping = DampingSchedule::fixed(1.0);
    dsepn_ep = std::max(dsepn_ep, rel_gap(run(c, model, own).final_state.q, ep_run.final_state.q));
  }
  Verdict v;
  v.pass = sep_proj <= 1e-12 && psep_sep <= 1e-12 && dsep1_sep <= 1e-10 && dsepn_ep <= 1e-10;
  v.detail = "sep-proj " + fmt("%.1e", sep_proj) + ", psep(M=1)-sep " + fmt("%.1e", psep_sep) + ", dsep(K=1)-sep " +
             fmt("%.1e", dsep1_sep) + ", dsep(K=N)-ep " + fmt("%.1e", dsepn_ep);
  return v;
}

// 2. Closed form, quadrature and grid agree on single probit sites.
Verdict oracle_triangle() {
  CounterRng rng(2024);
  double quad = 0.0, grid = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const double m = 2.0 * rng.normal();
    const double v = 0.1 + 2.9 * rng.uniform();
    const double x = rng.normal();
    const double y = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const GaussianMoment cav{Vector::Constant(1, m), Matrix::Constant(1, 1, v)};
    const ProbitSite site{Vector::Constant(1, x), y};
    const TiltedResult closed = probit_tilted_moments(cav, site);
    const TiltedResult q = tilted_moments_quadrature(cav, site, 1.0);
    quad = std::max({quad, std::abs(closed.moments.mean[0] - q.moments.mean[0]),
                     std::abs(closed.moments.cov(0, 0) - q.moments.cov(0, 0)), std::abs(closed.log_z - q.log_z)});

    Dataset one;
    one.inputs = Matrix::Constant(1, 1, x);
    one.labels = Vector::Constant(1, y);
    const double sd = std::sqrt(v);
    GridSpec g;
    g.lower = {m - 12.0 * sd};
    g.upper = {m + 12.0 * sd};
    g.points = {4001};
    const GaussianMoment gm = grid_posterior_moments(ProbitGridModel{cav}, one, g);
    grid = std::max({grid, std::abs(closed.moments.mean[0] - gm.mean[0]),
                     std::abs(closed.moments.cov(0, 0) - gm.cov(0, 0))});
  }
  return {quad <= 1e-8 && grid <= 1e-4,
          "200 sites, closed-quadrature " + fmt("%.1e", quad) + ", closed-grid " + fmt("%.1e", grid)};
}

// 3. Calibration on Gaussian-input probit data.
Verdict calibration() {
  const Dataset data = probit_data(1000, 4, 0);
  const ProbitSiteModel model(data, prior_for(data));
  const GaussianMoment ref = mcmc_reference(data, model.prior_moments());

  const double kl_ep = calibration_kl(ref, final_q(run(converge(Algorithm::EP, 50), model)));
  const double kl_sep = calibration_kl(ref, final_q(run(converge(Algorithm::SEP, 50), model)));
  RunConfig adf = converge(Algorithm::ADF, 10);
  adf.tol = 0.0;
  const RunTrace adf_run = run(adf, model);
  const double kl_adf = calibration_kl(ref, final_q(adf_run));
  bool shrinking = adf_run.rows.size() == 11;
  for (std::size_t i = 1; i < adf_run.rows.size(); ++i) {
    shrinking = shrinking && adf_run.rows[i].trace_cov < adf_run.rows[i - 1].trace_cov;
  }
  Verdict v;
  v.pass = kl_ep < 0.5 && kl_sep < 0.5 && kl_sep <= 2.0 * kl_ep + 0.1 && kl_adf >= 5.0 * std::max(kl_ep, kl_sep) &&
           shrinking;
  v.detail = "KL ep " + fmt("%.4f", kl_ep) + ", sep " + fmt("%.4f", kl_sep) + ", adf " + fmt("%.3f", kl_adf) +
             ", adf trace(cov) monotone " + (shrinking ? "yes" : "no");
  return v;
}

// 4. Held-out log-likelihood ordering over random splits, ADF as a single pass.
Verdict table_pattern() {
  const Dataset data = probit_data(500, 8, 0);
  const int splits = 20;
  std::vector<double> ep, sp, adf;
  for (int r = 0; r < splits; ++r) {
    const auto [train, test] = split(data, 0.1, static_cast<std::uint64_t>(r));
    const ProbitSiteModel model(train, prior_for(train));
    ep.push_back(test_metrics(final_q(run(converge(Algorithm::EP, 50), model)), test).mean_log_likelihood);
    sp.push_back(test_metrics(final_q(run(converge(Algorithm::SEP, 50), model)), test).mean_log_likelihood);
    adf.push_back(test_metrics(final_q(run(converge(Algorithm::ADF, 1), model)), test).mean_log_likelihood);
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  auto summary = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return fmt("%.4f", m) + " +- " + fmt("%.4f", std::sqrt(ss / (v.size() - 1) / v.size()));
  };
  const double ll_ep = mean(ep), ll_sep = mean(sp), ll_adf = mean(adf);
  return {ll_ep >= ll_sep && ll_sep > ll_adf && std::abs(ll_sep - ll_ep) <= 0.02,
          "mean test LL ep " + summary(ep) + ", sep " + summary(sp) + ", adf " + summary(adf)};
}

// 5. Mixture of Gaussians: per-block errors against the sampler.
Verdict mixture() {
  MoGGenConfig gen;
  gen.seed = 0;
  const Dataset data = gen_mog(gen);
  const MoGModel mix(gen.components, gen.sigma, GaussianMoment::standard(gen.d));
  const MogSiteModel model(data, mix, 0);

  const std::vector<Vector>& anchors = *data.truth->means;
  Vector init(gen.components * gen.d);
  for (int k = 0; k < gen.components; ++k) init.segment(k * gen.d, gen.d) = anchors[static_cast<std::size_t>(k)];
  McmcConfig mc;
  mc.seed = derive_seed(0, 0x6d636d63);
  mc.steps = 150000;
  mc.burn_in = 30000;
  const McmcResult res = metropolis_sample(mog_log_posterior(data, mix), init, mc);
  const MomentBlocks ref = fit_aligned_blocks(res.samples, gen.components, anchors);
  const auto metrics = make_trace_metrics(ref, std::nullopt);

  auto errors = [&](Algorithm alg) {
    RunConfig c = converge(alg, 200);
    c.tol = 0.0;
    TraceRow row;
    metrics(row, blocks_to_moments(run(c, model).final_state.q));
    return FnormErrors{row.mean_fnorm, row.cov_fnorm};
  };
  const FnormErrors ep = errors(Algorithm::EP);
  const FnormErrors sp = errors(Algorithm::SEP);
  const FnormErrors adf = errors(Algorithm::ADF);
  Verdict v;
  v.pass = res.split_rhat <= kRhatWarning && sp.mean_err <= 2.0 * ep.mean_err && sp.cov_err <= 2.0 * ep.cov_err &&
           adf.cov_err >= 5.0 * ep.cov_err;
  v.detail = "mean/cov F-norm ep " + fmt("%.4f", ep.mean_err) + "/" + fmt("%.4f", ep.cov_err) + ", sep " +
             fmt("%.4f", sp.mean_err) + "/" + fmt("%.4f", sp.cov_err) + ", adf " + fmt("%.4f", adf.mean_err) + "/" +
             fmt("%.4f", adf.cov_err) + ", reference R-hat " + fmt("%.3f", res.split_rhat);
  return v;
}

// 6. Stored parameters against N.
Verdict memory() {
  const std::size_t d = 4, per = d + d * d;
  bool ok = true;
  std::string detail;
  for (std::size_t n : {100u, 1000u, 10000u}) {
    const Dataset data = probit_data(n, static_cast<int>(d), 1);
    const ProbitSiteModel probit(data, prior_for(data));
    const std::size_t sep = parameter_count(init_state(Algorithm::SEP, probit));
    const std::size_t ep = parameter_count(init_state(Algorithm::EP, probit));
    MoGGenConfig gen;
    gen.n = n;
    const Dataset mog = gen_mog(gen);
    const MogSiteModel latent(mog, MoGModel(gen.components, gen.sigma, GaussianMoment::standard(gen.d)));
    const std::size_t lsep = parameter_count(init_state(Algorithm::LatentSEP, latent));
    const std::size_t mog_per = static_cast<std::size_t>(gen.d + gen.d * gen.d);
    ok = ok && sep == 2 * per && ep == (n + 2) * per && lsep == 2 * gen.components * mog_per;
    detail += (detail.empty() ? "" : "; ") + std::string("N=") + std::to_string(n) + " sep " + std::to_string(sep) +
              " ep " + std::to_string(ep) + " lsep " + std::to_string(lsep);
  }
  return {ok, detail};
}

// 7. Number of DSEP factors on clustered inputs.
Verdict granularity() {
  const Dataset data = probit_data(1000, 4, 0, InputDist::mog);
  const ProbitSiteModel model(data, prior_for(data));
  const GaussianMoment ref = mcmc_reference(data, model.prior_moments());
  auto kl_for = [&](int k) {
    RunConfig c = converge(Algorithm::DSEP, 50);
    c.partitions = k;
    return calibration_kl(ref, final_q(run(c, model, resolve_partitions(data, k))));
  };
  const double k1 = kl_for(1), k5 = kl_for(5), k10 = kl_for(10);
  return {k5 <= k1 + 0.05 && std::abs(k10 - k5) <= 0.05,
          "KL K=1 " + fmt("%.4f", k1) + ", K=5 " + fmt("%.4f", k5) + ", K=10 " + fmt("%.4f", k10)};
}

// 8. gen -> run -> eval twice per algorithm, compared byte for byte.
std::string pipeline(const fs::path& dir, const std::string& alg) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto at = [&](const std::string& name) { return (dir / name).string(); };
  std::ostringstream out, err;
  const bool mixture = alg == "lsep";
  std::vector<std::string> gen = {"gen", mixture ? "mog" : "probit", "--n", "200", "--seed", "0", "--out", at("data")};
  if (alg == "dsep") gen.insert(gen.end(), {"--inputs", "mog"});
  std::vector<std::string> fit = {"run", "--data", at("data.csv"), "--alg", alg, "--passes", "5", "--out", at("fit")};
  if (alg == "psep") fit.insert(fit.end(), {"--minibatch", "10"});
  if (alg == "dsep") fit.insert(fit.end(), {"--k", "5"});
  if (alg == "ep") fit.insert(fit.end(), {"--oracle", "mcmc", "--mcmc-steps", "4000", "--mcmc-burn", "1000"});
  std::vector<std::string> eval = {"eval", "--run", "a=" + at("fit"), "--truth", at("data.truth.json"), "--out",
                                         at("compare.csv")};
  for (const auto* args : {&gen, &fit, &eval}) {
    if (cli::run_cli(*args, out, err) != 0) return "exit failure: " + err.str();
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    all += f.filename().string() + '\n' + ss.str();
  }
  return all + out.str();
}

Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / ("sep_acceptance_" + std::to_string(::getpid()));
  bool ok = true;
  std::string detail;
  for (const std::string alg : {"ep", "adf", "sep", "psep", "dsep", "lsep"}) {
    const std::string a = pipeline(dir, alg);
    const std::string b = pipeline(dir, alg);
    const bool same = a == b && a.rfind("exit failure", 0) != 0;
    ok = ok && same;
    detail += (detail.empty() ? "" : ", ") + alg + (same ? " identical" : " DIFFERS");
  }
  fs::remove_all(dir);
  return {ok, detail};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Verdict()> check;
  };
  const std::vector<Criterion> criteria = {
      {1, "algebraic identities", 10, identities},     {2, "oracle triangle", 30, oracle_triangle},
      {3, "calibration against MCMC", 300, calibration}, {4, "held-out log-likelihood", 300, table_pattern},
      {5, "mixture of Gaussians", 180, mixture},       {6, "memory contract", 60, memory},
      {7, "DSEP granularity", 300, granularity},       {8, "pipeline determinism", 120, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = v.pass && secs <= c.budget_s;
    failed += pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s [%.1f s / %.0f s]\n", pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(),
                secs, c.budget_s);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
