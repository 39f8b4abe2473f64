// Serial reference kernels against their OpenMP versions. Prints one row per
// kernel: best-of-R wall time for each and the largest output difference.
//
//   bench_kernels [repeats]

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <vector>

#include "sep/data.hpp"
#include "sep/inference.hpp"
#include "sep/kernels.hpp"
#include "sep/oracle.hpp"

using namespace sep;

namespace {

double best_ms(int repeats, const std::function<void()>& f) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void row(const char* name, double serial_ms, double parallel_ms, double diff) {
  std::printf("%-26s %12.3f %12.3f %8.2fx %12.2e\n", name, serial_ms, parallel_ms, serial_ms / parallel_ms, diff);
}

using Factors = std::vector<std::optional<FactorBlocks>>;

double factor_gap(const Factors& a, const Factors& b) {
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].has_value() != b[i].has_value()) return 1e300;
    if (a[i]) gap = std::max(gap, max_abs_diff(*a[i], *b[i]));
  }
  return gap;
}

}  // namespace

int main(int argc, char** argv) {
  const int repeats = argc > 1 ? std::max(1, std::atoi(argv[1])) : 5;
  std::printf("threads %d, repeats %d\n", omp_get_max_threads(), repeats);
  std::printf("%-26s %12s %12s %9s %12s\n", "kernel", "serial ms", "omp ms", "speedup", "max diff");

  ProbitGenConfig pcfg;
  pcfg.n = 200000;
  pcfg.d = 16;
  const Dataset probit = gen_probit(pcfg);
  const Vector theta = probit.truth->theta.value();
  double a = 0.0, b = 0.0;
  const Matrix& x = probit.inputs;
  const Vector& y = *probit.labels;
  const double ts = best_ms(repeats, [&] { a = kernels::probit_log_likelihood_serial(x, y, theta); });
  const double tp = best_ms(repeats, [&] { b = kernels::probit_log_likelihood(x, y, theta); });
  row("probit log-likelihood", ts, tp, std::abs(a - b));

  MoGGenConfig mcfg;
  mcfg.n = 100000;
  mcfg.d = 8;
  mcfg.components = 8;
  const Dataset mog = gen_mog(mcfg);
  const MoGModel mix(mcfg.components, mcfg.sigma, GaussianMoment::standard(mcfg.d));
  const std::vector<Vector>& means = *mog.truth->means;
  const double ms = best_ms(repeats, [&] { a = kernels::mog_log_likelihood_serial(mog.inputs, means, mix); });
  const double mp = best_ms(repeats, [&] { b = kernels::mog_log_likelihood(mog.inputs, means, mix); });
  row("mixture log-likelihood", ms, mp, std::abs(a - b));

  ProbitGenConfig small = pcfg;
  small.n = 4000;
  small.d = 8;
  const Dataset sites = gen_probit(small);
  const ProbitSiteModel model(sites, GaussianMoment::standard(small.d));
  std::vector<std::size_t> batch(sites.size());
  std::iota(batch.begin(), batch.end(), 0);
  const FactorBlocks cavity = model.prior();
  for (double alpha : {1.0, 0.5}) {
    Factors fs, fp;
    const double is = best_ms(repeats, [&] { fs = intermediate_factors_serial(model, batch, cavity, alpha); });
    const double ip = best_ms(repeats, [&] { fp = intermediate_factors(model, batch, cavity, alpha); });
    row(alpha == 1.0 ? "minibatch factors a=1" : "minibatch factors a=0.5", is, ip, factor_gap(fs, fp));
  }

  ProbitGenConfig g2 = pcfg;
  g2.n = 500;
  g2.d = 2;
  const Dataset grid_data = gen_probit(g2);
  const GridSpec grid = GridSpec::uniform(2, -4.0, 4.0, 201);
  const ProbitGridModel gm{GaussianMoment::standard(2)};
  GaussianMoment gs, gp;
  const double grs = best_ms(repeats, [&] { gs = grid_posterior_moments_serial(gm, grid_data, grid); });
  const double grp = best_ms(repeats, [&] { gp = grid_posterior_moments(gm, grid_data, grid); });
  row("grid posterior (D=2)", grs, grp,
      std::max((gs.mean - gp.mean).lpNorm<Eigen::Infinity>(), (gs.cov - gp.cov).lpNorm<Eigen::Infinity>()));

  ProbitGenConfig mc_data = pcfg;
  mc_data.n = 1000;
  mc_data.d = 4;
  const Dataset chain_data = gen_probit(mc_data);
  const LogDensity target = probit_log_posterior(chain_data, GaussianMoment::standard(4));
  McmcConfig mc;
  mc.steps = 20000;
  mc.burn_in = 5000;
  McmcResult cs, cp;
  const double cts = best_ms(repeats, [&] { cs = metropolis_sample_serial(target, Vector::Zero(4), mc); });
  const double ctp = best_ms(repeats, [&] { cp = metropolis_sample(target, Vector::Zero(4), mc); });
  row("metropolis, 4 chains", cts, ctp, (cs.samples - cp.samples).lpNorm<Eigen::Infinity>());
  return 0;
}
