#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "sep/data.hpp"
#include "sep/errors.hpp"
#include "sep/oracle.hpp"
#include "sep/rng.hpp"
#include "sep/special.hpp"

using namespace sep;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("sep_test_data_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }

  fs::path write(const std::string& name, const std::string& text) const {
    const fs::path p = path / name;
    std::ofstream(p, std::ios::binary) << text;
    return p;
  }
};

CsvSchema labelled_schema(bool standardize = false) {
  CsvSchema s;
  s.label_column = "y";
  s.standardize = standardize;
  return s;
}

// Two-sided 99% band of Binomial(n, p) from the exact cdf.
std::pair<int, int> binomial_band(int n, double p) {
  std::vector<double> pmf(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k) {
    pmf[static_cast<std::size_t>(k)] = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                                                k * std::log(p) + (n - k) * std::log1p(-p));
  }
  double acc = 0.0;
  int lo = 0;
  while (acc + pmf[static_cast<std::size_t>(lo)] < 0.005) acc += pmf[static_cast<std::size_t>(lo++)];
  acc = 0.0;
  int hi = n;
  while (acc + pmf[static_cast<std::size_t>(hi)] < 0.005) acc += pmf[static_cast<std::size_t>(hi--)];
  return {lo, hi};
}

}  // namespace

TEST_CASE("generators are pure functions of their config") {
  ProbitGenConfig pc;
  pc.n = 300;
  pc.inputs = InputDist::mog;
  pc.seed = 77;
  const Dataset a = gen_probit(pc), b = gen_probit(pc);
  CHECK(a.inputs == b.inputs);
  CHECK(*a.labels == *b.labels);
  CHECK(*a.partition_of == *b.partition_of);
  CHECK(*a.truth->theta == *b.truth->theta);
  pc.seed = 78;
  CHECK(gen_probit(pc).inputs != a.inputs);

  MoGGenConfig mc;
  mc.seed = 5;
  const Dataset m1 = gen_mog(mc), m2 = gen_mog(mc);
  CHECK(m1.inputs == m2.inputs);
  CHECK(*m1.truth->assignments == *m2.truth->assignments);
  CHECK_FALSE(m1.labels);
}

TEST_CASE("earlier rows do not depend on N") {
  ProbitGenConfig pc;
  pc.n = 3;
  pc.d = 2;
  const Dataset a = gen_probit(pc);
  ProbitGenConfig wider = pc;
  wider.n = 10;
  CHECK(gen_probit(wider).inputs.topRows(3) == a.inputs);
  CHECK(*gen_probit(wider).truth->theta == *a.truth->theta);
}

TEST_CASE("generator validation") {
  ProbitGenConfig pc;
  pc.d = 0;
  CHECK_THROWS_AS(gen_probit(pc), ConfigInvalid);
  pc = {};
  pc.gamma = 0.0;
  CHECK_THROWS_AS(gen_probit(pc), ConfigInvalid);
  pc = {};
  pc.inputs = InputDist::mog;
  pc.components = 1;
  CHECK_THROWS_AS(gen_probit(pc), ConfigInvalid);
  MoGGenConfig mc;
  mc.n = 3;
  CHECK_THROWS_AS(gen_mog(mc), ConfigInvalid);
  mc = {};
  mc.sigma = -1.0;
  CHECK_THROWS_AS(gen_mog(mc), ConfigInvalid);
}

TEST_CASE("probit positive-label rate matches its marginal") {
  for (InputDist dist : {InputDist::gaussian, InputDist::mog}) {
    ProbitGenConfig pc;
    pc.n = 100000;
    pc.inputs = dist;
    pc.seed = 11;
    const Dataset data = gen_probit(pc);
    const Vector& theta = *data.truth->theta;
    // x ~ N(c, I) gives P(y = 1 | c) = Phi(theta^T c / sqrt(1 + |theta|^2)).
    const double s = std::sqrt(1.0 + theta.squaredNorm());
    double p = 0.5;
    if (dist == InputDist::mog) {
      p = 0.0;
      for (const Vector& c : *data.truth->centers) p += normal_cdf(theta.dot(c) / s);
      p /= static_cast<double>(data.truth->centers->size());
    }
    const double rate = (data.labels->array() > 0.0).cast<double>().mean();
    CAPTURE(p);
    CHECK(std::abs(rate - p) < 3.0 * std::sqrt(p * (1.0 - p) / 1e5));
  }
}

TEST_CASE("mog-input probit carries J well-separated groups") {
  ProbitGenConfig pc;
  pc.n = 5000;
  pc.d = 4;
  pc.inputs = InputDist::mog;
  pc.components = 5;
  const Dataset data = gen_probit(pc);
  const std::set<int> groups(data.partition_of->begin(), data.partition_of->end());
  CHECK(groups.size() == 5);
  CHECK(data.num_partitions() == 5);
  const auto& centers = *data.truth->centers;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    for (std::size_t j = i + 1; j < centers.size(); ++j) CHECK((centers[i] - centers[j]).norm() >= kInputCenterMinDistance);
  }
}

TEST_CASE("mog cluster counts sit in the binomial band") {
  MoGGenConfig mc;
  mc.n = 200;
  mc.components = 4;
  mc.seed = 0;
  const Dataset data = gen_mog(mc);
  const auto& h = *data.truth->assignments;
  CHECK(h.size() == 200);
  const auto [lo, hi] = binomial_band(200, 0.25);
  int total = 0;
  for (int j = 0; j < 4; ++j) {
    const int c = static_cast<int>(std::count(h.begin(), h.end(), j));
    CAPTURE(j);
    CHECK(c >= lo);
    CHECK(c <= hi);
    total += c;
  }
  CHECK(total == 200);
}

TEST_CASE("probit truth is recovered by the grid posterior") {
  int covered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ProbitGenConfig pc;
    pc.n = 200;
    pc.d = 1;
    pc.seed = seed;
    const Dataset data = gen_probit(pc);
    const GaussianMoment post = grid_posterior_moments(ProbitGridModel{GaussianMoment::standard(1)}, data,
                                                       GridSpec::uniform(1, -8, 8, 8001));
    const double z = (post.mean[0] - (*data.truth->theta)[0]) / std::sqrt(post.cov(0, 0));
    if (std::abs(z) <= 3.0) ++covered;
  }
  CHECK(covered >= 95);
}

TEST_CASE("csv labels and header handling") {
  TempDir dir;
  const CsvLoad l = load_csv(dir.write("a.csv", "a,b,y\n1.5,2,0\n-3,4e-1,1\n"), labelled_schema());
  CHECK(l.data.size() == 2);
  CHECK(l.data.dim() == 2);
  CHECK((*l.data.labels)[0] == -1.0);
  CHECK((*l.data.labels)[1] == 1.0);
  CHECK(l.data.inputs(1, 1) == 0.4);
  CHECK(l.feature_names == std::vector<std::string>{"a", "b"});

  // BOM, CRLF, label column first, blank trailing line.
  const CsvLoad m = load_csv(dir.write("b.csv", "\xEF\xBB\xBFy,x\r\n-1,2\r\n1,3\r\n\r\n"), labelled_schema());
  CHECK(m.data.size() == 2);
  CHECK(m.data.inputs(1, 0) == 3.0);

  CsvSchema tok = labelled_schema();
  tok.positive_token = "M";
  const CsvLoad t = load_csv(dir.write("c.csv", "x,y\n1,M\n2,B\n"), tok);
  CHECK(*t.data.labels == Vector{{1.0, -1.0}});
}

TEST_CASE("csv errors carry their location") {
  TempDir dir;
  try {
    load_csv(dir.write("bad.csv", "a,b,y\n1,2,1\n3,,0\n"), labelled_schema());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 3);
    CHECK(e.column() == 2);
  }
  try {
    load_csv(dir.write("short.csv", "a,b,y\n1,2,1\n3,0\n"), labelled_schema());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.row() == 3);
  }
  CHECK_THROWS_AS(load_csv(dir.write("nan.csv", "a,y\nabc,1\n"), labelled_schema()), ParseError);
  CHECK_THROWS_AS(load_csv(dir.write("lab.csv", "a,y\n1,2\n"), labelled_schema()), SchemaError);
  CHECK_THROWS_AS(load_csv(dir.write("nolab.csv", "a,b\n1,2\n"), labelled_schema()), SchemaError);
  CHECK_THROWS_AS(load_csv(dir.write("empty.csv", "a,y\n"), labelled_schema()), ParseError);
  CHECK_THROWS_AS(load_csv(dir.path / "missing.csv", labelled_schema()), ParseError);
}

TEST_CASE("csv standardization drops constant columns") {
  TempDir dir;
  std::string text = "a,c,b,y\n";
  CounterRng rng(3);
  for (int i = 0; i < 50; ++i) {
    text += std::to_string(10.0 + 3.0 * rng.normal()) + ",7," + std::to_string(rng.uniform()) + "," +
            (rng.bernoulli(0.5) ? "1" : "0") + "\n";
  }
  const CsvLoad l = load_csv(dir.write("s.csv", text), labelled_schema(true));
  CHECK(l.data.dim() == 2);
  CHECK(l.feature_names == std::vector<std::string>{"a", "b"});
  REQUIRE(l.warnings.size() == 1);
  CHECK(l.warnings[0].find("'c'") != std::string::npos);
  for (Eigen::Index c = 0; c < 2; ++c) {
    const double m = l.data.inputs.col(c).mean();
    const double v = (l.data.inputs.col(c).array() - m).square().mean();
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(v - 1.0) < 1e-10);
  }
}

TEST_CASE("csv partition column") {
  TempDir dir;
  CsvSchema s = labelled_schema();
  s.partition_column = "g";
  const CsvLoad l = load_csv(dir.write("p.csv", "x,g,y\n1,0,1\n2,1,0\n3,1,1\n"), s);
  CHECK(l.data.dim() == 1);
  CHECK(*l.data.partition_of == std::vector<int>{0, 1, 1});
  CHECK_THROWS_AS(load_csv(dir.write("q.csv", "x,g,y\n1,0.5,1\n"), s), ParseError);
}

TEST_CASE("splits are disjoint, exhaustive and seeded") {
  const SplitIndices s = split_indices(10, 0.5, 1);
  CHECK(s.train.size() == 5);
  CHECK(s.test.size() == 5);
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(all[i] == i);
  const SplitIndices again = split_indices(10, 0.5, 1);
  CHECK(again.train == s.train);
  CHECK(split_indices(100, 0.1, 2).test.size() == 10);
  CHECK_THROWS_AS(split_indices(10, 0.0, 1), ConfigInvalid);
  CHECK_THROWS_AS(split_indices(10, 1.0, 1), ConfigInvalid);

  ProbitGenConfig pc;
  pc.n = 40;
  pc.inputs = InputDist::mog;
  const Dataset data = gen_probit(pc);
  const auto [train, test] = split(data, 0.25, 3);
  CHECK(train.size() == 30);
  CHECK(test.size() == 10);
  REQUIRE(test.partition_of);
  const SplitIndices idx = split_indices(40, 0.25, 3);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK((*test.partition_of)[i] == (*data.partition_of)[idx.test[i]]);
    CHECK(test.inputs.row(static_cast<Eigen::Index>(i)) == data.inputs.row(static_cast<Eigen::Index>(idx.test[i])));
  }
}

TEST_CASE("standardizer fitted on train applies to test") {
  Matrix train(3, 2);
  train << 1, 5, 2, 5, 3, 5;
  const Standardizer s = Standardizer::fit(train);
  CHECK(s.kept == std::vector<Eigen::Index>{0});
  Matrix test(1, 2);
  test << 4, 9;
  const Matrix t = s.apply(test);
  CHECK(t.cols() == 1);
  CHECK(t(0, 0) == doctest::Approx(2.0 / std::sqrt(2.0 / 3.0)));
}

TEST_CASE("partition resolution") {
  ProbitGenConfig pc;
  pc.n = 100;
  pc.inputs = InputDist::mog;
  pc.components = 5;
  const Dataset data = gen_probit(pc);
  CHECK(resolve_partitions(data, 5) == *data.partition_of);
  CHECK(resolve_partitions(data, 1) == std::vector<int>(100, 0));
  const std::vector<int> ten = resolve_partitions(data, 10);
  for (std::size_t i = 0; i < 100; ++i) CHECK(ten[i] / 2 == (*data.partition_of)[i]);
  const std::vector<int> seven = resolve_partitions(data, 7);
  for (std::size_t i = 0; i < 100; ++i) CHECK(seven[i] == static_cast<int>(i % 7));
  CHECK_THROWS_AS(resolve_partitions(data, 0), ConfigInvalid);
  CHECK_THROWS_AS(resolve_partitions(data, 101), ConfigInvalid);
}

TEST_CASE("dataset validation") {
  Dataset d;
  d.inputs = Matrix::Zero(2, 1);
  d.labels = Vector{{1.0, 0.0}};
  CHECK_THROWS_AS(d.validate(), ConfigInvalid);
  d.labels = Vector{{1.0, -1.0}};
  CHECK_NOTHROW(d.validate());
  d.inputs(0, 0) = std::nan("");
  CHECK_THROWS_AS(d.validate(), ConfigInvalid);
}
