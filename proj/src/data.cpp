#include "sep/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sep/errors.hpp"
#include "sep/rng.hpp"
#include "sep/special.hpp"

namespace sep {

namespace {

// Independent streams per generated quantity so that, e.g., changing N does not
// change theta.
enum Stream : std::uint64_t { kParamStream = 0, kCenterStream = 1, kInputStream = 2, kLabelStream = 3 };

Vector normal_vector(CounterRng& rng, Eigen::Index d, double scale) {
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = scale * rng.normal();
  return v;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = s.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

int Dataset::num_partitions() const {
  if (!partition_of || partition_of->empty()) return 0;
  return *std::max_element(partition_of->begin(), partition_of->end()) + 1;
}

void Dataset::validate() const {
  if (!inputs.allFinite()) throw ConfigInvalid("dataset inputs contain non-finite entries");
  if (labels) {
    if (static_cast<std::size_t>(labels->size()) != size()) throw ConfigInvalid("label count differs from row count");
    for (Eigen::Index i = 0; i < labels->size(); ++i) {
      if ((*labels)[i] != 1.0 && (*labels)[i] != -1.0) throw ConfigInvalid("labels must be -1 or +1");
    }
  }
  if (partition_of) {
    if (partition_of->size() != size()) throw ConfigInvalid("partition count differs from row count");
    for (int p : *partition_of) {
      if (p < 0) throw ConfigInvalid("partition ids must be non-negative");
    }
  }
}

void ProbitGenConfig::validate() const {
  if (n < 1) throw ConfigInvalid("--n must be >= 1");
  if (d < 1) throw ConfigInvalid("--d must be >= 1");
  if (inputs == InputDist::mog && components < 2) throw ConfigInvalid("--j must be >= 2 for mog inputs");
  if (!(gamma > 0.0)) throw ConfigInvalid("--gamma must be positive");
}

void MoGGenConfig::validate() const {
  if (d < 1) throw ConfigInvalid("--d must be >= 1");
  if (components < 2) throw ConfigInvalid("--j must be >= 2");
  if (n < static_cast<std::size_t>(components)) throw ConfigInvalid("--n must be >= --j");
  if (!(sigma > 0.0)) throw ConfigInvalid("--sigma must be positive");
}

Dataset gen_probit(const ProbitGenConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = cfg.d;
  const auto n = static_cast<Eigen::Index>(cfg.n);
  CounterRng param_rng(cfg.seed, kParamStream);
  CounterRng center_rng(cfg.seed, kCenterStream);
  CounterRng input_rng(cfg.seed, kInputStream);
  CounterRng label_rng(cfg.seed, kLabelStream);

  Dataset out;
  TruthRecord truth;
  const Vector theta = normal_vector(param_rng, d, std::sqrt(cfg.gamma));
  truth.theta = theta;

  out.inputs.resize(n, d);
  if (cfg.inputs == InputDist::gaussian) {
    for (Eigen::Index i = 0; i < n; ++i) out.inputs.row(i) = normal_vector(input_rng, d, 1.0).transpose();
  } else {
    std::vector<Vector> centers;
    int attempts = 0;
    while (static_cast<int>(centers.size()) < cfg.components) {
      if (++attempts > 100000) throw ConfigInvalid("could not place input clusters far enough apart");
      Vector c = normal_vector(center_rng, d, kInputCenterScale);
      const bool far = std::all_of(centers.begin(), centers.end(), [&](const Vector& o) {
        return (o - c).norm() >= kInputCenterMinDistance;
      });
      if (far) centers.push_back(std::move(c));
    }
    std::vector<int> groups(cfg.n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto g = static_cast<int>(input_rng.uniform_index(static_cast<std::uint64_t>(cfg.components)));
      groups[static_cast<std::size_t>(i)] = g;
      out.inputs.row(i) = (centers[static_cast<std::size_t>(g)] + normal_vector(input_rng, d, 1.0)).transpose();
    }
    out.partition_of = std::move(groups);
    truth.centers = std::move(centers);
  }

  Vector labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = normal_cdf(out.inputs.row(i).dot(theta));
    labels[i] = label_rng.bernoulli(p) ? 1.0 : -1.0;
  }
  out.labels = std::move(labels);
  out.truth = std::move(truth);
  return out;
}

Dataset gen_mog(const MoGGenConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = cfg.d;
  CounterRng param_rng(cfg.seed, kParamStream);
  CounterRng input_rng(cfg.seed, kInputStream);

  std::vector<Vector> means;
  for (int j = 0; j < cfg.components; ++j) {
    means.push_back(Vector::Constant(d, cfg.center) + normal_vector(param_rng, d, 1.0));
  }
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(cfg.n), d);
  std::vector<int> h(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    h[i] = static_cast<int>(input_rng.uniform_index(static_cast<std::uint64_t>(cfg.components)));
    out.inputs.row(static_cast<Eigen::Index>(i)) =
        (means[static_cast<std::size_t>(h[i])] + normal_vector(input_rng, d, cfg.sigma)).transpose();
  }
  TruthRecord truth;
  truth.means = std::move(means);
  truth.assignments = std::move(h);
  out.truth = std::move(truth);
  return out;
}

Standardizer Standardizer::fit(const Matrix& x) {
  Standardizer s;
  const double n = static_cast<double>(x.rows());
  std::vector<double> means, scales;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double m = x.col(c).mean();
    const double var = (x.col(c).array() - m).square().sum() / n;
    if (var <= 1e-24 * std::max(1.0, m * m)) continue;
    s.kept.push_back(c);
    means.push_back(m);
    scales.push_back(std::sqrt(var));
  }
  s.mean = Eigen::Map<Vector>(means.data(), static_cast<Eigen::Index>(means.size()));
  s.scale = Eigen::Map<Vector>(scales.data(), static_cast<Eigen::Index>(scales.size()));
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  Matrix out(x.rows(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    out.col(c) = (x.col(kept[k]).array() - mean[c]) / scale[c];
  }
  return out;
}

CsvLoad load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string(), 0, 0);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header row in " + path.string(), 1, 0);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // UTF-8 BOM
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_line(line);

  auto find_col = [&](const std::string& name) -> std::optional<std::size_t> {
    if (name.empty()) return std::nullopt;
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("column '" + name + "' not found in header of " + path.string());
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto label_col = find_col(schema.label_column);
  const auto part_col = find_col(schema.partition_column);

  CsvLoad result;
  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_col || c == part_col) continue;
    feature_cols.push_back(c);
    result.feature_names.push_back(header[c]);
  }
  if (feature_cols.empty()) throw SchemaError("no feature columns in " + path.string());

  std::vector<double> values;
  std::vector<double> labels;
  std::vector<int> parts;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()),
                       row, std::min(cells.size(), header.size()) + 1);
    }
    for (std::size_t c : feature_cols) {
      const auto v = parse_number(cells[c]);
      if (!v) throw ParseError("missing or non-numeric value '" + cells[c] + "'", row, c + 1);
      values.push_back(*v);
    }
    if (label_col) {
      const std::string& cell = cells[*label_col];
      if (cell.empty()) throw ParseError("missing label", row, *label_col + 1);
      if (!schema.positive_token.empty()) {
        labels.push_back(cell == schema.positive_token ? 1.0 : -1.0);
      } else {
        const auto v = parse_number(cell);
        if (!v) throw ParseError("non-numeric label '" + cell + "'; set a positive token", row, *label_col + 1);
        if (*v == 1.0) {
          labels.push_back(1.0);
        } else if (*v == 0.0 || *v == -1.0) {
          labels.push_back(-1.0);
        } else {
          throw SchemaError("numeric labels must be 0/1 or -1/+1 (row " + std::to_string(row) + ")");
        }
      }
    }
    if (part_col) {
      const auto v = parse_number(cells[*part_col]);
      if (!v || *v < 0 || *v != std::floor(*v)) throw ParseError("partition id must be a non-negative integer", row, *part_col + 1);
      parts.push_back(static_cast<int>(*v));
    }
  }
  const auto n = static_cast<Eigen::Index>(values.size() / feature_cols.size());
  if (n == 0) throw ParseError("no data rows in " + path.string(), row, 0);
  Matrix raw = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), n, static_cast<Eigen::Index>(feature_cols.size()));

  if (schema.standardize) {
    const Standardizer s = Standardizer::fit(raw);
    if (s.kept.size() != feature_cols.size()) {
      std::vector<std::string> kept_names;
      std::size_t k = 0;
      for (std::size_t c = 0; c < feature_cols.size(); ++c) {
        if (k < s.kept.size() && s.kept[k] == static_cast<Eigen::Index>(c)) {
          kept_names.push_back(result.feature_names[c]);
          ++k;
        } else {
          result.warnings.push_back("dropped constant column '" + result.feature_names[c] + "'");
        }
      }
      result.feature_names = std::move(kept_names);
    }
    if (s.kept.empty()) throw SchemaError("every feature column is constant");
    result.data.inputs = s.apply(raw);
  } else {
    result.data.inputs = std::move(raw);
  }
  if (label_col) result.data.labels = Eigen::Map<Vector>(labels.data(), n);
  if (part_col) result.data.partition_of = std::move(parts);
  result.data.validate();
  return result;
}

SplitIndices split_indices(std::size_t n, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigInvalid("test fraction must lie in (0, 1)");
  if (n < 2) throw ConfigInvalid("need at least two rows to split");
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  CounterRng rng(seed, 0);
  const std::vector<std::size_t> perm = random_permutation(n, rng);
  SplitIndices out;
  out.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(out.test.begin(), out.test.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), data.dim());
  if (data.labels) out.labels = Vector(static_cast<Eigen::Index>(rows.size()));
  if (data.partition_of) out.partition_of = std::vector<int>(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = static_cast<Eigen::Index>(rows[i]);
    out.inputs.row(static_cast<Eigen::Index>(i)) = data.inputs.row(src);
    if (data.labels) (*out.labels)[static_cast<Eigen::Index>(i)] = (*data.labels)[src];
    if (data.partition_of) (*out.partition_of)[i] = (*data.partition_of)[rows[i]];
  }
  out.truth = data.truth;
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed) {
  const SplitIndices idx = split_indices(data.size(), test_fraction, seed);
  return {subset(data, idx.train), subset(data, idx.test)};
}

std::vector<int> resolve_partitions(const Dataset& data, int k) {
  const std::size_t n = data.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) throw ConfigInvalid("--k must lie in [1, N]");
  std::vector<int> out(n, 0);
  if (k == 1) return out;
  const int groups = data.num_partitions();
  if (groups > 0 && groups == k) return *data.partition_of;
  if (groups > 0 && k % groups == 0) {
    const int per_group = k / groups;
    std::vector<int> seen(static_cast<std::size_t>(groups), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int g = (*data.partition_of)[i];
      out[i] = g * per_group + (seen[static_cast<std::size_t>(g)]++ % per_group);
    }
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<int>(i % static_cast<std::size_t>(k));
  return out;
}

}  // namespace sep
