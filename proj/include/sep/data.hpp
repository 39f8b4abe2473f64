#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sep/expfam.hpp"

namespace sep {

/// Generative truth kept alongside synthetic datasets.
struct TruthRecord {
  std::optional<Vector> theta;                   // probit weight vector
  std::optional<std::vector<Vector>> means;      // mixture component means
  std::optional<std::vector<int>> assignments;   // mixture labels h_n
  std::optional<std::vector<Vector>> centers;    // input-cluster centres (mog-input probit)
};

struct Dataset {
  Matrix inputs;                               // N x D
  std::optional<Vector> labels;                // {-1, +1}
  std::optional<std::vector<int>> partition_of;  // values in [0, K)
  std::optional<TruthRecord> truth;

  std::size_t size() const noexcept { return static_cast<std::size_t>(inputs.rows()); }
  Eigen::Index dim() const noexcept { return inputs.cols(); }
  /// max(partition_of) + 1, or 0 when no partition is attached.
  int num_partitions() const;

  /// Throws ConfigInvalid when an invariant is broken.
  void validate() const;
};

enum class InputDist { gaussian, mog };

struct ProbitGenConfig {
  std::size_t n = 5000;
  int d = 4;
  InputDist inputs = InputDist::gaussian;
  int components = 5;   // mog inputs only
  double gamma = 1.0;   // prior variance: theta ~ N(0, gamma I)
  std::uint64_t seed = 0;

  void validate() const;
};

struct MoGGenConfig {
  std::size_t n = 200;
  int d = 2;
  int components = 4;
  double sigma = 0.5;
  double center = 0.0;  // mean prior centre m = center * 1
  std::uint64_t seed = 0;

  void validate() const;
};

/// Std of the input-cluster centres and their minimum pairwise distance (in
/// units of the within-cluster input std) for mog-input probit data.
inline constexpr double kInputCenterScale = 2.0;
inline constexpr double kInputCenterMinDistance = 4.0;

Dataset gen_probit(const ProbitGenConfig& cfg);
Dataset gen_mog(const MoGGenConfig& cfg);

/// Per-column affine map fitted on one matrix and applied to others. Constant
/// columns are dropped.
struct Standardizer {
  std::vector<Eigen::Index> kept;
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
};

struct CsvSchema {
  std::string label_column;       // empty: no labels (unsupervised data)
  std::string positive_token;     // empty: numeric labels, {0,1} or {-1,+1}
  std::string partition_column;   // optional integer column routed to partition_of
  bool standardize = true;
};

struct CsvLoad {
  Dataset data;
  std::vector<std::string> feature_names;
  std::vector<std::string> warnings;
};

/// Comma-separated, header row, '.' decimal point; missing values are rejected.
CsvLoad load_csv(const std::filesystem::path& path, const CsvSchema& schema);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

SplitIndices split_indices(std::size_t n, double test_fraction, std::uint64_t seed);
Dataset subset(const Dataset& data, const std::vector<std::size_t>& rows);
std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed);

/// Partition ids for K factors: the dataset's own partition when it has exactly K
/// groups; K a multiple of its group count splits each group round-robin; K = 1
/// puts everything together; otherwise round-robin n % K.
std::vector<int> resolve_partitions(const Dataset& data, int k);

}  // namespace sep
