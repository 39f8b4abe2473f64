#pragma once

#include <vector>

namespace sep {

/// Gauss-Hermite rule for weight exp(-x^2) on the real line.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  int order() const noexcept { return static_cast<int>(nodes.size()); }
};

/// Nodes by Newton iteration on the orthonormal Hermite recurrence. Rules are
/// cached per order; the returned reference stays valid for the program lifetime.
const GaussHermiteRule& gauss_hermite_rule(int order);

GaussHermiteRule compute_gauss_hermite_rule(int order);

/// Gauss-Legendre rule on [-1, 1]; same node/weight layout.
using GaussLegendreRule = GaussHermiteRule;

const GaussLegendreRule& gauss_legendre_rule(int order);

GaussLegendreRule compute_gauss_legendre_rule(int order);

}  // namespace sep
