#pragma once

#include "error.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace pcgan::weighting {

//! Running loss per constraint and the sampling distribution derived from
//! it. Shared by the cEBM trainer and the constrained generator loss.
struct SamplerState
{
  std::vector<double> running_loss;
  std::vector<double> weights;

  static SamplerState uniform(std::size_t n)
  {
    if (n == 0)
      throw UsageError("sampler needs at least one constraint");
    return { std::vector<double>(n, 1.0),
             std::vector<double>(n, 1.0 / static_cast<double>(n)) };
  }

  std::size_t size() const { return running_loss.size(); }
};

//! a[i] <- (a[i] + loss)/2, then w0 = a - min(a) + 0.1 (max(a) - min(a))
//! + 1e-4 and w = w0 / sum(w0).
inline void
update_weights(SamplerState& state, double loss, std::size_t i)
{
  if (i >= state.size())
    throw UsageError("constraint index out of range");
  if (!std::isfinite(loss))
    throw NumericalError("non-finite loss fed to the constraint sampler");
  auto& a = state.running_loss;
  a[i] = (a[i] + loss) / 2.0;
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  const double amin = *lo;
  const double offset = 0.1 * (*hi - amin) + 1e-4;
  double total = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    state.weights[j] = a[j] - amin + offset;
    total += state.weights[j];
  }
  for (auto& w : state.weights)
    w /= total;
}

//! Draws an index from the categorical distribution `weights` by inverting
//! the cumulative sum with one uniform variate.
inline std::size_t
sample_index(const SamplerState& state, Rng& rng)
{
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t j = 0; j < state.weights.size(); ++j) {
    acc += state.weights[j];
    if (u < acc)
      return j;
  }
  // u lies in the rounding gap above the last partial sum.
  for (std::size_t j = state.weights.size(); j-- > 0;)
    if (state.weights[j] > 0.0)
      return j;
  return 0;
}

} // namespace pcgan::weighting
