#pragma once

// Minibatch kernel density estimates, forward KL against tabulated true
// densities, and the grid search for the bandwidth divisor f_sigma.

#include "density_grid.hpp"
#include "error.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace pcgan::density {

//! Smallest density used inside the logarithm of the generated density.
inline constexpr double density_floor = 1e-300;

//! Equal-weight Gaussian mixture centred on minibatch statistic values.
struct KdeMixture
{
  std::vector<double> centers;
  double sigma = 1.0;
  int s = 0;

  void validate() const
  {
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw UsageError("kde bandwidth must be positive");
    if (centers.size() < 2)
      throw UsageError("kde needs at least two centers");
    for (double c : centers)
      if (!std::isfinite(c))
        throw NumericalError("non-finite kde center");
  }
};

namespace detail {

// Visits nodes j in [lo, hi] with g = exp(-(x_j - c)^2 / (2 sigma^2)).
// Starting from the node nearest to c, neighbouring values follow from
// g_{j+1} = g_j r_j, r_{j+1} = r_j exp(-dx^2/sigma^2), so each node costs
// two multiplications. A sweep stops once g underflows to zero.
template<class Fn>
void
gaussian_sweep(const DensityGrid& grid,
               std::size_t lo,
               std::size_t hi,
               double c,
               double sigma,
               Fn&& fn)
{
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const double dx = grid.dx;
  const double q = std::exp(-dx * dx / (sigma * sigma));
  const double t = std::round((c - grid.x0) / dx);
  std::size_t j0;
  if (!(t > static_cast<double>(lo)))
    j0 = lo;
  else if (t >= static_cast<double>(hi))
    j0 = hi;
  else
    j0 = static_cast<std::size_t>(t);
  const double d0 = grid.x(j0) - c;
  const double g0 = std::exp(-d0 * d0 * inv);
  if (g0 == 0.0)
    return;
  fn(j0, g0);
  double g = g0;
  double r = std::exp(-(2.0 * d0 * dx + dx * dx) * inv);
  for (std::size_t j = j0 + 1; j <= hi; ++j) {
    g *= r;
    if (g == 0.0)
      break;
    fn(j, g);
    r *= q;
  }
  g = g0;
  r = std::exp(-(-2.0 * d0 * dx + dx * dx) * inv);
  for (std::size_t j = j0; j-- > lo;) {
    g *= r;
    if (g == 0.0)
      break;
    fn(j, g);
    r *= q;
  }
}

// Mixture values on nodes [lo, hi]; entries outside stay zero.
inline std::vector<double>
mixture_values(const KdeMixture& mix,
               const DensityGrid& grid,
               std::size_t lo,
               std::size_t hi)
{
  std::vector<double> q(grid.size(), 0.0);
  for (double c : mix.centers)
    gaussian_sweep(grid, lo, hi, c, mix.sigma, [&](std::size_t j, double g) {
      q[j] += g;
    });
  const double norm = 1.0 / (static_cast<double>(mix.centers.size()) *
                             mix.sigma * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t j = lo; j <= hi; ++j)
    q[j] *= norm;
  return q;
}

// Index range of the nonzero part of a grid; empty grid -> lo > hi.
inline std::pair<std::size_t, std::size_t>
support(const DensityGrid& g)
{
  std::size_t lo = 0;
  while (lo < g.size() && g.values[lo] == 0.0)
    ++lo;
  std::size_t hi = g.size();
  while (hi > lo && g.values[hi - 1] == 0.0)
    --hi;
  return { lo, hi == 0 ? 0 : hi - 1 };
}

} // namespace detail

//! Trapezoid-weighted KL integrand w p (log p - log q) with 0 log 0 = 0.
//! Returns true when q had to be floored.
inline bool
kl_term(double w, double p, double q, double& acc)
{
  if (p == 0.0)
    return false;
  const bool floored = q < density_floor;
  acc += w * p * (std::log(p) - std::log(floored ? density_floor : q));
  return floored;
}

//! Mixture density evaluated on every node of `grid`.
inline DensityGrid
kde_density(const KdeMixture& mix, const DensityGrid& grid)
{
  mix.validate();
  DensityGrid out{ grid.x0, grid.dx, {} };
  out.values = detail::mixture_values(mix, grid, 0, grid.size() - 1);
  return out;
}

//! Zeroes every value below max/20 and renormalizes to unit mass.
inline DensityGrid
cut_tails(DensityGrid grid)
{
  grid.validate();
  const double mx = *std::max_element(grid.values.begin(), grid.values.end());
  if (!(mx > 0.0))
    throw UsageError("cannot cut the tails of an all-zero density");
  const double threshold = mx / 20.0;
  for (auto& v : grid.values)
    if (v < threshold)
      v = 0.0;
  return normalized(std::move(grid));
}

struct KlResult
{
  double value = 0.0;
  //! dKL/d center_i; empty when not requested.
  std::vector<double> grad;
  //! Nodes where the generated density was floored.
  std::size_t floored = 0;
};

//! KL(p || q) for two densities on the same nodes.
inline KlResult
kl_grid(const DensityGrid& p, const DensityGrid& q)
{
  if (!p.same_nodes(q))
    throw UsageError("kl_grid needs densities on identical nodes");
  KlResult r;
  for (std::size_t j = 0; j < p.size(); ++j)
    r.floored += kl_term(p.weight(j), p.values[j], q.values[j], r.value);
  return r;
}

//! KL(p_true || kde) integrated on the nodes of `p_true`, plus the analytic
//! gradient with respect to every mixture center:
//!   dKL/dc_i = -(1/n) sum_j w_j p_j N(x_j; c_i, sigma) (x_j - c_i) /
//!              (sigma^2 q_j).
//! Only the support of p_true contributes, so the mixture is evaluated there
//! and nowhere else.
inline KlResult
kl_divergence(const DensityGrid& p_true,
              const KdeMixture& mix,
              bool with_gradient = true)
{
  mix.validate();
  KlResult r;
  const auto [lo, hi] = detail::support(p_true);
  if (lo > hi || lo >= p_true.size()) {
    if (with_gradient)
      r.grad.assign(mix.centers.size(), 0.0);
    return r;
  }
  auto q = detail::mixture_values(mix, p_true, lo, hi);
  std::vector<double> coef(with_gradient ? p_true.size() : 0, 0.0);
  for (std::size_t j = lo; j <= hi; ++j) {
    const double p = p_true.values[j];
    const bool floored = kl_term(p_true.weight(j), p, q[j], r.value);
    r.floored += floored;
    if (with_gradient && p > 0.0 && !floored)
      coef[j] = p_true.weight(j) * p / q[j];
  }
  if (!with_gradient)
    return r;

  const double sigma = mix.sigma;
  const double norm = 1.0 / (static_cast<double>(mix.centers.size()) * sigma *
                             std::sqrt(2.0 * std::numbers::pi));
  r.grad.resize(mix.centers.size());
  for (std::size_t i = 0; i < mix.centers.size(); ++i) {
    const double c = mix.centers[i];
    double acc = 0.0;
    detail::gaussian_sweep(
      p_true, lo, hi, c, sigma, [&](std::size_t j, double g) {
        acc += coef[j] * g * (p_true.x(j) - c);
      });
    r.grad[i] = -acc * norm / (sigma * sigma);
  }
  return r;
}

//! a_fsigma = logspace(lo, hi, n).
inline std::vector<double>
logspace(double lo, double hi, std::size_t n)
{
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = n == 1 ? lo
                            : lo + (hi - lo) * static_cast<double>(i) /
                                     static_cast<double>(n - 1);
    out[i] = std::pow(10.0, e);
  }
  return out;
}

struct FsigmaEntry
{
  int s = 0;
  std::size_t n_batch = 0;
  double f_sigma = 1.0;
  double std_s = 1.0;
};

//! Calibrated bandwidth divisors: sigma_s(n_batch) = std_s / f_sigma*.
class FsigmaTable
{
public:
  std::vector<double> grid;
  std::vector<FsigmaEntry> entries;

  const FsigmaEntry& lookup(int s, std::size_t n_batch) const
  {
    for (const auto& e : entries)
      if (e.s == s && e.n_batch == n_batch)
        return e;
    throw UsageError("no calibrated f_sigma for statistic " +
                     std::to_string(s) + " at batch size " +
                     std::to_string(n_batch));
  }

  double sigma(int s, std::size_t n_batch) const
  {
    const auto& e = lookup(s, n_batch);
    return e.std_s / e.f_sigma;
  }

  std::size_t largest_batch() const
  {
    std::size_t b = 0;
    for (const auto& e : entries)
      b = std::max(b, e.n_batch);
    return b;
  }

  void validate() const
  {
    for (const auto& e : entries) {
      if (!(e.std_s > 0.0))
        throw UsageError("f_sigma table entry with non-positive std");
      if (!(e.f_sigma >= 0.1 * (1 - 1e-12) && e.f_sigma <= 100.0 * (1 + 1e-12)))
        throw UsageError("f_sigma table entry outside [0.1, 100]");
    }
  }

  //! Plain-text table, `s n_batch f_sigma_star std_s` header, one row per
  //! entry. Lines starting with '#' carry optional metadata.
  void write(std::ostream& os, const std::string& comment = {}) const
  {
    if (!comment.empty())
      os << "# " << comment << '\n';
    os << "s n_batch f_sigma_star std_s\n";
    char buf[96];
    for (const auto& e : entries) {
      std::snprintf(buf,
                    sizeof buf,
                    "%d %zu %.17g %.17g\n",
                    e.s,
                    e.n_batch,
                    e.f_sigma,
                    e.std_s);
      os << buf;
    }
  }

  static FsigmaTable read(std::istream& is)
  {
    FsigmaTable t;
    std::string line;
    bool header = false;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#')
        continue;
      if (!header) {
        if (line != "s n_batch f_sigma_star std_s")
          throw UsageError("f_sigma table: unexpected header '" + line + "'");
        header = true;
        continue;
      }
      std::istringstream ls(line);
      FsigmaEntry e;
      if (!(ls >> e.s >> e.n_batch >> e.f_sigma >> e.std_s))
        throw UsageError("f_sigma table: malformed row '" + line + "'");
      t.entries.push_back(e);
    }
    if (!header)
      throw UsageError("f_sigma table: missing header");
    t.validate();
    return t;
  }
};

struct CalibrationOptions
{
  std::vector<std::size_t> batch_sizes{ 256 };
  std::size_t n_fsigma = 200;
  double log10_lo = -1.0;
  double log10_hi = 2.0;
  std::size_t n_avg = 50;
  std::uint64_t seed = 0;
};

//! Averaged KL over the f_sigma grid for one (statistic, batch size) cell.
struct CalibrationCurve
{
  int s = 0;
  std::size_t n_batch = 0;
  std::vector<double> mean_kl;
};

struct Calibration
{
  FsigmaTable table;
  std::vector<CalibrationCurve> curves;
};

inline double
sample_std(const std::vector<double>& v)
{
  if (v.size() < 2)
    return 0.0;
  double mean = 0.0;
  for (double x : v)
    mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v)
    ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

//! Draws n values uniformly with replacement.
inline std::vector<double>
sample_minibatch(const std::vector<double>& values, std::size_t n, Rng& rng)
{
  std::vector<double> out(n);
  for (auto& v : out)
    v = values[uniform_index(rng, values.size())];
  return out;
}

//! Grid search for f_sigma*: for every statistic s and batch size, the
//! mean KL(p_true || kde) over n_avg true-data minibatches is evaluated at
//! every grid value and the smallest minimizer kept. The minibatches of a
//! (s, batch size) cell come from a generator seeded by (seed, s, batch
//! index) and are shared by all f_sigma values of that cell.
inline Calibration
find_fsigma(const std::vector<std::vector<double>>& samples,
            const std::vector<DensityGrid>& true_densities,
            const CalibrationOptions& opt)
{
  if (samples.size() != true_densities.size())
    throw UsageError("one true density per statistic is required");
  if (opt.n_fsigma == 0 || opt.n_avg == 0 || opt.batch_sizes.empty())
    throw UsageError("empty calibration grid");
  Calibration cal;
  cal.table.grid = logspace(opt.log10_lo, opt.log10_hi, opt.n_fsigma);
  const auto& fgrid = cal.table.grid;

  for (std::size_t s = 0; s < samples.size(); ++s) {
    const double std_s = sample_std(samples[s]);
    if (!(std_s > 0.0))
      throw UsageError("statistic " + std::to_string(s) +
                       " is degenerate (zero standard deviation)");
    for (std::size_t bi = 0; bi < opt.batch_sizes.size(); ++bi) {
      const std::size_t nb = opt.batch_sizes[bi];
      if (nb < 2)
        throw UsageError("calibration batch size must be at least 2");
      Rng rng(derive_seed(opt.seed, "calibrate", s, bi));
      std::vector<std::vector<double>> batches;
      for (std::size_t a = 0; a < opt.n_avg; ++a)
        batches.push_back(sample_minibatch(samples[s], nb, rng));

      CalibrationCurve curve{ static_cast<int>(s), nb, {} };
      curve.mean_kl.resize(fgrid.size());
      std::size_t best = 0;
      for (std::size_t fi = 0; fi < fgrid.size(); ++fi) {
        double acc = 0.0;
        for (const auto& b : batches) {
          KdeMixture mix{ b, std_s / fgrid[fi], static_cast<int>(s) };
          acc += kl_divergence(true_densities[s], mix, false).value;
        }
        curve.mean_kl[fi] = acc / static_cast<double>(batches.size());
        if (curve.mean_kl[fi] < curve.mean_kl[best])
          best = fi;
      }
      cal.table.entries.push_back(
        { static_cast<int>(s), nb, fgrid[best], std_s });
      cal.curves.push_back(std::move(curve));
    }
  }
  return cal;
}

} // namespace pcgan::density
