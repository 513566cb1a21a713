#pragma once

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace pcgan {

//! A 1D density tabulated on the uniform grid x_i = x0 + i dx.
struct DensityGrid
{
  double x0 = 0.0;
  double dx = 1.0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double x(std::size_t i) const { return x0 + static_cast<double>(i) * dx; }
  double x_end() const { return x(size() - 1); }

  //! Composite trapezoid weight of node i (dx/2 at the ends).
  double weight(std::size_t i) const
  {
    return (i == 0 || i + 1 == size()) ? 0.5 * dx : dx;
  }

  double integral() const
  {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i)
      s += weight(i) * values[i];
    return s;
  }

  //! Linear interpolation; zero outside the grid.
  double at(double z) const
  {
    if (size() == 0 || z < x0 || z > x_end())
      return 0.0;
    const double t = (z - x0) / dx;
    auto i = static_cast<std::size_t>(std::floor(t));
    if (i + 1 >= size())
      return values.back();
    const double f = t - static_cast<double>(i);
    return (1.0 - f) * values[i] + f * values[i + 1];
  }

  bool same_nodes(const DensityGrid& o) const
  {
    return size() == o.size() && x0 == o.x0 && dx == o.dx;
  }

  void validate() const
  {
    if (size() < 2 || !(dx > 0.0))
      throw UsageError("density grid needs at least two nodes and dx > 0");
    for (double v : values)
      if (!std::isfinite(v) || v < 0.0)
        throw UsageError("density grid values must be finite and >= 0");
  }
};

//! Composite trapezoid rule over uniformly spaced samples.
inline double
trapezoid(std::span<const double> f, double dx)
{
  if (f.size() < 2)
    return 0.0;
  double s = 0.5 * (f.front() + f.back());
  for (std::size_t i = 1; i + 1 < f.size(); ++i)
    s += f[i];
  return s * dx;
}

inline DensityGrid
normalized(DensityGrid g)
{
  const double z = g.integral();
  if (!(z > 0.0) || !std::isfinite(z))
    throw UsageError("cannot normalize a density with zero mass");
  for (auto& v : g.values)
    v /= z;
  return g;
}

} // namespace pcgan
