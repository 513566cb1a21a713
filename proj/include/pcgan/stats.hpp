#pragma once

// Signal statistics used as constraints and performance metrics: one-sided
// DFT, power spectrum components, min/max/mean/mean-abs, spectral energy and
// the radially binned 2D power spectrum. Each statistic comes with a
// vector-Jacobian product.

#include "error.hpp"
#include "ndnet.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace pcgan::stats {

using Complex = std::complex<double>;

//! Mixed-radix decimation-in-time FFT for arbitrary length. Each stage
//! combines p sub-transforms with a direct O(p^2) pass, so large prime
//! factors degrade gracefully instead of being rejected.
class FftPlan
{
public:
  explicit FftPlan(std::size_t n)
    : n_(n)
  {
    if (n == 0)
      throw UsageError("fft length must be positive");
    twiddle_.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double a = -2.0 * std::numbers::pi * static_cast<double>(j) /
                       static_cast<double>(n);
      twiddle_[j] = { std::cos(a), std::sin(a) };
    }
    std::size_t m = n;
    for (std::size_t p : { 4, 2, 3, 5 })
      while (m % p == 0) {
        factors_.push_back(p);
        m /= p;
      }
    for (std::size_t p = 7; p * p <= m; p += 2)
      while (m % p == 0) {
        factors_.push_back(p);
        m /= p;
      }
    if (m > 1)
      factors_.push_back(m);
  }

  std::size_t size() const { return n_; }

  //! X_k = sum_n x_n exp(-2 pi i k n / N).
  std::vector<Complex> forward(std::span<const Complex> x) const
  {
    if (x.size() != n_)
      throw UsageError("fft input length mismatch");
    std::vector<Complex> out(n_);
    std::vector<Complex> scratch(2 * n_);
    transform(x.data(), 1, out.data(), scratch.data(), n_, 0);
    return out;
  }

  //! x_n = sum_k X_k exp(+2 pi i k n / N), without the 1/N factor.
  std::vector<Complex> backward_unscaled(std::span<const Complex> x) const
  {
    std::vector<Complex> c(x.begin(), x.end());
    for (auto& v : c)
      v = std::conj(v);
    auto out = forward(c);
    for (auto& v : out)
      v = std::conj(v);
    return out;
  }

private:
  void transform(const Complex* in,
                 std::size_t stride,
                 Complex* out,
                 Complex* scratch,
                 std::size_t n,
                 std::size_t fi) const
  {
    if (n == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t p = factors_[fi];
    const std::size_t m = n / p;
    // Sub-transforms of the p decimated sequences land in out[q*m ...].
    for (std::size_t q = 0; q < p; ++q)
      transform(in + q * stride, stride * p, out + q * m, scratch, m, fi + 1);
    const std::size_t tw_step = n_ / n;
    for (std::size_t k1 = 0; k1 < m; ++k1) {
      for (std::size_t q = 0; q < p; ++q)
        scratch[q] = out[q * m + k1] * twiddle_[(q * k1 * tw_step) % n_];
      for (std::size_t k2 = 0; k2 < p; ++k2) {
        Complex acc = scratch[0];
        for (std::size_t q = 1; q < p; ++q)
          acc += scratch[q] * twiddle_[(q * k2 * m * tw_step) % n_];
        scratch[p + k2] = acc;
      }
      for (std::size_t k2 = 0; k2 < p; ++k2)
        out[k1 + k2 * m] = scratch[p + k2];
    }
  }

  std::size_t n_;
  std::vector<Complex> twiddle_;
  std::vector<std::size_t> factors_;
};

//! One-sided DFT of a real signal: coefficients k = 0 .. floor(N/2).
inline std::vector<Complex>
rfft(std::span<const double> x)
{
  if (x.size() < 2)
    throw UsageError("rfft needs at least two samples");
  std::vector<Complex> c(x.begin(), x.end());
  auto full = FftPlan(x.size()).forward(c);
  full.resize(x.size() / 2 + 1);
  return full;
}

//! Adjoint of rfft for a real scalar loss. `cotangent[k]` packs
//! dL/dRe(X_k) + i dL/dIm(X_k); returns dL/dx.
inline std::vector<double>
rfft_vjp(std::size_t n, std::span<const Complex> cotangent)
{
  if (cotangent.size() != n / 2 + 1)
    throw UsageError("rfft cotangent length mismatch");
  // dL/dx_n = sum_k gr_k cos(th) - gi_k sin(th), th = 2 pi k n / N, which is
  // Re( sum_k conj(c_k) e^{-i th} ) = Re(FFT(conj(c) zero-padded)).
  std::vector<Complex> padded(n, Complex{});
  for (std::size_t k = 0; k < cotangent.size(); ++k)
    padded[k] = std::conj(cotangent[k]);
  auto t = FftPlan(n).forward(padded);
  std::vector<double> dx(n);
  for (std::size_t i = 0; i < n; ++i)
    dx[i] = t[i].real();
  return dx;
}

//! ps[k] = sqrt(N * S_k) with S_k = |X_k|^2 / N, i.e. |X_k|.
inline std::vector<double>
power_spectrum_1d(std::span<const double> x)
{
  auto c = rfft(x);
  std::vector<double> ps(c.size());
  for (std::size_t k = 0; k < c.size(); ++k)
    ps[k] = std::abs(c[k]);
  return ps;
}

//! VJP of power_spectrum_1d. The gradient of |X_k| at X_k = 0 is taken as 0.
inline std::vector<double>
power_spectrum_1d_vjp(std::span<const double> x, std::span<const double> cot)
{
  auto c = rfft(x);
  if (cot.size() != c.size())
    throw UsageError("power spectrum cotangent length mismatch");
  std::vector<Complex> g(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) {
    const double mag = std::abs(c[k]);
    g[k] = mag > 0.0 ? cot[k] * c[k] / mag : Complex{};
  }
  return rfft_vjp(x.size(), g);
}

struct ScalarStats
{
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double mean_abs = 0.0;
  //! E = N_x * S = sum_k |X_k|^2 over the one-sided spectrum.
  double spectral_energy = 0.0;
};

inline ScalarStats
scalar_stats(std::span<const double> x)
{
  if (x.empty())
    throw UsageError("statistics of an empty signal");
  ScalarStats s;
  s.min = *std::min_element(x.begin(), x.end());
  s.max = *std::max_element(x.begin(), x.end());
  for (double v : x) {
    s.mean += v;
    s.mean_abs += std::abs(v);
  }
  s.mean /= static_cast<double>(x.size());
  s.mean_abs /= static_cast<double>(x.size());
  if (x.size() >= 2)
    for (const auto& c : rfft(x))
      s.spectral_energy += std::norm(c);
  return s;
}

enum class StatKind
{
  ps_component,
  min,
  max,
  mean,
  mean_abs,
  spectral_energy
};

//! A scalar functional z_s of one signal, identified by class index `id`.
struct StatisticSpec
{
  int id = 0;
  StatKind kind = StatKind::ps_component;
  std::size_t k = 0;
  std::size_t signal_length = 0;

  void validate() const
  {
    if (signal_length < 1)
      throw UsageError("statistic needs a positive signal length");
    if (kind == StatKind::ps_component &&
        (signal_length < 2 || k > signal_length / 2))
      throw UsageError("power spectrum component out of range");
  }

  std::string name() const
  {
    switch (kind) {
      case StatKind::ps_component:
        return "ps[" + std::to_string(k) + "]";
      case StatKind::min:
        return "min";
      case StatKind::max:
        return "max";
      case StatKind::mean:
        return "mean";
      case StatKind::mean_abs:
        return "mean_abs";
      case StatKind::spectral_energy:
        return "spectral_energy";
    }
    return "?";
  }
};

//! The constraint set of the synthetic experiment: every ps[k].
inline std::vector<StatisticSpec>
power_spectrum_statistics(std::size_t signal_length)
{
  std::vector<StatisticSpec> out;
  for (std::size_t k = 0; k <= signal_length / 2; ++k)
    out.push_back({ static_cast<int>(k),
                    StatKind::ps_component,
                    k,
                    signal_length });
  return out;
}

//! Precomputed cos/sin tables for direct single-bin DFT evaluation; used
//! when only a few spectral components of many signals are needed.
class BinTable
{
public:
  explicit BinTable(std::size_t n)
    : n_(n)
    , cos_(n)
    , sin_(n)
  {
    for (std::size_t j = 0; j < n; ++j) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(j) /
                       static_cast<double>(n);
      cos_[j] = std::cos(a);
      sin_[j] = std::sin(a);
    }
  }

  std::size_t size() const { return n_; }

  Complex coefficient(std::span<const double> x, std::size_t k) const
  {
    double re = 0.0;
    double im = 0.0;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      re += x[i] * cos_[idx];
      im -= x[i] * sin_[idx];
      idx += k;
      if (idx >= n_)
        idx -= n_;
    }
    return { re, im };
  }

  //! dx += cot * d|X_k|/dx, zero when X_k == 0.
  void accumulate_magnitude_vjp(Complex xk,
                                std::size_t k,
                                double cot,
                                std::span<double> dx) const
  {
    const double mag = std::abs(xk);
    if (mag == 0.0)
      return;
    const double a = cot * xk.real() / mag;
    const double b = cot * xk.imag() / mag;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      dx[i] += a * cos_[idx] - b * sin_[idx];
      idx += k;
      if (idx >= n_)
        idx -= n_;
    }
  }

private:
  std::size_t n_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

inline double
evaluate(const StatisticSpec& spec, std::span<const double> x)
{
  if (x.size() != spec.signal_length)
    throw UsageError("signal length does not match statistic");
  switch (spec.kind) {
    case StatKind::ps_component: {
      auto c = rfft(x);
      return std::abs(c[spec.k]);
    }
    case StatKind::min:
      return scalar_stats(x).min;
    case StatKind::max:
      return scalar_stats(x).max;
    case StatKind::mean:
      return scalar_stats(x).mean;
    case StatKind::mean_abs:
      return scalar_stats(x).mean_abs;
    case StatKind::spectral_energy:
      return scalar_stats(x).spectral_energy;
  }
  return 0.0;
}

//! dx += cot * d(statistic)/dx. Min/max are one-hot at the first extremal
//! index; mean-abs uses sign(x) with sign(0) = 0.
inline void
accumulate_vjp(const StatisticSpec& spec,
               std::span<const double> x,
               double cot,
               std::span<double> dx)
{
  const std::size_t n = x.size();
  if (n != spec.signal_length || dx.size() != n)
    throw UsageError("signal length does not match statistic");
  switch (spec.kind) {
    case StatKind::ps_component: {
      BinTable table(n);
      table.accumulate_magnitude_vjp(
        table.coefficient(x, spec.k), spec.k, cot, dx);
      return;
    }
    case StatKind::min:
      dx[std::min_element(x.begin(), x.end()) - x.begin()] += cot;
      return;
    case StatKind::max:
      dx[std::max_element(x.begin(), x.end()) - x.begin()] += cot;
      return;
    case StatKind::mean:
      for (auto& v : dx)
        v += cot / static_cast<double>(n);
      return;
    case StatKind::mean_abs:
      for (std::size_t i = 0; i < n; ++i)
        dx[i] += cot * ((x[i] > 0.0) - (x[i] < 0.0)) / static_cast<double>(n);
      return;
    case StatKind::spectral_energy: {
      auto c = rfft(x);
      std::vector<Complex> g(c.size());
      for (std::size_t k = 0; k < c.size(); ++k)
        g[k] = 2.0 * cot * c[k];
      auto d = rfft_vjp(n, g);
      for (std::size_t i = 0; i < n; ++i)
        dx[i] += d[i];
      return;
    }
  }
}

//! The values z_si of one statistic over a minibatch of signals (rows).
struct StatisticBatch
{
  int s = 0;
  std::vector<double> values;
};

inline StatisticBatch
compute_batch(const StatisticSpec& spec, const nn::Tensor& signals)
{
  if (signals.cols() != spec.signal_length)
    throw UsageError("signal length does not match statistic");
  StatisticBatch b;
  b.s = spec.id;
  b.values.resize(signals.rows());
  if (spec.kind == StatKind::ps_component) {
    BinTable table(spec.signal_length);
    for (std::size_t r = 0; r < signals.rows(); ++r)
      b.values[r] = std::abs(table.coefficient(signals.row(r), spec.k));
  } else {
    for (std::size_t r = 0; r < signals.rows(); ++r)
      b.values[r] = evaluate(spec, signals.row(r));
  }
  return b;
}

//! d(sum_i cot_i z_si)/d signals, accumulated into `grad` (same shape).
inline void
accumulate_batch_vjp(const StatisticSpec& spec,
                     const nn::Tensor& signals,
                     std::span<const double> cot,
                     nn::Tensor& grad)
{
  if (cot.size() != signals.rows() || grad.values.size() != signals.values.size())
    throw UsageError("batch cotangent shape mismatch");
  if (spec.kind == StatKind::ps_component) {
    BinTable table(spec.signal_length);
    for (std::size_t r = 0; r < signals.rows(); ++r) {
      if (cot[r] == 0.0)
        continue;
      auto x = signals.row(r);
      table.accumulate_magnitude_vjp(
        table.coefficient(x, spec.k), spec.k, cot[r], grad.row(r));
    }
  } else {
    for (std::size_t r = 0; r < signals.rows(); ++r)
      accumulate_vjp(spec, signals.row(r), cot[r], grad.row(r));
  }
}

//! All power spectrum components of every row: result(r, k) = |X_k|.
inline nn::Tensor
power_spectrum_rows(const nn::Tensor& signals)
{
  const std::size_t n = signals.cols();
  const std::size_t nk = n / 2 + 1;
  FftPlan plan(n);
  nn::Tensor out = nn::Tensor::zeros(signals.rows(), nk);
  std::vector<Complex> c(n);
  for (std::size_t r = 0; r < signals.rows(); ++r) {
    auto x = signals.row(r);
    std::copy(x.begin(), x.end(), c.begin());
    auto f = plan.forward(c);
    for (std::size_t k = 0; k < nk; ++k)
      out.at(r, k) = std::abs(f[k]);
  }
  return out;
}

inline constexpr std::size_t radial_bins = 32;

namespace detail {

// Signed integer frequency of DFT index i for length n (numpy fftfreq * n).
inline double
signed_frequency(std::size_t i, std::size_t n)
{
  return i <= (n - 1) / 2 ? static_cast<double>(i)
                          : static_cast<double>(i) - static_cast<double>(n);
}

// Bin of radius r: bin b covers [b + 0.5, b + 1.5), b = 0..31; -1 if none.
inline int
radial_bin(double r)
{
  if (r < 0.5)
    return -1;
  const auto b = static_cast<int>(std::floor(r - 0.5));
  return b < static_cast<int>(radial_bins) ? b : -1;
}

inline std::vector<Complex>
fft2(std::span<const double> field, std::size_t h, std::size_t w)
{
  FftPlan row_plan(w);
  FftPlan col_plan(h);
  std::vector<Complex> data(field.begin(), field.end());
  std::vector<Complex> buf(std::max(h, w));
  for (std::size_t r = 0; r < h; ++r) {
    auto f = row_plan.forward({ data.data() + r * w, w });
    std::copy(f.begin(), f.end(), data.begin() + r * w);
  }
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r)
      buf[r] = data[r * w + c];
    auto f = col_plan.forward({ buf.data(), h });
    for (std::size_t r = 0; r < h; ++r)
      data[r * w + c] = f[r];
  }
  return data;
}

} // namespace detail

//! Radial profile of the 2D power spectrum |X|^2/(H W): modes are grouped
//! by k = sqrt(kx^2 + ky^2) into unit bins [k - 0.5, k + 0.5), k = 1..32,
//! and averaged; empty bins are 0.
inline std::vector<double>
radial_power_spectrum_2d(std::span<const double> field,
                         std::size_t h,
                         std::size_t w)
{
  if (h == 0 || w == 0 || field.size() != h * w)
    throw UsageError("field shape mismatch");
  auto spec = detail::fft2(field, h, w);
  std::vector<double> sum(radial_bins, 0.0);
  std::vector<double> count(radial_bins, 0.0);
  const double norm = static_cast<double>(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double kx = detail::signed_frequency(i, h);
      const double ky = detail::signed_frequency(j, w);
      const int b = detail::radial_bin(std::sqrt(kx * kx + ky * ky));
      if (b < 0)
        continue;
      sum[b] += std::norm(spec[i * w + j]) / norm;
      count[b] += 1.0;
    }
  for (std::size_t b = 0; b < radial_bins; ++b)
    sum[b] = count[b] > 0.0 ? sum[b] / count[b] : 0.0;
  return sum;
}

//! VJP of radial_power_spectrum_2d for per-bin cotangents.
inline std::vector<double>
radial_power_spectrum_2d_vjp(std::span<const double> field,
                             std::size_t h,
                             std::size_t w,
                             std::span<const double> cot)
{
  if (field.size() != h * w || cot.size() != radial_bins)
    throw UsageError("radial spectrum cotangent shape mismatch");
  auto spec = detail::fft2(field, h, w);
  std::vector<double> count(radial_bins, 0.0);
  std::vector<int> bin(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double kx = detail::signed_frequency(i, h);
      const double ky = detail::signed_frequency(j, w);
      bin[i * w + j] = detail::radial_bin(std::sqrt(kx * kx + ky * ky));
      if (bin[i * w + j] >= 0)
        count[bin[i * w + j]] += 1.0;
    }
  // d|X_m|^2/dx_n = 2 Re(conj(X_m) dX_m/dx_n); summing weighted modes gives
  // 2 Re(sum_m c_m X_m e^{+i th}), an unnormalized inverse 2D transform.
  const double norm = static_cast<double>(h * w);
  std::vector<Complex> weighted(h * w, Complex{});
  for (std::size_t m = 0; m < h * w; ++m)
    if (bin[m] >= 0)
      weighted[m] = spec[m] * (cot[bin[m]] / (count[bin[m]] * norm));
  FftPlan row_plan(w);
  FftPlan col_plan(h);
  std::vector<Complex> buf(h);
  for (std::size_t r = 0; r < h; ++r) {
    auto f = row_plan.backward_unscaled({ weighted.data() + r * w, w });
    std::copy(f.begin(), f.end(), weighted.begin() + r * w);
  }
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r)
      buf[r] = weighted[r * w + c];
    auto f = col_plan.backward_unscaled(buf);
    for (std::size_t r = 0; r < h; ++r)
      weighted[r * w + c] = f[r];
  }
  std::vector<double> dx(h * w);
  for (std::size_t m = 0; m < h * w; ++m)
    dx[m] = 2.0 * weighted[m].real();
  return dx;
}

} // namespace pcgan::stats
