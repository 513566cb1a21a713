#pragma once

// Conditional energy-based model p(z | s) = exp(h(z, s)) / Z(s) over scalar
// statistics. All statistics share one network; z is mapped to [0, 1] per
// statistic and Z(s) is a trapezoid integral over that interval.

#include "artifact.hpp"
#include "density_grid.hpp"
#include "error.hpp"
#include "ndnet.hpp"
#include "rng.hpp"
#include "weighting.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace pcgan::cebm {

//! Upper bound of the squashed score, h = score_scale * sigmoid(raw).
inline constexpr double score_scale = 5.0;

//! Affine map of the observed range [lo, hi] of one statistic onto [0, 1].
struct Normalization
{
  double lo = 0.0;
  double hi = 1.0;

  //! Derivative of the map; multiplies unit-interval densities into raw ones.
  double scale() const { return 1.0 / (hi - lo); }
  double offset() const { return -lo / (hi - lo); }
  double to_unit(double z) const { return (z - lo) * scale(); }
};

struct Topology
{
  std::size_t n_statistics = 1;
  std::size_t embedding = 30;
  std::size_t s_hidden = 15;
  std::size_t z_hidden = 40;
  std::size_t trunk_hidden = 40;
  double dropout = 0.2;
};

class CEbmModel
{
public:
  //! s -> embedding -> dense+relu
  nn::MlpSpec s_branch;
  //! z -> dense+relu
  nn::MlpSpec z_branch;
  //! concat -> dense+relu -> dense+relu -> dropout -> dense (raw score)
  nn::MlpSpec trunk;
  std::vector<double> params;
  std::vector<Normalization> norm;
  std::size_t n_grid = 1024;

  static CEbmModel make(std::vector<Normalization> norm,
                        Rng& rng,
                        std::size_t n_grid = 1024,
                        Topology topo = {})
  {
    if (norm.empty())
      throw UsageError("cEBM needs at least one statistic");
    for (std::size_t s = 0; s < norm.size(); ++s)
      if (!(norm[s].hi > norm[s].lo))
        throw UsageError("statistic " + std::to_string(s) +
                         " has an empty value range");
    if (n_grid < 2)
      throw UsageError("cEBM grid needs at least two nodes");
    topo.n_statistics = norm.size();
    CEbmModel m;
    m.s_branch = nn::MlpSpec({
      nn::Layer::embedding(topo.n_statistics, topo.embedding),
      nn::Layer::dense(topo.embedding, topo.s_hidden, nn::Activation::relu),
    });
    m.z_branch = nn::MlpSpec({
      nn::Layer::dense(1, topo.z_hidden, nn::Activation::relu),
    });
    const std::size_t cat = topo.s_hidden + topo.z_hidden;
    m.trunk = nn::MlpSpec({
      nn::Layer::dense(cat, topo.trunk_hidden, nn::Activation::relu),
      nn::Layer::dense(
        topo.trunk_hidden, topo.trunk_hidden, nn::Activation::relu),
      nn::Layer::dropout(topo.trunk_hidden, topo.dropout),
      nn::Layer::dense(topo.trunk_hidden, 1),
    });
    for (const auto* spec : { &m.s_branch, &m.z_branch, &m.trunk }) {
      auto p = nn::init_params(*spec, rng);
      m.params.insert(m.params.end(), p.begin(), p.end());
    }
    m.norm = std::move(norm);
    m.n_grid = n_grid;
    return m;
  }

  std::size_t n_statistics() const { return norm.size(); }

  std::span<const double> s_params() const
  {
    return { params.data(), s_branch.parameter_count() };
  }
  std::span<const double> z_params() const
  {
    return { params.data() + s_branch.parameter_count(),
             z_branch.parameter_count() };
  }
  std::span<const double> trunk_params() const
  {
    return { params.data() + s_branch.parameter_count() +
               z_branch.parameter_count(),
             trunk.parameter_count() };
  }
  //! Mutable view of the final dense layer (weights then bias).
  std::span<double> output_layer_params()
  {
    const std::size_t n = trunk.layers.back().parameter_count();
    return { params.data() + params.size() - n, n };
  }

  void check_statistic(int s) const
  {
    if (s < 0 || static_cast<std::size_t>(s) >= n_statistics())
      throw UsageError("statistic index " + std::to_string(s) +
                       " out of range");
  }

  std::string topology() const
  {
    return s_branch.describe() + " | " + z_branch.describe() + " | " +
           trunk.describe();
  }
};

//! Forward state of one score evaluation, kept for the backward pass. A
//! pass can be reused; its buffers keep their capacity.
struct ScorePass
{
  nn::ForwardResult s_out;
  nn::ForwardResult z_out;
  nn::ForwardResult trunk_out;
  std::vector<double> h;
  // scratch for the backward pass
  nn::Tensor input;
  nn::Tensor draw;
  nn::Gradients gs, gz, gt;
};

//! h(z, s) for a set of unit-interval inputs z that share statistic s.
inline void
score_forward(const CEbmModel& m,
              int s,
              std::span<const double> z_unit,
              nn::Mode mode,
              Rng* rng,
              ScorePass& p)
{
  m.check_statistic(s);
  const std::size_t n = z_unit.size();
  p.input.shape = { 1, 1 };
  p.input.values.assign(1, static_cast<double>(s));
  nn::forward(m.s_branch, m.s_params(), p.input, mode, nullptr, p.s_out);
  p.input.shape = { n, 1 };
  p.input.values.assign(z_unit.begin(), z_unit.end());
  nn::forward(m.z_branch, m.z_params(), p.input, mode, nullptr, p.z_out);
  const std::size_t ws = m.s_branch.output_width();
  const std::size_t wz = m.z_branch.output_width();
  p.input.shape = { n, ws + wz };
  p.input.values.resize(n * (ws + wz));
  const auto& sv = p.s_out.output.values;
  const auto& zv = p.z_out.output.values;
  for (std::size_t r = 0; r < n; ++r) {
    double* row = p.input.values.data() + r * (ws + wz);
    std::copy(sv.begin(), sv.end(), row);
    std::copy(zv.begin() + r * wz, zv.begin() + (r + 1) * wz, row + ws);
  }
  nn::forward(m.trunk, m.trunk_params(), p.input, mode, rng, p.trunk_out);
  p.h.resize(n);
  for (std::size_t r = 0; r < n; ++r)
    p.h[r] = score_scale / (1.0 + std::exp(-p.trunk_out.output.values[r]));
}

inline ScorePass
score_forward(const CEbmModel& m,
              int s,
              std::span<const double> z_unit,
              nn::Mode mode,
              Rng* rng = nullptr)
{
  ScorePass p;
  score_forward(m, s, z_unit, mode, rng, p);
  return p;
}

//! Parameter gradient of sum_r dh[r] * h_r, written to `grad`.
inline void
score_backward(const CEbmModel& m,
               ScorePass& p,
               std::span<const double> dh,
               std::vector<double>& grad)
{
  const std::size_t n = p.h.size();
  p.draw.shape = { n, 1 };
  p.draw.values.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double sg = p.h[r] / score_scale;
    p.draw.values[r] = dh[r] * score_scale * sg * (1.0 - sg);
  }
  nn::backward(p.trunk_out.tape, p.draw, p.gt);
  const std::size_t ws = m.s_branch.output_width();
  const std::size_t wz = m.z_branch.output_width();
  // p.draw and p.input double as the branch cotangents
  p.input.shape = { 1, ws };
  p.input.values.assign(ws, 0.0);
  p.draw.shape = { n, wz };
  p.draw.values.resize(n * wz);
  const auto& gi = p.gt.input.values;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = gi.data() + r * (ws + wz);
    for (std::size_t j = 0; j < ws; ++j)
      p.input.values[j] += row[j];
    std::copy(row + ws, row + ws + wz, p.draw.values.begin() + r * wz);
  }
  nn::backward(p.s_out.tape, p.input, p.gs);
  nn::backward(p.z_out.tape, p.draw, p.gz);
  grad.clear();
  grad.insert(grad.end(), p.gs.params.begin(), p.gs.params.end());
  grad.insert(grad.end(), p.gz.params.begin(), p.gz.params.end());
  grad.insert(grad.end(), p.gt.params.begin(), p.gt.params.end());
}

inline std::vector<double>
score_backward(const CEbmModel& m, ScorePass& p, std::span<const double> dh)
{
  std::vector<double> grad;
  score_backward(m, p, dh, grad);
  return grad;
}

//! Quadrature nodes z_j = j / (n - 1) on [0, 1].
inline std::vector<double>
unit_grid(std::size_t n)
{
  std::vector<double> z(n);
  for (std::size_t j = 0; j < n; ++j)
    z[j] = static_cast<double>(j) / static_cast<double>(n - 1);
  return z;
}

//! Z = trapezoid integral of exp(h) over equally spaced scores.
inline double
partition_from_scores(std::span<const double> h, double dz)
{
  std::vector<double> e(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    e[j] = std::exp(h[j]);
    if (!std::isfinite(e[j]))
      throw NumericalError("non-finite exponent in partition function");
  }
  return trapezoid(e, dz);
}

//! log Z - mean(h_batch).
inline double
nll_from_scores(std::span<const double> h_batch,
                std::span<const double> h_grid,
                double dz)
{
  double mean = 0.0;
  for (double v : h_batch)
    mean += v;
  mean /= static_cast<double>(h_batch.size());
  return std::log(partition_from_scores(h_grid, dz)) - mean;
}

inline double
ebm_score(const CEbmModel& m, double z_unit, int s)
{
  return score_forward(m, s, std::span(&z_unit, 1), nn::Mode::eval).h[0];
}

inline double
partition(const CEbmModel& m, int s)
{
  auto z = unit_grid(m.n_grid);
  auto p = score_forward(m, s, z, nn::Mode::eval);
  return partition_from_scores(p.h, 1.0 / static_cast<double>(m.n_grid - 1));
}

//! Density in unit-interval coordinates; multiply by norm[s].scale() for
//! raw coordinates.
inline double
ebm_density(const CEbmModel& m, double z_unit, int s)
{
  return std::exp(ebm_score(m, z_unit, s)) / partition(m, s);
}

struct NllResult
{
  double value = 0.0;
  std::vector<double> grad;
  //! Batch values that fell outside the observed range and were clamped.
  std::size_t clamped = 0;
};

//! Per-sample negative log-likelihood log Z(s) - mean_i h(z_i, s) of a batch
//! of raw statistic values, with the parameter gradient. The quadrature
//! nodes run through the same forward pass as the batch, so the gradient of
//! log Z is exact for the discretized objective.
inline NllResult
nll_batch(const CEbmModel& m,
          int s,
          std::span<const double> raw_values,
          nn::Mode mode = nn::Mode::eval,
          Rng* rng = nullptr,
          bool with_gradient = true,
          ScorePass* workspace = nullptr)
{
  m.check_statistic(s);
  if (raw_values.empty())
    throw UsageError("nll of an empty batch");
  NllResult res;
  const std::size_t nb = raw_values.size();
  const std::size_t ng = m.n_grid;
  const auto& nm = m.norm[static_cast<std::size_t>(s)];
  std::vector<double> z(nb + ng);
  for (std::size_t i = 0; i < nb; ++i) {
    double u = nm.to_unit(raw_values[i]);
    if (u < 0.0 || u > 1.0) {
      ++res.clamped;
      u = std::clamp(u, 0.0, 1.0);
    }
    z[i] = u;
  }
  const double dz = 1.0 / static_cast<double>(ng - 1);
  for (std::size_t j = 0; j < ng; ++j)
    z[nb + j] = static_cast<double>(j) * dz;

  ScorePass local;
  ScorePass& pass = workspace ? *workspace : local;
  score_forward(m, s, z, mode, rng, pass);
  std::span<const double> hb(pass.h.data(), nb);
  std::span<const double> hg(pass.h.data() + nb, ng);
  double zpart = 0.0;
  std::vector<double> wexp(ng);
  for (std::size_t j = 0; j < ng; ++j) {
    const double w = (j == 0 || j + 1 == ng) ? 0.5 * dz : dz;
    wexp[j] = w * std::exp(hg[j]);
    zpart += wexp[j];
  }
  double mean = 0.0;
  for (double v : hb)
    mean += v;
  mean /= static_cast<double>(nb);
  res.value = std::log(zpart) - mean;
  if (!std::isfinite(res.value))
    throw NumericalError("non-finite NLL for statistic " + std::to_string(s));
  if (!with_gradient)
    return res;

  std::vector<double> dh(nb + ng);
  for (std::size_t i = 0; i < nb; ++i)
    dh[i] = -1.0 / static_cast<double>(nb);
  for (std::size_t j = 0; j < ng; ++j)
    dh[nb + j] = wexp[j] / zpart;
  score_backward(m, pass, dh, res.grad);
  return res;
}

//! Eval-mode density of statistic s on n_grid nodes of [0, 1], renormalized
//! to unit trapezoid mass.
inline DensityGrid
tabulate_density(const CEbmModel& m, int s, std::size_t n_grid)
{
  if (n_grid < 2)
    throw UsageError("tabulation grid needs at least two nodes");
  auto z = unit_grid(n_grid);
  auto p = score_forward(m, s, z, nn::Mode::eval);
  DensityGrid g{ 0.0, 1.0 / static_cast<double>(n_grid - 1), {} };
  g.values.resize(n_grid);
  for (std::size_t j = 0; j < n_grid; ++j)
    g.values[j] = std::exp(p.h[j]);
  return normalized(std::move(g));
}

//! The same density expressed on the raw-value interval [lo, hi].
inline DensityGrid
tabulate_raw(const CEbmModel& m, int s, std::size_t n_grid)
{
  auto g = tabulate_density(m, s, n_grid);
  const auto& nm = m.norm[static_cast<std::size_t>(s)];
  g.x0 = nm.lo;
  g.dx = (nm.hi - nm.lo) / static_cast<double>(n_grid - 1);
  for (auto& v : g.values)
    v *= nm.scale();
  return g;
}

struct TrainOptions
{
  std::size_t iterations = 20000;
  std::size_t batch_size = 1024;
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.99;
  std::vector<std::size_t> milestones{ 6000, 12000 };
  double lr_factor = 0.5;
  std::size_t max_statistics_per_step = 10;
  std::size_t n_grid = 1024;
  std::uint64_t seed = 0;
  Topology topology;
  //! Optional per-statistic standard deviation of Gaussian noise added to
  //! the raw training values; empty or zero means none.
  std::vector<double> jitter;
  std::function<void(std::size_t, double)> progress;
};

struct TrainResult
{
  CEbmModel model;
  //! Objective J of every iteration.
  std::vector<double> loss;
  std::size_t clamped = 0;
};

inline std::vector<Normalization>
observed_ranges(const std::vector<std::vector<double>>& data)
{
  std::vector<Normalization> out;
  for (std::size_t s = 0; s < data.size(); ++s) {
    if (data[s].empty())
      throw UsageError("statistic " + std::to_string(s) + " has no samples");
    const auto [lo, hi] = std::minmax_element(data[s].begin(), data[s].end());
    if (!(*hi > *lo))
      throw UsageError("statistic " + std::to_string(s) +
                       " is constant over the dataset");
    out.push_back({ *lo, *hi });
  }
  return out;
}

//! Adam on the averaged NLL of N_J = min(max_statistics_per_step, N_s)
//! statistics per iteration, chosen by the adaptive constraint sampler.
inline TrainResult
train_cebm(const std::vector<std::vector<double>>& data,
           const TrainOptions& opt)
{
  if (data.empty())
    throw UsageError("cEBM training needs at least one statistic");
  for (std::size_t s = 0; s < data.size(); ++s)
    if (data[s].size() < opt.batch_size)
      throw UsageError("statistic " + std::to_string(s) +
                       " has fewer samples than the batch size");
  Rng init_rng(derive_seed(opt.seed, "cebm-init"));
  Rng data_rng(derive_seed(opt.seed, "cebm-data"));
  Rng pick_rng(derive_seed(opt.seed, "cebm-pick"));
  Rng drop_rng(derive_seed(opt.seed, "cebm-dropout"));

  TrainResult res{ CEbmModel::make(
                   observed_ranges(data), init_rng, opt.n_grid, opt.topology),
                   {},
                   0 };
  CEbmModel& m = res.model;
  const std::size_t n_s = data.size();
  const std::size_t n_j = std::min(opt.max_statistics_per_step, n_s);
  auto sampler = weighting::SamplerState::uniform(n_s);
  auto adam = nn::AdamState::make(m.params.size(), opt.lr, opt.beta1, opt.beta2);
  std::vector<double> grad(m.params.size());
  std::vector<double> batch(opt.batch_size);
  ScorePass work;
  res.loss.reserve(opt.iterations);

  for (std::size_t it = 0; it < opt.iterations; ++it) {
    for (auto ms : opt.milestones)
      if (it == ms)
        adam.lr *= opt.lr_factor;
    std::fill(grad.begin(), grad.end(), 0.0);
    double j_total = 0.0;
    for (std::size_t j = 0; j < n_j; ++j) {
      const auto s = weighting::sample_index(sampler, pick_rng);
      const auto& src = data[s];
      const double jit = s < opt.jitter.size() ? opt.jitter[s] : 0.0;
      for (auto& v : batch) {
        v = src[uniform_index(data_rng, src.size())];
        if (jit > 0.0)
          v += jit * standard_normal(data_rng);
      }
      auto r = nll_batch(
        m, static_cast<int>(s), batch, nn::Mode::train, &drop_rng, true, &work);
      res.clamped += r.clamped;
      if (!std::isfinite(r.value))
        throw NumericalError("cEBM loss diverged at iteration " +
                             std::to_string(it) + ", statistic " +
                             std::to_string(s));
      j_total += r.value;
      for (std::size_t k = 0; k < grad.size(); ++k)
        grad[k] += r.grad[k] / static_cast<double>(n_j);
      weighting::update_weights(sampler, r.value, s);
    }
    j_total /= static_cast<double>(n_j);
    nn::adam_step(m.params, grad, adam);
    res.loss.push_back(j_total);
    if (opt.progress)
      opt.progress(it, j_total);
  }
  return res;
}

//! Model file: normalization table, topology descriptor and parameters.
inline Artifact
to_artifact(const CEbmModel& m)
{
  Artifact a("cebm");
  a.set("n_statistics", std::to_string(m.n_statistics()));
  a.set("n_grid", std::to_string(m.n_grid));
  a.set("topology", m.topology());
  std::vector<double> ranges;
  for (const auto& n : m.norm) {
    ranges.push_back(n.lo);
    ranges.push_back(n.hi);
  }
  a.put_doubles("normalization", std::move(ranges));
  a.put_doubles("params", m.params);
  return a;
}

inline CEbmModel
from_artifact(const Artifact& a)
{
  const auto& r = a.doubles("normalization");
  if (r.size() % 2 != 0 || r.empty())
    throw UsageError("cebm artifact: malformed normalization table");
  std::vector<Normalization> norm;
  for (std::size_t i = 0; i < r.size(); i += 2)
    norm.push_back({ r[i], r[i + 1] });
  Rng dummy(0);
  auto m = CEbmModel::make(
    std::move(norm), dummy, std::stoul(a.get("n_grid")));
  if (a.get("topology") != m.topology())
    throw UsageError("cebm artifact: unsupported topology");
  const auto& p = a.doubles("params");
  if (p.size() != m.params.size())
    throw UsageError("cebm artifact: parameter count mismatch");
  m.params = p;
  return m;
}

} // namespace pcgan::cebm
