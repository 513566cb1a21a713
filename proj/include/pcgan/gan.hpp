#pragma once

// Wasserstein GAN with weight clipping, the KL-constrained generator loss
// and the covariance-matching baseline. Training state is a plain struct so
// a checkpoint can capture and restore it exactly.

#include "artifact.hpp"
#include "density.hpp"
#include "density_grid.hpp"
#include "error.hpp"
#include "ndnet.hpp"
#include "rng.hpp"
#include "stats.hpp"
#include "weighting.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace pcgan::gan {

enum class Variant
{
  wgan,
  pcgan,
  wu
};

inline std::string
variant_name(Variant v)
{
  switch (v) {
    case Variant::wgan:
      return "wgan";
    case Variant::pcgan:
      return "pcgan";
    case Variant::wu:
      return "wu";
  }
  return "?";
}

inline Variant
parse_variant(const std::string& s)
{
  if (s == "wgan")
    return Variant::wgan;
  if (s == "pcgan")
    return Variant::pcgan;
  if (s == "wu")
    return Variant::wu;
  throw UsageError("unknown variant '" + s + "' (expected wgan, pcgan or wu)");
}

struct GanConfig
{
  Variant variant = Variant::pcgan;
  double lambda = 30.0;
  double lambda_wu = 1.0;
  std::size_t critic_steps = 1;
  std::size_t constraints_per_step = 10;
  std::size_t batch_size = 256;
  std::size_t iterations = 5000;
  double lr = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double clip_lo = 0.0;
  double clip_hi = 0.005;
  std::size_t latent_dim = 5;
  //! Both learning rates are multiplied by lr_factor at these iterations.
  std::vector<std::size_t> lr_milestones;
  double lr_factor = 0.2;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 1000;

  void validate(std::size_t n_statistics) const
  {
    pcgan::detail::require(clip_lo <= clip_hi, "clip_lo must not exceed clip_hi");
    pcgan::detail::require(lambda >= 0.0 && lambda_wu >= 0.0,
                    "constraint weights must be non-negative");
    pcgan::detail::require(critic_steps >= 1, "critic_steps must be at least 1");
    pcgan::detail::require(constraints_per_step >= 1 &&
                      constraints_per_step <= n_statistics,
                    "constraints_per_step must lie in [1, number of "
                    "statistics]");
    pcgan::detail::require(batch_size >= 2, "batch_size must be at least 2");
    pcgan::detail::require(latent_dim >= 1, "latent_dim must be at least 1");
    pcgan::detail::require(lr > 0.0, "lr must be positive");
    pcgan::detail::require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                    "Adam betas must lie in [0, 1)");
    pcgan::detail::require(log_every >= 1, "log_every must be at least 1");
  }
};

//! latent -> 64 -> 128 -> signal, tanh throughout.
inline nn::MlpSpec
generator_spec(std::size_t latent_dim, std::size_t signal_length)
{
  using nn::Activation;
  using nn::Layer;
  return nn::MlpSpec({
    Layer::dense(latent_dim, 64, Activation::tanh),
    Layer::dense(64, 128, Activation::tanh),
    Layer::dense(128, signal_length, Activation::tanh),
  });
}

//! signal -> 128 -> 64 -> 1, leaky ReLU(0.2) hidden layers.
inline nn::MlpSpec
critic_spec(std::size_t signal_length)
{
  using nn::Activation;
  using nn::Layer;
  return nn::MlpSpec({
    Layer::dense(signal_length, 128, Activation::leaky_relu, 0.2),
    Layer::dense(128, 64, Activation::leaky_relu, 0.2),
    Layer::dense(64, 1),
  });
}

//! mean D(x_gen) - mean D(x_true).
inline double
critic_loss(std::span<const double> d_gen, std::span<const double> d_true)
{
  if (d_gen.size() != d_true.size() || d_gen.empty())
    throw UsageError("critic loss needs equal, nonempty batches");
  double g = 0.0, t = 0.0;
  for (double v : d_gen)
    g += v;
  for (double v : d_true)
    t += v;
  const auto n = static_cast<double>(d_gen.size());
  return g / n - t / n;
}

//! -mean D(x_gen).
inline double
generator_loss_base(std::span<const double> d_gen)
{
  if (d_gen.empty())
    throw UsageError("generator loss of an empty batch");
  double g = 0.0;
  for (double v : d_gen)
    g += v;
  return -g / static_cast<double>(d_gen.size());
}

inline void
clip_weights(std::span<double> params, double lo, double hi)
{
  if (lo > hi)
    throw UsageError("clip range is empty");
  for (auto& p : params)
    p = std::clamp(p, lo, hi);
}

//! Everything the KL constraint needs: the statistics, the tail-cut true
//! densities in raw coordinates and the calibrated bandwidths.
struct ConstraintSet
{
  std::vector<stats::StatisticSpec> specs;
  std::vector<DensityGrid> p_true;
  density::FsigmaTable fsigma;

  std::size_t size() const { return specs.size(); }

  void validate() const
  {
    if (specs.empty() || specs.size() != p_true.size())
      throw UsageError("constraint set needs one true density per statistic");
  }
};

struct ConstraintLoss
{
  //! sum_j lambda * l_{s_j}
  double value = 0.0;
  //! d value / d x_gen; empty when no gradient was requested.
  nn::Tensor grad;
  //! (s, l_s) for every sampled constraint, in draw order.
  std::vector<std::pair<int, double>> kl_log;
  std::size_t floored = 0;
};

//! Draws n_kl constraints from the sampler, scores each by
//! KL(p_true || KDE of the batch statistic) and feeds l_s back into the
//! sampler. Gradients flow KDE centers -> statistic -> x_gen; with
//! lambda == 0 no gradient work is done.
inline ConstraintLoss
pcgan_constraint_loss(const nn::Tensor& x_gen,
                      const ConstraintSet& cs,
                      weighting::SamplerState& sampler,
                      std::size_t n_kl,
                      double lambda,
                      Rng& rng,
                      bool with_gradient = true)
{
  cs.validate();
  if (sampler.size() != cs.size())
    throw UsageError("sampler size does not match the constraint set");
  const bool grad = with_gradient && lambda > 0.0;
  ConstraintLoss out;
  if (grad)
    out.grad = nn::Tensor::zeros(x_gen.rows(), x_gen.cols());
  std::vector<double> cot(x_gen.rows());
  for (std::size_t j = 0; j < n_kl; ++j) {
    const auto s = weighting::sample_index(sampler, rng);
    const auto& spec = cs.specs[s];
    auto batch = stats::compute_batch(spec, x_gen);
    density::KdeMixture mix{ std::move(batch.values),
                             cs.fsigma.sigma(spec.id, x_gen.rows()),
                             spec.id };
    auto kl = density::kl_divergence(cs.p_true[s], mix, grad);
    out.value += lambda * kl.value;
    out.floored += kl.floored;
    out.kl_log.emplace_back(static_cast<int>(s), kl.value);
    if (grad) {
      for (std::size_t i = 0; i < cot.size(); ++i)
        cot[i] = lambda * kl.grad[i];
      stats::accumulate_batch_vjp(spec, x_gen, cot, out.grad);
    }
    weighting::update_weights(sampler, kl.value, s);
  }
  return out;
}

//! Unbiased covariance over positions of the rows of x.
inline Eigen::MatrixXd
covariance(const nn::Tensor& x)
{
  const std::size_t n = x.rows();
  if (n < 2)
    throw UsageError("covariance needs at least two samples");
  // owned copy: see nn::detail::ProductScratch
  Eigen::MatrixXd c = nn::ConstMatrixMap(x.values.data(), n, x.cols());
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(c.cols());
  for (Eigen::Index r = 0; r < c.rows(); ++r)
    mean += c.row(r);
  mean /= static_cast<double>(n);
  c.rowwise() -= mean;
  return (c.transpose() * c) / static_cast<double>(n - 1);
}

struct WuLoss
{
  double value = 0.0;
  nn::Tensor grad;
};

//! lambda_wu * ||Cov(x_gen) - cov_true||_F and its gradient
//! lambda_wu * 2/(n-1) * Xc (C - T) / ||C - T||_F.
inline WuLoss
wu_constraint_loss(const Eigen::MatrixXd& cov_true,
                   const nn::Tensor& x_gen,
                   double lambda_wu)
{
  const std::size_t n = x_gen.rows();
  const std::size_t w = x_gen.cols();
  if (n < 2)
    throw UsageError("covariance constraint needs a batch of at least two");
  if (cov_true.rows() != static_cast<Eigen::Index>(w) ||
      cov_true.cols() != static_cast<Eigen::Index>(w))
    throw UsageError("reference covariance shape does not match the signal");
  Eigen::MatrixXd xc = nn::ConstMatrixMap(x_gen.values.data(), n, w);
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(xc.cols());
  for (Eigen::Index r = 0; r < xc.rows(); ++r)
    mean += xc.row(r);
  mean /= static_cast<double>(n);
  xc.rowwise() -= mean;
  Eigen::MatrixXd diff =
    (xc.transpose() * xc) / static_cast<double>(n - 1) - cov_true;
  const double f = diff.norm();
  WuLoss out;
  out.value = lambda_wu * f;
  out.grad = nn::Tensor::zeros(n, w);
  if (f > 0.0) {
    Eigen::MatrixXd g = xc * diff;
    g *= lambda_wu * 2.0 / (static_cast<double>(n - 1) * f);
    nn::MatrixMap(out.grad.values.data(), n, w) = g;
  }
  return out;
}

inline nn::Tensor
latent_batch(std::size_t n, std::size_t dim, Rng& rng)
{
  nn::Tensor z = nn::Tensor::zeros(n, dim);
  for (auto& v : z.values)
    v = standard_normal(rng);
  return z;
}

struct MetricsRow
{
  std::size_t iteration = 0;
  double loss_critic = 0.0;
  double loss_generator = 0.0;
  double loss_generator_base = 0.0;
  double loss_constraint = 0.0;
  double kl_mean = 0.0;
  double kl_min = 0.0;
  double kl_max = 0.0;
  std::size_t kl_floored = 0;
};

inline constexpr const char* metrics_schema = "# pcgan-metrics v1";
inline constexpr const char* metrics_columns =
  "iteration,loss_critic,loss_generator,loss_generator_base,"
  "loss_constraint,kl_mean,kl_min,kl_max,kl_floored";

inline std::string
format_double(double v)
{
  // shortest text that reads back to the same double
  char buf[40];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

//! `comment` lines go after the schema line, each prefixed with "# ".
inline std::string
metrics_csv(const std::vector<MetricsRow>& rows,
            const std::vector<std::string>& comment = {})
{
  std::string out = std::string(metrics_schema) + '\n';
  for (const auto& c : comment)
    out += "# " + c + '\n';
  out += std::string(metrics_columns) + '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.iteration);
    for (double v : { r.loss_critic,
                      r.loss_generator,
                      r.loss_generator_base,
                      r.loss_constraint,
                      r.kl_mean,
                      r.kl_min,
                      r.kl_max })
      out += ',' + format_double(v);
    out += ',' + std::to_string(r.kl_floored) + '\n';
  }
  return out;
}

inline std::vector<MetricsRow>
parse_metrics_csv(const std::string& text)
{
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != metrics_schema)
    throw UsageError("metrics log: unknown or missing schema line");
  std::size_t lineno = 1;
  while (std::getline(is, line) && !line.empty() && line[0] == '#')
    ++lineno;
  if (line != metrics_columns)
    throw UsageError("metrics log: unexpected column header");
  std::vector<MetricsRow> rows;
  ++lineno;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty())
      continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ','))
      f.push_back(cell);
    if (f.size() != 9)
      throw UsageError("metrics log line " + std::to_string(lineno) +
                       ": expected 9 fields");
    try {
      MetricsRow r;
      r.iteration = std::stoul(f[0]);
      r.loss_critic = std::stod(f[1]);
      r.loss_generator = std::stod(f[2]);
      r.loss_generator_base = std::stod(f[3]);
      r.loss_constraint = std::stod(f[4]);
      r.kl_mean = std::stod(f[5]);
      r.kl_min = std::stod(f[6]);
      r.kl_max = std::stod(f[7]);
      r.kl_floored = std::stoul(f[8]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw UsageError("metrics log line " + std::to_string(lineno) +
                       ": malformed number");
    }
  }
  return rows;
}

//! Complete training state; restoring it and continuing reproduces an
//! uninterrupted run bit for bit.
struct GanState
{
  std::size_t iteration = 0;
  std::vector<double> generator;
  std::vector<double> critic;
  nn::AdamState generator_adam;
  nn::AdamState critic_adam;
  weighting::SamplerState sampler;
  Rng data_rng;
  Rng latent_rng;
  Rng constraint_rng;
  std::vector<MetricsRow> metrics;
};

inline GanState
initial_state(const GanConfig& cfg,
              std::size_t signal_length,
              std::size_t n_statistics)
{
  GanState st;
  Rng init(derive_seed(cfg.seed, "gan-init"));
  st.generator = nn::init_params(generator_spec(cfg.latent_dim, signal_length),
                                 init);
  st.critic = nn::init_params(critic_spec(signal_length), init);
  clip_weights(st.critic, cfg.clip_lo, cfg.clip_hi);
  st.generator_adam =
    nn::AdamState::make(st.generator.size(), cfg.lr, cfg.beta1, cfg.beta2);
  st.critic_adam =
    nn::AdamState::make(st.critic.size(), cfg.lr, cfg.beta1, cfg.beta2);
  st.sampler = weighting::SamplerState::uniform(n_statistics);
  st.data_rng.seed(derive_seed(cfg.seed, "gan-data"));
  st.latent_rng.seed(derive_seed(cfg.seed, "gan-latent"));
  st.constraint_rng.seed(derive_seed(cfg.seed, "gan-constraint"));
  return st;
}

namespace detail {

inline void
put_adam(Artifact& a, const std::string& name, const nn::AdamState& s)
{
  a.set(name + "_t", std::to_string(s.t));
  a.set(name + "_lr", to_hex(s.lr));
  a.set(name + "_betas", to_hex(s.beta1) + ' ' + to_hex(s.beta2));
  a.put_doubles(name + "_m", s.m);
  a.put_doubles(name + "_v", s.v);
}

inline nn::AdamState
get_adam(const Artifact& a, const std::string& name)
{
  nn::AdamState s;
  s.t = std::stoull(a.get(name + "_t"));
  s.lr = from_hex(a.get(name + "_lr"));
  const auto& b = a.get(name + "_betas");
  if (b.size() != 33)
    throw UsageError("checkpoint: malformed Adam betas");
  s.beta1 = from_hex(b.substr(0, 16));
  s.beta2 = from_hex(b.substr(17));
  s.m = a.doubles(name + "_m");
  s.v = a.doubles(name + "_v");
  return s;
}

} // namespace detail

inline Artifact
to_artifact(const GanState& st,
            Variant variant,
            const std::string& config_hash,
            std::size_t signal_length,
            std::size_t latent_dim)
{
  Artifact a("gan-checkpoint");
  a.set("iteration", std::to_string(st.iteration));
  a.set("variant", variant_name(variant));
  a.set("config_hash", config_hash);
  a.set("signal_length", std::to_string(signal_length));
  a.set("latent_dim", std::to_string(latent_dim));
  a.put_doubles("generator", st.generator);
  a.put_doubles("critic", st.critic);
  detail::put_adam(a, "generator_adam", st.generator_adam);
  detail::put_adam(a, "critic_adam", st.critic_adam);
  a.put_doubles("sampler_running_loss", st.sampler.running_loss);
  a.put_doubles("sampler_weights", st.sampler.weights);
  a.put_text("rng", { rng_state(st.data_rng),
                      rng_state(st.latent_rng),
                      rng_state(st.constraint_rng) });
  std::vector<std::string> lines;
  std::istringstream csv(metrics_csv(st.metrics));
  for (std::string l; std::getline(csv, l);)
    lines.push_back(l);
  a.put_text("metrics", std::move(lines));
  return a;
}

inline GanState
from_artifact(const Artifact& a)
{
  GanState st;
  st.iteration = std::stoul(a.get("iteration"));
  st.generator = a.doubles("generator");
  st.critic = a.doubles("critic");
  st.generator_adam = detail::get_adam(a, "generator_adam");
  st.critic_adam = detail::get_adam(a, "critic_adam");
  st.sampler.running_loss = a.doubles("sampler_running_loss");
  st.sampler.weights = a.doubles("sampler_weights");
  const auto& r = a.text("rng");
  if (r.size() != 3)
    throw UsageError("checkpoint: expected three generator states");
  set_rng_state(st.data_rng, r[0]);
  set_rng_state(st.latent_rng, r[1]);
  set_rng_state(st.constraint_rng, r[2]);
  std::string csv;
  for (const auto& l : a.text("metrics"))
    csv += l + '\n';
  st.metrics = parse_metrics_csv(csv);
  return st;
}

//! Fixed inputs of a training run.
struct TrainContext
{
  //! (n_samples, signal_length) training signals.
  const nn::Tensor* data = nullptr;
  //! Needed by the pcgan variant and by the KL columns of the log.
  const ConstraintSet* constraints = nullptr;
  //! Needed by the wu variant.
  const Eigen::MatrixXd* cov_true = nullptr;
  //! Called after every completed iteration that is a multiple of
  //! checkpoint_every (and not the last one).
  std::function<void(const GanState&)> on_checkpoint;
  std::function<void(const MetricsRow&)> on_log;
};

//! KL of every constraint against one fresh generated batch each, drawn
//! from a stream keyed by the iteration so logging never perturbs
//! training.
inline void
log_constraints(const GanConfig& cfg,
                const nn::MlpSpec& gspec,
                std::span<const double> gparams,
                const ConstraintSet& cs,
                MetricsRow& row)
{
  Rng rng(derive_seed(cfg.seed, "gan-eval", row.iteration));
  double sum = 0.0;
  row.kl_min = std::numeric_limits<double>::infinity();
  row.kl_max = -std::numeric_limits<double>::infinity();
  row.kl_floored = 0;
  nn::ForwardResult fr;
  for (std::size_t s = 0; s < cs.size(); ++s) {
    auto z = latent_batch(cfg.batch_size, cfg.latent_dim, rng);
    nn::forward(gspec, gparams, z, nn::Mode::eval, nullptr, fr);
    auto b = stats::compute_batch(cs.specs[s], fr.output);
    density::KdeMixture mix{ std::move(b.values),
                             cs.fsigma.sigma(cs.specs[s].id, cfg.batch_size),
                             cs.specs[s].id };
    auto kl = density::kl_divergence(cs.p_true[s], mix, false);
    sum += kl.value;
    row.kl_min = std::min(row.kl_min, kl.value);
    row.kl_max = std::max(row.kl_max, kl.value);
    row.kl_floored += kl.floored;
  }
  row.kl_mean = sum / static_cast<double>(cs.size());
}

//! Continues `st` up to cfg.iterations. Each iteration runs critic_steps
//! critic updates (clipped) and one generator update with the variant's
//! constraint term.
inline void
train(const GanConfig& cfg, GanState& st, const TrainContext& ctx)
{
  if (ctx.data == nullptr || ctx.data->rows() == 0)
    throw UsageError("training needs a dataset");
  const nn::Tensor& data = *ctx.data;
  const std::size_t len = data.cols();
  const std::size_t n_stats = ctx.constraints ? ctx.constraints->size() : 1;
  cfg.validate(n_stats);
  if (cfg.variant == Variant::pcgan && ctx.constraints == nullptr)
    throw UsageError("the pcgan variant needs a constraint set");
  if (cfg.variant == Variant::wu && ctx.cov_true == nullptr)
    throw UsageError("the wu variant needs the dataset covariance");

  const auto gspec = generator_spec(cfg.latent_dim, len);
  const auto dspec = critic_spec(len);
  if (st.generator.size() != gspec.parameter_count() ||
      st.critic.size() != dspec.parameter_count())
    throw UsageError("training state does not match the network shapes");
  const std::size_t n = cfg.batch_size;

  nn::Tensor x_true = nn::Tensor::zeros(n, len);
  nn::ForwardResult g_out, d_gen, d_true;
  nn::Gradients gd_gen, gd_true, gg;
  std::vector<double> dgrad(st.critic.size());
  nn::Tensor dscore({ n, 1 }, std::vector<double>(n));

  for (; st.iteration < cfg.iterations;) {
    const std::size_t it = st.iteration;
    for (auto ms : cfg.lr_milestones)
      if (it == ms) {
        st.generator_adam.lr *= cfg.lr_factor;
        st.critic_adam.lr *= cfg.lr_factor;
      }

    MetricsRow row;
    for (std::size_t k = 0; k < cfg.critic_steps; ++k) {
      for (std::size_t r = 0; r < n; ++r) {
        auto src = data.row(uniform_index(st.data_rng, data.rows()));
        std::copy(src.begin(), src.end(), x_true.row(r).begin());
      }
      auto z = latent_batch(n, cfg.latent_dim, st.latent_rng);
      nn::forward(gspec, st.generator, z, nn::Mode::eval, nullptr, g_out);
      nn::forward(dspec, st.critic, g_out.output, nn::Mode::eval, nullptr,
                  d_gen);
      nn::forward(dspec, st.critic, x_true, nn::Mode::eval, nullptr, d_true);
      row.loss_critic =
        critic_loss(d_gen.output.values, d_true.output.values);
      if (!std::isfinite(row.loss_critic))
        throw NumericalError("critic loss is not finite at iteration " +
                             std::to_string(it));
      std::fill(dscore.values.begin(), dscore.values.end(),
                1.0 / static_cast<double>(n));
      nn::backward(d_gen.tape, dscore, gd_gen);
      std::fill(dscore.values.begin(), dscore.values.end(),
                -1.0 / static_cast<double>(n));
      nn::backward(d_true.tape, dscore, gd_true);
      for (std::size_t i = 0; i < dgrad.size(); ++i)
        dgrad[i] = gd_gen.params[i] + gd_true.params[i];
      nn::adam_step(st.critic, dgrad, st.critic_adam);
      clip_weights(st.critic, cfg.clip_lo, cfg.clip_hi);
    }

    auto z = latent_batch(n, cfg.latent_dim, st.latent_rng);
    nn::forward(gspec, st.generator, z, nn::Mode::train, nullptr, g_out);
    const nn::Tensor& x_gen = g_out.output;
    nn::forward(dspec, st.critic, x_gen, nn::Mode::eval, nullptr, d_gen);
    row.loss_generator_base = generator_loss_base(d_gen.output.values);
    std::fill(dscore.values.begin(), dscore.values.end(),
              -1.0 / static_cast<double>(n));
    nn::backward(d_gen.tape, dscore, gd_gen);
    nn::Tensor& dx = gd_gen.input;

    if (cfg.variant == Variant::pcgan) {
      auto c = pcgan_constraint_loss(x_gen,
                                     *ctx.constraints,
                                     st.sampler,
                                     cfg.constraints_per_step,
                                     cfg.lambda,
                                     st.constraint_rng);
      row.loss_constraint = c.value;
      if (!c.grad.values.empty())
        for (std::size_t i = 0; i < dx.values.size(); ++i)
          dx.values[i] += c.grad.values[i];
    } else if (cfg.variant == Variant::wu) {
      auto c = wu_constraint_loss(*ctx.cov_true, x_gen, cfg.lambda_wu);
      row.loss_constraint = c.value;
      for (std::size_t i = 0; i < dx.values.size(); ++i)
        dx.values[i] += c.grad.values[i];
    }
    row.loss_generator = row.loss_generator_base + row.loss_constraint;
    if (!std::isfinite(row.loss_generator))
      throw NumericalError("generator loss is not finite at iteration " +
                           std::to_string(it));
    nn::backward(g_out.tape, dx, gg);
    nn::adam_step(st.generator, gg.params, st.generator_adam);

    st.iteration = it + 1;
    if (st.iteration % cfg.log_every == 0 || st.iteration == cfg.iterations) {
      row.iteration = st.iteration;
      if (ctx.constraints != nullptr)
        log_constraints(cfg, gspec, st.generator, *ctx.constraints, row);
      st.metrics.push_back(row);
      if (ctx.on_log)
        ctx.on_log(row);
    }
    if (ctx.on_checkpoint && cfg.checkpoint_every > 0 &&
        st.iteration % cfg.checkpoint_every == 0 &&
        st.iteration < cfg.iterations)
      ctx.on_checkpoint(st);
  }
}

//! Draws n signals from a trained generator, in eval mode.
inline nn::Tensor
generate(const GanConfig& cfg,
         std::span<const double> generator,
         std::size_t signal_length,
         std::size_t n,
         Rng& rng)
{
  auto z = latent_batch(n, cfg.latent_dim, rng);
  return nn::forward(generator_spec(cfg.latent_dim, signal_length),
                     generator,
                     z,
                     nn::Mode::eval)
    .output;
}

//! One row of the evaluation report: a constraint (with its KL) or a
//! performance metric (KL is NaN). Histograms are densities over `bins`
//! equal cells of [lo, hi]; ebm_density is the learned density at the bin
//! centers (constraints only).
struct ReportRow
{
  std::string kind;
  std::string name;
  int s = -1;
  double kl = std::numeric_limits<double>::quiet_NaN();
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> true_hist;
  std::vector<double> gen_hist;
  std::vector<double> ebm_density;
};

inline std::vector<double>
histogram(std::span<const double> v, double lo, double hi, std::size_t bins)
{
  std::vector<double> h(bins, 0.0);
  if (v.empty() || !(hi > lo) || bins == 0)
    return h;
  const double w = (hi - lo) / static_cast<double>(bins);
  for (double x : v) {
    if (x < lo || x > hi)
      continue;
    auto b = static_cast<std::size_t>((x - lo) / w);
    h[std::min(b, bins - 1)] += 1.0;
  }
  for (auto& c : h)
    c /= static_cast<double>(v.size()) * w;
  return h;
}

//! The three performance metrics of a signal: mean, max - min and spectral
//! energy.
inline std::array<double, 3>
performance_metrics(std::span<const double> x)
{
  auto s = stats::scalar_stats(x);
  return { s.mean, s.max - s.min, s.spectral_energy };
}

inline constexpr const char* metric_names[] = { "mean",
                                                "max_minus_min",
                                                "spectral_energy" };

//! Per-constraint KL of the full generated set (bandwidth calibrated for
//! `kde_batch`), plus true vs generated histograms of every constraint and
//! performance metric.
inline std::vector<ReportRow>
evaluate(const nn::Tensor& generated,
         const nn::Tensor& dataset,
         const ConstraintSet& cs,
         const std::vector<DensityGrid>& ebm_raw,
         std::size_t kde_batch,
         std::size_t bins)
{
  cs.validate();
  if (ebm_raw.size() != cs.size())
    throw UsageError("one learned density per constraint is required");
  if (generated.cols() != dataset.cols())
    throw UsageError("generated and true signals differ in length");
  std::vector<ReportRow> rows;
  for (std::size_t s = 0; s < cs.size(); ++s) {
    const auto& spec = cs.specs[s];
    auto g = stats::compute_batch(spec, generated);
    auto t = stats::compute_batch(spec, dataset);
    ReportRow r;
    r.kind = "constraint";
    r.name = spec.name();
    r.s = spec.id;
    r.lo = ebm_raw[s].x0;
    r.hi = ebm_raw[s].x_end();
    r.true_hist = histogram(t.values, r.lo, r.hi, bins);
    r.gen_hist = histogram(g.values, r.lo, r.hi, bins);
    const double w = (r.hi - r.lo) / static_cast<double>(bins);
    for (std::size_t b = 0; b < bins; ++b)
      r.ebm_density.push_back(
        ebm_raw[s].at(r.lo + (static_cast<double>(b) + 0.5) * w));
    density::KdeMixture mix{ std::move(g.values),
                             cs.fsigma.sigma(spec.id, kde_batch),
                             spec.id };
    r.kl = density::kl_divergence(cs.p_true[s], mix, false).value;
    rows.push_back(std::move(r));
  }
  for (std::size_t m = 0; m < 3; ++m) {
    std::vector<double> tv, gv;
    for (std::size_t i = 0; i < dataset.rows(); ++i)
      tv.push_back(performance_metrics(dataset.row(i))[m]);
    for (std::size_t i = 0; i < generated.rows(); ++i)
      gv.push_back(performance_metrics(generated.row(i))[m]);
    ReportRow r;
    r.kind = "metric";
    r.name = metric_names[m];
    const auto [tlo, thi] = std::minmax_element(tv.begin(), tv.end());
    const auto [glo, ghi] = std::minmax_element(gv.begin(), gv.end());
    r.lo = std::min(*tlo, *glo);
    r.hi = std::max(*thi, *ghi);
    if (!(r.hi > r.lo))
      r.hi = r.lo + 1.0;
    r.true_hist = histogram(tv, r.lo, r.hi, bins);
    r.gen_hist = histogram(gv, r.lo, r.hi, bins);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline constexpr const char* report_schema = "# pcgan-eval v1";
inline constexpr const char* report_columns =
  "kind,name,s,kl,lo,hi,true_hist,gen_hist,ebm_density";

namespace detail {

inline std::string
join(const std::vector<double>& v)
{
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i)
      out += ';';
    out += format_double(v[i]);
  }
  return out;
}

inline std::vector<double>
split_doubles(const std::string& s)
{
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ';'))
    out.push_back(std::stod(cell));
  return out;
}

} // namespace detail

inline std::string
report_csv(const std::vector<ReportRow>& rows,
           const std::vector<std::string>& comment = {})
{
  std::string out = std::string(report_schema) + '\n';
  for (const auto& c : comment)
    out += "# " + c + '\n';
  out += std::string(report_columns) + '\n';
  for (const auto& r : rows) {
    out += r.kind + ',' + r.name + ',' + std::to_string(r.s) + ',' +
           (std::isnan(r.kl) ? std::string() : format_double(r.kl)) + ',' +
           format_double(r.lo) + ',' + format_double(r.hi) + ',' +
           detail::join(r.true_hist) + ',' + detail::join(r.gen_hist) + ',' +
           detail::join(r.ebm_density) + '\n';
  }
  return out;
}

inline std::vector<ReportRow>
parse_report_csv(const std::string& text)
{
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != report_schema)
    throw UsageError("evaluation report: unknown or missing schema line");
  std::size_t lineno = 1;
  while (std::getline(is, line) && !line.empty() && line[0] == '#')
    ++lineno;
  if (line != report_columns)
    throw UsageError("evaluation report: unexpected column header");
  std::vector<ReportRow> rows;
  ++lineno;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty())
      continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      auto c = line.find(',', start);
      f.push_back(line.substr(start, c - start));
      if (c == std::string::npos)
        break;
      start = c + 1;
    }
    if (f.size() != 9)
      throw UsageError("evaluation report line " + std::to_string(lineno) +
                       ": expected 9 fields");
    try {
      ReportRow r;
      r.kind = f[0];
      r.name = f[1];
      r.s = std::stoi(f[2]);
      r.kl = f[3].empty() ? std::numeric_limits<double>::quiet_NaN()
                          : std::stod(f[3]);
      r.lo = std::stod(f[4]);
      r.hi = std::stod(f[5]);
      r.true_hist = detail::split_doubles(f[6]);
      r.gen_hist = detail::split_doubles(f[7]);
      r.ebm_density = detail::split_doubles(f[8]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw UsageError("evaluation report line " + std::to_string(lineno) +
                       ": malformed number");
    }
  }
  return rows;
}

//! Real-data reference: for every constraint, the KL of KDEs built from
//! true minibatches of size n_batch, averaged over `repeats` batches.
inline std::vector<double>
reference_kl(const std::vector<std::vector<double>>& true_values,
             const ConstraintSet& cs,
             std::size_t n_batch,
             std::size_t repeats,
             std::uint64_t seed)
{
  cs.validate();
  if (true_values.size() != cs.size() || repeats == 0)
    throw UsageError("reference KL needs one value set per constraint");
  std::vector<double> out(cs.size(), 0.0);
  for (std::size_t s = 0; s < cs.size(); ++s) {
    Rng rng(derive_seed(seed, "reference", s));
    for (std::size_t r = 0; r < repeats; ++r) {
      density::KdeMixture mix{
        density::sample_minibatch(true_values[s], n_batch, rng),
        cs.fsigma.sigma(cs.specs[s].id, n_batch),
        cs.specs[s].id
      };
      out[s] += density::kl_divergence(cs.p_true[s], mix, false).value;
    }
    out[s] /= static_cast<double>(repeats);
  }
  return out;
}

} // namespace pcgan::gan
