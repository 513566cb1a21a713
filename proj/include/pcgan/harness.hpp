#pragma once

// Experiment configuration, the synthetic sine dataset and the staged
// pipeline (data -> cEBM -> bandwidth calibration -> GAN training ->
// evaluation). Every stage writes one artifact stamped with a hash of the
// configuration that produced it and of its upstream stages.

#include "artifact.hpp"
#include "cebm.hpp"
#include "density.hpp"
#include "error.hpp"
#include "gan.hpp"
#include "plot.hpp"
#include "rng.hpp"
#include "stats.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace pcgan::harness {

namespace fs = std::filesystem;

enum class ValueType
{
  integer,
  real,
  text,
  integer_list,
  variant_list
};

struct ConfigKey
{
  const char* name;
  //! Stage whose artifacts depend on the key; empty for keys that never
  //! change results.
  const char* group;
  const char* fallback;
  ValueType type;
  const char* help;
};

inline const std::vector<ConfigKey>&
config_keys()
{
  using T = ValueType;
  static const std::vector<ConfigKey> keys = {
    { "output_dir", "", "run", T::text, "directory for all artifacts" },
    { "variants", "", "wgan,pcgan", T::variant_list,
      "GAN variants trained by the pipeline" },

    { "n_samples", "data", "20000", T::integer, "number of signals" },
    { "signal_length", "data", "200", T::integer, "samples per signal" },
    { "t_max", "data", "20", T::real, "signals cover t in [0, t_max]" },
    { "data_seed", "data", "1", T::integer, "dataset seed" },

    { "ebm_iterations", "ebm", "20000", T::integer, "cEBM iterations" },
    { "ebm_batch", "ebm", "1024", T::integer, "cEBM minibatch size" },
    { "ebm_lr", "ebm", "0.005", T::real, "cEBM learning rate" },
    { "ebm_beta1", "ebm", "0.9", T::real, "cEBM Adam beta1" },
    { "ebm_beta2", "ebm", "0.99", T::real, "cEBM Adam beta2" },
    { "ebm_milestones", "ebm", "6000,12000", T::integer_list,
      "iterations at which the cEBM learning rate is scaled" },
    { "ebm_lr_factor", "ebm", "0.5", T::real, "cEBM learning rate factor" },
    { "ebm_n_grid", "ebm", "1024", T::integer, "quadrature nodes" },
    { "ebm_statistics_per_step", "ebm", "10", T::integer,
      "statistics per cEBM iteration" },
    { "ebm_seed", "ebm", "2", T::integer, "cEBM seed" },

    { "calib_batch_sizes", "calib", "256", T::integer_list,
      "batch sizes to calibrate f_sigma for" },
    { "calib_n_fsigma", "calib", "200", T::integer, "f_sigma grid size" },
    { "calib_n_avg", "calib", "50", T::integer,
      "minibatches averaged per f_sigma value" },
    { "calib_seed", "calib", "3", T::integer, "calibration seed" },

    { "lambda", "gan", "30", T::real, "KL constraint weight" },
    { "lambda_wu", "gan", "1", T::real, "covariance constraint weight" },
    { "critic_steps", "gan", "1", T::integer, "critic updates per iteration" },
    { "constraints_per_step", "gan", "10", T::integer,
      "constraints sampled per generator update" },
    { "batch_size", "gan", "256", T::integer, "GAN minibatch size" },
    { "iterations", "gan", "5000", T::integer, "GAN iterations" },
    { "lr", "gan", "0.0002", T::real, "GAN learning rate" },
    { "beta1", "gan", "0", T::real, "GAN Adam beta1" },
    { "beta2", "gan", "0.9", T::real, "GAN Adam beta2" },
    { "clip_lo", "gan", "0", T::real, "critic weight lower bound" },
    { "clip_hi", "gan", "0.005", T::real, "critic weight upper bound" },
    { "latent_dim", "gan", "5", T::integer, "generator input width" },
    { "lr_milestones", "gan", "", T::integer_list,
      "iterations at which the GAN learning rates are scaled" },
    { "lr_factor", "gan", "0.2", T::real, "GAN learning rate factor" },
    { "gan_seed", "gan", "4", T::integer, "GAN seed" },
    { "log_every", "gan", "100", T::integer, "iterations per metrics row" },
    { "checkpoint_every", "", "1000", T::integer,
      "iterations per intermediate checkpoint (0 = none)" },

    { "eval_samples", "eval", "20000", T::integer,
      "generated signals per evaluation" },
    { "eval_bins", "eval", "40", T::integer, "histogram bins" },
    { "reference_repeats", "eval", "10", T::integer,
      "true minibatches per constraint in the reference band" },
  };
  return keys;
}

namespace detail {

inline std::string
trim(const std::string& s)
{
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string>
split(const std::string& s, char sep)
{
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, sep))
    out.push_back(trim(cell));
  return out;
}

inline std::uint64_t
parse_integer(const std::string& key, const std::string& v)
{
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (v.empty() || v[0] == '-')
      throw std::invalid_argument(v);
    x = std::stoull(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size())
    throw UsageError("config key '" + key +
                     "' expects a non-negative integer, got '" + v + "'");
  return x;
}

inline double
parse_real(const std::string& key, const std::string& v)
{
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::logic_error&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(x))
    throw UsageError("config key '" + key + "' expects a number, got '" + v +
                     "'");
  return x;
}

} // namespace detail

//! Flat key = value configuration. Values are stored normalized, so
//! "2e-4" and "0.0002" hash alike.
class ExperimentConfig
{
public:
  ExperimentConfig()
  {
    for (const auto& k : config_keys())
      set(k.name, k.fallback);
  }

  static const ConfigKey* find_key(const std::string& name)
  {
    for (const auto& k : config_keys())
      if (name == k.name)
        return &k;
    return nullptr;
  }

  void set(const std::string& key, const std::string& raw)
  {
    const ConfigKey* k = find_key(key);
    if (k == nullptr)
      throw UsageError("unknown config key '" + key + "'");
    const std::string v = detail::trim(raw);
    std::string norm;
    switch (k->type) {
      case ValueType::integer:
        norm = std::to_string(detail::parse_integer(key, v));
        break;
      case ValueType::real:
        norm = gan::format_double(detail::parse_real(key, v));
        break;
      case ValueType::text:
        if (v.empty())
          throw UsageError("config key '" + key + "' must not be empty");
        norm = v;
        break;
      case ValueType::integer_list:
        for (const auto& item : detail::split(v, ',')) {
          if (item.empty())
            continue;
          if (!norm.empty())
            norm += ',';
          norm += std::to_string(detail::parse_integer(key, item));
        }
        break;
      case ValueType::variant_list:
        for (const auto& item : detail::split(v, ',')) {
          if (item.empty())
            continue;
          gan::parse_variant(item);
          if (!norm.empty())
            norm += ',';
          norm += item;
        }
        if (norm.empty())
          throw UsageError("config key '" + key + "' lists no variant");
        break;
    }
    values_[key] = norm;
  }

  //! Applies `key = value` lines; '#' starts a comment.
  void merge_text(const std::string& text, const std::string& origin)
  {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos)
        line.erase(hash);
      line = detail::trim(line);
      if (line.empty())
        continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw UsageError(origin + ":" + std::to_string(lineno) +
                         ": expected 'key = value'");
      try {
        set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
      } catch (const UsageError& e) {
        throw UsageError(origin + ":" + std::to_string(lineno) + ": " +
                         e.what());
      }
    }
  }

  static ExperimentConfig load(const fs::path& path)
  {
    ExperimentConfig c;
    c.merge_text(read_file(path), path.string());
    return c;
  }

  const std::string& get(const std::string& key) const
  {
    auto it = values_.find(key);
    if (it == values_.end())
      throw UsageError("unknown config key '" + key + "'");
    return it->second;
  }
  std::size_t size(const std::string& key) const
  {
    return static_cast<std::size_t>(detail::parse_integer(key, get(key)));
  }
  std::uint64_t seed(const std::string& key) const
  {
    return detail::parse_integer(key, get(key));
  }
  double real(const std::string& key) const
  {
    return detail::parse_real(key, get(key));
  }
  std::vector<std::size_t> list(const std::string& key) const
  {
    std::vector<std::size_t> out;
    for (const auto& item : detail::split(get(key), ','))
      if (!item.empty())
        out.push_back(detail::parse_integer(key, item));
    return out;
  }
  std::vector<gan::Variant> variants() const
  {
    std::vector<gan::Variant> out;
    for (const auto& item : detail::split(get("variants"), ','))
      out.push_back(gan::parse_variant(item));
    return out;
  }
  fs::path output_dir() const { return get("output_dir"); }

  //! `key=value` lines of one group, in table order.
  std::string canonical(const std::string& group) const
  {
    std::string out;
    for (const auto& k : config_keys())
      if (group == k.group)
        out += std::string(k.name) + '=' + get(k.name) + '\n';
    return out;
  }

  //! Full configuration in file syntax.
  std::string text() const
  {
    std::string out;
    for (const auto& k : config_keys())
      out += std::string(k.name) + " = " + get(k.name) + '\n';
    return out;
  }

  void validate() const
  {
    pcgan::detail::require(size("n_samples") >= 1, "n_samples must be at least 1");
    pcgan::detail::require(size("signal_length") >= 2,
                    "signal_length must be at least 2");
    pcgan::detail::require(real("t_max") > 0.0, "t_max must be positive");
    pcgan::detail::require(size("ebm_batch") >= 1 &&
                      size("ebm_batch") <= size("n_samples"),
                    "ebm_batch must lie in [1, n_samples]");
    pcgan::detail::require(size("ebm_n_grid") >= 2, "ebm_n_grid must be at least 2");
    pcgan::detail::require(size("ebm_statistics_per_step") >= 1,
                    "ebm_statistics_per_step must be at least 1");
    const auto batches = list("calib_batch_sizes");
    pcgan::detail::require(!batches.empty(), "calib_batch_sizes is empty");
    for (auto b : batches)
      pcgan::detail::require(b >= 2, "calibration batch sizes must be at least 2");
    pcgan::detail::require(std::find(batches.begin(), batches.end(),
                              size("batch_size")) != batches.end(),
                    "batch_size must be one of calib_batch_sizes");
    pcgan::detail::require(size("calib_n_fsigma") >= 1 && size("calib_n_avg") >= 1,
                    "calibration grid and average counts must be positive");
    pcgan::detail::require(size("eval_samples") >= 2 && size("eval_bins") >= 1,
                    "eval_samples must be at least 2 and eval_bins positive");
    pcgan::detail::require(size("reference_repeats") >= 1,
                    "reference_repeats must be at least 1");
    gan_config(gan::Variant::pcgan).validate(size("signal_length") / 2 + 1);
  }

  gan::GanConfig gan_config(gan::Variant v) const
  {
    gan::GanConfig g;
    g.variant = v;
    g.lambda = real("lambda");
    g.lambda_wu = real("lambda_wu");
    g.critic_steps = size("critic_steps");
    g.constraints_per_step = size("constraints_per_step");
    g.batch_size = size("batch_size");
    g.iterations = size("iterations");
    g.lr = real("lr");
    g.beta1 = real("beta1");
    g.beta2 = real("beta2");
    g.clip_lo = real("clip_lo");
    g.clip_hi = real("clip_hi");
    g.latent_dim = size("latent_dim");
    g.lr_milestones = list("lr_milestones");
    g.lr_factor = real("lr_factor");
    g.seed = seed("gan_seed");
    g.log_every = size("log_every");
    g.checkpoint_every = size("checkpoint_every");
    return g;
  }

  cebm::TrainOptions ebm_options() const
  {
    cebm::TrainOptions o;
    o.iterations = size("ebm_iterations");
    o.batch_size = size("ebm_batch");
    o.lr = real("ebm_lr");
    o.beta1 = real("ebm_beta1");
    o.beta2 = real("ebm_beta2");
    o.milestones = list("ebm_milestones");
    o.lr_factor = real("ebm_lr_factor");
    o.n_grid = size("ebm_n_grid");
    o.max_statistics_per_step = size("ebm_statistics_per_step");
    o.seed = seed("ebm_seed");
    return o;
  }

  density::CalibrationOptions calibration_options() const
  {
    density::CalibrationOptions o;
    o.batch_sizes = list("calib_batch_sizes");
    o.n_fsigma = size("calib_n_fsigma");
    o.n_avg = size("calib_n_avg");
    o.seed = seed("calib_seed");
    return o;
  }

private:
  std::map<std::string, std::string> values_;
};

//! Signals x_n = (sin(w1 t_n) + sin(w2 t_n)) / 2 with w ~ |N(1, 1)|.
struct SyntheticDataset
{
  nn::Tensor signals;
  //! (w1, w2) per sample.
  std::vector<double> omega;
  std::uint64_t seed = 0;
  double t_max = 20.0;
};

inline std::vector<double>
time_axis(std::size_t length, double t_max)
{
  std::vector<double> t(length);
  for (std::size_t j = 0; j < length; ++j)
    t[j] = length == 1 ? 0.0
                       : t_max * static_cast<double>(j) /
                           static_cast<double>(length - 1);
  return t;
}

inline nn::Tensor
sine_signals(std::span<const double> omega,
             std::size_t length,
             double t_max)
{
  const std::size_t n = omega.size() / 2;
  auto t = time_axis(length, t_max);
  nn::Tensor x = nn::Tensor::zeros(n, length);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < length; ++j)
      x.at(i, j) = 0.5 * (std::sin(omega[2 * i] * t[j]) +
                          std::sin(omega[2 * i + 1] * t[j]));
  return x;
}

inline SyntheticDataset
gen_data(std::size_t n_samples,
         std::uint64_t seed,
         std::size_t length = 200,
         double t_max = 20.0)
{
  if (n_samples < 1)
    throw UsageError("n_samples must be at least 1");
  SyntheticDataset d;
  d.seed = seed;
  d.t_max = t_max;
  Rng rng(derive_seed(seed, "sines"));
  d.omega.resize(2 * n_samples);
  for (auto& w : d.omega)
    w = std::abs(1.0 + standard_normal(rng));
  d.signals = sine_signals(d.omega, length, t_max);
  return d;
}

inline Artifact
to_artifact(const SyntheticDataset& d)
{
  Artifact a("dataset");
  a.set("n_samples", std::to_string(d.signals.rows()));
  a.set("signal_length", std::to_string(d.signals.cols()));
  a.set("seed", std::to_string(d.seed));
  a.set("t_max", to_hex(d.t_max));
  a.set("omega", "abs(normal(1, 1))");
  a.put_doubles("signals", d.signals.values);
  a.put_doubles("omega", d.omega);
  return a;
}

inline SyntheticDataset
dataset_from_artifact(const Artifact& a)
{
  SyntheticDataset d;
  const std::size_t n = std::stoul(a.get("n_samples"));
  const std::size_t len = std::stoul(a.get("signal_length"));
  d.seed = std::stoull(a.get("seed"));
  d.t_max = from_hex(a.get("t_max"));
  d.signals = nn::Tensor({ n, len }, a.doubles("signals"));
  d.omega = a.doubles("omega");
  return d;
}

//! Column s holds statistic s of every sample.
inline std::vector<std::vector<double>>
statistic_columns(const std::vector<stats::StatisticSpec>& specs,
                  const nn::Tensor& signals)
{
  std::vector<std::vector<double>> out;
  for (const auto& spec : specs)
    out.push_back(stats::compute_batch(spec, signals).values);
  return out;
}

//! Tail-cut learned densities in raw coordinates.
inline std::vector<DensityGrid>
true_densities(const cebm::CEbmModel& m)
{
  std::vector<DensityGrid> out;
  for (std::size_t s = 0; s < m.n_statistics(); ++s)
    out.push_back(
      density::cut_tails(cebm::tabulate_raw(m, static_cast<int>(s), m.n_grid)));
  return out;
}

inline std::vector<DensityGrid>
raw_densities(const cebm::CEbmModel& m)
{
  std::vector<DensityGrid> out;
  for (std::size_t s = 0; s < m.n_statistics(); ++s)
    out.push_back(cebm::tabulate_raw(m, static_cast<int>(s), m.n_grid));
  return out;
}

inline std::string
hash_of(const std::string& text)
{
  return hash_hex(fnv1a(text));
}

inline constexpr const char* reference_schema = "# pcgan-reference v1";
inline constexpr const char* reference_columns = "s,kl";

inline std::string
reference_csv(const std::vector<double>& kl,
              const std::vector<std::string>& comment = {})
{
  std::string out = std::string(reference_schema) + '\n';
  for (const auto& c : comment)
    out += "# " + c + '\n';
  out += std::string(reference_columns) + '\n';
  for (std::size_t s = 0; s < kl.size(); ++s)
    out += std::to_string(s) + ',' + gan::format_double(kl[s]) + '\n';
  return out;
}

inline std::vector<double>
parse_reference_csv(const std::string& text)
{
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != reference_schema)
    throw UsageError("reference table: unknown or missing schema line");
  while (std::getline(is, line) && !line.empty() && line[0] == '#') {
  }
  if (line != reference_columns)
    throw UsageError("reference table: unexpected column header");
  std::vector<double> out;
  while (std::getline(is, line)) {
    if (line.empty())
      continue;
    auto f = detail::split(line, ',');
    if (f.size() != 2 || std::stoul(f[0]) != out.size())
      throw UsageError("reference table: malformed row '" + line + "'");
    out.push_back(std::stod(f[1]));
  }
  return out;
}

//! Value of a "# key=value" comment line in the leading comment block of a
//! text artifact, or empty.
inline std::string
comment_value(const std::string& text, const std::string& key)
{
  std::istringstream is(text);
  std::string line;
  const std::string prefix = "# " + key + "=";
  while (std::getline(is, line) && !line.empty() && line[0] == '#')
    if (line.rfind(prefix, 0) == 0)
      return line.substr(prefix.size());
  return {};
}

enum class Step
{
  data,
  ebm,
  calibrate,
  train,
  evaluate,
  reference,
  plot
};

//! Staged experiment runner. Each ensure_* call brings one artifact up to
//! date: it is skipped when the stored hash matches the configuration,
//! recomputed when missing, and refused as stale when the hash differs
//! unless `force` is set.
class Pipeline
{
public:
  Pipeline(ExperimentConfig cfg, bool force, std::ostream& log)
    : cfg_(std::move(cfg))
    , force_(force)
    , log_(log)
    , dir_(cfg_.output_dir())
  {
    cfg_.validate();
    fs::create_directories(dir_);
    fs::create_directories(dir_ / "checkpoints");
    fs::create_directories(dir_ / "plots");
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }

  fs::path data_path() const { return dir_ / "data.pcgan"; }
  fs::path ebm_path() const { return dir_ / "cebm.pcgan"; }
  fs::path fsigma_path() const { return dir_ / "fsigma.txt"; }
  fs::path reference_path() const { return dir_ / "reference.csv"; }
  fs::path train_path(gan::Variant v) const
  {
    return dir_ / ("gan_" + gan::variant_name(v) + ".pcgan");
  }
  fs::path metrics_path(gan::Variant v) const
  {
    return dir_ / ("metrics_" + gan::variant_name(v) + ".csv");
  }
  fs::path eval_path(gan::Variant v) const
  {
    return dir_ / ("eval_" + gan::variant_name(v) + ".csv");
  }
  fs::path checkpoint_path(gan::Variant v, std::size_t it) const
  {
    return dir_ / "checkpoints" /
           (gan::variant_name(v) + "_" + std::to_string(it) + ".pcgan");
  }

  std::string data_hash() const
  {
    return hash_of("data v1\n" + cfg_.canonical("data"));
  }
  std::string ebm_hash() const
  {
    return hash_of("ebm v1\n" + data_hash() + '\n' + cfg_.canonical("ebm"));
  }
  std::string calibration_hash() const
  {
    return hash_of("calib v1\n" + ebm_hash() + '\n' + cfg_.canonical("calib"));
  }
  std::string train_hash(gan::Variant v) const
  {
    return hash_of("train v1\n" + calibration_hash() + '\n' +
                   cfg_.canonical("gan") + "variant=" + gan::variant_name(v));
  }
  std::string eval_hash(gan::Variant v) const
  {
    return hash_of("eval v1\n" + train_hash(v) + '\n' +
                   cfg_.canonical("eval"));
  }
  std::string reference_hash() const
  {
    return hash_of("reference v1\n" + calibration_hash() + '\n' +
                   cfg_.canonical("eval") + "batch_size=" +
                   cfg_.get("batch_size") + "\ngan_seed=" +
                   cfg_.get("gan_seed"));
  }

  //! Runs every stage for every configured variant.
  void run_all()
  {
    ensure_data();
    ensure_ebm();
    ensure_calibration();
    for (auto v : cfg_.variants())
      ensure_trained(v);
    ensure_reference();
    for (auto v : cfg_.variants())
      ensure_evaluated(v);
    write_plots();
  }

  const SyntheticDataset& ensure_data()
  {
    if (data_)
      return *data_;
    const auto h = data_hash();
    if (up_to_date(data_path(), h, "dataset")) {
      data_ = dataset_from_artifact(load_artifact(data_path(), "dataset"));
      return *data_;
    }
    auto t0 = clock::now();
    data_ = gen_data(cfg_.size("n_samples"),
                     cfg_.seed("data_seed"),
                     cfg_.size("signal_length"),
                     cfg_.real("t_max"));
    auto a = to_artifact(*data_);
    a.set("config_hash", h);
    write_atomic(data_path(), a.serialize());
    done("dataset", t0);
    return *data_;
  }

  const std::vector<stats::StatisticSpec>& specs()
  {
    if (specs_.empty())
      specs_ = stats::power_spectrum_statistics(cfg_.size("signal_length"));
    return specs_;
  }

  const std::vector<std::vector<double>>& statistic_values()
  {
    if (columns_.empty())
      columns_ = statistic_columns(specs(), ensure_data().signals);
    return columns_;
  }

  const cebm::CEbmModel& ensure_ebm()
  {
    if (ebm_)
      return *ebm_;
    const auto h = ebm_hash();
    ensure_data();
    if (up_to_date(ebm_path(), h, "cebm")) {
      ebm_ = cebm::from_artifact(load_artifact(ebm_path(), "cebm"));
      return *ebm_;
    }
    auto t0 = clock::now();
    auto opt = cfg_.ebm_options();
    const std::size_t every = std::max<std::size_t>(1, opt.iterations / 10);
    opt.progress = [&](std::size_t it, double j) {
      if ((it + 1) % every == 0)
        log_ << "  cEBM iteration " << it + 1 << "/" << opt.iterations
             << "  J = " << j << std::endl;
    };
    auto res = cebm::train_cebm(statistic_values(), opt);
    auto a = cebm::to_artifact(res.model);
    a.set("config_hash", h);
    write_atomic(ebm_path(), a.serialize());
    ebm_ = std::move(res.model);
    done("cEBM", t0);
    return *ebm_;
  }

  const density::FsigmaTable& ensure_calibration()
  {
    if (fsigma_)
      return *fsigma_;
    const auto h = calibration_hash();
    ensure_ebm();
    if (up_to_date(fsigma_path(), h, "")) {
      std::istringstream is(read_file(fsigma_path()));
      fsigma_ = density::FsigmaTable::read(is);
      return *fsigma_;
    }
    auto t0 = clock::now();
    auto cal = density::find_fsigma(
      statistic_values(), true_densities(*ebm_), cfg_.calibration_options());
    std::ostringstream os;
    cal.table.write(os, "config_hash=" + h);
    write_atomic(fsigma_path(), os.str());
    fsigma_ = std::move(cal.table);
    done("f_sigma calibration", t0);
    return *fsigma_;
  }

  const gan::ConstraintSet& constraints()
  {
    if (!constraints_) {
      gan::ConstraintSet cs;
      cs.specs = specs();
      cs.p_true = true_densities(ensure_ebm());
      cs.fsigma = ensure_calibration();
      constraints_ = std::move(cs);
    }
    return *constraints_;
  }

  //! Trains one variant, resuming from the newest intermediate checkpoint
  //! that belongs to the current configuration.
  gan::GanState ensure_trained(gan::Variant v)
  {
    const auto h = train_hash(v);
    const auto name = gan::variant_name(v);
    const auto& data = ensure_data();
    const auto& cs = constraints();
    if (up_to_date(train_path(v), h, "gan-checkpoint")) {
      auto st = gan::from_artifact(load_artifact(train_path(v), "gan-checkpoint"));
      if (!fs::exists(metrics_path(v)))
        write_atomic(metrics_path(v),
                     gan::metrics_csv(st.metrics, { "config_hash=" + h }));
      return st;
    }
    const auto cfg = cfg_.gan_config(v);
    const std::size_t len = data.signals.cols();
    gan::GanState st = gan::initial_state(cfg, len, cs.size());
    std::size_t resume = 0;
    for (const auto& e : fs::directory_iterator(dir_ / "checkpoints")) {
      const auto fname = e.path().filename().string();
      if (fname.rfind(name + "_", 0) != 0 || e.path().extension() != ".pcgan")
        continue;
      auto a = load_artifact(e.path(), "gan-checkpoint");
      if (a.get("config_hash") != h) {
        if (!force_)
          throw StaleArtifactError(
            e.path().string() +
            " was written by a different configuration (use --force)");
        fs::remove(e.path());
        continue;
      }
      const std::size_t it = std::stoul(a.get("iteration"));
      if (it > resume && it <= cfg.iterations) {
        resume = it;
        st = gan::from_artifact(a);
      }
    }
    if (resume > 0)
      log_ << "resuming " << name << " from iteration " << resume << std::endl;

    Eigen::MatrixXd cov;
    if (v == gan::Variant::wu)
      cov = gan::covariance(data.signals);
    gan::TrainContext ctx;
    ctx.data = &data.signals;
    ctx.constraints = &cs;
    ctx.cov_true = v == gan::Variant::wu ? &cov : nullptr;
    ctx.on_checkpoint = [&](const gan::GanState& s) {
      auto a = gan::to_artifact(s, v, h, len, cfg.latent_dim);
      write_atomic(checkpoint_path(v, s.iteration), a.serialize());
    };
    ctx.on_log = [&](const gan::MetricsRow& r) {
      log_ << "  " << name << " iteration " << r.iteration
           << "  L_D = " << r.loss_critic << "  L_G = " << r.loss_generator
           << "  mean KL = " << r.kl_mean << std::endl;
    };
    auto t0 = clock::now();
    gan::train(cfg, st, ctx);
    write_atomic(train_path(v),
                 gan::to_artifact(st, v, h, len, cfg.latent_dim).serialize());
    write_atomic(metrics_path(v),
                 gan::metrics_csv(st.metrics, { "config_hash=" + h }));
    done(name + " training", t0);
    return st;
  }

  std::vector<double> ensure_reference()
  {
    const auto h = reference_hash();
    if (up_to_date(reference_path(), h, ""))
      return parse_reference_csv(read_file(reference_path()));
    const auto& cs = constraints();
    auto t0 = clock::now();
    auto kl = gan::reference_kl(statistic_values(),
                                cs,
                                cfg_.size("batch_size"),
                                cfg_.size("reference_repeats"),
                                cfg_.seed("gan_seed"));
    write_atomic(reference_path(), reference_csv(kl, { "config_hash=" + h }));
    done("reference band", t0);
    return kl;
  }

  std::vector<gan::ReportRow> ensure_evaluated(gan::Variant v)
  {
    const auto h = eval_hash(v);
    const auto& data = ensure_data();
    if (up_to_date(eval_path(v), h, ""))
      return gan::parse_report_csv(read_file(eval_path(v)));
    auto st = ensure_trained(v);
    const auto& cs = constraints();
    auto t0 = clock::now();
    const auto cfg = cfg_.gan_config(v);
    Rng rng(derive_seed(cfg.seed, "evaluate", static_cast<std::uint64_t>(v)));
    auto generated = gan::generate(cfg,
                                   st.generator,
                                   data.signals.cols(),
                                   cfg_.size("eval_samples"),
                                   rng);
    auto rows = gan::evaluate(generated,
                              data.signals,
                              cs,
                              raw_densities(*ebm_),
                              cs.fsigma.largest_batch(),
                              cfg_.size("eval_bins"));
    write_atomic(eval_path(v), gan::report_csv(rows, { "config_hash=" + h }));
    done(gan::variant_name(v) + " evaluation", t0);
    return rows;
  }

  //! Regenerates every SVG from the CSV files on disk.
  void write_plots()
  {
    std::vector<std::pair<std::string, std::vector<gan::MetricsRow>>> curves;
    for (auto v : cfg_.variants())
      if (fs::exists(metrics_path(v)))
        curves.emplace_back(
          gan::variant_name(v),
          gan::parse_metrics_csv(read_file(metrics_path(v))));
    std::optional<plot::Band> band;
    if (fs::exists(reference_path()))
      band = plot::Band::from_values(
        parse_reference_csv(read_file(reference_path())));
    write_atomic(dir_ / "plots" / "kl_vs_iteration.svg",
                 plot::kl_curves_svg(curves, band));
    for (auto v : cfg_.variants()) {
      if (!fs::exists(eval_path(v)))
        continue;
      auto rows = gan::parse_report_csv(read_file(eval_path(v)));
      const auto name = gan::variant_name(v);
      write_atomic(dir_ / "plots" / ("constraints_" + name + ".svg"),
                   plot::constraint_histograms_svg(rows, name));
      write_atomic(dir_ / "plots" / ("metrics_" + name + ".svg"),
                   plot::metric_histograms_svg(rows, name));
    }
    log_ << "plots written to " << (dir_ / "plots").string() << std::endl;
  }

private:
  using clock = std::chrono::steady_clock;

  // True when `path` exists and carries `hash`; throws when it carries a
  // different hash and force is off. `kind` empty means a text artifact
  // with a "# config_hash=" comment.
  bool up_to_date(const fs::path& path,
                  const std::string& hash,
                  const std::string& kind)
  {
    if (!fs::exists(path))
      return false;
    std::string stored;
    if (kind.empty()) {
      stored = comment_value(read_file(path), "config_hash");
    } else {
      std::ifstream is(path);
      std::string line;
      while (std::getline(is, line) && !line.empty() && line[0] != '@')
        if (line.rfind("config_hash ", 0) == 0)
          stored = line.substr(12);
    }
    if (stored == hash) {
      log_ << "skipped " << path.filename().string() << " (up to date)"
           << std::endl;
      return true;
    }
    if (!force_)
      throw StaleArtifactError(
        path.string() +
        " was written by a different configuration (use --force)");
    log_ << "replacing stale " << path.filename().string() << std::endl;
    return false;
  }

  void done(const std::string& what, clock::time_point t0)
  {
    const double secs =
      std::chrono::duration<double>(clock::now() - t0).count();
    log_ << what << " done in " << secs << " s" << std::endl;
    std::ofstream timing(dir_ / "timing.log", std::ios::app);
    timing << what << ' ' << secs << '\n';
  }

  ExperimentConfig cfg_;
  bool force_;
  std::ostream& log_;
  fs::path dir_;
  std::optional<SyntheticDataset> data_;
  std::vector<stats::StatisticSpec> specs_;
  std::vector<std::vector<double>> columns_;
  std::optional<cebm::CEbmModel> ebm_;
  std::optional<density::FsigmaTable> fsigma_;
  std::optional<gan::ConstraintSet> constraints_;
};

} // namespace pcgan::harness
