// Command line front end for the experiment pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 stale
// artifact refused.

#include "pcgan/harness.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace pcgan;
namespace fs = std::filesystem;

struct Common
{
  std::string config_file;
  bool force = false;
  std::map<std::string, std::string> overrides;
};

void
add_common(CLI::App* cmd, Common& c)
{
  cmd->add_option("-c,--config", c.config_file, "key = value config file")
    ->check(CLI::ExistingFile);
  cmd->add_flag("--force", c.force, "recompute stale artifacts");
  for (const auto& k : harness::config_keys()) {
    const std::string key = k.name;
    cmd
      ->add_option_function<std::string>(
        "--" + key,
        [&c, key](const std::string& v) { c.overrides[key] = v; },
        std::string(k.help) + " (default: " +
          (*k.fallback ? k.fallback : "none") + ")")
      ->group("Config keys");
  }
}

harness::ExperimentConfig
load_config(const Common& c)
{
  harness::ExperimentConfig cfg;
  if (!c.config_file.empty())
    cfg = harness::ExperimentConfig::load(c.config_file);
  for (const auto& [k, v] : c.overrides)
    cfg.set(k, v);
  return cfg;
}

} // namespace

int
main(int argc, char** argv)
{
  CLI::App app{ "Probabilistically constrained GAN experiments" };
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate the sine dataset");
  auto* ebm = app.add_subcommand("train-ebm", "train the conditional EBM");
  auto* cal = app.add_subcommand("calibrate", "search f_sigma* per statistic");
  auto* train = app.add_subcommand("train", "train one GAN variant");
  auto* eval = app.add_subcommand("evaluate", "evaluate a trained variant");
  auto* plot = app.add_subcommand("plot", "render SVG plots from CSV files");
  auto* pipe = app.add_subcommand("pipeline", "run every stage");
  auto* show = app.add_subcommand("show-config", "print the merged config");
  for (auto* cmd : { gen, ebm, cal, train, eval, plot, pipe, show })
    add_common(cmd, common);

  std::string variant = "pcgan";
  for (auto* cmd : { train, eval })
    cmd->add_option("--variant", variant, "wgan, pcgan or wu")
      ->check(CLI::IsMember({ "wgan", "pcgan", "wu" }));

  std::vector<std::string> metrics_files;
  std::vector<std::string> report_files;
  std::string reference_file;
  std::string plot_out;
  plot->add_option("--metrics", metrics_files, "metrics CSV (repeatable)");
  plot->add_option("--report", report_files, "evaluation CSV (repeatable)");
  plot->add_option("--reference", reference_file, "reference band CSV");
  plot->add_option("--out", plot_out, "directory for the SVG files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto cfg = load_config(common);
    if (*show) {
      std::cout << cfg.text();
      return 0;
    }
    if (*plot && (!metrics_files.empty() || !report_files.empty())) {
      const fs::path out = plot_out.empty() ? fs::path(".") : fs::path(plot_out);
      std::vector<std::pair<std::string, std::vector<gan::MetricsRow>>> runs;
      for (const auto& f : metrics_files)
        runs.emplace_back(fs::path(f).stem().string(),
                          gan::parse_metrics_csv(read_file(f)));
      std::optional<plot::Band> band;
      if (!reference_file.empty())
        band = plot::Band::from_values(
          harness::parse_reference_csv(read_file(reference_file)));
      if (!metrics_files.empty())
        write_atomic(out / "kl_vs_iteration.svg",
                     plot::kl_curves_svg(runs, band));
      for (const auto& f : report_files) {
        auto rows = gan::parse_report_csv(read_file(f));
        const auto stem = fs::path(f).stem().string();
        write_atomic(out / ("constraints_" + stem + ".svg"),
                     plot::constraint_histograms_svg(rows, stem));
        write_atomic(out / ("metrics_" + stem + ".svg"),
                     plot::metric_histograms_svg(rows, stem));
      }
      std::cout << "plots written to " << out.string() << std::endl;
      return 0;
    }

    harness::Pipeline p(cfg, common.force, std::cout);
    if (*gen)
      p.ensure_data();
    else if (*ebm)
      p.ensure_ebm();
    else if (*cal)
      p.ensure_calibration();
    else if (*train)
      p.ensure_trained(gan::parse_variant(variant));
    else if (*eval) {
      p.ensure_reference();
      p.ensure_evaluated(gan::parse_variant(variant));
    } else if (*plot)
      p.write_plots();
    else if (*pipe)
      p.run_all();
    return 0;
  } catch (const StaleArtifactError& e) {
    std::cerr << "stale artifact: " << e.what() << std::endl;
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
