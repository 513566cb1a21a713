#include "oracles.hpp"

#include "pcgan/harness.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>
#include <unistd.h>

using namespace pcgan;
namespace fs = std::filesystem;

namespace {

std::vector<fs::path>&
created_dirs()
{
  static std::vector<fs::path> dirs;
  return dirs;
}

class RemoveCreatedDirs : public ::testing::Environment
{
public:
  void TearDown() override
  {
    for (const auto& d : created_dirs())
      fs::remove_all(d);
  }
};

const auto* const cleanup =
  ::testing::AddGlobalTestEnvironment(new RemoveCreatedDirs);

fs::path
fresh_dir(const std::string& name)
{
  auto d = fs::temp_directory_path() /
           ("pcgan_test_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  created_dirs().push_back(d);
  return d;
}

harness::ExperimentConfig
tiny_config(const fs::path& out)
{
  harness::ExperimentConfig c;
  c.merge_text(R"(
    n_samples = 300
    signal_length = 32
    ebm_iterations = 60
    ebm_batch = 64
    ebm_milestones = 20,40
    ebm_n_grid = 128
    calib_batch_sizes = 32
    calib_n_fsigma = 12
    calib_n_avg = 3
    batch_size = 32
    iterations = 30
    log_every = 10
    checkpoint_every = 10
    eval_samples = 200
    eval_bins = 10
    reference_repeats = 2
  )",
               "tiny");
  c.set("output_dir", out.string());
  return c;
}

std::vector<fs::path>
files_under(const fs::path& dir)
{
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      out.push_back(e.path());
  return out;
}

int
run_cli(const std::string& args)
{
  const std::string cmd =
    std::string(PCGAN_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(GenData, AmplitudeIsBounded)
{
  auto d = harness::gen_data(2000, 5);
  EXPECT_EQ(d.signals.rows(), 2000u);
  EXPECT_EQ(d.signals.cols(), 200u);
  for (double v : d.signals.values)
    ASSERT_LE(std::abs(v), 1.0);
}

TEST(GenData, ZeroFrequenciesGiveZeroSignal)
{
  std::vector<double> omega{ 0.0, 0.0 };
  auto x = harness::sine_signals(omega, 200, 20.0);
  for (double v : x.values)
    EXPECT_EQ(v, 0.0);
}

TEST(GenData, TimeAxisIsLinspace)
{
  auto t = harness::time_axis(200, 20.0);
  EXPECT_EQ(t.front(), 0.0);
  EXPECT_DOUBLE_EQ(t.back(), 20.0);
  EXPECT_DOUBLE_EQ(t[1], 20.0 / 199.0);
}

TEST(GenData, SignalFormula)
{
  auto d = harness::gen_data(3, 8);
  auto t = harness::time_axis(200, 20.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j : { 0u, 17u, 199u })
      EXPECT_DOUBLE_EQ(d.signals.at(i, j),
                       0.5 * (std::sin(d.omega[2 * i] * t[j]) +
                              std::sin(d.omega[2 * i + 1] * t[j])));
}

TEST(GenData, FrequencyMeanMatchesFoldedNormal)
{
  auto d = harness::gen_data(100000, 6, 2);
  double mean = 0.0, ss = 0.0;
  for (double w : d.omega) {
    ASSERT_GE(w, 0.0);
    mean += w;
  }
  mean /= static_cast<double>(d.omega.size());
  for (double w : d.omega)
    ss += (w - mean) * (w - mean);
  const double se =
    std::sqrt(ss / static_cast<double>(d.omega.size() - 1) / d.omega.size());
  const double expected = oracle::folded_normal_mean(1.0, 1.0);
  EXPECT_NEAR(expected, 1.167, 1e-3);
  EXPECT_NEAR(mean, expected, 3 * se);
}

TEST(GenData, DeterministicUnderSeed)
{
  EXPECT_EQ(harness::gen_data(50, 9).signals.values,
            harness::gen_data(50, 9).signals.values);
  EXPECT_NE(harness::gen_data(50, 9).signals.values,
            harness::gen_data(50, 10).signals.values);
  EXPECT_THROW(harness::gen_data(0, 1), UsageError);
}

TEST(Dataset, ArtifactRoundTrip)
{
  auto d = harness::gen_data(20, 11, 16, 5.0);
  std::istringstream is(harness::to_artifact(d).serialize());
  auto back = harness::dataset_from_artifact(Artifact::parse(is, "dataset"));
  EXPECT_EQ(back.signals.values, d.signals.values);
  EXPECT_EQ(back.signals.cols(), 16u);
  EXPECT_EQ(back.omega, d.omega);
  EXPECT_EQ(back.seed, 11u);
  EXPECT_EQ(back.t_max, 5.0);
}

TEST(Config, DeskDefaults)
{
  harness::ExperimentConfig c;
  EXPECT_EQ(c.size("n_samples"), 20000u);
  EXPECT_EQ(c.size("signal_length"), 200u);
  EXPECT_EQ(c.size("iterations"), 5000u);
  EXPECT_EQ(c.size("batch_size"), 256u);
  EXPECT_EQ(c.real("lambda"), 30.0);
  EXPECT_EQ(c.real("lr"), 2e-4);
  EXPECT_EQ(c.size("ebm_iterations"), 20000u);
  EXPECT_NO_THROW(c.validate());
  auto g = c.gan_config(gan::Variant::pcgan);
  EXPECT_EQ(g.clip_lo, 0.0);
  EXPECT_EQ(g.clip_hi, 0.005);
  EXPECT_EQ(g.beta1, 0.0);
  EXPECT_EQ(g.beta2, 0.9);
  EXPECT_TRUE(g.lr_milestones.empty());
}

TEST(Config, RejectsUnknownKeys)
{
  harness::ExperimentConfig c;
  EXPECT_THROW(c.set("lamda", "3"), UsageError);
  try {
    c.merge_text("lambda = 3\nbogus = 1\n", "run.cfg");
    FAIL() << "unknown key accepted";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Config, RejectsMalformedValues)
{
  harness::ExperimentConfig c;
  EXPECT_THROW(c.set("iterations", "12x"), UsageError);
  EXPECT_THROW(c.set("iterations", "-3"), UsageError);
  EXPECT_THROW(c.set("lr", "fast"), UsageError);
  EXPECT_THROW(c.set("variants", "wgan,dcgan"), UsageError);
  EXPECT_THROW(c.merge_text("lambda 3\n", "x"), UsageError);
}

TEST(Config, EquivalentSpellingsHashAlike)
{
  harness::ExperimentConfig a, b;
  a.set("lr", "2e-4");
  b.set("lr", "0.0002");
  a.set("lr_milestones", "100, 200");
  b.set("lr_milestones", "100,200");
  EXPECT_EQ(a.canonical("gan"), b.canonical("gan"));
}

TEST(Config, CommentsAndOverrides)
{
  auto dir = fresh_dir("config");
  {
    std::ofstream os(dir / "run.cfg");
    os << "# desk run\n\nlambda = 5   # weaker\niterations = 10\n";
  }
  auto c = harness::ExperimentConfig::load(dir / "run.cfg");
  EXPECT_EQ(c.real("lambda"), 5.0);
  c.set("lambda", "7");
  EXPECT_EQ(c.real("lambda"), 7.0);
  EXPECT_EQ(c.size("iterations"), 10u);
  // text() reloads to the same configuration
  harness::ExperimentConfig d;
  d.merge_text(c.text(), "roundtrip");
  EXPECT_EQ(d.text(), c.text());
}

TEST(Config, TrainingBatchMustBeCalibrated)
{
  harness::ExperimentConfig c;
  c.set("batch_size", "128");
  EXPECT_THROW(c.validate(), UsageError);
  c.set("calib_batch_sizes", "128,256");
  EXPECT_NO_THROW(c.validate());
}

class PipelineTest : public ::testing::Test
{
protected:
  static void SetUpTestSuite()
  {
    dir_ = fresh_dir("pipeline");
    std::ostringstream log;
    harness::Pipeline p(tiny_config(dir_), false, log);
    p.run_all();
  }

  static inline fs::path dir_;
};

TEST_F(PipelineTest, WritesEveryArtifactAtomically)
{
  for (const char* f : { "data.pcgan",
                         "cebm.pcgan",
                         "fsigma.txt",
                         "reference.csv",
                         "gan_wgan.pcgan",
                         "gan_pcgan.pcgan",
                         "metrics_wgan.csv",
                         "metrics_pcgan.csv",
                         "eval_wgan.csv",
                         "eval_pcgan.csv",
                         "timing.log",
                         "plots/kl_vs_iteration.svg",
                         "plots/constraints_pcgan.svg",
                         "plots/metrics_wgan.svg",
                         "checkpoints/pcgan_10.pcgan",
                         "checkpoints/pcgan_20.pcgan" })
    EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  for (const auto& f : files_under(dir_))
    EXPECT_NE(f.extension(), ".tmp") << f;
}

TEST_F(PipelineTest, EvaluationReportShape)
{
  auto rows = gan::parse_report_csv(read_file(dir_ / "eval_pcgan.csv"));
  // 17 ps constraints for length 32, then three metric histograms
  ASSERT_EQ(rows.size(), 17u + 3u);
  for (std::size_t s = 0; s < 17; ++s) {
    EXPECT_EQ(rows[s].s, static_cast<int>(s));
    EXPECT_TRUE(std::isfinite(rows[s].kl));
  }
}

TEST_F(PipelineTest, RerunSkipsEveryStage)
{
  std::ostringstream log;
  harness::Pipeline p(tiny_config(dir_), false, log);
  p.run_all();
  for (const char* f : { "data.pcgan",
                         "cebm.pcgan",
                         "fsigma.txt",
                         "gan_pcgan.pcgan",
                         "reference.csv",
                         "eval_wgan.csv" })
    EXPECT_NE(log.str().find(std::string("skipped ") + f), std::string::npos)
      << f << "\n"
      << log.str();
  EXPECT_EQ(log.str().find("done in"), std::string::npos) << log.str();
}

TEST_F(PipelineTest, ChangedConfigIsRefusedUnlessForced)
{
  auto copy = fresh_dir("pipeline_stale");
  fs::copy(dir_, copy, fs::copy_options::recursive);
  const auto before = read_file(copy / "cebm.pcgan");
  auto cfg = tiny_config(copy);
  cfg.set("ebm_iterations", "61");
  std::ostringstream log;
  {
    harness::Pipeline p(cfg, false, log);
    EXPECT_THROW(p.ensure_ebm(), StaleArtifactError);
    // data is unaffected by the change
    EXPECT_NO_THROW(p.ensure_data());
  }
  EXPECT_EQ(read_file(copy / "cebm.pcgan"), before);

  harness::Pipeline forced(cfg, true, log);
  forced.ensure_calibration();
  EXPECT_NE(read_file(copy / "cebm.pcgan"), before);
  EXPECT_NE(log.str().find("replacing stale cebm.pcgan"), std::string::npos);
  EXPECT_EQ(harness::comment_value(read_file(copy / "fsigma.txt"),
                                   "config_hash"),
            forced.calibration_hash());
}

TEST_F(PipelineTest, GanKeysOnlyInvalidateGanStages)
{
  auto a = tiny_config(dir_);
  auto b = a;
  b.set("lambda", "3");
  std::ostringstream log;
  harness::Pipeline pa(a, false, log), pb(b, false, log);
  EXPECT_EQ(pa.calibration_hash(), pb.calibration_hash());
  EXPECT_NE(pa.train_hash(gan::Variant::pcgan),
            pb.train_hash(gan::Variant::pcgan));
  EXPECT_EQ(pa.reference_hash(), pb.reference_hash());
  b.set("checkpoint_every", "7");
  harness::Pipeline pc(b, false, log);
  EXPECT_EQ(pb.train_hash(gan::Variant::pcgan),
            pc.train_hash(gan::Variant::pcgan));
}

TEST_F(PipelineTest, IdenticalConfigGivesIdenticalCsv)
{
  auto other = fresh_dir("pipeline_twin");
  std::ostringstream log;
  harness::Pipeline p(tiny_config(other), false, log);
  p.run_all();
  for (const char* f : { "fsigma.txt",
                         "reference.csv",
                         "metrics_wgan.csv",
                         "metrics_pcgan.csv",
                         "eval_wgan.csv",
                         "eval_pcgan.csv",
                         "plots/kl_vs_iteration.svg" })
    EXPECT_EQ(read_file(other / f), read_file(dir_ / f)) << f;
}

TEST_F(PipelineTest, ResumesFromIntermediateCheckpoint)
{
  auto copy = fresh_dir("pipeline_resume");
  fs::copy(dir_, copy, fs::copy_options::recursive);
  for (const char* f : { "gan_pcgan.pcgan",
                         "metrics_pcgan.csv",
                         "eval_pcgan.csv",
                         "checkpoints/pcgan_20.pcgan" })
    fs::remove(copy / f);
  std::ostringstream log;
  harness::Pipeline p(tiny_config(copy), false, log);
  p.run_all();
  EXPECT_NE(log.str().find("resuming pcgan from iteration 10"),
            std::string::npos)
    << log.str();
  for (const char* f : { "metrics_pcgan.csv", "eval_pcgan.csv" })
    EXPECT_EQ(read_file(copy / f), read_file(dir_ / f)) << f;
}

TEST(Pipeline, WganOnlyConfigStillCalibrates)
{
  auto dir = fresh_dir("pipeline_wgan");
  auto cfg = tiny_config(dir);
  cfg.set("variants", "wgan");
  std::ostringstream log;
  harness::Pipeline p(cfg, false, log);
  p.run_all();
  EXPECT_TRUE(fs::exists(dir / "fsigma.txt"));
  EXPECT_TRUE(fs::exists(dir / "eval_wgan.csv"));
  EXPECT_FALSE(fs::exists(dir / "gan_pcgan.pcgan"));
  auto rows = gan::parse_report_csv(read_file(dir / "eval_wgan.csv"));
  EXPECT_TRUE(std::isfinite(rows.front().kl));
}

TEST(Cli, ExitCodes)
{
  auto dir = fresh_dir("cli");
  const std::string base = " --output_dir " + dir.string() +
                           " --n_samples 300 --signal_length 32"
                           " --ebm_iterations 20 --ebm_batch 32"
                           " --ebm_n_grid 64";
  EXPECT_EQ(run_cli("train-ebm" + base), 0);
  EXPECT_TRUE(fs::exists(dir / "cebm.pcgan"));
  EXPECT_EQ(run_cli("train-ebm" + base), 0);
  EXPECT_EQ(run_cli("train-ebm" + base + " --ebm_seed 9"), 3);
  EXPECT_EQ(run_cli("train-ebm" + base + " --ebm_seed 9 --force"), 0);
  EXPECT_EQ(run_cli("train-ebm" + base + " --no_such_key 1"), 1);
  EXPECT_EQ(run_cli("train-ebm" + base + " --batch_size 100"), 1);
  EXPECT_EQ(run_cli("show-config --lambda 2e1"), 0);
}

TEST(Plot, EmptyMetricsGiveTitledAxes)
{
  auto svg = plot::kl_curves_svg({ { "pcgan", {} } });
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("constraint KL vs iteration"), std::string::npos);
  EXPECT_EQ(svg.find("<polyline"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(Plot, TwoRowsGiveTwoPointPolyline)
{
  std::vector<gan::MetricsRow> rows(2);
  rows[0] = { 100, 0, 0, 0, 0, 0.5, 0.1, 1.0, 0 };
  rows[1] = { 200, 0, 0, 0, 0, 0.2, 0.05, 0.4, 0 };
  auto svg = plot::kl_curves_svg({ { "pcgan", rows } });
  const auto at = svg.find("<polyline");
  ASSERT_NE(at, std::string::npos);
  EXPECT_EQ(svg.find("<polyline", at + 1), std::string::npos);
  const auto p0 = svg.find("points=\"", at) + 8;
  const auto pts = svg.substr(p0, svg.find('"', p0) - p0);
  EXPECT_EQ(std::count(pts.begin(), pts.end(), ','), 2);
  EXPECT_EQ(svg, plot::kl_curves_svg({ { "pcgan", rows } }));
}

TEST(Plot, BandViolationNamesTheRow)
{
  std::vector<gan::MetricsRow> rows(1);
  rows[0] = { 300, 0, 0, 0, 0, 2.0, 0.1, 1.0, 0 };
  try {
    plot::kl_curves_svg({ { "wgan", rows } });
    FAIL() << "inconsistent band accepted";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 300"), std::string::npos);
  }
}

TEST(Plot, RejectsUnknownSchema)
{
  EXPECT_THROW(gan::parse_metrics_csv("# pcgan-metrics v9\niteration\n"),
               UsageError);
  EXPECT_THROW(harness::parse_reference_csv("s,kl\n0,1\n"), UsageError);
}
