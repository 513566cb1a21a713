#include "oracles.hpp"

#include "pcgan/density.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace pcgan;
using namespace pcgan::density;

namespace {

DensityGrid
tabulate_normal(double mu, double sigma, double lo, double hi, std::size_t n)
{
  DensityGrid g{ lo, (hi - lo) / static_cast<double>(n - 1), {} };
  for (std::size_t i = 0; i < n; ++i)
    g.values.push_back(oracle::normal_pdf(g.x(i), mu, sigma));
  return g;
}

std::vector<double>
normal_samples(std::size_t n, double mu, double sigma, Rng& rng)
{
  std::vector<double> out(n);
  for (auto& v : out)
    v = mu + sigma * standard_normal(rng);
  return out;
}

} // namespace

TEST(Kde, StandardNormalPeak)
{
  auto grid = tabulate_normal(0, 1, -4, 4, 801);
  auto q = kde_density({ { 0.0, 0.0 }, 1.0, 0 }, grid);
  EXPECT_NEAR(q.at(0.0), 0.398942, 1e-6);
  for (std::size_t i = 0; i < q.size(); ++i)
    EXPECT_NEAR(q.values[i], grid.values[i], 1e-13);
}

TEST(Kde, SymmetricCenters)
{
  auto grid = tabulate_normal(0, 1, -3, 3, 601);
  auto q = kde_density({ { -1.0, 1.0 }, 0.5, 0 }, grid);
  for (std::size_t i = 0; i < q.size(); ++i)
    EXPECT_NEAR(q.values[i], q.values[q.size() - 1 - i], 1e-12);
}

TEST(Kde, EqualCentersCollapse)
{
  auto grid = tabulate_normal(0, 1, -3, 3, 301);
  auto many = kde_density({ std::vector<double>(256, 0.3), 0.7, 0 }, grid);
  for (std::size_t i = 0; i < grid.size(); ++i)
    EXPECT_NEAR(many.values[i], oracle::normal_pdf(grid.x(i), 0.3, 0.7), 1e-12);
}

TEST(Kde, MatchesDirectMixtureSum)
{
  Rng rng(31);
  auto centers = normal_samples(40, 0.0, 1.0, rng);
  auto grid = tabulate_normal(0, 1, -5, 5, 1024);
  auto q = kde_density({ centers, 0.13, 0 }, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    double ref = 0.0;
    for (double c : centers)
      ref += oracle::normal_pdf(grid.x(i), c, 0.13) / centers.size();
    ASSERT_NEAR(q.values[i], ref, 1e-12 + 1e-10 * ref);
  }
  EXPECT_LE(q.integral(), 1.0 + 1e-9);
}

TEST(Kde, RejectsBadBandwidth)
{
  auto grid = tabulate_normal(0, 1, -3, 3, 11);
  EXPECT_THROW(kde_density({ { 0.0, 1.0 }, 0.0, 0 }, grid), UsageError);
  EXPECT_THROW(kde_density({ { 0.0, 1.0 }, -1.0, 0 }, grid), UsageError);
}

TEST(CutTails, UniformUnchanged)
{
  DensityGrid g{ 0.0, 0.25, std::vector<double>(5, 1.0) };
  auto c = cut_tails(g);
  for (double v : c.values)
    EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(CutTails, TwoLevelExample)
{
  DensityGrid g{ 0.0, 1.0, { 1.9, 1.9, 0.05 } };
  auto c = cut_tails(g);
  EXPECT_EQ(c.values[2], 0.0);
  EXPECT_NEAR(c.values[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(c.values[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(c.integral(), 1.0, 1e-15);
}

TEST(CutTails, IdempotentAndNormalized)
{
  auto g = cut_tails(tabulate_normal(0.2, 0.8, -4, 4, 1024));
  EXPECT_NEAR(g.integral(), 1.0, 1e-6);
  auto again = cut_tails(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_NEAR(again.values[i], g.values[i], 1e-12);
  // the cut sits at |x - mu| = sigma sqrt(2 ln 20)
  const double edge = 0.8 * std::sqrt(2.0 * std::log(20.0));
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = std::abs(g.x(i) - 0.2);
    if (d > edge + g.dx)
      EXPECT_EQ(g.values[i], 0.0);
    if (d < edge - g.dx)
      EXPECT_GT(g.values[i], 0.0);
  }
}

TEST(CutTails, RejectsAllZero)
{
  EXPECT_THROW(cut_tails({ 0.0, 1.0, { 0, 0, 0 } }), UsageError);
}

TEST(KlGrid, IdenticalDensitiesGiveExactlyZero)
{
  auto p = cut_tails(tabulate_normal(0, 1, -4, 4, 512));
  auto r = kl_grid(p, p);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.floored, 0u);
}

TEST(KlGrid, MatchesClosedFormGaussianKl)
{
  auto p = tabulate_normal(0, 1, -12, 12, 4001);
  auto q = tabulate_normal(0.5, 1.5, -12, 12, 4001);
  EXPECT_NEAR(kl_grid(p, q).value, oracle::gaussian_kl(0, 1, 0.5, 1.5), 1e-6);
}

TEST(KlDivergence, NonNegativeForRandomInputs)
{
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const double mu = 2.0 * uniform01(rng) - 1.0;
    const double sd = 0.2 + uniform01(rng);
    auto p = cut_tails(tabulate_normal(mu, sd, -5, 5, 400));
    auto centers = normal_samples(2 + uniform_index(rng, 60), 0.0, 1.5, rng);
    const double sigma = 0.05 + 2.0 * uniform01(rng);
    auto r = kl_divergence(p, { centers, sigma, 0 });
    EXPECT_GE(r.value, -1e-6) << "trial " << trial;
  }
}

TEST(KlDivergence, ShiftedGaussianApproachesHalf)
{
  Rng rng(42);
  auto p = cut_tails(tabulate_normal(0, 1, -8, 8, 2048));
  const double sigma = 0.1;
  auto centers = normal_samples(100000, 1.0, 1.0, rng);
  const double kl = kl_divergence(p, { centers, sigma, 0 }, false).value;
  EXPECT_NEAR(kl, 0.5, 0.02);
  // same truncated p against the exact smoothed density N(1, 1 + sigma^2)
  auto q = tabulate_normal(1.0, std::sqrt(1 + sigma * sigma), -8, 8, 2048);
  EXPECT_NEAR(kl, kl_grid(p, q).value, 0.01);
}

TEST(KlDivergence, CalibratedSelfConsistency)
{
  Rng rng(43);
  auto p = tabulate_normal(0, 1, -6, 6, 1024);
  std::vector<std::vector<double>> samples{ normal_samples(20000, 0, 1, rng) };
  CalibrationOptions opt;
  opt.batch_sizes = { 10000 };
  opt.n_fsigma = 31;
  opt.n_avg = 2;
  opt.seed = 5;
  auto cal = find_fsigma(samples, { p }, opt);
  const double sigma = cal.table.sigma(0, 10000);
  auto centers = normal_samples(10000, 0, 1, rng);
  EXPECT_LT(kl_divergence(p, { centers, sigma, 0 }, false).value, 0.01);
}

class KlGradient : public ::testing::TestWithParam<int>
{};

TEST_P(KlGradient, MatchesFiniteDifferences)
{
  Rng rng(100 + GetParam());
  auto p = cut_tails(tabulate_normal(0, 1, -4, 4, 1024));
  auto centers = normal_samples(8, 0.0, 1.0, rng);
  const double sigma = 0.2 + 0.8 * uniform01(rng);
  auto r = kl_divergence(p, { centers, sigma, 0 });
  auto fd = oracle::central_difference(
    [&](const std::vector<double>& c) {
      return kl_divergence(p, { c, sigma, 0 }, false).value;
    },
    centers);
  EXPECT_LT(oracle::relative_error(r.grad, fd), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomCenters, KlGradient, ::testing::Range(0, 6));

TEST(KlDivergence, FloorsUnderflowedDensityAndFlags)
{
  auto p = cut_tails(tabulate_normal(0, 1, -4, 4, 256));
  auto r = kl_divergence(p, { { 50.0, 51.0 }, 0.01, 0 });
  EXPECT_GT(r.floored, 0u);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_GT(r.value, 100.0);
  for (double g : r.grad)
    EXPECT_TRUE(std::isfinite(g));
}

TEST(KlDivergence, GradientIsSkippedOnRequest)
{
  auto p = cut_tails(tabulate_normal(0, 1, -4, 4, 256));
  auto r = kl_divergence(p, { { -0.1, 0.2 }, 0.3, 0 }, false);
  EXPECT_TRUE(r.grad.empty());
}

TEST(Logspace, CalibrationGridEndpoints)
{
  auto a = logspace(-1, 2, 200);
  ASSERT_EQ(a.size(), 200u);
  EXPECT_DOUBLE_EQ(a.front(), 0.1);
  EXPECT_DOUBLE_EQ(a.back(), 100.0);
  for (std::size_t i = 1; i < a.size(); ++i)
    EXPECT_NEAR(a[i] / a[i - 1], std::pow(10.0, 3.0 / 199.0), 1e-12);
}

TEST(FindFsigma, GaussianMinimumIsInterior)
{
  Rng rng(51);
  auto p = cut_tails(tabulate_normal(0, 1, -6, 6, 1024));
  std::vector<std::vector<double>> samples{ normal_samples(20000, 0, 1, rng) };
  CalibrationOptions opt;
  opt.batch_sizes = { 256 };
  opt.n_fsigma = 60;
  opt.n_avg = 20;
  auto cal = find_fsigma(samples, { p }, opt);
  const double f = cal.table.lookup(0, 256).f_sigma;
  EXPECT_GT(f, cal.table.grid.front());
  EXPECT_LT(f, cal.table.grid.back());
  EXPECT_NEAR(cal.table.lookup(0, 256).std_s, 1.0, 0.03);
}

TEST(FindFsigma, LargerBatchesPreferNarrowerKernels)
{
  Rng rng(52);
  auto p = cut_tails(tabulate_normal(0, 1, -6, 6, 1024));
  std::vector<std::vector<double>> samples{ normal_samples(20000, 0, 1, rng) };
  CalibrationOptions opt;
  opt.batch_sizes = { 64, 1024 };
  opt.n_fsigma = 60;
  opt.n_avg = 10;
  auto cal = find_fsigma(samples, { p }, opt);
  EXPECT_GE(cal.table.lookup(0, 1024).f_sigma, cal.table.lookup(0, 64).f_sigma);
}

TEST(FindFsigma, DeterministicUnderSeed)
{
  Rng rng(53);
  auto p = cut_tails(tabulate_normal(0, 1, -6, 6, 256));
  std::vector<std::vector<double>> samples{ normal_samples(2000, 0, 1, rng) };
  CalibrationOptions opt;
  opt.batch_sizes = { 32 };
  opt.n_fsigma = 20;
  opt.n_avg = 5;
  opt.seed = 9;
  auto a = find_fsigma(samples, { p }, opt);
  auto b = find_fsigma(samples, { p }, opt);
  EXPECT_EQ(a.curves[0].mean_kl, b.curves[0].mean_kl);
  EXPECT_EQ(a.table.entries[0].f_sigma, b.table.entries[0].f_sigma);
}

TEST(FindFsigma, DegenerateStatisticIsNamed)
{
  auto p = cut_tails(tabulate_normal(0, 1, -6, 6, 64));
  std::vector<std::vector<double>> samples{ { 1, 2, 3 },
                                            std::vector<double>(10, 4.0) };
  CalibrationOptions opt;
  opt.batch_sizes = { 2 };
  opt.n_fsigma = 3;
  opt.n_avg = 1;
  try {
    find_fsigma(samples, { p, p }, opt);
    FAIL() << "expected a degenerate-statistic error";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("statistic 1"), std::string::npos);
  }
}

TEST(FsigmaTable, TextRoundTrip)
{
  FsigmaTable t;
  t.grid = logspace(-1, 2, 5);
  t.entries = { { 0, 256, 3.1622776601683795, 0.123 },
                { 7, 64, 0.1, 1e-3 } };
  std::ostringstream os;
  t.write(os, "config_hash=abc");
  EXPECT_NE(os.str().find("s n_batch f_sigma_star std_s\n"), std::string::npos);
  std::istringstream is(os.str());
  auto u = FsigmaTable::read(is);
  ASSERT_EQ(u.entries.size(), 2u);
  EXPECT_EQ(u.entries[0].f_sigma, t.entries[0].f_sigma);
  EXPECT_EQ(u.entries[1].std_s, t.entries[1].std_s);
  EXPECT_EQ(u.entries[1].n_batch, 64u);
  EXPECT_DOUBLE_EQ(u.sigma(0, 256), 0.123 / 3.1622776601683795);
}

TEST(FsigmaTable, MissingEntryNamesStatisticAndBatch)
{
  FsigmaTable t;
  t.entries = { { 0, 256, 1.0, 1.0 } };
  try {
    t.sigma(3, 128);
    FAIL() << "expected a lookup error";
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("statistic 3"), std::string::npos);
    EXPECT_NE(msg.find("128"), std::string::npos);
  }
}

TEST(FsigmaTable, RejectsOutOfRangeEntries)
{
  std::istringstream is("s n_batch f_sigma_star std_s\n0 256 500 1\n");
  EXPECT_THROW(FsigmaTable::read(is), UsageError);
  std::istringstream bad("nonsense\n");
  EXPECT_THROW(FsigmaTable::read(bad), UsageError);
}
