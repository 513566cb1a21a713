#include "oracles.hpp"

#include "pcgan/ndnet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace pcgan;
using nn::Activation;
using nn::Layer;
using nn::MlpSpec;
using nn::Mode;
using nn::Tensor;

namespace {

Tensor
random_tensor(std::size_t rows, std::size_t cols, Rng& rng)
{
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& v : t.values)
    v = 2.0 * uniform01(rng) - 1.0;
  return t;
}

// Scalar loss sum_ij c_ij y_ij for a fixed random cotangent c.
struct Probe
{
  MlpSpec spec;
  std::vector<double> params;
  Tensor input;
  Tensor cot;
  Mode mode = Mode::eval;
  std::uint64_t mask_seed = 7;

  double loss(const std::vector<double>& p, const Tensor& x) const
  {
    Rng rng(mask_seed);
    auto out = nn::forward(spec, p, x, mode, &rng).output;
    double s = 0.0;
    for (std::size_t i = 0; i < out.values.size(); ++i)
      s += cot.values[i] * out.values[i];
    return s;
  }

  nn::Gradients grads() const
  {
    Rng rng(mask_seed);
    auto fr = nn::forward(spec, params, input, mode, &rng);
    return nn::backward(fr.tape, cot);
  }
};

Probe
make_probe(MlpSpec spec, std::size_t batch, std::uint64_t seed, Mode mode)
{
  Rng rng(seed);
  Probe p;
  p.params = nn::init_params(spec, rng);
  if (spec.layers.front().kind == nn::LayerKind::embedding) {
    p.input = Tensor::zeros(batch, 1);
    for (auto& v : p.input.values)
      v = static_cast<double>(uniform_index(rng, spec.layers.front().in));
  } else {
    p.input = random_tensor(batch, spec.input_width(), rng);
  }
  p.cot = random_tensor(batch, spec.output_width(), rng);
  p.spec = std::move(spec);
  p.mode = mode;
  return p;
}

void
expect_gradients_match(const Probe& p, bool check_input = true)
{
  auto g = p.grads();
  auto fd_p = oracle::central_difference(
    [&](const std::vector<double>& q) { return p.loss(q, p.input); },
    p.params);
  EXPECT_LT(oracle::relative_error(g.params, fd_p), 1e-4);
  if (check_input) {
    auto fd_x = oracle::central_difference(
      [&](const std::vector<double>& xv) {
        Tensor x = p.input;
        x.values = xv;
        return p.loss(p.params, x);
      },
      p.input.values);
    EXPECT_LT(oracle::relative_error(g.input.values, fd_x), 1e-4);
  }
}

} // namespace

TEST(Forward, IdentityDenseLayer)
{
  MlpSpec spec({ Layer::dense(2, 2) });
  std::vector<double> p{ 1, 0, 0, 1, 0, 0 };
  auto out = nn::forward(spec, p, Tensor({ 1, 2 }, { 1, 2 }), Mode::eval);
  EXPECT_EQ(out.output.values, (std::vector<double>{ 1, 2 }));
}

TEST(Forward, AffineEvaluation)
{
  MlpSpec spec({ Layer::dense(2, 1) });
  std::vector<double> p{ 1, 1, 0.5 };
  auto out = nn::forward(spec, p, Tensor({ 1, 2 }, { 2, 3 }), Mode::eval);
  EXPECT_DOUBLE_EQ(out.output.values[0], 5.5);
}

TEST(Forward, EvalDropoutIsIdentity)
{
  MlpSpec spec({ Layer::dropout(3, 0.2) });
  auto out = nn::forward(spec, {}, Tensor({ 1, 3 }, { 1, 1, 1 }), Mode::eval);
  EXPECT_EQ(out.output.values, (std::vector<double>{ 1, 1, 1 }));
}

TEST(Forward, RejectsShapeMismatch)
{
  MlpSpec spec({ Layer::dense(3, 2) });
  std::vector<double> p(spec.parameter_count(), 0.1);
  EXPECT_THROW(nn::forward(spec, p, Tensor({ 1, 2 }, { 1, 2 }), Mode::eval),
               UsageError);
  p.pop_back();
  EXPECT_THROW(nn::forward(spec, p, Tensor({ 1, 3 }, { 1, 2, 3 }), Mode::eval),
               UsageError);
  EXPECT_THROW(Tensor({ 2, 2 }, { 1, 2, 3 }), UsageError);
}

TEST(Forward, RejectsNonFiniteActivations)
{
  MlpSpec spec({ Layer::dense(1, 1) });
  std::vector<double> p{ 1.0, 0.0 };
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(nn::forward(spec, p, Tensor({ 1, 1 }, { inf }), Mode::eval),
               NumericalError);
}

TEST(Forward, TrainDropoutNeedsGenerator)
{
  MlpSpec spec({ Layer::dropout(2, 0.5) });
  EXPECT_THROW(nn::forward(spec, {}, Tensor({ 1, 2 }, { 1, 1 }), Mode::train),
               UsageError);
}

TEST(Spec, RejectsIncompatibleWidths)
{
  EXPECT_THROW(MlpSpec({ Layer::dense(2, 3), Layer::dense(4, 1) }),
               UsageError);
  EXPECT_THROW(MlpSpec({ Layer::dropout(2, 1.0) }), UsageError);
  EXPECT_THROW(MlpSpec({ Layer::dense(2, 2), Layer::embedding(2, 2) }),
               UsageError);
}

TEST(Backward, IdentityPassesGradientThrough)
{
  MlpSpec spec({ Layer::activation_layer(1, Activation::none) });
  auto fr = nn::forward(spec, {}, Tensor({ 1, 1 }, { 0.3 }), Mode::eval);
  auto g = nn::backward(fr.tape, Tensor({ 1, 1 }, { 1.0 }));
  EXPECT_DOUBLE_EQ(g.input.values[0], 1.0);
}

TEST(Backward, TanhSlopeAtZero)
{
  MlpSpec spec({ Layer::activation_layer(1, Activation::tanh) });
  auto fr = nn::forward(spec, {}, Tensor({ 1, 1 }, { 0.0 }), Mode::eval);
  auto g = nn::backward(fr.tape, Tensor({ 1, 1 }, { 1.0 }));
  EXPECT_DOUBLE_EQ(g.input.values[0], 1.0);
}

TEST(Backward, RejectsGradientShapeMismatch)
{
  MlpSpec spec({ Layer::dense(2, 2) });
  Rng rng(1);
  auto p = nn::init_params(spec, rng);
  auto fr = nn::forward(spec, p, Tensor({ 1, 2 }, { 1, 2 }), Mode::eval);
  EXPECT_THROW(nn::backward(fr.tape, Tensor({ 1, 1 }, { 1 })), UsageError);
}

class DenseActivation : public ::testing::TestWithParam<Activation>
{};

TEST_P(DenseActivation, TwoLayerNetMatchesFiniteDifferences)
{
  MlpSpec spec({ Layer::dense(4, 6, GetParam()), Layer::dense(6, 3, GetParam()) });
  expect_gradients_match(make_probe(spec, 5, 11, Mode::eval));
}

INSTANTIATE_TEST_SUITE_P(AllActivations,
                         DenseActivation,
                         ::testing::Values(Activation::none,
                                           Activation::relu,
                                           Activation::leaky_relu,
                                           Activation::tanh,
                                           Activation::sigmoid));

TEST(Backward, StandaloneActivationLayers)
{
  MlpSpec spec({ Layer::dense(3, 4),
                 Layer::activation_layer(4, Activation::sigmoid),
                 Layer::dense(4, 4),
                 Layer::activation_layer(4, Activation::leaky_relu, 0.1),
                 Layer::dense(4, 2),
                 Layer::activation_layer(2, Activation::tanh) });
  expect_gradients_match(make_probe(spec, 4, 5, Mode::eval));
}

TEST(Backward, EmbeddingBranch)
{
  MlpSpec spec({ Layer::embedding(5, 4), Layer::dense(4, 3, Activation::relu) });
  auto p = make_probe(spec, 6, 21, Mode::eval);
  expect_gradients_match(p, false);
  auto g = p.grads();
  for (double v : g.input.values)
    EXPECT_EQ(v, 0.0);
}

TEST(Backward, UnusedEmbeddingRowsGetZeroGradient)
{
  MlpSpec spec({ Layer::embedding(4, 2), Layer::dense(2, 1) });
  Rng rng(3);
  auto p = nn::init_params(spec, rng);
  auto fr = nn::forward(spec, p, Tensor({ 2, 1 }, { 1, 1 }), Mode::eval);
  auto g = nn::backward(fr.tape, Tensor({ 2, 1 }, { 1, 1 }));
  for (std::size_t row : { 0, 2, 3 })
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_EQ(g.params[row * 2 + j], 0.0);
  EXPECT_NE(g.params[2], 0.0);
}

TEST(Backward, TrainModeDropoutWithFixedMask)
{
  MlpSpec spec({ Layer::dense(3, 8, Activation::tanh),
                 Layer::dropout(8, 0.3),
                 Layer::dense(8, 2) });
  expect_gradients_match(make_probe(spec, 7, 9, Mode::train));
}

TEST(Backward, BufferReuseGivesSameResult)
{
  MlpSpec spec({ Layer::dense(3, 5, Activation::relu), Layer::dense(5, 2) });
  Rng rng(4);
  auto p = nn::init_params(spec, rng);
  auto a = random_tensor(6, 3, rng);
  auto b = random_tensor(2, 3, rng);
  nn::ForwardResult fr;
  nn::forward(spec, p, a, Mode::eval, nullptr, fr);
  nn::forward(spec, p, b, Mode::eval, nullptr, fr);
  auto fresh = nn::forward(spec, p, b, Mode::eval);
  EXPECT_EQ(fr.output.values, fresh.output.values);
  nn::Gradients g;
  auto cot = random_tensor(2, 2, rng);
  nn::backward(fr.tape, cot, g);
  auto gf = nn::backward(fresh.tape, cot);
  EXPECT_EQ(g.params, gf.params);
  EXPECT_EQ(g.input.values, gf.input.values);
}

TEST(Forward, DeterministicUnderFixedSeed)
{
  MlpSpec spec({ Layer::dense(4, 16, Activation::relu),
                 Layer::dropout(16, 0.2),
                 Layer::dense(16, 1) });
  Rng init(8);
  auto p = nn::init_params(spec, init);
  auto x = random_tensor(32, 4, init);
  Rng r1(99), r2(99);
  auto a = nn::forward(spec, p, x, Mode::train, &r1).output.values;
  auto b = nn::forward(spec, p, x, Mode::train, &r2).output.values;
  EXPECT_EQ(a, b);
}

TEST(Forward, InvertedDropoutExpectationMatchesEval)
{
  MlpSpec spec({ Layer::dropout(1, 0.2) });
  const int n = 20000;
  Rng rng(12);
  Tensor x({ 1, 1 }, { 1.0 });
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double y = nn::forward(spec, {}, x, Mode::train, &rng).output.values[0];
    sum += y;
    sumsq += y * y;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sumsq / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - 1.0), 3.0 * se);
}

TEST(Adam, ZeroGradientLeavesParametersAndCountsStep)
{
  std::vector<double> p{ 0.5, -1.0 };
  auto s = nn::AdamState::make(2, 0.1, 0.9, 0.99);
  nn::adam_step(p, std::vector<double>{ 0.0, 0.0 }, s);
  EXPECT_EQ(p, (std::vector<double>{ 0.5, -1.0 }));
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
  std::vector<double> p{ 0.0 };
  auto s = nn::AdamState::make(1, 0.1, 0.9, 0.99);
  nn::adam_step(p, std::vector<double>{ 1.0 }, s);
  EXPECT_NEAR(p[0], -0.1, 1e-6);
}

TEST(Adam, ConstantGradientKeepsDecreasing)
{
  std::vector<double> p{ 0.0 };
  auto s = nn::AdamState::make(1, 0.1, 0.9, 0.99);
  nn::adam_step(p, std::vector<double>{ 1.0 }, s);
  const double first = p[0];
  nn::adam_step(p, std::vector<double>{ 1.0 }, s);
  EXPECT_LT(first, 0.0);
  EXPECT_LT(p[0], first);
}

TEST(Adam, RejectsNonFiniteGradient)
{
  std::vector<double> p{ 0.0 };
  auto s = nn::AdamState::make(1, 0.1, 0.9, 0.99);
  EXPECT_THROW(
    nn::adam_step(p, std::vector<double>{ std::nan("") }, s), NumericalError);
  EXPECT_THROW(nn::adam_step(p, std::vector<double>{ 1.0, 2.0 }, s),
               UsageError);
}
