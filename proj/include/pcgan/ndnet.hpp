#pragma once

// Small reverse-mode network library: dense, embedding, dropout and
// elementwise activation layers evaluated on row-major minibatches, with a
// per-call tape for the backward pass and an Adam optimizer.

#include "error.hpp"
#include "rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pcgan::nn {

using RowMatrix =
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

//! Dense array of doubles with a shape. Rank-2 tensors are (rows, cols)
//! minibatches; `node` is the tape entry that produced the tensor, absent
//! for constants.
struct Tensor
{
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::optional<std::size_t> node;

  Tensor() = default;

  Tensor(std::vector<std::size_t> shape_, std::vector<double> values_)
    : shape(std::move(shape_))
    , values(std::move(values_))
  {
    std::size_t n = std::accumulate(
      shape.begin(), shape.end(), std::size_t{ 1 }, std::multiplies<>());
    if (shape.empty() || n != values.size())
      throw UsageError("tensor shape does not match value count");
  }

  static Tensor zeros(std::size_t rows, std::size_t cols)
  {
    return Tensor({ rows, cols }, std::vector<double>(rows * cols, 0.0));
  }

  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t cols() const { return rows() == 0 ? 0 : values.size() / rows(); }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const
  {
    return values[r * cols() + c];
  }

  std::span<double> row(std::size_t r)
  {
    return { values.data() + r * cols(), cols() };
  }
  std::span<const double> row(std::size_t r) const
  {
    return { values.data() + r * cols(), cols() };
  }
};

enum class LayerKind
{
  dense,
  embedding,
  dropout,
  activation
};

enum class Activation
{
  none,
  relu,
  leaky_relu,
  tanh,
  sigmoid
};

enum class Mode
{
  train,
  eval
};

//! One entry of an MlpSpec. For an embedding, `in` is the number of
//! classes (the layer consumes one class index per row) and `out` the
//! embedding width. Dense layers may carry a fused activation.
struct Layer
{
  LayerKind kind = LayerKind::dense;
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::none;
  double alpha = 0.2;
  double rate = 0.0;

  static Layer dense(std::size_t in,
                     std::size_t out,
                     Activation act = Activation::none,
                     double alpha = 0.2)
  {
    return { LayerKind::dense, in, out, act, alpha, 0.0 };
  }
  static Layer embedding(std::size_t classes, std::size_t width)
  {
    return { LayerKind::embedding, classes, width, Activation::none, 0.2, 0.0 };
  }
  static Layer dropout(std::size_t width, double rate)
  {
    return { LayerKind::dropout, width, width, Activation::none, 0.2, rate };
  }
  static Layer activation_layer(std::size_t width,
                                Activation act,
                                double alpha = 0.2)
  {
    return { LayerKind::activation, width, width, act, alpha, 0.0 };
  }

  std::size_t parameter_count() const
  {
    switch (kind) {
      case LayerKind::dense:
        return in * out + out;
      case LayerKind::embedding:
        return in * out;
      default:
        return 0;
    }
  }

  //! Width of the tensor this layer consumes.
  std::size_t input_width() const
  {
    return kind == LayerKind::embedding ? 1 : in;
  }
};

struct MlpSpec
{
  std::vector<Layer> layers;

  MlpSpec() = default;
  explicit MlpSpec(std::vector<Layer> layers_)
    : layers(std::move(layers_))
  {
    validate();
  }

  void validate() const
  {
    if (layers.empty())
      throw UsageError("network specification has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.in == 0 || l.out == 0)
        throw UsageError("layer " + std::to_string(i) + " has zero width");
      if ((l.kind == LayerKind::dropout || l.kind == LayerKind::activation) &&
          l.in != l.out)
        throw UsageError("layer " + std::to_string(i) +
                         " must preserve its width");
      if (l.kind == LayerKind::dropout && !(l.rate >= 0.0 && l.rate < 1.0))
        throw UsageError("dropout rate must lie in [0, 1)");
      if (l.kind == LayerKind::embedding && i != 0)
        throw UsageError("an embedding must be the first layer");
      if (i > 0 && layers[i - 1].out != l.input_width())
        throw UsageError("layer " + std::to_string(i) +
                         " width is incompatible with its predecessor");
    }
  }

  std::size_t input_width() const { return layers.front().input_width(); }
  std::size_t output_width() const { return layers.back().out; }

  std::size_t parameter_count() const
  {
    std::size_t n = 0;
    for (const auto& l : layers)
      n += l.parameter_count();
    return n;
  }

  //! Compact topology string stored with serialized parameters.
  std::string describe() const
  {
    static const char* kinds[] = { "dense", "embedding", "dropout", "act" };
    static const char* acts[] = { "none", "relu", "lrelu", "tanh", "sigmoid" };
    std::string s;
    for (const auto& l : layers) {
      if (!s.empty())
        s += ' ';
      s += kinds[static_cast<int>(l.kind)];
      s += ':' + std::to_string(l.in) + ':' + std::to_string(l.out) + ':';
      s += acts[static_cast<int>(l.activation)];
    }
    return s;
  }
};

namespace detail {

// Eigen selects vectorized kernels from operand alignment, so products on
// arbitrary heap buffers can round differently from one allocation to the
// next. Products run on these owned, always max-aligned copies instead.
struct ProductScratch
{
  RowMatrix a, b, c;
};

inline ProductScratch&
product_scratch()
{
  thread_local ProductScratch s;
  return s;
}

inline void
apply_activation(Activation act, double alpha, std::span<double> v)
{
  switch (act) {
    case Activation::none:
      return;
    case Activation::relu:
      for (auto& x : v)
        x = x > 0.0 ? x : 0.0;
      return;
    case Activation::leaky_relu:
      for (auto& x : v)
        x = x > 0.0 ? x : alpha * x;
      return;
    case Activation::tanh:
      for (auto& x : v)
        x = std::tanh(x);
      return;
    case Activation::sigmoid:
      for (auto& x : v)
        x = 1.0 / (1.0 + std::exp(-x));
      return;
  }
}

// Multiplies `grad` in place by the activation derivative, expressed in
// terms of the activation output. Leaky slope alpha > 0 keeps sign(y) ==
// sign(pre-activation).
inline void
activation_backward(Activation act,
                    double alpha,
                    std::span<const double> y,
                    std::span<double> grad)
{
  switch (act) {
    case Activation::none:
      return;
    case Activation::relu:
      for (std::size_t i = 0; i < y.size(); ++i)
        grad[i] = y[i] > 0.0 ? grad[i] : 0.0;
      return;
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < y.size(); ++i)
        grad[i] = y[i] > 0.0 ? grad[i] : alpha * grad[i];
      return;
    case Activation::tanh:
      for (std::size_t i = 0; i < y.size(); ++i)
        grad[i] *= 1.0 - y[i] * y[i];
      return;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < y.size(); ++i)
        grad[i] *= y[i] * (1.0 - y[i]);
      return;
  }
}

inline void
check_finite(std::span<const double> v, std::size_t layer)
{
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericalError("non-finite activation in layer " +
                           std::to_string(layer));
}

} // namespace detail

//! Everything the backward pass needs from one forward call. Buffers keep
//! their capacity when a tape is reused for another forward call.
struct Tape
{
  MlpSpec spec;
  std::vector<double> params;
  std::size_t batch = 0;
  std::vector<double> input;
  //! outputs[i]: tensor leaving layer i (the input of layer i + 1).
  std::vector<std::vector<double>> outputs;
  //! Dropout multipliers (0 or 1/keep) per layer; empty outside training.
  std::vector<std::vector<double>> masks;

  const std::vector<double>& layer_input(std::size_t i) const
  {
    return i == 0 ? input : outputs[i - 1];
  }
};

struct ForwardResult
{
  Tensor output;
  Tape tape;
};

struct Gradients
{
  std::vector<double> params;
  Tensor input;
};

//! Runs the network on a (batch, input_width) tensor, reusing the buffers
//! of `res`. Dropout masks are drawn from `rng` in train mode only; eval
//! mode never touches it.
inline void
forward(const MlpSpec& spec,
        std::span<const double> params,
        const Tensor& input,
        Mode mode,
        Rng* rng,
        ForwardResult& res)
{
  if (params.size() != spec.parameter_count())
    throw UsageError("parameter vector length does not match network");
  if (input.shape.size() != 2 || input.cols() != spec.input_width())
    throw UsageError("input width does not match network");

  Tape& tape = res.tape;
  if (tape.spec.layers.size() != spec.layers.size() ||
      tape.spec.describe() != spec.describe())
    tape.spec = spec;
  tape.params.assign(params.begin(), params.end());
  tape.batch = input.rows();
  tape.input.assign(input.values.begin(), input.values.end());
  tape.outputs.resize(spec.layers.size());
  tape.masks.resize(spec.layers.size());
  const std::size_t n = tape.batch;

  std::size_t offset = 0;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const Layer& l = spec.layers[li];
    const std::vector<double>& cur = tape.layer_input(li);
    std::vector<double>& next = tape.outputs[li];
    std::vector<double>& mask = tape.masks[li];
    mask.clear();
    switch (l.kind) {
      case LayerKind::dense: {
        next.resize(n * l.out);
        auto& ps = detail::product_scratch();
        ps.a = ConstMatrixMap(cur.data(), n, l.in);
        ps.b = ConstMatrixMap(params.data() + offset, l.out, l.in);
        ps.c.noalias() = ps.a * ps.b.transpose();
        Eigen::Map<const Eigen::RowVectorXd> b(
          params.data() + offset + l.in * l.out, l.out);
        MatrixMap y(next.data(), n, l.out);
        y = ps.c;
        y.rowwise() += b;
        detail::apply_activation(l.activation, l.alpha, next);
        break;
      }
      case LayerKind::embedding: {
        next.resize(n * l.out);
        for (std::size_t r = 0; r < n; ++r) {
          double c = cur[r];
          if (!(c >= 0.0) || c != std::floor(c) ||
              c >= static_cast<double>(l.in))
            throw UsageError("embedding index out of range");
          const double* src =
            params.data() + offset + static_cast<std::size_t>(c) * l.out;
          std::copy(src, src + l.out, next.begin() + r * l.out);
        }
        break;
      }
      case LayerKind::dropout: {
        next.assign(cur.begin(), cur.end());
        if (mode == Mode::train && l.rate > 0.0) {
          if (rng == nullptr)
            throw UsageError("train-mode dropout requires a random generator");
          const double keep = 1.0 - l.rate;
          mask.resize(next.size());
          for (std::size_t i = 0; i < next.size(); ++i) {
            mask[i] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
            next[i] *= mask[i];
          }
        }
        break;
      }
      case LayerKind::activation:
        next.assign(cur.begin(), cur.end());
        detail::apply_activation(l.activation, l.alpha, next);
        break;
    }
    detail::check_finite(next, li);
    offset += l.parameter_count();
  }

  res.output.shape = { n, spec.output_width() };
  res.output.values.assign(tape.outputs.back().begin(),
                           tape.outputs.back().end());
  res.output.node = spec.layers.size() - 1;
}

inline ForwardResult
forward(const MlpSpec& spec,
        std::span<const double> params,
        const Tensor& input,
        Mode mode,
        Rng* rng = nullptr)
{
  ForwardResult res;
  forward(spec, params, input, mode, rng, res);
  return res;
}

//! Reverse pass: gradient of a scalar loss with respect to every parameter
//! and every input entry, given d(loss)/d(output). Embedding inputs are
//! class indices and receive zero gradient. Writes into `g`, reusing its
//! buffers.
inline void
backward(const Tape& tape, const Tensor& output_grad, Gradients& g)
{
  const MlpSpec& spec = tape.spec;
  const std::size_t n = tape.batch;
  if (output_grad.values.size() != n * spec.output_width())
    throw UsageError("output gradient shape does not match tape");

  g.params.assign(tape.params.size(), 0.0);
  thread_local std::vector<double> grad;
  thread_local std::vector<double> dx;
  grad.assign(output_grad.values.begin(), output_grad.values.end());

  std::size_t offset = tape.params.size();
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const Layer& l = spec.layers[li];
    offset -= l.parameter_count();
    switch (l.kind) {
      case LayerKind::dense: {
        detail::activation_backward(
          l.activation, l.alpha, tape.outputs[li], grad);
        auto& ps = detail::product_scratch();
        ps.a = ConstMatrixMap(grad.data(), n, l.out);
        ps.b = ConstMatrixMap(tape.layer_input(li).data(), n, l.in);
        ps.c.noalias() = ps.a.transpose() * ps.b;
        MatrixMap dw(g.params.data() + offset, l.out, l.in);
        dw += ps.c;
        double* db = g.params.data() + offset + l.in * l.out;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < l.out; ++j)
            db[j] += grad[r * l.out + j];
        ps.b = ConstMatrixMap(tape.params.data() + offset, l.out, l.in);
        ps.c.noalias() = ps.a * ps.b;
        dx.resize(n * l.in);
        MatrixMap(dx.data(), n, l.in) = ps.c;
        std::swap(grad, dx);
        break;
      }
      case LayerKind::embedding: {
        for (std::size_t r = 0; r < n; ++r) {
          auto c = static_cast<std::size_t>(tape.input[r]);
          double* dst = g.params.data() + offset + c * l.out;
          for (std::size_t j = 0; j < l.out; ++j)
            dst[j] += grad[r * l.out + j];
        }
        grad.assign(n, 0.0);
        break;
      }
      case LayerKind::dropout:
        if (!tape.masks[li].empty())
          for (std::size_t i = 0; i < grad.size(); ++i)
            grad[i] *= tape.masks[li][i];
        break;
      case LayerKind::activation:
        detail::activation_backward(
          l.activation, l.alpha, tape.outputs[li], grad);
        break;
    }
  }
  g.input.shape = { n, spec.input_width() };
  g.input.values.assign(grad.begin(), grad.end());
  g.input.node.reset();
}

inline Gradients
backward(const Tape& tape, const Tensor& output_grad)
{
  Gradients g;
  backward(tape, output_grad, g);
  return g;
}

//! Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for dense weights and biases,
//! standard normal for embedding tables.
inline std::vector<double>
init_params(const MlpSpec& spec, Rng& rng)
{
  std::vector<double> p;
  p.reserve(spec.parameter_count());
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::dense) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
      for (std::size_t i = 0; i < l.parameter_count(); ++i)
        p.push_back(bound * (2.0 * uniform01(rng) - 1.0));
    } else if (l.kind == LayerKind::embedding) {
      for (std::size_t i = 0; i < l.parameter_count(); ++i)
        p.push_back(standard_normal(rng));
    }
  }
  return p;
}

//! Offset of layer `index` inside the flat parameter vector.
inline std::size_t
parameter_offset(const MlpSpec& spec, std::size_t index)
{
  std::size_t off = 0;
  for (std::size_t i = 0; i < index; ++i)
    off += spec.layers[i].parameter_count();
  return off;
}

struct AdamState
{
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;

  static AdamState make(std::size_t n, double lr, double beta1, double beta2)
  {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    return s;
  }
};

//! Bias-corrected Adam update, in place.
inline void
adam_step(std::span<double> params, std::span<const double> grads, AdamState& s)
{
  if (params.size() != grads.size() || params.size() != s.m.size() ||
      params.size() != s.v.size())
    throw UsageError("adam: parameter, gradient and state lengths differ");
  for (double g : grads)
    if (!std::isfinite(g))
      throw NumericalError("adam: non-finite gradient");
  s.t += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

} // namespace pcgan::nn
