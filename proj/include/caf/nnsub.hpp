#pragma once

// Sequential dense networks with hand-written backpropagation and Adam.
//
// Batches are column-major: an input batch is a (input_dim x B) matrix whose
// columns are samples. All arithmetic is double precision.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "caf/detail/bytes.hpp"
#include "caf/error.hpp"
#include "caf/rng.hpp"

namespace caf {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace nn {

enum class Activation : std::uint32_t { relu = 0, tanh = 1, gelu = 2 };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::gelu: return "gelu";
  }
  return "unknown";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "'");
}

/// Weights and biases for every layer. Also used for gradients and Adam moments,
/// which mirror the parameter shapes exactly.
struct ParamSet {
  std::vector<Mat> weights;  // layer l: (dims[l+1] x dims[l])
  std::vector<Vec> biases;   // layer l: dims[l+1]

  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& w : weights) z.weights.push_back(Mat::Zero(w.rows(), w.cols()));
    for (const auto& b : biases) z.biases.push_back(Vec::Zero(b.size()));
    return z;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
    for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return true;
  }

  bool all_zero() const {
    for (const auto& w : weights)
      if ((w.array() != 0.0).any()) return false;
    for (const auto& b : biases)
      if ((b.array() != 0.0).any()) return false;
    return true;
  }

  bool same_shape(const ParamSet& o) const {
    if (weights.size() != o.weights.size() || biases.size() != o.biases.size()) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != o.weights[l].rows() || weights[l].cols() != o.weights[l].cols()) return false;
      if (biases[l].size() != o.biases[l].size()) return false;
    }
    return true;
  }

  /// Visits every scalar in a fixed order: per layer, weights row-major then biases.
  template <typename F>
  void for_each(F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (Eigen::Index r = 0; r < weights[l].rows(); ++r)
        for (Eigen::Index c = 0; c < weights[l].cols(); ++c) f(weights[l](r, c));
      for (Eigen::Index i = 0; i < biases[l].size(); ++i) f(biases[l](i));
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    const_cast<ParamSet*>(this)->for_each([&](double& x) { f(static_cast<const double&>(x)); });
  }

  ParamSet& operator+=(const ParamSet& o) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += o.weights[l];
      biases[l] += o.biases[l];
    }
    return *this;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t l = 0; l < a.weights.size(); ++l)
      if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
    return true;
  }
};

class MlpModel {
 public:
  MlpModel() = default;

  /// Builds a model with deterministic initialization: He-uniform for relu/gelu,
  /// Xavier-uniform for tanh, zero biases.
  MlpModel(std::vector<int> layer_dims, Activation activation, std::uint64_t seed)
      : dims_(std::move(layer_dims)), activation_(activation), seed_(seed) {
    validate_dims(dims_);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const int fan_in = dims_[l], fan_out = dims_[l + 1];
      const double bound = activation_ == Activation::tanh ? std::sqrt(6.0 / (fan_in + fan_out))
                                                           : std::sqrt(6.0 / fan_in);
      CounterRng rng(seed_, l);
      Mat w(fan_out, fan_in);
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) w(r, c) = rng.uniform(-bound, bound);
      params_.weights.push_back(std::move(w));
      params_.biases.push_back(Vec::Zero(fan_out));
    }
  }

  static MlpModel zeros(std::vector<int> layer_dims, Activation activation) {
    MlpModel m(std::move(layer_dims), activation, 0);
    m.params_ = m.params_.zeros_like();
    return m;
  }

  /// Model with explicit parameters; shapes are checked against layer_dims.
  static MlpModel from_params(std::vector<int> layer_dims, Activation activation, std::uint64_t seed,
                              ParamSet params) {
    MlpModel m = zeros(std::move(layer_dims), activation);
    m.seed_ = seed;
    if (!params.same_shape(m.params_)) throw ShapeError("parameter shapes do not match layer_dims");
    m.params_ = std::move(params);
    return m;
  }

  /// input -> `hidden_layers` x `hidden_units` -> output.
  static MlpModel dense(int input_dim, int output_dim, int hidden_layers, int hidden_units,
                        Activation activation, std::uint64_t seed) {
    std::vector<int> dims{input_dim};
    for (int i = 0; i < hidden_layers; ++i) dims.push_back(hidden_units);
    dims.push_back(output_dim);
    return MlpModel(std::move(dims), activation, seed);
  }

  const std::vector<int>& layer_dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  std::size_t num_layers() const { return dims_.size() - 1; }
  Activation activation() const { return activation_; }
  std::uint64_t seed() const { return seed_; }

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  friend bool operator==(const MlpModel& a, const MlpModel& b) {
    return a.dims_ == b.dims_ && a.activation_ == b.activation_ && a.seed_ == b.seed_ &&
           a.params_ == b.params_;
  }

 private:
  static void validate_dims(const std::vector<int>& dims) {
    if (dims.size() < 2) throw ShapeError("an MLP needs at least input and output dims");
    for (int d : dims)
      if (d <= 0) throw ShapeError("layer dims must be positive");
  }

  std::vector<int> dims_;
  Activation activation_ = Activation::relu;
  std::uint64_t seed_ = 0;
  ParamSet params_;
};

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Mat activate(Activation a, const Mat& pre) {
  switch (a) {
    case Activation::relu: return pre.cwiseMax(0.0);
    case Activation::tanh: return pre.array().tanh().matrix();
    case Activation::gelu: return pre.unaryExpr([](double x) { return gelu(x); });
  }
  return pre;
}

/// Multiplies `delta` in place by the activation derivative.
inline void apply_activation_grad(Activation a, const Mat& pre, const Mat& post, Mat& delta) {
  switch (a) {
    case Activation::relu: delta.array() *= (pre.array() > 0.0).cast<double>(); break;
    case Activation::tanh: delta.array() *= 1.0 - post.array().square(); break;
    case Activation::gelu: delta.array() *= pre.unaryExpr([](double x) { return gelu_grad(x); }).array(); break;
  }
}

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

}  // namespace detail

/// Intermediate values kept for the backward pass. post[0] is the input batch.
struct ForwardCache {
  std::vector<Mat> pre;
  std::vector<Mat> post;
};

inline Mat forward_batch(const MlpModel& model, const Mat& inputs, ForwardCache* cache = nullptr) {
  if (inputs.rows() != model.input_dim())
    throw ShapeError("forward: input has " + std::to_string(inputs.rows()) + " rows, model expects " +
                     std::to_string(model.input_dim()));
  const auto& p = model.params();
  const std::size_t L = model.num_layers();
  if (cache) {
    cache->pre.assign(L, Mat());
    cache->post.assign(L, Mat());
    cache->post[0] = inputs;
  }
  Mat h = inputs;
  for (std::size_t l = 0; l < L; ++l) {
    Mat pre = p.weights[l] * h;
    pre.colwise() += p.biases[l];
    if (l + 1 == L) {
      if (cache) cache->pre[l] = pre;
      return pre;
    }
    h = detail::activate(model.activation(), pre);
    if (cache) {
      cache->pre[l] = std::move(pre);
      cache->post[l + 1] = h;
    }
  }
  return h;  // unreachable: L >= 1
}

inline Vec forward(const MlpModel& model, const Vec& input) {
  return forward_batch(model, Mat(input)).col(0);
}

struct BatchGradients {
  ParamSet params;  // summed over the batch
  Mat inputs;       // per-sample input gradients (input_dim x B)
};

/// Reverse pass for a batch. `output_grads` holds dLoss/dOutput per column.
inline BatchGradients backward_batch(const MlpModel& model, const ForwardCache& cache, const Mat& output_grads) {
  const std::size_t L = model.num_layers();
  if (cache.post.size() != L || output_grads.rows() != model.output_dim() ||
      output_grads.cols() != cache.post[0].cols())
    throw ShapeError("backward: output gradient is " +
                     detail::shape_str(output_grads.rows(), output_grads.cols()) + ", expected " +
                     detail::shape_str(model.output_dim(), cache.post.empty() ? 0 : cache.post[0].cols()));
  const auto& p = model.params();
  BatchGradients g;
  g.params.weights.resize(L);
  g.params.biases.resize(L);
  Mat delta = output_grads;
  for (std::size_t l = L; l-- > 0;) {
    g.params.weights[l].noalias() = delta * cache.post[l].transpose();
    g.params.biases[l] = delta.rowwise().sum();
    Mat prev = p.weights[l].transpose() * delta;
    if (l > 0) detail::apply_activation_grad(model.activation(), cache.pre[l - 1], cache.post[l], prev);
    delta = std::move(prev);
  }
  g.inputs = std::move(delta);
  return g;
}

inline BatchGradients backward_batch(const MlpModel& model, const Mat& inputs, const Mat& output_grads) {
  ForwardCache cache;
  forward_batch(model, inputs, &cache);
  return backward_batch(model, cache, output_grads);
}

struct Gradients {
  ParamSet params;
  Vec input;
};

inline Gradients backward(const MlpModel& model, const Vec& input, const Vec& output_grad) {
  auto g = backward_batch(model, Mat(input), Mat(output_grad));
  return {std::move(g.params), g.inputs.col(0)};
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  ParamSet first_moment;
  ParamSet second_moment;
  std::uint64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam_state(const MlpModel& model, double lr = 1e-3, double beta1 = 0.9,
                                 double beta2 = 0.999, double eps = 1e-8) {
  AdamState s;
  s.first_moment = model.params().zeros_like();
  s.second_moment = model.params().zeros_like();
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

/// In-place Adam update with bias correction. Rejects non-finite gradients
/// before touching any state.
inline void adam_update(MlpModel& model, AdamState& state, const ParamSet& grads) {
  ParamSet& p = model.params();
  if (!grads.same_shape(p) || !state.first_moment.same_shape(p) || !state.second_moment.same_shape(p))
    throw ShapeError("adam: gradient/moment shapes do not match the model");
  if (!grads.all_finite()) throw NumericError("adam: non-finite gradient, step rejected");
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    param.array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
  };
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    update(p.weights[l], state.first_moment.weights[l], state.second_moment.weights[l], grads.weights[l]);
    update(p.biases[l], state.first_moment.biases[l], state.second_moment.biases[l], grads.biases[l]);
  }
}

/// Pure form of the Adam step.
inline std::pair<MlpModel, AdamState> adam_step(const MlpModel& model, const AdamState& state,
                                                const ParamSet& grads) {
  std::pair<MlpModel, AdamState> out{model, state};
  adam_update(out.first, out.second, grads);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "CAF1" | u32 version | u32 n_dims | u32 dims[n] | u32 activation | u64 seed |
// f64 params (per layer: W row-major, then b) | u32 crc32, all little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> save_checkpoint(const MlpModel& model) {
  caf::detail::ByteWriter w;
  w.raw("CAF1");
  w.uint(kCheckpointVersion);
  w.uint(static_cast<std::uint32_t>(model.layer_dims().size()));
  for (int d : model.layer_dims()) w.uint(static_cast<std::uint32_t>(d));
  w.uint(static_cast<std::uint32_t>(model.activation()));
  w.uint(model.seed());
  model.params().for_each([&](double x) { w.f64(x); });
  return std::move(w).finish_with_crc();
}

inline MlpModel load_checkpoint(std::span<const std::uint8_t> bytes) {
  caf::detail::ByteReader r(bytes.data(), bytes.size(), "checkpoint");
  if (r.remaining() < 8) r.fail("truncated payload");
  if (r.raw(4) != "CAF1") r.fail("bad magic");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion)
    r.fail("unsupported format version " + std::to_string(version) + " (reader supports " +
           std::to_string(kCheckpointVersion) + ")");
  r.check_crc();
  const auto n_dims = r.uint<std::uint32_t>();
  if (n_dims < 2 || n_dims > 4096) r.fail("implausible layer count " + std::to_string(n_dims));
  std::vector<int> dims;
  for (std::uint32_t i = 0; i < n_dims; ++i) {
    const auto d = r.uint<std::uint32_t>();
    if (d == 0 || d > (1u << 24)) r.fail("implausible layer width " + std::to_string(d));
    dims.push_back(static_cast<int>(d));
  }
  const auto act = r.uint<std::uint32_t>();
  if (act > static_cast<std::uint32_t>(Activation::gelu)) r.fail("unknown activation id " + std::to_string(act));
  const auto seed = r.uint<std::uint64_t>();
  MlpModel model = MlpModel::zeros(dims, static_cast<Activation>(act));
  if (r.remaining() != model.params().size() * sizeof(double)) r.fail("parameter block size does not match layer_dims");
  model.params().for_each([&](double& x) { x = r.f64(); });
  return MlpModel::from_params(std::move(dims), model.activation(), seed, std::move(model.params()));
}

/// Fingerprint of the serialized model; equal iff the checkpoints are byte-identical.
inline std::uint64_t model_hash(const MlpModel& model) {
  const auto bytes = save_checkpoint(model);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace nn
}  // namespace caf
