#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "caf/nnsub.hpp"
#include "caf/rng.hpp"
#include "test_support.hpp"

using namespace caf;
using namespace caf::nn;

namespace {

MlpModel linear_2x2() {
  ParamSet p;
  p.weights.push_back(Mat{{2.0, 0.0}, {0.0, 3.0}});
  p.biases.push_back(Vec{{1.0, 1.0}});
  return MlpModel::from_params({2, 2}, Activation::relu, 0, p);
}

}  // namespace

TEST(Forward, ZeroModelGivesZero) {
  const auto m = MlpModel::zeros({3, 8, 8, 2}, Activation::tanh);
  const Vec out = forward(m, Vec{{0.3, -1.2, 4.0}});
  EXPECT_EQ(out, Vec::Zero(2));
}

TEST(Forward, SingleLinearLayer) {
  EXPECT_EQ(forward(linear_2x2(), Vec{{1.0, 1.0}}), (Vec{{3.0, 4.0}}));
}

TEST(Forward, ReluHiddenLayerClampsNegatives) {
  ParamSet p;
  p.weights = {Mat::Identity(2, 2), Mat::Identity(2, 2)};
  p.biases = {Vec::Zero(2), Vec::Zero(2)};
  const auto m = MlpModel::from_params({2, 2, 2}, Activation::relu, 0, p);
  EXPECT_EQ(forward(m, Vec{{-1.0, 2.0}}), (Vec{{0.0, 2.0}}));
}

TEST(Forward, OutputLayerIsIdentity) {
  // A negative output must survive: no activation on the last layer.
  ParamSet p;
  p.weights = {Mat{{-1.0}}};
  p.biases = {Vec{{0.0}}};
  const auto m = MlpModel::from_params({1, 1}, Activation::relu, 0, p);
  EXPECT_EQ(forward(m, Vec{{5.0}})(0), -5.0);
}

TEST(Forward, RejectsWrongInputLengthWithShapeReport) {
  const auto m = MlpModel({3, 4, 2}, Activation::relu, 1);
  try {
    forward(m, Vec::Zero(2));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("2 rows"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("expects 3"), std::string::npos);
  }
}

TEST(Forward, BatchMatchesPerSample) {
  const auto m = MlpModel({3, 16, 16, 2}, Activation::gelu, 4);
  CounterRng rng(1);
  Mat x(3, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const Mat batch = forward_batch(m, x);
  for (Eigen::Index j = 0; j < x.cols(); ++j) EXPECT_TRUE(batch.col(j).isApprox(forward(m, x.col(j)), 1e-14));
}

TEST(Model, SameSeedGivesBitIdenticalParameters) {
  const auto a = MlpModel({3, 128, 128, 2}, Activation::relu, 42);
  const auto b = MlpModel({3, 128, 128, 2}, Activation::relu, 42);
  const auto c = MlpModel({3, 128, 128, 2}, Activation::relu, 43);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
}

TEST(Model, InitializationBounds) {
  const auto relu = MlpModel({10, 20, 5}, Activation::relu, 3);
  EXPECT_LE(relu.params().weights[0].cwiseAbs().maxCoeff(), std::sqrt(6.0 / 10));
  const auto tanh = MlpModel({10, 20, 5}, Activation::tanh, 3);
  EXPECT_LE(tanh.params().weights[0].cwiseAbs().maxCoeff(), std::sqrt(6.0 / 30));
  EXPECT_TRUE(tanh.params().biases[0].isZero());
}

TEST(Model, WeightShapesFollowLayerDims) {
  const auto m = MlpModel::dense(3, 2, 5, 128, Activation::relu, 0);
  ASSERT_EQ(m.layer_dims(), (std::vector<int>{3, 128, 128, 128, 128, 128, 2}));
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_EQ(m.params().weights[l].rows(), m.layer_dims()[l + 1]);
    EXPECT_EQ(m.params().weights[l].cols(), m.layer_dims()[l]);
    EXPECT_EQ(m.params().biases[l].size(), m.layer_dims()[l + 1]);
  }
}

TEST(Model, RejectsBadDims) {
  EXPECT_THROW(MlpModel({3}, Activation::relu, 0), ShapeError);
  EXPECT_THROW(MlpModel({3, 0, 2}, Activation::relu, 0), ShapeError);
}

TEST(Backward, LinearGradientRowEqualsInput) {
  ParamSet p;
  p.weights = {Mat{{0.5, -1.0, 2.0}, {1.5, 0.25, -0.75}}};
  p.biases = {Vec::Zero(2)};
  const auto m = MlpModel::from_params({3, 2}, Activation::relu, 0, p);
  const Vec x{{0.7, -0.2, 1.3}};
  const auto g = backward(m, x, Vec{{1.0, 0.0}});
  EXPECT_EQ(Vec(g.params.weights[0].row(0).transpose()), x);
  EXPECT_TRUE(g.params.weights[0].row(1).isZero());
  EXPECT_EQ(g.params.biases[0], (Vec{{1.0, 0.0}}));
  // d y0 / d x = W row 0
  EXPECT_EQ(g.input, Vec(p.weights[0].row(0).transpose()));
}

TEST(Backward, ZeroSeedGivesZeroGradients) {
  const auto m = MlpModel({4, 8, 8, 3}, Activation::tanh, 5);
  const auto g = backward(m, Vec::Ones(4), Vec::Zero(3));
  EXPECT_TRUE(g.params.all_zero());
  EXPECT_TRUE(g.input.isZero());
}

TEST(Backward, RejectsMismatchedOutputGradient) {
  const auto m = MlpModel({4, 8, 3}, Activation::tanh, 5);
  EXPECT_THROW(backward(m, Vec::Ones(4), Vec::Zero(2)), ShapeError);
  EXPECT_THROW(backward(m, Vec::Ones(3), Vec::Zero(3)), ShapeError);
}

TEST(Backward, FullSizeTanhNetworkMatchesFiniteDifferences) {
  const auto m = MlpModel::dense(3, 2, 5, 128, Activation::tanh, 11);
  CounterRng rng(2);
  Vec x(3), seed_grad(2);
  for (auto& v : x) v = rng.normal();
  for (auto& v : seed_grad) v = rng.normal();
  const auto g = backward(m, x, seed_grad);
  const auto check = test::check_gradients(m, x, seed_grad, g);
  EXPECT_LT(check.max_param_rel_error, 1e-4) << "worst parameter index " << check.worst_index;
  EXPECT_LT(check.max_input_rel_error, 1e-4);
}

// Property: random small models of every activation agree with central differences.
TEST(Backward, RandomSmallModelsMatchFiniteDifferences) {
  CounterRng gen(99);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<int> dims{1 + static_cast<int>(gen.below(4))};
    const int depth = 1 + static_cast<int>(gen.below(3));
    for (int l = 0; l < depth; ++l) dims.push_back(1 + static_cast<int>(gen.below(8)));
    const auto act = static_cast<Activation>(gen.below(3));
    auto m = MlpModel(dims, act, gen.next_u64());
    m.params().for_each([&](double& p) { p += 0.1 * gen.normal(); });  // non-zero biases too
    Vec x(dims.front()), sg(dims.back());
    for (auto& v : x) v = gen.normal();
    for (auto& v : sg) v = gen.normal();
    const auto g = backward(m, x, sg);
    const auto check = test::check_gradients(m, x, sg, g);
    EXPECT_LT(check.max_param_rel_error, 1e-4) << "trial " << trial << " activation " << to_string(act);
    EXPECT_LT(check.max_input_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(Forward, BiasFreeReluIsPositivelyHomogeneous) {
  CounterRng gen(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = MlpModel({3, 16, 16, 2}, Activation::relu, gen.next_u64());
    for (auto& b : m.params().biases) b.setZero();
    Vec x(3);
    for (auto& v : x) v = gen.normal();
    const double c = 0.1 + 5.0 * gen.uniform();
    EXPECT_TRUE(forward(m, c * x).isApprox(c * forward(m, x), 1e-12));
  }
}

TEST(Adam, ZeroGradientLeavesParametersButCountsStep) {
  const auto m = MlpModel({2, 4, 2}, Activation::relu, 1);
  const auto s = make_adam_state(m, 0.1);
  const auto [m2, s2] = adam_step(m, s, m.params().zeros_like());
  EXPECT_TRUE(m2 == m);
  EXPECT_EQ(s2.step_count, 1u);
}

TEST(Adam, FirstStepIsBiasCorrected) {
  ParamSet p;
  p.weights = {Mat::Zero(1, 1)};
  p.biases = {Vec::Zero(1)};
  const auto m = MlpModel::from_params({1, 1}, Activation::relu, 0, p);
  ParamSet g = p.zeros_like();
  g.weights[0](0, 0) = 1.0;
  const auto [m2, s2] = adam_step(m, make_adam_state(m, 0.1), g);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(m2.params().weights[0](0, 0), -0.1, 1e-9);
  EXPECT_EQ(m2.params().biases[0](0), 0.0);
}

TEST(Adam, MomentsMirrorParameterShapes) {
  const auto m = MlpModel({3, 7, 5, 2}, Activation::gelu, 1);
  const auto s = make_adam_state(m);
  EXPECT_TRUE(s.first_moment.same_shape(m.params()));
  EXPECT_TRUE(s.second_moment.same_shape(m.params()));
  EXPECT_EQ(s.step_count, 0u);
}

TEST(Adam, RejectsNonFiniteGradientWithoutMutating) {
  auto m = MlpModel({2, 3, 2}, Activation::relu, 1);
  auto s = make_adam_state(m);
  const auto before = m;
  auto g = m.params().zeros_like();
  g.biases[1](0) = std::nan("");
  EXPECT_THROW(adam_update(m, s, g), NumericError);
  EXPECT_TRUE(m == before);
  EXPECT_EQ(s.step_count, 0u);
}

TEST(Adam, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    auto m = MlpModel({3, 16, 2}, Activation::tanh, 8);
    auto s = make_adam_state(m, 0.01);
    const Vec x{{0.1, 0.2, 0.3}};
    for (int i = 0; i < 2; ++i) {
      const auto g = backward(m, x, forward(m, x));
      adam_update(m, s, g.params);
    }
    return m;
  };
  EXPECT_TRUE(run() == run());
}

TEST(Checkpoint, RoundTripPreservesModelAndOutputs) {
  const auto m = MlpModel({3, 32, 32, 2}, Activation::gelu, 77);
  const auto bytes = save_checkpoint(m);
  const auto back = load_checkpoint(bytes);
  EXPECT_TRUE(back == m);
  CounterRng rng(3);
  Mat probe(3, 16);
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = rng.normal();
  EXPECT_EQ(forward_batch(back, probe), forward_batch(m, probe));
}

TEST(Checkpoint, HeaderLayout) {
  const auto m = MlpModel({3, 4, 2}, Activation::tanh, 0x0102030405060708ULL);
  const auto b = save_checkpoint(m);
  ASSERT_GE(b.size(), 40u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "CAF1");
  EXPECT_EQ(b[4], 1);  // version, little-endian u32
  EXPECT_EQ(b[8], 3);  // number of dims
  EXPECT_EQ(b[12], 3);
  EXPECT_EQ(b[16], 4);
  EXPECT_EQ(b[20], 2);
  EXPECT_EQ(b[24], 1);     // activation id: tanh
  EXPECT_EQ(b[28], 0x08);  // seed, low byte first
  const std::size_t params = 3 * 4 + 4 + 4 * 2 + 2;
  EXPECT_EQ(b.size(), 36 + 8 * params + 4);
}

TEST(Checkpoint, TruncatedPayloadIsRejected) {
  auto b = save_checkpoint(MlpModel({3, 4, 2}, Activation::relu, 1));
  b.resize(b.size() - 9);
  EXPECT_THROW(load_checkpoint(b), FormatError);
  b.resize(6);
  EXPECT_THROW(load_checkpoint(b), FormatError);
}

TEST(Checkpoint, CorruptedByteFailsChecksum) {
  auto b = save_checkpoint(MlpModel({3, 4, 2}, Activation::relu, 1));
  b[50] ^= 0x40;
  try {
    load_checkpoint(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, UnknownVersionIsFlagged) {
  auto b = save_checkpoint(MlpModel({3, 4, 2}, Activation::relu, 1));
  b[4] = 2;
  try {
    load_checkpoint(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Checkpoint, BadMagicIsRejected) {
  auto b = save_checkpoint(MlpModel({3, 4, 2}, Activation::relu, 1));
  b[0] = 'X';
  EXPECT_THROW(load_checkpoint(b), FormatError);
}
