#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fedhar/adam.hpp"
#include "fedhar/model.hpp"

namespace fedhar {
namespace {

ModelConfig small_config(int layers = 1, int hidden = 16, int features = 6, int labels = 3, int positions = 8) {
  ModelConfig c;
  c.n_features = features;
  c.n_labels = labels;
  c.transformers_layers = layers;
  c.hidden_size = hidden;
  c.n_positions = positions;
  c.n_heads = 2;
  c.dropout = 0.1;
  c.seed = 11;
  return c;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = static_cast<float>(n(rng));
  return t;
}

TEST(InitModel, SameSeedIsBitwiseIdentical) {
  const auto c = small_config();
  EXPECT_TRUE(bitwise_equal(init_model(c), init_model(c)));
  auto other = c;
  other.seed = 12;
  EXPECT_FALSE(bitwise_equal(init_model(c), init_model(other)));
}

TEST(InitModel, BestSearchedConfigShapes) {
  const auto c = ModelConfig::paper();
  EXPECT_EQ(c.transformers_layers, 4);
  EXPECT_EQ(c.hidden_size, 384);
  EXPECT_EQ(c.n_positions, 128);
  const auto layout = parameter_layout(c);
  auto shape_of = [&](const std::string& n) {
    for (const auto& [name, s] : layout) {
      if (name == n) return s;
    }
    return Shape{};
  };
  EXPECT_EQ(shape_of("input_proj.w"), (Shape{225, 384}));
  EXPECT_EQ(shape_of("out.w"), (Shape{384, 51}));
  EXPECT_EQ(shape_of("out.b"), (Shape{51}));
}

TEST(InitModel, ParameterCountMatchesShapeSum) {
  ModelConfig c = small_config(1, 48, 8, 3, 32);
  c.n_heads = 4;
  const std::size_t h = 48, f = 8, l = 3, p = 32;
  const std::size_t block = 2 * h + (h * 3 * h + 3 * h) + (h * h + h) + 2 * h + (h * 4 * h + 4 * h) + (4 * h * h + h);
  const std::size_t expected = (f * h + h) + p * h + block + 2 * h + (h * h + h) + (h * l + l);
  EXPECT_EQ(init_model(c).parameter_count(), expected);
}

TEST(InitModel, BiasesZeroGainsOneWeightsSmall) {
  ModelConfig c = small_config(2, 64, 10, 5, 16);
  const auto ws = init_model(c);
  double sum2 = 0;
  std::size_t n = 0;
  for (const auto& e : ws) {
    const bool bias = e.name.ends_with(".b") || e.name.ends_with(".bias");
    const bool gain = e.name.ends_with("ln1.w") || e.name.ends_with("ln2.w") || e.name == "ln_f.gain";
    for (float v : e.tensor.data()) {
      if (bias) {
        EXPECT_EQ(v, 0.0f) << e.name;
      } else if (gain) {
        EXPECT_EQ(v, 1.0f) << e.name;
      } else {
        sum2 += static_cast<double>(v) * v;
        ++n;
      }
    }
  }
  EXPECT_NEAR(std::sqrt(sum2 / static_cast<double>(n)), 0.02, 0.001);
}

TEST(InitModel, HeadsMustDivideHidden) {
  auto c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(init_model(c), ConfigError);
}

TEST(ModelConfig, DefaultHeads) {
  EXPECT_EQ(ModelConfig::default_heads(384), 6);
  EXPECT_EQ(ModelConfig::default_heads(768), 12);
  EXPECT_EQ(ModelConfig::default_heads(48), 4);
  EXPECT_EQ(ModelConfig::default_heads(96), 4);
}

TEST(Forward, OutputShapeAndRange) {
  auto c = small_config(2, 16, 7, 51, 8);
  const auto params = make_params(init_model(c), c, false);
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 5, 7}, rng, 10.0);
  Tensor pad({2, 5}, 1.0f);
  const auto y = forward(params, x, pad).value();
  EXPECT_EQ(y.shape(), (Shape{2, 5, 51}));
  for (float v : y.data()) {
    EXPECT_GT(v, -1.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Forward, EvalModeIsBitwiseRepeatable) {
  auto c = small_config();
  const auto params = make_params(init_model(c), c, false);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 8, 6}, rng);
  Tensor pad({3, 8}, 1.0f);
  EXPECT_TRUE(bitwise_equal(forward(params, x, pad).value(), forward(params, x, pad).value()));
}

TEST(Forward, DropoutOnlyInTrainMode) {
  auto c = small_config();
  c.dropout = 0.5;
  const auto params = make_params(init_model(c), c, false);
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 8, 6}, rng);
  Tensor pad({2, 8}, 1.0f);
  const auto eval = forward(params, x, pad).value();
  std::mt19937_64 drop(1);
  const auto trained = forward(params, x, pad, {.train_mode = true, .rng = &drop}).value();
  EXPECT_FALSE(bitwise_equal(eval, trained));
  // train_mode without a generator, or eval with one, behaves as eval
  std::mt19937_64 unused(1);
  EXPECT_TRUE(bitwise_equal(eval, forward(params, x, pad, {.train_mode = false, .rng = &unused}).value()));
}

TEST(Forward, ShapeErrors) {
  auto c = small_config();
  const auto params = make_params(init_model(c), c, false);
  EXPECT_THROW(forward(params, Tensor({1, 9, 6}), Tensor({1, 9}, 1.0f)), ShapeError);
  EXPECT_THROW(forward(params, Tensor({1, 4, 5}), Tensor({1, 4}, 1.0f)), ShapeError);
  auto wrong = init_model(small_config(1, 16, 7));
  EXPECT_THROW(make_params(wrong, c, false), ShapeError);
}

TEST(Forward, OutputAtPositionIgnoresLaterInputs) {
  auto c = small_config(2, 16, 6, 4, 8);
  const auto params = make_params(init_model(c), c, false);
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({1, 8, 6}, rng);
  Tensor pad({1, 8}, 1.0f);
  const auto base = forward(params, x, pad).value();
  for (std::size_t t = 0; t < 8; ++t) {
    Tensor y = x;
    for (std::size_t tt = t + 1; tt < 8; ++tt) {
      for (std::size_t f = 0; f < 6; ++f) y.at(0, tt, f) += 3.0f;
    }
    const auto out = forward(params, y, pad).value();
    for (std::size_t tt = 0; tt <= t; ++tt) {
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out.at(0, tt, k), base.at(0, tt, k));
    }
  }
}

TEST(Predict, SignRule) {
  const Tensor y({1, 1, 3}, {0.3f, -0.3f, 0.0f});
  EXPECT_EQ(predict(y), Tensor({1, 1, 3}, {1, 0, 0}));
}

TEST(Predict, ZeroOutputLayerPredictsAllNegative) {
  auto c = small_config();
  auto ws = init_model(c);
  ws.at("out.w").fill(0.0f);
  ws.at("out.b").fill(0.0f);
  const auto params = make_params(ws, c, false);
  const auto pred = predict(forward(params, Tensor({2, 4, 6}), Tensor({2, 4}, 1.0f)).value());
  for (float v : pred.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Predict, InvariantUnderPositiveRescalingOfLogits) {
  auto c = small_config();
  auto ws = init_model(c);
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 8, 6}, rng);
  Tensor pad({2, 8}, 1.0f);
  const auto before = predict(forward(make_params(ws, c, false), x, pad).value());
  for (auto* name : {"out.w", "out.b"}) {
    for (auto& v : ws.at(name).data()) v *= 0.25f;
  }
  EXPECT_EQ(predict(forward(make_params(ws, c, false), x, pad).value()), before);
}

TEST(Loss, ZeroOutputIsLogTwo) {
  for (float t : {0.0f, 1.0f}) {
    auto y = constant(Tensor({1, 2, 2}, 0.0f));
    auto loss = masked_weighted_loss(y, Tensor({1, 2, 2}, t), Tensor({1, 2, 2}, 1.0f), Tensor({2}, 1.0f));
    EXPECT_NEAR(loss.value()[0], std::log(2.0), 1e-6);
  }
}

TEST(Loss, ConfidentCorrectPositiveApproachesZero) {
  auto y = constant(Tensor({1, 1, 1}, 0.9999999f));
  auto loss = masked_weighted_loss(y, Tensor({1, 1, 1}, 1.0f), Tensor({1, 1, 1}, 1.0f), Tensor({1}, 1.0f));
  EXPECT_LT(loss.value()[0], 1e-6);
}

TEST(Loss, MaskedElementDoesNotContribute) {
  auto pair = constant(Tensor({1, 1, 2}, {0.4f, -0.7f}));
  auto two = masked_weighted_loss(pair, Tensor({1, 1, 2}, {1, 0}), Tensor({1, 1, 2}, {1, 0}), Tensor({2}, 1.0f));
  auto one = masked_weighted_loss(constant(Tensor({1, 1, 1}, 0.4f)), Tensor({1, 1, 1}, 1.0f),
                                  Tensor({1, 1, 1}, 1.0f), Tensor({1}, 1.0f));
  EXPECT_FLOAT_EQ(two.value()[0], one.value()[0]);
}

TEST(Loss, AllZeroMaskIsDegenerate) {
  auto y = constant(Tensor({1, 2, 2}, 0.1f));
  EXPECT_THROW(masked_weighted_loss(y, Tensor({1, 2, 2}), Tensor({1, 2, 2}), Tensor({2}, 1.0f)), DegenerateError);
}

TEST(Loss, TanhHeadEqualsLogitCrossEntropy) {
  // p = (1 + tanh z)/2 = sigmoid(2z); loss must match BCE on logits 2z
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.5);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const double z = n(rng);
    const double p = 0.5 * (1.0 + std::tanh(z));
    const double sig = 1.0 / (1.0 + std::exp(-2.0 * z));
    EXPECT_NEAR(p, sig, 1e-12);
    const double t = coin(rng) ? 1.0 : 0.0;
    const double bce = t * std::log1p(std::exp(-2.0 * z)) + (1.0 - t) * std::log1p(std::exp(2.0 * z));
    auto y = constant(BasicTensor<double>({1, 1, 1}, std::tanh(z)));
    auto loss = masked_weighted_loss(y, BasicTensor<double>({1, 1, 1}, t), BasicTensor<double>({1, 1, 1}, 1.0),
                                     BasicTensor<double>({1}, 1.0));
    EXPECT_NEAR(loss.value()[0], bce, 1e-6);
  }
}

TEST(Loss, PositiveWeightScalesPositiveTerms) {
  // one positive (weight 3) and one negative: (3*a + b) / (3 + 1)
  auto y = constant(Tensor({1, 1, 2}, {0.2f, 0.2f}));
  auto loss = masked_weighted_loss(y, Tensor({1, 1, 2}, {1, 0}), Tensor({1, 1, 2}, 1.0f), Tensor({2}, {3, 3}));
  const double a = -std::log(0.6), b = -std::log(0.4);
  EXPECT_NEAR(loss.value()[0], (3 * a + b) / 4, 1e-6);
}

TEST(Training, LossDecreasesOnSeparableTask) {
  auto c = small_config(1, 16, 4, 2, 8);
  c.dropout = 0.0;
  auto params = make_params(init_model(c), c, true);
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({8, 8, 4}, rng);
  Tensor targets({8, 8, 2});
  for (std::size_t i = 0; i < 64; ++i) {
    targets[i * 2 + 0] = x[i * 4 + 0] > 0 ? 1.0f : 0.0f;
    targets[i * 2 + 1] = x[i * 4 + 1] > 0 ? 1.0f : 0.0f;
  }
  Tensor mask({8, 8, 2}, 1.0f), pad({8, 8}, 1.0f), pw({2}, 1.0f);
  Adam<float> opt(params.vars, 1e-2);
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    auto loss = masked_weighted_loss(forward(params, x, pad), targets, mask, pw);
    if (step == 0) first = loss.value()[0];
    last = loss.value()[0];
    opt.zero_grad();
    backward(loss);
    opt.step();
  }
  EXPECT_LT(last, 0.5 * first);
}

}  // namespace
}  // namespace fedhar
