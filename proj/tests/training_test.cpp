#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fedhar/synthetic.hpp"
#include "fedhar/training.hpp"

namespace fedhar {
namespace {

ModelConfig tiny(int features = 5, int labels = 2, int positions = 6) {
  ModelConfig c;
  c.n_features = features;
  c.n_labels = labels;
  c.transformers_layers = 1;
  c.hidden_size = 16;
  c.n_positions = positions;
  c.n_heads = 2;
  c.dropout = 0.0;
  c.seed = 21;
  return c;
}

// Labels follow the sign of the first two features.
std::vector<Window> separable_windows(std::size_t n, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution missing(0.1);
  const auto f = static_cast<std::size_t>(c.n_features), l = static_cast<std::size_t>(c.n_labels);
  const auto p = static_cast<std::size_t>(c.n_positions);
  std::vector<Window> out;
  for (std::size_t i = 0; i < n; ++i) {
    Window w;
    w.subject_id = "s" + std::to_string(i % 3);
    w.length = p - (i % 2);
    w.n_positions = p;
    w.n_features = f;
    w.n_labels = l;
    w.features.assign(p * f, 0.0f);
    w.targets.assign(p * l, 0.0f);
    w.label_mask.assign(p * l, 0.0f);
    w.pad_mask.assign(p, 0.0f);
    for (std::size_t t = 0; t < w.length; ++t) {
      w.pad_mask[t] = 1;
      for (std::size_t k = 0; k < f; ++k) w.features[t * f + k] = static_cast<float>(normal(rng));
      for (std::size_t k = 0; k < l; ++k) {
        w.targets[t * l + k] = w.features[t * f + (k % f)] > 0 ? 1.0f : 0.0f;
        w.label_mask[t * l + k] = missing(rng) ? 0.0f : 1.0f;
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

double max_abs_diff(const WeightSet& a, const WeightSet& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t e = 0; e < a[i].tensor.numel(); ++e) {
      m = std::max(m, std::abs(static_cast<double>(a[i].tensor[e]) - b[i].tensor[e]));
    }
  }
  return m;
}

TEST(Train, VanishingLearningRateIsNearNoOp) {
  const auto c = tiny();
  const auto w0 = init_model(c);
  const auto data = separable_windows(10, c, 1);
  const auto r = train(w0, c, data, {.epochs = 1, .batch_size = 4, .learning_rate = 1e-12, .seed = 1}, std::vector<float>{1.0f, 1.0f});
  EXPECT_LT(max_abs_diff(w0, r.weights), 1e-6);
}

TEST(Train, SecondEpochLossBelowFirst) {
  const auto c = tiny();
  const auto data = separable_windows(40, c, 2);
  const auto r = train(init_model(c), c, data, {.epochs = 2, .batch_size = 8, .learning_rate = 3e-3, .seed = 2},
                       std::vector<float>{1.0f, 1.0f});
  ASSERT_EQ(r.history.epoch_loss.size(), 2u);
  EXPECT_LT(r.history.epoch_loss[1], r.history.epoch_loss[0]);
}

TEST(Train, SameSeedIsBitwiseIdentical) {
  auto c = tiny();
  c.dropout = 0.2;
  const auto data = separable_windows(13, c, 3);
  const TrainConfig tc{.epochs = 2, .batch_size = 4, .learning_rate = 1e-3, .seed = 9};
  const auto a = train(init_model(c), c, data, tc, std::vector<float>{1.0f, 2.0f});
  const auto b = train(init_model(c), c, data, tc, std::vector<float>{1.0f, 2.0f});
  EXPECT_TRUE(bitwise_equal(a.weights, b.weights));
  EXPECT_EQ(a.history.epoch_loss, b.history.epoch_loss);
  auto other = tc;
  other.seed = 10;
  EXPECT_FALSE(bitwise_equal(a.weights, train(init_model(c), c, data, other, std::vector<float>{1.0f, 2.0f}).weights));
}

TEST(Train, Errors) {
  const auto c = tiny();
  const auto data = separable_windows(2, c, 4);
  EXPECT_THROW(train(init_model(c), c, {}, {}, std::vector<float>{1.0f, 1.0f}), ConfigError);
  EXPECT_THROW(train(init_model(c), c, data, {.epochs = 0}, std::vector<float>{1.0f, 1.0f}), ConfigError);
  EXPECT_THROW(train(init_model(c), c, data, {.learning_rate = 0}, std::vector<float>{1.0f, 1.0f}), ConfigError);
  EXPECT_THROW(train(init_model(c), c, data, {}, std::vector<float>{1.0f}), ShapeError);
  EXPECT_THROW(train(init_model(tiny(6)), tiny(6), data, {}, std::vector<float>{1.0f, 1.0f}), ShapeError);
}

TEST(Train, SmallStepDecreasesBatchLoss) {
  const auto c = tiny();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto mc = c;
    mc.seed = seed;
    const auto data = separable_windows(4, mc, seed + 100);
    std::vector<std::size_t> idx{0, 1, 2, 3};
    const auto batch = collate(data, idx);
    const Tensor pw({2}, 1.0f);
    auto loss_of = [&](const WeightSet& w) {
      const auto p = make_params(w, mc, false);
      return masked_weighted_loss(forward(p, batch.x, batch.pad), batch.targets, batch.mask, pw).value()[0];
    };
    const auto w0 = init_model(mc);
    const auto r = train(w0, mc, data, {.epochs = 1, .batch_size = 4, .learning_rate = 1e-6, .seed = 1},
                         std::vector<float>{1.0f, 1.0f});
    EXPECT_LT(loss_of(r.weights), loss_of(w0)) << "seed " << seed;
  }
}

TEST(Evaluate, ZeroOutputLayerIsConstantNegative) {
  const auto c = tiny();
  auto w = init_model(c);
  w.at("out.w").fill(0);
  w.at("out.b").fill(0);
  const auto data = separable_windows(6, c, 5);
  const auto r = evaluate(w, c, data, "s");
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(r.counts[k].tp, 0u);
    EXPECT_EQ(r.counts[k].fp, 0u);
    EXPECT_GT(r.counts[k].fn, 0u);
    EXPECT_DOUBLE_EQ(*r.per_label_ba[k], 0.5);
  }
  EXPECT_EQ(evaluate(w, c, data, "s"), r);
  EXPECT_THROW(evaluate(w, c, {}, "s"), ConfigError);
}

TEST(Evaluate, MaskedInstancesNotCounted) {
  const auto c = tiny();
  const auto data = separable_windows(6, c, 6);
  std::uint64_t unmasked = 0;
  for (const auto& w : data) {
    for (float m : w.label_mask) unmasked += m != 0.0f;
  }
  EXPECT_EQ(evaluate(init_model(c), c, data, "s").n_eval_instances, unmasked);
}

TEST(Evaluate, HandBuiltOracleWeightsScorePerfectly) {
  // blocks reduce to identity; only hidden unit 0 carries feature 0, whose
  // layer-normed value keeps its sign through the linear head and out layer
  auto c = tiny(3, 1, 4);
  auto w = init_model(c);
  for (auto& e : w) {
    if (e.name.find("ln") == std::string::npos) e.tensor.fill(0.0f);
  }
  w.at("input_proj.w").at(0, 0) = 1.0f;
  for (std::size_t i = 0; i < 16; ++i) w.at("head.w").at(i, i) = 1.0f;
  w.at("out.w").at(0, 0) = 5.0f;
  auto data = separable_windows(20, c, 7);
  for (auto& win : data) {
    for (std::size_t t = 0; t < win.length; ++t) {
      if (win.features[t * 3] == 0.0f) win.features[t * 3] = 0.5f;
      win.targets[t] = win.features[t * 3] > 0 ? 1.0f : 0.0f;
    }
  }
  const auto r = evaluate(w, c, data, "oracle");
  ASSERT_TRUE(r.mean_ba);
  EXPECT_EQ(*r.mean_ba, 1.0);
}

TEST(Search, SamplesStayOnGrid) {
  const SearchSpace space;
  std::mt19937_64 rng(1);
  const std::set<int> layers{1, 2, 3, 4, 6, 12}, hidden{48, 96, 192, 384, 768}, pos{32, 64, 128, 256};
  for (int i = 0; i < 2000; ++i) {
    const auto t = sample_trial(space, rng);
    EXPECT_TRUE(layers.count(t.layers));
    EXPECT_TRUE(hidden.count(t.hidden));
    EXPECT_TRUE(pos.count(t.n_positions));
    EXPECT_GE(t.learning_rate, 1e-5);
    EXPECT_LE(t.learning_rate, 1e-1);
  }
}

TEST(Search, LearningRateIsLogUniform) {
  const SearchSpace space;
  std::mt19937_64 rng(2);
  int below = 0;
  for (int i = 0; i < 10000; ++i) below += sample_trial(space, rng).learning_rate < 1e-3;
  // ln(1e-3/1e-5) / ln(1e-1/1e-5) = 0.5
  EXPECT_NEAR(below / 10000.0, 0.5, 0.02);
}

TEST(Search, DeterministicAndTiesKeepEarliest) {
  const SearchSpace space;
  const ModelConfig base = tiny();
  const TrainConfig tb{.epochs = 1};
  auto constant = [](const ModelConfig&, const TrainConfig&) { return TrialOutcome{0.6, {}}; };
  const auto a = random_search(space, 6, base, tb, constant, 5);
  const auto b = random_search(space, 6, base, tb, constant, 5);
  ASSERT_EQ(a.trials.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.trials[i].sampled, b.trials[i].sampled);
    EXPECT_EQ(a.trials[i].model, b.trials[i].model);
  }
  EXPECT_EQ(a.best, 0u);
  const auto one = random_search(space, 1, base, tb, constant, 5);
  EXPECT_EQ(one.best, 0u);
  EXPECT_THROW(random_search(space, 0, base, tb, constant, 5), ConfigError);
}

TEST(Search, PicksHighestScore) {
  const SearchSpace space;
  auto by_hidden = [](const ModelConfig& m, const TrainConfig&) { return TrialOutcome{m.hidden_size / 1000.0, {}}; };
  const auto r = random_search(space, 12, tiny(), {.epochs = 1}, by_hidden, 8);
  for (const auto& t : r.trials) EXPECT_LE(t.val_mean_ba, r.best_trial().val_mean_ba);
  const auto j = trial_to_json(r.best_trial());
  for (auto* key : {"trial", "config", "val_mean_ba", "epochs", "wall_ms"}) EXPECT_TRUE(j.contains(key)) << key;
}

TEST(Search, WindowObjectiveRunsEndToEnd) {
  SyntheticSpec spec;
  spec.n_subjects = 3;
  spec.minutes_per_subject = 120;
  spec.n_features = 6;
  spec.n_labels = 3;
  spec.seed = 4;
  auto recs = gen_synthetic(spec);
  const auto s = fit_standardizer(recs);
  for (auto& r : recs) r = apply_standardizer(s, r);
  SearchSpace small;
  small.layers = {1};
  small.hidden = {16};
  small.positions = {8};
  auto base = tiny(6, 3, 8);
  const auto r = random_search(small, 2, base, {.epochs = 1, .batch_size = 16}, make_window_objective(recs, 1), 3);
  for (const auto& t : r.trials) {
    EXPECT_GE(t.val_mean_ba, 0.0);
    EXPECT_LE(t.val_mean_ba, 1.0);
    EXPECT_EQ(t.history.epoch_loss.size(), 1u);
  }
}

}  // namespace
}  // namespace fedhar
