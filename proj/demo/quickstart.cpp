// Small synthetic run: pretrain a base model on the other folds' subjects, then
// federate over fold 0's subjects and print the mean client BA per round.

#include <cstdio>
#include <exception>
#include <map>
#include <string>
#include <vector>

#include "fedhar/folds.hpp"
#include "fedhar/pipeline.hpp"
#include "fedhar/synthetic.hpp"

int main(int argc, char** argv) {
  using namespace fedhar;
  try {
    SyntheticSpec spec;
    spec.n_subjects = 20;
    spec.minutes_per_subject = 240;
    spec.n_features = 24;
    spec.n_labels = 6;
    spec.seed = argc > 1 ? std::stoull(argv[1]) : 7;
    const auto records = gen_synthetic(spec);
    std::vector<std::string> ids;
    for (const auto& r : records) ids.push_back(r.subject_id);
    const auto plan = build_fold_plan(ids, spec.seed);

    ModelConfig model;
    model.n_features = spec.n_features;
    model.n_labels = spec.n_labels;
    model.transformers_layers = 1;
    model.hidden_size = 32;
    model.n_positions = 16;
    model.n_heads = ModelConfig::default_heads(32);
    model.seed = spec.seed;

    const auto base = pretrain_base(select_records(records, plan.base_subjects[0]), model,
                                    {.epochs = 20, .batch_size = 64, .learning_rate = 1e-3, .seed = spec.seed},
                                    spec.seed);
    std::printf("base model: %zu parameters, final train loss %.4f\n", base.weights.parameter_count(),
                base.history.epoch_loss.back());

    FedConfig fc;
    fc.rounds = 3;
    fc.local_epochs = 5;
    fc.local_lr = 1e-4;
    fc.min_available_clients = 4;
    fc.seed = spec.seed;
    std::map<int, FoldBase> bases{{0, {model, base.weights, base.prep}}};
    const auto results = run_cross_validation(plan, bases, records, fc, spec.seed, {0});
    const auto& r = results[0];
    std::printf("round 0 (base)  mean client BA %.4f\n", r.base_report->summary.mean);
    for (std::size_t i = 0; i < r.rounds.size(); ++i) {
      std::printf("round %zu         mean client BA %.4f over %zu clients\n", i + 1, r.rounds[i].summary.mean,
                  r.rounds[i].clients.size());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "quickstart: %s\n", e.what());
    return 1;
  }
}
