// fedhar: synthetic data, fold plans, base pretraining, federated runs
// (in-process or over TCP) and checkpoint evaluation.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fedhar/checkpoint.hpp"
#include "fedhar/csv.hpp"
#include "fedhar/fedavg.hpp"
#include "fedhar/folds.hpp"
#include "fedhar/pipeline.hpp"
#include "fedhar/preprocessing.hpp"
#include "fedhar/run_config.hpp"
#include "fedhar/synthetic.hpp"
#include "fedhar/training.hpp"
#include "fedhar/wire/transport.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedhar;
using namespace fedhar::wire;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Validation of merged values: bad values are usage errors, not runtime failures.
void check_config(const RunConfig& c) {
  try {
    c.train.validate();
    c.fed.validate();
    c.search.validate();
    if (c.model.transformers_layers < 1 || c.model.hidden_size < 1 || c.model.n_positions < 1 || c.model.n_heads < 1) {
      throw ConfigError("model sizes must be positive");
    }
    if (c.model.hidden_size % c.model.n_heads != 0) throw ConfigError("hidden_size must be divisible by n_heads");
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

// --preset / --config / --seed, shared by every command that trains.
struct ConfigArgs {
  std::string preset = "desk";
  std::string config_file;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  bool print_config = false;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "desk (default) or paper")->check(CLI::IsMember({"desk", "paper"}));
    app->add_option("--config", config_file, "JSON config file; flags override it")->check(CLI::ExistingFile);
    seed_opt = app->add_option("--seed", seed, "single source of all randomness");
    app->add_flag("--print-config", print_config, "print the resolved config and exit");
  }

  // true when the command should stop after printing
  bool printed(const RunConfig& c) const {
    if (!print_config) return false;
    check_config(c);
    std::cout << run_config_to_json(c).dump(2) << "\n";
    return true;
  }

  RunConfig resolve() const {
    RunConfig c = fedhar::preset(preset);
    if (!config_file.empty()) {
      try {
        apply_config_json(c, read_json_file(config_file));
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
    }
    if (seed_opt->count()) c.seed = seed;
    c.propagate_seeds();
    return c;
  }
};

template <class T>
void override_if(const CLI::Option* opt, const T& value, T& target) {
  if (opt->count()) target = value;
}


std::vector<std::string> argv_list(int argc, char** argv) { return {argv, argv + argc}; }

void write_json(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

std::vector<SubjectRecord> load_data(const fs::path& dir) {
  auto recs = load_subject_dir(dir, CsvLayout::from_header());
  if (recs.empty()) throw IoError("no subject CSV files in " + dir.string());
  for (const auto& r : recs) {
    if (r.n_features != recs[0].n_features || r.n_labels != recs[0].n_labels) {
      throw FormatError("subject " + r.subject_id + " has a different column layout than " + recs[0].subject_id);
    }
  }
  return recs;
}

// Model shape follows the data.
ModelConfig model_for(const RunConfig& c, const SubjectRecord& sample) {
  ModelConfig m = c.model;
  m.n_features = static_cast<int>(sample.n_features);
  m.n_labels = static_cast<int>(sample.n_labels);
  m.seed = c.model_seed();
  m.validate();
  return m;
}

fs::path base_ckpt_path(const fs::path& dir, int fold) { return dir / ("base_fold" + std::to_string(fold) + ".ckpt"); }
fs::path sidecar(const fs::path& ckpt, const std::string& ext) { return fs::path(ckpt).replace_extension(ext); }

FoldBase load_base(const fs::path& ckpt) {
  auto ck = load_checkpoint(ckpt);
  const auto prep_path = sidecar(ckpt, ".prep.json");
  auto prep = load_preprocessing(prep_path);
  if (prep.standardizer.mean.size() != static_cast<std::size_t>(ck.config.n_features) ||
      prep.pos_weight.size() != static_cast<std::size_t>(ck.config.n_labels)) {
    throw FormatError(prep_path.string() + " does not match checkpoint " + ckpt.string());
  }
  return {ck.config, std::move(ck.weights), std::move(prep)};
}

FoldPlan load_plan(const fs::path& path) {
  try {
    return fold_plan_from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void check_fold(const FoldPlan& plan, int fold) {
  if (fold < 0 || static_cast<std::size_t>(fold) >= plan.size()) {
    throw UsageError("--fold " + std::to_string(fold) + " outside [0," + std::to_string(plan.size()) + ")");
  }
}

// ---------------------------------------------------------------- gen-synthetic

struct GenArgs {
  int subjects = 60, minutes = 480, features = 225, labels = 51;
  double alpha = 0.2;
  std::uint64_t seed = 7;
  std::string out;
};

int cmd_gen_synthetic(const GenArgs& a, const std::vector<std::string>& argv) {
  if (a.subjects < 1 || a.minutes < 1 || a.features < 1 || a.labels < 1) {
    throw UsageError("--subjects, --minutes, --features and --labels must be >= 1");
  }
  if (!(a.alpha > 0)) throw UsageError("--alpha must be positive");
  SyntheticSpec spec;
  spec.n_subjects = a.subjects;
  spec.minutes_per_subject = a.minutes;
  spec.n_features = a.features;
  spec.n_labels = a.labels;
  spec.dirichlet_alpha = a.alpha;
  spec.seed = a.seed;
  RunManifest man{"gen-synthetic", argv};
  man.config = {{"subjects", a.subjects}, {"minutes", a.minutes}, {"features", a.features},
                {"labels", a.labels},     {"alpha", a.alpha},     {"seed", a.seed}};
  man.seeds = {{"seed", a.seed}};
  const auto recs = gen_synthetic(spec);
  const auto fnames = synthetic_feature_names(a.features);
  const auto lnames = synthetic_label_names(a.labels);
  const fs::path out(a.out);
  for (const auto& r : recs) {
    std::ostringstream ss;
    write_extrasensory_csv(ss, r, fnames, lnames);
    const auto path = out / (r.subject_id + ".features_labels.csv");
    write_text_atomic(path, ss.str());
    man.outputs.push_back(path.string());
  }
  man.write(out / "manifest.json");
  std::cout << "wrote " << recs.size() << " subjects to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- fold-plan

int cmd_fold_plan(const std::string& data, std::uint64_t seed, int folds, const std::string& out,
                  const std::vector<std::string>& argv) {
  const auto recs = load_data(data);
  std::vector<std::string> ids;
  for (const auto& r : recs) ids.push_back(r.subject_id);
  FoldPlan plan;
  try {
    plan = build_fold_plan(ids, seed, static_cast<std::size_t>(folds));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  write_json(out, fold_plan_to_json(plan));
  RunManifest man{"fold-plan", argv, {{"folds", folds}, {"seed", seed}}, {{"seed", seed}}, {data}, {out}};
  man.write(sidecar(out, ".manifest.json"));
  for (std::size_t f = 0; f < plan.size(); ++f) {
    std::cout << "fold " << f << ": " << plan.folds[f].size() << " clients, " << plan.base_subjects[f].size()
              << " base subjects\n";
  }
  return 0;
}

// ---------------------------------------------------------------- search

int cmd_search(const RunConfig& cfg, const std::string& data, int budget, const std::string& out,
               std::string best_out, const std::vector<std::string>& argv) {
  if (budget < 1) throw UsageError("--budget must be >= 1");
  check_config(cfg);
  auto recs = load_data(data);
  const auto stdz = fit_standardizer(recs);
  for (auto& r : recs) r = apply_standardizer(stdz, r);
  const auto base_model = model_for(cfg, recs[0]);
  if (best_out.empty()) best_out = (fs::path(out).parent_path() / "best_config.json").string();

  std::ostringstream log;
  auto result = random_search(cfg.search, budget, base_model, cfg.train,
                              make_window_objective(std::move(recs), cfg.data_seed()), cfg.search_seed(),
                              [](const Trial& t) {
                                std::cout << "trial " << t.index << " layers=" << t.model.transformers_layers
                                          << " hidden=" << t.model.hidden_size << " T=" << t.model.n_positions
                                          << " lr=" << t.train.learning_rate << " val_ba=" << t.val_mean_ba
                                          << std::endl;
                              });
  for (const auto& t : result.trials) log << trial_to_json(t).dump() << "\n";
  write_text_atomic(out, log.str());
  const auto& best = result.best_trial();
  const json best_cfg{{"seed", cfg.seed},
                      {"model",
                       {{"transformers_layers", best.model.transformers_layers},
                        {"hidden_size", best.model.hidden_size},
                        {"n_positions", best.model.n_positions},
                        {"n_heads", best.model.n_heads},
                        {"dropout", best.model.dropout}}},
                      {"train",
                       {{"epochs", cfg.train.epochs},
                        {"batch_size", cfg.train.batch_size},
                        {"learning_rate", best.train.learning_rate}}}};
  write_json(best_out, best_cfg);
  RunManifest man{"search", argv, run_config_to_json(cfg), seeds_to_json(cfg), {data}, {out, best_out}};
  man.config["budget"] = budget;
  man.write(sidecar(out, ".manifest.json"));
  std::cout << "best trial " << best.index << " val_ba=" << best.val_mean_ba << " -> " << best_out << "\n";
  return 0;
}

// ---------------------------------------------------------------- pretrain

int cmd_pretrain(const RunConfig& cfg, const std::string& data, const std::string& plan_path, int fold,
                 std::string out, const std::vector<std::string>& argv) {
  check_config(cfg);
  const auto plan = load_plan(plan_path);
  check_fold(plan, fold);
  if (out.empty()) out = base_ckpt_path("runs/base", fold).string();
  const auto all = load_data(data);
  const auto base_recs = select_records(all, plan.base_subjects[static_cast<std::size_t>(fold)]);
  const auto model = model_for(cfg, all[0]);
  std::cout << "pretraining fold " << fold << " on " << base_recs.size() << " subjects, " << cfg.train.epochs
            << " epochs" << std::endl;
  const auto base = pretrain_base(base_recs, model, cfg.train, cfg.data_seed());

  const fs::path ckpt(out);
  save_checkpoint(ckpt, base.config, base.weights);
  save_preprocessing(sidecar(ckpt, ".prep.json"), base.prep);
  std::ostringstream log;
  for (std::size_t e = 0; e < base.history.epoch_loss.size(); ++e) {
    log << json{{"epoch", e}, {"loss", base.history.epoch_loss[e]}}.dump() << "\n";
  }
  write_text_atomic(sidecar(ckpt, ".train.jsonl"), log.str());
  json report = nullptr;
  if (base.test_report) report = client_report_to_json(*base.test_report);
  write_json(sidecar(ckpt, ".eval.json"), report);

  RunManifest man{"pretrain", argv, run_config_to_json(cfg), seeds_to_json(cfg), {data, plan_path}};
  man.config["fold"] = fold;
  man.config["model"] = model_config_to_json(model);
  man.outputs = {ckpt.string(), sidecar(ckpt, ".prep.json").string(), sidecar(ckpt, ".train.jsonl").string(),
                 sidecar(ckpt, ".eval.json").string()};
  man.write(sidecar(ckpt, ".manifest.json"));
  std::cout << "final loss " << base.history.epoch_loss.back();
  if (base.test_report && base.test_report->mean_ba) std::cout << ", base test BA " << *base.test_report->mean_ba;
  std::cout << "\nwrote " << ckpt.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- simulate

std::vector<int> parse_folds(const std::string& s, std::size_t n) {
  std::vector<int> out;
  if (s.empty() || s == "all") {
    for (std::size_t f = 0; f < n; ++f) out.push_back(static_cast<int>(f));
    return out;
  }
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw UsageError("--folds expects comma separated integers, got '" + s + "'");
    }
  }
  return out;
}

void write_fold_outputs(const fs::path& out, const std::vector<FoldRunResult>& results, RunManifest& man) {
  for (const auto& r : results) {
    const auto path = out / ("fold_" + std::to_string(r.fold) + ".json");
    write_json(path, fold_run_to_json(r));
    man.outputs.push_back(path.string());
  }
  const auto summary = cross_validation_summary(results);
  write_json(out / "summary.json", summary);
  man.outputs.push_back((out / "summary.json").string());
  std::cout << "fold  mean_ba  median_ba  base_mean_ba\n";
  for (const auto& f : summary["folds"]) {
    std::cout << f["fold"] << "     " << f["mean_ba"] << "  " << f["median_ba"] << "  " << f["base_mean_ba"] << "\n";
  }
  std::cout << "mean_ba_overall " << summary["mean_ba_overall"] << "\nbest_fold_mean " << summary["best_fold_mean"]
            << "\nbest_client " << summary["best_client"].dump() << "\n";
}

int cmd_simulate(const RunConfig& cfg, const std::string& data, const std::string& plan_path, const std::string& ckpt_dir,
                 const std::string& folds_arg, const std::string& out, const std::vector<std::string>& argv) {
  check_config(cfg);
  const auto plan = load_plan(plan_path);
  const auto folds = parse_folds(folds_arg, plan.size());
  for (int f : folds) check_fold(plan, f);
  // every checkpoint is loaded before any training starts
  std::map<int, FoldBase> bases;
  RunManifest man{"simulate", argv, run_config_to_json(cfg), seeds_to_json(cfg), {data, plan_path}};
  for (int f : folds) {
    const auto p = base_ckpt_path(ckpt_dir, f);
    if (!fs::exists(p)) throw IoError("missing base checkpoint for fold " + std::to_string(f) + ": " + p.string());
    bases.emplace(f, load_base(p));
    man.inputs.push_back(p.string());
  }
  const auto records = load_data(data);
  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  AuditLog log(out_dir / "audit.jsonl");
  const auto results = run_cross_validation(plan, bases, records, cfg.fed, cfg.data_seed(), folds, &log);
  man.outputs.push_back((out_dir / "audit.jsonl").string());
  write_fold_outputs(out_dir, results, man);
  man.write(out_dir / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------- fed-server / fed-client

int cmd_fed_server(RunConfig cfg, const std::string& bind, int clients, int fold, const std::string& ckpt,
                   double accept_timeout_s, const std::string& out, const std::vector<std::string>& argv) {
  if (clients < 1) throw UsageError("--clients must be >= 1");
  cfg.fed.min_available_clients = clients;
  check_config(cfg);
  Endpoint ep;
  try {
    ep = parse_endpoint(bind);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto base = load_base(ckpt);
  Listener listener(ep);
  std::cout << "listening on " << ep.host << ":" << listener.port() << std::endl;
  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  AuditLog log(out_dir / "audit.jsonl");
  ServeOptions opts;
  opts.expected_clients = clients;
  opts.accept_timeout = std::chrono::milliseconds(static_cast<long long>(accept_timeout_s * 1000));
  const auto result = serve_fold(listener, opts, cfg.fed, fold, base.config, base.weights, base.prep, cfg.data_seed(), &log);
  RunManifest man{"fed-server", argv, run_config_to_json(cfg), seeds_to_json(cfg), {ckpt}};
  man.config["fold"] = fold;
  man.config["bind"] = bind;
  man.outputs.push_back((out_dir / "audit.jsonl").string());
  write_fold_outputs(out_dir, std::vector<FoldRunResult>{result}, man);
  man.write(out_dir / "manifest.json");
  return 0;
}

SubjectRecord load_one_subject(const fs::path& path, const std::string& subject) {
  if (fs::is_regular_file(path)) {
    auto r = load_subject_file(path, CsvLayout::from_header());
    if (!subject.empty() && r.subject_id != subject) throw ConfigError(path.string() + " holds " + r.subject_id);
    return r;
  }
  auto recs = load_data(path);
  if (subject.empty()) {
    if (recs.size() != 1) throw UsageError(path.string() + " holds several subjects; pick one with --subject");
    return std::move(recs[0]);
  }
  for (auto& r : recs) {
    if (r.subject_id == subject) return std::move(r);
  }
  throw ConfigError("subject " + subject + " not found in " + path.string());
}

int cmd_fed_client(const std::string& server, const std::string& data, const std::string& subject, int attempts,
                   int backoff_ms) {
  if (attempts < 1) throw UsageError("--connect-attempts must be >= 1");
  ClientLoopOptions opts;
  try {
    opts.server = parse_endpoint(server);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  opts.connect_attempts = attempts;
  opts.initial_backoff = std::chrono::milliseconds(backoff_ms);
  FedClient client(load_one_subject(data, subject));
  const auto r = client_loop(opts, client, [&](int attempt, const std::string& why) {
    std::cerr << "connect attempt " << attempt << "/" << attempts << " failed: " << why << std::endl;
  });
  std::cout << client.id() << ": " << r.fits << " fits, " << r.evals << " evaluations\n";
  return 0;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const RunConfig& cfg, const std::string& ckpt, std::string prep_path, const std::string& data,
                 const std::string& plan_path, int fold, const std::string& out, const std::vector<std::string>& argv) {
  auto ck = load_checkpoint(ckpt);
  if (prep_path.empty()) prep_path = sidecar(ckpt, ".prep.json").string();
  const auto prep = load_preprocessing(prep_path);
  auto records = load_data(data);
  RunManifest man{"evaluate", argv, run_config_to_json(cfg), seeds_to_json(cfg), {ckpt, prep_path, data}, {out}};
  if (!plan_path.empty()) {
    const auto plan = load_plan(plan_path);
    check_fold(plan, fold);
    records = select_records(records, plan.folds[static_cast<std::size_t>(fold)]);
    man.inputs.push_back(plan_path);
  } else {
    fold = -1;
  }
  std::vector<ClientReport> reports;
  for (const auto& r : records) {
    const auto cd = prepare_client_data(r, prep, ck.config.n_positions, cfg.data_seed());
    reports.push_back(client_evaluate(r.subject_id, ck.weights, cd.test, ck.config));
  }
  const auto report = fold_summary(fold, std::move(reports));
  write_json(out, fold_report_to_json(report));
  man.write(sidecar(out, ".manifest.json"));
  std::cout << report.clients.size() << " subjects, mean BA " << report.summary.mean << " (" << report.summary.n
            << " scored)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated transformer training for multi-label activity recognition"};
  app.require_subcommand(1);
  const auto args = argv_list(argc, argv);
  std::function<int()> run;

  GenArgs gen;
  auto* g = app.add_subcommand("gen-synthetic", "write synthetic per-subject CSV files");
  g->add_option("--subjects", gen.subjects, "number of subjects")->capture_default_str();
  g->add_option("--minutes", gen.minutes, "rows per subject")->capture_default_str();
  g->add_option("--features", gen.features)->capture_default_str();
  g->add_option("--labels", gen.labels)->capture_default_str();
  g->add_option("--alpha", gen.alpha, "Dirichlet concentration of subject label mixes")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();
  g->callback([&] { run = [&] { return cmd_gen_synthetic(gen, args); }; });

  std::string fp_data, fp_out;
  std::uint64_t fp_seed = 7;
  int fp_folds = 5;
  auto* fp = app.add_subcommand("fold-plan", "assign subjects to cross-validation folds");
  fp->add_option("--data", fp_data, "directory of subject CSV files")->required()->check(CLI::ExistingDirectory);
  fp->add_option("--seed", fp_seed)->capture_default_str();
  fp->add_option("--folds", fp_folds)->capture_default_str();
  fp->add_option("--out", fp_out, "fold plan JSON")->required();
  fp->callback([&] { run = [&] { return cmd_fold_plan(fp_data, fp_seed, fp_folds, fp_out, args); }; });

  ConfigArgs s_cfg;
  std::string s_data, s_out, s_best;
  int s_budget = 10, s_epochs = 0;
  auto* s = app.add_subcommand("search", "random search over the model grid");
  s_cfg.add(s);
  s->add_option("--data", s_data)->required()->check(CLI::ExistingDirectory);
  s->add_option("--budget", s_budget, "number of trials")->capture_default_str();
  auto* s_epochs_opt = s->add_option("--epochs", s_epochs, "training epochs per trial");
  s->add_option("--out", s_out, "trial log (JSON lines)")->required();
  s->add_option("--best", s_best, "best config file (default: best_config.json next to --out)");
  s->callback([&] {
    run = [&] {
      auto c = s_cfg.resolve();
      override_if(s_epochs_opt, s_epochs, c.train.epochs);
      if (s_cfg.printed(c)) return 0;
      return cmd_search(c, s_data, s_budget, s_out, s_best, args);
    };
  });

  ConfigArgs p_cfg;
  std::string p_data, p_plan, p_out;
  int p_fold = 0, p_epochs = 0;
  double p_lr = 0;
  auto* p = app.add_subcommand("pretrain", "train the base model on a fold's base subjects");
  p_cfg.add(p);
  p->add_option("--data", p_data)->required()->check(CLI::ExistingDirectory);
  p->add_option("--fold-plan", p_plan)->required()->check(CLI::ExistingFile);
  p->add_option("--fold", p_fold)->capture_default_str();
  auto* p_epochs_opt = p->add_option("--epochs", p_epochs, "desk 50, paper 20000");
  auto* p_lr_opt = p->add_option("--lr", p_lr, "desk 1e-3, paper 4e-5");
  p->add_option("--out", p_out, "checkpoint path (default runs/base/base_fold<K>.ckpt)");
  p->callback([&] {
    run = [&] {
      auto c = p_cfg.resolve();
      override_if(p_epochs_opt, p_epochs, c.train.epochs);
      override_if(p_lr_opt, p_lr, c.train.learning_rate);
      if (p_cfg.printed(c)) return 0;
      return cmd_pretrain(c, p_data, p_plan, p_fold, p_out, args);
    };
  });

  // federated knobs shared by simulate and fed-server
  int f_rounds = 0, f_local_epochs = 0;
  double f_local_lr = 0;
  auto add_fed = [&](CLI::App* a) {
    return std::array<CLI::Option*, 3>{a->add_option("--rounds", f_rounds, "default 4"),
                                       a->add_option("--local-epochs", f_local_epochs, "desk 20, paper 2000"),
                                       a->add_option("--local-lr", f_local_lr, "desk 1e-4, paper 4e-5")};
  };
  auto apply_fed = [&](const std::array<CLI::Option*, 3>& o, RunConfig& c) {
    override_if(o[0], f_rounds, c.fed.rounds);
    override_if(o[1], f_local_epochs, c.fed.local_epochs);
    override_if(o[2], f_local_lr, c.fed.local_lr);
  };

  ConfigArgs sim_cfg;
  std::string sim_data, sim_plan, sim_ckpt, sim_folds, sim_out;
  auto* sim = app.add_subcommand("simulate", "federated cross-validation, all clients in-process");
  sim_cfg.add(sim);
  sim->add_option("--data", sim_data)->required()->check(CLI::ExistingDirectory);
  sim->add_option("--fold-plan", sim_plan)->required()->check(CLI::ExistingFile);
  sim->add_option("--base-ckpt-dir", sim_ckpt, "holds base_fold<K>.ckpt and .prep.json")->required();
  sim->add_option("--folds", sim_folds, "comma separated folds (default all)");
  const auto sim_fed = add_fed(sim);
  sim->add_option("--out", sim_out, "output directory")->required();
  sim->callback([&] {
    run = [&] {
      auto c = sim_cfg.resolve();
      apply_fed(sim_fed, c);
      if (sim_cfg.printed(c)) return 0;
      return cmd_simulate(c, sim_data, sim_plan, sim_ckpt, sim_folds, sim_out, args);
    };
  });

  ConfigArgs srv_cfg;
  std::string srv_bind = "127.0.0.1:8099", srv_ckpt, srv_out;
  int srv_clients = 12, srv_fold = 0;
  double srv_accept = 600;
  auto* srv = app.add_subcommand("fed-server", "run one fold as a TCP federated server");
  srv_cfg.add(srv);
  srv->add_option("--bind", srv_bind, "host:port, port 0 picks a free one")->capture_default_str();
  srv->add_option("--clients", srv_clients, "clients to wait for")->capture_default_str();
  srv->add_option("--fold", srv_fold)->capture_default_str();
  srv->add_option("--ckpt", srv_ckpt, "base checkpoint (with .prep.json beside it)")->required()->check(CLI::ExistingFile);
  srv->add_option("--accept-timeout", srv_accept, "seconds to wait for all clients")->capture_default_str();
  const auto srv_fed = add_fed(srv);
  srv->add_option("--out", srv_out, "output directory")->required();
  srv->callback([&] {
    run = [&] {
      auto c = srv_cfg.resolve();
      apply_fed(srv_fed, c);
      c.fed.min_available_clients = srv_clients;
      if (srv_cfg.printed(c)) return 0;
      return cmd_fed_server(c, srv_bind, srv_clients, srv_fold, srv_ckpt, srv_accept, srv_out, args);
    };
  });

  std::string cl_server = "127.0.0.1:8099", cl_data, cl_subject;
  int cl_attempts = 5, cl_backoff = 200;
  auto* cl = app.add_subcommand("fed-client", "serve one subject's data to a federated server");
  cl->add_option("--server", cl_server)->capture_default_str();
  cl->add_option("--subject-data", cl_data, "subject CSV file, or a directory")->required()->check(CLI::ExistingPath);
  cl->add_option("--subject", cl_subject, "subject id when --subject-data is a directory");
  cl->add_option("--connect-attempts", cl_attempts)->capture_default_str();
  cl->add_option("--backoff-ms", cl_backoff, "first retry delay, doubled each time")->capture_default_str();
  cl->callback([&] { run = [&] { return cmd_fed_client(cl_server, cl_data, cl_subject, cl_attempts, cl_backoff); }; });

  ConfigArgs e_cfg;
  std::string e_ckpt, e_prep, e_data, e_plan, e_out;
  int e_fold = 0;
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on subjects' test splits");
  e_cfg.add(ev);
  ev->add_option("--ckpt", e_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--prep", e_prep, "preprocessing JSON (default: beside the checkpoint)");
  ev->add_option("--data", e_data)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--fold-plan", e_plan, "restrict to one fold's clients")->check(CLI::ExistingFile);
  ev->add_option("--fold", e_fold)->capture_default_str();
  ev->add_option("--out", e_out, "report JSON")->required();
  ev->callback([&] {
    run = [&] { return cmd_evaluate(e_cfg.resolve(), e_ckpt, e_prep, e_data, e_plan, e_fold, e_out, args); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
