#pragma once

// FedAvg: client selection, weighted aggregation, local fit/eval and a
// transport-agnostic round driver. Transports implement ClientProxy.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/data.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/metrics.hpp"
#include "fedhar/model.hpp"
#include "fedhar/preprocessing.hpp"
#include "fedhar/rng.hpp"
#include "fedhar/training.hpp"

namespace fedhar {

struct FedConfig {
  int rounds = 4;
  double fit_fraction = 1.0;
  double eval_fraction = 1.0;
  int min_available_clients = 12;
  int local_epochs = 20;  // 2000 at full scale
  int batch_size = 64;
  double local_lr = 4e-5;
  std::uint64_t seed = 0;
  // live mode only
  double straggler_factor = 10.0;
  double first_round_timeout_s = 3600.0;
  double min_round_timeout_s = 5.0;

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    if (!(fit_fraction > 0.0 && fit_fraction <= 1.0)) throw ConfigError("fit_fraction must lie in (0,1]");
    if (!(eval_fraction > 0.0 && eval_fraction <= 1.0)) throw ConfigError("eval_fraction must lie in (0,1]");
    if (min_available_clients < 1) throw ConfigError("min_available_clients must be >= 1");
    if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(local_lr > 0.0)) throw ConfigError("local_lr must be positive");
    if (!(straggler_factor > 0.0) || !(first_round_timeout_s > 0.0) || !(min_round_timeout_s > 0.0)) {
      throw ConfigError("timeouts must be positive");
    }
  }

  static FedConfig paper() {
    FedConfig c;
    c.local_epochs = 2000;
    return c;
  }
};

inline nlohmann::json fed_config_to_json(const FedConfig& c) {
  return {{"rounds", c.rounds},
          {"fit_fraction", c.fit_fraction},
          {"eval_fraction", c.eval_fraction},
          {"min_available_clients", c.min_available_clients},
          {"local_epochs", c.local_epochs},
          {"batch_size", c.batch_size},
          {"local_lr", c.local_lr},
          {"seed", c.seed},
          {"straggler_factor", c.straggler_factor},
          {"first_round_timeout_s", c.first_round_timeout_s}};
}

/// ceil(fraction * n) ids by a shuffle seeded on (seed, round), returned sorted.
inline std::vector<std::string> select_clients(std::vector<std::string> available, double fraction,
                                               int min_available, std::uint64_t seed, int round) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("client fraction must lie in (0,1]");
  if (available.size() < static_cast<std::size_t>(std::max(min_available, 1))) {
    throw AvailabilityError(std::to_string(available.size()) + " clients available, " +
                            std::to_string(min_available) + " required");
  }
  std::sort(available.begin(), available.end());
  if (std::adjacent_find(available.begin(), available.end()) != available.end()) {
    throw ConfigError("duplicate client id");
  }
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(available.size()) - 1e-9));
  std::mt19937_64 rng(derive_seed({seed, static_cast<std::uint64_t>(round), 0x5e1ec7}));
  std::shuffle(available.begin(), available.end(), rng);
  available.resize(std::max<std::size_t>(n, 1));
  std::sort(available.begin(), available.end());
  return available;
}

struct ClientUpdate {
  std::string client_id;
  WeightSet weights;
  std::uint64_t num_examples = 0;  // 0 marks a skip (no local training data)
  double train_loss = 0;
  std::optional<ClientReport> eval_report;

  bool skipped() const noexcept { return num_examples == 0; }
};

/// Example-weighted mean per element, accumulated in double over updates in
/// client-id order, then rounded to float. Input order does not matter.
inline WeightSet aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw AggregationError("nothing to aggregate");
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return updates[a].client_id < updates[b].client_id; });
  const WeightSet& ref = updates[order[0]].weights;
  double total = 0;
  for (auto i : order) {
    const auto& u = updates[i];
    if (u.num_examples == 0) throw AggregationError("client " + u.client_id + " reported zero examples");
    if (u.weights.size() != ref.size()) {
      throw AggregationError("client " + u.client_id + " sent " + std::to_string(u.weights.size()) +
                             " tensors, expected " + std::to_string(ref.size()));
    }
    for (std::size_t p = 0; p < ref.size(); ++p) {
      const auto& mine = u.weights[p];
      const auto& theirs = ref[p];
      if (mine.name != theirs.name) {
        throw AggregationError("client " + u.client_id + " parameter " + mine.name + " where " + theirs.name +
                               " was expected");
      }
      if (mine.tensor.shape() != theirs.tensor.shape()) {
        throw AggregationError("client " + u.client_id + " parameter " + mine.name + " has shape " +
                               shape_str(mine.tensor.shape()) + ", expected " + shape_str(theirs.tensor.shape()));
      }
    }
    total += static_cast<double>(u.num_examples);
  }
  WeightSet out;
  std::vector<double> acc;
  for (std::size_t p = 0; p < ref.size(); ++p) {
    acc.assign(ref[p].tensor.numel(), 0.0);
    for (auto i : order) {
      const double n = static_cast<double>(updates[i].num_examples);
      const float* w = updates[i].weights[p].tensor.ptr();
      for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += n * static_cast<double>(w[e]);
    }
    Tensor t(ref[p].tensor.shape());
    for (std::size_t e = 0; e < acc.size(); ++e) t[e] = static_cast<float>(acc[e] / total);
    out.add(ref[p].name, std::move(t));
  }
  return out;
}

/// Everything a client needs for one round besides the global weights.
struct RoundSpec {
  int fold = 0;
  int round = 0;
  int attempt = 0;
  ModelConfig model;
  Preprocessing prep;
  std::uint64_t data_seed = 0;
  int local_epochs = 1;
  int batch_size = 64;
  double local_lr = 1e-3;
  std::uint64_t seed = 0;

  bool operator==(const RoundSpec&) const = default;
};

inline RoundSpec make_round_spec(const FedConfig& fc, int fold, int round, const ModelConfig& model,
                                 const Preprocessing& prep, std::uint64_t data_seed) {
  RoundSpec s;
  s.fold = fold;
  s.round = round;
  s.model = model;
  s.prep = prep;
  s.data_seed = data_seed;
  s.local_epochs = fc.local_epochs;
  s.batch_size = fc.batch_size;
  s.local_lr = fc.local_lr;
  s.seed = fc.seed;
  return s;
}

/// Seed of a client's training stream; identical in every execution mode.
inline std::uint64_t client_stream_seed(std::uint64_t seed, int fold, std::string_view client_id, int round) {
  return derive_seed({seed, static_cast<std::uint64_t>(fold), fnv1a(client_id), static_cast<std::uint64_t>(round)});
}

struct ClientData {
  std::vector<Window> train;
  std::vector<Window> test;
  std::vector<std::string> warnings;
};

/// Standardize with the broadcast statistics, window, and split 80/20.
inline ClientData prepare_client_data(const SubjectRecord& record, const Preprocessing& prep, int n_positions,
                                      std::uint64_t data_seed) {
  auto windows = make_windows(apply_standardizer(prep.standardizer, record), static_cast<std::size_t>(n_positions));
  auto split = split_train_test(windows, 0.8, data_seed);
  return {std::move(split.train), std::move(split.test), std::move(split.warnings)};
}

/// Local training with a fresh optimizer. Empty data yields a skip update.
inline ClientUpdate client_fit(const std::string& client_id, const WeightSet& global, std::span<const Window> train_windows,
                               const RoundSpec& spec) {
  ClientUpdate u;
  u.client_id = client_id;
  if (train_windows.empty()) return u;
  TrainConfig tc;
  tc.epochs = spec.local_epochs;
  tc.batch_size = spec.batch_size;
  tc.learning_rate = spec.local_lr;
  tc.seed = client_stream_seed(spec.seed, spec.fold, client_id, spec.round);
  auto result = train(global, spec.model, train_windows, tc, spec.prep.pos_weight);
  u.weights = std::move(result.weights);
  u.num_examples = train_windows.size();
  u.train_loss = result.history.epoch_loss.empty() ? 0.0 : result.history.epoch_loss.back();
  return u;
}

inline ClientReport client_evaluate(const std::string& client_id, const WeightSet& global,
                                    std::span<const Window> test_windows, const ModelConfig& model) {
  if (test_windows.empty()) {
    return make_client_report(client_id, std::vector<ConfusionCounts>(static_cast<std::size_t>(model.n_labels)));
  }
  return evaluate(global, model, test_windows, client_id);
}

/// A client holding its raw local record. Windows are rebuilt whenever the
/// broadcast model config, statistics or data seed change.
class FedClient {
 public:
  explicit FedClient(SubjectRecord record) : record_(std::move(record)) {}

  const std::string& id() const noexcept { return record_.subject_id; }
  std::uint64_t raw_examples() const noexcept { return record_.timestamps.size(); }
  const SubjectRecord& record() const noexcept { return record_; }

  const ClientData& data(const RoundSpec& spec) {
    if (!cache_ || cache_->n_positions != spec.model.n_positions || cache_->data_seed != spec.data_seed ||
        !(cache_->prep == spec.prep)) {
      cache_ = Cached{spec.model.n_positions, spec.data_seed, spec.prep,
                      prepare_client_data(record_, spec.prep, spec.model.n_positions, spec.data_seed)};
    }
    return cache_->data;
  }

  ClientUpdate fit(const RoundSpec& spec, const WeightSet& global) {
    return client_fit(id(), global, data(spec).train, spec);
  }

  ClientReport evaluate(const RoundSpec& spec, const WeightSet& global) {
    return client_evaluate(id(), global, data(spec).test, spec.model);
  }

 private:
  struct Cached {
    int n_positions;
    std::uint64_t data_seed;
    Preprocessing prep;
    ClientData data;
  };
  SubjectRecord record_;
  std::optional<Cached> cache_;
};

/// Server-side handle on one client, whatever the transport.
class ClientProxy {
 public:
  virtual ~ClientProxy() = default;
  virtual const std::string& id() const = 0;
  virtual ClientUpdate fit(const RoundSpec& spec, const WeightSet& global, std::chrono::milliseconds timeout) = 0;
  virtual ClientReport evaluate(const RoundSpec& spec, const WeightSet& global,
                                std::chrono::milliseconds timeout) = 0;
  virtual void finish() {}
};

class InProcessClient final : public ClientProxy {
 public:
  explicit InProcessClient(SubjectRecord record) : client_(std::move(record)) {}
  const std::string& id() const override { return client_.id(); }
  ClientUpdate fit(const RoundSpec& spec, const WeightSet& global, std::chrono::milliseconds) override {
    return client_.fit(spec, global);
  }
  ClientReport evaluate(const RoundSpec& spec, const WeightSet& global, std::chrono::milliseconds) override {
    return client_.evaluate(spec, global);
  }

 private:
  FedClient client_;
};

/// JSON-lines event log; thread-safe.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(const std::filesystem::path& path) : out_(std::make_unique<std::ofstream>(path)) {
    if (!*out_) throw IoError("cannot write audit log " + path.string());
  }

  void record(nlohmann::json event) {
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    event["ts"] = std::chrono::duration<double>(now).count();
    std::lock_guard lock(mu_);
    if (out_) {
      *out_ << event.dump() << '\n';
      out_->flush();
    }
    events_.push_back(std::move(event));
  }

  std::size_t count(std::string_view name) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(std::count_if(events_.begin(), events_.end(), [&](const nlohmann::json& e) {
      return e.value("event", "") == name;
    }));
  }

  std::vector<nlohmann::json> events() const {
    std::lock_guard lock(mu_);
    return events_;
  }

 private:
  mutable std::mutex mu_;
  std::unique_ptr<std::ofstream> out_;
  std::vector<nlohmann::json> events_;
};

struct RoundState {
  int round = 0;
  WeightSet global;
  std::vector<ClientUpdate> updates;  // last round's, skips included
  std::optional<FoldReport> report;
};

/// Aggregates the non-skipped updates into the next global model.
inline RoundState run_round(const RoundState& state, std::vector<ClientUpdate> updates) {
  std::vector<ClientUpdate> used;
  for (const auto& u : updates) {
    if (!u.skipped()) used.push_back(u);
  }
  if (used.empty()) throw AggregationError("round " + std::to_string(state.round) + ": every client skipped");
  RoundState next;
  next.round = state.round + 1;
  next.global = aggregate(used);
  next.updates = std::move(updates);
  return next;
}

struct FoldRunResult {
  int fold = 0;
  WeightSet final_weights;
  std::optional<FoldReport> base_report;  // base checkpoint on the same client test sets
  std::vector<FoldReport> rounds;         // eval after each aggregation
  const FoldReport& final_report() const { return rounds.at(rounds.size() - 1); }
};

struct ServerOptions {
  bool concurrent = false;       // run client calls on worker threads
  bool evaluate_base = true;     // score the initial weights before round 0
};

/// Drives rounds against a fixed client set.
class FedServer {
 public:
  FedServer(FedConfig config, AuditLog* log = nullptr, ServerOptions options = {})
      : config_(std::move(config)), log_(log), options_(options) {
    config_.validate();
  }

  FoldRunResult run_fold(int fold, const ModelConfig& model, const WeightSet& initial, const Preprocessing& prep,
                         std::uint64_t data_seed, std::span<ClientProxy* const> clients) {
    check_layout(initial, model);
    std::vector<std::string> ids;
    for (auto* c : clients) ids.push_back(c->id());
    if (ids.size() < static_cast<std::size_t>(config_.min_available_clients)) {
      throw AvailabilityError(std::to_string(ids.size()) + " clients available, " +
                              std::to_string(config_.min_available_clients) + " required");
    }
    FoldRunResult result;
    result.fold = fold;
    RoundState state;
    state.global = initial;
    const RoundSpec base_spec = make_round_spec(config_, fold, 0, model, prep, data_seed);

    if (options_.evaluate_base) {
      const auto chosen = pick(clients, select_clients(ids, config_.eval_fraction, config_.min_available_clients,
                                                       config_.seed, -1));
      auto reports = eval_all(chosen, base_spec, state.global);
      for (const auto& r : reports) log("base_eval_result", fold, -1, &r.subject_id, {}, r.mean_ba);
      result.base_report = fold_summary(fold, std::move(reports));
    }

    for (int r = 0; r < config_.rounds; ++r) {
      RoundSpec spec = base_spec;
      spec.round = r;
      const auto chosen = pick(clients, select_clients(ids, config_.fit_fraction, config_.min_available_clients,
                                                       config_.seed, r));
      std::vector<ClientUpdate> updates;
      for (int attempt = 0;; ++attempt) {
        spec.attempt = attempt;
        log("broadcast", fold, r, nullptr, {}, {});
        try {
          updates = fit_all(chosen, spec, state.global);
          break;
        } catch (const TimeoutError& e) {
          log("timeout", fold, r, nullptr, {}, {});
          if (attempt >= 1) throw TimeoutError("round " + std::to_string(r) + " failed twice: " + e.what());
        }
      }
      for (const auto& u : updates) {
        log(u.skipped() ? "fit_skipped" : "fit_result", fold, r, &u.client_id, u.num_examples, {});
      }
      state = run_round(state, std::move(updates));
      log("aggregate", fold, r, nullptr, {}, {});

      const auto eval_chosen = pick(clients, select_clients(ids, config_.eval_fraction,
                                                            config_.min_available_clients, config_.seed, r));
      auto reports = eval_all(eval_chosen, spec, state.global);
      for (const auto& rep : reports) log("eval_result", fold, r, &rep.subject_id, {}, rep.mean_ba);
      state.report = fold_summary(fold, std::move(reports));
      result.rounds.push_back(*state.report);
    }
    result.final_weights = std::move(state.global);
    return result;
  }

  const FedConfig& config() const noexcept { return config_; }

 private:
  static std::vector<ClientProxy*> pick(std::span<ClientProxy* const> clients, const std::vector<std::string>& ids) {
    std::vector<ClientProxy*> out;
    for (const auto& id : ids) {
      auto it = std::find_if(clients.begin(), clients.end(), [&](ClientProxy* c) { return c->id() == id; });
      out.push_back(*it);
    }
    return out;
  }

  std::chrono::milliseconds round_timeout() const {
    double s = config_.first_round_timeout_s;
    if (!last_fit_seconds_.empty()) {
      auto v = last_fit_seconds_;
      std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
      s = std::max(config_.min_round_timeout_s, config_.straggler_factor * v[v.size() / 2]);
    }
    return std::chrono::milliseconds(static_cast<std::int64_t>(s * 1000.0));
  }

  template <typename R, typename F>
  std::vector<R> for_each_client(const std::vector<ClientProxy*>& chosen, F call) {
    std::vector<R> out;
    out.reserve(chosen.size());
    if (!options_.concurrent) {
      for (auto* c : chosen) out.push_back(call(c));
      return out;
    }
    std::vector<std::future<R>> futures;
    for (auto* c : chosen) futures.push_back(std::async(std::launch::async, [c, &call] { return call(c); }));
    // barrier: wait for everyone before surfacing the first failure
    for (auto& f : futures) f.wait();
    for (auto& f : futures) out.push_back(f.get());
    return out;
  }

  std::vector<ClientUpdate> fit_all(const std::vector<ClientProxy*>& chosen, const RoundSpec& spec,
                                    const WeightSet& global) {
    const auto timeout = round_timeout();
    std::vector<double> seconds(chosen.size());
    std::mutex mu;
    auto updates = for_each_client<ClientUpdate>(chosen, [&](ClientProxy* c) {
      const auto t0 = std::chrono::steady_clock::now();
      auto u = c->fit(spec, global, timeout);
      if (u.client_id != c->id()) throw ProtocolError("client " + c->id() + " answered as " + u.client_id);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard lock(mu);
      seconds[static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), c) - chosen.begin())] = dt;
      return u;
    });
    last_fit_seconds_ = std::move(seconds);
    return updates;
  }

  std::vector<ClientReport> eval_all(const std::vector<ClientProxy*>& chosen, const RoundSpec& spec,
                                     const WeightSet& global) {
    const auto timeout = round_timeout();
    return for_each_client<ClientReport>(chosen,
                                         [&](ClientProxy* c) { return c->evaluate(spec, global, timeout); });
  }

  void log(const char* event, int fold, int round, const std::string* client, std::optional<std::uint64_t> n,
           std::optional<double> ba) {
    if (!log_) return;
    nlohmann::json e{{"fold", fold}, {"round", round}, {"event", event}};
    if (client) e["client_id"] = *client;
    if (n) e["num_examples"] = *n;
    if (ba) e["mean_ba"] = *ba;
    log_->record(std::move(e));
  }

  FedConfig config_;
  AuditLog* log_;
  ServerOptions options_;
  std::vector<double> last_fit_seconds_;
};

}  // namespace fedhar
