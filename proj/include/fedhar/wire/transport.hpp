#pragma once

// TCP execution of a federated fold. Per client the server expects
//   HELLO, then per round ROUND_CONFIG/FIT_RESULT and EVAL_REQUEST/EVAL_RESULT, then DONE.

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <thread>
#include <vector>

#include "fedhar/errors.hpp"
#include "fedhar/fedavg.hpp"
#include "fedhar/wire/messages.hpp"
#include "fedhar/wire/socket.hpp"

namespace fedhar::wire {

inline void send_error(Connection& c, ErrorCode code, const std::string& message) noexcept {
  try {
    c.send(MsgType::error, encode_error({code, message}));
  } catch (...) {
  }
}

/// Server-side proxy over one accepted connection.
class RemoteClient final : public ClientProxy {
 public:
  RemoteClient(Connection conn, Hello hello) : conn_(std::move(conn)), hello_(std::move(hello)) {}

  const std::string& id() const override { return hello_.client_id; }
  std::uint64_t announced_examples() const noexcept { return hello_.num_examples; }

  ClientUpdate fit(const RoundSpec& spec, const WeightSet& global, std::chrono::milliseconds timeout) override {
    if (!awaiting_stale_fit_) reject_unsolicited();
    conn_.send(MsgType::round_config, encode_round_config(spec, global));
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      Frame f = receive_until(deadline);
      if (f.type != MsgType::fit_result) fail_order(f.type, "FIT_RESULT");
      auto m = decode_fit_result(f.payload, spec.model);
      if (m.round == spec.round && m.attempt < spec.attempt) continue;  // late answer to an aborted attempt
      if (m.round != spec.round || m.attempt != spec.attempt) {
        fail_order(f.type, "FIT_RESULT for round " + std::to_string(spec.round));
      }
      awaiting_stale_fit_ = false;
      return std::move(m.update);
    }
  }

  ClientReport evaluate(const RoundSpec& spec, const WeightSet& global, std::chrono::milliseconds timeout) override {
    reject_unsolicited();
    conn_.send(MsgType::eval_request, encode_eval_request(spec.round, global));
    Frame f = receive_until(std::chrono::steady_clock::now() + timeout);
    if (f.type != MsgType::eval_result) fail_order(f.type, "EVAL_RESULT");
    auto m = decode_eval_result(f.payload);
    if (m.round != spec.round) fail_order(f.type, "EVAL_RESULT for round " + std::to_string(spec.round));
    if (m.report.subject_id != id()) throw ProtocolError("client " + id() + " reported as " + m.report.subject_id);
    return std::move(m.report);
  }

  void finish() override {
    try {
      conn_.send(MsgType::done, {});
    } catch (const IoError&) {
    }
  }

  /// Called by the driver when a round attempt timed out for anyone.
  void expect_stale_fit() noexcept { awaiting_stale_fit_ = true; }

 private:
  Frame receive_until(std::chrono::steady_clock::time_point deadline) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() < 1) left = std::chrono::milliseconds(1);
    try {
      Frame f = conn_.receive(left);
      if (f.type == MsgType::error) {
        const auto e = decode_error(f.payload);
        throw ProtocolError("client " + id() + " reported " + error_code_name(e.code) + ": " + e.message);
      }
      return f;
    } catch (const TimeoutError&) {
      awaiting_stale_fit_ = true;
      throw TimeoutError("client " + id() + " missed the round deadline");
    }
  }

  // Anything arriving while the server is not waiting for an answer is out of order.
  void reject_unsolicited() {
    if (!conn_.has_pending()) return;
    Frame f;
    try {
      f = conn_.receive(std::chrono::milliseconds(0));
    } catch (const TimeoutError&) {
      return;
    } catch (const Error& e) {
      throw ProtocolError("client " + id() + ": " + e.what());
    }
    fail_order(f.type, "nothing");
  }

  [[noreturn]] void fail_order(MsgType got, const std::string& expected) {
    const std::string msg = std::string("received ") + type_name(got) + ", expected " + expected;
    send_error(conn_, ErrorCode::out_of_order, msg);
    conn_.close();
    throw ProtocolError("client " + id() + ": " + msg);
  }

  Connection conn_;
  Hello hello_;
  bool awaiting_stale_fit_ = false;
};

struct ServeOptions {
  int expected_clients = 12;
  std::chrono::milliseconds accept_timeout{std::chrono::minutes(10)};
  std::chrono::milliseconds hello_timeout{std::chrono::seconds(30)};
  bool evaluate_base = false;  // an EVAL_REQUEST ahead of round 0 breaks the per-round order clients expect
};

/// Accepts `expected_clients` HELLOs on the listener, runs the fold over TCP
/// and sends DONE to everyone.
inline FoldRunResult serve_fold(Listener& listener, const ServeOptions& opts, const FedConfig& config, int fold,
                                const ModelConfig& model, const WeightSet& initial, const Preprocessing& prep,
                                std::uint64_t data_seed, AuditLog* log = nullptr) {
  config.validate();
  if (opts.expected_clients < config.min_available_clients) {
    throw ConfigError("expecting " + std::to_string(opts.expected_clients) + " clients but " +
                      std::to_string(config.min_available_clients) + " are required");
  }
  std::vector<std::unique_ptr<RemoteClient>> clients;
  std::map<std::string, bool> seen;
  const auto deadline = std::chrono::steady_clock::now() + opts.accept_timeout;
  while (clients.size() < static_cast<std::size_t>(opts.expected_clients)) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      throw AvailabilityError(std::to_string(clients.size()) + " of " + std::to_string(opts.expected_clients) +
                              " clients connected before the deadline");
    }
    auto sock = listener.accept(left);
    if (!sock) continue;
    Connection conn(std::move(*sock));
    Hello hello;
    try {
      Frame f = conn.receive(opts.hello_timeout);
      if (f.type != MsgType::hello) {
        send_error(conn, ErrorCode::out_of_order, std::string("received ") + type_name(f.type) + ", expected HELLO");
        continue;
      }
      hello = decode_hello(f.payload);
    } catch (const Error&) {
      continue;  // a broken handshake does not take the server down
    }
    if (seen.count(hello.client_id)) {
      send_error(conn, ErrorCode::duplicate_client, "client id " + hello.client_id + " already connected");
      continue;
    }
    seen[hello.client_id] = true;
    if (log) {
      log->record({{"fold", fold}, {"round", -1}, {"event", "hello"}, {"client_id", hello.client_id},
                   {"num_examples", hello.num_examples}});
    }
    clients.push_back(std::make_unique<RemoteClient>(std::move(conn), std::move(hello)));
  }
  std::vector<ClientProxy*> proxies;
  for (auto& c : clients) proxies.push_back(c.get());
  FedServer server(config, log, {.concurrent = true, .evaluate_base = opts.evaluate_base});
  auto result = server.run_fold(fold, model, initial, prep, data_seed, proxies);
  for (auto& c : clients) {
    c->finish();
    if (log) log->record({{"fold", fold}, {"round", config.rounds}, {"event", "done"}, {"client_id", c->id()}});
  }
  return result;
}

struct ClientLoopOptions {
  Endpoint server;
  int connect_attempts = 5;
  std::chrono::milliseconds initial_backoff{200};
};

struct ClientLoopResult {
  int fits = 0;
  int evals = 0;
};

/// Connects with exponential backoff; IoError once every attempt failed.
inline Connection connect_with_retry(const ClientLoopOptions& opts,
                                     const std::function<void(int, const std::string&)>& on_fail = {}) {
  auto backoff = opts.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      return Connection(connect_to(opts.server));
    } catch (const IoError& e) {
      if (on_fail) on_fail(attempt, e.what());
      if (attempt >= opts.connect_attempts) {
        throw IoError("giving up after " + std::to_string(attempt) + " connection attempts: " + e.what());
      }
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
}

/// Serves one FedClient until the server says DONE.
inline ClientLoopResult client_loop(const ClientLoopOptions& opts, FedClient& client,
                                    const std::function<void(int, const std::string&)>& on_connect_fail = {}) {
  Connection conn = connect_with_retry(opts, on_connect_fail);
  conn.send(MsgType::hello, encode_hello({client.id(), client.raw_examples()}));
  std::optional<RoundSpec> spec;
  ClientLoopResult out;
  for (;;) {
    Frame f = conn.receive();
    switch (f.type) {
      case MsgType::round_config: {
        auto m = decode_round_config(f.payload);
        spec = m.spec;
        const auto update = client.fit(*spec, m.weights);
        conn.send(MsgType::fit_result, encode_fit_result(spec->round, spec->attempt, update));
        ++out.fits;
        break;
      }
      case MsgType::eval_request: {
        if (!spec) {
          send_error(conn, ErrorCode::out_of_order, "EVAL_REQUEST before any ROUND_CONFIG");
          throw ProtocolError("server sent EVAL_REQUEST before ROUND_CONFIG");
        }
        auto m = decode_eval_request(f.payload, spec->model);
        const auto report = client.evaluate(*spec, m.weights);
        conn.send(MsgType::eval_result, encode_eval_result(m.round, report));
        ++out.evals;
        break;
      }
      case MsgType::done:
        return out;
      case MsgType::error: {
        const auto e = decode_error(f.payload);
        throw ProtocolError(std::string("server error ") + error_code_name(e.code) + ": " + e.message);
      }
      default:
        send_error(conn, ErrorCode::out_of_order, std::string("client cannot accept ") + type_name(f.type));
        throw ProtocolError(std::string("unexpected ") + type_name(f.type) + " from server");
    }
  }
}

}  // namespace fedhar::wire
