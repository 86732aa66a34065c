#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "fedhar/checkpoint.hpp"
#include "fedhar/fedavg.hpp"
#include "fedhar/preprocessing.hpp"
#include "fedhar/synthetic.hpp"
#include "fedhar/wire/codec.hpp"
#include "fedhar/wire/frame.hpp"
#include "fedhar/wire/messages.hpp"
#include "fedhar/wire/transport.hpp"

namespace fedhar::wire {
namespace {

Bytes read_hex(const std::string& name) {
  std::ifstream f(std::string(FEDHAR_FIXTURE_DIR) + "/" + name);
  if (!f) throw std::runtime_error("missing fixture " + name);
  Bytes out;
  std::string tok;
  while (f >> tok) out.push_back(static_cast<std::uint8_t>(std::stoul(tok, nullptr, 16)));
  return out;
}

// Bitwise reflected CRC-32 (poly 0xEDB88320), independent of zlib.
std::uint32_t crc32_reference(std::span<const std::uint8_t> data) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (auto b : data) {
    c ^= b;
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

WeightSet random_weights(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(1, 5), rank(1, 3), dim(1, 6), byte(0, 255);
  WeightSet ws;
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    Shape s(static_cast<std::size_t>(rank(rng)));
    for (auto& d : s) d = static_cast<std::size_t>(dim(rng));
    Tensor t(s);
    // arbitrary bit patterns, NaN payloads and signed zeros included
    for (auto& v : t.data()) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits = (bits << 8) | static_cast<std::uint32_t>(byte(rng));
      v = std::bit_cast<float>(bits);
    }
    ws.add("t" + std::to_string(i) + std::string(static_cast<std::size_t>(i % 3), 'x'), std::move(t));
  }
  return ws;
}

TEST(Crc32, CheckValue) {
  const std::string s = "123456789";
  const auto bytes = std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  EXPECT_EQ(crc32(bytes), 0xCBF43926u);
  EXPECT_EQ(crc32_reference(bytes), 0xCBF43926u);
}

TEST(WeightBlob, SingleTensorGoldenBytes) {
  WeightSet w;
  w.add("b", Tensor({2}, {1.0f, -1.0f}));
  const auto blob = encode_weights(w);
  const Bytes head{0x01, 0x00, 'b', 0x01, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x80, 0xBF};
  ASSERT_EQ(blob.size(), head.size() + 4);
  EXPECT_TRUE(std::equal(head.begin(), head.end(), blob.begin()));
  EXPECT_EQ(blob, read_hex("single_tensor_blob.hex"));
  ByteReader tail{std::span<const std::uint8_t>(blob).subspan(16)};
  EXPECT_EQ(tail.u32(), crc32_reference(std::span(blob).first(16)));
  EXPECT_TRUE(bitwise_equal(decode_weight_blob(blob), w));
}

TEST(WeightBlob, TwoTensorGoldenBytes) {
  WeightSet w;
  w.add("a", Tensor({2, 1}, {0.5f, 2.0f}));
  w.add("z", Tensor({1}, {-0.25f}));
  EXPECT_EQ(encode_weights(w), read_hex("two_tensor_blob.hex"));
}

TEST(WeightBlob, RandomRoundTripsAreBitwise) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto w = random_weights(rng);
    const auto blob = encode_weights(w);
    EXPECT_TRUE(bitwise_equal(decode_weight_blob(blob), w));
    EXPECT_EQ(encode_weights(w), blob);
  }
}

TEST(WeightBlob, ModelRoundTripAndLayoutChecks) {
  ModelConfig c;
  c.n_features = 5;
  c.n_labels = 3;
  c.transformers_layers = 2;
  c.hidden_size = 8;
  c.n_positions = 4;
  c.n_heads = 2;
  const auto w = init_model(c);
  const auto blob = encode_weights(w);
  EXPECT_TRUE(bitwise_equal(decode_weights(blob, c), w));
  auto other = c;
  other.n_labels = 4;
  try {
    decode_weights(blob, other);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_NE(std::string(e.what()).find("out.w"), std::string::npos) << e.what();
  }
  other = c;
  other.transformers_layers = 1;
  EXPECT_THROW(decode_weights(blob, other), DecodeError);
}

TEST(WeightBlob, CorruptionAndTruncationDetected) {
  std::mt19937_64 rng(2);
  const auto w = random_weights(rng);
  const auto blob = encode_weights(w);
  for (std::size_t i = 0; i < blob.size(); ++i) {
    auto bad = blob;
    bad[i] ^= 0x10;
    EXPECT_THROW(decode_weight_blob(bad), DecodeError) << "byte " << i;
  }
  // a valid checksum over a truncated body still reports the offset
  Bytes body = encode_tensors(w);
  body.resize(body.size() - 3);
  ByteWriter bw;
  bw.bytes(body);
  bw.u32(crc32(body));
  try {
    decode_weight_blob(bw.data());
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  EXPECT_THROW(decode_weight_blob(Bytes{1, 2}), DecodeError);
}

TEST(Frame, DoneGoldenBytes) {
  EXPECT_EQ(frame_encode(MsgType::done, {}), (Bytes{0x01, 0x00, 0x00, 0x00, 0x06}));
  EXPECT_EQ(frame_encode(MsgType::done, {}), read_hex("done_frame.hex"));
  EXPECT_EQ(frame_encode(MsgType::error, encode_error({ErrorCode::out_of_order, "late"})),
            read_hex("error_frame.hex"));
  EXPECT_EQ(frame_encode(MsgType::hello, encode_hello({"c1", 300})), read_hex("hello_frame.hex"));
}

TEST(Frame, ConcatenatedFramesDecodeWithoutResidue) {
  Bytes stream = frame_encode(MsgType::hello, encode_hello({"abc", 7}));
  const auto second = frame_encode(MsgType::done, {});
  stream.insert(stream.end(), second.begin(), second.end());
  const auto [f1, n1] = frame_decode(stream);
  const auto [f2, n2] = frame_decode(std::span(stream).subspan(n1));
  EXPECT_EQ(f1.type, MsgType::hello);
  EXPECT_EQ(decode_hello(f1.payload), (Hello{"abc", 7}));
  EXPECT_EQ(f2.type, MsgType::done);
  EXPECT_EQ(n1 + n2, stream.size());

  FrameDecoder d;
  for (auto b : stream) d.feed(std::span(&b, 1));  // byte-at-a-time partial reads
  EXPECT_EQ(d.next()->type, MsgType::hello);
  EXPECT_EQ(d.next()->type, MsgType::done);
  EXPECT_FALSE(d.next());
  EXPECT_NO_THROW(d.finish());
}

TEST(Frame, OversizedLengthRejectedBeforeAllocation) {
  ByteWriter w;
  w.u32(0x80000000u);  // 2 GiB
  FrameDecoder d;
  EXPECT_THROW(d.feed(w.data()), ProtocolError);
  EXPECT_THROW(frame_decode(Bytes{0x00, 0x00, 0x00, 0x80, 0x06}), ProtocolError);
}

TEST(Frame, UnknownTypeAndTruncation) {
  FrameDecoder d;
  EXPECT_THROW(d.feed(Bytes{0x01, 0x00, 0x00, 0x00, 0x09}), ProtocolError);
  FrameDecoder t;
  t.feed(Bytes{0x05, 0x00, 0x00, 0x00, 0x01, 0xAA});
  EXPECT_FALSE(t.next());
  EXPECT_THROW(t.finish(), DecodeError);
  EXPECT_THROW(frame_decode(Bytes{0x05, 0x00, 0x00, 0x00, 0x01, 0xAA}), DecodeError);
}

ModelConfig small_model() {
  ModelConfig c;
  c.n_features = 4;
  c.n_labels = 2;
  c.transformers_layers = 1;
  c.hidden_size = 8;
  c.n_positions = 4;
  c.n_heads = 2;
  c.dropout = 0.25;
  c.seed = 0xDEADBEEFCAFEULL;
  return c;
}

Preprocessing small_prep() {
  return {{{0.5, -1.25, 3.0, 0.0}, {1.0, 2.0, 1e-6, 4.5}}, {1.5f, 0.25f}};
}

TEST(Messages, RoundConfigRoundTrip) {
  RoundSpec s;
  s.fold = 3;
  s.round = 2;
  s.attempt = 1;
  s.model = small_model();
  s.prep = small_prep();
  s.data_seed = 77;
  s.local_epochs = 2000;
  s.batch_size = 64;
  s.local_lr = 4e-5;
  s.seed = 123456789012345ULL;
  const auto w = init_model(s.model);
  const auto m = decode_round_config(encode_round_config(s, w));
  EXPECT_EQ(m.spec, s);
  EXPECT_TRUE(bitwise_equal(m.weights, w));
}

TEST(Messages, FitResultRoundTripIncludingSkip) {
  const auto c = small_model();
  ClientUpdate u{"client-A", init_model(c), 42, 0.125};
  const auto m = decode_fit_result(encode_fit_result(3, 1, u), c);
  EXPECT_EQ(m.round, 3);
  EXPECT_EQ(m.attempt, 1);
  EXPECT_EQ(m.update.client_id, "client-A");
  EXPECT_EQ(m.update.num_examples, 42u);
  EXPECT_EQ(m.update.train_loss, 0.125);
  EXPECT_TRUE(bitwise_equal(m.update.weights, u.weights));

  ClientUpdate skip{"client-B", {}, 0, 0};
  const auto s = decode_fit_result(encode_fit_result(0, 0, skip), c);
  EXPECT_TRUE(s.update.skipped());
  EXPECT_EQ(s.update.weights.size(), 0u);
}

TEST(Messages, EvalAndErrorRoundTrip) {
  const auto c = small_model();
  const auto w = init_model(c);
  const auto req = decode_eval_request(encode_eval_request(5, w), c);
  EXPECT_EQ(req.round, 5);
  EXPECT_TRUE(bitwise_equal(req.weights, w));
  const auto report = make_client_report("x", {{3, 4, 1, 2}, {0, 9, 0, 0}});
  const auto res = decode_eval_result(encode_eval_result(5, report));
  EXPECT_EQ(res.round, 5);
  EXPECT_EQ(res.report, report);
  const ErrorMsg e{ErrorCode::out_of_order, "FIT_RESULT before ROUND_CONFIG"};
  EXPECT_EQ(decode_error(encode_error(e)), e);
  EXPECT_THROW(decode_eval_result(Bytes{'{', 'x'}), DecodeError);
  EXPECT_THROW(decode_hello(Bytes{0x05, 0x00, 'a'}), DecodeError);
}

TEST(Messages, RandomPayloadsNeverCrashDecoders) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(0, 64), byte(0, 255);
  const auto c = small_model();
  for (int i = 0; i < 500; ++i) {
    Bytes p(static_cast<std::size_t>(len(rng)));
    for (auto& b : p) b = static_cast<std::uint8_t>(byte(rng));
    auto swallow = [](auto&& f) {
      try {
        f();
      } catch (const Error&) {
      }
    };
    swallow([&] { decode_hello(p); });
    swallow([&] { decode_round_config(p); });
    swallow([&] { decode_fit_result(p, c); });
    swallow([&] { decode_eval_request(p, c); });
    swallow([&] { decode_eval_result(p); });
    swallow([&] { decode_error(p); });
  }
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto c = small_model();
  const auto w = init_model(c);
  const auto bytes = encode_checkpoint(c, w);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FHG1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  const auto ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.config, c);
  EXPECT_TRUE(bitwise_equal(ck.weights, w));

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), DecodeError);
  bad = bytes;
  bad.back() ^= 1;
  EXPECT_THROW(decode_checkpoint(bad), DecodeError);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(30)), DecodeError);

  const auto dir = std::filesystem::temp_directory_path() / "fedhar_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir / "sub" / "base.ckpt", c, w);
  EXPECT_FALSE(std::filesystem::exists(dir / "sub" / "base.ckpt.tmp"));
  EXPECT_TRUE(bitwise_equal(load_checkpoint(dir / "sub" / "base.ckpt").weights, w));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Preprocessing, JsonAndBinaryRoundTrip) {
  const auto p = small_prep();
  EXPECT_EQ(preprocessing_from_json(preprocessing_to_json(p)), p);
  ByteWriter w;
  write_preprocessing(w, p);
  ByteReader r(w.data());
  EXPECT_EQ(read_preprocessing(r), p);
}

struct TcpFixture {
  ModelConfig model;
  std::vector<SubjectRecord> records;
  Preprocessing prep;
  WeightSet base;
  FedConfig fed;

  TcpFixture() {
    SyntheticSpec spec;
    spec.n_subjects = 2;
    spec.minutes_per_subject = 48;
    spec.n_features = 4;
    spec.n_labels = 2;
    spec.seed = 8;
    records = gen_synthetic(spec);
    model = small_model();
    prep.standardizer = fit_standardizer(records);
    prep.pos_weight = {1.0f, 1.0f};
    base = init_model(model);
    fed.rounds = 2;
    fed.min_available_clients = 2;
    fed.local_epochs = 1;
    fed.batch_size = 4;
    fed.local_lr = 1e-3;
    fed.seed = 5;
  }
};

TEST(Tcp, LoopbackMatchesSimulation) {
  TcpFixture fx;
  Listener listener({"127.0.0.1", 0});
  AuditLog log;
  std::vector<std::thread> threads;
  std::atomic<int> client_failures{0};
  for (const auto& r : fx.records) {
    threads.emplace_back([&, r] {
      try {
        FedClient client(r);
        client_loop({{"127.0.0.1", listener.port()}}, client);
      } catch (...) {
        ++client_failures;
      }
    });
  }
  std::optional<FoldRunResult> served;
  try {
    served = serve_fold(listener, {.expected_clients = 2}, fx.fed, 0, fx.model, fx.base, fx.prep, 9, &log);
  } catch (const std::exception& e) {
    ADD_FAILURE() << e.what();
  }
  for (auto& t : threads) t.join();
  ASSERT_TRUE(served);
  const auto& tcp = *served;
  EXPECT_EQ(client_failures.load(), 0);

  std::vector<std::unique_ptr<InProcessClient>> owned;
  std::vector<ClientProxy*> proxies;
  for (const auto& r : fx.records) {
    owned.push_back(std::make_unique<InProcessClient>(r));
    proxies.push_back(owned.back().get());
  }
  const auto sim = FedServer(fx.fed).run_fold(0, fx.model, fx.base, fx.prep, 9, proxies);
  EXPECT_TRUE(bitwise_equal(tcp.final_weights, sim.final_weights));
  for (std::size_t i = 0; i < sim.final_report().clients.size(); ++i) {
    EXPECT_EQ(tcp.final_report().clients[i], sim.final_report().clients[i]);
  }
  EXPECT_EQ(log.count("hello"), 2u);
  EXPECT_EQ(log.count("fit_result"), 4u);
  EXPECT_EQ(log.count("eval_result"), 4u);
  EXPECT_EQ(log.count("done"), 2u);
}

TEST(Tcp, FitResultBeforeRoundConfigGetsOutOfOrderError) {
  TcpFixture fx;
  auto fc = fx.fed;
  fc.min_available_clients = 1;
  Listener listener({"127.0.0.1", 0});
  std::optional<ErrorMsg> received;
  std::thread rogue([&] {
    Connection conn(connect_to({"127.0.0.1", listener.port()}));
    ClientUpdate u{"rogue", fx.base, 3, 0};
    Bytes both = frame_encode(MsgType::hello, encode_hello({"rogue", 10}));
    const auto fit = frame_encode(MsgType::fit_result, encode_fit_result(0, 0, u));
    both.insert(both.end(), fit.begin(), fit.end());
    conn.socket().send_all(both);
    try {
      for (;;) {
        Frame f = conn.receive(std::chrono::seconds(20));
        if (f.type == MsgType::error) {
          received = decode_error(f.payload);
          break;
        }
      }
    } catch (const Error&) {
    }
  });
  // let both frames land before the server looks at the connection
  std::this_thread::sleep_for(std::chrono::milliseconds(200));
  EXPECT_THROW(serve_fold(listener, {.expected_clients = 1}, fc, 0, fx.model, fx.base, fx.prep, 1), ProtocolError);
  rogue.join();
  ASSERT_TRUE(received);
  EXPECT_EQ(received->code, ErrorCode::out_of_order);
  EXPECT_STREQ(error_code_name(received->code), "out_of_order");
}

TEST(Tcp, ClientGivesUpAfterFiveAttempts) {
  std::uint16_t port = 0;
  {
    Listener probe({"127.0.0.1", 0});
    port = probe.port();
  }  // closed again: nothing listens there now
  ClientLoopOptions opts{{"127.0.0.1", port}, 5, std::chrono::milliseconds(5)};
  int attempts = 0;
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(connect_with_retry(opts, [&](int, const std::string&) { ++attempts; }), IoError);
  EXPECT_EQ(attempts, 5);
  // 5 + 10 + 20 + 40 ms of backoff between the attempts
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(75));
}

TEST(Tcp, EndpointParsing) {
  EXPECT_EQ(parse_endpoint("10.0.0.1:9000").port, 9000);
  EXPECT_EQ(parse_endpoint("10.0.0.1").port, 8099);
  EXPECT_EQ(parse_endpoint("localhost").host, "localhost");
  EXPECT_THROW(parse_endpoint("host:99999"), ConfigError);
}

}  // namespace
}  // namespace fedhar::wire
