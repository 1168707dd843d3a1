#include <atomic>
#include <filesystem>
#include <map>
#include <set>
#include <thread>

#include <unistd.h>

#include "doctest.h"
#include "dnd/checkpoint.hpp"
#include "dnd/errors.hpp"
#include "dnd/gateway.hpp"

using namespace dnd;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  Dataset data;
  std::vector<Classifier> models;
  DenoisingAutoencoder ae{{1, 12, 12}, 32, 16, std::uint64_t{3}};
  VariationalAutoencoder vae{{1, 12, 12}, 32, 8, std::uint64_t{4}};
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    fx.data = gen_synthetic_dataset(DataConfig{}, 600, Split::train, 300);
    for (std::size_t i = 0; i < 2; ++i) {
      ArchitectureSpec s;
      s.hidden_widths = {32};
      Classifier m = build_classifier(s, 40 + i);
      TrainConfig cfg;
      cfg.epochs = 4;
      cfg.seed = i;
      train_supervised(m, fx.data, cfg);
      fx.models.push_back(std::move(m));
    }
    TrainConfig fast;
    fast.epochs = 3;
    fast.lr = 1.0;
    train_denoising_ae(fx.ae, fx.data, 0.2, fast);
    train_vae(fx.vae, fx.data, 1e-4, fast);
    return fx;
  }();
  return f;
}

// Scores every sequence with sigmoid(bias).
SequenceDetector constant_detector(double bias) {
  SequenceDetector det(kPairFeatureDim, 4, std::uint64_t{1});
  for (Tensor& t : det.params()) std::fill(t.data.begin(), t.data.end(), 0.0);
  det.params()[kReadoutB][0] = bias;
  return det;
}

GatewayModels make_models(double sentinel_bias) {
  const Fixture& f = fixture();
  ArchitectureSpec decoy = decoy_spec(f.models[0].spec());
  return {DefensePipeline{EnsembleRegistry(f.models, 1), f.ae, f.vae, AdvDetector(build_classifier(detector_spec(), 5)),
                          build_classifier(decoy, 6), DefenseConfig{}},
          constant_detector(sentinel_bias)};
}

GatewayConfig base_config() {
  GatewayConfig c;
  c.port = 0;
  c.root_seed = 11;
  return c;
}

struct FakeClock {
  std::shared_ptr<double> now = std::make_shared<double>(1000.0);
  GatewayState::Clock fn() const {
    return [t = now] { return *t; };
  }
};

std::string req(const std::string& client, std::size_t i) { return request_line(client, fixture().data.images[i]); }

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dnd_gateway_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("parse_request validation") {
  const Tensor& img = fixture().data.images[0];
  const WireRequest ok = parse_request(request_line("alice", img));
  CHECK(ok.client_id == "alice");
  CHECK(ok.h == 12);
  CHECK(ok.w == 12);
  CHECK(ok.pixels == img.data);

  const auto code = [](const std::string& line) {
    try {
      parse_request(line);
    } catch (const WireError& e) {
      return e.code();
    }
    return std::string("ok");
  };
  CHECK(code("{not json") == "parse");
  CHECK(code("") == "parse");
  CHECK(code("[1, 2]") == "invalid_input");
  Json j = Json::parse(request_line("alice", img));
  CHECK(code(j.dump()) == "ok");
  const auto with = [&](const std::string& key, const Json& value) {
    Json m = j;
    m[key] = value;
    return m.dump();
  };
  CHECK(code(with("v", 2)) == "invalid_input");
  CHECK(code(with("v", "1")) == "invalid_input");
  CHECK(code(with("client_id", "")) == "invalid_input");
  CHECK(code(with("client_id", 5)) == "invalid_input");
  CHECK(code(with("h", 11)) == "invalid_input");
  CHECK(code(with("h", -12)) == "invalid_input");
  CHECK(code(with("w", 1.5)) == "invalid_input");
  Json px = j["pixels"];
  px[3] = 1.5;
  CHECK(code(with("pixels", px)) == "invalid_input");
  px[3] = -0.01;
  CHECK(code(with("pixels", px)) == "invalid_input");
  px[3] = "0.5";
  CHECK(code(with("pixels", px)) == "invalid_input");
  px = j["pixels"];
  px.erase(0);
  CHECK(code(with("pixels", px)) == "invalid_input");
  Json missing = j;
  missing.erase("pixels");
  CHECK(code(missing.dump()) == "invalid_input");
}

TEST_CASE("handle_line responses") {
  GatewayState state(make_models(-50.0), base_config());
  CHECK(state.handle_line("{oops") == R"({"error":"parse","v":1})");
  CHECK(state.handle_line(R"({"v":1,"client_id":"a","h":12,"w":12,"pixels":[0.5]})") ==
        R"({"error":"invalid_input","v":1})");
  // Well formed but not the served image size.
  Json small = {{"v", 1}, {"client_id", "a"}, {"h", 2}, {"w", 2}, {"pixels", {0.1, 0.2, 0.3, 0.4}}};
  CHECK(state.handle_line(small.dump()) == R"({"error":"invalid_input","v":1})");
  CHECK(state.handled_count() == 0);

  for (std::size_t i = 0; i < 20; ++i) {
    const Json r = Json::parse(state.handle_line(req("bob", i)));
    std::set<std::string> keys;
    for (const auto& [k, v] : r.items()) keys.insert(k);
    CHECK(keys == std::set<std::string>{"confidence", "label", "request_id", "v"});
    CHECK(r["v"] == 1);
    CHECK(r["request_id"] == "bob-" + std::to_string(i));
    CHECK((r["label"] >= 0 && r["label"] < 10));
    CHECK((r["confidence"] > 0.0 && r["confidence"] <= 1.0));
  }
  CHECK(state.handled_count() == 20);
  CHECK(state.session_state("bob") == SessionState::normal);
  CHECK_FALSE(state.session_state("nobody").has_value());
}

TEST_CASE("escalation to the decoy") {
  GatewayConfig cfg = base_config();
  GatewayState state(make_models(50.0), cfg);
  const Fixture& f = fixture();

  // Oracle: the first request has no pair, later ones score 1.
  std::vector<SessionState> expect;
  double ewma = 0.0;
  SessionState s = SessionState::normal;
  for (std::size_t i = 0; i < 12; ++i) {
    const double score = i == 0 ? 0.0 : 1.0;
    ewma = cfg.policy.lam * ewma + (1.0 - cfg.policy.lam) * score;
    if (s != SessionState::decoy) {
      if (ewma >= cfg.policy.theta) {
        s = SessionState::decoy;
      } else if (ewma >= cfg.policy.theta / 2.0) {
        s = SessionState::suspect;
      }
    }
    expect.push_back(s);
  }

  std::vector<int> labels;
  for (std::size_t i = 0; i < 12; ++i) labels.push_back(Json::parse(state.handle_line(req("eve", i)))["label"]);
  const auto audit = state.audit_entries();
  REQUIRE(audit.size() == 12);
  bool decoy_seen = false;
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(audit[i]["state"] == to_string(expect[i]));
    // A request is served under the state reached by the previous one.
    const bool routed = i > 0 && expect[i - 1] == SessionState::decoy;
    CHECK(audit[i]["served_by_decoy"] == routed);
    if (routed) {
      decoy_seen = true;
      CHECK(audit[i]["model_ids"] == Json::array({"decoy"}));
      const Tensor p = classify(state.models().pipeline.decoy, f.data.images[i]);
      CHECK(labels[i] == static_cast<int>(argmax(p.data)));
    }
  }
  CHECK(decoy_seen);
  CHECK(state.session_state("eve") == SessionState::decoy);

  // Other clients are unaffected.
  state.handle_line(req("carol", 0));
  CHECK(state.session_state("carol") == SessionState::normal);

  // With the sentinel layer off nothing escalates.
  cfg.defense.sentinel = false;
  GatewayState off(make_models(50.0), cfg);
  for (std::size_t i = 0; i < 12; ++i) off.handle_line(req("eve", i));
  for (const Json& e : off.audit_entries()) {
    CHECK(e["state"] == "NORMAL");
    CHECK(e["served_by_decoy"] == false);
  }
}

TEST_CASE("session expiry resets the state but not the sequence") {
  GatewayConfig cfg = base_config();
  cfg.idle_timeout_s = 60.0;
  FakeClock clock;
  GatewayState state(make_models(50.0), cfg, clock.fn());
  for (std::size_t i = 0; i < 8; ++i) state.handle_line(req("eve", i));
  CHECK(state.session_state("eve") == SessionState::decoy);
  *clock.now += 30.0;
  state.handle_line(req("eve", 8));
  CHECK(state.session_state("eve") == SessionState::decoy);
  *clock.now += 61.0;
  const Json r = Json::parse(state.handle_line(req("eve", 9)));
  CHECK(r["request_id"] == "eve-9");
  CHECK(state.session_state("eve") == SessionState::normal);
  const auto audit = state.audit_entries();
  CHECK(audit.back()["served_by_decoy"] == false);
  CHECK(audit.back()["timestamp"] == 1091.0);
}

TEST_CASE("reject_on_suspect") {
  GatewayConfig cfg = base_config();
  cfg.reject_on_suspect = true;
  cfg.defense.theta_adv = 0.0;
  GatewayState state(make_models(-50.0), cfg);
  const Json r = Json::parse(state.handle_line(req("mallory", 0)));
  CHECK(r["label"] == -1);
  CHECK(r["confidence"] == 0.0);
  CHECK(state.audit_entries()[0]["adversarial_suspect"] == true);

  cfg.reject_on_suspect = false;
  GatewayState flag_only(make_models(-50.0), cfg);
  const Json served = Json::parse(flag_only.handle_line(req("mallory", 0)));
  CHECK(served["label"] >= 0);
  CHECK(flag_only.audit_entries()[0]["adversarial_suspect"] == true);
}

TEST_CASE("transcripts are deterministic per client") {
  const auto run = [](bool interleave) {
    GatewayState state(make_models(-50.0), base_config());
    std::string transcript;
    for (std::size_t i = 0; i < 15; ++i) {
      transcript += state.handle_line(req("alice", i)) + "\n";
      if (interleave) state.handle_line(req("bob", i + 100));
    }
    return transcript;
  };
  const std::string a = run(false);
  CHECK(a == run(false));
  CHECK(a == run(true));

  GatewayConfig other = base_config();
  other.root_seed = 12;
  GatewayState state(make_models(-50.0), other);
  std::string b;
  for (std::size_t i = 0; i < 15; ++i) b += state.handle_line(req("alice", i)) + "\n";
  CHECK(client_seed(11, "alice") != client_seed(12, "alice"));
  CHECK(client_seed(11, "alice") != client_seed(11, "bob"));
  CHECK(b != a);
}

TEST_CASE("export_audit") {
  const fs::path dir = temp_dir("export");
  GatewayState state(make_models(-50.0), base_config());
  export_audit(state, dir / "empty.jsonl");
  CHECK(fs::exists(dir / "empty.jsonl"));
  CHECK(read_file(dir / "empty.jsonl").empty());

  for (std::size_t i = 0; i < 7; ++i) state.handle_line(req(i % 2 ? "a" : "b", i));
  state.handle_line("garbage");
  export_audit(state, dir / "audit.jsonl");
  const std::string text = read_file(dir / "audit.jsonl");
  std::size_t lines = 0, start = 0, nl;
  while ((nl = text.find('\n', start)) != std::string::npos) {
    const Json e = Json::parse(text.substr(start, nl - start));
    for (const char* key : {"timestamp", "client_id", "request_id", "seq", "label", "confidence",
                            "adversarial_suspect", "state", "model_ids", "served_by_decoy"}) {
      CHECK(e.contains(key));
    }
    CHECK(e == state.audit_entries()[lines]);
    ++lines;
    start = nl + 1;
  }
  CHECK(lines == 7);
  CHECK_THROWS_AS(export_audit(state, dir / "missing" / "sub" / "audit.jsonl"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("server over TCP") {
  GatewayState state(make_models(-50.0), base_config());
  GatewayServer server(state);
  server.start("127.0.0.1", 0);
  REQUIRE(server.port() > 0);
  std::thread loop([&] { server.run(); });

  {
    GatewayClient bad("127.0.0.1", server.port());
    CHECK(bad.round_trip("{\"v\":") == R"({"error":"parse","v":1})");
    CHECK(bad.round_trip(R"({"v":1,"client_id":"x","h":12,"w":12,"pixels":[]})") == R"({"error":"invalid_input","v":1})");
    Json out_of_range = Json::parse(req("x", 0));
    out_of_range["pixels"][0] = 2.0;
    CHECK(bad.round_trip(out_of_range.dump()) == R"({"error":"invalid_input","v":1})");
    CHECK(Json::parse(bad.round_trip(req("x", 1)))["request_id"] == "x-0");
  }

  const auto client_run = [&](const std::string& id, std::size_t offset) {
    GatewayClient c("127.0.0.1", server.port());
    for (std::size_t i = 0; i < 40; ++i) {
      const Json r = Json::parse(c.round_trip(req(id, offset + i)));
      if (r["request_id"] != id + "-" + std::to_string(i)) FAIL_CHECK("unexpected request id " << r.dump());
    }
  };
  std::thread t1(client_run, "p", 0);
  std::thread t2(client_run, "q", 200);
  t1.join();
  t2.join();

  CHECK_THROWS_AS([&] { GatewayServer second(state); second.start("127.0.0.1", server.port()); }(), IoError);

  server.stop();
  loop.join();

  const auto audit = state.audit_entries();
  CHECK(audit.size() == 81);
  std::map<std::string, std::vector<std::uint64_t>> seqs;
  for (const Json& e : audit) seqs[e["client_id"]].push_back(e["seq"]);
  for (const char* id : {"p", "q"}) {
    REQUIRE(seqs[id].size() == 40);
    for (std::size_t i = 0; i < 40; ++i) CHECK(seqs[id][i] == i);
  }
}

TEST_CASE("serve lifecycle from checkpoints") {
  const fs::path dir = temp_dir("serve");
  const Fixture& f = fixture();
  GatewayModels m = make_models(-50.0);
  GatewayConfig cfg = base_config();
  for (std::size_t i = 0; i < f.models.size(); ++i) {
    cfg.registry_paths.push_back(dir / ("f" + std::to_string(i) + ".dndw"));
    save_classifier(cfg.registry_paths.back(), f.models[i]);
  }
  cfg.ae_path = dir / "ae.dndw";
  cfg.vae_path = dir / "vae.dndw";
  cfg.detector_path = dir / "det.dndw";
  cfg.decoy_path = dir / "decoy.dndw";
  cfg.sentinel_path = dir / "sentinel.dndw";
  cfg.audit_path = dir / "audit.jsonl";
  save_autoencoder(cfg.ae_path, m.pipeline.ae);
  save_vae(cfg.vae_path, m.pipeline.vae);
  save_classifier(cfg.detector_path, m.pipeline.detector.model);
  save_classifier(cfg.decoy_path, m.pipeline.decoy);
  save_sequence_detector(cfg.sentinel_path, m.sentinel);

  const GatewayConfig back = GatewayConfig::from_json(Json::parse(cfg.to_json().dump()));
  CHECK(back.to_json() == cfg.to_json());

  SUBCASE("zero requests") {
    std::atomic<bool> stop{false};
    std::thread t([&] { serve(cfg, stop, [&](int) { stop = true; }); });
    t.join();
    CHECK(fs::exists(cfg.audit_path));
    CHECK(read_file(cfg.audit_path).empty());
  }

  SUBCASE("requests then shutdown flushes the audit") {
    std::atomic<bool> stop{false};
    std::atomic<int> port{0};
    std::thread t([&] { serve(cfg, stop, [&](int p) { port = p; }); });
    while (port == 0) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    {
      GatewayClient c("127.0.0.1", port);
      for (std::size_t i = 0; i < 5; ++i) c.round_trip(req("z", i));
      c.round_trip("nope");
    }
    stop = true;
    t.join();
    const std::string text = read_file(cfg.audit_path);
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
  }

  SUBCASE("load failure names the path") {
    GatewayConfig broken = cfg;
    broken.vae_path = dir / "no_such.dndw";
    try {
      load_gateway_models(broken);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("no_such.dndw") != std::string::npos);
    }
    broken = cfg;
    broken.registry_paths.clear();
    CHECK_THROWS_AS(load_gateway_models(broken), IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("GatewayConfig validation") {
  GatewayConfig c;
  c.port = 70000;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = GatewayConfig{};
  c.capacity = 4;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  Json j = GatewayConfig{}.to_json();
  j["policy"]["lam"] = 1.0;
  CHECK_THROWS_AS(GatewayConfig::from_json(j), ValidationError);
  j = GatewayConfig{}.to_json();
  j["checkpoints"]["registry"] = Json::array({"a.dndw"});
  CHECK(GatewayConfig::from_json(j, "/base").registry_paths[0] == fs::path("/base/a.dndw"));
}
