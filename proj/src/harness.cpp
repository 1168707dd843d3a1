#include "dnd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "dnd/attacks.hpp"
#include "dnd/checkpoint.hpp"
#include "dnd/errors.hpp"
#include "dnd/metrics.hpp"

namespace dnd {

namespace {

// --- config JSON helpers ----------------------------------------------------

Json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"momentum", t.momentum},
          {"shuffle", t.shuffle}};
}

TrainConfig train_from(const Json& j, TrainConfig t) {
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.momentum = j.value("momentum", t.momentum);
  t.shuffle = j.value("shuffle", t.shuffle);
  return t;
}

Json attack_json(const AttackConfig& a) {
  return {{"epsilon", a.epsilon}, {"alpha", a.alpha}, {"steps", a.steps}, {"targeted", a.targeted},
          {"target_label", a.target_label}};
}

AttackConfig attack_from(const Json& j, AttackConfig a) {
  a.epsilon = j.value("epsilon", a.epsilon);
  a.alpha = j.value("alpha", a.alpha);
  a.steps = j.value("steps", a.steps);
  a.targeted = j.value("targeted", a.targeted);
  a.target_label = j.value("target_label", a.target_label);
  return a;
}

Json data_json(const DataConfig& d) {
  return {{"n_train", d.n_train}, {"n_test", d.n_test}, {"noise_p", d.noise_p}, {"shift", d.shift},
          {"jitter", d.jitter}};
}

DataConfig data_from(const Json& j, DataConfig d) {
  d.n_train = j.value("n_train", d.n_train);
  d.n_test = j.value("n_test", d.n_test);
  d.noise_p = j.value("noise_p", d.noise_p);
  d.shift = j.value("shift", d.shift);
  d.jitter = j.value("jitter", d.jitter);
  return d;
}

Json sentinel_json(const SentinelSettings& s) {
  const SentinelConfig& c = s.cfg;
  return {{"window", c.window},
          {"capacity", c.capacity},
          {"policy", {{"theta", c.policy.theta}, {"lam", c.policy.lam}}},
          {"idle_timeout_s", c.idle_timeout_s},
          {"hidden", c.hidden},
          {"session_length", c.session_length},
          {"attack", attack_json(c.attack)},
          {"train", train_json(c.train)},
          {"train_sessions", s.train_sessions},
          {"eval_sessions", s.eval_sessions},
          {"latency_runs", s.latency_runs},
          {"latency_queries", s.latency_queries}};
}

SentinelSettings sentinel_from(const Json& j, SentinelSettings s) {
  SentinelConfig& c = s.cfg;
  c.window = j.value("window", c.window);
  c.capacity = j.value("capacity", c.capacity);
  const Json pol = j.value("policy", Json::object());
  c.policy.theta = pol.value("theta", c.policy.theta);
  c.policy.lam = pol.value("lam", c.policy.lam);
  c.idle_timeout_s = j.value("idle_timeout_s", c.idle_timeout_s);
  c.hidden = j.value("hidden", c.hidden);
  c.session_length = j.value("session_length", c.session_length);
  c.attack = attack_from(j.value("attack", Json::object()), c.attack);
  c.train = train_from(j.value("train", Json::object()), c.train);
  s.train_sessions = j.value("train_sessions", s.train_sessions);
  s.eval_sessions = j.value("eval_sessions", s.eval_sessions);
  s.latency_runs = j.value("latency_runs", s.latency_runs);
  s.latency_queries = j.value("latency_queries", s.latency_queries);
  return s;
}

Json detector_json(const DetectorSettings& d) {
  return {{"spec", d.cfg.spec.to_json()},
          {"attack", attack_json(d.cfg.attack)},
          {"train", train_json(d.cfg.train)},
          {"target_accuracy", d.cfg.target_accuracy},
          {"max_epochs", d.cfg.max_epochs},
          {"clean_samples", d.clean_samples}};
}

DetectorSettings detector_from(const Json& j, DetectorSettings d) {
  if (j.contains("spec")) d.cfg.spec = ArchitectureSpec::from_json(j.at("spec"));
  d.cfg.attack = attack_from(j.value("attack", Json::object()), d.cfg.attack);
  d.cfg.train = train_from(j.value("train", Json::object()), d.cfg.train);
  d.cfg.target_accuracy = j.value("target_accuracy", d.cfg.target_accuracy);
  d.cfg.max_epochs = j.value("max_epochs", d.cfg.max_epochs);
  d.clean_samples = j.value("clean_samples", d.clean_samples);
  return d;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// --- staging ----------------------------------------------------------------

class Stager {
 public:
  Stager(std::string hash, StageTimings* timings) : hash_(std::move(hash)), timings_(timings) {}

  template <typename F>
  auto operator()(const std::string& name, F&& fn) -> decltype(fn()) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        record(name, t0);
      } else {
        auto out = fn();
        record(name, t0);
        return out;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, hash_, e.what());
    }
  }

 private:
  void record(const std::string& name, std::chrono::steady_clock::time_point t0) {
    if (timings_ != nullptr) {
      (*timings_)[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }

  std::string hash_;
  StageTimings* timings_;
};

double rate(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

Json roc_json(const std::vector<RocPoint>& pts) {
  Json out = Json::array();
  for (const RocPoint& p : pts) {
    out.push_back({{"threshold", std::isfinite(p.threshold) ? Json(p.threshold) : Json(nullptr)},
                   {"fpr", p.fpr},
                   {"tpr", p.tpr}});
  }
  return out;
}

/// Answers through an in-process gateway as a given client. A rejected
/// request reads as class 0 with zero confidence.
VictimOracle gateway_oracle(GatewayState& gw, std::string client_id) {
  return [&gw, id = std::move(client_id)](const Tensor& x) {
    WireRequest req{id, x.shape[1], x.shape[2], x.data};
    const WireResponse r = gw.handle_request(req);
    return r.label < 0 ? OracleAnswer{0, 0.0} : OracleAnswer{r.label, r.confidence};
  };
}

GatewayState make_gateway(const TrainedSystem& sys, const ExperimentConfig& cfg, const std::string& stream) {
  GatewayConfig g = system_gateway_config(cfg, sys.search.registry.size());
  g.root_seed = derive_seed(cfg.seed, stream);
  GatewayModels models{sys.pipeline(cfg.defense, derive_seed(g.root_seed, "selection")), sys.sentinel};
  return GatewayState(std::move(models), std::move(g), [] { return 0.0; });
}

Dataset attacker_queries(const ExperimentConfig& cfg) {
  return gen_synthetic_dataset(cfg.data, cfg.attacker.query_budget, Split::train, derive_seed(cfg.seed, "attacker/data"));
}

TrainConfig seeded(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  return t;
}

std::string num_text(const Json& v) { return v.is_null() ? std::string() : v.dump(); }

}  // namespace

// --- ExperimentConfig --------------------------------------------------------

ExperimentConfig::ExperimentConfig() {
  attacker.surrogate.kind = ArchKind::convnet;
  attacker.surrogate.conv_stages = {{8, 3, 1}};
  attacker.surrogate.hidden_widths = {64};
}

void ExperimentConfig::validate() const {
  if (config_version != kConfigVersion) {
    throw ValidationError("config_version must be " + std::to_string(kConfigVersion));
  }
  if (data.n_train < 100) throw ValidationError("data.n_train must be >= 100");
  if (data.n_test < 10) throw ValidationError("data.n_test must be >= 10");
  if (!(data.noise_p >= 0.0 && data.noise_p <= 1.0)) throw ValidationError("data.noise_p must be in [0, 1]");
  if (data.shift < 0 || data.shift > 5) throw ValidationError("data.shift must be in [0, 5]");
  space.validate();
  search.validate();
  if (search.transfer_samples > data.n_test) throw ValidationError("search.transfer_samples exceeds data.n_test");
  attacker.attack.validate();
  attacker.surrogate.validate();
  attacker.surrogate_train.validate();
  if (attacker.samples < 1 || attacker.samples > data.n_test) {
    throw ValidationError("attacker.samples must be in [1, n_test]");
  }
  if (attacker.query_budget < 1) throw ValidationError("attacker.query_budget must be >= 1");
  defense.validate();
  if (ae.hidden < 1 || ae.bottleneck < 1) throw ValidationError("ae sizes must be >= 1");
  if (!(ae.noise >= 0.0)) throw ValidationError("ae.noise must be >= 0");
  ae.train.validate();
  if (vae.hidden < 1 || vae.latent < 1) throw ValidationError("vae sizes must be >= 1");
  if (!(vae.beta >= 0.0)) throw ValidationError("vae.beta must be >= 0");
  vae.train.validate();
  detector.cfg.spec.validate();
  detector.cfg.attack.validate();
  detector.cfg.train.validate();
  if (detector.clean_samples < 2 || detector.clean_samples > data.n_train) {
    throw ValidationError("detector.clean_samples must be in [2, n_train]");
  }
  sentinel.cfg.validate();
  if (sentinel.train_sessions < 2 || sentinel.eval_sessions < 2) {
    throw ValidationError("sentinel session counts must be >= 2");
  }
  if (sentinel.latency_queries < 2) throw ValidationError("sentinel.latency_queries must be >= 2");
  decoy_train.validate();
  const std::set<std::string> known(all_scenarios().begin(), all_scenarios().end());
  for (const std::string& s : scenarios) {
    if (!known.contains(s)) throw ValidationError("unknown scenario '" + s + "'");
  }
}

Json ExperimentConfig::to_json() const {
  return {{"config_version", config_version},
          {"seed", seed},
          {"data", data_json(data)},
          {"search_space", space.to_json()},
          {"search", search.to_json()},
          {"attacker",
           {{"attack", attack_json(attacker.attack)},
            {"samples", attacker.samples},
            {"query_budget", attacker.query_budget},
            {"surrogate", attacker.surrogate.to_json()},
            {"surrogate_train", train_json(attacker.surrogate_train)}}},
          {"defense", defense.to_json()},
          {"ae",
           {{"hidden", ae.hidden}, {"bottleneck", ae.bottleneck}, {"noise", ae.noise}, {"train", train_json(ae.train)}}},
          {"vae", {{"hidden", vae.hidden}, {"latent", vae.latent}, {"beta", vae.beta}, {"train", train_json(vae.train)}}},
          {"detector", detector_json(detector)},
          {"sentinel", sentinel_json(sentinel)},
          {"decoy_train", train_json(decoy_train)},
          {"reject_on_suspect", reject_on_suspect},
          {"scenarios", scenarios}};
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
  static const std::set<std::string> keys{"config_version", "seed",     "data",     "search_space", "search",
                                          "attacker",       "defense",  "ae",       "vae",          "detector",
                                          "sentinel",       "decoy_train", "reject_on_suspect", "scenarios"};
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw ValidationError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  try {
    c.config_version = j.at("config_version").get<int>();
    c.seed = j.value("seed", c.seed);
    c.data = data_from(j.value("data", Json::object()), c.data);
    if (j.contains("search_space")) c.space = SearchSpace::from_json(j.at("search_space"));
    if (j.contains("search")) c.search = SearchConfig::from_json(j.at("search"));
    const Json a = j.value("attacker", Json::object());
    c.attacker.attack = attack_from(a.value("attack", Json::object()), c.attacker.attack);
    c.attacker.samples = a.value("samples", c.attacker.samples);
    c.attacker.query_budget = a.value("query_budget", c.attacker.query_budget);
    if (a.contains("surrogate")) c.attacker.surrogate = ArchitectureSpec::from_json(a.at("surrogate"));
    c.attacker.surrogate_train = train_from(a.value("surrogate_train", Json::object()), c.attacker.surrogate_train);
    if (j.contains("defense")) c.defense = DefenseConfig::from_json(j.at("defense"));
    const Json ae = j.value("ae", Json::object());
    c.ae.hidden = ae.value("hidden", c.ae.hidden);
    c.ae.bottleneck = ae.value("bottleneck", c.ae.bottleneck);
    c.ae.noise = ae.value("noise", c.ae.noise);
    c.ae.train = train_from(ae.value("train", Json::object()), c.ae.train);
    const Json vae = j.value("vae", Json::object());
    c.vae.hidden = vae.value("hidden", c.vae.hidden);
    c.vae.latent = vae.value("latent", c.vae.latent);
    c.vae.beta = vae.value("beta", c.vae.beta);
    c.vae.train = train_from(vae.value("train", Json::object()), c.vae.train);
    c.detector = detector_from(j.value("detector", Json::object()), c.detector);
    c.sentinel = sentinel_from(j.value("sentinel", Json::object()), c.sentinel);
    c.decoy_train = train_from(j.value("decoy_train", Json::object()), c.decoy_train);
    c.reject_on_suspect = j.value("reject_on_suspect", c.reject_on_suspect);
    c.scenarios = j.value("scenarios", c.scenarios);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

bool ExperimentConfig::has_scenario(const std::string& name) const {
  return std::find(scenarios.begin(), scenarios.end(), name) != scenarios.end();
}

StageError::StageError(std::string stage, std::string config_hash, const std::string& detail)
    : std::runtime_error("stage '" + stage + "' failed (config " + config_hash + "): " + detail),
      stage_(std::move(stage)),
      hash_(std::move(config_hash)) {}

// --- training -----------------------------------------------------------------

DefensePipeline TrainedSystem::pipeline(const DefenseConfig& cfg, std::uint64_t selection_seed) const {
  return DefensePipeline{EnsembleRegistry(search.registry.models(), selection_seed), ae, vae, detector, decoy, cfg};
}

TrainedSystem train_system(const ExperimentConfig& cfg, StageTimings* timings) {
  cfg.validate();
  const std::uint64_t seed = cfg.seed;
  Stager stage(cfg.hash(), timings);

  auto [train, test] = stage("data", [&] { return gen_train_test(cfg.data, seed); });
  SearchResult search =
      stage("search", [&] { return search_ensemble(cfg.space, train, test, cfg.search, derive_seed(seed, "search")); });
  const std::vector<Classifier>& models = search.registry.models();

  DenoisingAutoencoder ae = stage("autoencoder", [&] {
    DenoisingAutoencoder m(train.sample_shape(), cfg.ae.hidden, cfg.ae.bottleneck, derive_seed(seed, "ae/init"));
    train_denoising_ae(m, train, cfg.ae.noise, seeded(cfg.ae.train, derive_seed(seed, "ae/train")));
    return m;
  });
  VariationalAutoencoder vae = stage("vae", [&] {
    VariationalAutoencoder m(train.sample_shape(), cfg.vae.hidden, cfg.vae.latent, derive_seed(seed, "vae/init"));
    train_vae(m, train, cfg.vae.beta, seeded(cfg.vae.train, derive_seed(seed, "vae/train")));
    return m;
  });
  AdvDetector detector = stage("detector", [&] {
    return train_adv_detector(train.subset(0, cfg.detector.clean_samples), models, cfg.detector.cfg,
                              derive_seed(seed, "detector"));
  });
  Classifier decoy = stage("decoy", [&] {
    Classifier m = build_classifier(decoy_spec(models.front().spec()), derive_seed(seed, "decoy/init"));
    train_supervised(m, train, seeded(cfg.decoy_train, derive_seed(seed, "decoy/train")));
    return m;
  });
  SequenceDetector sentinel = stage("sentinel", [&] {
    const DetectorDataset ds = gen_detector_dataset(models, train, cfg.sentinel.train_sessions, cfg.sentinel.cfg,
                                                    derive_seed(seed, "sentinel/data"));
    return train_sentinel_detector(ds, cfg.sentinel.cfg, derive_seed(seed, "sentinel/train"));
  });
  Classifier attacker = stage("attacker", [&] {
    const Dataset q = attacker_queries(cfg);
    QueryLog log{q.images, predict_labels(models.front(), q.images), q.num_classes};
    return train_surrogate(log, cfg.attacker.surrogate,
                           seeded(cfg.attacker.surrogate_train, derive_seed(seed, "attacker/surrogate")));
  });

  return TrainedSystem{std::move(train), std::move(test),     std::move(search),   std::move(ae),      std::move(vae),
                       std::move(detector), std::move(decoy), std::move(sentinel), std::move(attacker)};
}

GatewayConfig system_gateway_config(const ExperimentConfig& cfg, std::size_t n_models) {
  GatewayConfig g;
  g.root_seed = derive_seed(cfg.seed, "gateway");
  g.defense = cfg.defense;
  g.policy = cfg.sentinel.cfg.policy;
  g.window = cfg.sentinel.cfg.window;
  g.capacity = cfg.sentinel.cfg.capacity;
  g.idle_timeout_s = cfg.sentinel.cfg.idle_timeout_s;
  g.reject_on_suspect = cfg.reject_on_suspect;
  for (std::size_t i = 0; i < n_models; ++i) g.registry_paths.emplace_back("registry_" + std::to_string(i) + ".dndw");
  g.ae_path = "ae.dndw";
  g.vae_path = "vae.dndw";
  g.detector_path = "detector.dndw";
  g.decoy_path = "decoy.dndw";
  g.sentinel_path = "sentinel.dndw";
  return g;
}

void save_system(const TrainedSystem& sys, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_dataset(sys.train, dir / "train.dnd");
  save_dataset(sys.test, dir / "test.dnd");
  const auto& models = sys.search.registry.models();
  for (std::size_t i = 0; i < models.size(); ++i) {
    save_classifier(dir / ("registry_" + std::to_string(i) + ".dndw"), models[i]);
  }
  save_autoencoder(dir / "ae.dndw", sys.ae);
  save_vae(dir / "vae.dndw", sys.vae);
  save_classifier(dir / "detector.dndw", sys.detector.model);
  save_classifier(dir / "decoy.dndw", sys.decoy);
  save_sequence_detector(dir / "sentinel.dndw", sys.sentinel);
  save_classifier(dir / "attacker.dndw", sys.attacker);
  write_file_atomic(dir / "search.json", sys.search.report().dump(2) + "\n");
  write_file_atomic(dir / "experiment.json", cfg.to_json().dump(2) + "\n");
  write_file_atomic(dir / "gateway.json", system_gateway_config(cfg, models.size()).to_json().dump(2) + "\n");
}

std::pair<TrainedSystem, ExperimentConfig> load_system(const std::filesystem::path& dir) {
  ExperimentConfig cfg = ExperimentConfig::load(dir / "experiment.json");
  Json search_json;
  try {
    search_json = Json::parse(read_file(dir / "search.json"));
  } catch (const Json::parse_error& e) {
    throw IoError((dir / "search.json").string() + ": " + e.what());
  }
  std::vector<Classifier> models;
  const std::size_t n = search_json.at("chosen").size();
  for (std::size_t i = 0; i < n; ++i) models.push_back(load_classifier(dir / ("registry_" + std::to_string(i) + ".dndw")));
  SearchResult search;
  search.registry = EnsembleRegistry(std::move(models), derive_seed(derive_seed(cfg.seed, "search"), "search/registry"));
  search.final_accuracies = search_json.at("final_accuracies").get<std::vector<double>>();
  search.warning = search_json.value("warning", false);
  TrainedSystem sys{load_dataset(dir / "train.dnd", Split::train),
                    load_dataset(dir / "test.dnd", Split::test),
                    std::move(search),
                    load_autoencoder(dir / "ae.dndw"),
                    load_vae(dir / "vae.dndw"),
                    AdvDetector(load_classifier(dir / "detector.dndw")),
                    load_classifier(dir / "decoy.dndw"),
                    load_sequence_detector(dir / "sentinel.dndw"),
                    load_classifier(dir / "attacker.dndw")};
  return {std::move(sys), std::move(cfg)};
}

// --- evaluation -----------------------------------------------------------------

Report evaluate_system(const TrainedSystem& sys, const ExperimentConfig& cfg, StageTimings* timings) {
  const std::uint64_t seed = cfg.seed;
  Stager stage(cfg.hash(), timings);
  Report report;
  Json scen = Json::object();
  const Dataset& test = sys.test;
  const Classifier& static_model = sys.static_model();
  const std::vector<int> static_clean = predict_labels(static_model, test.images);
  const std::size_t m = cfg.attacker.samples;
  const std::vector<Tensor> xs(test.images.begin(), test.images.begin() + static_cast<std::ptrdiff_t>(m));
  const std::vector<int> ys(test.labels.begin(), test.labels.begin() + static_cast<std::ptrdiff_t>(m));
  const double eps = cfg.attacker.attack.epsilon;

  if (cfg.has_scenario("a_clean")) {
    stage("a_clean", [&] {
      const DefensePipeline p = sys.pipeline(cfg.defense, derive_seed(seed, "eval/clean/selection"));
      Rng rng(derive_seed(seed, "eval/clean"));
      Json rows = Json::array();
      std::size_t s_ok = 0, d_ok = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        const int d = defend_infer(p, test.images[i], SessionState::normal, rng).label;
        s_ok += static_clean[i] == test.labels[i];
        d_ok += d == test.labels[i];
        rows.push_back({{"i", i}, {"y", test.labels[i]}, {"static", static_clean[i]}, {"dnd", d}});
      }
      std::vector<double> accs;
      for (const Classifier& model : sys.search.registry.models()) accs.push_back(accuracy(model, test));
      scen["a_clean"] = {{"samples", test.size()},
                         {"static_accuracy", rate(s_ok, test.size())},
                         {"dnd_accuracy", rate(d_ok, test.size())},
                         {"registry_accuracies", accs},
                         {"registry_min_accuracy", *std::min_element(accs.begin(), accs.end())}};
      report.samples["a_clean"] = std::move(rows);
    });
  }

  if (cfg.has_scenario("b_whitebox")) {
    stage("b_whitebox", [&] {
      const auto fg = predict_labels(static_model, fgsm_batch(static_model, test.images, test.labels, eps));
      const auto it =
          predict_labels(static_model, iterative_fgsm_batch(static_model, test.images, test.labels, cfg.attacker.attack));
      Json rows = Json::array();
      std::size_t c_ok = 0, f_ok = 0, i_ok = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        const int y = test.labels[i];
        c_ok += static_clean[i] == y;
        f_ok += fg[i] == y;
        i_ok += it[i] == y;
        rows.push_back({{"i", i}, {"y", y}, {"clean", static_clean[i]}, {"fgsm", fg[i]}, {"iterative", it[i]}});
      }
      const double clean = rate(c_ok, test.size());
      scen["b_whitebox"] = {{"samples", test.size()},
                            {"epsilon", eps},
                            {"clean_accuracy", clean},
                            {"fgsm_accuracy", rate(f_ok, test.size())},
                            {"iterative_accuracy", rate(i_ok, test.size())},
                            {"fgsm_drop", clean - rate(f_ok, test.size())},
                            {"iterative_drop", clean - rate(i_ok, test.size())}};
      report.samples["b_whitebox"] = std::move(rows);
    });
  }

  double static_success = -1.0;
  if (cfg.has_scenario("c_transfer_static")) {
    stage("c_transfer_static", [&] {
      const auto adv = predict_labels(static_model, fgsm_batch(sys.attacker, xs, ys, eps));
      const auto sur_test = predict_labels(sys.attacker, test.images);
      std::size_t agree = 0;
      for (std::size_t i = 0; i < test.size(); ++i) agree += sur_test[i] == static_clean[i];
      Json rows = Json::array();
      std::size_t hits = 0;
      for (std::size_t i = 0; i < m; ++i) {
        hits += adv[i] != ys[i];
        rows.push_back({{"i", i}, {"y", ys[i]}, {"clean", static_clean[i]}, {"adv", adv[i]}});
      }
      static_success = rate(hits, m);
      scen["c_transfer_static"] = {{"samples", m},
                                   {"queries", cfg.attacker.query_budget},
                                   {"epsilon", eps},
                                   {"success_rate", static_success},
                                   {"surrogate_agreement", rate(agree, test.size())}};
      report.samples["c_transfer_static"] = std::move(rows);
    });
  }

  if (cfg.has_scenario("d_transfer_dnd")) {
    stage("d_transfer_dnd", [&] {
      GatewayState gw = make_gateway(sys, cfg, "eval/gateway");
      const std::string id = "attacker";
      const VictimOracle oracle = gateway_oracle(gw, id);
      const Dataset q = attacker_queries(cfg);
      QueryLog log{q.images, {}, q.num_classes};
      for (const Tensor& x : q.images) log.labels.push_back(oracle(x).label);
      const Classifier surrogate = train_surrogate(
          log, cfg.attacker.surrogate, seeded(cfg.attacker.surrogate_train, derive_seed(seed, "attacker/surrogate")));
      const std::vector<Tensor> adv = fgsm_batch(surrogate, xs, ys, eps);
      Json rows = Json::array();
      std::size_t hits = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const int label = oracle(adv[i]).label;
        hits += label != ys[i];
        rows.push_back({{"i", i}, {"y", ys[i]}, {"adv", label}});
      }
      std::size_t decoy_served = 0;
      for (const Json& e : gw.audit_entries()) decoy_served += e.at("served_by_decoy").get<bool>();
      const double success = rate(hits, m);
      Json rec = {{"samples", m},
                  {"queries", cfg.attacker.query_budget},
                  {"epsilon", eps},
                  {"success_rate", success},
                  {"requests", gw.handled_count()},
                  {"decoy_served", decoy_served},
                  {"final_state", to_string(gw.session_state(id).value_or(SessionState::normal))}};
      if (static_success > 0.0) rec["ratio_to_static"] = success / static_success;
      scen["d_transfer_dnd"] = std::move(rec);
      report.samples["d_transfer_dnd"] = std::move(rows);
    });
  }

  if (cfg.has_scenario("e_sentinel")) {
    stage("e_sentinel", [&] {
      const SentinelSettings& st = cfg.sentinel;
      const std::size_t w = st.cfg.window;
      const DetectorDataset eval = gen_detector_dataset(sys.search.registry.models(), test, st.eval_sessions, st.cfg,
                                                        derive_seed(seed, "sentinel/eval"));
      std::vector<double> scores;
      std::vector<int> labels;
      Json rows = Json::array();
      for (std::size_t s = 0; s < eval.sessions.size(); ++s) {
        const LabeledSession& ls = eval.sessions[s];
        const double score = lstm_forward(sys.sentinel, window_features(ls.records, w));
        scores.push_back(score);
        labels.push_back(ls.label);
        rows.push_back({{"kind", "session"}, {"session", s}, {"probe", ls.kind}, {"label", ls.label}, {"score", score}});
      }

      // Escalation latency: scripted fgsm_probe clients and benign clients
      // through a fresh in-process gateway.
      GatewayState gw = make_gateway(sys, cfg, "eval/latency");
      Rng rng(derive_seed(seed, "eval/latency"));
      for (std::size_t r = 0; r < st.latency_runs; ++r) {
        scripted_attack_session(gateway_oracle(gw, "probe-" + std::to_string(r)), sys.attacker, test,
                                ProbeKind::fgsm_probe, st.latency_queries, st.cfg.attack, rng);
        benign_session(gateway_oracle(gw, "benign-" + std::to_string(r)), test, st.latency_queries, rng);
      }
      std::map<std::string, std::optional<std::uint64_t>> first_decoy;
      for (const Json& e : gw.audit_entries()) {
        const std::string id = e.at("client_id").get<std::string>();
        const auto seq = e.at("seq").get<std::uint64_t>();
        auto& slot = first_decoy[id];
        if (!slot && seq < st.latency_queries && e.at("state") == to_string(SessionState::decoy)) slot = seq + 1;
      }
      const std::size_t budget = w + 10;
      std::size_t reached = 0, within = 0, benign_decoy = 0;
      std::vector<double> latencies;
      for (std::size_t r = 0; r < st.latency_runs; ++r) {
        const auto lat = first_decoy["probe-" + std::to_string(r)];
        const auto ben = first_decoy["benign-" + std::to_string(r)];
        if (lat) {
          ++reached;
          within += *lat <= budget;
          latencies.push_back(static_cast<double>(*lat));
        }
        benign_decoy += ben.has_value();
        rows.push_back({{"kind", "latency"}, {"run", r}, {"latency", lat ? Json(*lat) : Json(nullptr)},
                        {"benign_latency", ben ? Json(*ben) : Json(nullptr)}});
      }
      scen["e_sentinel"] = {
          {"sessions", eval.sessions.size()},
          {"attack_sessions", std::count(labels.begin(), labels.end(), 1)},
          {"auc", roc_auc(scores, labels)},
          {"roc", roc_json(roc_curve(scores, labels))},
          {"latency",
           {{"runs", st.latency_runs},
            {"queries", st.latency_queries},
            {"budget", budget},
            {"reached_decoy", rate(reached, st.latency_runs)},
            {"decoy_within_budget", rate(within, st.latency_runs)},
            {"median_latency", latencies.empty() ? Json(nullptr) : Json(median_of(latencies))},
            {"benign_decoy", rate(benign_decoy, st.latency_runs)}}}};
      report.samples["e_sentinel"] = std::move(rows);
    });
  }

  Json transfer = stage("transferability", [&] {
    const auto& models = sys.search.registry.models();
    const std::size_t k = std::min(cfg.search.transfer_samples, test.size());
    Json t = {{"registry", pairwise_transferability(models, test.subset(0, k), cfg.search.epsilon).to_json()}};
    const SearchResult& sr = sys.search;
    if (!sr.survivors.empty()) {
      std::vector<std::size_t> pos;
      for (std::size_t c : sr.chosen) {
        pos.push_back(static_cast<std::size_t>(std::find(sr.survivors.begin(), sr.survivors.end(), c) -
                                               sr.survivors.begin()));
      }
      const auto chosen_mean = sr.survivor_matrix.submatrix(pos).mean_off_diagonal();
      t["selected_mean"] = chosen_mean ? Json(*chosen_mean) : Json(nullptr);
      if (pos.size() >= 2 && pos.size() <= sr.survivors.size()) {
        t["random_subset_mean"] =
            random_subset_transfer(sr.survivor_matrix, pos.size(), 5, derive_seed(seed, "eval/random_subsets"));
      }
    }
    return t;
  });

  report.summary = {{"config", cfg.to_json()},
                    {"config_hash", cfg.hash()},
                    {"seed", cfg.seed},
                    {"scenarios", std::move(scen)},
                    {"transferability", std::move(transfer)}};
  if (!sys.search.candidates.empty()) report.summary["search"] = sys.search.report();
  return report;
}

Report run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  StageTimings timings;
  const TrainedSystem sys = train_system(cfg, &timings);
  Report report = evaluate_system(sys, cfg, &timings);
  report.timings = std::move(timings);
  return report;
}

// --- report files ---------------------------------------------------------------

std::string report_json_text(const Json& summary) { return summary.dump(2) + "\n"; }

std::string transfer_matrix_csv(const Json& summary) {
  const Json& t = summary.at("transferability").at("registry");
  const std::size_t n = t.at("n").get<std::size_t>();
  std::string out = "crafted_on";
  for (std::size_t j = 0; j < n; ++j) out += ",f" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < n; ++i) {
    out += "f" + std::to_string(i);
    for (std::size_t j = 0; j < n; ++j) out += "," + num_text(t.at("values").at(i).at(j));
    out += "\n";
  }
  return out;
}

std::string roc_csv(const Json& summary) {
  std::string out = "threshold,fpr,tpr\n";
  const Json& scen = summary.at("scenarios");
  if (!scen.contains("e_sentinel")) return out;
  for (const Json& p : scen.at("e_sentinel").at("roc")) {
    out += (p.at("threshold").is_null() ? std::string("inf") : p.at("threshold").dump()) + "," + p.at("fpr").dump() +
           "," + p.at("tpr").dump() + "\n";
  }
  return out;
}

std::string scenarios_csv(const Json& summary) {
  std::string out = "scenario,metric,value\n";
  const std::function<void(const std::string&, const std::string&, const Json&)> emit =
      [&](const std::string& scenario, const std::string& prefix, const Json& obj) {
        for (const auto& [k, v] : obj.items()) {
          const std::string name = prefix.empty() ? k : prefix + "." + k;
          if (v.is_object()) {
            emit(scenario, name, v);
          } else if (v.is_number() || v.is_boolean() || v.is_null()) {
            out += scenario + "," + name + "," + num_text(v) + "\n";
          } else if (v.is_string()) {
            out += scenario + "," + name + "," + v.get<std::string>() + "\n";
          }
        }
      };
  for (const auto& [name, rec] : summary.at("scenarios").items()) emit(name, "", rec);
  return out;
}

void write_report(const Report& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file_atomic(dir / "report.json", report_json_text(report.summary));
  std::string lines;
  for (const auto& [scenario, rows] : report.samples.items()) {
    for (const Json& row : rows) {
      Json r = row;
      r["scenario"] = scenario;
      lines += r.dump() + "\n";
    }
  }
  write_file_atomic(dir / "samples.jsonl", lines);
  write_file_atomic(dir / "transfer_matrix.csv", transfer_matrix_csv(report.summary));
  write_file_atomic(dir / "roc.csv", roc_csv(report.summary));
  write_file_atomic(dir / "scenarios.csv", scenarios_csv(report.summary));
}

Report load_report(const std::filesystem::path& dir) {
  Report r;
  try {
    r.summary = Json::parse(read_file(dir / "report.json"));
  } catch (const Json::parse_error& e) {
    throw IoError((dir / "report.json").string() + ": " + e.what());
  }
  std::istringstream in(read_file(dir / "samples.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json row;
    try {
      row = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw IoError((dir / "samples.jsonl").string() + ": " + e.what());
    }
    const std::string scenario = row.at("scenario").get<std::string>();
    row.erase("scenario");
    r.samples[scenario].push_back(std::move(row));
  }
  return r;
}

std::map<std::string, double> recount_rates(const Json& samples) {
  std::map<std::string, double> out;
  const auto frac = [](const Json& rows, const std::function<bool(const Json&)>& pred) {
    std::size_t hits = 0;
    for (const Json& r : rows) hits += pred(r);
    return rate(hits, rows.size());
  };
  if (samples.contains("a_clean")) {
    const Json& rows = samples.at("a_clean");
    out["a_clean.static_accuracy"] = frac(rows, [](const Json& r) { return r["static"] == r["y"]; });
    out["a_clean.dnd_accuracy"] = frac(rows, [](const Json& r) { return r["dnd"] == r["y"]; });
  }
  if (samples.contains("b_whitebox")) {
    const Json& rows = samples.at("b_whitebox");
    out["b_whitebox.clean_accuracy"] = frac(rows, [](const Json& r) { return r["clean"] == r["y"]; });
    out["b_whitebox.fgsm_accuracy"] = frac(rows, [](const Json& r) { return r["fgsm"] == r["y"]; });
    out["b_whitebox.iterative_accuracy"] = frac(rows, [](const Json& r) { return r["iterative"] == r["y"]; });
  }
  for (const char* name : {"c_transfer_static", "d_transfer_dnd"}) {
    if (samples.contains(name)) {
      out[std::string(name) + ".success_rate"] =
          frac(samples.at(name), [](const Json& r) { return r["adv"] != r["y"]; });
    }
  }
  if (samples.contains("e_sentinel")) {
    std::vector<double> scores;
    std::vector<int> labels;
    std::size_t runs = 0, reached = 0;
    for (const Json& r : samples.at("e_sentinel")) {
      if (r["kind"] == "session") {
        scores.push_back(r["score"].get<double>());
        labels.push_back(r["label"].get<int>());
      } else {
        ++runs;
        reached += !r["latency"].is_null();
      }
    }
    out["e_sentinel.auc"] = roc_auc(scores, labels);
    out["e_sentinel.latency.reached_decoy"] = rate(reached, runs);
  }
  return out;
}

// --- red team ---------------------------------------------------------------------

namespace {

struct BudgetSpent {};

}  // namespace

std::vector<std::string> run_redteam(GatewayClient& client, const Classifier& surrogate, const Dataset& data,
                                     const RedTeamConfig& cfg) {
  if (cfg.clients < 1) throw ValidationError("redteam clients must be >= 1");
  if (cfg.session_length < 1) throw ValidationError("redteam session_length must be >= 1");
  if (data.empty()) throw ValidationError("redteam needs a non-empty dataset");
  cfg.attack.validate();
  std::vector<std::string> transcript;
  std::size_t sent = 0;
  const auto oracle_for = [&](const std::string& id) -> VictimOracle {
    return [&, id](const Tensor& x) {
      if (sent == cfg.requests) throw BudgetSpent{};
      const std::string line = request_line(id, x);
      const std::string resp = client.round_trip(line);
      ++sent;
      transcript.push_back(line);
      transcript.push_back(resp);
      const Json j = Json::parse(resp, nullptr, false);
      if (j.is_discarded() || !j.contains("label")) throw IoError("redteam: unexpected response: " + resp);
      const int label = j.at("label").get<int>();
      return label < 0 ? OracleAnswer{0, 0.0} : OracleAnswer{label, j.at("confidence").get<double>()};
    };
  };
  Rng rng(cfg.seed);
  try {
    for (std::size_t session = 0; sent < cfg.requests; ++session) {
      const std::string id = "redteam-" + std::to_string(session % cfg.clients);
      const VictimOracle oracle = oracle_for(id);
      switch (session % 3) {
        case 0:
          scripted_attack_session(oracle, surrogate, data, ProbeKind::fgsm_probe, cfg.session_length, cfg.attack, rng);
          break;
        case 1:
          scripted_attack_session(oracle, surrogate, data, ProbeKind::extraction_probe, cfg.session_length, cfg.attack,
                                  rng);
          break;
        default:
          benign_session(oracle, data, cfg.session_length, rng);
          break;
      }
    }
  } catch (const BudgetSpent&) {
  }
  return transcript;
}

}  // namespace dnd
