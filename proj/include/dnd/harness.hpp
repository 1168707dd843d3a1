#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dnd/dataset.hpp"
#include "dnd/defense.hpp"
#include "dnd/diversity.hpp"
#include "dnd/gateway.hpp"
#include "dnd/sentinel.hpp"

namespace dnd {

inline constexpr int kConfigVersion = 1;

inline const std::vector<std::string>& all_scenarios() {
  static const std::vector<std::string> names{"a_clean", "b_whitebox", "c_transfer_static", "d_transfer_dnd",
                                              "e_sentinel"};
  return names;
}

struct AutoencoderSettings {
  std::size_t hidden = 128;
  std::size_t bottleneck = 64;
  double noise = 0.2;
  TrainConfig train{.epochs = 30, .batch_size = 32, .lr = 1.0, .momentum = 0.9, .seed = 0, .shuffle = true};
};

struct VaeSettings {
  std::size_t hidden = 256;
  std::size_t latent = 32;
  double beta = 1e-4;
  TrainConfig train{.epochs = 30, .batch_size = 32, .lr = 1.0, .momentum = 0.9, .seed = 0, .shuffle = true};
};

struct DetectorSettings {
  AdvDetectorConfig cfg;
  /// Clean training images; as many crafted ones are added.
  std::size_t clean_samples = 1000;
};

struct SentinelSettings {
  SentinelConfig cfg;
  std::size_t train_sessions = 200;
  /// Half attack, half benign.
  std::size_t eval_sessions = 200;
  /// Scripted fgsm_probe clients pushed through the gateway for latency.
  std::size_t latency_runs = 50;
  std::size_t latency_queries = 40;
};

struct AttackerSettings {
  AttackConfig attack;
  /// Test samples crafted in every attack scenario.
  std::size_t samples = 500;
  /// Victim queries spent on extraction.
  std::size_t query_budget = 2000;
  ArchitectureSpec surrogate;
  TrainConfig surrogate_train{.epochs = 15, .batch_size = 32, .lr = 0.05, .momentum = 0.9, .seed = 0, .shuffle = true};
};

struct ExperimentConfig {
  int config_version = kConfigVersion;
  std::uint64_t seed = 1;
  DataConfig data;
  SearchSpace space;
  SearchConfig search;
  AttackerSettings attacker;
  DefenseConfig defense;
  AutoencoderSettings ae;
  VaeSettings vae;
  DetectorSettings detector;
  SentinelSettings sentinel;
  TrainConfig decoy_train{.epochs = 15, .batch_size = 32, .lr = 0.05, .momentum = 0.9, .seed = 0, .shuffle = true};
  bool reject_on_suspect = false;
  std::vector<std::string> scenarios = all_scenarios();

  ExperimentConfig();

  /// Throws ValidationError; requires n_train >= 100 and valid nested configs.
  void validate() const;
  /// Canonical JSON with sorted keys; every field is written.
  Json to_json() const;
  /// Missing fields keep their defaults. Throws ValidationError.
  static ExperimentConfig from_json(const Json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// FNV-1a of the compact canonical JSON, as 16 hex digits.
  std::string hash() const;
  bool has_scenario(const std::string& name) const;
};

/// A pipeline stage failed; the message carries the stage and config hash.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, std::string config_hash, const std::string& detail);
  const std::string& stage() const noexcept { return stage_; }
  const std::string& config_hash() const noexcept { return hash_; }

 private:
  std::string stage_;
  std::string hash_;
};

/// Every trained artifact of one experiment.
struct TrainedSystem {
  Dataset train;
  Dataset test;
  SearchResult search;
  DenoisingAutoencoder ae;
  VariationalAutoencoder vae;
  AdvDetector detector;
  Classifier decoy;
  SequenceDetector sentinel;
  /// The black-box attacker's surrogate, extracted from the static model.
  Classifier attacker;

  DefensePipeline pipeline(const DefenseConfig& cfg, std::uint64_t selection_seed) const;
  /// Registry model 0, the most accurate search survivor.
  const Classifier& static_model() const { return search.registry.model(0); }
};

/// Wall-clock seconds per stage; never part of the report JSON.
using StageTimings = std::map<std::string, double>;

TrainedSystem train_system(const ExperimentConfig& cfg, StageTimings* timings = nullptr);

/// Writes datasets, checkpoints, experiment.json, search.json and a
/// gateway.json that serves them, all under `dir`.
void save_system(const TrainedSystem& sys, const ExperimentConfig& cfg, const std::filesystem::path& dir);
/// Reads back what save_system wrote. The search result keeps only the
/// registry and its accuracies. Throws IoError naming the failing file.
std::pair<TrainedSystem, ExperimentConfig> load_system(const std::filesystem::path& dir);
/// Gateway config for checkpoints saved by save_system, paths relative to
/// the save directory.
GatewayConfig system_gateway_config(const ExperimentConfig& cfg, std::size_t n_models);

struct Report {
  /// report.json contents.
  Json summary;
  /// Per-scenario raw per-sample rows, written as samples.jsonl.
  Json samples = Json::object();
  StageTimings timings;
};

/// Runs the scenarios of cfg against an already trained system.
Report evaluate_system(const TrainedSystem& sys, const ExperimentConfig& cfg, StageTimings* timings = nullptr);

/// Train, evaluate, assemble. Throws StageError.
Report run_experiment(const ExperimentConfig& cfg);

/// report.json, samples.jsonl, transfer_matrix.csv, roc.csv, scenarios.csv.
/// Throws IoError naming the path.
void write_report(const Report& report, const std::filesystem::path& dir);
/// Reads report.json and samples.jsonl back.
Report load_report(const std::filesystem::path& dir);

/// Scenario rates recomputed from the per-sample rows.
std::map<std::string, double> recount_rates(const Json& samples);

/// Canonical text renderings, exposed for tests.
std::string report_json_text(const Json& summary);
std::string transfer_matrix_csv(const Json& summary);
std::string roc_csv(const Json& summary);
std::string scenarios_csv(const Json& summary);

// --- Red-team client --------------------------------------------------------

struct RedTeamConfig {
  std::size_t requests = 1000;
  std::size_t clients = 4;
  /// Requests per scripted session before a client moves to the next one.
  std::size_t session_length = 40;
  AttackConfig attack;
  std::uint64_t seed = 0;
};

/// Drives scripted sessions over one connection. Clients "redteam-<c>"
/// alternate fgsm_probe, extraction_probe and benign sessions, crafting on
/// `surrogate` with images from `data`. Returns the transcript: each request
/// line followed by its response line.
std::vector<std::string> run_redteam(GatewayClient& client, const Classifier& surrogate, const Dataset& data,
                                     const RedTeamConfig& cfg);

}  // namespace dnd
