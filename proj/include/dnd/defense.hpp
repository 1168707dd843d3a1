#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dnd/attacks.hpp"
#include "dnd/models.hpp"
#include "dnd/sentinel.hpp"

namespace dnd {

/// The served models f^1..f^n plus a default selection stream.
class EnsembleRegistry {
 public:
  EnsembleRegistry() : rng_(0) {}
  /// Throws ValidationError if the models disagree on input shape or classes.
  EnsembleRegistry(std::vector<Classifier> models, std::uint64_t selection_seed);

  std::size_t size() const noexcept { return models_.size(); }
  bool empty() const noexcept { return models_.empty(); }
  const Classifier& model(std::size_t i) const { return models_.at(i); }
  const std::vector<Classifier>& models() const noexcept { return models_; }
  Rng& selection_rng() noexcept { return rng_; }

 private:
  std::vector<Classifier> models_;
  Rng rng_;
};

/// Uniform index draw; ContractError on an empty registry.
std::size_t select_random_model(const EnsembleRegistry& reg, Rng& rng);
/// Draw from the registry's own selection stream.
std::size_t select_random_model(EnsembleRegistry& reg);

/// round(x * (2^bits - 1)) / (2^bits - 1) per element.
Tensor quantize_input(const Tensor& x, int bits);

struct DefenseConfig {
  std::size_t K = 5;
  double tau = 0.1;
  std::size_t m_draws = 3;
  int quant_bits = 5;
  double theta_adv = 0.9;
  bool sentinel = true;
  bool sanitize = true;
  bool vote = true;

  void validate() const;
  Json to_json() const;
  static DefenseConfig from_json(const Json& j);
};

struct InferenceOutcome {
  int label = 0;
  double confidence = 0.0;
  std::vector<std::size_t> tally;
  bool adversarial_suspect = false;
  bool served_by_decoy = false;
  double adversarial_score = 0.0;
  std::vector<std::string> model_ids;
};

/// [decode(mu), vae_sample(tau) x (K - 1)].
std::vector<Tensor> generate_variants(const VariationalAutoencoder& vae, const Tensor& x, std::size_t K, double tau,
                                      Rng& rng);

/// Winning class: highest tally, then larger summed mass, then lower index.
int resolve_vote(std::span<const std::size_t> tally, std::span<const double> mass);

/// m_draws random models classify each variant; one vote per inference.
InferenceOutcome vote_classify(const EnsembleRegistry& reg, std::span<const Tensor> variants, std::size_t m_draws,
                               Rng& rng);

struct AdvDetector {
  Classifier model;

  /// Rebuilt from a checkpointed classifier with two outputs.
  explicit AdvDetector(Classifier m);
};

/// Two-output MLP with one hidden layer of 64.
ArchitectureSpec detector_spec();

struct AdvDetectorConfig {
  ArchitectureSpec spec = detector_spec();
  AttackConfig attack;
  TrainConfig train{.epochs = 5, .batch_size = 32, .lr = 0.05, .momentum = 0.9, .seed = 0, .shuffle = true};
  double target_accuracy = 0.98;
  std::size_t max_epochs = 60;
};

/// Balanced clean (0) / crafted (1) set; odd samples use iterative FGSM, even
/// samples single-step FGSM, crafted on craft_models round robin. Trains in
/// rounds of cfg.train.epochs until target accuracy or max_epochs.
AdvDetector train_adv_detector(const Dataset& clean_set, std::span<const Classifier> craft_models,
                               const AdvDetectorConfig& cfg, std::uint64_t seed);
/// Probability of the adversarial class.
double detect_adversarial(const AdvDetector& det, const Tensor& x);

/// Halved hidden widths and conv channels (at least 1).
ArchitectureSpec decoy_spec(const ArchitectureSpec& production);

struct DefensePipeline {
  EnsembleRegistry registry;
  DenoisingAutoencoder ae;
  VariationalAutoencoder vae;
  AdvDetector detector;
  Classifier decoy;
  DefenseConfig cfg;
};

/// Layers in order: decoy routing (sentinel), quantize / detect / denoise
/// (sanitize), variants + randomized vote. With vote off the sanitized input
/// is the single variant. Throws DimensionError on a wrong input shape.
InferenceOutcome defend_infer(const DefensePipeline& p, const Tensor& x, SessionState state, Rng& rng);

}  // namespace dnd
