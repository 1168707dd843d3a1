#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dnd/defense.hpp"
#include "dnd/models.hpp"

namespace dnd {

struct SearchSpace {
  std::vector<ArchKind> kinds{ArchKind::mlp, ArchKind::convnet};
  std::vector<std::size_t> hidden_widths{128, 192, 256};
  std::size_t min_depth = 1;
  std::size_t max_depth = 2;
  std::vector<Activation> activations{Activation::relu, Activation::tanh};
  /// A convnet uses one stage drawn from this list.
  std::vector<ConvStage> conv_stages{{8, 3, 1}, {8, 5, 1}, {6, 3, 1}};
  Shape input_shape{1, kGlyphSide, kGlyphSide};
  std::size_t num_classes = kGlyphClasses;

  void validate() const;
  Json to_json() const;
  static SearchSpace from_json(const Json& j);
};

/// Draws kind, depth, each width, activation and conv stage in that order,
/// every dimension independently, so the stream consumption is fixed.
ArchitectureSpec sample_architecture(const SearchSpace& space, Rng& rng);

/// FNV-1a of the canonical spec JSON.
std::uint64_t spec_hash(const ArchitectureSpec& spec);

/// T[i][j]: FGSM crafted on model i, success rate on model j over the samples
/// both classify correctly when clean. Cells without such samples are empty.
class TransferabilityMatrix {
 public:
  TransferabilityMatrix() = default;
  TransferabilityMatrix(std::size_t n, double epsilon);

  std::size_t size() const noexcept { return n_; }
  double epsilon() const noexcept { return epsilon_; }
  std::optional<double> at(std::size_t i, std::size_t j) const;
  std::size_t count(std::size_t i, std::size_t j) const { return counts_.at(i * n_ + j); }
  std::size_t successes(std::size_t i, std::size_t j) const { return successes_.at(i * n_ + j); }
  void set_cell(std::size_t i, std::size_t j, std::size_t successes, std::size_t count);

  /// Mean over defined off-diagonal cells; nullopt when there are none.
  std::optional<double> mean_off_diagonal() const;
  TransferabilityMatrix submatrix(std::span<const std::size_t> idx) const;

  /// {"epsilon", "n", "values" (null when undefined), "counts", "successes"}.
  Json to_json() const;
  static TransferabilityMatrix from_json(const Json& j);

 private:
  std::size_t n_ = 0;
  double epsilon_ = 0.0;
  std::vector<std::size_t> counts_;
  std::vector<std::size_t> successes_;
};

/// Raw per-sample predictions behind a matrix.
struct TransferLog {
  TransferabilityMatrix matrix;
  std::vector<int> labels;
  /// clean[j][s]: model j on clean sample s.
  std::vector<std::vector<int>> clean;
  /// adv[i * n + j][s]: model j on sample s crafted against model i.
  std::vector<std::vector<int>> adv;
};

TransferLog transfer_evaluation(std::span<const Classifier> models, const Dataset& eval_set, double epsilon);
TransferabilityMatrix pairwise_transferability(std::span<const Classifier> models, const Dataset& eval_set,
                                               double epsilon);
/// Rebuilds the matrix from the per-sample predictions.
TransferabilityMatrix recount_transferability(const TransferLog& log);

/// mean(accs) - lambda * mean off-diagonal defined T; no penalty without any.
double ensemble_score(std::span<const double> accs, const TransferabilityMatrix& t, double lambda);

struct SearchConfig {
  std::size_t n = 4;
  std::size_t budget = 12;
  double lambda = 1.0;
  double a_min = 0.85;
  std::size_t candidate_epochs = 15;
  std::size_t finetune_epochs = 15;
  double epsilon = 0.15;
  /// Test samples used for the transferability matrix.
  std::size_t transfer_samples = 500;
  TrainConfig train;
  std::size_t threads = 1;

  void validate() const;
  Json to_json() const;
  static SearchConfig from_json(const Json& j);
};

struct Candidate {
  ArchitectureSpec spec;
  std::uint64_t hash = 0;
  double accuracy = 0.0;
  bool survived = false;
};

struct SearchResult {
  EnsembleRegistry registry;
  std::vector<Candidate> candidates;
  /// Candidate indices of the survivors, the rows of `survivor_matrix`.
  std::vector<std::size_t> survivors;
  TransferabilityMatrix survivor_matrix;
  /// Candidate indices in selection order.
  std::vector<std::size_t> chosen;
  /// Test accuracies of the registry models after fine-tuning.
  std::vector<double> final_accuracies;
  /// Set when fewer than n candidates survive.
  bool warning = false;

  /// Candidate specs, accuracies, survivor matrix and chosen indices.
  Json report() const;
};

/// Greedy subset selection over survivor positions: start from the most
/// accurate, then repeatedly add the one maximizing ensemble_score. Ties go
/// to the smaller hash, then the smaller position.
std::vector<std::size_t> greedy_select(std::span<const double> accs, std::span<const std::uint64_t> hashes,
                                       const TransferabilityMatrix& t, std::size_t n, double lambda);

/// Throws SearchFailure when no candidate reaches a_min.
SearchResult search_ensemble(const SearchSpace& space, const Dataset& train, const Dataset& test,
                             const SearchConfig& cfg, std::uint64_t seed);

/// Mean off-diagonal transferability of `draws` uniformly random size-n
/// subsets of the matrix rows (each subset's mean, then the mean of those).
double random_subset_transfer(const TransferabilityMatrix& t, std::size_t n, std::size_t draws, std::uint64_t seed);

}  // namespace dnd
