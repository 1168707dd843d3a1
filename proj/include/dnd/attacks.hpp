#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dnd/models.hpp"

namespace dnd {

struct AttackConfig {
  double epsilon = 0.15;
  double alpha = 0.03;
  std::size_t steps = 10;
  bool targeted = false;
  int target_label = 0;

  /// 0 <= alpha <= epsilon <= 1 and steps >= 1.
  void validate() const;
};

/// Gradient of cross_entropy(classify(model, x), y) with respect to x.
Tensor input_gradient(const Classifier& model, const Tensor& x, int label);
/// Per-sample input gradients for a batch, in one tape.
std::vector<Tensor> input_gradients(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels);

/// clamp01(x + epsilon * sign(grad)).
Tensor fgsm(const Classifier& model, const Tensor& x, int label, double epsilon);
std::vector<Tensor> fgsm_batch(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels,
                               double epsilon);

/// Basic iterative method: steps of alpha * sign(grad), each projected onto
/// the epsilon ball around x and then onto [0, 1]. Targeted mode descends the
/// loss of cfg.target_label instead of ascending the loss of `label`.
Tensor iterative_fgsm(const Classifier& model, const Tensor& x, int label, const AttackConfig& cfg);
/// Same, also returning every iterate (x0 first).
std::vector<Tensor> iterative_fgsm_path(const Classifier& model, const Tensor& x, int label, const AttackConfig& cfg);

/// iterative_fgsm over many inputs, one tape per step.
std::vector<Tensor> iterative_fgsm_batch(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels,
                                         const AttackConfig& cfg);

/// Inputs harvested from a victim together with the labels it answered.
struct QueryLog {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  std::size_t num_classes = kGlyphClasses;

  std::size_t size() const noexcept { return inputs.size(); }
  Dataset as_dataset() const;
};

/// Black-box extraction: a fresh classifier fit to the victim's answers.
Classifier train_surrogate(const QueryLog& log, const ArchitectureSpec& spec, const TrainConfig& cfg);

struct OracleAnswer {
  int label = 0;
  double confidence = 0.0;
};
using VictimOracle = std::function<OracleAnswer(const Tensor&)>;

enum class ProbeKind { fgsm_probe, extraction_probe };
std::string to_string(ProbeKind k);

struct TraceRecord {
  Tensor input;
  int label = 0;
  double confidence = 0.0;
  std::size_t index = 0;
};

struct AttackTrace {
  ProbeKind kind = ProbeKind::fgsm_probe;
  std::vector<TraceRecord> records;

  /// One JSON object per line: {"confidence","index","input","kind","label","shape"}.
  std::string to_jsonl() const;
  static AttackTrace from_jsonl(const std::string& text);
};

/// Scripted attacker session against a black-box victim.
/// fgsm_probe: queries x0, then each iterate of iterative FGSM run on the local
/// surrogate with the victim's first answer as the label.
/// extraction_probe: queries x0, then `steps` near-duplicates of x0 with one
/// grid block moved by up to epsilon each.
/// Either way the trace has cfg.steps + 1 records.
AttackTrace synth_attack_session(const VictimOracle& victim, const Classifier& surrogate, const Tensor& x0,
                                 ProbeKind kind, const AttackConfig& cfg, std::uint64_t seed);

/// Fraction of pairs the target labels differently from the true label.
double attack_success_rate(const std::function<int(const Tensor&)>& target_infer,
                           std::span<const std::pair<Tensor, int>> adv_pairs);

}  // namespace dnd
