#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "dnd/attacks.hpp"
#include "dnd/models.hpp"

namespace dnd {

enum class SessionState { normal = 0, suspect = 1, decoy = 2 };
std::string to_string(SessionState s);
SessionState session_state_from_string(const std::string& s);

struct QueryRecord {
  Tensor input;
  int label = 0;
  double confidence = 0.0;
  std::uint64_t seq = 0;
};

inline constexpr std::size_t kPairFeatureDim = 5;
/// Pixels whose absolute change exceeds this count as changed.
inline constexpr double kChangedPixelThreshold = 0.05;

struct QueryFeatures {
  double linf = 0.0;
  double l2 = 0.0;
  double changed_fraction = 0.0;
  double label_flip = 0.0;
  double confidence_delta = 0.0;

  std::vector<double> as_vector() const { return {linf, l2, changed_fraction, label_flip, confidence_delta}; }
};

struct EscalationPolicy {
  double theta = 0.8;
  double lam = 0.7;

  void validate() const;
};

struct SentinelConfig {
  std::size_t window = 16;
  std::size_t capacity = 64;
  EscalationPolicy policy;
  double idle_timeout_s = 3600.0;
  std::size_t hidden = 16;
  /// Records per generated training session.
  std::size_t session_length = 32;
  AttackConfig attack;
  TrainConfig train{.epochs = 15, .batch_size = 32, .lr = 0.05, .momentum = 0.9, .seed = 0, .shuffle = true};

  void validate() const;
};

/// Per-client query history and escalation state. Not thread-safe; the
/// gateway serialises access per client.
class ClientSession {
 public:
  explicit ClientSession(std::string client_id, std::size_t capacity = 64);

  const std::string& client_id() const noexcept { return client_id_; }
  std::size_t capacity() const noexcept { return capacity_; }
  const std::deque<QueryRecord>& records() const noexcept { return records_; }
  SessionState state() const noexcept { return state_; }
  double score_ewma() const noexcept { return score_ewma_; }
  double last_score() const noexcept { return last_score_; }
  /// Total queries recorded, including evicted ones.
  std::uint64_t query_count() const noexcept { return next_seq_; }

  void record(Tensor x, int label, double confidence);
  SessionState apply_score(double score, const EscalationPolicy& policy);

  /// Caller-supplied clock reading of the latest activity, in seconds.
  double last_seen = 0.0;

 private:
  std::string client_id_;
  std::size_t capacity_;
  std::deque<QueryRecord> records_;
  SessionState state_ = SessionState::normal;
  double score_ewma_ = 0.0;
  double last_score_ = 0.0;
  std::uint64_t next_seq_ = 0;
};

/// Appends a record; the oldest record is evicted beyond capacity.
void record_query(ClientSession& session, const Tensor& x, int label, double confidence);

/// Throws DimensionError when the inputs differ in shape.
QueryFeatures extract_pair_features(const QueryRecord& prev, const QueryRecord& cur);

/// Pair features over the last window + 1 records of a record list.
std::vector<std::vector<double>> window_features(std::span<const QueryRecord> records, std::size_t window);

/// LSTM score over the last window + 1 records; 0.0 with fewer than 2 records.
double detect_sequence(const SequenceDetector& det, const ClientSession& session, std::size_t window = 16);

/// EWMA update followed by the monotone NORMAL -> SUSPECT -> DECOY transition.
SessionState escalate(ClientSession& session, double score, const EscalationPolicy& policy);

bool session_expired(const ClientSession& session, double now, double idle_timeout_s);

/// {client_id, confidence, label, score_ewma, seq, state} for the newest record.
Json session_audit_entry(const ClientSession& session);

struct LabeledSession {
  std::vector<QueryRecord> records;
  /// 1 for attack sessions.
  int label = 0;
  std::string kind = "benign";
};

struct DetectorDataset {
  std::vector<LabeledSession> sessions;

  /// One example per session prefix of at least 2 records, truncated to the
  /// last `window` pairs.
  std::vector<SequenceExample> examples(std::size_t window) const;
};

/// Oracle answering with the argmax label and its probability.
VictimOracle classifier_oracle(const Classifier& model);

/// Half benign sessions (i.i.d. draws from `data`), half attack sessions made
/// of back-to-back scripted traces, alternating fgsm_probe and
/// extraction_probe. Sessions have cfg.session_length records.
DetectorDataset gen_detector_dataset(std::span<const Classifier> victim_models, const Dataset& data,
                                     std::size_t n_sessions, const SentinelConfig& cfg, std::uint64_t seed);

/// Builds a session of `length` scripted attack queries against `victim`,
/// crafting on `surrogate`.
LabeledSession scripted_attack_session(const VictimOracle& victim, const Classifier& surrogate, const Dataset& data,
                                       ProbeKind kind, std::size_t length, const AttackConfig& cfg, Rng& rng);
LabeledSession benign_session(const VictimOracle& victim, const Dataset& data, std::size_t length, Rng& rng);

/// Fits feature scaling (inverse standard deviation) and trains the LSTM.
SequenceDetector train_sentinel_detector(const DetectorDataset& ds, const SentinelConfig& cfg, std::uint64_t seed);

}  // namespace dnd
