#include "dnd/sentinel.hpp"

#include <algorithm>
#include <cmath>

#include "dnd/errors.hpp"

namespace dnd {

std::string to_string(SessionState s) {
  switch (s) {
    case SessionState::normal:
      return "NORMAL";
    case SessionState::suspect:
      return "SUSPECT";
    case SessionState::decoy:
      return "DECOY";
  }
  return "NORMAL";
}

SessionState session_state_from_string(const std::string& s) {
  if (s == "NORMAL") return SessionState::normal;
  if (s == "SUSPECT") return SessionState::suspect;
  if (s == "DECOY") return SessionState::decoy;
  throw ValidationError("unknown session state '" + s + "'");
}

void EscalationPolicy::validate() const {
  if (!(lam >= 0.0 && lam < 1.0)) throw ValidationError("escalation lam must be in [0, 1)");
  if (!(theta >= 0.0 && theta <= 1.0)) throw ValidationError("escalation theta must be in [0, 1]");
}

void SentinelConfig::validate() const {
  if (window < 1) throw ValidationError("sentinel window must be >= 1");
  if (capacity < window + 1) throw ValidationError("sentinel capacity must exceed the window");
  if (session_length < 2) throw ValidationError("sentinel session_length must be >= 2");
  if (hidden < 1) throw ValidationError("sentinel hidden size must be >= 1");
  if (!(idle_timeout_s > 0.0)) throw ValidationError("sentinel idle_timeout_s must be positive");
  policy.validate();
  attack.validate();
  train.validate();
}

ClientSession::ClientSession(std::string client_id, std::size_t capacity)
    : client_id_(std::move(client_id)), capacity_(capacity) {
  if (capacity_ == 0) throw ValidationError("session capacity must be positive");
}

void ClientSession::record(Tensor x, int label, double confidence) {
  records_.push_back({std::move(x), label, confidence, next_seq_++});
  while (records_.size() > capacity_) records_.pop_front();
}

SessionState ClientSession::apply_score(double score, const EscalationPolicy& policy) {
  policy.validate();
  last_score_ = score;
  score_ewma_ = policy.lam * score_ewma_ + (1.0 - policy.lam) * score;
  if (state_ == SessionState::decoy) return state_;
  if (score_ewma_ >= policy.theta) {
    state_ = SessionState::decoy;
  } else if (score_ewma_ >= policy.theta / 2.0) {
    state_ = SessionState::suspect;
  }
  return state_;
}

void record_query(ClientSession& session, const Tensor& x, int label, double confidence) {
  session.record(x, label, confidence);
}

QueryFeatures extract_pair_features(const QueryRecord& prev, const QueryRecord& cur) {
  if (prev.input.shape != cur.input.shape) {
    throw DimensionError("pair features: shapes " + shape_string(prev.input.shape) + " and " +
                         shape_string(cur.input.shape) + " differ");
  }
  QueryFeatures f;
  std::size_t changed = 0;
  double sq = 0.0;
  for (std::size_t i = 0; i < cur.input.numel(); ++i) {
    const double d = std::abs(cur.input[i] - prev.input[i]);
    f.linf = std::max(f.linf, d);
    sq += d * d;
    changed += d > kChangedPixelThreshold;
  }
  f.l2 = std::sqrt(sq);
  f.changed_fraction = cur.input.numel() ? static_cast<double>(changed) / static_cast<double>(cur.input.numel()) : 0.0;
  f.label_flip = prev.label != cur.label ? 1.0 : 0.0;
  f.confidence_delta = cur.confidence - prev.confidence;
  return f;
}

std::vector<std::vector<double>> window_features(std::span<const QueryRecord> records, std::size_t window) {
  std::vector<std::vector<double>> out;
  if (records.size() < 2) return out;
  const std::size_t first = records.size() - std::min(records.size(), window + 1);
  for (std::size_t i = first + 1; i < records.size(); ++i) {
    out.push_back(extract_pair_features(records[i - 1], records[i]).as_vector());
  }
  return out;
}

double detect_sequence(const SequenceDetector& det, const ClientSession& session, std::size_t window) {
  const auto& recs = session.records();
  if (recs.size() < 2) return 0.0;
  const std::size_t take = std::min(recs.size(), window + 1);
  const std::vector<QueryRecord> tail(recs.end() - static_cast<std::ptrdiff_t>(take), recs.end());
  return lstm_forward(det, window_features(tail, window));
}

SessionState escalate(ClientSession& session, double score, const EscalationPolicy& policy) {
  return session.apply_score(score, policy);
}

bool session_expired(const ClientSession& session, double now, double idle_timeout_s) {
  return now - session.last_seen > idle_timeout_s;
}

Json session_audit_entry(const ClientSession& session) {
  if (session.records().empty()) throw ContractError("session_audit_entry: session has no records");
  const QueryRecord& r = session.records().back();
  return {{"client_id", session.client_id()}, {"confidence", r.confidence}, {"label", r.label},
          {"score_ewma", session.score_ewma()}, {"seq", r.seq},            {"state", to_string(session.state())}};
}

std::vector<SequenceExample> DetectorDataset::examples(std::size_t window) const {
  std::vector<SequenceExample> out;
  for (const LabeledSession& s : sessions) {
    for (std::size_t end = 2; end <= s.records.size(); ++end) {
      out.push_back({window_features(std::span<const QueryRecord>(s.records).first(end), window), s.label});
    }
  }
  return out;
}

VictimOracle classifier_oracle(const Classifier& model) {
  return [&model](const Tensor& x) {
    const Tensor p = classify(model, x);
    const std::size_t k = argmax(p.data);
    return OracleAnswer{static_cast<int>(k), p[k]};
  };
}

namespace {

void append_answer(LabeledSession& s, const Tensor& x, const OracleAnswer& a) {
  s.records.push_back({x, a.label, a.confidence, s.records.size()});
}

}  // namespace

LabeledSession benign_session(const VictimOracle& victim, const Dataset& data, std::size_t length, Rng& rng) {
  if (data.empty()) throw ValidationError("benign_session: empty dataset");
  LabeledSession s;
  for (std::size_t i = 0; i < length; ++i) {
    const Tensor& x = data.images[rng.below(data.size())];
    append_answer(s, x, victim(x));
  }
  return s;
}

LabeledSession scripted_attack_session(const VictimOracle& victim, const Classifier& surrogate, const Dataset& data,
                                       ProbeKind kind, std::size_t length, const AttackConfig& cfg, Rng& rng) {
  if (data.empty()) throw ValidationError("scripted_attack_session: empty dataset");
  LabeledSession s;
  s.label = 1;
  s.kind = to_string(kind);
  while (s.records.size() < length) {
    const Tensor& x0 = data.images[rng.below(data.size())];
    const AttackTrace t = synth_attack_session(victim, surrogate, x0, kind, cfg, rng.next_u64());
    for (const TraceRecord& r : t.records) {
      if (s.records.size() == length) break;
      s.records.push_back({r.input, r.label, r.confidence, s.records.size()});
    }
  }
  return s;
}

DetectorDataset gen_detector_dataset(std::span<const Classifier> victim_models, const Dataset& data,
                                     std::size_t n_sessions, const SentinelConfig& cfg, std::uint64_t seed) {
  if (victim_models.empty()) throw ValidationError("gen_detector_dataset: no victim models");
  if (n_sessions < 2) throw ValidationError("gen_detector_dataset: n_sessions must be >= 2");
  cfg.validate();
  Rng rng(seed);
  const std::size_t n = victim_models.size();
  DetectorDataset ds;
  const std::size_t attacks = n_sessions / 2;
  for (std::size_t j = 0; j < n_sessions; ++j) {
    const Classifier& victim = victim_models[j % n];
    const VictimOracle oracle = classifier_oracle(victim);
    if (j < attacks) {
      const ProbeKind kind = j % 2 == 0 ? ProbeKind::fgsm_probe : ProbeKind::extraction_probe;
      ds.sessions.push_back(scripted_attack_session(oracle, victim_models[(j + 1) % n], data, kind,
                                                    cfg.session_length, cfg.attack, rng));
    } else {
      ds.sessions.push_back(benign_session(oracle, data, cfg.session_length, rng));
    }
  }
  return ds;
}

SequenceDetector train_sentinel_detector(const DetectorDataset& ds, const SentinelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto examples = ds.examples(cfg.window);
  if (examples.empty()) throw ValidationError("train_sentinel_detector: no training sequences");
  std::vector<double> sum(kPairFeatureDim, 0.0), sq(kPairFeatureDim, 0.0);
  std::size_t count = 0;
  for (const LabeledSession& s : ds.sessions) {
    for (const auto& step : window_features(s.records, s.records.size())) {
      for (std::size_t k = 0; k < kPairFeatureDim; ++k) {
        sum[k] += step[k];
        sq[k] += step[k] * step[k];
      }
      ++count;
    }
  }
  SequenceDetector det(kPairFeatureDim, cfg.hidden, derive_seed(seed, "sentinel/init"));
  for (std::size_t k = 0; k < kPairFeatureDim; ++k) {
    const double m = sum[k] / static_cast<double>(count);
    const double sd = std::sqrt(std::max(0.0, sq[k] / static_cast<double>(count) - m * m));
    det.feature_scale[k] = sd > 1e-9 ? 1.0 / sd : 1.0;
  }
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, "sentinel/train");
  train_sequence_detector(det, examples, tc);
  return det;
}

}  // namespace dnd
