#include "dnd/defense.hpp"

#include <algorithm>
#include <cmath>

#include "dnd/errors.hpp"

namespace dnd {

EnsembleRegistry::EnsembleRegistry(std::vector<Classifier> models, std::uint64_t selection_seed)
    : models_(std::move(models)), rng_(selection_seed) {
  for (const Classifier& m : models_) {
    if (m.spec().input_shape != models_.front().spec().input_shape ||
        m.spec().num_classes != models_.front().spec().num_classes) {
      throw ValidationError("registry models must share input shape and class count");
    }
  }
}

std::size_t select_random_model(const EnsembleRegistry& reg, Rng& rng) {
  if (reg.empty()) throw ContractError("select_random_model: empty registry");
  return rng.below(reg.size());
}

std::size_t select_random_model(EnsembleRegistry& reg) { return select_random_model(reg, reg.selection_rng()); }

Tensor quantize_input(const Tensor& x, int bits) {
  if (bits < 1 || bits > 8) throw ValidationError("quantize_input: bits must be in [1, 8]");
  const double levels = static_cast<double>((1 << bits) - 1);
  Tensor out = x;
  for (double& v : out.data) v = std::round(v * levels) / levels;
  return out;
}

void DefenseConfig::validate() const {
  if (K < 1) throw ValidationError("defense K must be >= 1");
  if (m_draws < 1) throw ValidationError("defense m_draws must be >= 1");
  if (quant_bits < 1 || quant_bits > 8) throw ValidationError("defense quant_bits must be in [1, 8]");
  if (!(theta_adv >= 0.0 && theta_adv <= 1.0)) throw ValidationError("defense theta_adv must be in [0, 1]");
  if (!(tau >= 0.0)) throw ValidationError("defense tau must be >= 0");
}

Json DefenseConfig::to_json() const {
  return {{"K", K},
          {"tau", tau},
          {"m_draws", m_draws},
          {"quant_bits", quant_bits},
          {"theta_adv", theta_adv},
          {"toggles", {{"sentinel", sentinel}, {"sanitize", sanitize}, {"vote", vote}}}};
}

DefenseConfig DefenseConfig::from_json(const Json& j) {
  DefenseConfig c;
  try {
    c.K = j.value("K", c.K);
    c.tau = j.value("tau", c.tau);
    c.m_draws = j.value("m_draws", c.m_draws);
    c.quant_bits = j.value("quant_bits", c.quant_bits);
    c.theta_adv = j.value("theta_adv", c.theta_adv);
    const Json t = j.value("toggles", Json::object());
    c.sentinel = t.value("sentinel", c.sentinel);
    c.sanitize = t.value("sanitize", c.sanitize);
    c.vote = t.value("vote", c.vote);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed defense config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Tensor> generate_variants(const VariationalAutoencoder& vae, const Tensor& x, std::size_t K, double tau,
                                      Rng& rng) {
  if (K < 1) throw ValidationError("generate_variants: K must be >= 1");
  std::vector<Tensor> out;
  out.reserve(K);
  out.push_back(vae_decode(vae, vae_encode(vae, x).mu));
  for (std::size_t k = 1; k < K; ++k) out.push_back(vae_sample(vae, x, tau, rng));
  return out;
}

int resolve_vote(std::span<const std::size_t> tally, std::span<const double> mass) {
  if (tally.empty() || tally.size() != mass.size()) throw DimensionError("resolve_vote: tally and mass differ");
  std::size_t best = 0;
  for (std::size_t c = 1; c < tally.size(); ++c) {
    if (tally[c] > tally[best] || (tally[c] == tally[best] && mass[c] > mass[best])) best = c;
  }
  return static_cast<int>(best);
}

InferenceOutcome vote_classify(const EnsembleRegistry& reg, std::span<const Tensor> variants, std::size_t m_draws,
                               Rng& rng) {
  if (variants.empty()) throw ValidationError("vote_classify: no variants");
  if (m_draws < 1) throw ValidationError("vote_classify: m_draws must be >= 1");
  if (reg.empty()) throw ContractError("vote_classify: empty registry");
  const std::size_t c = reg.model(0).spec().num_classes;
  InferenceOutcome out;
  out.tally.assign(c, 0);
  std::vector<double> mass(c, 0.0);
  std::vector<Tensor> probs;
  for (const Tensor& v : variants) {
    for (std::size_t d = 0; d < m_draws; ++d) {
      const std::size_t idx = select_random_model(reg, rng);
      probs.push_back(classify(reg.model(idx), v));
      out.tally[argmax(probs.back().data)] += 1;
      for (std::size_t k = 0; k < c; ++k) mass[k] += probs.back()[k];
      out.model_ids.push_back("f" + std::to_string(idx));
    }
  }
  out.label = resolve_vote(out.tally, mass);
  out.confidence = mass[static_cast<std::size_t>(out.label)] / static_cast<double>(probs.size());
  return out;
}

ArchitectureSpec detector_spec() {
  ArchitectureSpec s;
  s.hidden_widths = {64};
  s.num_classes = 2;
  return s;
}

AdvDetector::AdvDetector(Classifier m) : model(std::move(m)) {
  if (model.spec().num_classes != 2) throw ValidationError("adversarial detector must have 2 outputs");
}

AdvDetector train_adv_detector(const Dataset& clean_set, std::span<const Classifier> craft_models,
                               const AdvDetectorConfig& cfg, std::uint64_t seed) {
  if (clean_set.empty()) throw ValidationError("train_adv_detector: empty clean set");
  if (craft_models.empty()) throw ValidationError("train_adv_detector: no craft models");
  if (cfg.spec.num_classes != 2) throw ValidationError("train_adv_detector: spec must have 2 classes");
  clean_set.validate();
  const std::size_t n = craft_models.size();

  // Group samples by (crafting model, attack) so each group is one batch.
  std::vector<std::vector<std::size_t>> groups(2 * n);
  for (std::size_t i = 0; i < clean_set.size(); ++i) groups[2 * (i % n) + (i / n) % 2].push_back(i);
  std::vector<Tensor> crafted(clean_set.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) continue;
    std::vector<Tensor> xs;
    std::vector<int> ys;
    for (std::size_t i : groups[g]) {
      xs.push_back(clean_set.images[i]);
      ys.push_back(clean_set.labels[i]);
    }
    const Classifier& m = craft_models[g / 2];
    auto adv = g % 2 ? iterative_fgsm_batch(m, xs, ys, cfg.attack) : fgsm_batch(m, xs, ys, cfg.attack.epsilon);
    for (std::size_t k = 0; k < groups[g].size(); ++k) crafted[groups[g][k]] = std::move(adv[k]);
  }

  Dataset ds;
  ds.num_classes = 2;
  for (std::size_t i = 0; i < clean_set.size(); ++i) {
    ds.images.push_back(clean_set.images[i]);
    ds.labels.push_back(0);
    ds.images.push_back(std::move(crafted[i]));
    ds.labels.push_back(1);
  }

  Classifier model = build_classifier(cfg.spec, derive_seed(seed, "advdet/init"));
  TrainConfig tc = cfg.train;
  std::size_t done = 0;
  TrainStats st;
  std::vector<double> losses;
  for (std::size_t round = 0; done < cfg.max_epochs; ++round) {
    tc.epochs = std::min(cfg.train.epochs, cfg.max_epochs - done);
    tc.seed = derive_seed(seed, round);
    st = train_supervised(model, ds, tc);
    losses.insert(losses.end(), st.epoch_losses.begin(), st.epoch_losses.end());
    done += tc.epochs;
    if (st.train_accuracy >= cfg.target_accuracy) break;
  }
  st.epochs = done;
  st.seed = seed;
  st.epoch_losses = losses;
  st.loss_decreased = losses.size() < 2 || losses.back() < losses.front();
  model.train_stats = st;
  return AdvDetector(std::move(model));
}

double detect_adversarial(const AdvDetector& det, const Tensor& x) { return classify(det.model, x)[1]; }

ArchitectureSpec decoy_spec(const ArchitectureSpec& production) {
  ArchitectureSpec s = production;
  for (std::size_t& w : s.hidden_widths) w = std::max<std::size_t>(1, w / 2);
  for (ConvStage& st : s.conv_stages) st.channels = std::max<std::size_t>(1, st.channels / 2);
  return s;
}

InferenceOutcome defend_infer(const DefensePipeline& p, const Tensor& x, SessionState state, Rng& rng) {
  const DefenseConfig& cfg = p.cfg;
  if (p.registry.empty()) throw ContractError("defend_infer: empty registry");
  const Shape& shape = p.registry.model(0).spec().input_shape;
  if (x.shape != shape) {
    throw DimensionError("defend_infer: input shape " + shape_string(x.shape) + " does not match " +
                         shape_string(shape));
  }
  const std::size_t k_eff = cfg.vote ? cfg.K : 1;
  if (cfg.sentinel && state == SessionState::decoy) {
    const Tensor probs = classify(p.decoy, x);
    InferenceOutcome out;
    out.label = static_cast<int>(argmax(probs.data));
    out.confidence = probs[static_cast<std::size_t>(out.label)];
    out.tally.assign(probs.numel(), 0);
    out.tally[static_cast<std::size_t>(out.label)] = k_eff * cfg.m_draws;
    out.served_by_decoy = true;
    out.model_ids = {"decoy"};
    return out;
  }
  Tensor clean = x;
  double adv_score = 0.0;
  if (cfg.sanitize) {
    clean = quantize_input(clean, cfg.quant_bits);
    adv_score = detect_adversarial(p.detector, clean);
    clean = denoise(p.ae, clean);
  }
  const std::vector<Tensor> variants =
      cfg.vote ? generate_variants(p.vae, clean, cfg.K, cfg.tau, rng) : std::vector<Tensor>{clean};
  InferenceOutcome out = vote_classify(p.registry, variants, cfg.m_draws, rng);
  out.adversarial_score = adv_score;
  out.adversarial_suspect = cfg.sanitize && adv_score >= cfg.theta_adv;
  return out;
}

}  // namespace dnd
