#include "dnd/diversity.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "dnd/attacks.hpp"
#include "dnd/errors.hpp"

namespace dnd {

namespace {

std::string kind_name(ArchKind k) { return k == ArchKind::mlp ? "mlp" : "convnet"; }

ArchKind kind_from_name(const std::string& s) {
  if (s == "mlp") return ArchKind::mlp;
  if (s == "convnet") return ArchKind::convnet;
  throw ValidationError("unknown architecture kind '" + s + "'");
}

}  // namespace

void SearchSpace::validate() const {
  if (kinds.empty()) throw ValidationError("search space: no architecture kinds");
  if (hidden_widths.empty()) throw ValidationError("search space: no hidden widths");
  if (activations.empty()) throw ValidationError("search space: no activations");
  if (min_depth < 1 || min_depth > max_depth) throw ValidationError("search space: depth range must be 1 <= min <= max");
  if (std::find(kinds.begin(), kinds.end(), ArchKind::convnet) != kinds.end() && conv_stages.empty()) {
    throw ValidationError("search space: convnet kind needs conv stage choices");
  }
  // Every combination must produce a valid spec.
  ArchitectureSpec probe;
  probe.input_shape = input_shape;
  probe.num_classes = num_classes;
  probe.hidden_widths = hidden_widths;
  probe.validate();
  probe.kind = ArchKind::convnet;
  for (const ConvStage& st : conv_stages) {
    probe.conv_stages = {st};
    probe.validate();
  }
}

Json SearchSpace::to_json() const {
  Json ks = Json::array(), acts = Json::array(), stages = Json::array();
  for (ArchKind k : kinds) ks.push_back(kind_name(k));
  for (Activation a : activations) acts.push_back(to_string(a));
  for (const ConvStage& st : conv_stages) {
    stages.push_back({{"channels", st.channels}, {"kernel", st.kernel}, {"stride", st.stride}});
  }
  return {{"kinds", ks},
          {"hidden_widths", hidden_widths},
          {"min_depth", min_depth},
          {"max_depth", max_depth},
          {"activations", acts},
          {"conv_stages", stages},
          {"input_shape", input_shape},
          {"num_classes", num_classes}};
}

SearchSpace SearchSpace::from_json(const Json& j) {
  SearchSpace s;
  try {
    if (j.contains("kinds")) {
      s.kinds.clear();
      for (const Json& k : j.at("kinds")) s.kinds.push_back(kind_from_name(k.get<std::string>()));
    }
    s.hidden_widths = j.value("hidden_widths", s.hidden_widths);
    s.min_depth = j.value("min_depth", s.min_depth);
    s.max_depth = j.value("max_depth", s.max_depth);
    if (j.contains("activations")) {
      s.activations.clear();
      for (const Json& a : j.at("activations")) s.activations.push_back(activation_from_string(a.get<std::string>()));
    }
    if (j.contains("conv_stages")) {
      s.conv_stages.clear();
      for (const Json& st : j.at("conv_stages")) {
        s.conv_stages.push_back({st.at("channels").get<std::size_t>(), st.at("kernel").get<std::size_t>(),
                                 st.at("stride").get<std::size_t>()});
      }
    }
    s.input_shape = j.value("input_shape", s.input_shape);
    s.num_classes = j.value("num_classes", s.num_classes);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed search space: ") + e.what());
  }
  s.validate();
  return s;
}

ArchitectureSpec sample_architecture(const SearchSpace& space, Rng& rng) {
  ArchitectureSpec s;
  s.input_shape = space.input_shape;
  s.num_classes = space.num_classes;
  s.kind = space.kinds[rng.below(space.kinds.size())];
  const std::size_t depth = static_cast<std::size_t>(
      rng.range(static_cast<long long>(space.min_depth), static_cast<long long>(space.max_depth)));
  s.hidden_widths.clear();
  for (std::size_t d = 0; d < depth; ++d) s.hidden_widths.push_back(space.hidden_widths[rng.below(space.hidden_widths.size())]);
  s.activation = space.activations[rng.below(space.activations.size())];
  const std::size_t stage = rng.below(std::max<std::size_t>(1, space.conv_stages.size()));
  if (s.kind == ArchKind::convnet) s.conv_stages = {space.conv_stages[stage]};
  s.validate();
  return s;
}

std::uint64_t spec_hash(const ArchitectureSpec& spec) { return fnv1a64(spec.canonical()); }

// --- transferability ---------------------------------------------------------

TransferabilityMatrix::TransferabilityMatrix(std::size_t n, double epsilon)
    : n_(n), epsilon_(epsilon), counts_(n * n, 0), successes_(n * n, 0) {}

std::optional<double> TransferabilityMatrix::at(std::size_t i, std::size_t j) const {
  const std::size_t c = count(i, j);
  if (c == 0) return std::nullopt;
  return static_cast<double>(successes(i, j)) / static_cast<double>(c);
}

void TransferabilityMatrix::set_cell(std::size_t i, std::size_t j, std::size_t successes, std::size_t count) {
  if (i >= n_ || j >= n_) throw DimensionError("transferability cell out of range");
  if (successes > count) throw ContractError("transferability cell: successes exceed count");
  counts_[i * n_ + j] = count;
  successes_[i * n_ + j] = successes;
}

std::optional<double> TransferabilityMatrix::mean_off_diagonal() const {
  double sum = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) {
      if (i == j) continue;
      if (const auto v = at(i, j)) {
        sum += *v;
        ++k;
      }
    }
  }
  if (k == 0) return std::nullopt;
  return sum / static_cast<double>(k);
}

TransferabilityMatrix TransferabilityMatrix::submatrix(std::span<const std::size_t> idx) const {
  TransferabilityMatrix out(idx.size(), epsilon_);
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = 0; b < idx.size(); ++b) out.set_cell(a, b, successes(idx[a], idx[b]), count(idx[a], idx[b]));
  }
  return out;
}

Json TransferabilityMatrix::to_json() const {
  Json values = Json::array(), counts = Json::array(), succ = Json::array();
  for (std::size_t i = 0; i < n_; ++i) {
    Json vr = Json::array(), cr = Json::array(), sr = Json::array();
    for (std::size_t j = 0; j < n_; ++j) {
      const auto v = at(i, j);
      vr.push_back(v ? Json(*v) : Json(nullptr));
      cr.push_back(count(i, j));
      sr.push_back(successes(i, j));
    }
    values.push_back(vr);
    counts.push_back(cr);
    succ.push_back(sr);
  }
  return {{"epsilon", epsilon_}, {"n", n_}, {"values", values}, {"counts", counts}, {"successes", succ}};
}

TransferabilityMatrix TransferabilityMatrix::from_json(const Json& j) {
  try {
    TransferabilityMatrix t(j.at("n").get<std::size_t>(), j.at("epsilon").get<double>());
    for (std::size_t a = 0; a < t.n_; ++a) {
      for (std::size_t b = 0; b < t.n_; ++b) {
        t.set_cell(a, b, j.at("successes").at(a).at(b).get<std::size_t>(), j.at("counts").at(a).at(b).get<std::size_t>());
      }
    }
    return t;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed transferability matrix: ") + e.what());
  }
}

TransferabilityMatrix recount_transferability(const TransferLog& log) {
  const std::size_t n = log.clean.size();
  TransferabilityMatrix t(n, log.matrix.epsilon());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t count = 0, succ = 0;
      for (std::size_t s = 0; s < log.labels.size(); ++s) {
        if (log.clean[i][s] != log.labels[s] || log.clean[j][s] != log.labels[s]) continue;
        ++count;
        succ += log.adv[i * n + j][s] != log.labels[s];
      }
      t.set_cell(i, j, succ, count);
    }
  }
  return t;
}

TransferLog transfer_evaluation(std::span<const Classifier> models, const Dataset& eval_set, double epsilon) {
  if (models.empty()) throw ValidationError("pairwise_transferability: no models");
  if (eval_set.empty()) throw ValidationError("pairwise_transferability: empty evaluation set");
  if (!(epsilon >= 0.0)) throw ValidationError("pairwise_transferability: epsilon must be >= 0");
  const std::size_t n = models.size();
  TransferLog log;
  log.labels = eval_set.labels;
  for (const Classifier& m : models) log.clean.push_back(predict_labels(m, eval_set.images));
  log.adv.resize(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto adv = fgsm_batch(models[i], eval_set.images, eval_set.labels, epsilon);
    for (std::size_t j = 0; j < n; ++j) log.adv[i * n + j] = predict_labels(models[j], adv);
  }
  log.matrix = TransferabilityMatrix(n, epsilon);
  log.matrix = recount_transferability(log);
  return log;
}

TransferabilityMatrix pairwise_transferability(std::span<const Classifier> models, const Dataset& eval_set,
                                               double epsilon) {
  return transfer_evaluation(models, eval_set, epsilon).matrix;
}

double ensemble_score(std::span<const double> accs, const TransferabilityMatrix& t, double lambda) {
  if (accs.empty()) throw ValidationError("ensemble_score: no accuracies");
  if (accs.size() != t.size()) throw DimensionError("ensemble_score: accuracy count differs from matrix size");
  if (!(lambda >= 0.0)) throw ValidationError("ensemble_score: lambda must be >= 0");
  const double mean_acc = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
  return mean_acc - lambda * t.mean_off_diagonal().value_or(0.0);
}

// --- search ------------------------------------------------------------------

void SearchConfig::validate() const {
  if (n < 1) throw ValidationError("search n must be >= 1");
  if (budget < n) throw ValidationError("search budget must be >= n");
  if (!(lambda >= 0.0)) throw ValidationError("search lambda must be >= 0");
  if (!(a_min >= 0.0 && a_min <= 1.0)) throw ValidationError("search a_min must be in [0, 1]");
  if (candidate_epochs < 1) throw ValidationError("search candidate_epochs must be >= 1");
  if (!(epsilon >= 0.0)) throw ValidationError("search epsilon must be >= 0");
  if (transfer_samples < 1) throw ValidationError("search transfer_samples must be >= 1");
  if (threads < 1) throw ValidationError("search threads must be >= 1");
  TrainConfig t = train;
  t.epochs = candidate_epochs;
  t.validate();
}

Json SearchConfig::to_json() const {
  return {{"n", n},
          {"budget", budget},
          {"lambda", lambda},
          {"a_min", a_min},
          {"candidate_epochs", candidate_epochs},
          {"finetune_epochs", finetune_epochs},
          {"epsilon", epsilon},
          {"transfer_samples", transfer_samples},
          {"batch_size", train.batch_size},
          {"lr", train.lr},
          {"momentum", train.momentum},
          {"threads", threads}};
}

SearchConfig SearchConfig::from_json(const Json& j) {
  SearchConfig c;
  try {
    c.n = j.value("n", c.n);
    c.budget = j.value("budget", c.budget);
    c.lambda = j.value("lambda", c.lambda);
    c.a_min = j.value("a_min", c.a_min);
    c.candidate_epochs = j.value("candidate_epochs", c.candidate_epochs);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.transfer_samples = j.value("transfer_samples", c.transfer_samples);
    c.train.batch_size = j.value("batch_size", c.train.batch_size);
    c.train.lr = j.value("lr", c.train.lr);
    c.train.momentum = j.value("momentum", c.train.momentum);
    c.threads = j.value("threads", c.threads);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed search config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::size_t> greedy_select(std::span<const double> accs, std::span<const std::uint64_t> hashes,
                                       const TransferabilityMatrix& t, std::size_t n, double lambda) {
  const std::size_t pool = accs.size();
  if (hashes.size() != pool || t.size() != pool) throw DimensionError("greedy_select: inconsistent pool sizes");
  if (n < 1 || n > pool) throw ValidationError("greedy_select: n must be in [1, pool size]");

  const auto better = [&](double score, std::size_t c, double best_score, std::size_t best) {
    if (score != best_score) return score > best_score;
    if (hashes[c] != hashes[best]) return hashes[c] < hashes[best];
    return c < best;
  };

  std::vector<std::size_t> chosen;
  std::size_t first = 0;
  for (std::size_t c = 1; c < pool; ++c) {
    if (better(accs[c], c, accs[first], first)) first = c;
  }
  chosen.push_back(first);
  std::vector<bool> used(pool, false);
  used[first] = true;
  while (chosen.size() < n) {
    std::size_t best = pool;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < pool; ++c) {
      if (used[c]) continue;
      std::vector<std::size_t> trial = chosen;
      trial.push_back(c);
      std::vector<double> sub_accs;
      for (std::size_t k : trial) sub_accs.push_back(accs[k]);
      const double s = ensemble_score(sub_accs, t.submatrix(trial), lambda);
      if (best == pool || better(s, c, best_score, best)) {
        best = c;
        best_score = s;
      }
    }
    chosen.push_back(best);
    used[best] = true;
  }
  return chosen;
}

namespace {

// Runs job(i) for i in [0, count) on up to `threads` workers. Results must be
// written to per-index slots so the outcome does not depend on scheduling.
template <typename Job>
void parallel_for(std::size_t count, std::size_t threads, Job job) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < std::min(threads, count); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

SearchResult search_ensemble(const SearchSpace& space, const Dataset& train, const Dataset& test,
                             const SearchConfig& cfg, std::uint64_t seed) {
  space.validate();
  cfg.validate();
  if (train.empty() || test.empty()) throw ValidationError("search_ensemble: empty dataset");

  SearchResult res;
  Rng rng(derive_seed(seed, "search/sample"));
  for (std::size_t i = 0; i < cfg.budget; ++i) {
    Candidate c;
    c.spec = sample_architecture(space, rng);
    c.hash = spec_hash(c.spec);
    res.candidates.push_back(std::move(c));
  }

  std::vector<std::optional<Classifier>> trained(cfg.budget);
  parallel_for(cfg.budget, cfg.threads, [&](std::size_t i) {
    Classifier m = build_classifier(res.candidates[i].spec, derive_seed(derive_seed(seed, "search/init"), i));
    TrainConfig tc = cfg.train;
    tc.epochs = cfg.candidate_epochs;
    tc.seed = derive_seed(derive_seed(seed, "search/train"), i);
    train_supervised(m, train, tc);
    res.candidates[i].accuracy = accuracy(m, test);
    trained[i] = std::move(m);
  });

  double best_acc = 0.0;
  std::vector<Classifier> pool;
  std::vector<double> accs;
  std::vector<std::uint64_t> hashes;
  for (std::size_t i = 0; i < cfg.budget; ++i) {
    Candidate& c = res.candidates[i];
    best_acc = std::max(best_acc, c.accuracy);
    c.survived = c.accuracy >= cfg.a_min;
    if (!c.survived) continue;
    res.survivors.push_back(i);
    pool.push_back(*trained[i]);
    accs.push_back(c.accuracy);
    hashes.push_back(c.hash);
  }
  if (res.survivors.empty()) {
    throw SearchFailure("architecture search: no candidate reached accuracy " + std::to_string(cfg.a_min) +
                            " (best " + std::to_string(best_acc) + ")",
                        best_acc);
  }

  const Dataset eval = test.subset(0, std::min(cfg.transfer_samples, test.size()));
  res.survivor_matrix = pairwise_transferability(pool, eval, cfg.epsilon);
  const std::size_t n = std::min(cfg.n, pool.size());
  res.warning = pool.size() < cfg.n;
  const auto picks = greedy_select(accs, hashes, res.survivor_matrix, n, cfg.lambda);

  std::vector<Classifier> chosen(picks.size(), pool[picks[0]]);
  res.final_accuracies.assign(picks.size(), 0.0);
  parallel_for(picks.size(), cfg.threads, [&](std::size_t k) {
    const std::size_t cand = res.survivors[picks[k]];
    Classifier m = pool[picks[k]];
    double acc = res.candidates[cand].accuracy;
    if (cfg.finetune_epochs > 0) {
      Classifier tuned = m;
      TrainConfig tc = cfg.train;
      tc.epochs = cfg.finetune_epochs;
      tc.seed = derive_seed(derive_seed(seed, "search/finetune"), cand);
      train_supervised(tuned, train, tc);
      const double tuned_acc = accuracy(tuned, test);
      // Fine-tuning never lowers a chosen model below its searched accuracy.
      if (tuned_acc >= acc) {
        m = std::move(tuned);
        acc = tuned_acc;
      }
    }
    chosen[k] = std::move(m);
    res.final_accuracies[k] = acc;
  });
  for (std::size_t p : picks) res.chosen.push_back(res.survivors[p]);
  res.registry = EnsembleRegistry(std::move(chosen), derive_seed(seed, "search/registry"));
  return res;
}

Json SearchResult::report() const {
  Json cands = Json::array();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Candidate& c = candidates[i];
    cands.push_back({{"index", i},
                     {"spec", c.spec.to_json()},
                     {"hash", c.hash},
                     {"accuracy", c.accuracy},
                     {"survived", c.survived}});
  }
  return {{"candidates", cands},
          {"survivors", survivors},
          {"transferability", survivor_matrix.to_json()},
          {"chosen", chosen},
          {"final_accuracies", final_accuracies},
          {"warning", warning}};
}

double random_subset_transfer(const TransferabilityMatrix& t, std::size_t n, std::size_t draws, std::uint64_t seed) {
  if (n < 2 || n > t.size()) throw ValidationError("random_subset_transfer: n must be in [2, pool size]");
  if (draws < 1) throw ValidationError("random_subset_transfer: draws must be >= 1");
  Rng rng(seed);
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<std::size_t> idx(t.size());
  for (std::size_t d = 0; d < draws; ++d) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(idx));
    const std::vector<std::size_t> pick(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
    if (const auto m = t.submatrix(pick).mean_off_diagonal()) {
      sum += *m;
      ++used;
    }
  }
  if (used == 0) throw ContractError("random_subset_transfer: no subset has a defined off-diagonal cell");
  return sum / static_cast<double>(used);
}

}  // namespace dnd
