#include "dnd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dnd/errors.hpp"

namespace dnd {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void require_input(const Classifier& model, const Tensor& x, const char* op) {
  if (x.shape != model.spec().input_shape) {
    throw DimensionError(std::string(op) + ": input shape " + shape_string(x.shape) + " does not match " +
                         shape_string(model.spec().input_shape));
  }
}

void require_label(const Classifier& model, int label, const char* op) {
  if (label < 0 || static_cast<std::size_t>(label) >= model.spec().num_classes) {
    throw ValidationError(std::string(op) + ": label " + std::to_string(label) + " out of range");
  }
}

// Gradients of the per-sample loss (the batch-mean loss rescaled by B).
std::vector<Tensor> batch_gradients(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels) {
  const std::size_t c = model.spec().num_classes;
  Tensor target({xs.size(), c});
  for (std::size_t i = 0; i < xs.size(); ++i) target[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  Tape tape;
  const auto P = bind_frozen(tape, model.params());
  Var in = tape.input(stack(xs), true);
  Var loss = compute_loss(softmax(model.logits(tape, P, in)), tape.input(std::move(target)), LossKind::cross_entropy);
  tape.backward(scale(loss, static_cast<double>(xs.size())));
  const auto& g = tape.grad(in);
  const std::size_t d = xs.front().numel();
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out.emplace_back(xs[i].shape, std::vector<double>(g.begin() + static_cast<std::ptrdiff_t>(i * d),
                                                      g.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)));
  }
  return out;
}

Tensor sign_step(const Tensor& x, const Tensor& grad, double step) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += step * sign(grad[i]);
  return out;
}

}  // namespace

void AttackConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= epsilon && epsilon <= 1.0)) {
    throw ValidationError("attack config needs 0 <= alpha <= epsilon <= 1");
  }
  if (steps < 1) throw ValidationError("attack config needs steps >= 1");
}

std::vector<Tensor> input_gradients(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels) {
  if (xs.size() != labels.size()) throw DimensionError("input_gradients: inputs and labels differ in length");
  for (const Tensor& x : xs) require_input(model, x, "input_gradient");
  for (int y : labels) require_label(model, y, "input_gradient");
  constexpr std::size_t kChunk = 256;
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (std::size_t b = 0; b < xs.size(); b += kChunk) {
    const std::size_t n = std::min(kChunk, xs.size() - b);
    auto part = batch_gradients(model, xs.subspan(b, n), labels.subspan(b, n));
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

Tensor input_gradient(const Classifier& model, const Tensor& x, int label) {
  return std::move(input_gradients(model, std::span<const Tensor>(&x, 1), std::span<const int>(&label, 1)).front());
}

std::vector<Tensor> fgsm_batch(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels,
                               double epsilon) {
  if (epsilon < 0.0) throw ValidationError("fgsm: epsilon must be >= 0");
  const auto grads = input_gradients(model, xs, labels);
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out.push_back(clamp01(sign_step(xs[i], grads[i], epsilon)));
  return out;
}

Tensor fgsm(const Classifier& model, const Tensor& x, int label, double epsilon) {
  return std::move(fgsm_batch(model, std::span<const Tensor>(&x, 1), std::span<const int>(&label, 1), epsilon).front());
}

namespace {

void project(Tensor& next, const Tensor& x0, double epsilon) {
  for (std::size_t i = 0; i < next.numel(); ++i) {
    next[i] = std::clamp(std::min(std::max(next[i], x0[i] - epsilon), x0[i] + epsilon), 0.0, 1.0);
  }
}

}  // namespace

std::vector<Tensor> iterative_fgsm_batch(const Classifier& model, std::span<const Tensor> xs, std::span<const int> labels,
                                         const AttackConfig& cfg) {
  cfg.validate();
  if (xs.size() != labels.size()) throw DimensionError("iterative_fgsm_batch: inputs and labels differ in length");
  std::vector<int> loss_labels(labels.begin(), labels.end());
  if (cfg.targeted) std::fill(loss_labels.begin(), loss_labels.end(), cfg.target_label);
  const double step = (cfg.targeted ? -1.0 : 1.0) * cfg.alpha;
  std::vector<Tensor> cur(xs.begin(), xs.end());
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto grads = input_gradients(model, cur, loss_labels);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      Tensor next = sign_step(cur[i], grads[i], step);
      project(next, xs[i], cfg.epsilon);
      cur[i] = std::move(next);
    }
  }
  return cur;
}

std::vector<Tensor> iterative_fgsm_path(const Classifier& model, const Tensor& x0, int label, const AttackConfig& cfg) {
  cfg.validate();
  require_input(model, x0, "iterative_fgsm");
  const int loss_label = cfg.targeted ? cfg.target_label : label;
  require_label(model, loss_label, "iterative_fgsm");
  const double direction = cfg.targeted ? -1.0 : 1.0;
  std::vector<Tensor> path{x0};
  Tensor x = x0;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Tensor next = sign_step(x, input_gradient(model, x, loss_label), direction * cfg.alpha);
    project(next, x0, cfg.epsilon);
    x = std::move(next);
    path.push_back(x);
  }
  return path;
}

Tensor iterative_fgsm(const Classifier& model, const Tensor& x, int label, const AttackConfig& cfg) {
  return std::move(iterative_fgsm_path(model, x, label, cfg).back());
}

Dataset QueryLog::as_dataset() const {
  Dataset ds;
  ds.images = inputs;
  ds.labels = labels;
  ds.num_classes = num_classes;
  return ds;
}

Classifier train_surrogate(const QueryLog& log, const ArchitectureSpec& spec, const TrainConfig& cfg) {
  if (log.size() == 0) throw ValidationError("train_surrogate: empty query log");
  if (log.labels.size() != log.inputs.size()) throw ValidationError("train_surrogate: labels and inputs differ in length");
  Classifier model = build_classifier(spec, derive_seed(cfg.seed, "surrogate/init"));
  model.train_stats = train_supervised(model, log.as_dataset(), cfg);
  return model;
}

std::string to_string(ProbeKind k) { return k == ProbeKind::fgsm_probe ? "fgsm_probe" : "extraction_probe"; }

namespace {

ProbeKind probe_from_string(const std::string& s) {
  if (s == "fgsm_probe") return ProbeKind::fgsm_probe;
  if (s == "extraction_probe") return ProbeKind::extraction_probe;
  throw ValidationError("unknown probe kind '" + s + "'");
}

// Block probes tile the image on a 3-pixel grid with 2x2 blocks.
constexpr std::size_t kProbeGrid = 3;
constexpr std::size_t kProbeBlock = 2;

// Each pixel of the block moves by `delta` towards the middle of [0, 1].
Tensor block_probe(const Tensor& x0, std::size_t k, double delta) {
  Tensor x = x0;
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t cols = std::max<std::size_t>(1, (w + kProbeGrid - 1) / kProbeGrid);
  const std::size_t rows = std::max<std::size_t>(1, (h + kProbeGrid - 1) / kProbeGrid);
  const std::size_t cell = k % (rows * cols);
  const std::size_t r0 = (cell / cols) * kProbeGrid, c0 = (cell % cols) * kProbeGrid;
  const std::size_t planes = x.numel() / (h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = r0; r < std::min(h, r0 + kProbeBlock); ++r) {
      for (std::size_t c = c0; c < std::min(w, c0 + kProbeBlock); ++c) {
        double& v = x[p * h * w + r * w + c];
        v = std::clamp(v < 0.5 ? v + delta : v - delta, 0.0, 1.0);
      }
    }
  }
  return x;
}

}  // namespace

AttackTrace synth_attack_session(const VictimOracle& victim, const Classifier& surrogate, const Tensor& x0,
                                 ProbeKind kind, const AttackConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  AttackTrace trace;
  trace.kind = kind;
  auto query = [&](const Tensor& x) {
    const OracleAnswer a = victim(x);
    trace.records.push_back({x, a.label, a.confidence, trace.records.size()});
    return a;
  };
  const OracleAnswer first = query(x0);
  if (kind == ProbeKind::fgsm_probe) {
    const auto path = iterative_fgsm_path(surrogate, x0, first.label, cfg);
    for (std::size_t i = 1; i < path.size(); ++i) query(path[i]);
  } else {
    Rng rng(seed);
    for (std::size_t k = 0; k < cfg.steps; ++k) {
      query(block_probe(x0, k, rng.uniform(0.5, 1.0) * cfg.epsilon));
    }
  }
  return trace;
}

std::string AttackTrace::to_jsonl() const {
  std::ostringstream os;
  for (const TraceRecord& r : records) {
    const Json line = {{"confidence", r.confidence}, {"index", r.index},   {"input", r.input.data},
                       {"kind", to_string(kind)},    {"label", r.label},   {"shape", r.input.shape}};
    os << line.dump() << '\n';
  }
  return os.str();
}

AttackTrace AttackTrace::from_jsonl(const std::string& text) {
  AttackTrace trace;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      TraceRecord r;
      r.input = Tensor(j.at("shape").get<Shape>(), j.at("input").get<std::vector<double>>());
      r.label = j.at("label").get<int>();
      r.confidence = j.at("confidence").get<double>();
      r.index = j.at("index").get<std::size_t>();
      if (!trace.records.empty() && r.index <= trace.records.back().index) {
        throw ValidationError("indices must be strictly increasing");
      }
      trace.kind = probe_from_string(j.at("kind").get<std::string>());
      trace.records.push_back(std::move(r));
    } catch (const Json::exception& e) {
      throw ValidationError("attack trace line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ValidationError("attack trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trace;
}

double attack_success_rate(const std::function<int(const Tensor&)>& target_infer,
                           std::span<const std::pair<Tensor, int>> adv_pairs) {
  if (adv_pairs.empty()) throw ValidationError("attack_success_rate: empty list");
  std::size_t fooled = 0;
  for (const auto& [x, y] : adv_pairs) fooled += target_infer(x) != y;
  return static_cast<double>(fooled) / static_cast<double>(adv_pairs.size());
}

}  // namespace dnd
