#include "dnd/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "dnd/errors.hpp"

namespace dnd {

namespace {

std::size_t flat_dim(const Shape& s) { return shape_numel(s); }

// [B x D] view of a batch whose samples have `sample_numel` elements.
Var flatten_batch(Var batch, std::size_t sample_numel) {
  const Tensor& v = batch.value();
  if (v.rank() < 1 || v.dim(0) == 0 || v.numel() != v.dim(0) * sample_numel) {
    throw DimensionError("batch of shape " + shape_string(v.shape) + " does not hold samples of " +
                         std::to_string(sample_numel) + " elements");
  }
  if (v.rank() == 2 && v.dim(1) == sample_numel) return batch;
  return reshape(batch, {v.dim(0), sample_numel});
}

void require_shape(const Tensor& x, const Shape& expected, const char* op) {
  if (x.shape != expected) {
    throw DimensionError(std::string(op) + ": input shape " + shape_string(x.shape) + " does not match " +
                         shape_string(expected));
  }
}

Var dense(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

std::size_t stage_out(std::size_t side, const ConvStage& st) {
  const std::size_t pad = st.kernel / 2;
  return (side + 2 * pad - st.kernel) / st.stride + 1;
}

Tensor one_hot_rows(std::span<const int> labels, std::size_t classes) {
  Tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  return t;
}

// Last epoch below first epoch; single-epoch runs count as decreased only if
// there is nothing to compare.
bool decreased(const std::vector<double>& losses) {
  return losses.size() < 2 || losses.back() < losses.front();
}

Json shape_json(const Shape& s) { return Json(s); }

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::sigmoid:
      return "sigmoid";
    case Activation::tanh:
      return "tanh";
  }
  return "relu";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  throw ValidationError("unknown activation '" + s + "'");
}

// --- ArchitectureSpec ------------------------------------------------------

void ArchitectureSpec::validate() const {
  if (input_shape.size() != 3 || std::find(input_shape.begin(), input_shape.end(), 0) != input_shape.end()) {
    throw ValidationError("input_shape must be [channels, height, width] with positive entries, got " +
                          shape_string(input_shape));
  }
  if (num_classes < 2) throw ValidationError("num_classes must be at least 2");
  for (std::size_t w : hidden_widths) {
    if (w == 0) throw ValidationError("hidden widths must be positive");
  }
  if (kind == ArchKind::mlp) {
    if (hidden_widths.empty()) throw ValidationError("mlp needs at least one hidden layer");
    if (!conv_stages.empty()) throw ValidationError("mlp spec must not list conv stages");
    return;
  }
  if (conv_stages.empty()) throw ValidationError("convnet needs at least one conv stage");
  std::size_t h = input_shape[1], w = input_shape[2];
  for (const ConvStage& st : conv_stages) {
    if (st.channels == 0) throw ValidationError("conv channels must be positive");
    if (st.kernel % 2 == 0) throw ValidationError("conv kernel must be odd, got " + std::to_string(st.kernel));
    if (st.kernel > std::min(h, w)) {
      throw ValidationError("conv kernel " + std::to_string(st.kernel) + " exceeds input side " +
                            std::to_string(std::min(h, w)));
    }
    if (st.stride == 0) throw ValidationError("conv stride must be positive");
    h = stage_out(h, st);
    w = stage_out(w, st);
  }
}

Json ArchitectureSpec::to_json() const {
  Json stages = Json::array();
  for (const ConvStage& st : conv_stages) {
    stages.push_back({{"channels", st.channels}, {"kernel", st.kernel}, {"stride", st.stride}});
  }
  return {{"kind", kind == ArchKind::mlp ? "mlp" : "convnet"},
          {"hidden_widths", hidden_widths},
          {"conv_stages", stages},
          {"activation", dnd::to_string(activation)},
          {"input_shape", shape_json(input_shape)},
          {"num_classes", num_classes}};
}

ArchitectureSpec ArchitectureSpec::from_json(const Json& j) {
  ArchitectureSpec s;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp") {
      s.kind = ArchKind::mlp;
    } else if (kind == "convnet") {
      s.kind = ArchKind::convnet;
    } else {
      throw ValidationError("unknown architecture kind '" + kind + "'");
    }
    s.hidden_widths = j.value("hidden_widths", std::vector<std::size_t>{});
    s.conv_stages.clear();
    for (const Json& st : j.value("conv_stages", Json::array())) {
      s.conv_stages.push_back({st.at("channels").get<std::size_t>(), st.at("kernel").get<std::size_t>(),
                               st.at("stride").get<std::size_t>()});
    }
    s.activation = activation_from_string(j.value("activation", std::string("relu")));
    s.input_shape = j.value("input_shape", Shape{1, kGlyphSide, kGlyphSide});
    s.num_classes = j.value("num_classes", kGlyphClasses);
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed architecture spec: ") + e.what());
  }
  s.validate();
  return s;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("momentum must be in [0, 1)");
}

// --- parameter helpers -----------------------------------------------------

std::vector<Var> bind_trainable(Tape& tape, std::vector<Tensor>& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (Tensor& p : params) out.push_back(tape.param(p));
  return out;
}

std::vector<Var> bind_frozen(Tape& tape, const std::vector<Tensor>& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.push_back(tape.constant_ref(p));
  return out;
}

std::vector<Tensor*> param_pointers(std::vector<Tensor>& params) {
  std::vector<Tensor*> out;
  for (Tensor& p : params) out.push_back(&p);
  return out;
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

// --- Classifier ------------------------------------------------------------

std::vector<Shape> classifier_param_shapes(const ArchitectureSpec& spec) {
  spec.validate();
  std::vector<Shape> shapes;
  std::size_t in = 0;
  if (spec.kind == ArchKind::mlp) {
    in = flat_dim(spec.input_shape);
  } else {
    std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
    for (const ConvStage& st : spec.conv_stages) {
      shapes.push_back({st.channels, c, st.kernel, st.kernel});
      shapes.push_back({st.channels});
      c = st.channels;
      h = stage_out(h, st);
      w = stage_out(w, st);
    }
    in = c * h * w;
  }
  for (std::size_t width : spec.hidden_widths) {
    shapes.push_back({in, width});
    shapes.push_back({width});
    in = width;
  }
  shapes.push_back({in, spec.num_classes});
  shapes.push_back({spec.num_classes});
  return shapes;
}

Classifier::Classifier(ArchitectureSpec spec, std::vector<Tensor> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  const auto shapes = classifier_param_shapes(spec_);
  if (shapes.size() != params_.size()) {
    throw DimensionError("classifier expects " + std::to_string(shapes.size()) + " parameter tensors, got " +
                         std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params_[i].shape != shapes[i]) {
      throw DimensionError("parameter " + std::to_string(i) + " has shape " + shape_string(params_[i].shape) +
                           ", expected " + shape_string(shapes[i]));
    }
  }
}

Classifier build_classifier(const ArchitectureSpec& spec, std::uint64_t seed) {
  const auto shapes = classifier_param_shapes(spec);
  Rng rng(seed);
  std::vector<Tensor> params;
  for (const Shape& s : shapes) {
    if (s.size() == 1) {
      params.emplace_back(s);
    } else if (s.size() == 2) {
      params.push_back(glorot_uniform(s, s[0], s[1], rng));
    } else {
      const std::size_t receptive = s[2] * s[3];
      params.push_back(glorot_uniform(s, s[1] * receptive, s[0] * receptive, rng));
    }
  }
  return Classifier(spec, std::move(params));
}

Var Classifier::logits(Tape& tape, std::span<const Var> P, Var batch) const {
  const std::size_t d = flat_dim(spec_.input_shape);
  Var x = flatten_batch(batch, d);
  const std::size_t rows = x.shape()[0];
  std::size_t p = 0;
  auto dense_head = [&](Var h) {
    for (std::size_t i = 0; i < spec_.hidden_widths.size(); ++i, p += 2) {
      h = activate(dense(h, P[p], P[p + 1]), spec_.activation);
    }
    return dense(h, P[p], P[p + 1]);
  };
  if (spec_.kind == ArchKind::mlp) return dense_head(x);

  std::vector<Var> outs;
  outs.reserve(rows);
  const std::size_t conv_params = 2 * spec_.conv_stages.size();
  for (std::size_t r = 0; r < rows; ++r) {
    Var h = reshape(select(x, r), spec_.input_shape);
    p = 0;
    for (const ConvStage& st : spec_.conv_stages) {
      h = activate(add_channel_bias(conv2d(h, P[p], st.stride, st.kernel / 2), P[p + 1]), spec_.activation);
      p += 2;
    }
    h = reshape(h, {1, h.numel()});
    p = conv_params;
    outs.push_back(dense_head(h));
  }
  (void)tape;
  return concat_rows(outs);
}

Tensor classify_batch(const Classifier& model, std::span<const Tensor> xs) {
  if (xs.empty()) return Tensor({0, model.spec().num_classes});
  for (const Tensor& x : xs) require_shape(x, model.spec().input_shape, "classify");
  Tape tape;
  const auto P = bind_frozen(tape, model.params());
  Var probs = softmax(model.logits(tape, P, tape.input(stack(xs))));
  return probs.value();
}

Tensor classify(const Classifier& model, const Tensor& x) {
  Tensor probs = classify_batch(model, std::span<const Tensor>(&x, 1));
  return probs.reshaped({model.spec().num_classes});
}

std::vector<int> predict_labels(const Classifier& model, std::span<const Tensor> xs) {
  constexpr std::size_t kChunk = 256;
  const std::size_t c = model.spec().num_classes;
  std::vector<int> out;
  out.reserve(xs.size());
  for (std::size_t b = 0; b < xs.size(); b += kChunk) {
    const std::size_t n = std::min(kChunk, xs.size() - b);
    const Tensor probs = classify_batch(model, xs.subspan(b, n));
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(static_cast<int>(argmax(std::span<const double>(probs.data).subspan(i * c, c))));
    }
  }
  return out;
}

double accuracy(const Classifier& model, const Dataset& ds) {
  if (ds.empty()) return 0.0;
  const auto pred = predict_labels(model, ds.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ds.labels[i];
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

namespace {

// Shared minibatch driver. `step` runs forward + backward for one batch and
// returns the batch-mean loss.
template <typename Step>
std::vector<double> run_epochs(std::size_t n, const TrainConfig& cfg, std::vector<Tensor>& params, Step step) {
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SgdMomentum opt(cfg.lr, cfg.momentum);
  const auto ptrs = param_pointers(params);
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - b);
      const std::span<const std::size_t> idx(order.data() + b, m);
      total += step(idx, rng) * static_cast<double>(m);
      opt.step(ptrs);
    }
    losses.push_back(total / static_cast<double>(n));
  }
  return losses;
}

}  // namespace

TrainStats train_supervised(Classifier& model, const Dataset& data, const TrainConfig& cfg, const Dataset* test) {
  if (data.empty()) throw ValidationError("train_supervised: empty dataset");
  data.validate();
  cfg.validate();
  for (int y : data.labels) {
    if (static_cast<std::size_t>(y) >= model.spec().num_classes) {
      throw ValidationError("train_supervised: label " + std::to_string(y) + " >= num_classes");
    }
  }
  const std::size_t classes = model.spec().num_classes;
  std::vector<Tensor> batch;
  std::vector<int> labels;
  TrainStats st;
  st.epoch_losses = run_epochs(data.size(), cfg, model.params(), [&](std::span<const std::size_t> idx, Rng&) {
    batch.clear();
    labels.clear();
    for (std::size_t i : idx) {
      batch.push_back(data.images[i]);
      labels.push_back(data.labels[i]);
    }
    Tape tape;
    const auto P = bind_trainable(tape, model.params());
    Var probs = softmax(model.logits(tape, P, tape.input(stack(batch))));
    Var loss = compute_loss(probs, tape.input(one_hot_rows(labels, classes)), LossKind::cross_entropy);
    tape.backward(loss);
    return loss.value().item();
  });
  st.epochs = cfg.epochs;
  st.seed = cfg.seed;
  st.final_loss = st.epoch_losses.back();
  st.loss_decreased = decreased(st.epoch_losses);
  st.train_accuracy = accuracy(model, data);
  if (test) st.test_accuracy = accuracy(model, *test);
  model.train_stats = st;
  return st;
}

// --- Denoising autoencoder -------------------------------------------------

namespace {

std::vector<Tensor> init_mlp_chain(const std::vector<std::size_t>& dims, Rng& rng) {
  std::vector<Tensor> ps;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    ps.push_back(glorot_uniform({dims[i], dims[i + 1]}, dims[i], dims[i + 1], rng));
    ps.emplace_back(Shape{dims[i + 1]});
  }
  return ps;
}

void check_param_shapes(const std::vector<Tensor>& ps, const std::vector<Shape>& shapes, const char* who) {
  if (ps.size() != shapes.size()) {
    throw DimensionError(std::string(who) + " expects " + std::to_string(shapes.size()) + " parameter tensors, got " +
                         std::to_string(ps.size()));
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].shape != shapes[i]) {
      throw DimensionError(std::string(who) + " parameter " + std::to_string(i) + " has shape " +
                           shape_string(ps[i].shape) + ", expected " + shape_string(shapes[i]));
    }
  }
}

std::vector<Shape> chain_shapes(const std::vector<std::size_t>& dims) {
  std::vector<Shape> s;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    s.push_back({dims[i], dims[i + 1]});
    s.push_back({dims[i + 1]});
  }
  return s;
}

Tensor flat_batch_of(const Dataset& data, std::span<const std::size_t> idx, std::size_t d) {
  Tensor t({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Tensor& img = data.images[idx[r]];
    std::copy(img.data.begin(), img.data.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return t;
}

}  // namespace

DenoisingAutoencoder::DenoisingAutoencoder(Shape input_shape, std::size_t hidden, std::size_t bottleneck,
                                           std::uint64_t seed)
    : input_shape_(std::move(input_shape)), hidden_(hidden), bottleneck_(bottleneck) {
  if (hidden == 0 || bottleneck == 0) throw ValidationError("autoencoder widths must be positive");
  Rng rng(seed);
  const std::size_t d = flat_dim(input_shape_);
  params_ = init_mlp_chain({d, hidden_, bottleneck_, hidden_, d}, rng);
}

DenoisingAutoencoder::DenoisingAutoencoder(Shape input_shape, std::size_t hidden, std::size_t bottleneck,
                                           std::vector<Tensor> params)
    : input_shape_(std::move(input_shape)), hidden_(hidden), bottleneck_(bottleneck), params_(std::move(params)) {
  const std::size_t d = flat_dim(input_shape_);
  check_param_shapes(params_, chain_shapes({d, hidden_, bottleneck_, hidden_, d}), "autoencoder");
}

Var DenoisingAutoencoder::reconstruct(Tape&, std::span<const Var> P, Var flat_batch) const {
  Var x = flatten_batch(flat_batch, flat_dim(input_shape_));
  Var h = activate(dense(x, P[0], P[1]), Activation::relu);
  Var code = dense(h, P[2], P[3]);
  Var g = activate(dense(code, P[4], P[5]), Activation::relu);
  return activate(dense(g, P[6], P[7]), Activation::sigmoid);
}

Json DenoisingAutoencoder::header() const {
  return {{"kind", "dae"},
          {"input_shape", shape_json(input_shape_)},
          {"hidden", hidden_},
          {"bottleneck", bottleneck_},
          {"noise_level", noise_level}};
}

TrainStats train_denoising_ae(DenoisingAutoencoder& ae, const Dataset& data, double noise_level,
                              const TrainConfig& cfg) {
  if (data.empty()) throw ValidationError("train_denoising_ae: empty dataset");
  if (noise_level < 0.0) throw ValidationError("train_denoising_ae: noise_level must be >= 0");
  cfg.validate();
  const std::size_t d = flat_dim(ae.input_shape());
  TrainStats st;
  st.epoch_losses = run_epochs(data.size(), cfg, ae.params(), [&](std::span<const std::size_t> idx, Rng& rng) {
    Tensor clean = flat_batch_of(data, idx, d);
    Tensor noisy = clean;
    if (noise_level > 0.0) {
      for (double& v : noisy.data) v = std::clamp(v + noise_level * rng.normal(), 0.0, 1.0);
    }
    Tape tape;
    const auto P = bind_trainable(tape, ae.params());
    Var recon = ae.reconstruct(tape, P, tape.input(std::move(noisy)));
    Var loss = compute_loss(recon, tape.input(std::move(clean)), LossKind::mse);
    tape.backward(loss);
    return loss.value().item();
  });
  st.epochs = cfg.epochs;
  st.seed = cfg.seed;
  st.final_loss = st.epoch_losses.back();
  st.loss_decreased = decreased(st.epoch_losses);
  double total = 0.0;
  for (const Tensor& img : data.images) total += mse_between(denoise(ae, img), img);
  st.reconstruction_mse = total / static_cast<double>(data.size());
  ae.noise_level = noise_level;
  ae.train_stats = st;
  return st;
}

Tensor denoise(const DenoisingAutoencoder& ae, const Tensor& x) {
  require_shape(x, ae.input_shape(), "denoise");
  Tape tape;
  const auto P = bind_frozen(tape, ae.params());
  Var out = ae.reconstruct(tape, P, tape.input(x.reshaped({1, x.numel()})));
  return clamp01(out.value().reshaped(ae.input_shape()));
}

// --- Variational autoencoder -----------------------------------------------

namespace {
std::vector<Shape> vae_shapes(std::size_t d, std::size_t h, std::size_t z) {
  return {{d, h}, {h}, {h, z}, {z}, {h, z}, {z}, {z, h}, {h}, {h, d}, {d}};
}
}  // namespace

VariationalAutoencoder::VariationalAutoencoder(Shape input_shape, std::size_t hidden, std::size_t latent,
                                               std::uint64_t seed)
    : input_shape_(std::move(input_shape)), hidden_(hidden), latent_(latent) {
  if (hidden == 0 || latent == 0) throw ValidationError("VAE widths must be positive");
  Rng rng(seed);
  const std::size_t d = flat_dim(input_shape_);
  for (const Shape& s : vae_shapes(d, hidden_, latent_)) {
    if (s.size() == 1) {
      params_.emplace_back(s);
    } else {
      params_.push_back(glorot_uniform(s, s[0], s[1], rng));
    }
  }
}

VariationalAutoencoder::VariationalAutoencoder(Shape input_shape, std::size_t hidden, std::size_t latent,
                                               std::vector<Tensor> params)
    : input_shape_(std::move(input_shape)), hidden_(hidden), latent_(latent), params_(std::move(params)) {
  check_param_shapes(params_, vae_shapes(flat_dim(input_shape_), hidden_, latent_), "VAE");
}

std::pair<Var, Var> VariationalAutoencoder::encode(Tape&, std::span<const Var> P, Var flat_batch) const {
  Var x = flatten_batch(flat_batch, flat_dim(input_shape_));
  Var h = activate(dense(x, P[0], P[1]), Activation::relu);
  return {dense(h, P[2], P[3]), dense(h, P[4], P[5])};
}

Var VariationalAutoencoder::decode(Tape&, std::span<const Var> P, Var z) const {
  if (z.value().rank() != 2 || z.value().dim(1) != latent_) {
    throw DimensionError("VAE decode: latent batch " + shape_string(z.shape()) + " does not have " +
                         std::to_string(latent_) + " columns");
  }
  Var h = activate(dense(z, P[6], P[7]), Activation::relu);
  return activate(dense(h, P[8], P[9]), Activation::sigmoid);
}

Json VariationalAutoencoder::header() const {
  return {{"kind", "vae"}, {"input_shape", shape_json(input_shape_)}, {"hidden", hidden_}, {"latent", latent_}};
}

Var vae_loss(Var x, Var x_recon, Var mu, Var logvar, double beta) {
  if (mu.shape() != logvar.shape()) {
    throw DimensionError("vae_loss: mu " + shape_string(mu.shape()) + " vs logvar " + shape_string(logvar.shape()));
  }
  Var rec = compute_loss(x_recon, x, LossKind::mse);
  const std::size_t batch = mu.value().rank() == 2 ? mu.value().dim(0) : 1;
  Var inner = add_scalar(sub(sub(logvar, square(mu)), exp(logvar)), 1.0);
  Var kl = scale(sum(inner), -0.5 / static_cast<double>(batch));
  return add(rec, scale(kl, beta));
}

TrainStats train_vae(VariationalAutoencoder& vae, const Dataset& data, double beta, const TrainConfig& cfg) {
  if (data.empty()) throw ValidationError("train_vae: empty dataset");
  if (beta < 0.0) throw ValidationError("train_vae: beta must be >= 0");
  cfg.validate();
  const std::size_t d = flat_dim(vae.input_shape());
  const std::size_t z = vae.latent_dim();
  TrainStats st;
  st.epoch_losses = run_epochs(data.size(), cfg, vae.params(), [&](std::span<const std::size_t> idx, Rng& rng) {
    Tensor eta({idx.size(), z});
    for (double& v : eta.data) v = rng.normal();
    Tape tape;
    const auto P = bind_trainable(tape, vae.params());
    Var x = tape.input(flat_batch_of(data, idx, d));
    auto [mu, logvar] = vae.encode(tape, P, x);
    Var sample = add(mu, mul(exp(scale(logvar, 0.5)), tape.input(std::move(eta))));
    Var loss = vae_loss(x, vae.decode(tape, P, sample), mu, logvar, beta);
    tape.backward(loss);
    return loss.value().item();
  });
  st.epochs = cfg.epochs;
  st.seed = cfg.seed;
  st.final_loss = st.epoch_losses.back();
  st.loss_decreased = decreased(st.epoch_losses);
  double total = 0.0;
  for (const Tensor& img : data.images) total += mse_between(vae_decode(vae, vae_encode(vae, img).mu), img);
  st.reconstruction_mse = total / static_cast<double>(data.size());
  vae.train_stats = st;
  return st;
}

LatentCode vae_encode(const VariationalAutoencoder& vae, const Tensor& x) {
  require_shape(x, vae.input_shape(), "vae_encode");
  Tape tape;
  const auto P = bind_frozen(tape, vae.params());
  auto [mu, logvar] = vae.encode(tape, P, tape.input(x.reshaped({1, x.numel()})));
  return {mu.value().reshaped({vae.latent_dim()}), logvar.value().reshaped({vae.latent_dim()})};
}

Tensor vae_decode(const VariationalAutoencoder& vae, const Tensor& z) {
  if (z.numel() != vae.latent_dim()) {
    throw DimensionError("vae_decode: latent of shape " + shape_string(z.shape) + ", expected " +
                         std::to_string(vae.latent_dim()));
  }
  Tape tape;
  const auto P = bind_frozen(tape, vae.params());
  Var out = vae.decode(tape, P, tape.input(z.reshaped({1, z.numel()})));
  return clamp01(out.value().reshaped(vae.input_shape()));
}

Tensor vae_sample(const VariationalAutoencoder& vae, const Tensor& x, double tau, Rng& rng) {
  if (tau < 0.0) throw ContractError("vae_sample: tau must be >= 0");
  const LatentCode code = vae_encode(vae, x);
  Tensor z = code.mu;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double eta = rng.normal();
    z[i] = code.mu[i] + tau * std::exp(code.logvar[i] / 2.0) * eta;
  }
  return vae_decode(vae, z);
}

// --- Sequence detector -----------------------------------------------------

namespace {
std::vector<Shape> lstm_shapes(std::size_t f, std::size_t h) {
  std::vector<Shape> s;
  for (int gate = 0; gate < 4; ++gate) {
    s.push_back({f, h});
    s.push_back({h, h});
    s.push_back({h});
  }
  s.push_back({h, 1});
  s.push_back({1});
  return s;
}
}  // namespace

SequenceDetector::SequenceDetector(std::size_t feature_dim, std::size_t hidden, std::uint64_t seed)
    : feature_scale(feature_dim, 1.0), feature_dim_(feature_dim), hidden_(hidden) {
  if (feature_dim == 0 || hidden == 0) throw ValidationError("LSTM sizes must be positive");
  Rng rng(seed);
  for (const Shape& s : lstm_shapes(feature_dim_, hidden_)) {
    if (s.size() == 1) {
      params_.emplace_back(s);
    } else {
      params_.push_back(glorot_uniform(s, s[0], s[1], rng));
    }
  }
}

SequenceDetector::SequenceDetector(std::size_t feature_dim, std::size_t hidden, std::vector<Tensor> params)
    : feature_scale(feature_dim, 1.0), feature_dim_(feature_dim), hidden_(hidden), params_(std::move(params)) {
  check_param_shapes(params_, lstm_shapes(feature_dim_, hidden_), "LSTM");
}

Var SequenceDetector::forward(Tape& tape, std::span<const Var> P, std::span<const Var> steps) const {
  if (steps.empty()) throw ContractError("lstm_forward: empty sequence");
  const std::size_t rows = steps.front().value().dim(0);
  Var h = tape.input(Tensor({rows, hidden_}));
  Var c = tape.input(Tensor({rows, hidden_}));
  auto gate = [&](Var x, std::size_t base) { return add_bias(add(matmul(x, P[base]), matmul(h, P[base + 1])), P[base + 2]); };
  for (Var x : steps) {
    if (x.value().rank() != 2 || x.value().dim(1) != feature_dim_ || x.value().dim(0) != rows) {
      throw DimensionError("lstm step of shape " + shape_string(x.shape()) + ", expected [" + std::to_string(rows) +
                           "x" + std::to_string(feature_dim_) + "]");
    }
    Var i = activate(gate(x, kGateInput), Activation::sigmoid);
    Var f = activate(gate(x, kGateForget), Activation::sigmoid);
    Var o = activate(gate(x, kGateOutput), Activation::sigmoid);
    Var g = activate(gate(x, kGateCandidate), Activation::tanh);
    c = add(mul(f, c), mul(i, g));
    h = mul(o, activate(c, Activation::tanh));
  }
  return activate(dense(h, P[kReadoutW], P[kReadoutB]), Activation::sigmoid);
}

Json SequenceDetector::header() const {
  return {{"kind", "lstm"}, {"feature_dim", feature_dim_}, {"hidden", hidden_}, {"feature_scale", feature_scale}};
}

namespace {

std::vector<Tensor> scaled_steps(const SequenceDetector& det, std::span<const std::vector<double>* const> rows,
                                 std::size_t length) {
  const std::size_t f = det.feature_dim();
  std::vector<Tensor> steps;
  for (std::size_t t = 0; t < length; ++t) {
    Tensor x({rows.size(), f});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::vector<double>& v = rows[r][t];
      if (v.size() != f) {
        throw DimensionError("sequence feature of length " + std::to_string(v.size()) + ", expected " +
                             std::to_string(f));
      }
      for (std::size_t k = 0; k < f; ++k) x[r * f + k] = v[k] * det.feature_scale[k];
    }
    steps.push_back(std::move(x));
  }
  return steps;
}

}  // namespace

double lstm_forward(const SequenceDetector& det, std::span<const std::vector<double>> features) {
  if (features.empty()) throw ContractError("lstm_forward: empty sequence");
  const std::vector<double>* row = features.data();
  const auto steps = scaled_steps(det, std::span<const std::vector<double>* const>(&row, 1), features.size());
  Tape tape;
  const auto P = bind_frozen(tape, det.params());
  std::vector<Var> vars;
  for (const Tensor& s : steps) vars.push_back(tape.constant_ref(s));
  return det.forward(tape, P, vars).value().item();
}

TrainStats train_sequence_detector(SequenceDetector& det, std::span<const SequenceExample> data,
                                   const TrainConfig& cfg) {
  if (data.empty()) throw ValidationError("train_sequence_detector: empty dataset");
  cfg.validate();
  for (const SequenceExample& ex : data) {
    if (ex.features.empty()) throw ValidationError("train_sequence_detector: empty sequence");
  }
  TrainStats st;
  st.epoch_losses = run_epochs(data.size(), cfg, det.params(), [&](std::span<const std::size_t> idx, Rng&) {
    // Group the minibatch by sequence length so each group runs as one batch.
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i : idx) groups[data[i].features.size()].push_back(i);
    Tape tape;
    const auto P = bind_trainable(tape, det.params());
    Var total = tape.input(Tensor::scalar(0.0));
    for (const auto& [len, members] : groups) {
      std::vector<const std::vector<double>*> rows;
      Tensor target({members.size(), 1});
      Tensor inverse({members.size(), 1});
      for (std::size_t r = 0; r < members.size(); ++r) {
        rows.push_back(data[members[r]].features.data());
        target[r] = data[members[r]].label ? 1.0 : 0.0;
        inverse[r] = 1.0 - target[r];
      }
      std::vector<Var> steps;
      for (Tensor& s : scaled_steps(det, rows, len)) steps.push_back(tape.input(std::move(s)));
      Var p = det.forward(tape, P, steps);
      Var q = add_scalar(scale(p, -1.0), 1.0);
      Var bce = add(compute_loss(p, tape.input(std::move(target)), LossKind::cross_entropy),
                    compute_loss(q, tape.input(std::move(inverse)), LossKind::cross_entropy));
      total = add(total, scale(bce, static_cast<double>(members.size()) / static_cast<double>(idx.size())));
    }
    tape.backward(total);
    return total.value().item();
  });
  st.epochs = cfg.epochs;
  st.seed = cfg.seed;
  st.final_loss = st.epoch_losses.back();
  st.loss_decreased = decreased(st.epoch_losses);
  std::size_t ok = 0;
  for (const SequenceExample& ex : data) ok += (lstm_forward(det, ex.features) >= 0.5) == (ex.label != 0);
  st.train_accuracy = static_cast<double>(ok) / static_cast<double>(data.size());
  det.train_stats = st;
  return st;
}

}  // namespace dnd
