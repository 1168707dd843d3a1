#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dnd/autodiff.hpp"
#include "dnd/dataset.hpp"
#include "dnd/rng.hpp"
#include "dnd/tensor.hpp"

namespace dnd {

using Json = nlohmann::json;

enum class ArchKind { mlp, convnet };

struct ConvStage {
  std::size_t channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool operator==(const ConvStage&) const = default;
};

/// Architecture of a classifier. For convnets `hidden_widths` is the dense
/// head between the flattened feature map and the output layer.
struct ArchitectureSpec {
  ArchKind kind = ArchKind::mlp;
  std::vector<std::size_t> hidden_widths{32};
  std::vector<ConvStage> conv_stages;
  Activation activation = Activation::relu;
  Shape input_shape{1, kGlyphSide, kGlyphSide};
  std::size_t num_classes = kGlyphClasses;

  /// Throws ValidationError naming the violated constraint.
  void validate() const;
  Json to_json() const;
  static ArchitectureSpec from_json(const Json& j);
  /// Compact JSON with sorted keys; used for hashing and checkpoints.
  std::string canonical() const { return to_json().dump(); }
  bool operator==(const ArchitectureSpec&) const = default;
};

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

struct TrainStats {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double reconstruction_mse = 0.0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::vector<double> epoch_losses;
  /// False when the last epoch's loss is not below the first epoch's.
  bool loss_decreased = false;
};

std::vector<Var> bind_trainable(Tape& tape, std::vector<Tensor>& params);
std::vector<Var> bind_frozen(Tape& tape, const std::vector<Tensor>& params);
std::vector<Tensor*> param_pointers(std::vector<Tensor>& params);

/// Uniform Glorot initialisation in +/- sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

class Classifier {
 public:
  Classifier(ArchitectureSpec spec, std::vector<Tensor> params);

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }

  /// Logits [B x num_classes] for a batch [B x input_shape...].
  Var logits(Tape& tape, std::span<const Var> params, Var batch) const;

  TrainStats train_stats;

 private:
  ArchitectureSpec spec_;
  std::vector<Tensor> params_;
};

/// Throws ValidationError for an invalid spec. Deterministic given seed.
Classifier build_classifier(const ArchitectureSpec& spec, std::uint64_t seed);
/// Expected parameter shapes in storage order.
std::vector<Shape> classifier_param_shapes(const ArchitectureSpec& spec);

/// Softmax probabilities for one input of the spec's input shape.
Tensor classify(const Classifier& model, const Tensor& x);
/// Probabilities [B x C] for many inputs.
Tensor classify_batch(const Classifier& model, std::span<const Tensor> xs);
std::vector<int> predict_labels(const Classifier& model, std::span<const Tensor> xs);
double accuracy(const Classifier& model, const Dataset& ds);

TrainStats train_supervised(Classifier& model, const Dataset& data, const TrainConfig& cfg,
                            const Dataset* test = nullptr);

// --- Denoising autoencoder -------------------------------------------------

class DenoisingAutoencoder {
 public:
  DenoisingAutoencoder(Shape input_shape, std::size_t hidden, std::size_t bottleneck, std::uint64_t seed);
  DenoisingAutoencoder(Shape input_shape, std::size_t hidden, std::size_t bottleneck, std::vector<Tensor> params);

  /// Reconstruction [B x D] (sigmoid output) for a batch flattened to [B x D].
  Var reconstruct(Tape& tape, std::span<const Var> params, Var flat_batch) const;

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t bottleneck_dim() const noexcept { return bottleneck_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  Json header() const;

  double noise_level = 0.0;
  TrainStats train_stats;

 private:
  Shape input_shape_;
  std::size_t hidden_;
  std::size_t bottleneck_;
  std::vector<Tensor> params_;
};

TrainStats train_denoising_ae(DenoisingAutoencoder& ae, const Dataset& data, double noise_level,
                              const TrainConfig& cfg);
/// One encoder/decoder pass, clamped to [0, 1].
Tensor denoise(const DenoisingAutoencoder& ae, const Tensor& x);

// --- Variational autoencoder -----------------------------------------------

class VariationalAutoencoder {
 public:
  VariationalAutoencoder(Shape input_shape, std::size_t hidden, std::size_t latent, std::uint64_t seed);
  VariationalAutoencoder(Shape input_shape, std::size_t hidden, std::size_t latent, std::vector<Tensor> params);

  /// (mu, logvar), each [B x latent], for a batch flattened to [B x D].
  std::pair<Var, Var> encode(Tape& tape, std::span<const Var> params, Var flat_batch) const;
  /// Decoder output [B x D] (sigmoid) for latent codes [B x latent].
  Var decode(Tape& tape, std::span<const Var> params, Var z) const;

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t latent_dim() const noexcept { return latent_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  Json header() const;

  TrainStats train_stats;

 private:
  Shape input_shape_;
  std::size_t hidden_;
  std::size_t latent_;
  std::vector<Tensor> params_;
};

/// mse(x, x_recon) + beta * KL, KL = -0.5 * sum(1 + logvar - mu^2 - exp(logvar)) / batch.
Var vae_loss(Var x, Var x_recon, Var mu, Var logvar, double beta);
TrainStats train_vae(VariationalAutoencoder& vae, const Dataset& data, double beta, const TrainConfig& cfg);

struct LatentCode {
  Tensor mu;
  Tensor logvar;
};
LatentCode vae_encode(const VariationalAutoencoder& vae, const Tensor& x);
/// Decoder output reshaped to the input shape and clamped to [0, 1].
Tensor vae_decode(const VariationalAutoencoder& vae, const Tensor& z);
/// decode(mu + tau * exp(logvar / 2) * eta), eta ~ N(0, I) drawn from rng.
Tensor vae_sample(const VariationalAutoencoder& vae, const Tensor& x, double tau, Rng& rng);

// --- LSTM sequence detector ------------------------------------------------

class SequenceDetector {
 public:
  SequenceDetector(std::size_t feature_dim, std::size_t hidden, std::uint64_t seed);
  SequenceDetector(std::size_t feature_dim, std::size_t hidden, std::vector<Tensor> params);

  /// Probability [B x 1] from a sequence of steps, each [B x feature_dim].
  Var forward(Tape& tape, std::span<const Var> params, std::span<const Var> steps) const;

  std::size_t feature_dim() const noexcept { return feature_dim_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  Json header() const;

  /// Fixed per-feature input scaling applied before the recurrence.
  std::vector<double> feature_scale;
  TrainStats train_stats;

 private:
  std::size_t feature_dim_;
  std::size_t hidden_;
  std::vector<Tensor> params_;
};

/// Parameter order: for gate in (input, forget, output, candidate):
/// W [F x H], U [H x H], b [H]; then readout w [H x 1], b [1].
enum LstmParam : std::size_t { kGateInput = 0, kGateForget = 3, kGateOutput = 6, kGateCandidate = 9, kReadoutW = 12, kReadoutB = 13 };

/// Final-state sigmoid readout over the whole sequence; ContractError if empty.
double lstm_forward(const SequenceDetector& det, std::span<const std::vector<double>> features);

struct SequenceExample {
  std::vector<std::vector<double>> features;
  int label = 0;
};
TrainStats train_sequence_detector(SequenceDetector& det, std::span<const SequenceExample> data,
                                   const TrainConfig& cfg);

}  // namespace dnd
