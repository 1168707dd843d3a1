#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "dnd/checkpoint.hpp"
#include "dnd/errors.hpp"
#include "dnd/models.hpp"
#include "gradcheck.hpp"

using namespace dnd;
using dnd::testing::gradient_error;
using dnd::testing::param_gradient_error;
using dnd::testing::random_tensor;

namespace {

ArchitectureSpec mlp_spec(std::vector<std::size_t> widths = {16}) {
  ArchitectureSpec s;
  s.kind = ArchKind::mlp;
  s.hidden_widths = std::move(widths);
  return s;
}

ArchitectureSpec conv_spec() {
  ArchitectureSpec s;
  s.kind = ArchKind::convnet;
  s.conv_stages = {{4, 3, 2}};
  s.hidden_widths = {8};
  s.activation = Activation::tanh;
  return s;
}

// Two Gaussian blobs in 2-D, centred at (-1,-1) and (+1,+1).
Dataset blobs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double c = y ? 1.0 : -1.0;
    ds.images.push_back(Tensor({1, 1, 2}, {c + 0.3 * rng.normal(), c + 0.3 * rng.normal()}));
    ds.labels.push_back(y);
  }
  return ds;
}

DataConfig clean_glyphs() {
  DataConfig cfg;
  cfg.noise_p = 0.0;
  return cfg;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("build_classifier") {
  const ArchitectureSpec spec = mlp_spec();
  const Classifier a = build_classifier(spec, 42);
  const Classifier b = build_classifier(spec, 42);
  const Classifier c = build_classifier(spec, 43);
  CHECK(a.params() == b.params());
  CHECK(a.params() != c.params());

  std::vector<Shape> shapes;
  for (const Tensor& p : a.params()) shapes.push_back(p.shape);
  CHECK(shapes == std::vector<Shape>{{144, 16}, {16}, {16, 10}, {10}});
  for (double v : a.params()[1].data) CHECK(v == 0.0);
  const double limit = std::sqrt(6.0 / (144 + 16));
  for (double v : a.params()[0].data) CHECK(std::abs(v) <= limit);

  ArchitectureSpec bad = mlp_spec({});
  CHECK_THROWS_AS(build_classifier(bad, 1), ValidationError);
  ArchitectureSpec even = conv_spec();
  even.conv_stages[0].kernel = 4;
  CHECK_THROWS_WITH_AS(build_classifier(even, 1), doctest::Contains("odd"), ValidationError);
  ArchitectureSpec huge = conv_spec();
  huge.conv_stages[0].kernel = 13;
  CHECK_THROWS_AS(build_classifier(huge, 1), ValidationError);
  ArchitectureSpec zero = mlp_spec({0});
  CHECK_THROWS_AS(build_classifier(zero, 1), ValidationError);

  const ArchitectureSpec round = ArchitectureSpec::from_json(conv_spec().to_json());
  CHECK(round == conv_spec());
}

TEST_CASE("classify") {
  Rng rng(9);
  for (const ArchitectureSpec& spec : {mlp_spec(), conv_spec()}) {
    const Classifier model = build_classifier(spec, 3);
    double entropy = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Tensor x = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
      const Tensor p = classify(model, x);
      CHECK(p.numel() == 10);
      CHECK(std::abs(std::accumulate(p.data.begin(), p.data.end(), 0.0) - 1.0) < 1e-9);
      CHECK(classify(model, x) == p);
      for (double v : p.data) entropy -= v * std::log(v);
    }
    CHECK(entropy / 100.0 > 0.9 * std::log(10.0));
    CHECK_THROWS_AS(classify(model, Tensor({1, 10, 12})), DimensionError);
  }
}

TEST_CASE("full classifier gradients match finite differences") {
  Rng rng(12);
  const std::vector<int> labels = {3, 7};
  for (const ArchitectureSpec& spec : {mlp_spec({6, 5}), conv_spec()}) {
    for (Activation act : {Activation::sigmoid, Activation::tanh}) {
      ArchitectureSpec s = spec;
      s.activation = act;
      Classifier model = build_classifier(s, rng.next_u64());
      const Tensor batch = random_tensor({2, 1, 12, 12}, rng, 0.0, 1.0);
      Tensor target({2, 10});
      target[labels[0]] = 1.0;
      target[10 + labels[1]] = 1.0;
      auto loss = [&](Tape& t, const std::vector<Var>& P, Var x) {
        return compute_loss(softmax(model.logits(t, P, x)), t.input(target), LossKind::cross_entropy);
      };
      for (std::size_t k = 0; k < model.params().size(); ++k) {
        CHECK(param_gradient_error(model, k, [&](Tape& t, const std::vector<Var>& P) {
                return loss(t, P, t.input(batch));
              }) < 1e-4);
      }
      CHECK(gradient_error([&](Tape& t, Var x) { return loss(t, bind_frozen(t, model.params()), x); }, batch) < 1e-4);
    }
  }
}

TEST_CASE("train_supervised on separable blobs") {
  const Dataset train = blobs(200, 1);
  // Independent separability oracle: the hand-fit threshold x0 + x1 = 0.
  std::size_t separable = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    separable += (train.images[i][0] + train.images[i][1] > 0.0) == (train.labels[i] == 1);
  }
  REQUIRE(separable == train.size());

  ArchitectureSpec spec = mlp_spec({4});
  spec.input_shape = {1, 1, 2};
  spec.num_classes = 2;
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 5;
  Classifier model = build_classifier(spec, 2);
  const TrainStats st = train_supervised(model, train, cfg);
  CHECK(st.train_accuracy == 1.0);
  CHECK(st.loss_decreased);
  CHECK(st.epoch_losses.size() == 50);

  Classifier again = build_classifier(spec, 2);
  train_supervised(again, train, cfg);
  CHECK(again.params() == model.params());

  Classifier empty_model = build_classifier(spec, 2);
  CHECK_THROWS_AS(train_supervised(empty_model, Dataset{}, cfg), ValidationError);
  Dataset bad = train;
  bad.labels[0] = 5;
  CHECK_THROWS_AS(train_supervised(empty_model, bad, cfg), ValidationError);
}

TEST_CASE("denoising autoencoder") {
  const Dataset train = gen_synthetic_dataset(clean_glyphs(), 3000, Split::train, 10);
  const Dataset held = gen_synthetic_dataset(clean_glyphs(), 200, Split::test, 11);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 1.0;
  cfg.seed = 4;

  SUBCASE("noise 0 learns a near identity") {
    DenoisingAutoencoder ae({1, 12, 12}, 64, 32, 7);
    const TrainStats st = train_denoising_ae(ae, train, 0.0, cfg);
    CHECK(st.loss_decreased);
    std::vector<double> diffs;
    for (std::size_t i = 1; i < st.epoch_losses.size(); ++i) diffs.push_back(st.epoch_losses[i] - st.epoch_losses[i - 1]);
    CHECK(median(diffs) < 0.0);
    double mse = 0.0;
    for (const Tensor& x : held.images) mse += mse_between(denoise(ae, x), x);
    CHECK(mse / static_cast<double>(held.size()) < 0.01);
  }

  SUBCASE("denoising gain at sigma 0.2") {
    DenoisingAutoencoder ae({1, 12, 12}, 64, 32, 7);
    train_denoising_ae(ae, train, 0.2, cfg);
    Rng rng(99);
    std::size_t better = 0;
    for (const Tensor& x : held.images) {
      Tensor noisy = x;
      for (double& v : noisy.data) v = std::clamp(v + 0.2 * rng.normal(), 0.0, 1.0);
      const Tensor out = denoise(ae, noisy);
      for (double v : out.data) CHECK((v >= 0.0 && v <= 1.0));
      CHECK(denoise(ae, noisy) == out);
      better += mse_between(out, x) < mse_between(noisy, x);
    }
    CHECK(static_cast<double>(better) / static_cast<double>(held.size()) >= 0.9);
  }

  DenoisingAutoencoder ae({1, 12, 12}, 8, 4, 1);
  CHECK_THROWS_AS(denoise(ae, Tensor({1, 3, 3})), DimensionError);
  CHECK_THROWS_AS(train_denoising_ae(ae, Dataset{}, 0.1, cfg), ValidationError);
  // Out-of-range input still yields a clamped output.
  for (double v : denoise(ae, Tensor({1, 12, 12}, 50.0)).data) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("autoencoder and VAE gradients match finite differences") {
  Rng rng(31);
  const Tensor batch = random_tensor({3, 144}, rng, 0.0, 1.0);
  DenoisingAutoencoder ae({1, 12, 12}, 6, 3, 2);
  for (std::size_t k = 0; k < ae.params().size(); ++k) {
    CHECK(param_gradient_error(ae, k, [&](Tape& t, const std::vector<Var>& P) {
            return compute_loss(ae.reconstruct(t, P, t.input(batch)), t.input(batch), LossKind::mse);
          }) < 1e-4);
  }
  VariationalAutoencoder vae({1, 12, 12}, 6, 3, 3);
  Tensor eta = random_tensor({3, 3}, rng);
  for (std::size_t k = 0; k < vae.params().size(); ++k) {
    CHECK(param_gradient_error(vae, k, [&](Tape& t, const std::vector<Var>& P) {
            Var x = t.input(batch);
            auto [mu, lv] = vae.encode(t, P, x);
            Var z = add(mu, mul(exp(scale(lv, 0.5)), t.input(eta)));
            return vae_loss(x, vae.decode(t, P, z), mu, lv, 0.7);
          }) < 1e-4);
  }
}

TEST_CASE("vae_loss examples") {
  Tape t;
  const Tensor x = Tensor::matrix({{0.2, 0.8}});
  const Tensor r = Tensor::matrix({{0.4, 0.5}});
  const double mse = (0.2 * 0.2 + 0.3 * 0.3) / 2.0;
  CHECK(vae_loss(t.input(x), t.input(r), t.input(Tensor({1, 2})), t.input(Tensor({1, 2})), 1.0).value().item() ==
        doctest::Approx(mse).epsilon(1e-12));
  const double kl = vae_loss(t.input(x), t.input(x), t.input(Tensor::matrix({{1.0}})), t.input(Tensor::matrix({{0.0}})), 1.0)
                        .value()
                        .item();
  CHECK(kl == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(vae_loss(t.input(x), t.input(r), t.input(Tensor::matrix({{3.0, -1.0}})), t.input(Tensor::matrix({{0.4, 2.0}})),
                 0.0)
            .value()
            .item() == doctest::Approx(mse).epsilon(1e-12));
}

TEST_CASE("variational autoencoder") {
  const Dataset train = gen_synthetic_dataset(DataConfig{}, 1000, Split::train, 20);
  const Dataset held = gen_synthetic_dataset(DataConfig{}, 100, Split::test, 21);
  VariationalAutoencoder vae({1, 12, 12}, 64, 12, 8);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.seed = 3;
  const TrainStats st = train_vae(vae, train, 1e-3, cfg);
  CHECK(st.loss_decreased);

  std::vector<double> logvars;
  double mu_norm = 0.0;
  for (const Tensor& x : held.images) {
    const LatentCode code = vae_encode(vae, x);
    CHECK(code.mu.numel() == 12);
    CHECK(code.logvar.numel() == 12);
    const LatentCode again = vae_encode(vae, x);
    CHECK(again.mu == code.mu);
    double n = 0.0;
    for (double v : code.mu.data) n += v * v;
    mu_norm += std::sqrt(n);
    logvars.insert(logvars.end(), code.logvar.data.begin(), code.logvar.data.end());
  }
  CHECK(std::isfinite(mu_norm / 100.0));
  const double lv_med = median(logvars);
  CHECK(lv_med >= -6.0);
  CHECK(lv_med <= 2.0);

  const Tensor& x = held.images[0];
  const Tensor decoded_mu = vae_decode(vae, vae_encode(vae, x).mu);
  Rng r0(1);
  CHECK(vae_sample(vae, x, 0.0, r0) == decoded_mu);
  Rng r1(17), r2(17);
  CHECK(vae_sample(vae, x, 0.1, r1) == vae_sample(vae, x, 0.1, r2));

  std::vector<double> small, large;
  Rng rs(5);
  for (int i = 0; i < 100; ++i) {
    small.push_back(mse_between(vae_sample(vae, x, 0.1, rs), decoded_mu));
    large.push_back(mse_between(vae_sample(vae, x, 1.0, rs), decoded_mu));
  }
  CHECK(median(small) > 0.0);
  CHECK(median(small) < median(large));
  for (double v : vae_sample(vae, x, 1.0, rs).data) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(vae_encode(vae, Tensor({144})), DimensionError);
}

TEST_CASE("LSTM single step matches hand-computed cell equations") {
  // F = 2, H = 1 with hand-set weights.
  SequenceDetector det(2, 1, 0);
  auto& P = det.params();
  const double wi[2] = {0.5, -0.3}, wf[2] = {0.1, 0.2}, wo[2] = {-0.4, 0.6}, wg[2] = {0.7, 0.25};
  const double bi = 0.1, bf = -0.2, bo = 0.05, bg = 0.3, rw = 1.5, rb = -0.25;
  auto set_gate = [&](std::size_t base, const double* w, double b) {
    P[base] = Tensor({2, 1}, {w[0], w[1]});
    P[base + 1] = Tensor({1, 1}, {0.9});  // recurrent weight; h0 = 0 so it drops out
    P[base + 2] = Tensor({1}, {b});
  };
  set_gate(kGateInput, wi, bi);
  set_gate(kGateForget, wf, bf);
  set_gate(kGateOutput, wo, bo);
  set_gate(kGateCandidate, wg, bg);
  P[kReadoutW] = Tensor({1, 1}, {rw});
  P[kReadoutB] = Tensor({1}, {rb});

  const double x0 = 0.8, x1 = -1.2;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double i = sig(wi[0] * x0 + wi[1] * x1 + bi);
  const double g = std::tanh(wg[0] * x0 + wg[1] * x1 + bg);
  const double o = sig(wo[0] * x0 + wo[1] * x1 + bo);
  const double c = i * g;  // f * c0 with c0 = 0
  const double h = o * std::tanh(c);
  const double expected = sig(rw * h + rb);
  const std::vector<std::vector<double>> seq = {{x0, x1}};
  CHECK(std::abs(lstm_forward(det, seq) - expected) < 1e-10);
}

TEST_CASE("LSTM detector") {
  SequenceDetector det(5, 16, 4);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> seq(1 + rng.below(16), std::vector<double>(5));
    for (auto& step : seq) {
      for (double& v : step) v = rng.uniform(-10, 10);
    }
    const double p = lstm_forward(det, seq);
    CHECK((p >= 0.0 && p <= 1.0));
    CHECK(lstm_forward(det, seq) == p);
  }
  CHECK_THROWS_AS(lstm_forward(det, std::vector<std::vector<double>>{}), ContractError);
  CHECK_THROWS_AS(lstm_forward(det, std::vector<std::vector<double>>{{1.0, 2.0}}), DimensionError);

  SequenceDetector small(3, 4, 9);
  std::vector<Tensor> steps;
  for (int s = 0; s < 4; ++s) steps.push_back(random_tensor({2, 3}, rng));
  for (std::size_t k = 0; k < small.params().size(); ++k) {
    CHECK(param_gradient_error(small, k, [&](Tape& t, const std::vector<Var>& P) {
            std::vector<Var> vars;
            for (const Tensor& s : steps) vars.push_back(t.input(s));
            return dnd::testing::weighted_sum(t, small.forward(t, P, vars), 2);
          }) < 1e-4);
  }

  // Learns to separate sequences by the sign of their first feature.
  std::vector<SequenceExample> data;
  for (int n = 0; n < 200; ++n) {
    SequenceExample ex;
    ex.label = n % 2;
    const std::size_t len = 1 + rng.below(8);
    for (std::size_t s = 0; s < len; ++s) {
      ex.features.push_back({(ex.label ? 1.0 : -1.0) + 0.3 * rng.normal(), rng.normal(), 0, 0, 0});
    }
    data.push_back(std::move(ex));
  }
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.seed = 1;
  const TrainStats st = train_sequence_detector(det, data, cfg);
  CHECK(st.loss_decreased);
  CHECK(st.train_accuracy > 0.95);
}

TEST_CASE("checkpoints round-trip bitwise") {
  const auto dir = std::filesystem::temp_directory_path() / "dnd_test_ckpt";
  std::filesystem::create_directories(dir);
  Rng rng(2);
  for (const ArchitectureSpec& spec : {mlp_spec({7, 3}), conv_spec()}) {
    Classifier model = build_classifier(spec, rng.next_u64());
    for (Tensor& p : model.params()) {
      for (double& v : p.data) v = rng.normal() * 1e3;  // exercise full mantissas
    }
    save_classifier(dir / "c.dndw", model);
    const Classifier back = load_classifier(dir / "c.dndw");
    CHECK(back.spec() == model.spec());
    CHECK(back.params() == model.params());
    const std::string bytes = read_file(dir / "c.dndw");
    CHECK(bytes.substr(0, 4) == "DNDW");
    CHECK(encode_checkpoint(back.spec().to_json(), back.params()) == bytes);
  }
  DenoisingAutoencoder ae({1, 12, 12}, 9, 4, 3);
  ae.noise_level = 0.2;
  save_autoencoder(dir / "ae.dndw", ae);
  const DenoisingAutoencoder ae2 = load_autoencoder(dir / "ae.dndw");
  CHECK(ae2.params() == ae.params());
  CHECK(ae2.noise_level == 0.2);
  VariationalAutoencoder vae({1, 12, 12}, 9, 4, 3);
  save_vae(dir / "vae.dndw", vae);
  CHECK(load_vae(dir / "vae.dndw").params() == vae.params());
  SequenceDetector det(5, 4, 3);
  det.feature_scale = {1, 0.5, 2, 1, 1};
  save_sequence_detector(dir / "lstm.dndw", det);
  const SequenceDetector det2 = load_sequence_detector(dir / "lstm.dndw");
  CHECK(det2.params() == det.params());
  CHECK(det2.feature_scale == det.feature_scale);

  CHECK_THROWS_AS(load_vae(dir / "ae.dndw"), IoError);
  CHECK_THROWS_AS(decode_checkpoint("NOPE"), IoError);
  CHECK_THROWS_AS(load_classifier(dir / "missing.dndw"), IoError);
  std::filesystem::remove_all(dir);
}
