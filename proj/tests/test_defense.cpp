#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dnd/defense.hpp"
#include "dnd/errors.hpp"
#include "dnd/metrics.hpp"
#include "gradcheck.hpp"

using namespace dnd;
using dnd::testing::random_tensor;

namespace {

ArchitectureSpec mlp(std::size_t width, Activation act = Activation::relu) {
  ArchitectureSpec s;
  s.hidden_widths = {width};
  s.activation = act;
  return s;
}

// Encoder passes x through as the posterior mean with negligible variance;
// the decoder hidden layer holds a piecewise-linear logit so the sigmoid
// output reproduces x.
VariationalAutoencoder near_identity_vae() {
  const std::size_t d = 144;
  const std::size_t knots = 20;
  const std::size_t h = d * knots;
  const auto logit = [](double v) {
    v = std::clamp(v, 0.002, 0.998);
    return std::log(v / (1.0 - v));
  };
  Tensor enc({d, h}), mu_w({h, d}), dec({d, h}), out_w({h, d});
  for (std::size_t i = 0; i < d; ++i) {
    enc[i * h + i] = 1.0;
    mu_w[i * d + i] = 1.0;
  }
  const double step = 1.0 / static_cast<double>(knots);
  Tensor dec_b({h}), out_b({d}, logit(0.0));
  for (std::size_t i = 0; i < d; ++i) {
    double prev_slope = 0.0;
    for (std::size_t k = 0; k < knots; ++k) {
      const double t = static_cast<double>(k) * step;
      const double slope = (logit(t + step) - logit(t)) / step;
      const std::size_t unit = i * knots + k;
      dec[i * h + unit] = 1.0;
      dec_b[unit] = -t;
      out_w[unit * d + i] = slope - prev_slope;
      prev_slope = slope;
    }
  }
  std::vector<Tensor> p = {enc, Tensor({h}), mu_w, Tensor({d}), Tensor({h, d}), Tensor({d}, -30.0),
                           dec, dec_b, out_w, out_b};
  return VariationalAutoencoder({1, 12, 12}, h, d, std::move(p));
}

struct Fixture {
  Dataset train;
  Dataset test;
  std::vector<Classifier> models;
  DenoisingAutoencoder ae{{1, 12, 12}, 64, 32, std::uint64_t{1}};
  VariationalAutoencoder vae{{1, 12, 12}, 128, 24, std::uint64_t{2}};
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    DataConfig dc;
    fx.train = gen_synthetic_dataset(dc, 2000, Split::train, 60);
    fx.test = gen_synthetic_dataset(dc, 1000, Split::test, 61);
    for (std::size_t i = 0; i < 3; ++i) {
      Classifier m = build_classifier(mlp(48 + 16 * i, i == 1 ? Activation::tanh : Activation::relu), 10 + i);
      TrainConfig cfg;
      cfg.epochs = 10;
      cfg.seed = i;
      train_supervised(m, fx.train, cfg);
      fx.models.push_back(std::move(m));
    }
    TrainConfig fast;
    fast.epochs = 30;
    fast.lr = 1.0;
    fast.seed = 3;
    train_denoising_ae(fx.ae, fx.train, 0.2, fast);
    fast.epochs = 20;
    train_vae(fx.vae, fx.train, 1e-4, fast);
    return fx;
  }();
  return f;
}

const AdvDetector& detector() {
  static const AdvDetector det = [] {
    const Fixture& f = fixture();
    AdvDetectorConfig cfg;
    return train_adv_detector(f.train.subset(0, 600), f.models, cfg, 5);
  }();
  return det;
}

DefensePipeline pipeline(std::size_t n_models, DefenseConfig cfg) {
  const Fixture& f = fixture();
  std::vector<Classifier> ms(f.models.begin(), f.models.begin() + static_cast<std::ptrdiff_t>(n_models));
  Classifier decoy = build_classifier(decoy_spec(f.models[0].spec()), 77);
  return DefensePipeline{EnsembleRegistry(std::move(ms), 1), f.ae, f.vae, detector(), std::move(decoy), cfg};
}

}  // namespace

TEST_CASE("select_random_model") {
  const Fixture& f = fixture();
  EnsembleRegistry one({f.models[0]}, 3);
  for (int i = 0; i < 50; ++i) CHECK(select_random_model(one) == 0);

  std::vector<Classifier> four = {f.models[0], f.models[1], f.models[2], f.models[0]};
  EnsembleRegistry a(four, 42), b(four, 42);
  std::vector<std::size_t> counts(4, 0);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t k = select_random_model(a);
    CHECK(k == select_random_model(b));
    counts[k] += 1;
  }
  const double sigma = std::sqrt(10000 * 0.25 * 0.75);
  for (std::size_t c : counts) CHECK(std::abs(static_cast<double>(c) - 2500.0) <= 3.0 * sigma);

  EnsembleRegistry empty;
  CHECK_THROWS_AS(select_random_model(empty), ContractError);
  ArchitectureSpec other = mlp(8);
  other.num_classes = 3;
  CHECK_THROWS_AS(EnsembleRegistry({f.models[0], build_classifier(other, 1)}, 1), ValidationError);
}

TEST_CASE("quantize_input") {
  CHECK(quantize_input(Tensor({1}, {0.7}), 1)[0] == 1.0);
  CHECK(quantize_input(Tensor({1}, {0.3}), 1)[0] == 0.0);
  Rng rng(1);
  for (int bits = 1; bits <= 8; ++bits) {
    const double levels = std::pow(2.0, bits) - 1.0;
    const Tensor x = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
    const Tensor q = quantize_input(x, bits);
    CHECK(quantize_input(q, bits) == q);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(std::abs(q[i] * levels - std::round(q[i] * levels)) < 1e-9);
      CHECK(std::abs(q[i] - x[i]) <= 0.5 / levels + 1e-12);
    }
  }
  Tensor grid({256});
  for (std::size_t i = 0; i < 256; ++i) grid[i] = static_cast<double>(i) / 255.0;
  CHECK(quantize_input(grid, 8) == grid);
  CHECK_THROWS_AS(quantize_input(grid, 0), ValidationError);
  CHECK_THROWS_AS(quantize_input(grid, 9), ValidationError);
}

TEST_CASE("generate_variants") {
  const Fixture& f = fixture();
  const Tensor& x = f.test.images[0];
  Rng r0(1);
  const auto one = generate_variants(f.vae, x, 1, 0.1, r0);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == vae_decode(f.vae, vae_encode(f.vae, x).mu));
  Rng r1(9), r2(9);
  const auto a = generate_variants(f.vae, x, 5, 0.1, r1);
  CHECK(a == generate_variants(f.vae, x, 5, 0.1, r2));
  CHECK(a[0] == one[0]);
  for (const Tensor& v : a) {
    for (double p : v.data) CHECK((p >= 0.0 && p <= 1.0));
  }

  std::vector<double> medians;
  for (double tau : {0.05, 0.1, 0.5}) {
    Rng rng(3);
    std::vector<double> mses;
    for (std::size_t s = 0; s < 20; ++s) {
      const auto vs = generate_variants(f.vae, f.test.images[s], 6, tau, rng);
      for (std::size_t i = 1; i < vs.size(); ++i) {
        for (std::size_t j = i + 1; j < vs.size(); ++j) mses.push_back(mse_between(vs[i], vs[j]));
      }
    }
    medians.push_back(median_of(mses));
  }
  CHECK(medians[0] < medians[1]);
  CHECK(medians[1] < medians[2]);
  CHECK_THROWS_AS(generate_variants(f.vae, x, 0, 0.1, r0), ValidationError);
}

TEST_CASE("resolve_vote and vote_classify") {
  const std::vector<std::size_t> majority = {3, 1, 0};
  CHECK(resolve_vote(majority, std::vector<double>{0.1, 3.0, 0.0}) == 0);
  const std::vector<std::size_t> tie = {2, 2, 0};
  CHECK(resolve_vote(tie, std::vector<double>{1.3, 1.5, 0.2}) == 1);
  CHECK(resolve_vote(tie, std::vector<double>{1.5, 1.5, 0.2}) == 0);

  const Fixture& f = fixture();
  const EnsembleRegistry reg(f.models, 7);
  Rng rng(11);
  for (std::size_t s = 0; s < 30; ++s) {
    const std::vector<Tensor> variants = {f.test.images[s], f.test.images[s + 1]};
    const InferenceOutcome out = vote_classify(reg, variants, 3, rng);
    std::size_t total = 0;
    for (std::size_t t : out.tally) total += t;
    CHECK(total == 6);
    CHECK(out.model_ids.size() == 6);
    // Recount: no class beats the label on tally.
    for (std::size_t c = 0; c < out.tally.size(); ++c) CHECK(out.tally[c] <= out.tally[out.label]);
    CHECK((out.confidence > 0.0 && out.confidence <= 1.0));
  }

  const EnsembleRegistry single({f.models[0]}, 1);
  for (std::size_t s = 0; s < 50; ++s) {
    const Tensor& x = f.test.images[s];
    const InferenceOutcome out = vote_classify(single, std::span<const Tensor>(&x, 1), 1, rng);
    const Tensor p = classify(f.models[0], x);
    CHECK(out.label == static_cast<int>(argmax(p.data)));
    CHECK(out.confidence == p[static_cast<std::size_t>(out.label)]);
    CHECK(out.model_ids == std::vector<std::string>{"f0"});
  }
  CHECK_THROWS_AS(vote_classify(single, {}, 1, rng), ValidationError);
}

TEST_CASE("adversarial detector") {
  const Fixture& f = fixture();
  const AdvDetector& det = detector();
  CHECK(det.model.train_stats.train_accuracy >= 0.98);

  // Held-out adversarials crafted on one of the craft models.
  const std::span<const Tensor> xs = std::span<const Tensor>(f.test.images).first(200);
  const std::span<const int> ys = std::span<const int>(f.test.labels).first(200);
  const auto adv = fgsm_batch(f.models[1], xs, ys, 0.15);
  std::size_t detected = 0;
  std::vector<double> adv_scores, clean_scores;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double s = detect_adversarial(det, adv[i]);
    CHECK((s >= 0.0 && s <= 1.0));
    adv_scores.push_back(s);
    clean_scores.push_back(detect_adversarial(det, xs[i]));
    detected += s >= 0.5;
  }
  CHECK(static_cast<double>(detected) / static_cast<double>(adv.size()) > 0.8);
  CHECK(mean_of(adv_scores) > mean_of(clean_scores));
  CHECK(detect_adversarial(det, adv[0]) == adv_scores[0]);

  AdvDetectorConfig cfg;
  cfg.max_epochs = 2;
  cfg.train.epochs = 2;
  const Dataset small = f.train.subset(0, 40);
  CHECK(train_adv_detector(small, f.models, cfg, 3).model.params() ==
        train_adv_detector(small, f.models, cfg, 3).model.params());
  CHECK_THROWS_AS(train_adv_detector(Dataset{}, f.models, cfg, 3), ValidationError);
  CHECK_THROWS_AS(train_adv_detector(small, {}, cfg, 3), ValidationError);
  CHECK_THROWS_AS(detect_adversarial(det, Tensor({1, 4, 4})), DimensionError);
}

TEST_CASE("decoy_spec") {
  ArchitectureSpec conv;
  conv.kind = ArchKind::convnet;
  conv.conv_stages = {{8, 3, 1}, {1, 3, 2}};
  conv.hidden_widths = {64, 1};
  const ArchitectureSpec d = decoy_spec(conv);
  CHECK(d.conv_stages[0].channels == 4);
  CHECK(d.conv_stages[1].channels == 1);
  CHECK(d.hidden_widths == std::vector<std::size_t>{32, 1});
}

TEST_CASE("defend_infer") {
  const Fixture& f = fixture();

  SUBCASE("minimal toggles collapse to the plain classifier") {
    DefenseConfig cfg;
    cfg.K = 1;
    cfg.m_draws = 1;
    cfg.tau = 0.0;
    cfg.sentinel = cfg.sanitize = cfg.vote = false;
    const DefensePipeline p = pipeline(1, cfg);
    Rng rng(1);
    const auto plain = predict_labels(f.models[0], f.test.images);
    for (std::size_t i = 0; i < f.test.size(); ++i) {
      const InferenceOutcome out = defend_infer(p, f.test.images[i], SessionState::decoy, rng);
      CHECK(out.label == plain[i]);
      CHECK_FALSE(out.served_by_decoy);
    }
  }

  SUBCASE("vote only with a near-identity reconstruction") {
    DefenseConfig cfg;
    cfg.K = 1;
    cfg.m_draws = 1;
    cfg.tau = 0.0;
    cfg.sentinel = cfg.sanitize = false;
    DefensePipeline p = pipeline(1, cfg);
    p.vae = near_identity_vae();
    Rng rng(2);
    const auto plain = predict_labels(f.models[0], f.test.images);
    std::size_t same = 0;
    for (std::size_t i = 0; i < f.test.size(); ++i) {
      same += defend_infer(p, f.test.images[i], SessionState::normal, rng).label == plain[i];
    }
    CHECK(static_cast<double>(same) / static_cast<double>(f.test.size()) >= 0.99);
  }

  SUBCASE("decoy routing") {
    const DefensePipeline p = pipeline(3, DefenseConfig{});
    Rng rng(3);
    const InferenceOutcome out = defend_infer(p, f.test.images[0], SessionState::decoy, rng);
    CHECK(out.served_by_decoy);
    CHECK(out.model_ids == std::vector<std::string>{"decoy"});
    std::size_t total = 0;
    for (std::size_t t : out.tally) total += t;
    CHECK(total == p.cfg.K * p.cfg.m_draws);
    CHECK(out.label == static_cast<int>(argmax(classify(p.decoy, f.test.images[0]).data)));
  }

  SUBCASE("full pipeline invariants and determinism") {
    const DefensePipeline p = pipeline(3, DefenseConfig{});
    Rng r1(5), r2(5);
    std::size_t correct = 0, plain_correct = 0;
    for (std::size_t i = 0; i < 100; ++i) {
      const Tensor& x = f.test.images[i];
      const InferenceOutcome a = defend_infer(p, x, SessionState::suspect, r1);
      const InferenceOutcome b = defend_infer(p, x, SessionState::suspect, r2);
      CHECK(a.label == b.label);
      CHECK(a.confidence == b.confidence);
      CHECK(a.tally == b.tally);
      CHECK(a.model_ids == b.model_ids);
      CHECK(a.adversarial_score == b.adversarial_score);
      std::size_t total = 0;
      for (std::size_t t : a.tally) total += t;
      CHECK(total == p.cfg.K * p.cfg.m_draws);
      CHECK(a.model_ids.size() == p.cfg.K * p.cfg.m_draws);
      CHECK_FALSE(a.served_by_decoy);
      CHECK(a.adversarial_suspect == (a.adversarial_score >= p.cfg.theta_adv));
      correct += a.label == f.test.labels[i];
      plain_correct += predict_labels(f.models[0], std::span<const Tensor>(&x, 1))[0] == f.test.labels[i];
    }
    CHECK(correct + 10 >= plain_correct);
    Rng rng(1);
    CHECK_THROWS_AS(defend_infer(p, Tensor({1, 11, 12}), SessionState::normal, rng), DimensionError);
  }
}

TEST_CASE("DefenseConfig json") {
  DefenseConfig c;
  c.K = 2;
  c.vote = false;
  const DefenseConfig back = DefenseConfig::from_json(c.to_json());
  CHECK(back.K == 2);
  CHECK_FALSE(back.vote);
  CHECK(back.quant_bits == 5);
  Json bad = c.to_json();
  bad["quant_bits"] = 0;
  CHECK_THROWS_AS(DefenseConfig::from_json(bad), ValidationError);
  bad = c.to_json();
  bad["m_draws"] = 0;
  CHECK_THROWS_AS(DefenseConfig::from_json(bad), ValidationError);
}
