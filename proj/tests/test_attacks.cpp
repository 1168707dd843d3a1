#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dnd/attacks.hpp"
#include "dnd/errors.hpp"
#include "gradcheck.hpp"

using namespace dnd;
using dnd::testing::random_tensor;
using dnd::testing::relative_error;

namespace {

// 2-input model whose class-1 probability is sigmoid(w . x) for x > 0:
// relu passes the identity hidden layer, class 0 has logit 0.
Classifier logistic_model(double w0, double w1) {
  ArchitectureSpec s;
  s.hidden_widths = {2};
  s.input_shape = {1, 1, 2};
  s.num_classes = 2;
  std::vector<Tensor> p = {Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}), Tensor({2, 2}, {0, w0, 0, w1}), Tensor({2})};
  return Classifier(s, std::move(p));
}

ArchitectureSpec glyph_conv() {
  ArchitectureSpec s;
  s.kind = ArchKind::convnet;
  s.conv_stages = {{8, 3, 1}};
  s.hidden_widths = {64};
  return s;
}

ArchitectureSpec glyph_mlp(std::size_t width = 32) {
  ArchitectureSpec s;
  s.hidden_widths = {width};
  return s;
}

struct Fixture {
  Dataset train;
  Dataset test;
  Classifier victim = build_classifier(glyph_mlp(128), 1);
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    DataConfig dc;
    fx.train = gen_synthetic_dataset(dc, 4000, Split::train, 100);
    fx.test = gen_synthetic_dataset(dc, 300, Split::test, 101);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.seed = 2;
    train_supervised(fx.victim, fx.train, cfg);
    return fx;
  }();
  return f;
}

double ce_loss(const Classifier& m, const Tensor& x, int y) { return -std::log(classify(m, x)[y] + 1e-12); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("input_gradient") {
  const Classifier logistic = logistic_model(1.0, -2.0);
  const Tensor x({1, 1, 2}, {0.5, 0.5});
  const double s = 1.0 / (1.0 + std::exp(0.5));
  const Tensor g = input_gradient(logistic, x, 1);
  CHECK(g.shape == x.shape);
  // The 1e-12 log guard shifts the gradient by about 1e-12 relative.
  CHECK(g[0] == doctest::Approx((s - 1.0) * 1.0).epsilon(1e-9));
  CHECK(g[1] == doctest::Approx((s - 1.0) * -2.0).epsilon(1e-9));
  CHECK(g[0] == doctest::Approx(-0.6225).epsilon(1e-4));
  CHECK(g[1] == doctest::Approx(1.2450).epsilon(1e-4));

  const Classifier flat = logistic_model(0.0, 0.0);
  for (double v : input_gradient(flat, x, 0).data) CHECK(v == 0.0);

  Rng rng(4);
  ArchitectureSpec conv;
  conv.kind = ArchKind::convnet;
  conv.conv_stages = {{3, 3, 2}};
  conv.hidden_widths = {8};
  conv.activation = Activation::tanh;
  for (const ArchitectureSpec& spec : {glyph_mlp(12), conv}) {
    const Classifier m = build_classifier(spec, 8);
    const Tensor xi = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
    const Tensor numeric = finite_diff_gradient([&](const Tensor& p) { return ce_loss(m, p, 4); }, xi);
    CHECK(relative_error(input_gradient(m, xi, 4), numeric) < 1e-4);
  }
  CHECK_THROWS_AS(input_gradient(logistic, Tensor({1, 2, 1}), 1), DimensionError);
}

TEST_CASE("input_gradients batch agrees with single-sample gradients") {
  const Fixture& f = fixture();
  const std::vector<Tensor> xs(f.test.images.begin(), f.test.images.begin() + 5);
  const std::vector<int> ys(f.test.labels.begin(), f.test.labels.begin() + 5);
  const auto batch = input_gradients(f.victim, xs, ys);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(relative_error(batch[i], input_gradient(f.victim, xs[i], ys[i])) < 1e-12);
  }
}

TEST_CASE("fgsm") {
  const Classifier logistic = logistic_model(1.0, -2.0);
  const Tensor x({1, 1, 2}, {0.5, 0.5});
  const Tensor adv = fgsm(logistic, x, 1, 0.1);
  CHECK(adv[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(adv[1] == doctest::Approx(0.6).epsilon(1e-15));

  const Fixture& f = fixture();
  CHECK(fgsm(f.victim, f.test.images[0], f.test.labels[0], 0.0) == f.test.images[0]);
  CHECK_THROWS_AS(fgsm(f.victim, f.test.images[0], f.test.labels[0], -0.1), ValidationError);

  Rng rng(5);
  std::vector<Tensor> xs;
  std::vector<int> ys;
  for (int i = 0; i < 1000; ++i) {
    xs.push_back(random_tensor({1, 12, 12}, rng, 0.0, 1.0));
    ys.push_back(static_cast<int>(rng.below(10)));
  }
  const auto advs = fgsm_batch(f.victim, xs, ys, 0.15);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(linf_distance(advs[i], xs[i]) <= 0.15 + 1e-12);
    CHECK(*std::min_element(advs[i].data.begin(), advs[i].data.end()) >= 0.0);
    CHECK(*std::max_element(advs[i].data.begin(), advs[i].data.end()) <= 1.0);
  }
  CHECK(advs[3] == fgsm(f.victim, xs[3], ys[3], 0.15));
}

TEST_CASE("iterative_fgsm") {
  const Fixture& f = fixture();
  AttackConfig one;
  one.steps = 1;
  one.alpha = one.epsilon = 0.15;
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(iterative_fgsm(f.victim, f.test.images[i], f.test.labels[i], one) ==
          fgsm(f.victim, f.test.images[i], f.test.labels[i], 0.15));
  }

  const AttackConfig cfg;
  std::size_t ascended = 0;
  const std::size_t n = 200;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& x = f.test.images[i];
    const auto path = iterative_fgsm_path(f.victim, x, f.test.labels[i], cfg);
    CHECK(path.size() == cfg.steps + 1);
    for (const Tensor& it : path) {
      CHECK(linf_distance(it, x) <= cfg.epsilon + 1e-12);
      CHECK(*std::min_element(it.data.begin(), it.data.end()) >= 0.0);
      CHECK(*std::max_element(it.data.begin(), it.data.end()) <= 1.0);
    }
    ascended += ce_loss(f.victim, path.back(), f.test.labels[i]) >= ce_loss(f.victim, x, f.test.labels[i]);
  }
  CHECK(static_cast<double>(ascended) / n >= 0.95);

  const std::span<const Tensor> xs = std::span<const Tensor>(f.test.images).first(30);
  const auto batch = iterative_fgsm_batch(f.victim, xs, std::span<const int>(f.test.labels).first(30), cfg);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(linf_distance(batch[i], iterative_fgsm(f.victim, xs[i], f.test.labels[i], cfg)) < 1e-12);
  }

  AttackConfig targeted = cfg;
  targeted.targeted = true;
  targeted.target_label = 7;
  std::size_t closer = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const Tensor& x = f.test.images[i];
    closer += classify(f.victim, iterative_fgsm(f.victim, x, f.test.labels[i], targeted))[7] >= classify(f.victim, x)[7];
  }
  CHECK(closer >= 48);

  AttackConfig bad;
  bad.alpha = 0.5;
  CHECK_THROWS_AS(iterative_fgsm(f.victim, f.test.images[0], 0, bad), ValidationError);
  bad = AttackConfig{};
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("denoising autoencoder on FGSM inputs") {
  const Fixture& f = fixture();
  DataConfig clean;
  clean.noise_p = 0.0;
  DenoisingAutoencoder ae({1, 12, 12}, 64, 32, 3);
  TrainConfig cfg;
  cfg.lr = 1.0;
  cfg.seed = 6;
  train_denoising_ae(ae, gen_synthetic_dataset(clean, 3000, Split::train, 30), 0.2, cfg);
  const Dataset held = gen_synthetic_dataset(clean, 200, Split::test, 31);
  const auto advs = fgsm_batch(f.victim, held.images, held.labels, 0.15);
  std::size_t better = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    better += mse_between(denoise(ae, advs[i]), held.images[i]) < mse_between(advs[i], held.images[i]);
  }
  CHECK(static_cast<double>(better) / static_cast<double>(held.size()) >= 0.8);
}

TEST_CASE("train_surrogate") {
  const Fixture& f = fixture();
  QueryLog log;
  const Dataset queries = gen_synthetic_dataset(DataConfig{}, 2000, Split::train, 555);
  log.inputs = queries.images;
  log.labels = predict_labels(f.victim, log.inputs);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 9;
  const Classifier sur = train_surrogate(log, glyph_conv(), cfg);
  const auto victim_labels = predict_labels(f.victim, f.test.images);
  auto agreement = [&](const Classifier& m) {
    const auto labels = predict_labels(m, f.test.images);
    std::size_t same = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) same += labels[i] == victim_labels[i];
    return static_cast<double>(same) / static_cast<double>(labels.size());
  };
  CHECK(agreement(sur) >= 0.85);
  TrainConfig quick = cfg;
  quick.epochs = 2;
  CHECK(train_surrogate(log, glyph_mlp(), quick).params() == train_surrogate(log, glyph_mlp(), quick).params());

  QueryLog noise = log;
  Rng rng(12);
  for (int& y : noise.labels) y = static_cast<int>(rng.below(10));
  TrainConfig short_cfg = cfg;
  short_cfg.epochs = 5;
  CHECK(std::abs(agreement(train_surrogate(noise, glyph_mlp(128), short_cfg)) - 0.1) <= 0.1);

  CHECK_THROWS_AS(train_surrogate(QueryLog{}, glyph_mlp(), cfg), ValidationError);
}

TEST_CASE("synth_attack_session") {
  const Fixture& f = fixture();
  const Classifier surrogate = build_classifier(glyph_mlp(), 77);
  std::size_t calls = 0;
  const VictimOracle oracle = [&](const Tensor& x) {
    ++calls;
    const Tensor p = classify(f.victim, x);
    const std::size_t k = argmax(p.data);
    return OracleAnswer{static_cast<int>(k), p[k]};
  };
  const AttackConfig cfg;
  std::vector<double> attack_l2;
  for (std::size_t s = 0; s < 20; ++s) {
    const AttackTrace t = synth_attack_session(oracle, surrogate, f.test.images[s], ProbeKind::fgsm_probe, cfg, s);
    REQUIRE(t.records.size() == cfg.steps + 1);
    for (std::size_t i = 0; i < t.records.size(); ++i) CHECK(t.records[i].index == i);
    for (std::size_t i = 1; i < t.records.size(); ++i) {
      CHECK(linf_distance(t.records[i].input, t.records[i - 1].input) <= cfg.alpha + 1e-12);
      attack_l2.push_back(l2_distance(t.records[i].input, t.records[i - 1].input));
    }
  }
  CHECK(calls == 20 * (cfg.steps + 1));
  std::vector<double> benign_l2;
  for (std::size_t i = 1; i < 200; ++i) benign_l2.push_back(l2_distance(f.test.images[i], f.test.images[i - 1]));
  CHECK(median(benign_l2) > 5.0 * median(attack_l2));

  const AttackTrace ex = synth_attack_session(oracle, surrogate, f.test.images[0], ProbeKind::extraction_probe, cfg, 4);
  CHECK(ex.records.size() == cfg.steps + 1);
  for (std::size_t i = 1; i < ex.records.size(); ++i) {
    CHECK(linf_distance(ex.records[i].input, ex.records[0].input) <= cfg.epsilon + 1e-12);
    CHECK(ex.records[i].input != ex.records[0].input);
  }
  CHECK(synth_attack_session(oracle, surrogate, f.test.images[0], ProbeKind::extraction_probe, cfg, 4).to_jsonl() ==
        ex.to_jsonl());

  const AttackTrace back = AttackTrace::from_jsonl(ex.to_jsonl());
  CHECK(back.kind == ProbeKind::extraction_probe);
  REQUIRE(back.records.size() == ex.records.size());
  for (std::size_t i = 0; i < ex.records.size(); ++i) {
    CHECK(back.records[i].input == ex.records[i].input);
    CHECK(back.records[i].label == ex.records[i].label);
    CHECK(back.records[i].confidence == ex.records[i].confidence);
  }
  CHECK_THROWS_AS(AttackTrace::from_jsonl("{\"index\":0}\n"), ValidationError);
}

TEST_CASE("attack_success_rate") {
  const Fixture& f = fixture();
  const auto infer = [&](const Tensor& x) { return predict_labels(f.victim, std::span<const Tensor>(&x, 1)).front(); };
  std::vector<std::pair<Tensor, int>> pairs;
  for (std::size_t i = 0; i < 50; ++i) pairs.emplace_back(f.test.images[i], infer(f.test.images[i]));
  CHECK(attack_success_rate(infer, pairs) == 0.0);
  for (auto& [x, y] : pairs) y = (infer(x) + 1) % 10;
  CHECK(attack_success_rate(infer, pairs) == 1.0);

  const auto advs = fgsm_batch(f.victim, std::span<const Tensor>(f.test.images).first(100),
                               std::span<const int>(f.test.labels).first(100), 0.15);
  pairs.clear();
  std::size_t recount = 0;
  for (std::size_t i = 0; i < advs.size(); ++i) {
    pairs.emplace_back(advs[i], f.test.labels[i]);
    recount += infer(advs[i]) != f.test.labels[i];
  }
  CHECK(attack_success_rate(infer, pairs) == static_cast<double>(recount) / 100.0);
  CHECK_THROWS_AS(attack_success_rate(infer, {}), ValidationError);
}
