#include <doctest.h>

#include <limits>

#include "advseg/attacks.hpp"
#include "advseg/errors.hpp"
#include "advseg/metrics.hpp"
#include "helpers.hpp"

using namespace advseg;

namespace {

struct Fixture {
  Dataset data;
  SegModel model;
};

/// A small trained model shared by the tests in this file.
const Fixture& fixture() {
  static const Fixture f = [] {
    SceneConfig sc;
    sc.height = sc.width = 24;
    sc.min_shapes = 2;
    sc.max_shapes = 3;
    Fixture fx;
    fx.data = generate_dataset(sc, 48);
    std::vector<std::size_t> tr(40), va(8);
    for (std::size_t i = 0; i < 40; ++i) tr[i] = i;
    for (std::size_t i = 0; i < 8; ++i) va[i] = 40 + i;
    TrainConfig tc;
    tc.epochs = 8;
    fx.model = train(fx.data, tr, va, sc.num_classes, tc).model;
    return fx;
  }();
  return f;
}

AttackConfig cfg(double eps, std::optional<int> n = {}, double alpha = 1.0) {
  AttackConfig c;
  c.epsilon = eps;
  c.alpha = alpha;
  c.iterations = n;
  return c;
}

AttackConfig targeted(AttackConfig c, TargetSource s) {
  c.mode = AttackMode::targeted;
  c.target = s;
  return c;
}

void check_budget(const Tensor& adv, const Tensor& x, double eps) {
  CHECK(linf_distance(adv, x) <= eps / 255.0 + 1e-12);
  for (double v : adv.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

/// Exhaustive nearest non-deleted pixel, ties to the earliest in scan order.
LabelMap brute_force_dnnm(const LabelMap& p, int del) {
  LabelMap out = p;
  for (std::size_t z = 0; z < p.size(); ++z) {
    if (p[z] != del) continue;
    double best = std::numeric_limits<double>::infinity();
    int cls = -1;
    const double zy = static_cast<double>(z / p.width()), zx = static_cast<double>(z % p.width());
    for (std::size_t d = 0; d < p.size(); ++d) {
      if (p[d] == del) continue;
      const double dy = static_cast<double>(d / p.width()) - zy, dx = static_cast<double>(d % p.width()) - zx;
      const double dist = dy * dy + dx * dx;
      if (dist < best) {
        best = dist;
        cls = p[d];
      }
    }
    out[z] = cls;
  }
  return out;
}

}  // namespace

TEST_CASE("default iteration count") {
  CHECK(default_iterations(4) == 5);
  CHECK(default_iterations(8) == 10);
  CHECK(default_iterations(16) == 20);
  CHECK(default_iterations(2) == 2);
  CHECK(cfg(8).resolved_iterations() == 10);
  CHECK(cfg(8, 3).resolved_iterations() == 3);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(cfg(0).validate(false), ConfigError);
  CHECK_THROWS_AS(cfg(4, 0).validate(true), ConfigError);
  CHECK_THROWS_AS(cfg(4, 2, 0.0).validate(true), ConfigError);
  AttackConfig t = cfg(4);
  t.mode = AttackMode::targeted;
  CHECK_THROWS_AS(t.validate(false), ConfigError);
  CHECK_NOTHROW(targeted(cfg(4), TargetSource::least_likely).validate(true));
}

TEST_CASE("projection clips to the ball, then to [0, 1]") {
  const Tensor x({3}, std::vector<double>{0.0, 0.5, 1.0});
  Tensor c({3}, std::vector<double>{-0.5, 0.9, 0.2});
  project_to_budget(c, x, 0.1);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == doctest::Approx(0.6));
  CHECK(c[2] == doctest::Approx(0.9));
}

TEST_CASE("FGSM: zero budget and sign steps") {
  const auto& f = fixture();
  const auto& s = f.data[41];
  CHECK(fgsm(f.model, s.image, s.labels, cfg(0)).image == s.image);
  const AdversarialExample ex = fgsm(f.model, s.image, s.labels, cfg(4));
  const Tensor g = loss_and_input_gradient(f.model, s.image, s.labels).grad;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double step = ex.image[i] - s.image[i];
    const double want = std::clamp(s.image[i] + (g[i] > 0 ? 4.0 : g[i] < 0 ? -4.0 : 0.0) / 255.0, 0.0, 1.0) - s.image[i];
    CHECK(step == want);
  }
  check_budget(ex.image, s.image, 4);
  CHECK(ex.linf == linf_distance(ex.image, s.image));
}

TEST_CASE("targeted FGSM is untargeted FGSM with the step negated") {
  const auto& f = fixture();
  const auto& s = f.data[42];
  const LabelMap target = least_likely_target(predict_probs(f.model, s.image));
  const AdversarialExample tar = fgsm_targeted(f.model, s.image, target, targeted(cfg(6), TargetSource::least_likely));
  const AdversarialExample unt = fgsm(f.model, s.image, target, cfg(6));
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    const double d_unt = unt.image[i] - s.image[i];
    const double d_tar = tar.image[i] - s.image[i];
    const double sign_unt = (d_unt > 0) - (d_unt < 0);
    const double sign_tar = (d_tar > 0) - (d_tar < 0);
    // clamping can zero a step on either side
    if (sign_unt != 0 && sign_tar != 0) CHECK(sign_unt == -sign_tar);
  }
}

TEST_CASE("targeted FGSM toward the least-likely map lowers the target loss") {
  const auto& f = fixture();
  for (std::size_t i = 40; i < 44; ++i) {
    const auto& s = f.data[i];
    const LabelMap target = least_likely_target(predict_probs(f.model, s.image));
    const AdversarialExample ex = fgsm_targeted(f.model, s.image, target, targeted(cfg(8), TargetSource::least_likely));
    CHECK(model_loss(f.model, ex.image, target) < model_loss(f.model, s.image, target));
  }
}

TEST_CASE("self-targeted FGSM with a tiny budget barely changes the prediction") {
  const auto& f = fixture();
  const auto& s = f.data[43];
  const LabelMap pred = predict_labels(predict_probs(f.model, s.image));
  const AdversarialExample ex = fgsm_targeted(f.model, s.image, pred, targeted(cfg(0.5), TargetSource::static_mask));
  const double before = apsr(pred, s.labels);
  const double after = apsr(predict_labels(predict_probs(f.model, ex.image)), s.labels);
  CHECK(std::abs(after - before) <= 0.05);
}

TEST_CASE("untargeted FGSM does not decrease the loss at eps = 1") {
  const auto& f = fixture();
  for (std::size_t i = 40; i < 48; ++i) {
    const auto& s = f.data[i];
    const AdversarialExample ex = fgsm(f.model, s.image, s.labels, cfg(1));
    CHECK(model_loss(f.model, ex.image, s.labels) - model_loss(f.model, s.image, s.labels) >= -1e-6);
  }
}

TEST_CASE("I-FGSM with one step of size eps equals FGSM bit for bit") {
  const auto& f = fixture();
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& s = f.data[i];
    CHECK(ifgsm(f.model, s.image, s.labels, cfg(8, 1, 8)).image == fgsm(f.model, s.image, s.labels, cfg(8)).image);
  }
}

TEST_CASE("iterative attacks keep every iterate inside the budget") {
  const auto& f = fixture();
  const auto& s = f.data[44];
  int steps = 0;
  auto on_step = [&](int, const Tensor& x) {
    ++steps;
    check_budget(x, s.image, 5);
  };
  ifgsm(f.model, s.image, s.labels, cfg(5, 7, 2), on_step);
  CHECK(steps == 7);
  steps = 0;
  pgd(f.model, s.image, s.labels, cfg(5, 7, 2), on_step);
  CHECK(steps == 7);
  const LabelMap target = least_likely_target(predict_probs(f.model, s.image));
  check_budget(ifgsm(f.model, s.image, target, targeted(cfg(5), TargetSource::least_likely)).image, s.image, 5);
  check_budget(pgd(f.model, s.image, target, targeted(cfg(5), TargetSource::least_likely)).image, s.image, 5);
}

TEST_CASE("PGD skips steps with a zero gradient") {
  SegModel flat = SegModel::create(3, 5, 1, {4});
  for (auto& layer : flat.layers()) {
    for (auto& v : layer.kernels.values()) v = 0.0;
  }
  const auto& s = fixture().data[0];
  CHECK(pgd(flat, s.image, s.labels, cfg(8)).image == s.image);
}

TEST_CASE("least-likely target is the per-pixel argmin") {
  CHECK(least_likely_target(SoftmaxField(Tensor({1, 1, 3}, 1.0 / 3.0)))[0] == 0);
  CHECK(least_likely_target(SoftmaxField(Tensor({1, 1, 3}, std::vector<double>{1.0, 0.0, 0.0})))[0] == 1);
  CHECK(least_likely_target(SoftmaxField(Tensor({1, 1, 3}, std::vector<double>{0.0, 1.0, 0.0})))[0] == 0);
  Rng rng(4);
  const SoftmaxField f = testutil::random_field(6, 6, 5, rng);
  const LabelMap t = least_likely_target(f);
  for (std::size_t z = 0; z < 36; ++z) {
    int lo = 0;
    for (int k = 1; k < 5; ++k) {
      if (f.pixel(z)[k] < f.pixel(z)[lo]) lo = k;
    }
    CHECK(t[z] == lo);
  }
}

TEST_CASE("static target is returned unchanged after a shape check") {
  const LabelMap ref(4, 5, 2);
  CHECK(static_target(ref, 4, 5) == ref);
  CHECK_THROWS_AS(static_target(ref, 5, 4), ShapeError);
}

TEST_CASE("class-deletion target") {
  const LabelMap none(3, 3, 2);
  CHECK(dnnm_target(none, 1) == none);
  LabelMap single(3, 3, 2);
  single.at(1, 1) = 1;
  CHECK(dnnm_target(single, 1) == LabelMap(3, 3, 2));
  CHECK_THROWS_AS(dnnm_target(LabelMap(2, 2, 1), 1), ConfigError);

  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap m(9, 11);
    for (std::size_t z = 0; z < m.size(); ++z) m[z] = rng.uniform() < 0.6 ? 1 : static_cast<int>(rng.uniform_int(0, 4));
    m[rng.uniform_int(0, 98)] = 3;
    CHECK(dnnm_target(m, 1) == brute_force_dnnm(m, 1));
  }
}

TEST_CASE("DAG: empty active set stops at once; every iterate stays in budget") {
  const auto& f = fixture();
  const auto& s = f.data[45];
  const LabelMap pred = predict_labels(predict_probs(f.model, s.image));
  DagTrace trace;
  const AdversarialExample same = dag_attack(f.model, s.image, pred, targeted(cfg(8), TargetSource::static_mask), &trace);
  CHECK(trace.iterations == 0);
  CHECK(same.image == s.image);

  const LabelMap target = f.data[0].labels;
  DagTrace run;
  const AdversarialExample ex = dag_attack(f.model, s.image, target, targeted(cfg(8), TargetSource::static_mask), &run);
  check_budget(ex.image, s.image, 8);
  CHECK(run.iterations >= 1);
  CHECK(run.iterations <= 10);
  REQUIRE(run.active_sizes.size() == static_cast<std::size_t>(run.iterations) + 1);
  if (static_cast<std::size_t>(run.iterations) < 10) CHECK(2 * run.active_sizes.back() < run.active_sizes.front());
}

TEST_CASE("universal perturbation stays in budget and lowers held-out target loss") {
  const auto& f = fixture();
  std::vector<Tensor> train_imgs;
  for (std::size_t i = 0; i < 16; ++i) train_imgs.push_back(f.data[i].image);
  const LabelMap target = f.data[0].labels;
  const AttackConfig c = targeted(cfg(16), TargetSource::static_mask);
  const Tensor xi = universal_perturbation(f.model, train_imgs, {target}, c);
  double m = 0.0;
  for (double v : xi.values()) m = std::max(m, std::abs(v));
  CHECK(m <= 16.0 / 255.0 + 1e-15);
  double with = 0.0, without = 0.0;
  for (std::size_t i = 40; i < 48; ++i) {
    const Tensor adv = apply_universal(f.data[i].image, xi);
    check_budget(adv, f.data[i].image, 16);
    with += model_loss(f.model, adv, target);
    without += model_loss(f.model, f.data[i].image, target);
  }
  CHECK(with < without);
  CHECK_THROWS(universal_perturbation(f.model, train_imgs, {target, target}, c));
}

TEST_CASE("suite: nine catalogs, metadata round trip, reruns identical") {
  const auto& f = fixture();
  const auto suite = default_attack_suite();
  REQUIRE(suite.size() == 9);
  for (const auto& s : suite) {
    const AttackSpec back = attack_spec_from_json(to_json(s));
    CHECK(to_json(back) == to_json(s));
  }
  SuiteOptions opt;
  opt.universal_train_images = 4;
  opt.universal.epochs = 1;
  const std::vector<std::size_t> train_idx{0, 1, 2, 3, 4, 5}, attack_idx{40, 41, 42};
  const auto a = apply_attack_suite(f.model, f.data, train_idx, attack_idx, suite, opt);
  const auto b = apply_attack_suite(f.model, f.data, train_idx, attack_idx, suite, opt);
  REQUIRE(a.size() == 9);
  for (std::size_t c = 0; c < a.size(); ++c) {
    REQUIRE(a[c].examples.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a[c].examples[i].image == b[c].examples[i].image);
      CHECK(a[c].examples[i].source_index == attack_idx[i]);
      check_budget(a[c].examples[i].image, f.data[attack_idx[i]].image, a[c].spec.config.epsilon);
    }
  }

  const auto dir = testutil::scratch_dir("catalog");
  save_catalog(dir / "c", a[3], f.data);
  Dataset imgs;
  const AttackCatalog back = load_catalog(dir / "c", &imgs);
  CHECK(to_json(back.spec) == to_json(a[3].spec));
  REQUIRE(back.examples.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.examples[i].image == a[3].examples[i].image);
    CHECK(back.examples[i].linf == a[3].examples[i].linf);
    CHECK(imgs[i].labels == f.data[attack_idx[i]].labels);
  }
  CHECK(to_json(suite_options_from_json(to_json(opt))) == to_json(opt));
}
