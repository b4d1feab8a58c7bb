#include <doctest.h>

#include "advseg/errors.hpp"
#include "advseg/segnet.hpp"
#include "advseg/serialize.hpp"
#include "helpers.hpp"

using namespace advseg;

namespace {

SceneConfig small_scene() {
  SceneConfig c;
  c.height = c.width = 16;
  c.min_shapes = 1;
  c.max_shapes = 2;
  return c;
}

}  // namespace

TEST_CASE("mIoU examples") {
  const LabelMap pred(2, 2, std::vector<int>{0, 0, 1, 1});
  const LabelMap label(2, 2, std::vector<int>{0, 1, 1, 1});
  CHECK(miou({pred}, {label}) == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
  CHECK(miou({label}, {label}) == 1.0);
  const LabelMap a(2, 2, std::vector<int>{0, 0, 1, 1});
  const LabelMap b(2, 2, std::vector<int>{1, 1, 0, 0});
  CHECK(miou({a}, {b}) == 0.0);
  CHECK_THROWS(miou({}, {}));
  CHECK_THROWS_AS(miou({a}, {LabelMap(1, 4)}), ShapeError);
}

TEST_CASE("predict_labels: argmax with ties to the lowest index") {
  const SoftmaxField uniform(Tensor({2, 3, 4}, 0.25));
  CHECK(predict_labels(uniform) == LabelMap(2, 3, 0));
  Tensor hot({1, 2, 3}, 0.0);
  hot[2] = 1.0;
  hot[3 + 1] = 1.0;
  CHECK(predict_labels(SoftmaxField(hot)) == LabelMap(1, 2, std::vector<int>{2, 1}));

  Rng rng(9);
  const SoftmaxField f = testutil::random_field(5, 5, 4, rng);
  const LabelMap got = predict_labels(f);
  for (std::size_t z = 0; z < 25; ++z) {
    int best = 0;
    for (int k = 1; k < 4; ++k) {
      if (f.pixel(z)[k] > f.pixel(z)[best]) best = k;
    }
    CHECK(got[z] == best);
  }
}

TEST_CASE("model output shapes and the zero-weight symmetry") {
  SegModel m = SegModel::create(3, 5, 4);
  CHECK(m.architecture().find("conv3x3-16+relu") != std::string::npos);
  Rng rng(2);
  const Tensor img = testutil::random_tensor({10, 12, 3}, rng, 0.0, 1.0);
  const SoftmaxField f = predict_probs(m, img);
  CHECK(f.height() == 10);
  CHECK(f.width() == 12);
  CHECK(f.num_classes() == 5);
  for (std::size_t z = 0; z < f.num_pixels(); ++z) {
    double s = 0.0;
    for (double p : f.pixel(z)) s += p;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  CHECK(predict_probs(m, img).tensor() == f.tensor());

  for (auto& layer : m.layers()) {
    for (auto& v : layer.kernels.values()) v = 0.0;
    for (auto& v : layer.bias.values()) v = 0.0;
  }
  const SoftmaxField u = predict_probs(m, img);
  for (double p : u.tensor().values()) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));

  CHECK_THROWS_AS(predict_probs(m, Tensor({4, 4, 2})), ShapeError);
}

TEST_CASE("input gradient matches central differences") {
  const SegModel m = SegModel::create(3, 4, 5, {4, 4});
  Rng rng(6);
  Tensor img = testutil::random_tensor({6, 6, 3}, rng, 0.0, 1.0);
  LabelMap labels(6, 6);
  for (std::size_t z = 0; z < 36; ++z) labels[z] = static_cast<int>(rng.uniform_int(0, 3));
  const LossGradient lg = loss_and_input_gradient(m, img, labels);
  CHECK(lg.loss == doctest::Approx(model_loss(m, img, labels)).epsilon(1e-14));
  double worst = 0.0;
  for (std::size_t i = 0; i < img.size(); i += 3) {
    const double num = testutil::central_difference(img, i, [&] { return model_loss(m, img, labels); });
    worst = std::max(worst, testutil::rel_error(lg.grad[i], num, 1e-4));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("training: zero epochs, determinism and overfitting one image") {
  const Dataset ds = generate_dataset(small_scene(), 1);
  TrainConfig tc;
  tc.epochs = 0;
  const TrainResult none = train(ds, {0}, {0}, 5, tc);
  CHECK(none.model.layers() == SegModel::create(3, 5, tc.seed).layers());

  tc.epochs = 150;
  tc.batch_size = 1;
  tc.learning_rate = 0.02;
  const TrainResult a = train(ds, {0}, {0}, 5, tc);
  CHECK(a.best_val_miou >= 0.95);
  for (const auto& e : a.curve) CHECK(std::isfinite(e.val_loss));

  tc.epochs = 3;
  const TrainResult r1 = train(ds, {0}, {0}, 5, tc);
  const TrainResult r2 = train(ds, {0}, {0}, 5, tc);
  CHECK(r1.model == r2.model);

  tc.epochs = 0;
  CHECK_THROWS(train(ds, {}, {0}, 5, tc));
}

TEST_CASE("checkpoint round trip") {
  SegModel m = SegModel::create(3, 5, 12);
  m.metadata()["note"] = "x";
  const auto dir = testutil::scratch_dir("ckpt");
  save_checkpoint(dir / "m", m);
  const SegModel back = load_checkpoint(dir / "m");
  CHECK(back == m);
  Rng rng(1);
  const Tensor img = testutil::random_tensor({8, 8, 3}, rng, 0.0, 1.0);
  CHECK(predict_probs(back, img).tensor() == predict_probs(m, img).tensor());

  const auto k = dir / "m" / "layer1_kernels.sstn";
  const std::string bytes = read_text_file(k);
  write_text_file(k, bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir / "m"), FormatError);
  save_checkpoint(dir / "m2", m);
  std::string meta = read_text_file(dir / "m2" / "model.meta");
  meta.replace(meta.find("version = 1"), 11, "version = 9");
  write_text_file(dir / "m2" / "model.meta", meta);
  CHECK_THROWS_AS(load_checkpoint(dir / "m2"), FormatError);
}
