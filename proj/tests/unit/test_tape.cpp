#include <doctest.h>

#include <cmath>

#include "advseg/errors.hpp"
#include "advseg/tape.hpp"
#include "helpers.hpp"

using namespace advseg;
using testutil::central_difference;
using testutil::random_tensor;
using testutil::rel_error;

TEST_CASE("conv2d forward examples") {
  Tape t;
  Var x = t.leaf(Tensor({1, 1, 1}, 0.0));
  Var k = t.leaf(Tensor({1, 1, 1, 1}, 1.0));
  Var b = t.leaf(Tensor({1}, 0.0));
  CHECK(t.value(t.conv2d(x, k, b, 1, 0))[0] == 0.0);

  Var ones = t.leaf(Tensor({3, 3, 1}, 1.0));
  Var k3 = t.leaf(Tensor({3, 3, 1, 1}, 1.0));
  Var out = t.conv2d(ones, k3, b, 1, 0);
  CHECK(t.value(out).shape() == Shape{1, 1, 1});
  CHECK(t.value(out)[0] == 9.0);
}

TEST_CASE("conv2d output extent follows floor((H + 2p - k) / s) + 1") {
  Rng rng(3);
  Tape t;
  Var x = t.leaf(random_tensor({7, 6, 2}, rng));
  Var k = t.leaf(random_tensor({3, 3, 2, 4}, rng));
  Var b = t.leaf(random_tensor({4}, rng));
  CHECK(t.value(t.conv2d(x, k, b, 2, 1)).shape() == Shape{4, 3, 4});
  CHECK(t.value(t.conv2d(x, k, b, 1, 0)).shape() == Shape{5, 4, 4});
}

TEST_CASE("conv2d shape errors name both shapes") {
  Tape t;
  Var x = t.leaf(Tensor({4, 4, 2}));
  Var k = t.leaf(Tensor({3, 3, 3, 1}));
  Var b = t.leaf(Tensor({1}));
  try {
    t.conv2d(x, k, b, 1, 1);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("4x4x2") != std::string::npos);
    CHECK(msg.find("3x3x3x1") != std::string::npos);
  }
  Var big = t.leaf(Tensor({5, 5, 2, 1}));
  CHECK_THROWS_AS(t.conv2d(x, big, b, 1, 0), ShapeError);
}

TEST_CASE("conv2d gradients match central differences") {
  Rng rng(11);
  Tensor x = random_tensor({5, 5, 2}, rng);
  Tensor k = random_tensor({3, 3, 2, 4}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor w = random_tensor({5, 5, 4}, rng);  // fixed projection makes the loss non-trivial
  auto loss = [&](Tape& t, Var vx, Var vk, Var vb) {
    return t.sum(t.mul(t.conv2d(vx, vk, vb, 1, 1), t.leaf(w)));
  };
  Tape t;
  Var vx = t.leaf(x, true), vk = t.leaf(k, true), vb = t.leaf(b, true);
  t.backward(loss(t, vx, vk, vb));
  auto f = [&] {
    Tape u;
    return u.value(loss(u, u.leaf(x), u.leaf(k), u.leaf(b)))[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, rel_error(t.grad(vx)[i], central_difference(x, i, f)));
  for (std::size_t i = 0; i < k.size(); ++i) worst = std::max(worst, rel_error(t.grad(vk)[i], central_difference(k, i, f)));
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, rel_error(t.grad(vb)[i], central_difference(b, i, f)));
  CHECK(worst <= 1e-6);
}

TEST_CASE("strided conv gradients match central differences") {
  Rng rng(12);
  Tensor x = random_tensor({6, 5, 3}, rng);
  Tensor k = random_tensor({3, 3, 3, 2}, rng);
  Tensor b = random_tensor({2}, rng);
  auto f = [&] {
    Tape u;
    Var y = u.conv2d(u.leaf(x), u.leaf(k), u.leaf(b), 2, 1);
    return u.value(u.sum(u.mul(y, y)))[0];
  };
  Tape t;
  Var vx = t.leaf(x, true), vk = t.leaf(k, true);
  Var y = t.conv2d(vx, vk, t.leaf(b), 2, 1);
  t.backward(t.sum(t.mul(y, y)));
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, rel_error(t.grad(vx)[i], central_difference(x, i, f)));
  for (std::size_t i = 0; i < k.size(); ++i) worst = std::max(worst, rel_error(t.grad(vk)[i], central_difference(k, i, f)));
  CHECK(worst <= 1e-6);
}

TEST_CASE("relu forward and gradient") {
  Tape t;
  Var x = t.leaf(Tensor({3}, std::vector<double>{-1.0, 0.0, 2.0}), true);
  Var y = t.relu(x);
  CHECK(t.value(y) == Tensor({3}, std::vector<double>{0.0, 0.0, 2.0}));
  Var neg = t.relu(t.leaf(Tensor({4}, -3.0)));
  CHECK(t.value(neg) == Tensor({4}, 0.0));

  Rng rng(5);
  Tensor v = random_tensor({40}, rng);
  for (auto& e : v.values()) {
    if (std::abs(e) < 1e-3) e = 0.5;
  }
  Tensor w = random_tensor({40}, rng);
  Tape g;
  Var gv = g.leaf(v, true);
  g.backward(g.sum(g.mul(g.relu(gv), g.leaf(w))));
  auto f = [&] {
    Tape u;
    return u.value(u.sum(u.mul(u.relu(u.leaf(v)), u.leaf(w))))[0];
  };
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(rel_error(g.grad(gv)[i], central_difference(v, i, f)) <= 1e-6);
}

TEST_CASE("pixel_softmax examples") {
  Tape t;
  auto probs = [&](std::vector<double> logits) {
    const std::size_t c = logits.size();
    return t.value(t.pixel_softmax(t.leaf(Tensor({1, 1, c}, std::move(logits)))));
  };
  const Tensor half = probs({0.0, 0.0});
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);
  const Tensor sat = probs({1000.0, 0.0});
  CHECK(sat[0] == 1.0);
  CHECK(sat[1] == doctest::Approx(0.0));
  CHECK(sat.all_finite());
  const Tensor p = probs({1.0, 2.0, 3.0});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int k = 0; k < 3; ++k) CHECK(std::abs(p[k] - std::exp(k + 1.0) / z) < 1e-15);
}

TEST_CASE("pixel_softmax sums to one and ignores a per-pixel shift") {
  Rng rng(21);
  Tensor logits = random_tensor({4, 4, 5}, rng, -20.0, 20.0);
  Tensor shifted = logits;
  for (std::size_t z = 0; z < 16; ++z) {
    const double c = rng.uniform(-50.0, 50.0);
    for (std::size_t k = 0; k < 5; ++k) shifted[z * 5 + k] += c;
  }
  Tape t;
  const Tensor a = t.value(t.pixel_softmax(t.leaf(logits)));
  const Tensor b = t.value(t.pixel_softmax(t.leaf(shifted)));
  for (std::size_t z = 0; z < 16; ++z) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      s += a[z * 5 + k];
      CHECK(a[z * 5 + k] >= 0.0);
      CHECK(std::abs(a[z * 5 + k] - b[z * 5 + k]) <= 1e-12);
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("cross_entropy examples") {
  Tape t;
  LabelMap labels(2, 2, std::vector<int>{0, 1, 2, 1});
  Tensor onehot({2, 2, 3}, 0.0);
  for (std::size_t z = 0; z < 4; ++z) onehot[z * 3 + static_cast<std::size_t>(labels[z])] = 1.0;
  CHECK(t.value(t.cross_entropy(t.leaf(onehot), labels))[0] == 0.0);

  Var uniform = t.leaf(Tensor({2, 2, 3}, 1.0 / 3.0));
  CHECK(t.value(t.cross_entropy(uniform, labels))[0] == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  Rng rng(4);
  Tensor p = testutil::random_field(2, 2, 3, rng).tensor();
  double expect = 0.0;
  for (std::size_t z = 0; z < 4; ++z) expect -= std::log(p[z * 3 + static_cast<std::size_t>(labels[z])]);
  expect /= 4.0;
  CHECK(std::abs(t.value(t.cross_entropy(t.leaf(p), labels))[0] - expect) < 1e-14);
}

TEST_CASE("cross_entropy clamps log(0) at 1e-12") {
  Tape t;
  Tensor p({1, 1, 2}, std::vector<double>{1.0, 0.0});
  const double loss = t.value(t.cross_entropy(t.leaf(p), LabelMap(1, 1, 1)))[0];
  CHECK(loss == doctest::Approx(-std::log(1e-12)));
  CHECK(std::isfinite(loss));
}

TEST_CASE("cross_entropy mask restricts the mean") {
  Rng rng(8);
  Tensor p = testutil::random_field(2, 2, 3, rng).tensor();
  LabelMap labels(2, 2, std::vector<int>{2, 0, 1, 1});
  std::vector<unsigned char> mask{1, 0, 0, 1};
  Tape t;
  const double got = t.value(t.cross_entropy(t.leaf(p), labels, &mask))[0];
  const double expect = -(std::log(p[0 * 3 + 2]) + std::log(p[3 * 3 + 1])) / 2.0;
  CHECK(std::abs(got - expect) < 1e-14);
  std::vector<unsigned char> none(4, 0);
  CHECK(t.value(t.cross_entropy(t.leaf(p), labels, &none))[0] == 0.0);
}

TEST_CASE("softmax + cross entropy gradient reaches the logits") {
  Rng rng(31);
  Tensor logits = random_tensor({3, 3, 4}, rng, -3.0, 3.0);
  LabelMap labels(3, 3);
  for (std::size_t z = 0; z < 9; ++z) labels[z] = static_cast<int>(rng.uniform_int(0, 3));
  std::vector<unsigned char> mask{1, 1, 0, 1, 0, 1, 1, 1, 0};
  for (const auto* m : {static_cast<std::vector<unsigned char>*>(nullptr), &mask}) {
    Tape t;
    Var v = t.leaf(logits, true);
    t.backward(t.cross_entropy(t.pixel_softmax(v), labels, m));
    auto f = [&] {
      Tape u;
      return u.value(u.cross_entropy(u.pixel_softmax(u.leaf(logits)), labels, m))[0];
    };
    for (std::size_t i = 0; i < logits.size(); ++i) {
      CHECK(rel_error(t.grad(v)[i], central_difference(logits, i, f)) <= 1e-6);
    }
  }
}

TEST_CASE("backward basics") {
  Rng rng(2);
  Tensor x = random_tensor({6}, rng);
  Tape t;
  Var v = t.leaf(x, true);
  t.backward(t.sum(v));
  CHECK(t.grad(v) == Tensor({6}, 1.0));

  Tape q;
  Var w = q.leaf(x, true);
  q.backward(q.scale(q.sum(q.mul(w, w)), 0.5));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(q.grad(w)[i] == doctest::Approx(x[i]));

  Tape e;
  Var nz = e.leaf(x, true);
  CHECK_THROWS_AS(e.backward(nz), ShapeError);
}

TEST_CASE("unreached leaves get zero gradients and repeated backward is stable") {
  Tape t;
  Var a = t.leaf(Tensor({2}, 1.0), true);
  Var b = t.leaf(Tensor({2}, 3.0), true);
  Var loss = t.sum(t.scale(a, 2.0));
  t.backward(loss);
  CHECK(t.grad(b) == Tensor({2}, 0.0));
  const Tensor first = t.grad(a);
  t.backward(loss);
  CHECK(t.grad(a) == first);
}

TEST_CASE("dense, pooling, sigmoid and bce gradients") {
  Rng rng(17);
  Tensor x = random_tensor({4, 3, 5}, rng);
  Tensor w = random_tensor({5, 2}, rng);
  Tensor b = random_tensor({2}, rng);
  Tensor w2 = random_tensor({2, 1}, rng);
  Tensor b2 = random_tensor({1}, rng);
  auto build = [&](Tape& t, Var vx, Var vw, Var vb) {
    Var h = t.sigmoid(t.dense(t.global_avg_pool(vx), vw, vb));
    Var z = t.dense(h, t.leaf(w2), t.leaf(b2));
    return t.add(t.bce_with_logit(z, 1.0), t.bce_with_logit(z, 0.0));
  };
  Tape t;
  Var vx = t.leaf(x, true), vw = t.leaf(w, true), vb = t.leaf(b, true);
  t.backward(build(t, vx, vw, vb));
  auto f = [&] {
    Tape u;
    return u.value(build(u, u.leaf(x), u.leaf(w), u.leaf(b)))[0];
  };
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(rel_error(t.grad(vx)[i], central_difference(x, i, f)) <= 1e-6);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(rel_error(t.grad(vw)[i], central_difference(w, i, f)) <= 1e-6);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(rel_error(t.grad(vb)[i], central_difference(b, i, f)) <= 1e-6);
}

TEST_CASE("bce_with_logit is softplus(z) - target * z without overflow") {
  Tape t;
  CHECK(t.value(t.bce_with_logit(t.leaf(Tensor::scalar(0.0)), 1.0))[0] == doctest::Approx(std::log(2.0)));
  const double big = t.value(t.bce_with_logit(t.leaf(Tensor::scalar(800.0)), 0.0))[0];
  CHECK(big == doctest::Approx(800.0));
  CHECK(t.value(t.bce_with_logit(t.leaf(Tensor::scalar(-800.0)), 0.0))[0] == doctest::Approx(0.0));
}
