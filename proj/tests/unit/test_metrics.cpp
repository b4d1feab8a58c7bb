#include <doctest.h>

#include <algorithm>
#include <set>

#include "advseg/errors.hpp"
#include "advseg/metrics.hpp"
#include "helpers.hpp"

using namespace advseg;

namespace {

std::vector<ScoredSample> random_samples(Rng& rng, std::size_t n, bool ties) {
  std::vector<ScoredSample> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i].truth = i % 2 ? Truth::perturbed : Truth::benign;
    s[i].d = ties ? static_cast<double>(rng.uniform_int(0, 8)) / 8.0 : rng.uniform();
    if (s[i].truth == Truth::benign) s[i].d = std::min(1.0, s[i].d + 0.1 * rng.uniform());
  }
  return s;
}

/// Area under the ROC curve (benign as the positive class) by the
/// trapezoidal rule over all distinct thresholds.
double trapezoid_auroc(const std::vector<ScoredSample>& s) {
  std::set<double, std::greater<>> thresholds;
  double nb = 0, np = 0;
  for (const auto& x : s) {
    thresholds.insert(x.d);
    (x.truth == Truth::benign ? nb : np) += 1;
  }
  double area = 0.0, prev_tpr = 0.0, prev_fpr = 0.0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (const auto& x : s) {
      if (x.d >= t) (x.truth == Truth::benign ? tp : fp) += 1;
    }
    const double tpr = tp / nb, fpr = fp / np;
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  return area;
}

}  // namespace

TEST_CASE("APSR examples") {
  const LabelMap l(2, 2, std::vector<int>{0, 1, 2, 3});
  CHECK(apsr(l, l) == 0.0);
  CHECK(apsr(LabelMap(2, 2, std::vector<int>{1, 2, 3, 0}), l) == 1.0);
  CHECK(apsr(LabelMap(2, 2, std::vector<int>{0, 1, 2, 0}), l) == 0.25);
  CHECK_THROWS_AS(apsr(LabelMap(0, 0), LabelMap(0, 0)), ShapeError);
  CHECK_THROWS_AS(apsr(LabelMap(1, 2), LabelMap(2, 1)), ShapeError);
}

TEST_CASE("threshold grid is the closed 40-point linspace") {
  const auto g = threshold_grid();
  REQUIRE(g.size() == 40);
  CHECK(g.front() == 0.0);
  CHECK(g.back() == 1.0);
}

TEST_CASE("ADA examples") {
  const std::vector<ScoredSample> perfect{{1.0, Truth::benign}, {0.0, Truth::perturbed}};
  CHECK(ada(perfect, 0.5) == 1.0);
  const std::vector<ScoredSample> same{{0.4, Truth::benign}, {0.4, Truth::perturbed}, {0.4, Truth::benign}, {0.4, Truth::perturbed}};
  for (double t : threshold_grid()) CHECK(ada(same, t) == 0.5);
  // hand count at 0.5: benign 0.7 ok, benign 0.2 wrong, perturbed 0.6 wrong, perturbed 0.1 ok
  const std::vector<ScoredSample> four{{0.7, Truth::benign}, {0.2, Truth::benign}, {0.6, Truth::perturbed}, {0.1, Truth::perturbed}};
  CHECK(ada(four, 0.5) == 0.5);
  CHECK(ada({{0.5, Truth::benign}}, 0.5) == 1.0);
  CHECK(ada(four, 0.0) == 0.5);
  CHECK_THROWS(ada({}, 0.5));
}

TEST_CASE("ADA* equals a brute-force grid loop") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = random_samples(rng, 20, trial % 2);
    double best = 0.0;
    for (int i = 0; i < 40; ++i) {
      const double tau = i / 39.0;
      int ok = 0;
      for (const auto& x : s) ok += (x.d >= tau) == (x.truth == Truth::benign);
      best = std::max(best, ok / 20.0);
    }
    CHECK(ada_star(s) == best);
    CHECK(ada_star(s) >= 0.5);
  }
}

TEST_CASE("AuROC: examples and the trapezoidal oracle") {
  CHECK(auroc({{0.9, Truth::benign}, {0.1, Truth::perturbed}}) == 1.0);
  CHECK(auroc({{0.3, Truth::benign}, {0.3, Truth::perturbed}, {0.3, Truth::benign}}) == 0.5);
  CHECK_THROWS_AS(auroc({{0.3, Truth::benign}}), ConfigError);
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_samples(rng, 30, trial % 2);
    CHECK(std::abs(auroc(s) - trapezoid_auroc(s)) <= 1e-12);
  }
}

TEST_CASE("metrics depend only on score order") {
  Rng rng(9);
  const auto s = random_samples(rng, 40, true);
  auto t = s;
  for (auto& x : t) x.d = std::pow(x.d, 3.0);
  CHECK(auroc(t) == auroc(s));
  CHECK(tpr_at_fpr(t) == tpr_at_fpr(s));
  auto flipped = s;
  for (auto& x : flipped) {
    x.d = 1.0 - x.d;
    x.truth = x.truth == Truth::benign ? Truth::perturbed : Truth::benign;
  }
  CHECK(std::abs(auroc(flipped) - auroc(s)) < 1e-15);
}

TEST_CASE("TPR at 5% FPR") {
  CHECK(tpr_at_fpr({{1.0, Truth::benign}, {0.0, Truth::perturbed}}) == 1.0);
  std::vector<ScoredSample> tied(40, {0.5, Truth::benign});
  for (std::size_t i = 0; i < 20; ++i) tied[i].truth = Truth::perturbed;
  CHECK(tpr_at_fpr(tied) == 0.0);

  std::vector<ScoredSample> s;
  for (int i = 0; i < 100; ++i) s.push_back({i / 100.0, Truth::benign});
  for (int i = 0; i < 10; ++i) s.push_back({0.0405 + i * 0.0009, Truth::perturbed});
  // 5 benign scores (0.00-0.04) may sit below tau, so tau = 0.05 and every perturbed score is caught
  CHECK(tpr_at_fpr(s) == 1.0);
  s.push_back({0.05, Truth::perturbed});
  CHECK(tpr_at_fpr(s) == doctest::Approx(10.0 / 11.0));

  Rng rng(10);
  std::vector<ScoredSample> indep;
  for (int i = 0; i < 2000; ++i) indep.push_back({rng.uniform(), i % 2 ? Truth::perturbed : Truth::benign});
  CHECK(std::abs(tpr_at_fpr(indep) - 0.05) <= 0.03);
}

TEST_CASE("mean and sample standard deviation") {
  const MeanStd m = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m.mean == 2.5);
  CHECK(m.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(mean_std({2.0}).std == 0.0);
}

TEST_CASE("folds partition groups and keep pairs together") {
  std::vector<CvSample> s;
  for (std::size_t g = 0; g < 23; ++g) {
    s.push_back({g, Truth::benign});
    s.push_back({g, Truth::perturbed});
  }
  const auto folds = make_folds(s, 5, 1);
  REQUIRE(folds.size() == 5);
  std::vector<int> seen(s.size(), 0);
  for (std::size_t f = 0; f < 5; ++f) {
    CHECK(folds[f].size() >= 8);
    for (std::size_t i : folds[f]) {
      ++seen[i];
      for (std::size_t o = 0; o < 5; ++o) {
        if (o == f) continue;
        for (std::size_t j : folds[o]) CHECK(s[j].group != s[i].group);
      }
    }
  }
  for (int c : seen) CHECK(c == 1);
  CHECK(make_folds(s, 5, 1) == folds);
  CHECK_FALSE(make_folds(s, 5, 2) == folds);

  const std::vector<CvSample> four{{0, Truth::benign}, {1, Truth::perturbed}, {2, Truth::benign}, {3, Truth::perturbed}};
  const auto two = make_folds(four, 2, 3);
  CHECK(two[0].size() == 2);
  CHECK(two[1].size() == 2);
  CHECK_THROWS_AS(make_folds(four, 1, 3), ConfigError);
  const std::vector<CvSample> lonely{{0, Truth::benign}, {1, Truth::benign}, {2, Truth::perturbed}};
  CHECK_THROWS_AS(make_folds(lonely, 2, 3), ConfigError);
}

TEST_CASE("cross-validation scores each sample once and replays exactly") {
  Rng rng(12);
  std::vector<CvSample> s;
  std::vector<double> feature;
  for (std::size_t g = 0; g < 30; ++g) {
    s.push_back({g, Truth::benign});
    feature.push_back(rng.uniform() + 0.3);
    s.push_back({g, Truth::perturbed});
    feature.push_back(rng.uniform());
  }
  // fit: mean of fit benign features; score: logistic distance to it
  auto fit_score = [&](const std::vector<std::size_t>& fit, const std::vector<std::size_t>& eval) {
    double mu = 0.0, n = 0.0;
    for (std::size_t i : fit) {
      if (s[i].truth == Truth::benign) {
        mu += feature[i];
        n += 1.0;
      }
    }
    mu /= n;
    std::vector<double> d;
    for (std::size_t i : eval) d.push_back(1.0 / (1.0 + std::exp(4.0 * std::abs(feature[i] - mu))));
    return d;
  };
  std::vector<int> scored(s.size(), 0);
  const CvReport rep = cross_validate(s, 5, 4, [&](std::size_t, const auto& fit, const auto& eval) {
    for (std::size_t i : eval) ++scored[i];
    for (std::size_t i : fit) CHECK(std::find(eval.begin(), eval.end(), i) == eval.end());
    return fit_score(fit, eval);
  });
  for (int c : scored) CHECK(c == 1);
  REQUIRE(rep.per_fold.size() == 5);
  for (std::size_t f = 0; f < 5; ++f) {
    std::vector<std::size_t> fit;
    for (std::size_t o = 0; o < 5; ++o) {
      if (o != f) fit.insert(fit.end(), rep.folds[o].begin(), rep.folds[o].end());
    }
    std::sort(fit.begin(), fit.end());
    const auto d = fit_score(fit, rep.folds[f]);
    std::vector<ScoredSample> sc;
    for (std::size_t i = 0; i < d.size(); ++i) sc.push_back({d[i], s[rep.folds[f][i]].truth});
    CHECK(ada_star(sc) == rep.per_fold[f].ada_star);
    CHECK(auroc(sc) == rep.per_fold[f].auroc);
    CHECK(tpr_at_fpr(sc) == rep.per_fold[f].tpr5);
  }
  std::vector<double> a;
  for (const auto& m : rep.per_fold) a.push_back(m.auroc);
  CHECK(rep.auroc.mean == mean_std(a).mean);
}
