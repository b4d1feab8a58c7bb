#include "advseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "advseg/errors.hpp"
#include "advseg/rng.hpp"

namespace advseg {
namespace {

void require_both_classes(const std::vector<ScoredSample>& s, const char* what) {
  bool b = false, p = false;
  for (const auto& x : s) {
    if (!std::isfinite(x.d)) throw NumericError(std::string(what) + ": non-finite score");
    (x.truth == Truth::benign ? b : p) = true;
  }
  if (!b || !p) throw ConfigError(std::string(what) + ": needs both benign and perturbed samples");
}

}  // namespace

double apsr(const LabelMap& predictions, const LabelMap& labels) {
  return apsr(std::vector<LabelMap>{predictions}, std::vector<LabelMap>{labels});
}

double apsr(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& labels) {
  if (predictions.size() != labels.size()) throw ShapeError("apsr: list length mismatch");
  std::size_t wrong = 0, total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i].height() != labels[i].height() || predictions[i].width() != labels[i].width()) {
      throw ShapeError("apsr: prediction/label shape mismatch");
    }
    for (std::size_t z = 0; z < labels[i].size(); ++z) wrong += predictions[i][z] != labels[i][z];
    total += labels[i].size();
  }
  if (total == 0) throw ShapeError("apsr: empty label map");
  return static_cast<double>(wrong) / static_cast<double>(total);
}

std::vector<double> threshold_grid() {
  std::vector<double> g(40);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i) / 39.0;
  return g;
}

double ada(const std::vector<ScoredSample>& samples, double tau) {
  if (samples.empty()) throw ConfigError("ada: no samples");
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const bool says_benign = s.d >= tau;
    correct += says_benign == (s.truth == Truth::benign);
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

double ada_star(const std::vector<ScoredSample>& samples) {
  double best = 0.0;
  for (double tau : threshold_grid()) best = std::max(best, ada(samples, tau));
  return best;
}

double auroc(const std::vector<ScoredSample>& samples) {
  require_both_classes(samples, "auroc");
  std::vector<double> benign, perturbed;
  for (const auto& s : samples) (s.truth == Truth::benign ? benign : perturbed).push_back(s.d);
  double wins = 0.0;
  for (double b : benign) {
    for (double p : perturbed) {
      if (b > p) wins += 1.0;
      else if (b == p) wins += 0.5;
    }
  }
  return wins / (static_cast<double>(benign.size()) * static_cast<double>(perturbed.size()));
}

double tpr_at_fpr(const std::vector<ScoredSample>& samples, double fpr_cap) {
  require_both_classes(samples, "tpr_at_fpr");
  std::vector<double> benign, perturbed;
  for (const auto& s : samples) (s.truth == Truth::benign ? benign : perturbed).push_back(s.d);
  std::sort(benign.begin(), benign.end());
  // At most `allowed` benign scores may fall strictly below tau, so the
  // largest feasible tau is the (allowed+1)-th smallest benign score.
  const auto allowed = static_cast<std::size_t>(std::floor(fpr_cap * static_cast<double>(benign.size()) + 1e-9));
  const double tau = allowed < benign.size() ? benign[allowed] : 1.0;
  std::size_t hits = 0;
  for (double p : perturbed) hits += p < tau;
  return static_cast<double>(hits) / static_cast<double>(perturbed.size());
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

FoldMetrics evaluate_scores(const std::vector<ScoredSample>& samples) {
  FoldMetrics m;
  m.ada_star = ada_star(samples);
  m.auroc = auroc(samples);
  m.tpr5 = tpr_at_fpr(samples, 0.05);
  return m;
}

std::vector<std::vector<std::size_t>> make_folds(const std::vector<CvSample>& samples, std::size_t k,
                                                 std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  // group -> (has benign, has perturbed)
  std::map<std::size_t, std::pair<bool, bool>> groups;
  for (const auto& s : samples) {
    auto& g = groups[s.group];
    (s.truth == Truth::benign ? g.first : g.second) = true;
  }
  std::vector<std::vector<std::size_t>> strata(3);
  for (const auto& [id, comp] : groups) {
    const std::size_t stratum = comp.first && comp.second ? 0 : (comp.first ? 1 : 2);
    strata[stratum].push_back(id);
  }
  Rng rng(seed);
  std::map<std::size_t, std::size_t> fold_of;
  std::size_t next = 0;
  for (auto& stratum : strata) {
    rng.shuffle(stratum);
    for (std::size_t id : stratum) fold_of[id] = next++ % k;
  }
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < samples.size(); ++i) folds[fold_of[samples[i].group]].push_back(i);
  for (std::size_t f = 0; f < k; ++f) {
    bool b = false, p = false;
    for (std::size_t i : folds[f]) (samples[i].truth == Truth::benign ? b : p) = true;
    if (!b || !p) throw ConfigError("cross-validation fold " + std::to_string(f) + " lacks one class");
  }
  return folds;
}

CvReport cross_validate(const std::vector<CvSample>& samples, std::size_t k, std::uint64_t seed,
                        const FoldScorer& scorer) {
  CvReport report;
  report.folds = make_folds(samples, k, seed);
  std::vector<double> a, r, t;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> fit;
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) fit.insert(fit.end(), report.folds[g].begin(), report.folds[g].end());
    }
    std::sort(fit.begin(), fit.end());
    const auto& eval = report.folds[f];
    std::vector<double> d = scorer(f, fit, eval);
    if (d.size() != eval.size()) throw ConfigError("cross_validate: scorer returned wrong number of scores");
    std::vector<ScoredSample> scored;
    for (std::size_t i = 0; i < eval.size(); ++i) scored.push_back({d[i], samples[eval[i]].truth});
    FoldMetrics m = evaluate_scores(scored);
    m.fold = f;
    report.per_fold.push_back(m);
    report.fold_scores.push_back(std::move(d));
    a.push_back(m.ada_star);
    r.push_back(m.auroc);
    t.push_back(m.tpr5);
  }
  report.ada_star = mean_std(a);
  report.auroc = mean_std(r);
  report.tpr5 = mean_std(t);
  return report;
}

}  // namespace advseg
