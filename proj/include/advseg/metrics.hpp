#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

enum class Truth { benign, perturbed };

/// A detector score d (probability of being benign) with its ground truth.
struct ScoredSample {
  double d = 0.0;
  Truth truth = Truth::benign;
};

/// Fraction of pixels whose prediction differs from the label.
double apsr(const LabelMap& predictions, const LabelMap& labels);
/// Pixel-pooled APSR over a set of images.
double apsr(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& labels);

/// The 40 thresholds i / 39, i = 0..39.
std::vector<double> threshold_grid();

/// Share of samples classified correctly at tau: benign iff d >= tau.
double ada(const std::vector<ScoredSample>& samples, double tau);
double ada_star(const std::vector<ScoredSample>& samples);

/// Mann-Whitney estimate P(d_benign > d_perturbed) + P(tie) / 2.
double auroc(const std::vector<ScoredSample>& samples);

/// Perturbed images are positives. Picks the largest tau whose benign
/// false-positive rate (benign with d < tau) stays <= fpr_cap and returns
/// the share of perturbed images with d < tau.
double tpr_at_fpr(const std::vector<ScoredSample>& samples, double fpr_cap = 0.05);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
};
MeanStd mean_std(const std::vector<double>& values);

struct FoldMetrics {
  std::size_t fold = 0;
  double ada_star = 0.0;
  double auroc = 0.0;
  double tpr5 = 0.0;
};

FoldMetrics evaluate_scores(const std::vector<ScoredSample>& samples);

/// One sample in a cross-validation: samples sharing a group (an image and
/// its attacked counterparts) always land in the same fold.
struct CvSample {
  std::size_t group = 0;
  Truth truth = Truth::benign;
};

/// Stratified k-fold partition over groups: groups are split into strata by
/// class composition, shuffled with `seed`, and dealt round-robin. Returns
/// sample indices per fold. Throws ConfigError when a fold misses a class.
std::vector<std::vector<std::size_t>> make_folds(const std::vector<CvSample>& samples, std::size_t k,
                                                 std::uint64_t seed);

/// Returns d for each `eval` sample after fitting on the `fit` samples.
using FoldScorer = std::function<std::vector<double>(std::size_t fold, const std::vector<std::size_t>& fit,
                                                     const std::vector<std::size_t>& eval)>;

struct CvReport {
  std::vector<std::vector<std::size_t>> folds;
  std::vector<FoldMetrics> per_fold;
  std::vector<std::vector<double>> fold_scores;  // aligned with folds
  MeanStd ada_star, auroc, tpr5;
};

CvReport cross_validate(const std::vector<CvSample>& samples, std::size_t k, std::uint64_t seed,
                        const FoldScorer& scorer);

}  // namespace advseg
