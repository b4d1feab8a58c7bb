#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "advseg/tensor.hpp"
#include "advseg/uncertainty.hpp"

namespace advseg {

enum class DetectorVariant { entropy, ocsvm, ellipse, crossa, heatmap };

std::string to_string(DetectorVariant v);
DetectorVariant detector_variant_from_string(const std::string& s);
bool is_supervised(DetectorVariant v);

/// Per-feature z-scoring fitted on detector training data. Features with
/// zero spread keep unit scale.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const std::vector<std::vector<double>>& rows);
  std::vector<double> apply(const std::vector<double>& x) const;
};

struct EntropyParams {
  double min_entropy = 0.0;
  double max_entropy = 0.0;
};

struct OcsvmParams {
  double gamma = 0.0;
  double nu = 0.1;
  double rho = 0.0;
  double scale = 1.0;  // calibration: d = logistic(raw / scale)
  std::vector<std::vector<double>> support;  // standardized support vectors
  std::vector<double> coef;
};

struct EllipseParams {
  std::vector<double> location;   // standardized space
  std::vector<double> precision;  // dim x dim, row-major
  double quantile = 0.975;
  double threshold = 0.0;  // chi-square quantile
  double scale = 1.0;      // interquartile range of fit raws
};

struct CrossaParams {
  std::vector<double> weights;  // standardized space
  double intercept = 0.0;
  double lambda = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

struct HeatmapNetParams {
  // conv 3x3 1->c, conv 3x3 c->c, dense c->1
  std::vector<Tensor> tensors;
  double input_mean = 0.0;
  double input_scale = 1.0;
};

/// A fitted detector producing d(x) in [0, 1], the probability that the
/// image is benign.
class DetectorModel {
 public:
  using Params = std::variant<EntropyParams, OcsvmParams, EllipseParams, CrossaParams, HeatmapNetParams>;

  DetectorModel() = default;
  DetectorModel(DetectorVariant variant, Standardizer standardizer, Params params)
      : variant_(variant), standardizer_(std::move(standardizer)), params_(std::move(params)) {}

  DetectorVariant variant() const { return variant_; }
  const Standardizer& standardizer() const { return standardizer_; }
  const Params& params() const { return params_; }
  bool consumes_heatmaps() const { return variant_ == DetectorVariant::heatmap; }

  /// Raw decision value before calibration (larger = more benign).
  double raw_score(const UncertaintyFeatures& features) const;
  double score(const UncertaintyFeatures& features) const;
  double score(const Heatmap& heatmap) const;

  nlohmann::json to_json() const;
  static DetectorModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DetectorModel load(const std::filesystem::path& path);

 private:
  DetectorVariant variant_ = DetectorVariant::entropy;
  Standardizer standardizer_;
  Params params_;
};

struct Verdict {
  double d = 0.0;
  double tau = 0.5;
  bool perturbed = false;
};

/// perturbed iff d < tau.
Verdict classify(double d, double tau);

/// Thresholds mean entropy: d falls linearly from 1 at the smallest fitted
/// mean entropy to 0 at the largest.
DetectorModel fit_entropy(const std::vector<UncertaintyFeatures>& benign);

struct OcsvmOptions {
  double nu = 0.1;
  double gamma = 0.0;  // <= 0: 1 / (dim * variance of standardized data)
  std::size_t max_iterations = 200000;
  double tolerance = 1e-6;
};

/// One-class SVM with RBF kernel trained on benign data only.
DetectorModel fit_ocsvm(const std::vector<UncertaintyFeatures>& benign, const OcsvmOptions& options = {});

struct EllipseOptions {
  double quantile = 0.975;
  double trim_fraction = 0.25;
  std::size_t rounds = 10;
  double ridge = 1e-6;
};

/// Robust Gaussian envelope: location and scatter re-estimated on the
/// points with the smallest Mahalanobis distances, then thresholded at a
/// chi-square quantile.
DetectorModel fit_ellipse(const std::vector<UncertaintyFeatures>& benign, const EllipseOptions& options = {});

struct CrossaOptions {
  double lambda = 0.01;
  std::size_t max_iterations = 100000;
  double tolerance = 1e-10;
};

/// L1-penalized logistic regression (benign = 1) fitted by proximal
/// gradient descent on standardized features.
DetectorModel fit_crossa(const std::vector<UncertaintyFeatures>& benign,
                         const std::vector<UncertaintyFeatures>& adversarial, const CrossaOptions& options = {});

/// Objective minimized by fit_crossa, evaluated in standardized space:
/// mean logistic loss + lambda * ||w||_1.
double crossa_objective(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                        const std::vector<double>& w, double b, double lambda);

struct HeatmapTrainConfig {
  std::size_t channels = 8;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 11;
};

/// Shallow CNN on entropy heatmaps: two 3x3 conv + ReLU layers, global
/// average pooling and a logistic output.
DetectorModel fit_heatmap_cnn(const std::vector<Heatmap>& benign, const std::vector<Heatmap>& adversarial,
                              const HeatmapTrainConfig& config = {});

}  // namespace advseg
