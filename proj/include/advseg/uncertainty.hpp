#pragma once

#include <string>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg {

enum class HeatmapKind { entropy, variation_ratio, probability_margin };

struct Heatmap {
  HeatmapKind kind = HeatmapKind::entropy;
  Tensor values;  // H x W

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

/// Normalized entropy -sum p log p / log|C|, with 0 log 0 = 0.
Heatmap entropy_heatmap(const SoftmaxField& probs);
/// 1 - max_y p(y).
Heatmap variation_ratio_heatmap(const SoftmaxField& probs);
/// Top-1 minus top-2 probability.
Heatmap probability_margin_heatmap(const SoftmaxField& probs);

/// Image-level aggregates: the pixel means of the three heatmaps followed
/// by the pixel mean of every softmax channel.
struct UncertaintyFeatures {
  double mean_entropy = 0.0;
  double mean_variation_ratio = 0.0;
  double mean_margin = 0.0;
  std::vector<double> class_mean_probs;

  /// [E, V, M, p_0, ..., p_{|C|-1}]
  std::vector<double> as_vector() const;
  static UncertaintyFeatures from_vector(const std::vector<double>& v);
};

UncertaintyFeatures aggregate_features(const SoftmaxField& probs);

std::string features_csv_header(std::size_t num_classes);
/// "image_id,attack,E,V,M,p0,...": one CSV row without trailing newline.
std::string features_csv_row(std::size_t image_id, const std::string& attack, const UncertaintyFeatures& f);

}  // namespace advseg
