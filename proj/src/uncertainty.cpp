#include "advseg/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "advseg/errors.hpp"

namespace advseg {
namespace {

struct TopTwo {
  std::size_t best = 0;
  double first = 0.0;
  double second = 0.0;
};

TopTwo top_two(std::span<const double> p) {
  TopTwo t;
  t.first = p[0];
  t.second = -1.0;
  for (std::size_t k = 1; k < p.size(); ++k) {
    if (p[k] > t.first) {
      t.second = t.first;
      t.first = p[k];
      t.best = k;
    } else if (p[k] > t.second) {
      t.second = p[k];
    }
  }
  return t;
}

Tensor blank(const SoftmaxField& probs) { return Tensor({probs.height(), probs.width()}, 0.0); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Heatmap entropy_heatmap(const SoftmaxField& probs) {
  Heatmap h{HeatmapKind::entropy, blank(probs)};
  const double norm = 1.0 / std::log(static_cast<double>(probs.num_classes()));
  for (std::size_t z = 0; z < probs.num_pixels(); ++z) {
    double s = 0.0;
    for (double p : probs.pixel(z)) {
      if (p > 0.0) s -= p * std::log(p);
    }
    h.values[z] = std::clamp(s * norm, 0.0, 1.0);
  }
  return h;
}

Heatmap variation_ratio_heatmap(const SoftmaxField& probs) {
  Heatmap h{HeatmapKind::variation_ratio, blank(probs)};
  for (std::size_t z = 0; z < probs.num_pixels(); ++z) h.values[z] = 1.0 - top_two(probs.pixel(z)).first;
  return h;
}

Heatmap probability_margin_heatmap(const SoftmaxField& probs) {
  Heatmap h{HeatmapKind::probability_margin, blank(probs)};
  for (std::size_t z = 0; z < probs.num_pixels(); ++z) {
    const TopTwo t = top_two(probs.pixel(z));
    h.values[z] = t.first - t.second;
  }
  return h;
}

std::vector<double> UncertaintyFeatures::as_vector() const {
  std::vector<double> v{mean_entropy, mean_variation_ratio, mean_margin};
  v.insert(v.end(), class_mean_probs.begin(), class_mean_probs.end());
  return v;
}

UncertaintyFeatures UncertaintyFeatures::from_vector(const std::vector<double>& v) {
  if (v.size() < 5) throw ShapeError("feature vector needs |C| + 3 >= 5 entries");
  UncertaintyFeatures f;
  f.mean_entropy = v[0];
  f.mean_variation_ratio = v[1];
  f.mean_margin = v[2];
  f.class_mean_probs.assign(v.begin() + 3, v.end());
  return f;
}

UncertaintyFeatures aggregate_features(const SoftmaxField& probs) {
  const auto e = entropy_heatmap(probs);
  const auto v = variation_ratio_heatmap(probs);
  const auto m = probability_margin_heatmap(probs);
  const std::size_t n = probs.num_pixels();
  const std::size_t c = probs.num_classes();
  UncertaintyFeatures f;
  f.class_mean_probs.assign(c, 0.0);
  for (std::size_t z = 0; z < n; ++z) {
    f.mean_entropy += e.values[z];
    f.mean_variation_ratio += v.values[z];
    f.mean_margin += m.values[z];
    auto p = probs.pixel(z);
    for (std::size_t k = 0; k < c; ++k) f.class_mean_probs[k] += p[k];
  }
  const double inv = 1.0 / static_cast<double>(n);
  f.mean_entropy *= inv;
  f.mean_variation_ratio *= inv;
  f.mean_margin *= inv;
  for (auto& p : f.class_mean_probs) p *= inv;
  return f;
}

std::string features_csv_header(std::size_t num_classes) {
  std::string s = "image_id,attack,mean_entropy,mean_variation_ratio,mean_margin";
  for (std::size_t k = 0; k < num_classes; ++k) s += ",mean_prob_" + std::to_string(k);
  return s;
}

std::string features_csv_row(std::size_t image_id, const std::string& attack, const UncertaintyFeatures& f) {
  std::string s = std::to_string(image_id) + "," + attack;
  for (double v : f.as_vector()) s += "," + fmt(v);
  return s;
}

}  // namespace advseg
