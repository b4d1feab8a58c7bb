#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advseg/tensor.hpp"

namespace advseg {

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 3;
  std::size_t num_classes = 5;
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 6;
  double noise_std = 0.05;
  std::uint64_t seed = 7;

  void validate() const;
};

enum class ShapeKind { rectangle, circle, triangle };

/// Geometry of one rendered shape, in pixel coordinates. A pixel belongs
/// to the shape when its centre (y + 0.5, x + 0.5) lies inside.
///  rectangle: params = {top, left, bottom, right}
///  circle:    params = {centre_y, centre_x, radius}
///  triangle:  params = {y0, x0, y1, x1, y2, x2}
struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  int class_id = 1;
  std::vector<double> params;

  bool contains(double py, double px) const;
  friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

struct LabeledImage {
  Tensor image;  // H x W x channels, values in [0, 1]
  LabelMap labels;
  std::vector<ShapeSpec> shapes;  // in paint order; later shapes occlude
};

using Dataset = std::vector<LabeledImage>;

/// Base colour of a class; identical across images.
std::vector<double> class_color(int class_id, std::size_t channels);

Dataset generate_dataset(const SceneConfig& config, std::size_t count);

/// Re-rasterizes shapes over background in paint order.
LabelMap rasterize_labels(std::size_t height, std::size_t width, const std::vector<ShapeSpec>& shapes);

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// 70/15/15 split by index order.
SplitIndices split_indices(std::size_t count);

nlohmann::json to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const nlohmann::json& j);

/// Writes manifest.json plus one SSTN1 file per image and label map.
/// `extra` is merged into the manifest root (used for provenance).
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset,
                  const nlohmann::json& extra = nlohmann::json::object());
Dataset load_dataset(const std::filesystem::path& dir);
nlohmann::json load_manifest(const std::filesystem::path& dir);

}  // namespace advseg
