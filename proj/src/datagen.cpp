#include "advseg/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "advseg/errors.hpp"
#include "advseg/rng.hpp"
#include "advseg/serialize.hpp"

namespace advseg {
namespace {

using nlohmann::json;

constexpr std::size_t kMinShapePixels = 6;

const char* kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::circle: return "circle";
    case ShapeKind::triangle: return "triangle";
  }
  return "rectangle";
}

ShapeKind kind_from_name(const std::string& s) {
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "circle") return ShapeKind::circle;
  if (s == "triangle") return ShapeKind::triangle;
  throw FormatError("unknown shape kind '" + s + "'");
}

double edge(double ay, double ax, double by, double bx, double py, double px) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

ShapeSpec random_shape(Rng& rng, const SceneConfig& cfg) {
  const double h = static_cast<double>(cfg.height);
  const double w = static_cast<double>(cfg.width);
  const double unit = std::min(h, w) / 64.0;
  ShapeSpec s;
  s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  s.class_id = static_cast<int>(rng.uniform_int(1, static_cast<std::int64_t>(cfg.num_classes) - 1));
  switch (s.kind) {
    case ShapeKind::rectangle: {
      const double sh = std::min(h, rng.uniform(10.0, 28.0) * unit);
      const double sw = std::min(w, rng.uniform(10.0, 28.0) * unit);
      const double top = rng.uniform(0.0, h - sh);
      const double left = rng.uniform(0.0, w - sw);
      s.params = {top, left, top + sh, left + sw};
      break;
    }
    case ShapeKind::circle: {
      const double r = std::min(std::min(h, w) / 2.0, rng.uniform(6.0, 14.0) * unit);
      s.params = {rng.uniform(r, h - r), rng.uniform(r, w - r), r};
      break;
    }
    case ShapeKind::triangle: {
      const double r = std::min(std::min(h, w) / 2.0, rng.uniform(9.0, 18.0) * unit);
      const double cy = rng.uniform(r, h - r);
      const double cx = rng.uniform(r, w - r);
      const double a0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
      s.params.reserve(6);
      for (int v = 0; v < 3; ++v) {
        const double a = a0 + v * 2.0 * std::numbers::pi / 3.0 + rng.uniform(-0.4, 0.4);
        s.params.push_back(cy + r * std::sin(a));
        s.params.push_back(cx + r * std::cos(a));
      }
      break;
    }
  }
  return s;
}

std::size_t pixel_count(const ShapeSpec& s, std::size_t height, std::size_t width) {
  std::size_t n = 0;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      if (s.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) ++n;
    }
  }
  return n;
}

json shape_to_json(const ShapeSpec& s) {
  return json{{"kind", kind_name(s.kind)}, {"class", s.class_id}, {"params", s.params}};
}

ShapeSpec shape_from_json(const json& j) {
  ShapeSpec s;
  s.kind = kind_from_name(j.at("kind").get<std::string>());
  s.class_id = j.at("class").get<int>();
  s.params = j.at("params").get<std::vector<double>>();
  const std::size_t expected = s.kind == ShapeKind::rectangle ? 4 : s.kind == ShapeKind::circle ? 3 : 6;
  if (s.params.size() != expected) throw FormatError("shape has wrong parameter count");
  return s;
}

std::string entry_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.sstn", prefix, i);
  return buf;
}

}  // namespace

void SceneConfig::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("scene config: zero-area image");
  if (num_classes < 3) throw ConfigError("scene config: need at least 3 classes (background + 2 shapes)");
  if (min_shapes > max_shapes) throw ConfigError("scene config: min_shapes > max_shapes");
  if (!(noise_std >= 0.0)) throw ConfigError("scene config: noise_std must be >= 0");
}

bool ShapeSpec::contains(double py, double px) const {
  const auto& p = params;
  switch (kind) {
    case ShapeKind::rectangle:
      return py >= p[0] && py < p[2] && px >= p[1] && px < p[3];
    case ShapeKind::circle: {
      const double dy = py - p[0], dx = px - p[1];
      return dy * dy + dx * dx <= p[2] * p[2];
    }
    case ShapeKind::triangle: {
      const double e0 = edge(p[0], p[1], p[2], p[3], py, px);
      const double e1 = edge(p[2], p[3], p[4], p[5], py, px);
      const double e2 = edge(p[4], p[5], p[0], p[1], py, px);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

std::vector<double> class_color(int class_id, std::size_t channels) {
  static constexpr std::array<std::array<double, 3>, 8> kPalette = {{
      {0.50, 0.50, 0.50},
      {0.72, 0.36, 0.34},
      {0.36, 0.66, 0.40},
      {0.38, 0.42, 0.72},
      {0.70, 0.66, 0.34},
      {0.34, 0.66, 0.70},
      {0.66, 0.40, 0.66},
      {0.28, 0.30, 0.30},
  }};
  std::vector<double> c(channels);
  for (std::size_t k = 0; k < channels; ++k) {
    if (class_id < static_cast<int>(kPalette.size())) {
      c[k] = kPalette[static_cast<std::size_t>(class_id)][k % 3];
    } else {
      // golden-angle walk for classes past the palette
      const double phase = class_id * 2.39996323 + static_cast<double>(k) * 2.0 * std::numbers::pi / 3.0;
      c[k] = 0.5 + 0.22 * std::cos(phase);
    }
  }
  return c;
}

LabelMap rasterize_labels(std::size_t height, std::size_t width, const std::vector<ShapeSpec>& shapes) {
  LabelMap labels(height, width, 0);
  for (const auto& s : shapes) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        if (s.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) labels.at(y, x) = s.class_id;
      }
    }
  }
  return labels;
}

Dataset generate_dataset(const SceneConfig& config, std::size_t count) {
  config.validate();
  if (count == 0) throw ConfigError("generate_dataset: count must be >= 1");
  Rng rng(config.seed);
  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    LabeledImage item;
    const auto n_shapes = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(config.min_shapes), static_cast<std::int64_t>(config.max_shapes)));
    while (item.shapes.size() < n_shapes) {
      ShapeSpec s = random_shape(rng, config);
      if (pixel_count(s, config.height, config.width) >= kMinShapePixels) item.shapes.push_back(std::move(s));
    }
    item.labels = rasterize_labels(config.height, config.width, item.shapes);
    item.image = Tensor({config.height, config.width, config.channels});
    std::vector<std::vector<double>> colors;
    for (std::size_t c = 0; c < config.num_classes; ++c) colors.push_back(class_color(static_cast<int>(c), config.channels));
    for (std::size_t z = 0; z < item.labels.size(); ++z) {
      const auto& col = colors[static_cast<std::size_t>(item.labels[z])];
      for (std::size_t k = 0; k < config.channels; ++k) {
        double v = col[k];
        if (config.noise_std > 0.0) v += config.noise_std * rng.normal();
        item.image[z * config.channels + k] = std::clamp(v, 0.0, 1.0);
      }
    }
    out.push_back(std::move(item));
  }
  return out;
}

SplitIndices split_indices(std::size_t count) {
  SplitIndices s;
  const std::size_t n_train = count * 70 / 100;
  const std::size_t n_val = count * 85 / 100 - n_train;
  for (std::size_t i = 0; i < count; ++i) {
    if (i < n_train) s.train.push_back(i);
    else if (i < n_train + n_val) s.val.push_back(i);
    else s.test.push_back(i);
  }
  return s;
}

json to_json(const SceneConfig& c) {
  return json{{"height", c.height},         {"width", c.width},         {"channels", c.channels},
              {"num_classes", c.num_classes}, {"min_shapes", c.min_shapes}, {"max_shapes", c.max_shapes},
              {"noise_std", c.noise_std},   {"seed", c.seed}};
}

SceneConfig scene_config_from_json(const json& j) {
  SceneConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.min_shapes = j.value("min_shapes", c.min_shapes);
  c.max_shapes = j.value("max_shapes", c.max_shapes);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.seed = j.value("seed", c.seed);
  return c;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, const json& extra) {
  std::filesystem::create_directories(dir);
  json entries = json::array();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& item = dataset[i];
    const std::string img = entry_name("img", i);
    const std::string lbl = entry_name("lbl", i);
    save_tensor(dir / img, item.image);
    save_tensor(dir / lbl, item.labels.to_tensor());
    json e{{"image", img}, {"labels", lbl}};
    json shapes = json::array();
    for (const auto& s : item.shapes) shapes.push_back(shape_to_json(s));
    e["shapes"] = std::move(shapes);
    entries.push_back(std::move(e));
  }
  json manifest{{"format", "advseg-dataset"}, {"version", 1}, {"count", dataset.size()}, {"entries", entries}};
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

json load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw PathError("no dataset manifest at " + path.string());
  json m;
  try {
    m = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError("corrupt manifest " + path.string() + ": " + e.what());
  }
  if (m.value("format", "") != "advseg-dataset" || m.value("version", 0) != 1) {
    throw FormatError("unsupported manifest format in " + path.string());
  }
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const json m = load_manifest(dir);
  Dataset out;
  try {
    const auto& entries = m.at("entries");
    if (entries.size() != m.at("count").get<std::size_t>()) throw FormatError("manifest count mismatch");
    for (const auto& e : entries) {
      LabeledImage item;
      item.image = load_tensor(dir / e.at("image").get<std::string>());
      item.labels = LabelMap::from_tensor(load_tensor(dir / e.at("labels").get<std::string>()));
      if (item.image.rank() != 3 || item.image.dim(0) != item.labels.height() ||
          item.image.dim(1) != item.labels.width()) {
        throw FormatError("image/label shape mismatch in " + dir.string());
      }
      if (e.contains("shapes")) {
        for (const auto& s : e["shapes"]) item.shapes.push_back(shape_from_json(s));
      }
      out.push_back(std::move(item));
    }
  } catch (const json::exception& ex) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + ex.what());
  }
  return out;
}

}  // namespace advseg
