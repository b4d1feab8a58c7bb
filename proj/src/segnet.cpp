#include "advseg/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "advseg/errors.hpp"
#include "advseg/parallel.hpp"
#include "advseg/rng.hpp"
#include "advseg/serialize.hpp"

namespace advseg {
namespace {

using nlohmann::json;

constexpr const char* kCheckpointFormat = "advseg-checkpoint";
constexpr int kCheckpointVersion = 1;

struct ImageGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

ImageGrad param_gradient(const SegModel& model, const Tensor& image, const LabelMap& labels) {
  Tape tape;
  auto g = model.build(tape, image, false, true);
  Var loss = tape.cross_entropy(g.probs, labels);
  tape.backward(loss);
  ImageGrad out;
  out.loss = tape.value(loss).item();
  for (Var p : g.params) out.grads.push_back(tape.grad(p));
  return out;
}

std::string layer_file(std::size_t i, const char* what) {
  return "layer" + std::to_string(i) + "_" + what + ".sstn";
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train config: momentum must be in [0, 1)");
}

json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  return c;
}

SegModel SegModel::create(std::size_t in_channels, std::size_t num_classes, std::uint64_t seed,
                          std::vector<std::size_t> hidden) {
  if (in_channels == 0 || num_classes < 2) throw ConfigError("SegModel: need >= 1 input channel and >= 2 classes");
  SegModel m;
  m.in_channels_ = in_channels;
  m.num_classes_ = num_classes;
  m.seed_ = seed;
  Rng rng(seed);
  std::size_t cin = in_channels;
  auto add_layer = [&](std::size_t k, std::size_t cout, bool relu) {
    ConvLayer layer;
    layer.kernels = Tensor({k, k, cin, cout});
    const double stddev = std::sqrt(2.0 / static_cast<double>(k * k * cin));
    for (auto& v : layer.kernels.values()) v = stddev * rng.normal();
    layer.bias = Tensor({cout}, 0.0);
    layer.relu = relu;
    m.layers_.push_back(std::move(layer));
    cin = cout;
  };
  for (std::size_t width : hidden) add_layer(3, width, true);
  add_layer(1, num_classes, false);
  return m;
}

std::string SegModel::architecture() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (i) os << ',';
    os << "conv" << l.kernels.dim(0) << 'x' << l.kernels.dim(1) << '-' << l.kernels.dim(3);
    if (l.relu) os << "+relu";
  }
  return os.str();
}

void SegModel::check_input(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(2) != in_channels_) {
    throw ShapeError("model expects H x W x " + std::to_string(in_channels_) + " input, got " +
                     shape_string(image.shape()));
  }
}

SegModel::Graph SegModel::build(Tape& tape, const Tensor& image, bool grad_input, bool grad_params) const {
  check_input(image);
  Graph g;
  g.input = tape.leaf(image, grad_input);
  Var h = g.input;
  for (const auto& layer : layers_) {
    Var k = tape.leaf(layer.kernels, grad_params);
    Var b = tape.leaf(layer.bias, grad_params);
    g.params.push_back(k);
    g.params.push_back(b);
    h = tape.conv2d(h, k, b, 1, layer.kernels.dim(0) / 2);
    if (layer.relu) h = tape.relu(h);
  }
  g.logits = h;
  g.probs = tape.pixel_softmax(h);
  return g;
}

SoftmaxField predict_probs(const SegModel& model, const Tensor& image) {
  Tape tape;
  auto g = model.build(tape, image, false, false);
  return SoftmaxField(tape.value(g.probs));
}

LabelMap predict_labels(const SoftmaxField& probs) {
  LabelMap out(probs.height(), probs.width());
  const std::size_t c = probs.num_classes();
  for (std::size_t z = 0; z < probs.num_pixels(); ++z) {
    auto p = probs.pixel(z);
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (p[k] > p[best]) best = k;
    }
    out[z] = static_cast<int>(best);
  }
  return out;
}

double miou(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& labels) {
  if (predictions.empty() || predictions.size() != labels.size()) {
    throw ShapeError("miou: need equal-length, non-empty prediction and label lists");
  }
  int max_class = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i].height() != labels[i].height() || predictions[i].width() != labels[i].width()) {
      throw ShapeError("miou: prediction/label shape mismatch at index " + std::to_string(i));
    }
    for (int v : labels[i].ids()) max_class = std::max(max_class, v);
    for (int v : predictions[i].ids()) max_class = std::max(max_class, v);
  }
  std::vector<std::size_t> inter(static_cast<std::size_t>(max_class) + 1, 0);
  std::vector<std::size_t> uni(inter.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t z = 0; z < labels[i].size(); ++z) {
      const auto p = static_cast<std::size_t>(predictions[i][z]);
      const auto t = static_cast<std::size_t>(labels[i][z]);
      if (p == t) {
        ++inter[p];
        ++uni[p];
      } else {
        ++uni[p];
        ++uni[t];
      }
    }
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < inter.size(); ++c) {
    if (uni[c] == 0) continue;
    total += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  return total / static_cast<double>(present);
}

LossGradient loss_and_input_gradient(const SegModel& model, const Tensor& image, const LabelMap& labels,
                                     const std::vector<unsigned char>* mask) {
  Tape tape;
  auto g = model.build(tape, image, true, false);
  Var loss = tape.cross_entropy(g.probs, labels, mask);
  tape.backward(loss);
  return {tape.value(loss).item(), tape.grad(g.input)};
}

double model_loss(const SegModel& model, const Tensor& image, const LabelMap& labels) {
  Tape tape;
  auto g = model.build(tape, image, false, false);
  return tape.value(tape.cross_entropy(g.probs, labels)).item();
}

TrainResult train(const Dataset& data, const std::vector<std::size_t>& train_idx,
                  const std::vector<std::size_t>& val_idx, std::size_t num_classes, const TrainConfig& config,
                  const std::function<void(const EpochStats&)>& on_epoch) {
  config.validate();
  if (train_idx.empty()) throw ConfigError("train: empty training split");
  const std::size_t channels = data.at(train_idx.front()).image.dim(2);
  SegModel model = SegModel::create(channels, num_classes, config.seed);
  model.metadata()["train_config"] = to_json(config);

  TrainResult result;
  result.model = model;

  std::vector<Tensor> velocity;
  for (const auto& l : model.layers()) {
    velocity.emplace_back(l.kernels.shape(), 0.0);
    velocity.emplace_back(l.bias.shape(), 0.0);
  }
  Rng order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order = train_idx;
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<ImageGrad> slots(stop - start);
      parallel_for(slots.size(), [&](std::size_t i) {
        const auto& item = data[order[start + i]];
        slots[i] = param_gradient(model, item.image, item.labels);
      });
      const double inv = 1.0 / static_cast<double>(slots.size());
      for (std::size_t p = 0; p < velocity.size(); ++p) {
        auto& layer = model.layers()[p / 2];
        Tensor& param = p % 2 == 0 ? layer.kernels : layer.bias;
        Tensor& vel = velocity[p];
        for (std::size_t i = 0; i < param.size(); ++i) {
          double g = 0.0;
          for (const auto& s : slots) g += s.grads[p][i];
          vel[i] = config.momentum * vel[i] - config.learning_rate * g * inv;
          param[i] += vel[i];
        }
      }
      for (const auto& s : slots) loss_sum += s.loss;
      if (!std::isfinite(loss_sum)) {
        throw NumericError("train: loss diverged in epoch " + std::to_string(epoch));
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    if (!val_idx.empty()) {
      std::vector<LabelMap> preds(val_idx.size()), truth(val_idx.size());
      std::vector<double> losses(val_idx.size());
      parallel_for(val_idx.size(), [&](std::size_t i) {
        const auto& item = data[val_idx[i]];
        Tape tape;
        auto g = model.build(tape, item.image, false, false);
        losses[i] = tape.value(tape.cross_entropy(g.probs, item.labels)).item();
        preds[i] = predict_labels(SoftmaxField(tape.value(g.probs)));
        truth[i] = item.labels;
      });
      double vl = 0.0;
      for (double l : losses) vl += l;
      stats.val_loss = vl / static_cast<double>(losses.size());
      stats.val_miou = miou(preds, truth);
      if (!std::isfinite(stats.val_loss)) {
        throw NumericError("train: validation loss not finite in epoch " + std::to_string(epoch));
      }
      if (!have_best || stats.val_miou > result.best_val_miou) {
        have_best = true;
        result.best_val_miou = stats.val_miou;
        result.best_epoch = epoch;
        result.model = model;
      }
    } else {
      result.model = model;
      result.best_epoch = epoch;
    }
    result.curve.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  result.model.metadata()["best_epoch"] = result.best_epoch;
  result.model.metadata()["best_val_miou"] = result.best_val_miou;
  return result;
}

void save_checkpoint(const std::filesystem::path& dir, const SegModel& model) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    save_tensor(dir / layer_file(i, "kernels"), model.layers()[i].kernels);
    save_tensor(dir / layer_file(i, "bias"), model.layers()[i].bias);
  }
  std::ostringstream meta;
  meta << "format = " << kCheckpointFormat << "\n";
  meta << "version = " << kCheckpointVersion << "\n";
  meta << "architecture = " << model.architecture() << "\n";
  meta << "in_channels = " << model.in_channels() << "\n";
  meta << "num_classes = " << model.num_classes() << "\n";
  meta << "seed = " << model.seed() << "\n";
  meta << "layers = " << model.layers().size() << "\n";
  meta << "metadata = " << model.metadata().dump() << "\n";
  write_text_file(dir / "model.meta", meta.str());
}

SegModel load_checkpoint(const std::filesystem::path& dir) {
  const auto meta_path = dir / "model.meta";
  if (!std::filesystem::exists(meta_path)) throw PathError("no checkpoint at " + dir.string());
  std::istringstream is(read_text_file(meta_path));
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  if (kv["format"] != kCheckpointFormat || kv["version"] != std::to_string(kCheckpointVersion)) {
    throw FormatError("checkpoint format/version mismatch in " + meta_path.string());
  }
  SegModel m;
  try {
    m.in_channels_ = std::stoul(kv.at("in_channels"));
    m.num_classes_ = std::stoul(kv.at("num_classes"));
    m.seed_ = std::stoull(kv.at("seed"));
    const std::size_t n = std::stoul(kv.at("layers"));
    m.metadata_ = json::parse(kv.at("metadata"));
    for (std::size_t i = 0; i < n; ++i) {
      ConvLayer l;
      l.kernels = load_tensor(dir / layer_file(i, "kernels"));
      l.bias = load_tensor(dir / layer_file(i, "bias"));
      l.relu = i + 1 < n;
      if (l.kernels.rank() != 4 || l.bias.rank() != 1 || l.bias.dim(0) != l.kernels.dim(3)) {
        throw FormatError("checkpoint layer " + std::to_string(i) + " has inconsistent shapes");
      }
      m.layers_.push_back(std::move(l));
    }
  } catch (const std::out_of_range&) {
    throw FormatError("checkpoint metadata incomplete in " + meta_path.string());
  } catch (const std::invalid_argument&) {
    throw FormatError("checkpoint metadata malformed in " + meta_path.string());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata malformed: ") + e.what());
  }
  if (m.architecture() != kv["architecture"]) {
    throw FormatError("checkpoint architecture mismatch: " + kv["architecture"] + " vs " + m.architecture());
  }
  return m;
}

}  // namespace advseg
