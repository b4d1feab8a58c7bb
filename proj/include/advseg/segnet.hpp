#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advseg/datagen.hpp"
#include "advseg/tape.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

struct ConvLayer {
  Tensor kernels;  // k x k x Cin x Cout
  Tensor bias;     // Cout
  bool relu = true;

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Fully convolutional segmentation network: 3x3 conv + ReLU blocks with
/// same-padding followed by a 1x1 head producing |C| logit channels.
class SegModel {
 public:
  SegModel() = default;

  /// He-initialized model with the given hidden widths.
  static SegModel create(std::size_t in_channels, std::size_t num_classes, std::uint64_t seed,
                         std::vector<std::size_t> hidden = {16, 32, 32});

  std::size_t in_channels() const { return in_channels_; }
  std::size_t num_classes() const { return num_classes_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  std::vector<ConvLayer>& layers() { return layers_; }
  std::string architecture() const;

  /// Free-form provenance (training config echo etc.), persisted verbatim.
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  struct Graph {
    Var input;
    std::vector<Var> params;  // kernels, bias per layer
    Var logits;
    Var probs;
  };
  /// Records the forward pass on `tape`.
  Graph build(Tape& tape, const Tensor& image, bool grad_input, bool grad_params) const;

  void check_input(const Tensor& image) const;

  friend SegModel load_checkpoint(const std::filesystem::path& dir);

  friend bool operator==(const SegModel& a, const SegModel& b) {
    return a.in_channels_ == b.in_channels_ && a.num_classes_ == b.num_classes_ && a.seed_ == b.seed_ &&
           a.layers_ == b.layers_ && a.metadata_ == b.metadata_;
  }

 private:
  std::size_t in_channels_ = 0;
  std::size_t num_classes_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<ConvLayer> layers_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

SoftmaxField predict_probs(const SegModel& model, const Tensor& image);

/// Per-pixel argmax, ties to the lowest class index.
LabelMap predict_labels(const SoftmaxField& probs);

/// Mean intersection-over-union accumulated over all images. Classes absent
/// from both predictions and labels are excluded.
double miou(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& labels);

struct LossGradient {
  double loss = 0.0;
  Tensor grad;  // d loss / d image
};

/// Pixel-mean cross entropy of the model at `image` against `labels`,
/// and its gradient w.r.t. the image. `mask` restricts the pixels.
LossGradient loss_and_input_gradient(const SegModel& model, const Tensor& image, const LabelMap& labels,
                                     const std::vector<unsigned char>* mask = nullptr);

double model_loss(const SegModel& model, const Tensor& image, const LabelMap& labels);

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_miou = 0.0;
};

struct TrainResult {
  SegModel model;  // best validation mIoU checkpoint
  std::vector<EpochStats> curve;
  double best_val_miou = 0.0;
  std::size_t best_epoch = 0;
};

/// Mini-batch SGD with momentum on the pixel-mean cross entropy.
/// If `val` is empty the final epoch's weights are returned.
TrainResult train(const Dataset& data, const std::vector<std::size_t>& train_idx,
                  const std::vector<std::size_t>& val_idx, std::size_t num_classes, const TrainConfig& config,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

void save_checkpoint(const std::filesystem::path& dir, const SegModel& model);
SegModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace advseg
