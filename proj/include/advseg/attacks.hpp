#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advseg/datagen.hpp"
#include "advseg/segnet.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

enum class AttackMode { untargeted, targeted };
enum class TargetSource { none, least_likely, static_mask, delete_class };
enum class AttackKind { fgsm, ifgsm, pgd, dag, universal };

/// Budgets are in 1/255 intensity units and are divided by 255 before
/// being applied to images in [0, 1].
struct AttackConfig {
  double epsilon = 8.0;
  double alpha = 1.0;
  std::optional<int> iterations;  // default min(eps + 4, floor(1.25 eps))
  AttackMode mode = AttackMode::untargeted;
  TargetSource target = TargetSource::none;

  int resolved_iterations() const;
  double epsilon_unit() const { return epsilon / 255.0; }
  double alpha_unit() const { return alpha / 255.0; }
  void validate(bool iterative) const;
};

/// Iteration count used by the iterative attacks when none is given.
int default_iterations(double epsilon);

struct AdversarialExample {
  Tensor image;
  std::size_t source_index = 0;
  std::string attack;
  double linf = 0.0;  // realized max |x_adv - x|
};

/// Clips `candidate` to the eps-ball around `origin` and then to [0, 1].
void project_to_budget(Tensor& candidate, const Tensor& origin, double eps_unit);
double linf_distance(const Tensor& a, const Tensor& b);

/// Untargeted FGSM: clamp(x + eps * sign(grad_x L(x, labels))).
AdversarialExample fgsm(const SegModel& model, const Tensor& image, const LabelMap& labels,
                        const AttackConfig& config);

/// Targeted FGSM: clamp(x - eps * sign(grad_x L(x, target))).
AdversarialExample fgsm_targeted(const SegModel& model, const Tensor& image, const LabelMap& target,
                                 const AttackConfig& config);

/// Iterative FGSM. Untargeted ascends the loss for `labels`; targeted
/// descends it. Each iterate is clipped to the eps-ball and [0, 1].
/// `on_step` (if set) sees every iterate.
AdversarialExample ifgsm(const SegModel& model, const Tensor& image, const LabelMap& labels,
                         const AttackConfig& config,
                         const std::function<void(int, const Tensor&)>& on_step = {});

/// PGD with steps alpha * g / ||g||_inf along the raw gradient, projected
/// onto the eps-ball and [0, 1]. A zero gradient skips the step.
AdversarialExample pgd(const SegModel& model, const Tensor& image, const LabelMap& labels,
                       const AttackConfig& config,
                       const std::function<void(int, const Tensor&)>& on_step = {});

/// Per-pixel argmin of the predicted probabilities, ties to lowest index.
LabelMap least_likely_target(const SoftmaxField& probs);

/// Returns `reference` unchanged after checking it matches the image size.
LabelMap static_target(const LabelMap& reference, std::size_t height, std::size_t width);

/// Reassigns every pixel predicted as `delete_class` to the class of the
/// nearest (Euclidean) pixel of another class; ties go to the earliest
/// pixel in row-major order.
LabelMap dnnm_target(const LabelMap& prediction, int delete_class);

struct DagTrace {
  std::vector<std::size_t> active_sizes;  // active set size at every check, the last one included
  int iterations = 0;
};

/// Active-set targeted attack: descends the target loss over pixels not
/// yet predicting their target. Stops once more than half of the pixels
/// that initially disagreed with the target have been flipped to it, or
/// after the iteration budget.
AdversarialExample dag_attack(const SegModel& model, const Tensor& image, const LabelMap& target,
                              const AttackConfig& config, DagTrace* trace = nullptr);

struct UniversalOptions {
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
};

/// Learns one perturbation xi, ||xi||_inf <= eps, that drives images toward
/// their targets. `targets` holds either one map for all images or one per
/// image. Apply with apply_universal().
Tensor universal_perturbation(const SegModel& model, const std::vector<Tensor>& images,
                              const std::vector<LabelMap>& targets, const AttackConfig& config,
                              const UniversalOptions& options = {});

Tensor apply_universal(const Tensor& image, const Tensor& noise);

// ---------------------------------------------------------------- suite

struct AttackSpec {
  std::string name;
  AttackKind kind = AttackKind::fgsm;
  AttackConfig config;
};

struct SuiteOptions {
  std::size_t static_target_index = 0;  // training-split image whose labels are the static target
  int delete_class = 1;
  bool use_prediction_as_label = false;  // untargeted attacks: model prediction instead of ground truth
  std::size_t universal_train_images = 32;
  UniversalOptions universal;
};

struct AttackCatalog {
  AttackSpec spec;
  std::vector<AdversarialExample> examples;
};

/// The default roster: FGSM_4, FGSM_16, IFGSM_8, IFGSM_ll_8, PGD_8,
/// PGD_tar_8, SSMM_16, DNNM_16, DAG_tar_8.
std::vector<AttackSpec> default_attack_suite();
/// FGSM_ll_2, the catalog supervised detectors are fitted on.
AttackSpec detector_fit_attack();

/// Runs every spec over `attack_idx`. Universal perturbations are fitted on
/// the first `universal_train_images` of `train_idx`.
std::vector<AttackCatalog> apply_attack_suite(const SegModel& model, const Dataset& data,
                                              const std::vector<std::size_t>& train_idx,
                                              const std::vector<std::size_t>& attack_idx,
                                              const std::vector<AttackSpec>& suite, const SuiteOptions& options);

nlohmann::json to_json(const AttackSpec& s);
AttackSpec attack_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SuiteOptions& o);
SuiteOptions suite_options_from_json(const nlohmann::json& j);

/// Persists a catalog as a dataset directory (labels = ground truth of the
/// source image) plus provenance.json.
void save_catalog(const std::filesystem::path& dir, const AttackCatalog& catalog, const Dataset& source);
AttackCatalog load_catalog(const std::filesystem::path& dir, Dataset* images_out = nullptr);

}  // namespace advseg
