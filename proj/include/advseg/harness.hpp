#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advseg/attacks.hpp"
#include "advseg/datagen.hpp"
#include "advseg/detectors.hpp"
#include "advseg/segnet.hpp"

namespace advseg {

struct Seeds {
  std::uint64_t data = 7;
  std::uint64_t weights = 1;
  std::uint64_t folds = 3;
};

struct DetectorSettings {
  std::vector<DetectorVariant> roster{DetectorVariant::entropy, DetectorVariant::ocsvm, DetectorVariant::ellipse,
                                      DetectorVariant::crossa, DetectorVariant::heatmap};
  OcsvmOptions ocsvm;
  EllipseOptions ellipse;
  CrossaOptions crossa;
  HeatmapTrainConfig heatmap;
};

/// Everything a pipeline run depends on. Stored as JSON with a
/// schema_version field and echoed into every stage directory.
struct ExperimentConfig {
  static constexpr int kSchemaVersion = 1;

  SceneConfig scene;  // scene.seed is taken from seeds.data
  std::size_t image_count = 400;
  TrainConfig train;  // train.seed is taken from seeds.weights
  std::vector<AttackSpec> suite = default_attack_suite();
  SuiteOptions suite_options;
  DetectorSettings detectors;
  std::size_t cv_folds = 5;
  Seeds seeds;
  std::string output_dir;

  /// Sets data = v, weights = v + 1, folds = v + 2.
  void override_seed(std::uint64_t v);
  void validate() const;
  /// Copies of the sub-configs with the seeds applied.
  SceneConfig resolved_scene() const;
  TrainConfig resolved_train() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Stage subdirectories of an experiment root.
struct ExperimentLayout {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path model() const { return root / "model"; }
  std::filesystem::path attacks() const { return root / "attacks"; }
  std::filesystem::path fit_catalog() const { return root / "attacks" / "fit" / detector_fit_attack().name; }
  std::filesystem::path detect() const { return root / "detect"; }
  std::filesystem::path report() const { return root / "report"; }
};

struct StageOptions {
  bool force = false;
  bool quiet = false;
};

/// Writes the dataset, split.json and config.json under data/.
void cmd_generate(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options = {});
/// Trains on data/, writes the checkpoint and training_curve.csv under model/.
void cmd_train(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options = {});
/// Attacks the test split; one catalog per suite entry plus the detector
/// fit catalog, apsr.csv and clean_metrics.csv under attacks/.
void cmd_attack(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options = {});
/// Cross-validated detection over every (attack, detector) cell; writes
/// features.csv, folds.json, detection_folds.csv, detection_summary.csv,
/// access_log.csv and the fitted models under detect/.
void cmd_detect(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options = {});
/// Merges the stage CSVs into report/report.csv and report/summary.txt.
void cmd_report(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options = {});

/// The report part an attack belongs to: "untargeted", "least-likely",
/// "static-target" or "class-deletion".
std::string attack_group(const AttackSpec& spec);

/// Maps exceptions onto process exit codes (1 usage, 2 data, 3 numeric).
int exit_code_for(const std::exception& e);

}  // namespace advseg
