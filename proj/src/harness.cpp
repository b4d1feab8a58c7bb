#include "advseg/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "advseg/errors.hpp"
#include "advseg/metrics.hpp"
#include "advseg/parallel.hpp"
#include "advseg/serialize.hpp"
#include "advseg/uncertainty.hpp"

namespace advseg {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pct(double rate) { return fixed(100.0 * rate, 4); }

void log_line(const StageOptions& o, const std::string& stage, const std::string& msg) {
  if (!o.quiet) std::cerr << "[" << stage << "] " << msg << "\n";
}

void prepare_stage_dir(const fs::path& dir, const StageOptions& options) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw PathError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      if (!options.force) throw ConfigError(dir.string() + " is not empty; pass --force to overwrite");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

void require_dir(const fs::path& dir, const std::string& what) {
  if (!fs::is_directory(dir)) throw PathError(what + " not found at " + dir.string());
}

void echo_config(const fs::path& dir, const ExperimentConfig& config) {
  write_text_file(dir / "config.json", to_json(config).dump(1) + "\n");
}

void write_csv(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
  std::string text = header + "\n";
  for (const auto& r : rows) text += r + "\n";
  write_text_file(path, text);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Rows as header-keyed maps.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  if (!fs::exists(path)) throw PathError("missing input " + path.string());
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty CSV " + path.string());
  const auto header = split_fields(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) throw FormatError("ragged row in " + path.string() + ": " + line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = fields[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_number(const std::string& s, const fs::path& from) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad number '" + s + "' in " + from.string());
  }
}

SplitIndices load_split(const fs::path& data_dir) {
  const fs::path p = data_dir / "split.json";
  if (!fs::exists(p)) throw PathError("missing split file " + p.string());
  try {
    const json j = json::parse(read_text_file(p));
    SplitIndices s;
    s.train = j.at("train").get<std::vector<std::size_t>>();
    s.val = j.at("val").get<std::vector<std::size_t>>();
    s.test = j.at("test").get<std::vector<std::size_t>>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError("corrupt split file " + p.string() + ": " + e.what());
  }
}

void check_split(const SplitIndices& split, std::size_t count) {
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (std::size_t i : *part) {
      if (i >= count) throw FormatError("split index " + std::to_string(i) + " out of range");
    }
  }
}

bool iterative(AttackKind k) { return k == AttackKind::ifgsm || k == AttackKind::pgd || k == AttackKind::dag; }

bool valid_name(const std::string& s) {
  if (s.empty() || s == "fit") return false;
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; });
}

json detector_settings_json(const DetectorSettings& d) {
  json roster = json::array();
  for (auto v : d.roster) roster.push_back(to_string(v));
  return json{{"roster", roster},
              {"ocsvm",
               {{"nu", d.ocsvm.nu},
                {"gamma", d.ocsvm.gamma},
                {"max_iterations", d.ocsvm.max_iterations},
                {"tolerance", d.ocsvm.tolerance}}},
              {"ellipse",
               {{"quantile", d.ellipse.quantile},
                {"trim_fraction", d.ellipse.trim_fraction},
                {"rounds", d.ellipse.rounds},
                {"ridge", d.ellipse.ridge}}},
              {"crossa",
               {{"lambda", d.crossa.lambda},
                {"max_iterations", d.crossa.max_iterations},
                {"tolerance", d.crossa.tolerance}}},
              {"heatmap",
               {{"channels", d.heatmap.channels},
                {"epochs", d.heatmap.epochs},
                {"batch_size", d.heatmap.batch_size},
                {"learning_rate", d.heatmap.learning_rate},
                {"momentum", d.heatmap.momentum},
                {"seed", d.heatmap.seed}}}};
}

DetectorSettings detector_settings_from_json(const json& j) {
  DetectorSettings d;
  if (j.contains("roster")) {
    d.roster.clear();
    for (const auto& v : j.at("roster")) d.roster.push_back(detector_variant_from_string(v.get<std::string>()));
  }
  const json none = json::object();
  const json& o = j.contains("ocsvm") ? j.at("ocsvm") : none;
  d.ocsvm.nu = o.value("nu", d.ocsvm.nu);
  d.ocsvm.gamma = o.value("gamma", d.ocsvm.gamma);
  d.ocsvm.max_iterations = o.value("max_iterations", d.ocsvm.max_iterations);
  d.ocsvm.tolerance = o.value("tolerance", d.ocsvm.tolerance);
  const json& e = j.contains("ellipse") ? j.at("ellipse") : none;
  d.ellipse.quantile = e.value("quantile", d.ellipse.quantile);
  d.ellipse.trim_fraction = e.value("trim_fraction", d.ellipse.trim_fraction);
  d.ellipse.rounds = e.value("rounds", d.ellipse.rounds);
  d.ellipse.ridge = e.value("ridge", d.ellipse.ridge);
  const json& c = j.contains("crossa") ? j.at("crossa") : none;
  d.crossa.lambda = c.value("lambda", d.crossa.lambda);
  d.crossa.max_iterations = c.value("max_iterations", d.crossa.max_iterations);
  d.crossa.tolerance = c.value("tolerance", d.crossa.tolerance);
  const json& h = j.contains("heatmap") ? j.at("heatmap") : none;
  d.heatmap.channels = h.value("channels", d.heatmap.channels);
  d.heatmap.epochs = h.value("epochs", d.heatmap.epochs);
  d.heatmap.batch_size = h.value("batch_size", d.heatmap.batch_size);
  d.heatmap.learning_rate = h.value("learning_rate", d.heatmap.learning_rate);
  d.heatmap.momentum = h.value("momentum", d.heatmap.momentum);
  d.heatmap.seed = h.value("seed", d.heatmap.seed);
  return d;
}

// ---------------------------------------------------------------- detect helpers

/// Per-image detector inputs derived from one set of images.
struct FeatureBank {
  std::string name;
  std::vector<UncertaintyFeatures> features;
  std::vector<Heatmap> heatmaps;
};

FeatureBank extract(const SegModel& model, const std::string& name, const std::vector<const Tensor*>& images) {
  FeatureBank bank;
  bank.name = name;
  bank.features.resize(images.size());
  bank.heatmaps.resize(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const SoftmaxField probs = predict_probs(model, *images[i]);
    bank.features[i] = aggregate_features(probs);
    bank.heatmaps[i] = entropy_heatmap(probs);
  });
  return bank;
}

/// Records which catalog feeds which detector fit or evaluation.
class AccessLog {
 public:
  const FeatureBank& fit(const FeatureBank& bank, DetectorVariant d, std::size_t fold) {
    rows_.push_back("fit," + to_string(d) + "," + std::to_string(fold) + "," + bank.name);
    return bank;
  }
  const FeatureBank& score(const FeatureBank& bank, DetectorVariant d, std::size_t fold) {
    rows_.push_back("score," + to_string(d) + "," + std::to_string(fold) + "," + bank.name);
    return bank;
  }
  const std::vector<std::string>& rows() const { return rows_; }

 private:
  std::vector<std::string> rows_;
};

DetectorModel fit_detector(DetectorVariant v, const DetectorSettings& s, const FeatureBank& benign,
                           const FeatureBank* adversarial, const std::vector<std::size_t>& groups) {
  std::vector<UncertaintyFeatures> bf, af;
  std::vector<Heatmap> bh, ah;
  for (std::size_t g : groups) {
    bf.push_back(benign.features[g]);
    bh.push_back(benign.heatmaps[g]);
    if (adversarial) {
      af.push_back(adversarial->features[g]);
      ah.push_back(adversarial->heatmaps[g]);
    }
  }
  switch (v) {
    case DetectorVariant::entropy: return fit_entropy(bf);
    case DetectorVariant::ocsvm: return fit_ocsvm(bf, s.ocsvm);
    case DetectorVariant::ellipse: return fit_ellipse(bf, s.ellipse);
    case DetectorVariant::crossa: return fit_crossa(bf, af, s.crossa);
    case DetectorVariant::heatmap: return fit_heatmap_cnn(bh, ah, s.heatmap);
  }
  throw ConfigError("unknown detector");
}

double score_one(const DetectorModel& m, const FeatureBank& bank, std::size_t g) {
  return m.consumes_heatmaps() ? m.score(bank.heatmaps[g]) : m.score(bank.features[g]);
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::override_seed(std::uint64_t v) {
  seeds.data = v;
  seeds.weights = v + 1;
  seeds.folds = v + 2;
}

SceneConfig ExperimentConfig::resolved_scene() const {
  SceneConfig s = scene;
  s.seed = seeds.data;
  return s;
}

TrainConfig ExperimentConfig::resolved_train() const {
  TrainConfig t = train;
  t.seed = seeds.weights;
  return t;
}

void ExperimentConfig::validate() const {
  resolved_scene().validate();
  resolved_train().validate();
  const SplitIndices split = split_indices(image_count);
  if (split.val.empty()) throw ConfigError("image_count too small: validation split is empty");
  if (cv_folds < 2) throw ConfigError("cv.folds must be >= 2");
  if (split.test.size() < 2 * cv_folds) {
    throw ConfigError("test split has " + std::to_string(split.test.size()) + " images; need at least " +
                      std::to_string(2 * cv_folds) + " for " + std::to_string(cv_folds) + "-fold CV");
  }
  if (suite.empty()) throw ConfigError("attack suite is empty");
  std::set<std::string> names;
  for (const auto& s : suite) {
    if (!valid_name(s.name)) throw ConfigError("invalid attack name '" + s.name + "'");
    if (!names.insert(s.name).second) throw ConfigError("duplicate attack name '" + s.name + "'");
    s.config.validate(iterative(s.kind));
  }
  if (suite_options.static_target_index >= split.train.size()) {
    throw ConfigError("static_target_index is outside the training split");
  }
  if (suite_options.delete_class < 0 || static_cast<std::size_t>(suite_options.delete_class) >= scene.num_classes) {
    throw ConfigError("delete_class must be a class id");
  }
  if (suite_options.universal_train_images == 0) throw ConfigError("universal_train_images must be >= 1");
  if (detectors.roster.empty()) throw ConfigError("detector roster is empty");
  std::set<DetectorVariant> seen(detectors.roster.begin(), detectors.roster.end());
  if (seen.size() != detectors.roster.size()) throw ConfigError("detector roster has duplicates");
}

json to_json(const ExperimentConfig& c) {
  json scene = to_json(c.scene);
  scene.erase("seed");
  scene["count"] = c.image_count;
  json train = to_json(c.train);
  train.erase("seed");
  json suite = json::array();
  for (const auto& s : c.suite) suite.push_back(to_json(s));
  return json{{"schema_version", ExperimentConfig::kSchemaVersion},
              {"dataset", scene},
              {"train", train},
              {"attacks", {{"suite", suite}, {"options", to_json(c.suite_options)}}},
              {"detectors", detector_settings_json(c.detectors)},
              {"cv", {{"folds", c.cv_folds}}},
              {"seeds", {{"data", c.seeds.data}, {"weights", c.seeds.weights}, {"folds", c.seeds.folds}}},
              {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  static const std::set<std::string> known{"schema_version", "dataset", "train", "attacks",
                                           "detectors",      "cv",      "seeds", "output_dir"};
  try {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [k, v] : j.items()) {
      if (!known.contains(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
    const int version = j.at("schema_version").get<int>();
    if (version != ExperimentConfig::kSchemaVersion) {
      throw ConfigError("unsupported schema_version " + std::to_string(version));
    }
    ExperimentConfig c;
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      if (d.contains("seed")) throw ConfigError("dataset.seed is not allowed; set seeds.data");
      c.scene = scene_config_from_json(d);
      c.image_count = d.value("count", c.image_count);
    }
    if (j.contains("train")) {
      if (j.at("train").contains("seed")) throw ConfigError("train.seed is not allowed; set seeds.weights");
      c.train = train_config_from_json(j.at("train"));
    }
    if (j.contains("attacks")) {
      const json& a = j.at("attacks");
      if (a.contains("suite")) {
        c.suite.clear();
        for (const auto& s : a.at("suite")) c.suite.push_back(attack_spec_from_json(s));
      }
      if (a.contains("options")) c.suite_options = suite_options_from_json(a.at("options"));
    }
    if (j.contains("detectors")) c.detectors = detector_settings_from_json(j.at("detectors"));
    if (j.contains("cv")) c.cv_folds = j.at("cv").value("folds", c.cv_folds);
    if (j.contains("seeds")) {
      const json& s = j.at("seeds");
      c.seeds.data = s.value("data", c.seeds.data);
      c.seeds.weights = s.value("weights", c.seeds.weights);
      c.seeds.folds = s.value("folds", c.seeds.folds);
    }
    c.output_dir = j.value("output_dir", std::string());
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

std::string attack_group(const AttackSpec& spec) {
  switch (spec.config.target) {
    case TargetSource::none: return "untargeted";
    case TargetSource::least_likely: return "least-likely";
    case TargetSource::static_mask: return "static-target";
    case TargetSource::delete_class: return "class-deletion";
  }
  return "untargeted";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

// ---------------------------------------------------------------- stages

void cmd_generate(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options) {
  config.validate();
  prepare_stage_dir(layout.data(), options);
  const SceneConfig scene = config.resolved_scene();
  log_line(options, "generate", "rendering " + std::to_string(config.image_count) + " images");
  const Dataset ds = generate_dataset(scene, config.image_count);
  save_dataset(layout.data(), ds, json{{"scene", to_json(scene)}});
  const SplitIndices split = split_indices(config.image_count);
  write_text_file(layout.data() / "split.json",
                  json{{"train", split.train}, {"val", split.val}, {"test", split.test}}.dump() + "\n");
  echo_config(layout.data(), config);
  log_line(options, "generate", "wrote " + layout.data().string());
}

void cmd_train(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options) {
  config.validate();
  require_dir(layout.data(), "dataset");
  const Dataset ds = load_dataset(layout.data());
  const SplitIndices split = load_split(layout.data());
  check_split(split, ds.size());
  prepare_stage_dir(layout.model(), options);
  const TrainConfig tc = config.resolved_train();
  std::vector<std::string> rows;
  const TrainResult result = train(ds, split.train, split.val, config.scene.num_classes, tc, [&](const EpochStats& s) {
    rows.push_back(std::to_string(s.epoch) + "," + fixed(s.train_loss, 8) + "," + fixed(s.val_loss, 8) + "," +
                   fixed(s.val_miou, 8));
    log_line(options, "train", "epoch " + std::to_string(s.epoch) + " train_loss " + fixed(s.train_loss, 4) +
                                   " val_miou " + fixed(s.val_miou, 4));
  });
  save_checkpoint(layout.model(), result.model);
  write_csv(layout.model() / "training_curve.csv", "epoch,train_loss,val_loss,val_miou", rows);
  write_text_file(layout.model() / "train_summary.json",
                  json{{"best_epoch", result.best_epoch}, {"best_val_miou", result.best_val_miou}}.dump(1) + "\n");
  echo_config(layout.model(), config);
  log_line(options, "train", "best val mIoU " + fixed(result.best_val_miou, 4) + " at epoch " +
                                 std::to_string(result.best_epoch));
}

void cmd_attack(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options) {
  config.validate();
  require_dir(layout.data(), "dataset");
  require_dir(layout.model(), "checkpoint");
  const Dataset ds = load_dataset(layout.data());
  const SplitIndices split = load_split(layout.data());
  check_split(split, ds.size());
  const SegModel model = load_checkpoint(layout.model());
  prepare_stage_dir(layout.attacks(), options);

  std::vector<AttackSpec> specs = config.suite;
  specs.push_back(detector_fit_attack());
  log_line(options, "attack", "running " + std::to_string(specs.size()) + " attacks on " +
                                  std::to_string(split.test.size()) + " test images");
  const auto catalogs = apply_attack_suite(model, ds, split.train, split.test, specs, config.suite_options);

  std::vector<LabelMap> truth;
  for (std::size_t i : split.test) truth.push_back(ds[i].labels);
  std::vector<std::string> rows;
  for (std::size_t c = 0; c < catalogs.size(); ++c) {
    const auto& cat = catalogs[c];
    const bool is_fit = c + 1 == catalogs.size();
    save_catalog(is_fit ? layout.fit_catalog() : layout.attacks() / cat.spec.name, cat, ds);
    if (is_fit) continue;
    std::vector<LabelMap> pred(cat.examples.size());
    parallel_for(pred.size(), [&](std::size_t i) { pred[i] = predict_labels(predict_probs(model, cat.examples[i].image)); });
    double max_linf = 0.0;
    for (const auto& ex : cat.examples) max_linf = std::max(max_linf, ex.linf);
    const double rate = apsr(pred, truth);
    rows.push_back(cat.spec.name + "," + attack_group(cat.spec) + "," + to_json(cat.spec)["kind"].get<std::string>() +
                   "," + fixed(cat.spec.config.epsilon, 2) + "," + std::to_string(cat.examples.size()) + "," +
                   pct(rate) + "," + fixed(max_linf * 255.0, 6));
    log_line(options, "attack", cat.spec.name + " APSR " + pct(rate) + "%");
  }
  write_csv(layout.attacks() / "apsr.csv", "attack,group,kind,epsilon,images,apsr,max_linf", rows);

  std::vector<std::string> clean_rows;
  for (const auto& [name, idx] : {std::pair{"val", &split.val}, std::pair{"test", &split.test}}) {
    std::vector<LabelMap> pred(idx->size()), lab;
    for (std::size_t i : *idx) lab.push_back(ds[i].labels);
    parallel_for(pred.size(), [&](std::size_t i) { pred[i] = predict_labels(predict_probs(model, ds[(*idx)[i]].image)); });
    clean_rows.push_back(std::string(name) + "," + std::to_string(idx->size()) + "," + pct(miou(pred, lab)) + "," +
                         pct(apsr(pred, lab)));
  }
  write_csv(layout.attacks() / "clean_metrics.csv", "split,images,miou,apsr", clean_rows);
  echo_config(layout.attacks(), config);
}

void cmd_detect(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options) {
  config.validate();
  require_dir(layout.data(), "dataset");
  require_dir(layout.model(), "checkpoint");
  require_dir(layout.attacks(), "attack catalogs");
  const bool supervised = std::any_of(config.detectors.roster.begin(), config.detectors.roster.end(), is_supervised);
  if (supervised && !fs::is_directory(layout.fit_catalog())) {
    throw ConfigError("supervised detectors need the " + detector_fit_attack().name + " catalog at " +
                      layout.fit_catalog().string() + "; rerun the attack stage");
  }
  const Dataset ds = load_dataset(layout.data());
  const SplitIndices split = load_split(layout.data());
  check_split(split, ds.size());
  const SegModel model = load_checkpoint(layout.model());
  const std::size_t n = split.test.size();

  auto load_bank = [&](const fs::path& dir, const std::string& name) {
    require_dir(dir, "catalog " + name);
    Dataset images;
    const AttackCatalog cat = load_catalog(dir, &images);
    for (std::size_t i = 0; i < cat.examples.size(); ++i) {
      if (i >= n || cat.examples[i].source_index != split.test[i]) {
        throw FormatError("catalog " + dir.string() + " does not cover the test split in order");
      }
    }
    if (cat.examples.size() != n) throw FormatError("catalog " + dir.string() + " has the wrong number of images");
    std::vector<const Tensor*> ptrs;
    for (const auto& ex : cat.examples) ptrs.push_back(&ex.image);
    return std::pair{cat.spec, extract(model, name, ptrs)};
  };

  std::vector<const Tensor*> clean_ptrs;
  for (std::size_t i : split.test) clean_ptrs.push_back(&ds[i].image);
  const FeatureBank benign = extract(model, "clean", clean_ptrs);
  std::vector<FeatureBank> attacked;
  for (const auto& spec : config.suite) attacked.push_back(load_bank(layout.attacks() / spec.name, spec.name).second);
  std::optional<FeatureBank> fit_bank;
  if (supervised) {
    auto [spec, bank] = load_bank(layout.fit_catalog(), detector_fit_attack().name);
    const AttackSpec want = detector_fit_attack();
    if (to_json(spec) != to_json(want)) {
      throw ConfigError("fit catalog was produced by " + to_json(spec).dump() + ", expected " + to_json(want).dump());
    }
    fit_bank = std::move(bank);
  }
  prepare_stage_dir(layout.detect(), options);

  {
    std::vector<std::string> rows;
    auto dump = [&](const FeatureBank& b) {
      for (std::size_t i = 0; i < n; ++i) rows.push_back(features_csv_row(split.test[i], b.name, b.features[i]));
    };
    dump(benign);
    for (const auto& b : attacked) dump(b);
    if (fit_bank) dump(*fit_bank);
    write_csv(layout.detect() / "features.csv", features_csv_header(config.scene.num_classes), rows);
  }

  // Benign image i and its attacked counterparts share group i.
  std::vector<CvSample> samples;
  for (std::size_t i = 0; i < n; ++i) samples.push_back({i, Truth::benign});
  for (std::size_t i = 0; i < n; ++i) samples.push_back({i, Truth::perturbed});
  const auto folds = make_folds(samples, config.cv_folds, config.seeds.folds);
  {
    json fj = json::array();
    for (const auto& f : folds) {
      std::set<std::size_t> groups;
      for (std::size_t s : f) groups.insert(samples[s].group);
      std::vector<std::size_t> images;
      for (std::size_t g : groups) images.push_back(split.test[g]);
      fj.push_back(json{{"image_indices", images}});
    }
    write_text_file(layout.detect() / "folds.json", json{{"seed", config.seeds.folds}, {"folds", fj}}.dump(1) + "\n");
  }

  AccessLog access;
  const std::size_t k = config.cv_folds;
  std::map<std::pair<DetectorVariant, std::size_t>, DetectorModel> fitted;
  std::vector<std::vector<std::size_t>> fit_groups(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::set<std::size_t> g;
    for (std::size_t other = 0; other < k; ++other) {
      if (other == f) continue;
      for (std::size_t s : folds[other]) g.insert(samples[s].group);
    }
    fit_groups[f].assign(g.begin(), g.end());
  }
  for (auto v : config.detectors.roster) {
    for (std::size_t f = 0; f < k; ++f) {
      const FeatureBank& b = access.fit(benign, v, f);
      const FeatureBank* adv = is_supervised(v) ? &access.fit(*fit_bank, v, f) : nullptr;
      DetectorModel m = fit_detector(v, config.detectors, b, adv, fit_groups[f]);
      m.save(layout.detect() / "models" / (to_string(v) + "_fold" + std::to_string(f) + ".json"));
      fitted.emplace(std::pair{v, f}, std::move(m));
    }
    log_line(options, "detect", "fitted " + to_string(v) + " on " + std::to_string(k) + " folds");
  }

  std::vector<std::string> fold_rows, summary_rows;
  std::vector<double> cell_ada, cell_auc, cell_tpr;
  for (const auto& bank : attacked) {
    for (auto v : config.detectors.roster) {
      const CvReport rep = cross_validate(samples, k, config.seeds.folds,
                                          [&](std::size_t f, const std::vector<std::size_t>&, const std::vector<std::size_t>& eval) {
                                            const DetectorModel& m = fitted.at({v, f});
                                            const FeatureBank& clean = access.score(benign, v, f);
                                            const FeatureBank& adv = access.score(bank, v, f);
                                            std::vector<double> d;
                                            for (std::size_t s : eval) {
                                              const auto& src = samples[s].truth == Truth::benign ? clean : adv;
                                              d.push_back(score_one(m, src, samples[s].group));
                                            }
                                            return d;
                                          });
      for (const auto& fm : rep.per_fold) {
        fold_rows.push_back(bank.name + "," + to_string(v) + "," + std::to_string(fm.fold) + "," + pct(fm.ada_star) +
                            "," + pct(fm.auroc) + "," + pct(fm.tpr5));
      }
      summary_rows.push_back(bank.name + "," + to_string(v) + "," + pct(rep.ada_star.mean) + "," + pct(rep.ada_star.std) +
                             "," + pct(rep.auroc.mean) + "," + pct(rep.auroc.std) + "," + pct(rep.tpr5.mean) + "," +
                             pct(rep.tpr5.std));
      cell_ada.push_back(rep.ada_star.mean);
      cell_auc.push_back(rep.auroc.mean);
      cell_tpr.push_back(rep.tpr5.mean);
    }
    log_line(options, "detect", "evaluated " + bank.name);
  }
  const MeanStd ga = mean_std(cell_ada), gr = mean_std(cell_auc), gt = mean_std(cell_tpr);
  summary_rows.push_back("ALL,ALL," + pct(ga.mean) + "," + pct(ga.std) + "," + pct(gr.mean) + "," + pct(gr.std) + "," +
                         pct(gt.mean) + "," + pct(gt.std));
  write_csv(layout.detect() / "detection_folds.csv", "attack,detector,fold,ada_star,auroc,tpr5", fold_rows);
  write_csv(layout.detect() / "detection_summary.csv",
            "attack,detector,ada_star_mean,ada_star_std,auroc_mean,auroc_std,tpr5_mean,tpr5_std", summary_rows);
  write_csv(layout.detect() / "access_log.csv", "purpose,detector,fold,catalog", access.rows());
  echo_config(layout.detect(), config);
  log_line(options, "detect", "grand-average ADA* " + pct(ga.mean) + "%");
}

void cmd_report(const ExperimentConfig& config, const ExperimentLayout& layout, const StageOptions& options) {
  const fs::path apsr_path = layout.attacks() / "apsr.csv";
  const fs::path summary_path = layout.detect() / "detection_summary.csv";
  const fs::path model_path = layout.model() / "train_summary.json";
  const auto apsr_rows = read_csv(apsr_path);
  const auto det_rows = read_csv(summary_path);
  const auto clean_rows = read_csv(layout.attacks() / "clean_metrics.csv");
  if (!fs::exists(model_path)) throw PathError("missing input " + model_path.string());
  json model_summary;
  try {
    model_summary = json::parse(read_text_file(model_path));
    model_summary.at("best_val_miou").get<double>();
    model_summary.at("best_epoch").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError("corrupt " + model_path.string() + ": " + e.what());
  }
  prepare_stage_dir(layout.report(), options);

  static const std::vector<std::string> groups{"untargeted", "least-likely", "static-target", "class-deletion"};
  std::vector<std::string> detectors;
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::string>> cells;
  std::string grand;
  for (const auto& r : det_rows) {
    if (r.at("attack") == "ALL") {
      grand = r.at("ada_star_mean");
      continue;
    }
    if (std::find(detectors.begin(), detectors.end(), r.at("detector")) == detectors.end()) {
      detectors.push_back(r.at("detector"));
    }
    cells[{r.at("attack"), r.at("detector")}] = r;
  }
  if (grand.empty()) throw FormatError("detection summary lacks the grand-average row");

  std::vector<std::string> merged;
  std::ostringstream txt;
  txt << "Adversarial attack detection summary (rates in %)\n\n";
  txt << "model: best val mIoU " << pct(model_summary.at("best_val_miou").get<double>()) << " at epoch "
      << model_summary.at("best_epoch").get<std::size_t>() << "\n";
  for (const auto& r : clean_rows) {
    txt << "clean " << r.at("split") << ": mIoU " << r.at("miou") << ", APSR " << r.at("apsr") << " (" << r.at("images")
        << " images)\n";
  }
  txt << "\n";
  std::size_t total = 0;
  for (const auto& g : groups) {
    std::vector<const std::map<std::string, std::string>*> members;
    for (const auto& r : apsr_rows) {
      if (std::find(groups.begin(), groups.end(), r.at("group")) == groups.end()) {
        throw FormatError("unknown attack group '" + r.at("group") + "' in " + apsr_path.string());
      }
      if (r.at("group") == g) members.push_back(&r);
    }
    txt << "== " << g << " (" << members.size() << " attacks) ==\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-14s %9s", "attack", "APSR");
    txt << line;
    for (const auto& d : detectors) {
      std::snprintf(line, sizeof line, " %18s", (d + " ADA*/AuROC").c_str());
      txt << line;
    }
    txt << "\n";
    for (const auto* r : members) {
      const std::string& a = r->at("attack");
      std::snprintf(line, sizeof line, "%-14s %9.2f", a.c_str(), parse_number(r->at("apsr"), apsr_path));
      txt << line;
      for (const auto& d : detectors) {
        auto it = cells.find({a, d});
        if (it == cells.end()) throw FormatError("no detection results for " + a + " / " + d);
        const auto& c = it->second;
        std::snprintf(line, sizeof line, " %8.2f / %7.2f", parse_number(c.at("ada_star_mean"), summary_path),
                      parse_number(c.at("auroc_mean"), summary_path));
        txt << line;
        merged.push_back(a + "," + g + "," + r->at("apsr") + "," + d + "," + c.at("ada_star_mean") + "," +
                         c.at("ada_star_std") + "," + c.at("auroc_mean") + "," + c.at("auroc_std") + "," +
                         c.at("tpr5_mean") + "," + c.at("tpr5_std"));
      }
      txt << "\n";
    }
    txt << "\n";
    total += members.size();
  }
  txt << "attacks: " << total << ", detectors: " << detectors.size() << ", cells: " << total * detectors.size() << "\n";
  txt << "grand-average ADA*: " << grand << "\n";
  write_csv(layout.report() / "report.csv",
            "attack,group,apsr,detector,ada_star_mean,ada_star_std,auroc_mean,auroc_std,tpr5_mean,tpr5_std", merged);
  write_text_file(layout.report() / "summary.txt", txt.str());
  echo_config(layout.report(), config);
  log_line(options, "report", "wrote " + (layout.report() / "summary.txt").string());
}

}  // namespace advseg
