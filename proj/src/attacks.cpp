#include "advseg/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "advseg/errors.hpp"
#include "advseg/parallel.hpp"
#include "advseg/serialize.hpp"

namespace advseg {
namespace {

using nlohmann::json;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_budget(const AttackConfig& c) {
  if (!(c.epsilon >= 0.0) || !std::isfinite(c.epsilon)) throw ConfigError("attack: epsilon must be finite and >= 0");
}

void check_pair(const Tensor& image, const LabelMap& labels) {
  if (image.rank() != 3 || image.dim(0) != labels.height() || image.dim(1) != labels.width()) {
    throw ShapeError("attack: image " + shape_string(image.shape()) + " does not match label map " +
                     shape_string({labels.height(), labels.width()}));
  }
}

AdversarialExample finish(Tensor adv, const Tensor& origin, const char* name) {
  AdversarialExample ex;
  ex.linf = linf_distance(adv, origin);
  ex.image = std::move(adv);
  ex.attack = name;
  return ex;
}

// One signed step from `x` along `direction` * sign(grad).
Tensor signed_step(const Tensor& x, const Tensor& grad, double step, double direction) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + direction * step * sign(grad[i]);
  return out;
}

const char* kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::ifgsm: return "ifgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::dag: return "dag";
    case AttackKind::universal: return "universal";
  }
  return "fgsm";
}

AttackKind kind_from_name(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "ifgsm") return AttackKind::ifgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "dag") return AttackKind::dag;
  if (s == "universal") return AttackKind::universal;
  throw ConfigError("unknown attack kind '" + s + "'");
}

const char* target_name(TargetSource t) {
  switch (t) {
    case TargetSource::none: return "none";
    case TargetSource::least_likely: return "least_likely";
    case TargetSource::static_mask: return "static_mask";
    case TargetSource::delete_class: return "delete_class";
  }
  return "none";
}

TargetSource target_from_name(const std::string& s) {
  if (s == "none") return TargetSource::none;
  if (s == "least_likely") return TargetSource::least_likely;
  if (s == "static_mask") return TargetSource::static_mask;
  if (s == "delete_class") return TargetSource::delete_class;
  throw ConfigError("unknown target source '" + s + "'");
}

}  // namespace

int default_iterations(double epsilon) {
  return static_cast<int>(std::min(epsilon + 4.0, std::floor(1.25 * epsilon)));
}

int AttackConfig::resolved_iterations() const {
  return iterations ? *iterations : default_iterations(epsilon);
}

void AttackConfig::validate(bool iterative) const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack config: epsilon must be > 0");
  if (iterative) {
    if (!(alpha > 0.0)) throw ConfigError("attack config: alpha must be > 0");
    if (resolved_iterations() < 1) throw ConfigError("attack config: iterations must be >= 1");
  }
  if (mode == AttackMode::targeted && target == TargetSource::none) {
    throw ConfigError("attack config: targeted mode needs a target source");
  }
  if (mode == AttackMode::untargeted && target != TargetSource::none) {
    throw ConfigError("attack config: untargeted mode takes no target source");
  }
}

void project_to_budget(Tensor& candidate, const Tensor& origin, double eps_unit) {
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    const double v = std::min(std::max(candidate[i], origin[i] - eps_unit), origin[i] + eps_unit);
    candidate[i] = std::clamp(v, 0.0, 1.0);
  }
}

double linf_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("linf_distance: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

AdversarialExample fgsm(const SegModel& model, const Tensor& image, const LabelMap& labels,
                        const AttackConfig& config) {
  check_budget(config);
  check_pair(image, labels);
  const auto lg = loss_and_input_gradient(model, image, labels);
  Tensor adv = signed_step(image, lg.grad, config.epsilon_unit(), +1.0);
  for (auto& v : adv.values()) v = std::clamp(v, 0.0, 1.0);
  return finish(std::move(adv), image, "fgsm");
}

AdversarialExample fgsm_targeted(const SegModel& model, const Tensor& image, const LabelMap& target,
                                 const AttackConfig& config) {
  check_budget(config);
  check_pair(image, target);
  const auto lg = loss_and_input_gradient(model, image, target);
  Tensor adv = signed_step(image, lg.grad, config.epsilon_unit(), -1.0);
  for (auto& v : adv.values()) v = std::clamp(v, 0.0, 1.0);
  return finish(std::move(adv), image, "fgsm_targeted");
}

AdversarialExample ifgsm(const SegModel& model, const Tensor& image, const LabelMap& labels,
                         const AttackConfig& config, const std::function<void(int, const Tensor&)>& on_step) {
  check_budget(config);
  check_pair(image, labels);
  const int n = config.resolved_iterations();
  if (n < 1 || !(config.alpha > 0.0)) throw ConfigError("ifgsm: need iterations >= 1 and alpha > 0");
  const double direction = config.mode == AttackMode::targeted ? -1.0 : 1.0;
  Tensor x = image;
  for (int t = 0; t < n; ++t) {
    const auto lg = loss_and_input_gradient(model, x, labels);
    x = signed_step(x, lg.grad, config.alpha_unit(), direction);
    project_to_budget(x, image, config.epsilon_unit());
    if (on_step) on_step(t, x);
  }
  return finish(std::move(x), image, "ifgsm");
}

AdversarialExample pgd(const SegModel& model, const Tensor& image, const LabelMap& labels,
                       const AttackConfig& config, const std::function<void(int, const Tensor&)>& on_step) {
  check_budget(config);
  check_pair(image, labels);
  const int n = config.resolved_iterations();
  if (n < 1 || !(config.alpha > 0.0)) throw ConfigError("pgd: need iterations >= 1 and alpha > 0");
  const double direction = config.mode == AttackMode::targeted ? -1.0 : 1.0;
  Tensor x = image;
  for (int t = 0; t < n; ++t) {
    const auto lg = loss_and_input_gradient(model, x, labels);
    double gmax = 0.0;
    for (double g : lg.grad.values()) gmax = std::max(gmax, std::abs(g));
    if (gmax > 0.0) {
      const double scale = direction * config.alpha_unit() / gmax;
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += scale * lg.grad[i];
      project_to_budget(x, image, config.epsilon_unit());
    }
    if (on_step) on_step(t, x);
  }
  return finish(std::move(x), image, "pgd");
}

LabelMap least_likely_target(const SoftmaxField& probs) {
  LabelMap out(probs.height(), probs.width());
  const std::size_t c = probs.num_classes();
  for (std::size_t z = 0; z < probs.num_pixels(); ++z) {
    auto p = probs.pixel(z);
    std::size_t worst = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (p[k] < p[worst]) worst = k;
    }
    out[z] = static_cast<int>(worst);
  }
  return out;
}

LabelMap static_target(const LabelMap& reference, std::size_t height, std::size_t width) {
  if (reference.height() != height || reference.width() != width) {
    throw ShapeError("static_target: reference " + shape_string({reference.height(), reference.width()}) +
                     " does not match attacked image " + shape_string({height, width}));
  }
  return reference;
}

LabelMap dnnm_target(const LabelMap& prediction, int delete_class) {
  const auto h = static_cast<std::ptrdiff_t>(prediction.height());
  const auto w = static_cast<std::ptrdiff_t>(prediction.width());
  bool has_donor = false;
  for (int v : prediction.ids()) has_donor = has_donor || v != delete_class;
  if (!has_donor) throw ConfigError("dnnm_target: every pixel is the deleted class; no donor pixels");

  LabelMap out = prediction;
  const std::ptrdiff_t max_r = std::max(h, w);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      if (prediction.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) != delete_class) continue;
      std::ptrdiff_t best_d2 = std::numeric_limits<std::ptrdiff_t>::max();
      std::ptrdiff_t best_idx = -1;
      // Rings of growing Chebyshev radius; once (r+1)^2 exceeds the best
      // squared distance no farther ring can win or tie.
      for (std::ptrdiff_t r = 1; r <= max_r; ++r) {
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
          const std::ptrdiff_t yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          const bool full_row = dy == -r || dy == r;
          for (std::ptrdiff_t dx = -r; dx <= r; dx += full_row ? 1 : 2 * r) {
            const std::ptrdiff_t xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            if (prediction.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) == delete_class) continue;
            const std::ptrdiff_t d2 = dy * dy + dx * dx;
            const std::ptrdiff_t idx = yy * w + xx;
            if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
              best_d2 = d2;
              best_idx = idx;
            }
          }
        }
        if (best_idx >= 0 && (r + 1) * (r + 1) > best_d2) break;
      }
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = prediction[static_cast<std::size_t>(best_idx)];
    }
  }
  return out;
}

AdversarialExample dag_attack(const SegModel& model, const Tensor& image, const LabelMap& target,
                              const AttackConfig& config, DagTrace* trace) {
  check_budget(config);
  check_pair(image, target);
  const int n = config.resolved_iterations();
  if (n < 1 || !(config.alpha > 0.0)) throw ConfigError("dag_attack: need iterations >= 1 and alpha > 0");
  const std::size_t npix = target.size();
  Tensor x = image;
  std::vector<unsigned char> active(npix);
  std::size_t initial_active = 0;
  int t = 0;
  for (;; ++t) {
    Tape tape;
    auto g = model.build(tape, x, true, false);
    const LabelMap pred = predict_labels(SoftmaxField(tape.value(g.probs)));
    std::size_t n_active = 0;
    for (std::size_t z = 0; z < npix; ++z) {
      active[z] = pred[z] != target[z];
      n_active += active[z];
    }
    if (t == 0) initial_active = n_active;
    if (trace) trace->active_sizes.push_back(n_active);
    // Majority of the pixels that started off the target now predict it.
    if (n_active == 0 || 2 * (initial_active - std::min(n_active, initial_active)) > initial_active || t >= n) break;
    Var loss = tape.cross_entropy(g.probs, target, &active);
    tape.backward(loss);
    const Tensor grad = tape.grad(g.input);
    double gmax = 0.0;
    for (double v : grad.values()) gmax = std::max(gmax, std::abs(v));
    if (gmax > 0.0) {
      const double scale = config.alpha_unit() / gmax;
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= scale * grad[i];
      project_to_budget(x, image, config.epsilon_unit());
    }
  }
  if (trace) trace->iterations = t;
  return finish(std::move(x), image, "dag");
}

Tensor apply_universal(const Tensor& image, const Tensor& noise) {
  if (image.shape() != noise.shape()) {
    throw ShapeError("apply_universal: image " + shape_string(image.shape()) + " vs noise " + shape_string(noise.shape()));
  }
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(image[i] + noise[i], 0.0, 1.0);
  return out;
}

Tensor universal_perturbation(const SegModel& model, const std::vector<Tensor>& images,
                              const std::vector<LabelMap>& targets, const AttackConfig& config,
                              const UniversalOptions& options) {
  check_budget(config);
  if (images.empty()) throw ConfigError("universal_perturbation: no training images");
  if (targets.size() != 1 && targets.size() != images.size()) {
    throw ConfigError("universal_perturbation: need one target or one per image");
  }
  if (options.batch_size == 0) throw ConfigError("universal_perturbation: batch_size must be positive");
  for (std::size_t i = 0; i < images.size(); ++i) {
    check_pair(images[i], targets[targets.size() == 1 ? 0 : i]);
    if (images[i].shape() != images[0].shape()) throw ShapeError("universal_perturbation: images differ in shape");
  }
  const double eps = config.epsilon_unit();
  Tensor noise(images[0].shape(), 0.0);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t start = 0; start < images.size(); start += options.batch_size) {
      const std::size_t stop = std::min(images.size(), start + options.batch_size);
      std::vector<Tensor> grads(stop - start);
      parallel_for(grads.size(), [&](std::size_t i) {
        const std::size_t idx = start + i;
        grads[i] = loss_and_input_gradient(model, apply_universal(images[idx], noise),
                                           targets[targets.size() == 1 ? 0 : idx])
                       .grad;
      });
      for (std::size_t k = 0; k < noise.size(); ++k) {
        double g = 0.0;
        for (const auto& gr : grads) g += gr[k];
        const double v = noise[k] - config.alpha_unit() * sign(g);
        noise[k] = std::clamp(v, -eps, eps);
      }
    }
  }
  return noise;
}

// ---------------------------------------------------------------- suite

std::vector<AttackSpec> default_attack_suite() {
  auto make = [](std::string name, AttackKind kind, double eps, AttackMode mode, TargetSource target) {
    AttackSpec s;
    s.name = std::move(name);
    s.kind = kind;
    s.config.epsilon = eps;
    s.config.mode = mode;
    s.config.target = target;
    return s;
  };
  using enum AttackKind;
  const auto U = AttackMode::untargeted;
  const auto T = AttackMode::targeted;
  return {
      make("FGSM_4", fgsm, 4, U, TargetSource::none),
      make("FGSM_16", fgsm, 16, U, TargetSource::none),
      make("IFGSM_8", ifgsm, 8, U, TargetSource::none),
      make("IFGSM_ll_8", ifgsm, 8, T, TargetSource::least_likely),
      make("PGD_8", pgd, 8, U, TargetSource::none),
      make("PGD_tar_8", pgd, 8, T, TargetSource::static_mask),
      make("SSMM_16", universal, 16, T, TargetSource::static_mask),
      make("DNNM_16", universal, 16, T, TargetSource::delete_class),
      make("DAG_tar_8", dag, 8, T, TargetSource::static_mask),
  };
}

AttackSpec detector_fit_attack() {
  AttackSpec s;
  s.name = "FGSM_ll_2";
  s.kind = AttackKind::fgsm;
  s.config.epsilon = 2;
  s.config.mode = AttackMode::targeted;
  s.config.target = TargetSource::least_likely;
  return s;
}

std::vector<AttackCatalog> apply_attack_suite(const SegModel& model, const Dataset& data,
                                              const std::vector<std::size_t>& train_idx,
                                              const std::vector<std::size_t>& attack_idx,
                                              const std::vector<AttackSpec>& suite, const SuiteOptions& options) {
  if (attack_idx.empty()) throw ConfigError("apply_attack_suite: no images to attack");
  for (const auto& s : suite) {
    s.config.validate(s.kind != AttackKind::fgsm);
    if (s.kind == AttackKind::dag && s.config.mode != AttackMode::targeted) {
      throw ConfigError("attack '" + s.name + "': dag needs a target");
    }
    if (s.kind == AttackKind::universal && s.config.mode != AttackMode::targeted) {
      throw ConfigError("attack '" + s.name + "': universal perturbation needs a target");
    }
  }

  // Clean predictions are shared by every target constructor.
  std::vector<SoftmaxField> clean(attack_idx.size());
  parallel_for(attack_idx.size(), [&](std::size_t i) { clean[i] = predict_probs(model, data[attack_idx[i]].image); });

  auto needs = [&](TargetSource t) {
    return std::any_of(suite.begin(), suite.end(), [t](const AttackSpec& s) { return s.config.target == t; });
  };
  LabelMap static_map;
  if (needs(TargetSource::static_mask)) {
    if (options.static_target_index >= train_idx.size()) throw ConfigError("static target index outside the training split");
    static_map = data[train_idx[options.static_target_index]].labels;
  }

  std::vector<std::size_t> universal_idx(train_idx.begin(),
                                         train_idx.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                                 options.universal_train_images, train_idx.size())));

  std::vector<AttackCatalog> out;
  for (const auto& spec : suite) {
    AttackCatalog cat;
    cat.spec = spec;
    cat.examples.resize(attack_idx.size());

    Tensor noise;
    if (spec.kind == AttackKind::universal) {
      std::vector<Tensor> imgs;
      std::vector<LabelMap> targets;
      for (std::size_t idx : universal_idx) {
        const auto& item = data[idx];
        if (spec.config.target == TargetSource::static_mask) {
          targets.push_back(static_target(static_map, item.labels.height(), item.labels.width()));
        } else if (spec.config.target == TargetSource::delete_class) {
          const LabelMap pred = predict_labels(predict_probs(model, item.image));
          if (std::all_of(pred.ids().begin(), pred.ids().end(), [&](int v) { return v == options.delete_class; })) continue;
          targets.push_back(dnnm_target(pred, options.delete_class));
        } else {
          targets.push_back(least_likely_target(predict_probs(model, item.image)));
        }
        imgs.push_back(item.image);
      }
      noise = universal_perturbation(model, imgs, targets, spec.config, options.universal);
    }

    parallel_for(attack_idx.size(), [&](std::size_t i) {
      const auto& item = data[attack_idx[i]];
      const LabelMap& truth = item.labels;
      LabelMap labels;
      switch (spec.config.target) {
        case TargetSource::none:
          labels = options.use_prediction_as_label ? predict_labels(clean[i]) : truth;
          break;
        case TargetSource::least_likely:
          labels = least_likely_target(clean[i]);
          break;
        case TargetSource::static_mask:
          labels = static_target(static_map, truth.height(), truth.width());
          break;
        case TargetSource::delete_class:
          labels = dnnm_target(predict_labels(clean[i]), options.delete_class);
          break;
      }
      AdversarialExample ex;
      switch (spec.kind) {
        case AttackKind::fgsm:
          ex = spec.config.mode == AttackMode::targeted ? fgsm_targeted(model, item.image, labels, spec.config)
                                                        : fgsm(model, item.image, labels, spec.config);
          break;
        case AttackKind::ifgsm: ex = ifgsm(model, item.image, labels, spec.config); break;
        case AttackKind::pgd: ex = pgd(model, item.image, labels, spec.config); break;
        case AttackKind::dag: ex = dag_attack(model, item.image, labels, spec.config); break;
        case AttackKind::universal: {
          Tensor adv = apply_universal(item.image, noise);
          ex = finish(std::move(adv), item.image, "universal");
          break;
        }
      }
      ex.attack = spec.name;
      ex.source_index = attack_idx[i];
      cat.examples[i] = std::move(ex);
    });
    out.push_back(std::move(cat));
  }
  return out;
}

json to_json(const AttackSpec& s) {
  json j{{"name", s.name},
         {"kind", kind_name(s.kind)},
         {"epsilon", s.config.epsilon},
         {"alpha", s.config.alpha},
         {"mode", s.config.mode == AttackMode::targeted ? "targeted" : "untargeted"},
         {"target", target_name(s.config.target)}};
  j["iterations"] = s.config.iterations ? json(*s.config.iterations) : json(nullptr);
  return j;
}

AttackSpec attack_spec_from_json(const json& j) {
  AttackSpec s;
  try {
    s.name = j.at("name").get<std::string>();
    s.kind = kind_from_name(j.at("kind").get<std::string>());
    s.config.epsilon = j.at("epsilon").get<double>();
    s.config.alpha = j.value("alpha", 1.0);
    const std::string mode = j.value("mode", "untargeted");
    if (mode != "targeted" && mode != "untargeted") throw ConfigError("attack mode must be targeted or untargeted");
    s.config.mode = mode == "targeted" ? AttackMode::targeted : AttackMode::untargeted;
    s.config.target = target_from_name(j.value("target", "none"));
    if (j.contains("iterations") && !j["iterations"].is_null()) s.config.iterations = j["iterations"].get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed attack spec: ") + e.what());
  }
  return s;
}

json to_json(const SuiteOptions& o) {
  return json{{"static_target_index", o.static_target_index},
              {"delete_class", o.delete_class},
              {"use_prediction_as_label", o.use_prediction_as_label},
              {"universal_train_images", o.universal_train_images},
              {"universal_epochs", o.universal.epochs},
              {"universal_batch_size", o.universal.batch_size}};
}

SuiteOptions suite_options_from_json(const json& j) {
  SuiteOptions o;
  o.static_target_index = j.value("static_target_index", o.static_target_index);
  o.delete_class = j.value("delete_class", o.delete_class);
  o.use_prediction_as_label = j.value("use_prediction_as_label", o.use_prediction_as_label);
  o.universal_train_images = j.value("universal_train_images", o.universal_train_images);
  o.universal.epochs = j.value("universal_epochs", o.universal.epochs);
  o.universal.batch_size = j.value("universal_batch_size", o.universal.batch_size);
  return o;
}

void save_catalog(const std::filesystem::path& dir, const AttackCatalog& catalog, const Dataset& source) {
  Dataset images;
  json indices = json::array(), linf = json::array();
  for (const auto& ex : catalog.examples) {
    LabeledImage item;
    item.image = ex.image;
    item.labels = source.at(ex.source_index).labels;
    images.push_back(std::move(item));
    indices.push_back(ex.source_index);
    linf.push_back(ex.linf);
  }
  save_dataset(dir, images);
  json prov{{"attack", to_json(catalog.spec)}, {"source_indices", indices}, {"linf", linf}};
  write_text_file(dir / "provenance.json", prov.dump(1) + "\n");
}

AttackCatalog load_catalog(const std::filesystem::path& dir, Dataset* images_out) {
  Dataset images = load_dataset(dir);
  json prov;
  try {
    prov = json::parse(read_text_file(dir / "provenance.json"));
  } catch (const json::exception& e) {
    throw FormatError("corrupt provenance in " + dir.string() + ": " + e.what());
  }
  AttackCatalog cat;
  cat.spec = attack_spec_from_json(prov.at("attack"));
  const auto indices = prov.at("source_indices").get<std::vector<std::size_t>>();
  const auto linf = prov.at("linf").get<std::vector<double>>();
  if (indices.size() != images.size() || linf.size() != images.size()) {
    throw FormatError("provenance does not match catalog size in " + dir.string());
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    AdversarialExample ex;
    ex.image = images[i].image;
    ex.source_index = indices[i];
    ex.attack = cat.spec.name;
    ex.linf = linf[i];
    cat.examples.push_back(std::move(ex));
  }
  if (images_out) *images_out = std::move(images);
  return cat;
}

}  // namespace advseg
