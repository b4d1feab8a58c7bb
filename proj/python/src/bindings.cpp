#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "advseg/attacks.hpp"
#include "advseg/datagen.hpp"
#include "advseg/detectors.hpp"
#include "advseg/errors.hpp"
#include "advseg/harness.hpp"
#include "advseg/metrics.hpp"
#include "advseg/segnet.hpp"
#include "advseg/uncertainty.hpp"

namespace py = pybind11;
using namespace advseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<int, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out(t.shape());
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

LabelMap to_labels(const I32& a) {
  if (a.ndim() != 2) throw ShapeError("label map must be 2-D");
  return LabelMap(a.shape(0), a.shape(1), std::vector<int>(a.data(), a.data() + a.size()));
}

py::array_t<int> to_array(const LabelMap& l) {
  py::array_t<int> out({l.height(), l.width()});
  std::copy(l.ids().begin(), l.ids().end(), out.mutable_data());
  return out;
}

std::vector<UncertaintyFeatures> to_features(const F64& rows) {
  if (rows.ndim() != 2) throw ShapeError("feature matrix must be 2-D");
  std::vector<UncertaintyFeatures> out;
  for (py::ssize_t i = 0; i < rows.shape(0); ++i) {
    const double* r = rows.data(i, 0);
    out.push_back(UncertaintyFeatures::from_vector(std::vector<double>(r, r + rows.shape(1))));
  }
  return out;
}

std::vector<ScoredSample> to_samples(const std::vector<double>& d, const std::vector<bool>& perturbed) {
  if (d.size() != perturbed.size()) throw ShapeError("scores and labels differ in length");
  std::vector<ScoredSample> out;
  for (std::size_t i = 0; i < d.size(); ++i) out.push_back({d[i], perturbed[i] ? Truth::perturbed : Truth::benign});
  return out;
}

AttackConfig attack_config(double epsilon, double alpha, std::optional<int> iterations, bool targeted) {
  AttackConfig c;
  c.epsilon = epsilon;
  c.alpha = alpha;
  c.iterations = iterations;
  c.mode = targeted ? AttackMode::targeted : AttackMode::untargeted;
  c.target = targeted ? TargetSource::static_mask : TargetSource::none;
  return c;
}

}  // namespace

PYBIND11_MODULE(_advseg, m) {
  m.doc() = "Adversarial attacks on a toy segmentation network and uncertainty-based detectors";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<PathError>(m, "PathError", PyExc_OSError);

  m.def(
      "generate_dataset",
      [](std::size_t count, std::size_t height, std::size_t width, std::size_t num_classes, std::uint64_t seed) {
        SceneConfig c;
        c.height = height;
        c.width = width;
        c.num_classes = num_classes;
        c.seed = seed;
        py::list out;
        for (const auto& item : generate_dataset(c, count)) out.append(py::make_tuple(to_array(item.image), to_array(item.labels)));
        return out;
      },
      py::arg("count"), py::arg("height") = 64, py::arg("width") = 64, py::arg("num_classes") = 5, py::arg("seed") = 7,
      "List of (image H x W x 3, labels H x W) pairs.");

  py::class_<SegModel>(m, "SegModel")
      .def_static("create", &SegModel::create, py::arg("in_channels"), py::arg("num_classes"), py::arg("seed"),
                  py::arg("hidden") = std::vector<std::size_t>{16, 32, 32})
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const SegModel& s, const std::filesystem::path& p) { save_checkpoint(p, s); })
      .def_property_readonly("num_classes", &SegModel::num_classes)
      .def_property_readonly("architecture", &SegModel::architecture)
      .def("predict_probs", [](const SegModel& s, const F64& image) { return to_array(predict_probs(s, to_tensor(image)).tensor()); })
      .def("predict_labels",
           [](const SegModel& s, const F64& image) { return to_array(predict_labels(predict_probs(s, to_tensor(image)))); })
      .def(
          "loss_and_gradient",
          [](const SegModel& s, const F64& image, const I32& labels) {
            const auto lg = loss_and_input_gradient(s, to_tensor(image), to_labels(labels));
            return py::make_tuple(lg.loss, to_array(lg.grad));
          },
          "Pixel-mean cross entropy and its gradient with respect to the image.");

  m.def(
      "fgsm",
      [](const SegModel& s, const F64& image, const I32& labels, double epsilon, bool targeted) {
        const AttackConfig c = attack_config(epsilon, 1.0, std::nullopt, targeted);
        const auto x = to_tensor(image);
        const auto l = to_labels(labels);
        return to_array((targeted ? fgsm_targeted(s, x, l, c) : fgsm(s, x, l, c)).image);
      },
      py::arg("model"), py::arg("image"), py::arg("labels"), py::arg("epsilon"), py::arg("targeted") = false,
      "Budgets are in 1/255 units. `labels` is the target map when targeted.");
  m.def(
      "ifgsm",
      [](const SegModel& s, const F64& image, const I32& labels, double epsilon, double alpha, std::optional<int> iterations,
         bool targeted) {
        return to_array(ifgsm(s, to_tensor(image), to_labels(labels), attack_config(epsilon, alpha, iterations, targeted)).image);
      },
      py::arg("model"), py::arg("image"), py::arg("labels"), py::arg("epsilon"), py::arg("alpha") = 1.0,
      py::arg("iterations") = py::none(), py::arg("targeted") = false);
  m.def(
      "pgd",
      [](const SegModel& s, const F64& image, const I32& labels, double epsilon, double alpha, std::optional<int> iterations,
         bool targeted) {
        return to_array(pgd(s, to_tensor(image), to_labels(labels), attack_config(epsilon, alpha, iterations, targeted)).image);
      },
      py::arg("model"), py::arg("image"), py::arg("labels"), py::arg("epsilon"), py::arg("alpha") = 1.0,
      py::arg("iterations") = py::none(), py::arg("targeted") = false);
  m.def(
      "dag",
      [](const SegModel& s, const F64& image, const I32& target, double epsilon, double alpha) {
        return to_array(dag_attack(s, to_tensor(image), to_labels(target), attack_config(epsilon, alpha, std::nullopt, true)).image);
      },
      py::arg("model"), py::arg("image"), py::arg("target"), py::arg("epsilon"), py::arg("alpha") = 1.0);
  m.def("least_likely_target", [](const F64& probs) { return to_array(least_likely_target(SoftmaxField(to_tensor(probs)))); });
  m.def("default_iterations", &default_iterations, py::arg("epsilon"));

  m.def("entropy_heatmap", [](const F64& probs) { return to_array(entropy_heatmap(SoftmaxField(to_tensor(probs))).values); });
  m.def("variation_ratio_heatmap",
        [](const F64& probs) { return to_array(variation_ratio_heatmap(SoftmaxField(to_tensor(probs))).values); });
  m.def("probability_margin_heatmap",
        [](const F64& probs) { return to_array(probability_margin_heatmap(SoftmaxField(to_tensor(probs))).values); });
  m.def(
      "aggregate_features",
      [](const F64& probs) { return aggregate_features(SoftmaxField(to_tensor(probs))).as_vector(); },
      "[E, V, M, p_0, ..., p_{|C|-1}] for one softmax field.");

  m.def(
      "apsr", [](const I32& pred, const I32& labels) { return apsr(to_labels(pred), to_labels(labels)); },
      "Share of pixels whose prediction differs from the label.");
  m.def(
      "auroc", [](const std::vector<double>& d, const std::vector<bool>& p) { return auroc(to_samples(d, p)); },
      py::arg("scores"), py::arg("perturbed"));
  m.def(
      "ada_star", [](const std::vector<double>& d, const std::vector<bool>& p) { return ada_star(to_samples(d, p)); },
      py::arg("scores"), py::arg("perturbed"));
  m.def(
      "tpr_at_fpr",
      [](const std::vector<double>& d, const std::vector<bool>& p, double cap) { return tpr_at_fpr(to_samples(d, p), cap); },
      py::arg("scores"), py::arg("perturbed"), py::arg("fpr_cap") = 0.05);

  py::class_<DetectorModel>(m, "Detector")
      .def_static("load", &DetectorModel::load, py::arg("path"))
      .def("save", &DetectorModel::save, py::arg("path"))
      .def_property_readonly("variant", [](const DetectorModel& d) { return to_string(d.variant()); })
      .def("score",
           [](const DetectorModel& d, const F64& x) {
             if (d.consumes_heatmaps()) {
               if (x.ndim() != 2) throw ShapeError("heatmap must be 2-D");
               return std::vector<double>{d.score(Heatmap{HeatmapKind::entropy, to_tensor(x)})};
             }
             std::vector<double> out;
             if (x.ndim() == 1) {
               out.push_back(d.score(UncertaintyFeatures::from_vector(std::vector<double>(x.data(), x.data() + x.size()))));
             } else {
               for (const auto& f : to_features(x)) out.push_back(d.score(f));
             }
             return out;
           },
           "d in [0, 1] (probability of being benign) for a feature row, a feature matrix or a heatmap.");

  m.def("fit_entropy", [](const F64& benign) { return fit_entropy(to_features(benign)); });
  m.def(
      "fit_ocsvm",
      [](const F64& benign, double nu) {
        OcsvmOptions o;
        o.nu = nu;
        return fit_ocsvm(to_features(benign), o);
      },
      py::arg("benign"), py::arg("nu") = 0.1);
  m.def("fit_ellipse", [](const F64& benign) { return fit_ellipse(to_features(benign)); });
  m.def(
      "fit_crossa",
      [](const F64& benign, const F64& adversarial, double lambda) {
        CrossaOptions o;
        o.lambda = lambda;
        return fit_crossa(to_features(benign), to_features(adversarial), o);
      },
      py::arg("benign"), py::arg("adversarial"), py::arg("lam") = 0.01);

  m.def(
      "run_stage",
      [](const std::string& stage, const std::filesystem::path& config, const std::filesystem::path& out, bool force) {
        const ExperimentConfig c = load_experiment_config(config);
        const ExperimentLayout l{out};
        const StageOptions o{force, true};
        py::gil_scoped_release release;
        if (stage == "generate") cmd_generate(c, l, o);
        else if (stage == "train") cmd_train(c, l, o);
        else if (stage == "attack") cmd_attack(c, l, o);
        else if (stage == "detect") cmd_detect(c, l, o);
        else if (stage == "report") cmd_report(c, l, o);
        else throw ConfigError("unknown stage '" + stage + "'");
      },
      py::arg("stage"), py::arg("config"), py::arg("out"), py::arg("force") = false);
}
