// Python bindings for the contseg core: dataset synthesis, the segmentation
// model, the Dice objectives, and the continual-learning regimes.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "contseg/archive.hpp"
#include "contseg/autodiff.hpp"
#include "contseg/continual.hpp"
#include "contseg/errors.hpp"
#include "contseg/experiment.hpp"
#include "contseg/model.hpp"
#include "contseg/objectives.hpp"
#include "contseg/synth.hpp"

namespace py = pybind11;
using namespace contseg;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& array) {
  Shape shape;
  for (py::ssize_t d = 0; d < array.ndim(); ++d) {
    shape.push_back(static_cast<std::int64_t>(array.shape(d)));
  }
  std::vector<double> values(array.data(), array.data() + array.size());
  return Tensor::from_values(std::move(shape), std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& tensor) {
  std::vector<py::ssize_t> shape;
  for (const auto extent : tensor.shape()) {
    shape.push_back(static_cast<py::ssize_t>(extent));
  }
  py::array_t<double> array(shape);
  std::copy(tensor.values().begin(), tensor.values().end(),
            array.mutable_data());
  return array;
}

py::array_t<double> matrix_to_array(const ResultMatrix& matrix) {
  const py::ssize_t k = matrix.k();
  py::array_t<double> array({k, k});
  auto view = array.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < k; ++i) {
    for (py::ssize_t j = 0; j < k; ++j) {
      view(i, j) = matrix.r[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  return array;
}

ResultMatrix matrix_from_array(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& array,
    std::vector<std::string> order) {
  if (array.ndim() != 2 || array.shape(0) != array.shape(1)) {
    throw ContractError("result matrix must be square");
  }
  const auto k = array.shape(0);
  ResultMatrix matrix;
  if (order.empty()) {
    for (py::ssize_t i = 0; i < k; ++i) matrix.domain_order.push_back("d" + std::to_string(i));
  } else {
    if (static_cast<py::ssize_t>(order.size()) != k) {
      throw ContractError("domain order length must match the matrix");
    }
    matrix.domain_order = std::move(order);
  }
  auto view = array.unchecked<2>();
  for (py::ssize_t i = 0; i < k; ++i) {
    std::vector<double> row;
    for (py::ssize_t j = 0; j < k; ++j) row.push_back(view(i, j));
    matrix.r.push_back(std::move(row));
  }
  return matrix;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Continual-learning laboratory for synthetic multi-center "
            "soft-label segmentation";

  py::register_exception<Error>(m, "ContsegError", PyExc_RuntimeError);

  py::enum_<Polarity>(m, "Polarity")
      .value("LESION_BRIGHT", Polarity::LesionBright)
      .value("LESION_DARK", Polarity::LesionDark);

  py::enum_<Regime>(m, "Regime")
      .value("SINGLE_DOMAIN", Regime::SingleDomain)
      .value("MULTI_DOMAIN", Regime::MultiDomain)
      .value("FINE_TUNE", Regime::FineTune)
      .value("REPLAY", Regime::Replay);

  py::enum_<Mixing>(m, "Mixing")
      .value("MERGED", Mixing::Merged)
      .value("BALANCED", Mixing::Balanced);

  py::class_<DomainSpec>(m, "DomainSpec")
      .def(py::init<>())
      .def_readwrite("name", &DomainSpec::name)
      .def_readwrite("n_subjects", &DomainSpec::n_subjects)
      .def_readwrite("polarity", &DomainSpec::polarity)
      .def_readwrite("lesion_count_min", &DomainSpec::lesion_count_min)
      .def_readwrite("lesion_count_max", &DomainSpec::lesion_count_max)
      .def_readwrite("lesion_radius_min", &DomainSpec::lesion_radius_min)
      .def_readwrite("lesion_radius_max", &DomainSpec::lesion_radius_max)
      .def_readwrite("noise_sigma", &DomainSpec::noise_sigma)
      .def_readwrite("bias_field_strength", &DomainSpec::bias_field_strength)
      .def_readwrite("volume_shape", &DomainSpec::volume_shape)
      .def_readwrite("seed", &DomainSpec::seed);

  py::class_<Sample>(m, "Sample")
      .def_property_readonly("image", [](const Sample& s) { return array_from_tensor(s.image); })
      .def_property_readonly("label", [](const Sample& s) { return array_from_tensor(s.label); })
      .def_readonly("subject_id", &Sample::subject_id);

  py::class_<Domain>(m, "Domain")
      .def_readonly("spec", &Domain::spec)
      .def_readonly("train", &Domain::train)
      .def_readonly("test", &Domain::test);

  m.def("generate_domain", &generate_domain, py::arg("spec"),
        "Deterministically synthesize one center's dataset with an 80/20 split");
  m.def("default_cohort", &default_cohort, py::arg("base_seed") = 0,
        "The 8-center cohort with subject counts {80,51,47,51,28,13,12,8}");
  m.def("desk_cohort", &desk_cohort, py::arg("base_seed") = 0,
        "A small 4-center cohort with one contrast-flipped center");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("levels", &ModelConfig::levels)
      .def_readwrite("base_features", &ModelConfig::base_features)
      .def_readwrite("spatial_rank", &ModelConfig::spatial_rank)
      .def_readwrite("in_channels", &ModelConfig::in_channels)
      .def_readwrite("residual", &ModelConfig::residual);

  py::class_<Model>(m, "Model")
      .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("predict",
           [](const Model& model, const py::array_t<double, py::array::c_style | py::array::forcecast>& patch) {
             return array_from_tensor(model.predict(tensor_from_array(patch)));
           },
           py::arg("patch"), "Soft mask in [0,1] for a [spatial...] volume")
      .def("save", [](const Model& model, const std::string& path) { model.save(path); },
           py::arg("path"))
      .def_static("load", [](const std::string& path) { return Model::load(path); },
                  py::arg("path"));

  m.def(
      "dice_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& target,
         double epsilon) {
        Graph graph;
        return dice_loss(graph, tensor_from_array(pred), tensor_from_array(target), epsilon).item();
      },
      py::arg("pred"), py::arg("target"), py::arg("epsilon") = 1e-5,
      "Soft Dice loss value (squared-denominator form)");

  m.def(
      "dice_score",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& target,
         double threshold) {
        return dice_score(tensor_from_array(pred), tensor_from_array(target), threshold);
      },
      py::arg("pred"), py::arg("target"), py::arg("threshold") = 0.5,
      "Hard Dice after binarizing both masks at the threshold");

  m.def("lr_schedule", &lr_schedule, py::arg("epoch"), py::arg("base_lr"),
        py::arg("step") = 50, py::arg("gamma") = 0.5);

  m.def(
      "compute_bwt",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& matrix) {
        const BwtResult result = compute_bwt(matrix_from_array(matrix, {}));
        return py::make_tuple(result.average, result.per_domain);
      },
      py::arg("result_matrix"),
      "(average BWT, per-domain BWT list) from a K x K result matrix");

  py::class_<RegimeConfig>(m, "RegimeConfig")
      .def(py::init<>())
      .def_readwrite("regime", &RegimeConfig::regime)
      .def_readwrite("epochs", &RegimeConfig::epochs)
      .def_readwrite("batch_size", &RegimeConfig::batch_size)
      .def_readwrite("lr", &RegimeConfig::lr)
      .def_readwrite("lr_step", &RegimeConfig::lr_step)
      .def_readwrite("lr_gamma", &RegimeConfig::lr_gamma)
      .def_readwrite("weight_decay", &RegimeConfig::weight_decay)
      .def_readwrite("buffer_cap", &RegimeConfig::buffer_cap)
      .def_readwrite("mixing", &RegimeConfig::mixing)
      .def_readwrite("patches_per_image", &RegimeConfig::patches_per_image)
      .def_readwrite("fg_probability", &RegimeConfig::fg_probability)
      .def_readwrite("patch_shape", &RegimeConfig::patch_shape)
      .def_readwrite("eval_threshold", &RegimeConfig::eval_threshold)
      .def_readwrite("encoder_only_transfer", &RegimeConfig::encoder_only_transfer);

  m.def(
      "run_regime",
      [](const std::vector<Domain>& sequence, const ModelConfig& model_config,
         const RegimeConfig& regime_config, std::uint64_t seed) {
        const RunResult result =
            run_regime(sequence, model_config, regime_config, seed);
        py::dict out;
        out["order"] = result.matrix.domain_order;
        out["R"] = matrix_to_array(result.matrix);
        const BwtResult bwt = compute_bwt(result.matrix);
        out["bwt_average"] = bwt.average;
        out["bwt_per_domain"] = bwt.per_domain;
        py::list losses;
        for (const auto& stage : result.stages) losses.append(stage.final_train_loss);
        out["final_train_losses"] = losses;
        return out;
      },
      py::arg("sequence"), py::arg("model_config"), py::arg("regime_config"),
      py::arg("seed"),
      "Train one regime over the ordered domain sequence; returns the R "
      "matrix, BWT, and per-stage losses");
}
