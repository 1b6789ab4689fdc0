#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>

#include "deepcaps/checkpoint.hpp"
#include "deepcaps/config.hpp"
#include "deepcaps/harness.hpp"
#include "deepcaps/losses.hpp"
#include "deepcaps/routing.hpp"
#include "deepcaps/squash.hpp"

namespace py = pybind11;
using namespace deepcaps;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  std::vector<std::size_t> dims(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(Shape(dims), std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  const std::vector<std::size_t> dims(t.shape().dims().begin(), t.shape().dims().end());
  Array<T> out(dims);
  std::copy(t.ptr(), t.ptr() + t.numel(), out.mutable_data());
  return out;
}

Dataset to_dataset(const Array<float>& images, const std::vector<int>& labels, std::size_t classes) {
  if (images.ndim() != 4) throw ShapeError("images must be [N, H, W, C]");
  if (static_cast<std::size_t>(images.shape(0)) != labels.size()) throw ShapeError("one label per image");
  Dataset d;
  d.name = "array";
  d.split = "test";
  d.classes = classes;
  d.height = images.shape(1);
  d.width = images.shape(2);
  d.channels = images.shape(3);
  d.pixels.assign(images.data(), images.data() + images.size());
  d.labels = labels;
  return d;
}

py::tuple dataset_arrays(const Dataset& d) {
  Array<float> images(std::vector<std::size_t>{d.size(), d.height, d.width, d.channels});
  std::copy(d.pixels.begin(), d.pixels.end(), images.mutable_data());
  Array<int> labels(std::vector<std::size_t>{d.size()});
  std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
  return py::make_tuple(images, labels);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DeepCaps capsule network engine";

  static PyObject* base = PyErr_NewException("deepcaps._core.Error", PyExc_RuntimeError, nullptr);
  static std::map<std::string, PyObject*> kinds;
  m.attr("Error") = py::handle(base);
  for (const char* kind :
       {"ShapeError", "ConfigError", "IoError", "FormatError", "TruncatedError", "CountMismatchError",
        "CheckpointHeaderError", "CheckpointVersionError", "CheckpointTruncatedError", "ArchitectureMismatchError",
        "NonFiniteLossError", "GradientError", "ValueError"}) {
    const std::string name = std::string(kind) == "ValueError" ? "InvalidValueError" : kind;
    PyObject* type = PyErr_NewException(("deepcaps._core." + name).c_str(), base, nullptr);
    m.attr(name.c_str()) = py::handle(type);
    kinds[kind] = type;
  }
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      const auto it = kinds.find(e.kind());
      PyErr_SetString(it != kinds.end() ? it->second : base, e.what());
    }
  });

  m.attr("SQUASH_EPSILON") = kSquashEpsilon;

  m.def(
      "squash", [](const Array<double>& s) { return to_array(squash_values(to_tensor(s))); }, py::arg("s"),
      "Squash every vector along the last axis.");

  m.def(
      "route",
      [](const Array<double>& votes, int iterations, const std::string& axis) {
        RoutingState<double> state;
        const Tensor<double> v =
            route(DTensor<double>(to_tensor(votes)), RoutingOptions{iterations, parse_softmax_axis(axis)}, &state)
                .value();
        return py::make_tuple(to_array(v), to_array(state.couplings));
      },
      py::arg("votes"), py::arg("iterations") = 3, py::arg("softmax_axis") = "parents",
      "Routing by agreement on votes [B, K, M, D]. Returns (parents [B, M, D], couplings [B, K, M]).");

  m.def(
      "margin_loss",
      [](const Array<double>& norms, const std::vector<int>& labels, double m_plus, double m_minus,
         double lambda_down) {
        MarginParams p;
        p.m_plus = m_plus;
        p.m_minus = m_minus;
        p.lambda_down = lambda_down;
        p.validate();
        const Tensor<double> n = to_tensor(norms);
        if (n.shape().rank() != 2) throw ShapeError("norms must be [N, C]");
        return margin_loss(DTensor<double>(n), one_hot<double>(labels, n.dim(1)), p).value()[0];
      },
      py::arg("norms"), py::arg("labels"), py::arg("m_plus") = 0.9, py::arg("m_minus") = 0.1,
      py::arg("lambda_down") = 0.5, "Batch-mean margin loss.");

  m.def(
      "run_config_json", [](const std::filesystem::path& path) { return run_config_to_json(load_run_config(path)).dump(); },
      py::arg("path"), "Run configuration with defaults filled in, as JSON text.");

  m.def(
      "load_mnist",
      [](const std::filesystem::path& dir, bool train, std::size_t limit) {
        return dataset_arrays(load_mnist_dir(dir, train).head(limit));
      },
      py::arg("dir"), py::arg("train") = false, py::arg("limit") = 0,
      "IDX MNIST split as (images [N, 28, 28, 1] float32 in [0, 1], labels int32).");

  py::class_<Model<float>, std::unique_ptr<Model<float>>>(m, "Model")
      .def(py::init([](const std::string& architecture_json, std::uint64_t seed) {
             return std::make_unique<Model<float>>(architecture_from_json(Json::parse(architecture_json)), seed);
           }),
           py::arg("architecture_json"), py::arg("seed") = 1)
      .def_static(
          "load", [](const std::filesystem::path& path) { return model_from_checkpoint(read_checkpoint(path)); },
          py::arg("path"))
      .def("save",
           [](const Model<float>& model, const std::filesystem::path& path) {
             write_checkpoint(path, snapshot(model, 0, 0, "", Json::object()));
           })
      .def_property_readonly("parameter_count", &Model<float>::parameter_count)
      .def_property_readonly("architecture_json",
                             [](const Model<float>& model) { return architecture_to_json(model.spec()).dump(); })
      .def("layer_table",
           [](const Model<float>& model) {
             py::list rows;
             for (const LayerInfo& l : model.layer_table()) rows.append(py::make_tuple(l.name, l.output, l.params));
             return rows;
           })
      .def(
          "forward",
          [](Model<float>& model, const Array<float>& images) {
            auto out = model.forward(DTensor<float>(to_tensor(images)), Mode::Infer);
            return py::make_tuple(to_array(out.class_caps.value()), to_array(out.norms.value()));
          },
          py::arg("images"), "Inference pass. Returns (class capsules [N, C, d], norms [N, C]).")
      .def(
          "reconstruct",
          [](Model<float>& model, const Array<float>& class_caps) {
            return to_array(model.reconstruct(DTensor<float>(to_tensor(class_caps)), nullptr).value());
          },
          py::arg("class_caps"), "Decode the largest-norm capsule of each sample.")
      .def(
          "evaluate",
          [](Model<float>& model, const Array<float>& images, const std::vector<int>& labels,
             std::size_t batch_size) {
            const EvalResult r = evaluate(model, to_dataset(images, labels, model.spec().classes), batch_size);
            py::dict out;
            out["accuracy"] = r.accuracy;
            out["correct"] = r.correct;
            out["total"] = r.total;
            out["confusion"] = r.confusion;
            out["predictions"] = r.predictions;
            return out;
          },
          py::arg("images"), py::arg("labels"), py::arg("batch_size") = 128);
}
