#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "dnd/attacks.hpp"
#include "dnd/checkpoint.hpp"
#include "dnd/errors.hpp"
#include "dnd/harness.hpp"
#include "dnd/metrics.hpp"

namespace py = pybind11;
using namespace dnd;

namespace {

using ImageArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

/// (N, h, w) or (N, 1, h, w) to single-channel tensors.
std::vector<Tensor> to_tensors(const ImageArray& a) {
  std::size_t h = 0, w = 0;
  if (a.ndim() == 3) {
    h = static_cast<std::size_t>(a.shape(1));
    w = static_cast<std::size_t>(a.shape(2));
  } else if (a.ndim() == 4 && a.shape(1) == 1) {
    h = static_cast<std::size_t>(a.shape(2));
    w = static_cast<std::size_t>(a.shape(3));
  } else {
    throw DimensionError("images must have shape (N, h, w) or (N, 1, h, w)");
  }
  const std::size_t n = static_cast<std::size_t>(a.shape(0));
  const double* p = a.data();
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i, p += h * w) out.emplace_back(Shape{1, h, w}, std::vector<double>(p, p + h * w));
  return out;
}

py::array_t<double> to_array(std::span<const Tensor> xs) {
  if (xs.empty()) return py::array_t<double>(std::vector<py::ssize_t>{0, 1, 0, 0});
  const Shape& s = xs.front().shape;
  py::array_t<double> out({static_cast<py::ssize_t>(xs.size()), static_cast<py::ssize_t>(s[0]),
                           static_cast<py::ssize_t>(s[1]), static_cast<py::ssize_t>(s[2])});
  double* p = out.mutable_data();
  for (const Tensor& x : xs) {
    std::memcpy(p, x.data.data(), x.numel() * sizeof(double));
    p += x.numel();
  }
  return out;
}

py::array_t<int> to_array(const std::vector<int>& v) {
  py::array_t<int> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::tuple dataset_tuple(const Dataset& ds) { return py::make_tuple(to_array(ds.images), to_array(ds.labels)); }

Dataset make_dataset(const ImageArray& images, const std::vector<int>& labels) {
  Dataset ds;
  ds.images = to_tensors(images);
  ds.labels = labels;
  ds.validate();
  return ds;
}

Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ValidationError(e.what());
  }
}

struct PyReport {
  std::string summary;
  std::string samples;
};

PyReport wrap(const Report& r) { return {r.summary.dump(), r.samples.dump()}; }

/// Gateway state loaded from a gateway.json, served in process.
class PyGateway {
 public:
  PyGateway(const std::filesystem::path& config_path, std::optional<std::uint64_t> root_seed) {
    GatewayConfig cfg = GatewayConfig::from_json(parse_json(read_file(config_path)), config_path.parent_path());
    if (root_seed) cfg.root_seed = *root_seed;
    cfg.validate();
    GatewayModels models = load_gateway_models(cfg);
    state_ = std::make_unique<GatewayState>(std::move(models), std::move(cfg), [] { return 0.0; });
  }
  std::string handle_line(const std::string& line) { return state_->handle_line(line); }
  std::vector<std::string> audit() const {
    std::vector<std::string> out;
    for (const Json& e : state_->audit_entries()) out.push_back(e.dump());
    return out;
  }
  std::size_t handled_count() const { return state_->handled_count(); }

 private:
  std::unique_ptr<GatewayState> state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the dnd package";
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<StageError>(m, "StageError", PyExc_RuntimeError);
  py::register_exception<SearchFailure>(m, "SearchFailure", PyExc_RuntimeError);

  m.def("derive_seed", [](std::uint64_t root, const std::string& label) { return derive_seed(root, label); },
        py::arg("root"), py::arg("label"));

  m.def("glyph_templates", [] {
    const auto& t = glyph_templates();
    return to_array(std::span<const Tensor>(t.data(), t.size()));
  });
  m.def(
      "gen_dataset",
      [](std::size_t count, std::uint64_t seed, const std::string& split, double noise_p, int shift, bool jitter) {
        if (split != "train" && split != "test") throw ValidationError("split must be 'train' or 'test'");
        const DataConfig cfg{.n_train = count, .n_test = count, .noise_p = noise_p, .shift = shift, .jitter = jitter};
        return dataset_tuple(gen_synthetic_dataset(cfg, count, split == "train" ? Split::train : Split::test, seed));
      },
      py::arg("count"), py::arg("seed"), py::arg("split") = "train", py::arg("noise_p") = 0.05, py::arg("shift") = 2,
      py::arg("jitter") = true);
  m.def(
      "save_dataset",
      [](const ImageArray& images, const std::vector<int>& labels, const std::filesystem::path& path) {
        save_dataset(make_dataset(images, labels), path);
      },
      py::arg("images"), py::arg("labels"), py::arg("path"));
  m.def("load_dataset", [](const std::filesystem::path& path) { return dataset_tuple(load_dataset(path)); },
        py::arg("path"));

  m.def("default_config", [] { return ExperimentConfig{}.to_json().dump(); });
  m.def("normalize_config", [](const std::string& text) { return ExperimentConfig::from_json(parse_json(text)).to_json().dump(); },
        py::arg("config"));
  m.def("config_hash", [](const std::string& text) { return ExperimentConfig::from_json(parse_json(text)).hash(); },
        py::arg("config"));

  py::class_<PyReport>(m, "RawReport")
      .def_readonly("summary", &PyReport::summary)
      .def_readonly("samples", &PyReport::samples);
  m.def(
      "run_experiment",
      [](const std::string& text) {
        const ExperimentConfig cfg = ExperimentConfig::from_json(parse_json(text));
        py::gil_scoped_release release;
        return wrap(run_experiment(cfg));
      },
      py::arg("config"));
  m.def(
      "write_report",
      [](const std::string& summary, const std::string& samples, const std::filesystem::path& dir) {
        write_report(Report{parse_json(summary), parse_json(samples), {}}, dir);
      },
      py::arg("summary"), py::arg("samples"), py::arg("dir"));
  m.def("load_report", [](const std::filesystem::path& dir) { return wrap(load_report(dir)); }, py::arg("dir"));
  m.def(
      "recount_rates", [](const std::string& samples) { return recount_rates(parse_json(samples)); },
      py::arg("samples"));
  m.def(
      "train_system",
      [](const std::string& text, const std::filesystem::path& dir) {
        const ExperimentConfig cfg = ExperimentConfig::from_json(parse_json(text));
        py::gil_scoped_release release;
        save_system(train_system(cfg), cfg, dir);
      },
      py::arg("config"), py::arg("dir"));

  py::class_<Classifier>(m, "Classifier")
      .def_static("load", [](const std::filesystem::path& p) { return load_classifier(p); }, py::arg("path"))
      .def_property_readonly("spec", [](const Classifier& c) { return c.spec().canonical(); })
      .def("save", [](const Classifier& c, const std::filesystem::path& p) { save_classifier(p, c); }, py::arg("path"))
      .def(
          "predict", [](const Classifier& c, const ImageArray& xs) { return to_array(predict_labels(c, to_tensors(xs))); },
          py::arg("images"))
      .def(
          "probabilities",
          [](const Classifier& c, const ImageArray& xs) {
            const Tensor p = classify_batch(c, to_tensors(xs));
            py::array_t<double> out({static_cast<py::ssize_t>(p.shape[0]), static_cast<py::ssize_t>(p.shape[1])});
            std::copy(p.data.begin(), p.data.end(), out.mutable_data());
            return out;
          },
          py::arg("images"))
      .def(
          "fgsm",
          [](const Classifier& c, const ImageArray& xs, const std::vector<int>& labels, double epsilon) {
            return to_array(fgsm_batch(c, to_tensors(xs), labels, epsilon));
          },
          py::arg("images"), py::arg("labels"), py::arg("epsilon"))
      .def(
          "iterative_fgsm",
          [](const Classifier& c, const ImageArray& xs, const std::vector<int>& labels, double epsilon, double alpha,
             std::size_t steps) {
            AttackConfig cfg;
            cfg.epsilon = epsilon;
            cfg.alpha = alpha;
            cfg.steps = steps;
            cfg.validate();
            return to_array(iterative_fgsm_batch(c, to_tensors(xs), labels, cfg));
          },
          py::arg("images"), py::arg("labels"), py::arg("epsilon"), py::arg("alpha") = 0.03, py::arg("steps") = 10);

  m.def(
      "quantize",
      [](const ImageArray& xs, int bits) {
        std::vector<Tensor> ts = to_tensors(xs);
        for (Tensor& t : ts) t = quantize_input(t, bits);
        return to_array(ts);
      },
      py::arg("images"), py::arg("bits"));
  m.def(
      "selection_counts",
      [](std::size_t n, std::size_t draws, std::uint64_t seed) {
        if (n < 1) throw ValidationError("n must be >= 1");
        std::vector<Classifier> models(n, build_classifier(ArchitectureSpec{}, 0));
        const EnsembleRegistry reg(std::move(models), seed);
        Rng rng(seed);
        std::vector<std::size_t> counts(n, 0);
        for (std::size_t i = 0; i < draws; ++i) ++counts[select_random_model(reg, rng)];
        return counts;
      },
      py::arg("n"), py::arg("draws"), py::arg("seed"));
  m.def(
      "roc_auc", [](const std::vector<double>& s, const std::vector<int>& l) { return roc_auc(s, l); },
      py::arg("scores"), py::arg("labels"));

  py::class_<PyGateway>(m, "Gateway")
      .def(py::init<const std::filesystem::path&, std::optional<std::uint64_t>>(), py::arg("config_path"),
           py::arg("root_seed") = py::none())
      .def("handle_line", &PyGateway::handle_line, py::arg("line"))
      .def("audit", &PyGateway::audit)
      .def_property_readonly("handled_count", &PyGateway::handled_count);
}
