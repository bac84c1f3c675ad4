#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <sstream>

#include "patchpu/errors.hpp"
#include "patchpu/gradsuite.hpp"
#include "patchpu/losses.hpp"
#include "patchpu/negatives.hpp"
#include "patchpu/patches.hpp"
#include "patchpu/train.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace patchpu;
using namespace pybind11::literals;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy_n(t.data(), t.size(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const Array& a) {
  if (a.ndim() != 1) throw ShapeError("expected a 1-d array");
  return {a.data(), a.data() + a.size()};
}

PatchGridConfig grid_of(std::size_t levels, double ratio, std::size_t patch_size, std::size_t stride) {
  PatchGridConfig g;
  g.levels = levels;
  g.ratio = ratio;
  g.patch_height = g.patch_width = patch_size;
  g.stride = stride;
  g.validate();
  return g;
}

py::object parse_json(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict run_log_dict(const RunLog& log) {
  py::list steps, epochs;
  for (const auto& s : log.steps) steps.append(py::dict("step"_a = s.step, "epoch"_a = s.epoch, "loss"_a = s.loss, "lr"_a = s.lr));
  for (const auto& e : log.epochs) {
    epochs.append(py::dict("epoch"_a = e.epoch, "train_loss"_a = e.train_loss,
                           "val_map"_a = e.val_map ? py::cast(*e.val_map) : py::none(),
                           "weak_negative_mass"_a = e.mean_weak_negative_mass, "seconds"_a = e.wall_seconds));
  }
  return py::dict("steps"_a = steps, "epochs"_a = epochs, "checkpoint"_a = log.checkpoint.string());
}

}  // namespace

PYBIND11_MODULE(_patchpu, m) {
  m.doc() = "Patch-based multi-label classification from single positive labels";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<LookupError>(m, "LookupError", PyExc_KeyError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // Losses on one image or a [B, L] batch.
  m.def("ce_loss", [](const Array& zp, const Array& y) { return ce_loss(to_tensor(zp), constant(to_tensor(y))).value().item(); },
        "z_plus"_a, "yhat"_a);
  m.def("bce_loss",
        [](const Array& zp, const Array& zn, const Array& y) {
          return bce_loss(to_tensor(zp), to_tensor(zn), constant(to_tensor(y))).value().item();
        },
        "z_plus"_a, "z_minus"_a, "yhat"_a);
  m.def("an_loss",
        [](const Array& zp, const Array& y, double lambda) {
          return an_loss(to_tensor(zp), constant(to_tensor(y)), lambda).value().item();
        },
        "z_plus"_a, "yhat"_a, "lam"_a = 1.0);
  m.def("epr_loss",
        [](const Array& zp, const Array& y, double k, double lambda) {
          return epr_loss(to_tensor(zp), constant(to_tensor(y)), k, lambda).value().item();
        },
        "z_plus"_a, "yhat"_a, "k"_a, "lambda_epr"_a = 1.0);
  m.def("wn_loss",
        [](const Array& zp, const Array& zt, const Array& y) {
          return wn_loss(to_tensor(zp), constant(to_tensor(zt)), constant(to_tensor(y))).value().item();
        },
        "z_plus"_a, "z_tilde_minus"_a, "yhat"_a);

  m.def("cosine_similarity", [](const Array& u, const Array& v) { return cosine_similarity(to_vector(u), to_vector(v)); });
  m.def("thresholded_relu", &thresholded_relu, "x"_a, "theta"_a);
  m.def(
      "estimate_negatives",
      [](const Array& reps, const Array& zp, double theta) {
        const auto est = estimate_negatives(constant(to_tensor(reps)), to_vector(zp), SimilarityConfig{theta, true});
        return py::make_tuple(to_array(est.weak_negatives.value()), to_array(est.beta));
      },
      "representations"_a, "z_plus"_a, "theta"_a = 0.0, "Returns (z_tilde_minus [L], beta [L, L]).");

  m.def(
      "average_precision",
      [](const Array& s, const Array& t) { return average_precision(to_vector(s), to_vector(t)); }, "scores"_a,
      "truths"_a);
  m.def(
      "mean_average_precision",
      [](const Array& s, const Array& t, const std::vector<std::string>& names) {
        return parse_json(mean_average_precision(to_tensor(s), to_tensor(t), names).to_json());
      },
      "scores"_a, "truths"_a, "label_names"_a = std::vector<std::string>{});

  m.def("expected_patch_count",
        [](std::size_t h, std::size_t w, std::size_t levels, double ratio, std::size_t patch, std::size_t stride) {
          return expected_patch_count(h, w, grid_of(levels, ratio, patch, stride));
        },
        "height"_a, "width"_a, "levels"_a = 3, "ratio"_a = 2.0, "patch_size"_a = 64, "stride"_a = 64);
  m.def(
      "extract_patches",
      [](const Array& image, std::size_t levels, double ratio, std::size_t patch, std::size_t stride) {
        if (image.ndim() != 3) throw ShapeError("image must be [H, W, C]");
        ImageTensor img(image.shape(0), image.shape(1), image.shape(2));
        std::copy_n(image.data(), image.size(), img.pixels.begin());
        const PatchSet set = image_to_patches(img, grid_of(levels, ratio, patch, stride));
        py::list origins;
        for (const auto& o : set.origins) origins.append(py::make_tuple(o.level, o.row, o.col));
        return py::make_tuple(to_array(set.patches), origins);
      },
      "image"_a, "levels"_a = 3, "ratio"_a = 2.0, "patch_size"_a = 64, "stride"_a = 64,
      "Returns (patches [m, h, w, C], [(level, row, col), ...]).");

  m.def(
      "gen_data",
      [](const std::string& config_json, const fs::path& out) {
        const SyntheticConfig cfg = synthetic_config_from_json(nlohmann::json::parse(config_json));
        py::dict manifests;
        for (const char* split : {"train", "val"}) {
          manifests[split] = write_dataset(generate_synthetic(cfg, split), out / split).string();
        }
        return manifests;
      },
      "config_json"_a, "out"_a);
  m.def(
      "train",
      [](const std::string& config_json, const fs::path& base_dir, bool verbose) {
        TrainConfig cfg = train_config_from_json(nlohmann::json::parse(config_json));
        for (fs::path* p : {&cfg.train_manifest, &cfg.val_manifest, &cfg.output_dir})
          if (!p->empty() && p->is_relative()) *p = base_dir / *p;
        cfg.verbose = verbose;
        std::ostringstream table;
        std::optional<TrainResult> result;
        {
          py::gil_scoped_release release;
          result.emplace(train(cfg, &table));
        }
        if (verbose) py::print(table.str(), "end"_a = "");
        return run_log_dict(result->log);
      },
      "config_json"_a, "base_dir"_a = fs::path("."), "verbose"_a = false);
  m.def(
      "evaluate",
      [](const fs::path& checkpoint, const fs::path& manifest) { return parse_json(evaluate(checkpoint, manifest).to_json()); },
      "checkpoint"_a, "manifest"_a);
  m.def(
      "localize",
      [](const fs::path& checkpoint, const fs::path& image, const std::string& label, const fs::path& out) {
        const Model model = load_checkpoint(checkpoint);
        const Image8 pixels = read_png(image);
        const Localization loc = localize(model, pixels, label);
        const fs::path csv = export_localization(loc, pixels, out, image.stem().string());
        return py::dict("score"_a = loc.score, "csv"_a = csv.string(),
                        "argmax_level0"_a = loc.argmax_at_level(0));
      },
      "checkpoint"_a, "image"_a, "label"_a, "out"_a);
  m.def(
      "gradcheck",
      [](std::size_t points, double eps, double tolerance, std::uint64_t seed) {
        py::list rows;
        for (const auto& r : run_gradient_suite(GradSuiteOptions{points, eps, tolerance, seed})) {
          rows.append(py::dict("op"_a = r.op, "max_rel_err"_a = r.max_rel_err, "checked"_a = r.checked,
                               "excluded"_a = r.excluded, "pass"_a = r.pass));
        }
        return rows;
      },
      "points"_a = 100, "eps"_a = 1e-5, "tolerance"_a = 1e-4, "seed"_a = 1);
}
