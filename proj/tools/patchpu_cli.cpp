// Command-line front end: train, eval, localize, gen-data, gradcheck.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "patchpu/data.hpp"
#include "patchpu/errors.hpp"
#include "patchpu/gradsuite.hpp"
#include "patchpu/image.hpp"
#include "patchpu/train.hpp"

namespace fs = std::filesystem;
using namespace patchpu;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

int run_train(const fs::path& config_path) {
  const TrainConfig cfg = load_train_config(config_path);
  const TrainResult result = train(cfg, &std::cout);
  const auto& last = result.log.epochs.back();
  std::cout << "steps: " << result.log.steps.size() << '\n';
  if (last.val_map) std::cout << "final val mAP: " << *last.val_map << '\n';
  if (!result.log.checkpoint.empty()) std::cout << "checkpoint: " << result.log.checkpoint.string() << '\n';
  return kOk;
}

int run_eval(const fs::path& checkpoint, const fs::path& manifest, const fs::path& json_out, const fs::path& csv_out) {
  const EvalReport report = evaluate(checkpoint, manifest);
  std::cout << report.to_json().dump(2) << '\n';
  if (!json_out.empty()) std::ofstream(json_out) << report.to_json().dump(2) << '\n';
  if (!csv_out.empty()) std::ofstream(csv_out) << report.to_csv();
  return kOk;
}

int run_localize(const fs::path& checkpoint, const fs::path& image_path, const std::string& label,
                 const fs::path& out_dir) {
  const Model model = load_checkpoint(checkpoint);
  const Image8 image = read_png(image_path);
  const Localization loc = localize(model, image, label);
  const fs::path csv = export_localization(loc, image, out_dir, image_path.stem().string());
  const auto& top = loc.patches.at(loc.argmax_at_level(0));
  std::cout << "yhat[" << label << "] = " << loc.score << '\n'
            << "top level-0 patch: row " << top.origin.row << ", col " << top.origin.col << " (alpha " << top.alpha
            << ")\n"
            << "wrote " << csv.string() << " and " << fs::path(csv).replace_extension(".png").string() << '\n';
  return kOk;
}

int run_gen_data(const fs::path& config_path, const fs::path& out_dir) {
  const SyntheticConfig cfg = synthetic_config_from_json(read_json(config_path));
  fs::create_directories(out_dir);
  for (const std::string split : {"train", "val"}) {
    const MultiLabelDataset ds = generate_synthetic(cfg, split);
    const fs::path manifest = write_dataset(ds, out_dir / split);
    std::cout << split << ": " << ds.size() << " images, " << mean_labels_per_image(ds) << " labels/image -> "
              << manifest.string() << '\n';
  }
  std::ofstream(out_dir / "synthetic_config.json") << to_json(cfg).dump(2) << '\n';
  return kOk;
}

int run_gradcheck(const GradSuiteOptions& opts) {
  bool ok = true;
  std::printf("%-28s %12s %8s %8s  %s\n", "op", "max_rel_err", "checked", "kinks", "result");
  run_gradient_suite(opts, [&](const GradCheckReport& r) {
    ok = ok && r.pass;
    std::printf("%-28s %12.3e %8zu %8zu  %s\n", r.op.c_str(), r.max_rel_err, r.checked, r.excluded,
                r.pass ? "pass" : "FAIL");
    std::fflush(stdout);
  });
  return ok ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-based multi-label classification from single positive labels"};
  app.require_subcommand(1);

  fs::path train_config;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", train_config, "Training config (JSON)")->required()->check(CLI::ExistingFile);

  fs::path eval_checkpoint, eval_data, eval_json, eval_csv;
  auto* eval_cmd = app.add_subcommand("eval", "Score a dataset manifest with a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--json", eval_json, "Also write the report as JSON");
  eval_cmd->add_option("--csv", eval_csv, "Also write per-label AP as CSV");

  fs::path loc_checkpoint, loc_image, loc_out;
  std::string loc_label;
  auto* loc_cmd = app.add_subcommand("localize", "Export the attention heatmap of one label");
  loc_cmd->add_option("--checkpoint", loc_checkpoint, "Checkpoint directory")->required();
  loc_cmd->add_option("--image", loc_image, "PNG image")->required()->check(CLI::ExistingFile);
  loc_cmd->add_option("--label", loc_label, "Label name")->required();
  loc_cmd->add_option("--out", loc_out, "Output directory")->required();

  fs::path gen_config, gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic shape dataset");
  gen_cmd->add_option("--config", gen_config, "Synthetic config (JSON)")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();

  GradSuiteOptions grad_opts;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and loss");
  grad_cmd->add_option("--points", grad_opts.points, "Random points per op")->capture_default_str();
  grad_cmd->add_option("--eps", grad_opts.eps, "Central difference step")->capture_default_str();
  grad_cmd->add_option("--tol", grad_opts.tolerance, "Max relative error")->capture_default_str();
  grad_cmd->add_option("--seed", grad_opts.seed, "Seed for the sample points")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(train_config);
    if (*eval_cmd) return run_eval(eval_checkpoint, eval_data, eval_json, eval_csv);
    if (*loc_cmd) return run_localize(loc_checkpoint, loc_image, loc_label, loc_out);
    if (*gen_cmd) return run_gen_data(gen_config, gen_out);
    if (*grad_cmd) return run_gradcheck(grad_opts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error in " << e.op() << ": " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
