#include "patchpu/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "patchpu/errors.hpp"
#include "patchpu/seeding.hpp"

namespace patchpu {

using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleSalt = 0x5eed5u;
constexpr std::uint64_t kPositiveSalt = 0x9051u;
constexpr std::uint64_t kTrainPatchSalt = 0x7a7cu;
constexpr std::uint64_t kEvalPatchSalt = 0xe7a1u;

// Training allocates and frees the same large activation buffers every step;
// keeping them in the heap avoids repeated page faults.
void tune_allocator() {
  static std::once_flag once;
  std::call_once(once, [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  });
}

Supervision parse_supervision(const std::string& s) {
  if (s == "auto") return Supervision::Auto;
  if (s == "full") return Supervision::Full;
  if (s == "single_positive") return Supervision::SinglePositive;
  throw ConfigError("unknown supervision '" + s + "' (expected auto, full or single_positive)");
}

std::string supervision_name(Supervision s) {
  switch (s) {
    case Supervision::Auto: return "auto";
    case Supervision::Full: return "full";
    case Supervision::SinglePositive: return "single_positive";
  }
  return "auto";
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (lr_schedule.steps().empty()) throw ConfigError("lr_schedule is empty");
  if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0)
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (lambda_epr < 0.0) throw ConfigError("lambda_epr must be non-negative");
  if (k < 0.0) throw ConfigError("k must be non-negative");
  grid.validate();
  embedder.validate();
  similarity.validate();
}

bool TrainConfig::full_supervision() const {
  if (supervision == Supervision::Auto) return loss == LossKind::BCE;
  return supervision == Supervision::Full;
}

json to_json(const TrainConfig& cfg) {
  json schedule = json::array();
  for (const auto& [epoch, lr] : cfg.lr_schedule.steps()) schedule.push_back({epoch, lr});
  return {{"loss", loss_name(cfg.loss)},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr_schedule", schedule},
          {"optimizer", optimizer_name(cfg.optimizer.kind)},
          {"beta1", cfg.optimizer.beta1},
          {"beta2", cfg.optimizer.beta2},
          {"epsilon", cfg.optimizer.epsilon},
          {"weight_decay", cfg.optimizer.weight_decay},
          {"seed", cfg.seed},
          {"train_manifest", cfg.train_manifest.string()},
          {"val_manifest", cfg.val_manifest.string()},
          {"output_dir", cfg.output_dir.string()},
          {"grid", to_json(cfg.grid)},
          {"embedder", to_json(cfg.embedder)},
          {"mlp_hidden", cfg.mlp_hidden},
          {"scaled_attention", cfg.scaled_attention},
          {"similarity", {{"theta", cfg.similarity.theta}, {"detach_targets", cfg.similarity.detach_targets}}},
          {"k", cfg.k},
          {"lambda", cfg.lambda},
          {"lambda_epr", cfg.lambda_epr},
          {"reduction", cfg.reduction == Reduction::Sum ? "sum" : "mean"},
          {"supervision", supervision_name(cfg.supervision)},
          {"eval_every_epoch", cfg.eval_every_epoch},
          {"verbose", cfg.verbose}};
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known{
      "loss",        "epochs",         "batch_size",   "lr_schedule",      "optimizer",   "beta1",
      "beta2",       "epsilon",        "weight_decay", "seed",             "train_manifest", "val_manifest",
      "output_dir",  "grid",           "embedder",     "mlp_hidden",       "scaled_attention", "similarity",
      "k",           "lambda",       "lambda_epr",       "reduction",   "supervision",
      "eval_every_epoch", "verbose"};
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown training config key '" + key + "'");
  }

  TrainConfig cfg;
  try {
    if (j.contains("loss")) cfg.loss = parse_loss(j.at("loss").get<std::string>());
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    if (j.contains("lr_schedule")) {
      std::vector<std::pair<std::size_t, double>> steps;
      for (const auto& s : j.at("lr_schedule")) steps.emplace_back(s.at(0).get<std::size_t>(), s.at(1).get<double>());
      cfg.lr_schedule = StepSchedule(std::move(steps));
    }
    if (j.contains("optimizer")) cfg.optimizer.kind = parse_optimizer(j.at("optimizer").get<std::string>());
    cfg.optimizer.beta1 = j.value("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = j.value("beta2", cfg.optimizer.beta2);
    cfg.optimizer.epsilon = j.value("epsilon", cfg.optimizer.epsilon);
    cfg.optimizer.weight_decay = j.value("weight_decay", cfg.optimizer.weight_decay);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.train_manifest = j.value("train_manifest", std::string());
    cfg.val_manifest = j.value("val_manifest", std::string());
    cfg.output_dir = j.value("output_dir", std::string());
    if (j.contains("grid")) cfg.grid = grid_from_json(j.at("grid"));
    if (j.contains("embedder")) cfg.embedder = embedder_from_json(j.at("embedder"));
    cfg.mlp_hidden = j.value("mlp_hidden", cfg.mlp_hidden);
    cfg.scaled_attention = j.value("scaled_attention", cfg.scaled_attention);
    if (j.contains("similarity")) {
      const auto& sim = j.at("similarity");
      cfg.similarity.theta = sim.value("theta", cfg.similarity.theta);
      cfg.similarity.detach_targets = sim.value("detach_targets", cfg.similarity.detach_targets);
    }
    cfg.k = j.value("k", cfg.k);
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.lambda_epr = j.value("lambda_epr", cfg.lambda_epr);
    if (j.contains("reduction")) {
      const auto r = j.at("reduction").get<std::string>();
      if (r != "sum" && r != "mean") throw ConfigError("reduction must be sum or mean");
      cfg.reduction = r == "sum" ? Reduction::Sum : Reduction::Mean;
    }
    if (j.contains("supervision")) cfg.supervision = parse_supervision(j.at("supervision").get<std::string>());
    cfg.eval_every_epoch = j.value("eval_every_epoch", cfg.eval_every_epoch);
    cfg.verbose = j.value("verbose", cfg.verbose);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  TrainConfig cfg = train_config_from_json(j);
  // Relative manifest and output paths resolve against the config's directory.
  const auto base = path.parent_path();
  auto resolve = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  resolve(cfg.train_manifest);
  resolve(cfg.val_manifest);
  resolve(cfg.output_dir);
  return cfg;
}

PatchSet patches_for(const Image8& image, const PatchGridConfig& grid, std::uint64_t sampling_seed) {
  std::mt19937_64 rng(sampling_seed);
  return image_to_patches(to_unit_range(image), grid, &rng);
}

// ---------------------------------------------------------------------------
// Training

namespace {

class RunWriter {
 public:
  RunWriter(const std::filesystem::path& dir, std::ostream* table) : table_(table) {
    if (!dir.empty()) {
      std::filesystem::create_directories(dir);
      jsonl_.open(dir / "runlog.jsonl");
      if (!jsonl_) throw IoError("cannot write run log in '" + dir.string() + "'");
    }
  }

  void step(const StepRecord& r) {
    if (jsonl_.is_open())
      jsonl_ << json{{"type", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}}.dump()
             << '\n';
  }

  void epoch(const EpochRecord& r, double lr) {
    if (jsonl_.is_open()) {
      json row{{"type", "epoch"},
               {"epoch", r.epoch},
               {"lr", lr},
               {"train_loss", r.train_loss},
               {"weak_negative_mass", r.mean_weak_negative_mass},
               {"seconds", r.wall_seconds}};
      row["val_map"] = r.val_map ? json(*r.val_map) : json(nullptr);
      jsonl_ << row.dump() << '\n';
      jsonl_.flush();
    }
    if (!table_) return;
    if (!header_) {
      *table_ << std::left << std::setw(7) << "epoch" << std::setw(11) << "lr" << std::setw(13) << "train_loss"
              << std::setw(10) << "val_mAP" << std::setw(10) << "wn_mass" << "seconds\n";
      header_ = true;
    }
    std::ostringstream val;
    if (r.val_map) val << std::fixed << std::setprecision(4) << *r.val_map;
    else val << "-";
    *table_ << std::left << std::defaultfloat << std::setprecision(6) << std::setw(7) << r.epoch << std::setw(11)
            << lr << std::setw(13) << std::fixed
            << std::setprecision(5) << r.train_loss << std::setw(10) << val.str() << std::setw(10)
            << std::setprecision(4) << r.mean_weak_negative_mass << std::setprecision(1) << r.wall_seconds << '\n'
            << std::defaultfloat << std::flush;
  }

 private:
  std::ostream* table_;
  std::ofstream jsonl_;
  bool header_ = false;
};

bool all_grads_finite(const ParameterStore& params) {
  for (const auto& [path, var] : params.entries()) {
    if (!var.grad().all_finite()) return false;
  }
  return true;
}

struct StepOutcome {
  double loss = 0.0;
  double weak_negative_mass = 0.0;
};

StepOutcome training_step(Model& model, Optimizer& opt, const TrainConfig& cfg, const std::vector<PatchSet>& sets,
                          const Tensor& z_plus, const Tensor& z_minus, double lr) {
  const BatchForward fwd = model.forward(sets);
  const std::size_t batch = sets.size();
  const std::size_t labels = model.num_labels();
  StepOutcome out;

  Var loss;
  switch (cfg.loss) {
    case LossKind::CE: loss = ce_loss(z_plus, fwd.predictions, cfg.reduction); break;
    case LossKind::BCE: loss = bce_loss(z_plus, z_minus, fwd.predictions, cfg.reduction); break;
    case LossKind::AN: loss = an_loss(z_plus, fwd.predictions, cfg.lambda, cfg.reduction); break;
    case LossKind::EPR: loss = epr_loss(z_plus, fwd.predictions, cfg.k, cfg.lambda_epr, cfg.reduction); break;
    case LossKind::WN: {
      std::vector<Var> rows;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::span<const double> zp(z_plus.data() + b * labels, labels);
        NegativeEstimate est = estimate_negatives(fwd.heads[b].representations, zp, cfg.similarity);
        for (double v : est.weak_negatives.value().values()) out.weak_negative_mass += v;
        rows.push_back(ops::reshape(est.weak_negatives, Shape{1, labels}));
      }
      loss = wn_loss(z_plus, ops::concat_rows(rows), fwd.predictions, cfg.reduction);
      break;
    }
  }

  out.loss = loss.value().item();
  model.params().zero_grad();
  backward(loss);
  if (!all_grads_finite(model.params())) throw NumericError("backward", "non-finite gradient");
  opt.step(model.params(), lr);
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const MultiLabelDataset& train_set, const MultiLabelDataset* val_set,
                  std::ostream* table) {
  tune_allocator();
  cfg.validate();
  train_set.validate();
  if (train_set.size() == 0) throw ContractError("training set is empty");
  if (val_set && val_set->label_names != train_set.label_names)
    throw ConfigError("validation labels differ from training labels");

  ModelConfig mcfg;
  mcfg.labels = train_set.label_names;
  mcfg.grid = cfg.grid;
  mcfg.embedder = cfg.embedder;
  mcfg.mlp_hidden = cfg.mlp_hidden;
  mcfg.scaled_attention = cfg.scaled_attention;
  TrainResult result{Model(mcfg, cfg.seed), {}};
  Model& model = result.model;
  Optimizer opt(cfg.optimizer);
  RunWriter writer(cfg.output_dir, cfg.verbose ? table : nullptr);
  if (!cfg.output_dir.empty()) {
    std::ofstream(cfg.output_dir / "config.json") << to_json(cfg).dump(1) << '\n';
  }

  const std::size_t n = train_set.size();
  const std::size_t labels = train_set.num_labels();
  const bool full = cfg.full_supervision();
  // Observed positives are drawn once and stay fixed for the whole run.
  const auto single = full ? std::vector<std::vector<double>>{}
                           : sample_single_positives(train_set, mix_seeds(cfg.seed, kPositiveSalt));

  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.lr_schedule.is_boundary(epoch) && !cfg.output_dir.empty()) {
      save_checkpoint(model, cfg.output_dir / ("checkpoint_epoch" + std::to_string(epoch)));
    }
    const auto start = std::chrono::steady_clock::now();
    const double lr = cfg.lr_schedule.lr_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seeds(cfg.seed, mix_seeds(kShuffleSalt, epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_total = 0.0;
    double mass_total = 0.0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size) {
      const std::size_t batch = std::min(cfg.batch_size, n - first);
      std::vector<PatchSet> sets;
      sets.reserve(batch);
      Tensor z_plus(Shape{batch, labels});
      Tensor z_minus(Shape{batch, labels});
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t idx = order[first + b];
        const auto& item = train_set.items[idx];
        sets.push_back(patches_for(item.pixels, cfg.grid,
                                   mix_seeds(cfg.seed, mix_seeds(kTrainPatchSalt, epoch * n + idx))));
        for (std::size_t l = 0; l < labels; ++l) {
          z_plus[b * labels + l] = full ? item.y[l] : single[idx][l];
          z_minus[b * labels + l] = full ? 1.0 - item.y[l] : 0.0;
        }
      }

      StepOutcome outcome;
      try {
        outcome = training_step(model, opt, cfg, sets, z_plus, z_minus, lr);
      } catch (const NumericError& e) {
        std::string where;
        if (!cfg.output_dir.empty()) {
          // Parameters are only touched after a finite backward pass, so the
          // current state is the last good one.
          const auto dir = cfg.output_dir / "checkpoint_last_good";
          save_checkpoint(model, dir);
          where = "; last good checkpoint in '" + dir.string() + "'";
        }
        throw NumericError(e.op(), "training diverged at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(step) + " (" + e.what() + ")" + where);
      }
      loss_total += outcome.loss;
      mass_total += outcome.weak_negative_mass;
      const StepRecord rec{step++, epoch, outcome.loss, lr};
      writer.step(rec);
      result.log.steps.push_back(rec);
    }

    EpochRecord er;
    er.epoch = epoch;
    const double per_batch_scale = cfg.reduction == Reduction::Sum ? 1.0 : static_cast<double>(cfg.batch_size);
    er.train_loss = loss_total * per_batch_scale / static_cast<double>(n);
    er.mean_weak_negative_mass = mass_total / static_cast<double>(n);
    if (val_set && cfg.eval_every_epoch) er.val_map = evaluate(model, *val_set).mean_ap;
    er.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    writer.epoch(er, lr);
    result.log.epochs.push_back(er);
  }

  if (val_set && !cfg.eval_every_epoch) result.log.epochs.back().val_map = evaluate(model, *val_set).mean_ap;
  if (!cfg.output_dir.empty()) {
    result.log.checkpoint = cfg.output_dir / "checkpoint";
    save_checkpoint(model, result.log.checkpoint);
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, std::ostream* table) {
  if (cfg.train_manifest.empty()) throw ConfigError("train_manifest is required");
  const MultiLabelDataset train_set = load_annotations(cfg.train_manifest);
  std::optional<MultiLabelDataset> val_set;
  if (!cfg.val_manifest.empty()) val_set = load_annotations(cfg.val_manifest);
  return train(cfg, train_set, val_set ? &*val_set : nullptr, table);
}

// ---------------------------------------------------------------------------
// Evaluation

Tensor predict(const Model& model, const MultiLabelDataset& dataset, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("predict: batch_size must be positive");
  tune_allocator();
  const std::size_t labels = model.num_labels();
  Tensor out(Shape{dataset.size(), labels});
  NoGradGuard no_grad;
  for (std::size_t first = 0; first < dataset.size(); first += batch_size) {
    const std::size_t batch = std::min(batch_size, dataset.size() - first);
    std::vector<PatchSet> sets;
    for (std::size_t b = 0; b < batch; ++b) {
      sets.push_back(patches_for(dataset.items[first + b].pixels, model.config().grid,
                                 mix_seeds(kEvalPatchSalt, first + b)));
    }
    const BatchForward fwd = model.forward(sets);
    const Tensor& preds = fwd.predictions.value();
    std::copy_n(preds.data(), preds.size(), out.data() + first * labels);
  }
  return out;
}

EvalReport evaluate(const Model& model, const MultiLabelDataset& dataset) {
  if (dataset.label_names != model.config().labels) {
    throw ConfigError("dataset labels do not match the model's labels");
  }
  return mean_average_precision(predict(model, dataset), dataset.truth_matrix(), dataset.label_names);
}

EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest) {
  const Model model = load_checkpoint(checkpoint);
  return evaluate(model, load_annotations(manifest));
}

// ---------------------------------------------------------------------------
// Localization

std::size_t Localization::argmax_at_level(std::size_t level) const {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].origin.level != level) continue;
    if (!best || patches[i].alpha > patches[*best].alpha) best = i;
  }
  if (!best) throw ContractError("no patch at level " + std::to_string(level));
  return *best;
}

std::string Localization::to_csv() const {
  std::ostringstream out;
  out << "level,row,col,y0,x0,y1,x1,alpha,opacity\n" << std::setprecision(10);
  for (const auto& p : patches) {
    out << p.origin.level << ',' << p.origin.row << ',' << p.origin.col << ',' << p.rect.y0 << ',' << p.rect.x0
        << ',' << p.rect.y1 << ',' << p.rect.x1 << ',' << p.alpha << ',' << p.opacity << '\n';
  }
  return out.str();
}

Image8 Localization::overlay(const Image8& image) const {
  Image8 out{image.height, image.width, 3, std::vector<std::uint8_t>(image.height * image.width * 3)};
  for (std::size_t i = 0; i < image.height * image.width; ++i) {
    for (std::size_t c = 0; c < 3; ++c)
      out.pixels[i * 3 + c] = image.pixels[i * image.channels + (image.channels == 3 ? c : 0)];
  }
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return patches[a].origin.level > patches[b].origin.level; });
  const std::array<double, 3> red{255.0, 0.0, 0.0};
  for (std::size_t idx : order) {
    const auto& p = patches[idx];
    const double w = p.opacity;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, p.rect.y0));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, p.rect.x0));
    const auto y1 = std::min(image.height, static_cast<std::size_t>(std::ceil(p.rect.y1)));
    const auto x1 = std::min(image.width, static_cast<std::size_t>(std::ceil(p.rect.x1)));
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          auto& px = out.pixels[(y * image.width + x) * 3 + c];
          px = static_cast<std::uint8_t>(std::lround((1.0 - w) * px + w * red[c]));
        }
      }
    }
  }
  return out;
}

Localization localize(const Model& model, const Image8& image, const std::string& label) {
  Localization loc;
  loc.label = label;
  loc.label_index = model.label_index(label);
  const PatchSet set = patches_for(image, model.config().grid, mix_seeds(kEvalPatchSalt, 0));

  NoGradGuard no_grad;
  const BatchForward fwd = model.forward({set});
  const Tensor& attention = fwd.heads.front().attention.value();  // [L, m]
  loc.score = fwd.predictions.value()[loc.label_index];

  const std::size_t m = set.size();
  double max_alpha = 0.0;
  for (std::size_t i = 0; i < m; ++i) max_alpha = std::max(max_alpha, attention[loc.label_index * m + i]);
  for (std::size_t i = 0; i < m; ++i) {
    LocalizedPatch p;
    p.origin = set.origins[i];
    p.rect = set.footprint(i);
    p.alpha = attention[loc.label_index * m + i];
    p.opacity = max_alpha > 0.0 ? p.alpha / max_alpha : 0.0;
    loc.patches.push_back(p);
  }
  return loc;
}

std::filesystem::path export_localization(const Localization& loc, const Image8& image,
                                          const std::filesystem::path& out_dir, const std::string& stem) {
  std::filesystem::create_directories(out_dir);
  char score[32];
  std::snprintf(score, sizeof(score), "%.4f", loc.score);
  const std::string base = stem + "_" + loc.label + "_yhat" + score;
  const auto csv_path = out_dir / (base + ".csv");
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write '" + csv_path.string() + "'");
  csv << loc.to_csv();
  write_png(out_dir / (base + ".png"), loc.overlay(image));
  return csv_path;
}

}  // namespace patchpu
