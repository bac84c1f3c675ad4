#include "patchpu/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "patchpu/errors.hpp"

namespace patchpu {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "lamb") return OptimizerKind::Lamb;
  if (name == "adamw") return OptimizerKind::AdamW;
  throw ConfigError("unknown optimizer '" + name + "' (expected lamb or adamw)");
}

std::string optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::Lamb ? "lamb" : "adamw"; }

void Optimizer::step(ParameterStore& params, double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(cfg_.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg_.beta2, t);
  const double shrink = 1.0 - lr * cfg_.weight_decay;

  std::vector<double> update;
  for (auto& [path, var] : params.entries()) {
    Tensor& w = var.mutable_value();
    const Tensor grad = var.grad();
    auto [it, fresh] = state_.try_emplace(path);
    Moments& m = it->second;
    if (fresh) {
      m.first = Tensor::zeros_like(w);
      m.second = Tensor::zeros_like(w);
    }

    update.assign(w.size(), 0.0);
    double update_sq = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grad[i];
      m.first[i] = cfg_.beta1 * m.first[i] + (1.0 - cfg_.beta1) * g;
      m.second[i] = cfg_.beta2 * m.second[i] + (1.0 - cfg_.beta2) * g * g;
      const double u = (m.first[i] / correction1) / (std::sqrt(m.second[i] / correction2) + cfg_.epsilon);
      update[i] = u;
      update_sq += u * u;
    }

    double weight_sq = 0.0;
    for (double v : w.values()) weight_sq += v * v;
    double ratio = 1.0;
    if (cfg_.kind == OptimizerKind::Lamb && weight_sq > 0.0 && update_sq > 0.0) {
      ratio = std::sqrt(weight_sq) / std::sqrt(update_sq);
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = w[i] * shrink - lr * ratio * update[i];
  }
}

StepSchedule::StepSchedule(std::vector<std::pair<std::size_t, double>> steps) : steps_(std::move(steps)) {
  if (steps_.empty()) throw ConfigError("lr schedule must have at least one entry");
  std::sort(steps_.begin(), steps_.end());
  if (steps_.front().first != 0) throw ConfigError("lr schedule must start at epoch 0");
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    if (!(steps_[i].second > 0.0)) throw ConfigError("lr values must be positive");
    if (i > 0 && steps_[i].second > steps_[i - 1].second) throw ConfigError("lr values must be non-increasing");
    if (i > 0 && steps_[i].first == steps_[i - 1].first) throw ConfigError("lr schedule repeats an epoch");
  }
}

StepSchedule StepSchedule::halving_every_five() {
  return StepSchedule({{0, 0.001}, {5, 0.0005}, {10, 0.00025}, {15, 0.000125}});
}

double StepSchedule::lr_at(std::size_t epoch) const {
  double lr = steps_.front().second;
  for (const auto& [start, value] : steps_)
    if (start <= epoch) lr = value;
  return lr;
}

bool StepSchedule::is_boundary(std::size_t epoch) const {
  return std::any_of(steps_.begin(), steps_.end(), [epoch](const auto& s) { return s.first == epoch && epoch > 0; });
}

}  // namespace patchpu
