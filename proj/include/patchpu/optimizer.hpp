#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "patchpu/autodiff.hpp"

namespace patchpu {

enum class OptimizerKind {
  Lamb,   // layer-wise trust ratio on the adaptive-moment step
  AdamW,  // adaptive moments, no trust ratio
};

OptimizerKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Lamb;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 1e-4;
};

/// Adaptive-moment optimizer with decoupled weight decay. Each step first
/// shrinks every parameter by (1 - lr * weight_decay), then applies the
/// bias-corrected moment step, scaled per tensor by |w| / |step| for LAMB.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  /// Uses the gradients currently accumulated on the parameters.
  void step(ParameterStore& params, double lr);

  std::size_t steps_taken() const noexcept { return steps_; }
  const OptimizerConfig& config() const noexcept { return cfg_; }

 private:
  struct Moments {
    Tensor first;
    Tensor second;
  };

  OptimizerConfig cfg_;
  std::map<std::string, Moments> state_;
  std::size_t steps_ = 0;
};

/// Piecewise-constant learning rate: the lr of the last entry whose epoch is
/// <= the queried epoch.
class StepSchedule {
 public:
  StepSchedule() = default;
  explicit StepSchedule(std::vector<std::pair<std::size_t, double>> steps);

  /// 0.001, 0.0005, 0.00025, 0.000125 changing every 5 epochs.
  static StepSchedule halving_every_five();

  double lr_at(std::size_t epoch) const;
  bool is_boundary(std::size_t epoch) const;
  const std::vector<std::pair<std::size_t, double>>& steps() const noexcept { return steps_; }

 private:
  std::vector<std::pair<std::size_t, double>> steps_;
};

}  // namespace patchpu
