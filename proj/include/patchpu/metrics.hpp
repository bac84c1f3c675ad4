#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchpu/tensor.hpp"

namespace patchpu {

/// Non-interpolated average precision: mean of precision@r over the ranks r of
/// positives, ranking by descending score with ties kept in input order.
/// Returns nullopt when there is no positive.
std::optional<double> average_precision(std::span<const double> scores, std::span<const double> truths);

struct EvalReport {
  std::vector<std::string> label_names;
  std::vector<std::optional<double>> per_label_ap;  // nullopt: no positives
  std::vector<std::size_t> positives_per_label;
  double mean_ap = 0.0;
  std::size_t num_images = 0;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
  /// label,ap,positives rows with a header line.
  std::string to_csv() const;
};

/// Per-label AP over the image axis of [N, L] matrices; mAP over labels with
/// at least one positive.
EvalReport mean_average_precision(const Tensor& scores, const Tensor& truths,
                                  const std::vector<std::string>& label_names = {});

}  // namespace patchpu
