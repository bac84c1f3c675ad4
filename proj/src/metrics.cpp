#include "patchpu/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "patchpu/errors.hpp"

namespace patchpu {

std::optional<double> average_precision(std::span<const double> scores, std::span<const double> truths) {
  if (scores.size() != truths.size()) throw ShapeError("average_precision: scores and truths differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::size_t hits = 0;
  double precision_sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (truths[order[rank]] != 0.0) {
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return precision_sum / static_cast<double>(hits);
}

EvalReport mean_average_precision(const Tensor& scores, const Tensor& truths,
                                  const std::vector<std::string>& label_names) {
  require_rank(scores, 2, "mean_average_precision scores");
  require_same_shape(scores, truths, "mean_average_precision");
  const std::size_t n = scores.dim(0), labels = scores.dim(1);
  if (!label_names.empty() && label_names.size() != labels) {
    throw ShapeError("mean_average_precision: label name count differs from score columns");
  }

  EvalReport report;
  report.num_images = n;
  report.label_names = label_names;
  if (report.label_names.empty()) {
    for (std::size_t l = 0; l < labels; ++l) report.label_names.push_back("label" + std::to_string(l));
  }

  std::vector<double> col_scores(n), col_truths(n);
  double total = 0.0;
  std::size_t included = 0;
  for (std::size_t l = 0; l < labels; ++l) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) {
      col_scores[i] = scores.at(i, l);
      col_truths[i] = truths.at(i, l);
      positives += truths.at(i, l) != 0.0;
    }
    report.positives_per_label.push_back(positives);
    const auto ap = average_precision(col_scores, col_truths);
    report.per_label_ap.push_back(ap);
    if (ap) {
      total += *ap;
      ++included;
    } else {
      report.notes.push_back("label '" + report.label_names[l] + "' has no positives; excluded from mAP");
    }
  }
  report.mean_ap = included ? total / static_cast<double>(included) : 0.0;
  return report;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t l = 0; l < per_label_ap.size(); ++l) {
    labels.push_back({{"label", label_names[l]},
                      {"ap", per_label_ap[l] ? nlohmann::json(*per_label_ap[l]) : nlohmann::json(nullptr)},
                      {"positives", positives_per_label[l]}});
  }
  return {{"mAP", mean_ap}, {"num_images", num_images}, {"per_label", labels}, {"notes", notes}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "label,ap,positives\n";
  for (std::size_t l = 0; l < per_label_ap.size(); ++l) {
    out << label_names[l] << ',';
    if (per_label_ap[l]) out << *per_label_ap[l];
    out << ',' << positives_per_label[l] << '\n';
  }
  return out.str();
}

}  // namespace patchpu
