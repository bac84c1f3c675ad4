#include "patchpu/gradsuite.hpp"

#include <random>

#include "patchpu/attention.hpp"
#include "patchpu/embedder.hpp"
#include "patchpu/losses.hpp"
#include "patchpu/negatives.hpp"

namespace patchpu {

namespace {

using V = std::vector<Var>;

Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Fixed observations for a batch of two images over four labels.
Tensor batch_positives() { return Tensor(Shape{2, 4}, {1, 0, 0, 0, 0, 0, 1, 0}); }
Tensor batch_negatives() { return Tensor(Shape{2, 4}, {0, 1, 0, 1, 1, 0, 0, 0}); }

std::vector<Tensor> predictions_only(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {uniform(s, rng, 0.05, 0.95)};
}

// Parameter values in path order.
std::vector<Tensor> store_values(const ParameterStore& store) {
  std::vector<Tensor> out;
  for (const auto& [path, var] : store.entries()) out.push_back(var.value());
  return out;
}

ParameterStore rebind(const ParameterStore& layout, const V& vars, std::size_t offset) {
  ParameterStore store(layout.seed());
  std::size_t i = offset;
  for (const auto& [path, _] : layout.entries()) store.entries().emplace(path, vars.at(i++));
  return store;
}

HeadConfig tiny_head() { return {3, 6, 4, false}; }

EmbedderConfig tiny_embedder() {
  EmbedderConfig cfg;
  cfg.embedding_dim = 4;
  cfg.input_channels = 3;
  cfg.blocks = {BlockSpec{BlockKind::Conv, 4, 3, 2, 1, 0.0, 1}, BlockSpec{BlockKind::MBConv, 4, 3, 1, 2, 0.5, 1}};
  return cfg;
}

std::vector<RegisteredOp> build_composites() {
  std::vector<RegisteredOp> checks;
  const Shape batch{2, 4};

  checks.push_back({"ce_loss", batch, predictions_only,
                    [](const V& in) { return ce_loss(batch_positives(), in[0]); }});
  checks.push_back({"bce_loss", batch, predictions_only,
                    [](const V& in) { return bce_loss(batch_positives(), batch_negatives(), in[0]); }});
  checks.push_back({"an_loss", batch, predictions_only,
                    [](const V& in) { return an_loss(batch_positives(), in[0], 0.7); }});
  checks.push_back({"epr_loss", batch, predictions_only,
                    [](const V& in) { return epr_loss(batch_positives(), in[0], 1.38, 1.0); }});
  checks.push_back({"wn_loss", batch,
                    [](const Shape& s, std::uint64_t seed) {
                      std::mt19937_64 rng(seed);
                      return std::vector<Tensor>{uniform(s, rng, 0.05, 0.95), uniform(s, rng, 0.0, 1.0)};
                    },
                    [](const V& in) { return wn_loss(batch_positives(), in[1], in[0]); }});
  checks.push_back({"cross_entropy_per_image", batch,
                    [](const Shape& s, std::uint64_t seed) {
                      std::mt19937_64 rng(seed);
                      return std::vector<Tensor>{uniform(s, rng, 0.0, 1.0), uniform(s, rng, 0.05, 0.95)};
                    },
                    [](const V& in) { return cross_entropy_per_image(in[0], in[1]); }});

  // Weak negatives kept on the graph, so the gradient reaches the representations.
  checks.push_back({"wn_loss_attached_negatives", {4, 5},
                    [](const Shape& s, std::uint64_t seed) {
                      std::mt19937_64 rng(seed);
                      return std::vector<Tensor>{uniform(s, rng, -1.0, 1.0), uniform(Shape{s.at(0)}, rng, 0.05, 0.95)};
                    },
                    [](const V& in) {
                      const std::vector<double> z_plus{0, 1, 0, 0};
                      const NegativeEstimate est = estimate_negatives(in[0], z_plus, SimilarityConfig{0.0, false});
                      return wn_loss(Tensor(Shape{4}, z_plus), est.weak_negatives, in[1]);
                    }});

  checks.push_back({"attention_head", {5, 6},
                    [](const Shape& s, std::uint64_t seed) {
                      std::mt19937_64 rng(seed);
                      ParameterStore store(seed);
                      init_head(store, tiny_head());
                      std::vector<Tensor> inputs{uniform(s, rng, -1.0, 1.0)};
                      for (auto& t : store_values(store)) inputs.push_back(std::move(t));
                      return inputs;
                    },
                    [](const V& in) {
                      ParameterStore layout;
                      init_head(layout, tiny_head());
                      return run_head(in[0], rebind(layout, in, 1), tiny_head()).predictions;
                    }});

  checks.push_back({"embedder", {2, 8, 8, 3},
                    [](const Shape& s, std::uint64_t seed) {
                      std::mt19937_64 rng(seed);
                      ParameterStore store(seed);
                      init_embedder(store, tiny_embedder());
                      std::vector<Tensor> inputs{uniform(s, rng, 0.0, 1.0)};
                      for (auto& t : store_values(store)) inputs.push_back(std::move(t));
                      return inputs;
                    },
                    [](const V& in) {
                      ParameterStore layout;
                      init_embedder(layout, tiny_embedder());
                      return embed_patches(in[0], rebind(layout, in, 1), tiny_embedder());
                    }});
  return checks;
}

}  // namespace

const std::vector<RegisteredOp>& composite_checks() {
  static const std::vector<RegisteredOp> checks = build_composites();
  return checks;
}

std::vector<GradCheckReport> run_gradient_suite(const GradSuiteOptions& opts,
                                                const std::function<void(const GradCheckReport&)>& progress) {
  std::vector<GradCheckReport> reports;
  const auto run = [&](const RegisteredOp& op) {
    reports.push_back(finite_difference_check(op, {}, opts.eps, opts.tolerance, opts.points, opts.seed));
    if (progress) progress(reports.back());
  };
  for (const auto& op : registered_ops()) run(op);
  for (const auto& op : composite_checks()) run(op);
  return reports;
}

}  // namespace patchpu
