#pragma once

#include "dhn/tensor.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dhn {

using GraphFn = std::function<Tensor(std::span<const Tensor>)>;

/// One differentiable op under test: a generator of random inputs (tensors that
/// should be checked carry requires_grad) and the graph to differentiate.
struct GradcheckCase {
  std::string op;
  std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
  GraphFn graph;
};

struct GradcheckOptions {
  int instances_per_op = 20;
  double step = 1e-6;
  double tolerance = 1e-4;
  std::uint64_t seed = 20240611;
};

struct GradcheckResult {
  std::string op;
  int instances = 0;
  double max_relative_error = 0.0;
  bool passed = true;
  std::string detail;
};

/// Relative error ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-8)
/// between backward() gradients and central differences of sum(w * graph(inputs))
/// for a fixed random projection w, pooled over every input requiring a gradient.
double gradient_relative_error(const GraphFn& graph, std::span<const Tensor> inputs, double step, std::mt19937_64& rng);

std::vector<GradcheckResult> run_gradcheck(std::span<const GradcheckCase> cases, const GradcheckOptions& options);

/// Every differentiable primitive of the engine, with kink-free input generators.
std::vector<GradcheckCase> standard_gradcheck_cases();

}  // namespace dhn
