#pragma once

#include <functional>
#include <string>

#include "eegssm/autodiff.hpp"
#include "eegssm/ndarray.hpp"

namespace eegssm {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  Index worst_index = -1;
  Index coordinates = 0;
};

// Builds a scalar on the supplied graph, reading leaves from the parameter set.
using ScalarFn = std::function<ad::Var(ad::Graph&)>;

// Compares reverse-mode gradients with central differences over every
// trainable coordinate. The error of a coordinate is
// |analytic - numeric| / max(1, |numeric|).
GradCheckResult grad_check(ParameterSet& params, const ScalarFn& f, double h = 1e-5);

// Single-input form: f maps the leaf holding x to a scalar.
double grad_check(const std::function<ad::Var(ad::Graph&, ad::Var)>& f, const RealArray& x, double h = 1e-5);

}  // namespace eegssm
