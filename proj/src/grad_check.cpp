#include "eegssm/grad_check.hpp"

#include <cmath>

#include "eegssm/errors.hpp"

namespace eegssm {

namespace {

double evaluate(const ScalarFn& f) {
  ad::Graph g;
  const ad::Var out = f(g);
  if (out.rows() != 1 || out.cols() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  return out.value()(0, 0);
}

}  // namespace

GradCheckResult grad_check(ParameterSet& params, const ScalarFn& f, double h) {
  if (!(h > 0.0)) throw ConfigError("grad_check: step must be positive");
  params.zero_grad();
  {
    ad::Graph g;
    const ad::Var out = f(g);
    if (out.rows() != 1 || out.cols() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    g.backward(out);
  }
  GradCheckResult result;
  for (auto& p : params) {
    if (!p.trainable) continue;
    const Matrix analytic = p.grad;
    for (Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = evaluate(f);
      x = saved - h;
      const double down = evaluate(f);
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic.data()[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates;
      if (!(err <= result.max_relative_error)) {
        result.max_relative_error = err;
        result.worst_parameter = p.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

double grad_check(const std::function<ad::Var(ad::Graph&, ad::Var)>& f, const RealArray& x, double h) {
  ParameterSet params;
  params.add("x", Matrix(Eigen::Map<const Matrix>(x.data(), x.size(), 1)));
  return grad_check(
             params, [&](ad::Graph& g) { return f(g, g.parameter(params.at("x"))); }, h)
      .max_relative_error;
}

}  // namespace eegssm
