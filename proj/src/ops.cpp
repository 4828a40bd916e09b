#include "eegssm/ops.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "eegssm/array_ops.hpp"
#include "eegssm/errors.hpp"

namespace eegssm::ad {

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

void require_column(Var v, Index rows, const char* op) {
  if (v.rows() != rows || v.cols() != 1)
    throw ShapeError(std::string(op) + ": expected a " + std::to_string(rows) + "x1 column");
}

template <class F, class D>
Var unary(Var a, F f, D df) {
  Graph& g = *a.graph;
  Matrix out = a.value().unaryExpr(f);
  return g.make(std::move(out), a.batch(), {a}, [a, df](Graph& g, const Matrix& go) {
    g.accumulate(a, go.cwiseProduct(g.value(a).unaryExpr(df)));
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " + std::to_string(b.rows()));
  Graph& g = *a.graph;
  Matrix out = a.value() * b.value();
  return g.make(std::move(out), b.batch(), {a, b}, [a, b](Graph& g, const Matrix& go) {
    if (g.requires_grad(a)) g.accumulate(a, go * g.value(b).transpose());
    if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * go);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return a.graph->make(std::move(out), a.batch(), {a, b}, [a, b](Graph& g, const Matrix& go) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return a.graph->make(std::move(out), a.batch(), {a, b}, [a, b](Graph& g, const Matrix& go) {
    g.accumulate(a, go);
    g.accumulate(b, -go);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.graph->make(std::move(out), a.batch(), {a, b}, [a, b](Graph& g, const Matrix& go) {
    g.accumulate(a, go.cwiseProduct(g.value(b)));
    g.accumulate(b, go.cwiseProduct(g.value(a)));
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return a.graph->make(std::move(out), a.batch(), {a}, [a, s](Graph& g, const Matrix& go) { g.accumulate(a, go * s); });
}

Var add_bias(Var a, Var bias) {
  require_column(bias, a.rows(), "add_bias");
  Matrix out = a.value().colwise() + bias.value().col(0);
  return a.graph->make(std::move(out), a.batch(), {a, bias}, [a, bias](Graph& g, const Matrix& go) {
    g.accumulate(a, go);
    if (g.requires_grad(bias)) g.accumulate(bias, go.rowwise().sum());
  });
}

Var scale_rows(Var a, Var gamma) {
  require_column(gamma, a.rows(), "scale_rows");
  Matrix out = a.value().array().colwise() * gamma.value().col(0).array();
  return a.graph->make(std::move(out), a.batch(), {a, gamma}, [a, gamma](Graph& g, const Matrix& go) {
    if (g.requires_grad(a))
      g.accumulate(a, (go.array().colwise() * g.value(gamma).col(0).array()).matrix());
    if (g.requires_grad(gamma)) g.accumulate(gamma, go.cwiseProduct(g.value(a)).rowwise().sum());
  });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(Var a) { return unary(a, gelu_value, gelu_slope); }

Var sigmoid(Var a) {
  return unary(a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double x) {
                 const double t = std::tanh(x);
                 return 1.0 - t * t;
               });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->make(std::move(out), 1, {a}, [a](Graph& g, const Matrix& go) {
    g.accumulate(a, Matrix::Constant(a.rows(), a.cols(), go(0, 0)));
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var softmax_cols(Var a) {
  auto out = std::make_shared<Matrix>(a.rows(), a.cols());
  for (Index j = 0; j < a.cols(); ++j) out->col(j) = softmax(a.value().col(j));
  return a.graph->make(*out, a.batch(), {a}, [a, out](Graph& g, const Matrix& go) {
    const Matrix& p = *out;
    const Eigen::RowVectorXd dots = p.cwiseProduct(go).colwise().sum();
    g.accumulate(a, (p.array() * (go.rowwise() - dots).array()).matrix());
  });
}

Var concat_rows(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  const Index ra = a.rows();
  return a.graph->make(std::move(out), a.batch(), {a, b}, [a, b, ra](Graph& g, const Matrix& go) {
    g.accumulate(a, go.topRows(ra));
    g.accumulate(b, go.bottomRows(go.rows() - ra));
  });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix out = a.value().middleRows(start, count);
  return a.graph->make(std::move(out), a.batch(), {a}, [a, start, count](Graph& g, const Matrix& go) {
    if (!g.requires_grad(a)) return;
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = go;
    g.accumulate(a, full);
  });
}

Var reverse_time(Var a) {
  const Index batch = a.batch();
  const Index t = a.time();
  auto flip = [batch, t](const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (Index b = 0; b < batch; ++b) out.middleCols(b * t, t) = m.middleCols(b * t, t).rowwise().reverse();
    return out;
  };
  return a.graph->make(flip(a.value()), batch, {a}, [a, flip](Graph& g, const Matrix& go) { g.accumulate(a, flip(go)); });
}

Var mean_time(Var a) {
  const Index batch = a.batch();
  const Index t = a.time();
  Matrix out(a.rows(), batch);
  for (Index b = 0; b < batch; ++b) out.col(b) = a.value().middleCols(b * t, t).rowwise().mean();
  return a.graph->make(std::move(out), batch, {a}, [a, batch, t](Graph& g, const Matrix& go) {
    Matrix gi(a.rows(), a.cols());
    for (Index b = 0; b < batch; ++b) gi.middleCols(b * t, t) = (go.col(b) / static_cast<double>(t)).replicate(1, t);
    g.accumulate(a, gi);
  });
}

Var avg_pool2(Var a) {
  const Index batch = a.batch();
  const Index t = a.time();
  const Index th = t / 2;
  if (th < 1) throw ShapeError("avg_pool2: sequence too short");
  Matrix out(a.rows(), batch * th);
  const Matrix& x = a.value();
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < th; ++i) out.col(b * th + i) = 0.5 * (x.col(b * t + 2 * i) + x.col(b * t + 2 * i + 1));
  return a.graph->make(std::move(out), batch, {a}, [a, batch, t, th](Graph& g, const Matrix& go) {
    Matrix gi = Matrix::Zero(a.rows(), a.cols());
    for (Index b = 0; b < batch; ++b)
      for (Index i = 0; i < th; ++i) {
        gi.col(b * t + 2 * i) = 0.5 * go.col(b * th + i);
        gi.col(b * t + 2 * i + 1) = 0.5 * go.col(b * th + i);
      }
    g.accumulate(a, gi);
  });
}

Var patchify(Var a, Index stride) {
  const Index batch = a.batch();
  const Index t = a.time();
  if (stride < 1 || t % stride != 0)
    throw ShapeError("patchify: time " + std::to_string(t) + " not divisible by stride " + std::to_string(stride));
  const Index n = t / stride;
  const Index c = a.rows();
  Matrix out(c * stride, batch * n);
  const Matrix& x = a.value();
  for (Index b = 0; b < batch; ++b)
    for (Index tok = 0; tok < n; ++tok)
      for (Index ch = 0; ch < c; ++ch)
        for (Index j = 0; j < stride; ++j) out(ch * stride + j, b * n + tok) = x(ch, b * t + tok * stride + j);
  return a.graph->make(std::move(out), batch, {a}, [a, batch, t, n, c, stride](Graph& g, const Matrix& go) {
    Matrix gi(c, batch * t);
    for (Index b = 0; b < batch; ++b)
      for (Index tok = 0; tok < n; ++tok)
        for (Index ch = 0; ch < c; ++ch)
          for (Index j = 0; j < stride; ++j) gi(ch, b * t + tok * stride + j) = go(ch * stride + j, b * n + tok);
    g.accumulate(a, gi);
  });
}

namespace {

// Time-major im2col for one sample: cols(t, c*k + j) = x(c, t + j - k/2).
Matrix im2col_same(const Matrix& xt, Index kernel) {
  const Index t = xt.rows();
  const Index cin = xt.cols();
  const Index half = kernel / 2;
  Matrix cols = Matrix::Zero(t, cin * kernel);
  for (Index c = 0; c < cin; ++c)
    for (Index j = 0; j < kernel; ++j) {
      const Index shift = j - half;
      const Index dst = std::max<Index>(0, -shift);
      const Index src = std::max<Index>(0, shift);
      const Index len = t - std::abs(shift);
      if (len > 0) cols.col(c * kernel + j).segment(dst, len) = xt.col(c).segment(src, len);
    }
  return cols;
}

}  // namespace

Var conv1d_same(Var x, Var weight, Var bias, Index kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw ShapeError("conv1d_same: kernel must be odd");
  const Index cin = x.rows();
  const Index cout = weight.rows();
  if (weight.cols() != cin * kernel) throw ShapeError("conv1d_same: weight must be out x in*kernel");
  require_column(bias, cout, "conv1d_same");
  const Index batch = x.batch();
  const Index t = x.time();
  Matrix out(cout, batch * t);
  for (Index b = 0; b < batch; ++b) {
    const Matrix xt = x.value().middleCols(b * t, t).transpose();
    const Matrix cols = im2col_same(xt, kernel);
    out.middleCols(b * t, t).noalias() = weight.value() * cols.transpose();
  }
  out.colwise() += bias.value().col(0);
  return x.graph->make(std::move(out), batch, {x, weight, bias},
                       [x, weight, bias, kernel, batch, t, cin](Graph& g, const Matrix& go) {
                         const Index half = kernel / 2;
                         Matrix gw = Matrix::Zero(weight.rows(), weight.cols());
                         Matrix gx(cin, batch * t);
                         for (Index b = 0; b < batch; ++b) {
                           const Matrix gos = go.middleCols(b * t, t);
                           if (g.requires_grad(weight)) {
                             const Matrix xt = g.value(x).middleCols(b * t, t).transpose();
                             gw.noalias() += gos * im2col_same(xt, kernel);
                           }
                           if (g.requires_grad(x)) {
                             const Matrix gcols = gos.transpose() * g.value(weight);  // t x cin*kernel
                             Matrix gxt = Matrix::Zero(t, cin);
                             for (Index c = 0; c < cin; ++c)
                               for (Index j = 0; j < kernel; ++j) {
                                 const Index shift = j - half;
                                 const Index dst = std::max<Index>(0, -shift);
                                 const Index src = std::max<Index>(0, shift);
                                 const Index len = t - std::abs(shift);
                                 if (len > 0) gxt.col(c).segment(src, len) += gcols.col(c * kernel + j).segment(dst, len);
                               }
                             gx.middleCols(b * t, t) = gxt.transpose();
                           }
                         }
                         g.accumulate(weight, gw);
                         g.accumulate(x, gx);
                         if (g.requires_grad(bias)) g.accumulate(bias, go.rowwise().sum());
                       });
}

Var batch_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var, bool training,
               double momentum, double eps) {
  const Index c = x.rows();
  require_column(gamma, c, "batch_norm");
  require_column(beta, c, "batch_norm");
  const Index n = x.cols();
  Vector mu;
  Vector var;
  if (training) {
    if (n < 2) throw ShapeError("batch_norm: training mode needs at least two columns");
    mu = x.value().rowwise().mean();
    var = (x.value().colwise() - mu).array().square().rowwise().mean();
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    running_mean.value = (1.0 - momentum) * running_mean.value + momentum * mu;
    running_var.value = (1.0 - momentum) * running_var.value + momentum * unbias * var;
  } else {
    mu = running_mean.value.col(0);
    var = running_var.value.col(0);
  }
  const Vector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = (x.value().colwise() - mu).array().colwise() * inv_std.array();
  Matrix out = (xhat.array().colwise() * gamma.value().col(0).array()).colwise() + beta.value().col(0).array();
  auto saved = std::make_shared<Matrix>(std::move(xhat));
  return x.graph->make(std::move(out), x.batch(), {x, gamma, beta},
                       [x, gamma, beta, saved, inv_std, training, n](Graph& g, const Matrix& go) {
                         const Matrix& xh = *saved;
                         if (g.requires_grad(gamma)) g.accumulate(gamma, go.cwiseProduct(xh).rowwise().sum());
                         if (g.requires_grad(beta)) g.accumulate(beta, go.rowwise().sum());
                         if (!g.requires_grad(x)) return;
                         const Matrix dxh = go.array().colwise() * g.value(gamma).col(0).array();
                         if (!training) {
                           g.accumulate(x, (dxh.array().colwise() * inv_std.array()).matrix());
                           return;
                         }
                         const Vector s1 = dxh.rowwise().sum();
                         const Vector s2 = dxh.cwiseProduct(xh).rowwise().sum();
                         const double nn = static_cast<double>(n);
                         Matrix gx = ((nn * dxh.array()).colwise() - s1.array()) - xh.array().colwise() * s2.array();
                         gx = gx.array().colwise() * (inv_std.array() / nn);
                         g.accumulate(x, gx);
                       });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Index d = x.rows();
  require_column(gamma, d, "layer_norm");
  require_column(beta, d, "layer_norm");
  const Eigen::RowVectorXd mu = x.value().colwise().mean();
  const Eigen::RowVectorXd var = (x.value().rowwise() - mu).array().square().colwise().mean();
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = (x.value().rowwise() - mu).array().rowwise() * inv_std.array();
  Matrix out = (xhat.array().colwise() * gamma.value().col(0).array()).colwise() + beta.value().col(0).array();
  auto saved = std::make_shared<Matrix>(std::move(xhat));
  return x.graph->make(std::move(out), x.batch(), {x, gamma, beta},
                       [x, gamma, beta, saved, inv_std, d](Graph& g, const Matrix& go) {
                         const Matrix& xh = *saved;
                         if (g.requires_grad(gamma)) g.accumulate(gamma, go.cwiseProduct(xh).rowwise().sum());
                         if (g.requires_grad(beta)) g.accumulate(beta, go.rowwise().sum());
                         if (!g.requires_grad(x)) return;
                         const Matrix dxh = go.array().colwise() * g.value(gamma).col(0).array();
                         const Eigen::RowVectorXd s1 = dxh.colwise().sum();
                         const Eigen::RowVectorXd s2 = dxh.cwiseProduct(xh).colwise().sum();
                         const double dd = static_cast<double>(d);
                         Matrix gx = ((dd * dxh.array()).rowwise() - s1.array()) - xh.array().rowwise() * s2.array();
                         gx = gx.array().rowwise() * (inv_std.array() / dd);
                         g.accumulate(x, gx);
                       });
}

Var dropout(Var x, double p, const Mode& mode) {
  if (!mode.training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
  if (!mode.rng) throw ConfigError("dropout: training mode requires an rng");
  const double keep = 1.0 - p;
  auto mask = std::make_shared<Matrix>(x.rows(), x.cols());
  for (Index j = 0; j < x.cols(); ++j)
    for (Index i = 0; i < x.rows(); ++i) (*mask)(i, j) = mode.rng->uniform() < keep ? 1.0 / keep : 0.0;
  Matrix out = x.value().cwiseProduct(*mask);
  return x.graph->make(std::move(out), x.batch(), {x},
                       [x, mask](Graph& g, const Matrix& go) { g.accumulate(x, go.cwiseProduct(*mask)); });
}

Matrix attention_probabilities(const Matrix& q, const Matrix& k) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.rows()));
  Matrix s = (q.transpose() * k) * inv;
  for (Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

Var multi_head_attention(Var q, Var k, Var v, Index heads) {
  require_same_shape(q, k, "multi_head_attention");
  require_same_shape(q, v, "multi_head_attention");
  const Index d = q.rows();
  if (heads < 1 || d % heads != 0) throw ShapeError("multi_head_attention: model dim not divisible by heads");
  const Index dh = d / heads;
  const Index batch = q.batch();
  const Index n = q.time();
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(batch * heads));
  Matrix out(d, batch * n);
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h) {
      const Matrix qs = q.value().block(h * dh, b * n, dh, n);
      const Matrix ks = k.value().block(h * dh, b * n, dh, n);
      Matrix& a = (*probs)[static_cast<std::size_t>(b * heads + h)];
      a = attention_probabilities(qs, ks);
      out.block(h * dh, b * n, dh, n).noalias() = v.value().block(h * dh, b * n, dh, n) * a.transpose();
    }
  return q.graph->make(std::move(out), batch, {q, k, v}, [q, k, v, probs, heads, dh, batch, n](Graph& g, const Matrix& go) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix gq(q.rows(), q.cols()), gk(k.rows(), k.cols()), gv(v.rows(), v.cols());
    for (Index b = 0; b < batch; ++b)
      for (Index h = 0; h < heads; ++h) {
        const Matrix& a = (*probs)[static_cast<std::size_t>(b * heads + h)];
        const auto qs = g.value(q).block(h * dh, b * n, dh, n);
        const auto ks = g.value(k).block(h * dh, b * n, dh, n);
        const auto vs = g.value(v).block(h * dh, b * n, dh, n);
        const auto gos = go.block(h * dh, b * n, dh, n);
        const Matrix da = gos.transpose() * vs;
        gv.block(h * dh, b * n, dh, n).noalias() = gos * a;
        const Vector rs = a.cwiseProduct(da).rowwise().sum();
        const Matrix ds = a.array() * (da.colwise() - rs).array();
        gq.block(h * dh, b * n, dh, n).noalias() = (ks * ds.transpose()) * inv;
        gk.block(h * dh, b * n, dh, n).noalias() = (qs * ds) * inv;
      }
    g.accumulate(q, gq);
    g.accumulate(k, gk);
    g.accumulate(v, gv);
  });
}

Vector attention_pool_weights(const Matrix& x, const Vector& w) { return softmax((w.transpose() * x).transpose()); }

Var attention_pool(Var x, Var w) {
  require_column(w, x.rows(), "attention_pool");
  const Index batch = x.batch();
  const Index t = x.time();
  auto weights = std::make_shared<std::vector<Vector>>(static_cast<std::size_t>(batch));
  Matrix out(x.rows(), batch);
  for (Index b = 0; b < batch; ++b) {
    Vector& a = (*weights)[static_cast<std::size_t>(b)];
    a = attention_pool_weights(x.value().middleCols(b * t, t), w.value().col(0));
    out.col(b) = x.value().middleCols(b * t, t) * a;
  }
  return x.graph->make(std::move(out), batch, {x, w}, [x, w, weights, batch, t](Graph& g, const Matrix& go) {
    Matrix gx(x.rows(), x.cols());
    Vector gw = Vector::Zero(x.rows());
    const Vector wv = g.value(w).col(0);
    for (Index b = 0; b < batch; ++b) {
      const Vector& a = (*weights)[static_cast<std::size_t>(b)];
      const auto xs = g.value(x).middleCols(b * t, t);
      const Vector da = xs.transpose() * go.col(b);
      const Vector ds = a.array() * (da.array() - a.dot(da));
      gx.middleCols(b * t, t) = go.col(b) * a.transpose() + wv * ds.transpose();
      gw += xs * ds;
    }
    g.accumulate(x, gx);
    g.accumulate(w, gw);
  });
}

Var lstm_recurrence(Var xw, Var w_hh, bool reverse) {
  const Index h = w_hh.cols();
  if (w_hh.rows() != 4 * h || xw.rows() != 4 * h) throw ShapeError("lstm_recurrence: expected 4h gate rows");
  const Index batch = xw.batch();
  const Index steps = xw.time();
  using Strided = Eigen::Map<Matrix, 0, Eigen::OuterStride<>>;
  auto at = [batch, steps](Matrix& m, Index t) { return Strided(m.data() + t * m.rows(), m.rows(), batch, Eigen::OuterStride<>(steps * m.rows())); };

  // Cached activations per step: gates (post-nonlinearity) and cell states.
  auto gates = std::make_shared<Matrix>(4 * h, batch * steps);
  auto cells = std::make_shared<Matrix>(h, batch * steps);
  Matrix out(h, batch * steps);
  Matrix x = xw.value();
  const Matrix& whh = w_hh.value();
  Matrix hp = Matrix::Zero(h, batch), cp = Matrix::Zero(h, batch);
  for (Index k = 0; k < steps; ++k) {
    const Index t = reverse ? steps - 1 - k : k;
    Matrix z = at(x, t) + whh * hp;
    z.topRows(2 * h) = z.topRows(2 * h).unaryExpr(&sigmoid_value);
    z.middleRows(2 * h, h) = z.middleRows(2 * h, h).array().tanh().matrix();
    z.bottomRows(h) = z.bottomRows(h).unaryExpr(&sigmoid_value);
    cp = z.middleRows(h, h).cwiseProduct(cp) + z.topRows(h).cwiseProduct(z.middleRows(2 * h, h));
    hp = z.bottomRows(h).cwiseProduct(cp.array().tanh().matrix());
    at(*gates, t) = z;
    at(*cells, t) = cp;
    at(out, t) = hp;
  }
  auto hs = std::make_shared<Matrix>(out);
  return xw.graph->make(std::move(out), batch, {xw, w_hh},
                        [xw, w_hh, reverse, h, batch, steps, gates, cells, hs, at](Graph& g, const Matrix& go_in) {
    Matrix go = go_in;
    const Matrix& whh = g.value(w_hh);
    Matrix gx(4 * h, batch * steps);
    Matrix gw = Matrix::Zero(4 * h, h);
    Matrix dh_next = Matrix::Zero(h, batch), dc_next = Matrix::Zero(h, batch);
    for (Index k = steps - 1; k >= 0; --k) {
      const Index t = reverse ? steps - 1 - k : k;
      const Index tp = reverse ? t + 1 : t - 1;
      const bool first = k == 0;
      const Matrix z = at(*gates, t);
      const Matrix c = at(*cells, t);
      const Matrix c_prev = first ? Matrix::Zero(h, batch) : Matrix(at(*cells, tp));
      const Matrix h_prev = first ? Matrix::Zero(h, batch) : Matrix(at(*hs, tp));
      const auto i = z.topRows(h).array();
      const auto f = z.middleRows(h, h).array();
      const auto gg = z.middleRows(2 * h, h).array();
      const auto o = z.bottomRows(h).array();
      const Eigen::ArrayXXd tc = c.array().tanh();
      const Eigen::ArrayXXd dh = at(go, t).array() + dh_next.array();
      const Eigen::ArrayXXd dc = dh * o * (1.0 - tc.square()) + dc_next.array();
      Matrix dz(4 * h, batch);
      dz.topRows(h) = (dc * gg * i * (1.0 - i)).matrix();
      dz.middleRows(h, h) = (dc * c_prev.array() * f * (1.0 - f)).matrix();
      dz.middleRows(2 * h, h) = (dc * i * (1.0 - gg.square())).matrix();
      dz.bottomRows(h) = (dh * tc * o * (1.0 - o)).matrix();
      dc_next = (dc * f).matrix();
      dh_next = whh.transpose() * dz;
      gw.noalias() += dz * h_prev.transpose();
      at(gx, t) = dz;
    }
    g.accumulate(xw, gx);
    g.accumulate(w_hh, gw);
  });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  const Index k = logits.rows();
  const Index batch = logits.cols();
  if (static_cast<Index>(labels.size()) != batch) throw ShapeError("cross_entropy: label count mismatch");
  Matrix probs(k, batch);
  double total = 0.0;
  for (Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= k) throw DataError("cross_entropy: label " + std::to_string(y) + " out of range");
    const auto z = logits.value().col(b);
    if (!z.allFinite()) throw NumericError("cross_entropy: non-finite logits");
    total += log_sum_exp(z) - z[y];
    probs.col(b) = softmax(z);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(batch);
  return logits.graph->make(std::move(out), 1, {logits}, [logits, probs, labels, batch](Graph& g, const Matrix& go) {
    Matrix gl = probs;
    for (Index b = 0; b < batch; ++b) gl(labels[static_cast<std::size_t>(b)], b) -= 1.0;
    g.accumulate(logits, gl * (go(0, 0) / static_cast<double>(batch)));
  });
}

}  // namespace eegssm::ad
