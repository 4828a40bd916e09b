#include "eegssm/ssm.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "eegssm/array_ops.hpp"
#include "eegssm/fft.hpp"
#include "eegssm/rng.hpp"
#include "eegssm/scan.hpp"

namespace eegssm::ssm {

namespace {

constexpr double kSmallLambda = 1e-12;

struct ScanElem {
  Complex a{1.0, 0.0};
  Complex b{0.0, 0.0};
};

ScanElem combine(const ScanElem& earlier, const ScanElem& later) {
  return {later.a * earlier.a, later.a * earlier.b + later.b};
}

CMatrix complex_times_real(const CMatrix& a, const Matrix& r) {
  CMatrix out(a.rows(), r.cols());
  out.real() = a.real() * r;
  out.imag() = a.imag() * r;
  return out;
}

// Re(C h) for complex C and h.
Matrix real_product(const CMatrix& c, const CMatrix& h) {
  return c.real() * h.real() - c.imag() * h.imag();
}

CMatrix reverse_cols(const CMatrix& m) { return m.rowwise().reverse(); }

struct LayerValues {
  CVector lambda;
  Vector dt;
  CVector a;      // lambda_bar
  CVector scale;  // (lambda_bar - 1) / lambda
  CMatrix B;
  CMatrix B_bar;
  CMatrix C;
  Vector D;
  Vector neg_real;  // exp(log_neg_real)
};

LayerValues layer_values(const S5LayerParams& p) {
  LayerValues v;
  v.lambda = p.lambda();
  v.dt = p.dt();
  v.neg_real = p.log_neg_real.array().exp();
  const Index n = p.state_dim();
  v.a.resize(n);
  v.scale.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Zoh z = zoh(v.lambda[i], v.dt[i]);
    v.a[i] = z.lambda_bar;
    v.scale[i] = z.input_scale;
  }
  v.B = p.B;
  v.B_bar = v.scale.asDiagonal() * p.B;
  v.C = p.C;
  v.D = p.D;
  return v;
}

// Pulls gradients w.r.t. (lambda_bar, B_bar) back to the stored parameters.
void discretization_backward(ad::Graph& g, const SsmVars& vars, const LayerValues& v, const CVector& g_a,
                             const CMatrix& g_bbar) {
  const Index n = v.lambda.size();
  Vector g_rho(n), g_imag(n), g_logdt(n);
  for (Index p = 0; p < n; ++p) {
    const Complex lam = v.lambda[p];
    const double dt = v.dt[p];
    const Complex abar = v.a[p];
    const Complex g_s = (g_bbar.row(p).array() * v.B.row(p).array().conjugate()).sum();
    Complex ds_dlam;
    Complex ds_ddt;
    if (std::abs(lam) < kSmallLambda) {
      ds_dlam = 0.5 * dt * dt;
      ds_ddt = 1.0;
    } else {
      ds_dlam = (dt * abar * lam - (abar - 1.0)) / (lam * lam);
      ds_ddt = abar;
    }
    const Complex g_lam = std::conj(dt * abar) * g_a[p] + std::conj(ds_dlam) * g_s;
    const double g_dt = (g_a[p] * std::conj(lam * abar)).real() + (g_s * std::conj(ds_ddt)).real();
    g_rho[p] = -v.neg_real[p] * g_lam.real();
    g_imag[p] = g_lam.imag();
    g_logdt[p] = dt * g_dt;
  }
  const CMatrix g_b = v.scale.conjugate().asDiagonal() * g_bbar;
  g.accumulate(vars.log_neg_real, g_rho);
  g.accumulate(vars.imag, g_imag);
  g.accumulate(vars.log_dt, g_logdt);
  if (g.requires_grad(vars.b_re)) g.accumulate(vars.b_re, Matrix(g_b.real()));
  if (g.requires_grad(vars.b_im)) g.accumulate(vars.b_im, Matrix(g_b.imag()));
}

void check_vars(const SsmVars& p, Index h) {
  const Index n = p.log_neg_real.rows();
  auto need = [](ad::Var v, Index r, Index c, const char* what) {
    if (v.rows() != r || v.cols() != c)
      throw ShapeError(std::string("ssm: ") + what + " must be " + std::to_string(r) + "x" + std::to_string(c));
  };
  need(p.log_neg_real, n, 1, "log_neg_real");
  need(p.imag, n, 1, "imag");
  need(p.log_dt, n, 1, "log_dt");
  need(p.b_re, n, h, "b_re");
  need(p.b_im, n, h, "b_im");
  need(p.c_re, h, n, "c_re");
  need(p.c_im, h, n, "c_im");
  need(p.d, h, 1, "d");
}

}  // namespace

CVector S5LayerParams::lambda() const {
  CVector out(log_neg_real.size());
  for (Index p = 0; p < out.size(); ++p) out[p] = Complex(-std::exp(log_neg_real[p]), imag[p]);
  return out;
}

S5LayerParams init_s5(Index state_dim, Index model_dim, std::uint64_t seed) {
  if (state_dim < 1 || model_dim < 1) throw ConfigError("init_s5: dimensions must be positive");
  Rng rng(seed);
  S5LayerParams p;
  p.log_neg_real = Vector::Constant(state_dim, std::log(0.5));
  p.imag.resize(state_dim);
  for (Index i = 0; i < state_dim; ++i) p.imag[i] = std::numbers::pi * static_cast<double>(i);
  const double sb = std::sqrt(0.5 / static_cast<double>(state_dim));
  const double sc = std::sqrt(0.5 / static_cast<double>(model_dim));
  p.B.resize(state_dim, model_dim);
  p.B.real() = rng.normal_matrix(state_dim, model_dim, sb);
  p.B.imag() = rng.normal_matrix(state_dim, model_dim, sb);
  p.C.resize(model_dim, state_dim);
  p.C.real() = rng.normal_matrix(model_dim, state_dim, sc);
  p.C.imag() = rng.normal_matrix(model_dim, state_dim, sc);
  p.D = rng.normal_matrix(model_dim, 1).col(0);
  p.log_dt = rng.uniform_matrix(state_dim, 1, std::log(1e-3), std::log(1e-1)).col(0);
  return p;
}

Zoh zoh(Complex lambda, double dt) {
  const Complex abar = std::exp(lambda * dt);
  if (std::abs(lambda) < kSmallLambda) return {abar, Complex(dt, 0.0)};
  return {abar, (abar - 1.0) / lambda};
}

std::pair<Complex, Eigen::RowVectorXcd> zoh_discretize(const S5LayerParams& params, Index p) {
  const Zoh z = zoh(params.lambda()[p], std::exp(params.log_dt[p]));
  return {z.lambda_bar, z.input_scale * params.B.row(p)};
}

DiscreteS5 discretize(const S5LayerParams& params) {
  const LayerValues v = layer_values(params);
  return {v.a, v.B_bar};
}

CMatrix scan_states(const CVector& a, const CMatrix& x, int workers) {
  const Index len = x.cols();
  CMatrix h(x.rows(), len);
  std::vector<ScanElem> elems(static_cast<std::size_t>(len));
  for (Index p = 0; p < x.rows(); ++p) {
    for (Index t = 0; t < len; ++t) elems[static_cast<std::size_t>(t)] = {a[p], x(p, t)};
    inclusive_scan_inplace(std::span<ScanElem>(elems), combine, workers);
    for (Index t = 0; t < len; ++t) h(p, t) = elems[static_cast<std::size_t>(t)].b;
  }
  return h;
}

Matrix sequential_recurrence(const DiscreteS5& disc, const CMatrix& C, const Vector& D, const Matrix& u) {
  const Index n = disc.lambda_bar.size();
  Matrix y(C.rows(), u.cols());
  CVector h = CVector::Zero(n);
  for (Index t = 0; t < u.cols(); ++t) {
    for (Index p = 0; p < n; ++p) {
      Complex drive = 0.0;
      for (Index j = 0; j < u.rows(); ++j) drive += disc.B_bar(p, j) * u(j, t);
      h[p] = disc.lambda_bar[p] * h[p] + drive;
    }
    for (Index k = 0; k < C.rows(); ++k) {
      Complex acc = 0.0;
      for (Index p = 0; p < n; ++p) acc += C(k, p) * h[p];
      y(k, t) = acc.real() + D[k] * u(k, t);
    }
  }
  return y;
}

Matrix parallel_scan(const DiscreteS5& disc, const CMatrix& C, const Vector& D, const Matrix& u, int workers) {
  const CMatrix h = scan_states(disc.lambda_bar, complex_times_real(disc.B_bar, u), workers);
  Matrix y = real_product(C, h);
  y += D.asDiagonal() * u;
  return y;
}

namespace {

// W[(k*H + j), p] = C[k, p] * B_bar[p, j].
CMatrix kernel_factors(const CMatrix& c, const CMatrix& b_bar) {
  const Index h_out = c.rows();
  const Index h_in = b_bar.cols();
  CMatrix w(h_out * h_in, c.cols());
  for (Index k = 0; k < h_out; ++k)
    for (Index j = 0; j < h_in; ++j) w.row(k * h_in + j) = c.row(k).cwiseProduct(b_bar.col(j).transpose());
  return w;
}

// V[p, t] = a_p^t.
CMatrix vandermonde(const CVector& a, Index length) {
  CMatrix v(a.size(), length);
  if (length == 0) return v;
  v.col(0).setOnes();
  for (Index t = 1; t < length; ++t) v.col(t) = v.col(t - 1).cwiseProduct(a);
  return v;
}

}  // namespace

RealArray s4_kernel(const DiscreteS5& disc, const CMatrix& C, Index length) {
  const Index h_out = C.rows();
  const Index h_in = disc.B_bar.cols();
  const CMatrix w = kernel_factors(C, disc.B_bar);
  const CMatrix v = vandermonde(disc.lambda_bar, length);
  const Matrix k = real_product(w, v);
  RealArray out({h_out, h_in, length});
  for (Index r = 0; r < k.rows(); ++r)
    for (Index t = 0; t < length; ++t) out[r * length + t] = k(r, t);
  return out;
}

Matrix s4_forward(const RealArray& kernel, const Vector& D, const Matrix& u) {
  if (kernel.rank() != 3 || kernel.extent(1) != u.rows())
    throw ShapeError("s4_forward: kernel must be (H_out, H_in, L) with H_in = input rows");
  const Index h_out = kernel.extent(0);
  const Index h_in = kernel.extent(1);
  const Index klen = kernel.extent(2);
  const Index len = u.cols();
  Matrix y = Matrix::Zero(h_out, len);
  for (Index k = 0; k < h_out; ++k)
    for (Index j = 0; j < h_in; ++j) {
      const Vector kj = Eigen::Map<const Vector>(kernel.data() + (k * h_in + j) * klen, std::min(klen, len));
      y.row(k) += causal_convolve<double>(u.row(j).transpose(), kj).transpose();
    }
  for (Index k = 0; k < std::min(h_out, h_in); ++k) y.row(k) += D[k] * u.row(k);
  return y;
}

S5LayerParams to_layer_params(const SsmVars& vars) {
  S5LayerParams p;
  p.log_neg_real = vars.log_neg_real.value().col(0);
  p.imag = vars.imag.value().col(0);
  p.log_dt = vars.log_dt.value().col(0);
  p.B.resize(vars.b_re.rows(), vars.b_re.cols());
  p.B.real() = vars.b_re.value();
  p.B.imag() = vars.b_im.value();
  p.C.resize(vars.c_re.rows(), vars.c_re.cols());
  p.C.real() = vars.c_re.value();
  p.C.imag() = vars.c_im.value();
  p.D = vars.d.value().col(0);
  return p;
}

ad::Var s5_ssm(ad::Var u, const SsmVars& vars) {
  const Index h = u.rows();
  check_vars(vars, h);
  const Index batch = u.batch();
  const Index len = u.time();
  auto vals = std::make_shared<LayerValues>(layer_values(to_layer_params(vars)));
  auto states = std::make_shared<CMatrix>(vals->a.size(), u.cols());
  Matrix y(h, u.cols());
  for (Index b = 0; b < batch; ++b) {
    const Matrix us = u.value().middleCols(b * len, len);
    const CMatrix hs = scan_states(vals->a, complex_times_real(vals->B_bar, us));
    states->middleCols(b * len, len) = hs;
    y.middleCols(b * len, len) = real_product(vals->C, hs) + vals->D.asDiagonal() * us;
  }
  ad::Graph& g = *u.graph;
  return g.make(std::move(y), batch,
                {u, vars.log_neg_real, vars.imag, vars.log_dt, vars.b_re, vars.b_im, vars.c_re, vars.c_im, vars.d},
                [u, vars, vals, states, batch, len](ad::Graph& g, const Matrix& gy) {
                  const LayerValues& v = *vals;
                  const Index n = v.a.size();
                  const Index h = gy.rows();
                  Matrix gu(h, batch * len);
                  Matrix gd = Matrix::Zero(h, 1);
                  Matrix gc_re = Matrix::Zero(h, n);
                  Matrix gc_im = Matrix::Zero(h, n);
                  CVector g_a = CVector::Zero(n);
                  CMatrix g_bbar = CMatrix::Zero(n, h);
                  const CVector a_conj = v.a.conjugate();
                  for (Index b = 0; b < batch; ++b) {
                    const Matrix us = g.value(u).middleCols(b * len, len);
                    const Matrix gys = gy.middleCols(b * len, len);
                    const CMatrix hs = states->middleCols(b * len, len);
                    gd.col(0) += gys.cwiseProduct(us).rowwise().sum();
                    gc_re += gys * hs.real().transpose();
                    gc_im -= gys * hs.imag().transpose();
                    // Direct gradient into the states: conj(C)^T dy.
                    CMatrix direct(n, len);
                    direct.real() = v.C.real().transpose() * gys;
                    direct.imag() = -(v.C.imag().transpose() * gys);
                    // Adjoint recurrence lam_t = direct_t + conj(a) lam_{t+1}, scanned in reverse.
                    const CMatrix lam = reverse_cols(scan_states(a_conj, reverse_cols(direct)));
                    if (len > 1)
                      g_a += (lam.rightCols(len - 1).array() * hs.leftCols(len - 1).array().conjugate())
                                 .rowwise()
                                 .sum()
                                 .matrix();
                    g_bbar.real() += lam.real() * us.transpose();
                    g_bbar.imag() += lam.imag() * us.transpose();
                    gu.middleCols(b * len, len) = v.B_bar.real().transpose() * lam.real() +
                                                  v.B_bar.imag().transpose() * lam.imag() + v.D.asDiagonal() * gys;
                  }
                  g.accumulate(u, gu);
                  g.accumulate(vars.d, gd);
                  g.accumulate(vars.c_re, gc_re);
                  g.accumulate(vars.c_im, gc_im);
                  discretization_backward(g, vars, v, g_a, g_bbar);
                });
}

namespace {

// Per-mode causal convolution x_p = g_p * z_p of complex sequences through
// zero-padded FFTs; `spec` holds the transformed kernels row by row. With
// `correlate`, spec must hold the transforms of conj(g_p) and the result is
// the adjoint out[s] = sum_t conj(g_p[t - s]) z_p[t].
CMatrix convolve_modes(const std::vector<CVector>& spec, const CMatrix& z, Index nfft, bool correlate) {
  const Index len = z.cols();
  CMatrix out(z.rows(), len);
  for (Index p = 0; p < z.rows(); ++p) {
    CVector f = correlate ? fft_padded(z.row(p).reverse().transpose(), nfft) : fft_padded(z.row(p).transpose(), nfft);
    f.array() *= spec[static_cast<std::size_t>(p)].array();
    fft_inplace(f, true);
    if (correlate)
      out.row(p) = f.head(len).reverse().transpose();
    else
      out.row(p) = f.head(len).transpose();
  }
  return out;
}

}  // namespace

ad::Var s4_ssm(ad::Var u, const SsmVars& vars) {
  const Index h = u.rows();
  check_vars(vars, h);
  const Index batch = u.batch();
  const Index len = u.time();
  const Index nfft = next_pow2(2 * len);
  auto vals = std::make_shared<LayerValues>(layer_values(to_layer_params(vars)));
  const LayerValues& v = *vals;
  const Index n = v.a.size();

  // Diagonal kernel g_p(t) = lambda_bar_p^t, one FFT per state.
  auto vand = std::make_shared<CMatrix>(vandermonde(v.a, len));
  auto spec_g = std::make_shared<std::vector<CVector>>();
  spec_g->reserve(static_cast<std::size_t>(n));
  for (Index p = 0; p < n; ++p) spec_g->push_back(fft_padded(vand->row(p).transpose(), nfft));

  auto states = std::make_shared<CMatrix>(n, u.cols());
  Matrix y(h, u.cols());
  for (Index b = 0; b < batch; ++b) {
    const Matrix us = u.value().middleCols(b * len, len);
    const CMatrix x = convolve_modes(*spec_g, complex_times_real(v.B_bar, us), nfft, false);
    states->middleCols(b * len, len) = x;
    y.middleCols(b * len, len) = real_product(v.C, x) + v.D.asDiagonal() * us;
  }

  ad::Graph& g = *u.graph;
  return g.make(std::move(y), batch,
                {u, vars.log_neg_real, vars.imag, vars.log_dt, vars.b_re, vars.b_im, vars.c_re, vars.c_im, vars.d},
                [u, vars, vals, vand, spec_g, states, batch, len, nfft](ad::Graph& g, const Matrix& gy) {
                  const LayerValues& v = *vals;
                  const Index n = v.a.size();
                  const Matrix& uv = g.value(u);
                  Matrix gu = v.D.asDiagonal() * gy;
                  const Matrix gd = gy.cwiseProduct(uv).rowwise().sum();
                  Matrix gc_re = gy * states->real().transpose();
                  Matrix gc_im = -(gy * states->imag().transpose());
                  CMatrix g_bbar = CMatrix::Zero(n, v.B_bar.cols());
                  CMatrix g_kernel = CMatrix::Zero(n, len);
                  std::vector<CVector> spec_gc;
                  for (Index p = 0; p < n; ++p) spec_gc.push_back(fft_padded(vand->row(p).conjugate().transpose(), nfft));
                  for (Index b = 0; b < batch; ++b) {
                    const Matrix us = uv.middleCols(b * len, len);
                    const CMatrix gx = v.C.adjoint() * gy.middleCols(b * len, len).cast<Complex>();
                    const CMatrix gz = convolve_modes(spec_gc, gx, nfft, true);
                    g_bbar.real() += gz.real() * us.transpose();
                    g_bbar.imag() += gz.imag() * us.transpose();
                    gu.middleCols(b * len, len) += v.B_bar.real().transpose() * gz.real() + v.B_bar.imag().transpose() * gz.imag();
                    // Kernel gradient: correlate the state adjoint with the projected input.
                    const CMatrix z = complex_times_real(v.B_bar, us);
                    for (Index p = 0; p < n; ++p) {
                      CVector r = fft_padded(gx.row(p).reverse().transpose(), nfft);
                      r.array() *= fft_padded(z.row(p).conjugate().transpose(), nfft).array();
                      fft_inplace(r, true);
                      g_kernel.row(p) += r.head(len).reverse().transpose();
                    }
                  }
                  // g_p(t) = a_p^t, so dg/da = t a^(t-1).
                  CVector g_a = CVector::Zero(n);
                  for (Index t = 1; t < len; ++t)
                    g_a.array() += g_kernel.col(t).array() * (static_cast<double>(t) * vand->col(t - 1)).array().conjugate();
                  g.accumulate(u, gu);
                  g.accumulate(vars.d, gd);
                  g.accumulate(vars.c_re, gc_re);
                  g.accumulate(vars.c_im, gc_im);
                  discretization_backward(g, vars, v, g_a, g_bbar);
                });
}

ad::Var s5_block(ad::Var x, const SsmVars& fwd, const SsmVars& bwd, ad::Var norm_gamma, ad::Var norm_beta,
                 double dropout, const ad::Mode& mode, bool kernel_path) {
  auto op = kernel_path ? &s4_ssm : &s5_ssm;
  ad::Var z = ad::layer_norm(x, norm_gamma, norm_beta);
  ad::Var y = ad::add(op(z, fwd), ad::reverse_time(op(ad::reverse_time(z), bwd)));
  return ad::add(x, ad::dropout(ad::gelu(y), dropout, mode));
}

}  // namespace eegssm::ssm
