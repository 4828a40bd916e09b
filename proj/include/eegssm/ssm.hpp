#pragma once

#include <complex>
#include <cstdint>
#include <utility>

#include "eegssm/autodiff.hpp"
#include "eegssm/ndarray.hpp"
#include "eegssm/ops.hpp"

// Diagonal state-space layers:
//   h'(t) = diag(lambda) h(t) + B u(t),   y(t) = Re(C h(t)) + D .* u(t)
// discretized by zero-order hold with a per-state timescale dt.
namespace eegssm::ssm {

using Complex = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;

// Re(lambda) = -exp(log_neg_real) keeps every continuous pole in the open
// left half-plane, and dt = exp(log_dt) keeps every timescale positive.
struct S5LayerParams {
  Vector log_neg_real;  // P
  Vector imag;          // P
  CMatrix B;            // P x H
  CMatrix C;            // H x P
  Vector D;             // H
  Vector log_dt;        // P

  Index state_dim() const { return B.rows(); }
  Index model_dim() const { return B.cols(); }
  CVector lambda() const;
  Vector dt() const { return log_dt.array().exp(); }
};

struct DiscreteS5 {
  CVector lambda_bar;  // P
  CMatrix B_bar;       // P x H
};

// HiPPO-LegS diagonal approximation lambda_p = -0.5 + i*pi*p; B, C complex
// Gaussian with E|.|^2 = 1/P and 1/H; D ~ N(0, 1); log dt ~ U[log 1e-3, log 1e-1].
S5LayerParams init_s5(Index state_dim, Index model_dim, std::uint64_t seed);

struct Zoh {
  Complex lambda_bar;
  Complex input_scale;  // B_bar = input_scale * B
};

// lambda_bar = exp(lambda dt), input_scale = (lambda_bar - 1) / lambda, with
// the series limit dt when |lambda| < 1e-12.
Zoh zoh(Complex lambda, double dt);
std::pair<Complex, Eigen::RowVectorXcd> zoh_discretize(const S5LayerParams& params, Index p);
DiscreteS5 discretize(const S5LayerParams& params);

// Reference: h_t = lambda_bar .* h_{t-1} + B_bar u_t, strictly in time order.
Matrix sequential_recurrence(const DiscreteS5& disc, const CMatrix& C, const Vector& D, const Matrix& u);

// Same output through an associative scan over (a_t, b_t) pairs with
// (a1, b1) o (a2, b2) = (a2 a1, a2 b1 + b2).
Matrix parallel_scan(const DiscreteS5& disc, const CMatrix& C, const Vector& D, const Matrix& u, int workers = 1);

// States of x_t -> a .* h_{t-1} + x_t for every row of x (P x L).
CMatrix scan_states(const CVector& a, const CMatrix& x, int workers = 1);

// Convolution kernel K[k, j, t] = Re(C diag(lambda_bar^t) B_bar)[k, j] for t < length.
RealArray s4_kernel(const DiscreteS5& disc, const CMatrix& C, Index length);
// y_k = sum_j causal_conv(K[k, j, :], u_j) + D_k u_k, using zero-padded FFTs.
Matrix s4_forward(const RealArray& kernel, const Vector& D, const Matrix& u);

// Graph leaves of one SSM layer, all real: complex B and C are split into
// real and imaginary parts.
struct SsmVars {
  ad::Var log_neg_real, imag, log_dt;  // P x 1
  ad::Var b_re, b_im;                  // P x H
  ad::Var c_re, c_im;                  // H x P
  ad::Var d;                           // H x 1
};

S5LayerParams to_layer_params(const SsmVars& vars);

// Differentiable SSM over (H x batch*T) inputs, evaluated per sample by the
// associative scan. Gradients are hand-derived adjoints.
ad::Var s5_ssm(ad::Var u, const SsmVars& p);
// The same LTI system as causal FFT convolutions with the diagonal kernels
// lambda_bar_p^t, read out through C.
ad::Var s4_ssm(ad::Var u, const SsmVars& p);

// Bidirectional pre-norm residual block:
//   z = LN(x);  out = x + dropout(gelu(ssm(z; fwd) + reverse(ssm(reverse(z); bwd)))).
// Summing the two directions equals projecting the concatenated 2P state
// through [C_fwd | C_bwd].
ad::Var s5_block(ad::Var x, const SsmVars& fwd, const SsmVars& bwd, ad::Var norm_gamma, ad::Var norm_beta,
                 double dropout, const ad::Mode& mode, bool kernel_path = false);

}  // namespace eegssm::ssm
