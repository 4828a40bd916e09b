#pragma once

#include <cmath>
#include <limits>

#include "eegssm/fft.hpp"
#include "eegssm/ndarray.hpp"

namespace eegssm {

// Valid-mode 1-D correlation: out[i] = sum_j signal[i + j] * kernel[j].
// This (unflipped) convention is used by every convolution in the library.
template <class Scalar>
NdArray<Scalar> conv1d_valid(const NdArray<Scalar>& signal, const NdArray<Scalar>& kernel) {
  if (signal.rank() != 1 || kernel.rank() != 1) throw ShapeError("conv1d_valid: operands must be 1-D");
  const Index len = signal.size();
  const Index k = kernel.size();
  if (k == 0 || k > len)
    throw ShapeError("conv1d_valid: kernel length " + std::to_string(k) + " exceeds signal length " +
                     std::to_string(len));
  VectorX<Scalar> out(len - k + 1);
  for (Index i = 0; i < out.size(); ++i)
    out[i] = (signal.flat().segment(i, k).array() * kernel.flat().array()).sum();
  return NdArray<Scalar>::vector(std::move(out));
}

// Causal linear convolution truncated to the input length:
//   out[t] = sum_{s <= t} kernel[s] * u[t - s].
template <class Scalar>
VectorX<Scalar> causal_convolve(const VectorX<Scalar>& u, const VectorX<Scalar>& kernel) {
  const VectorX<Scalar> full = fft_linear_convolve<Scalar>(u, kernel);
  return full.head(u.size());
}

// Numerically stable softmax (max subtracted before exponentiation).
template <class Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw ShapeError("softmax: empty input");
  if (!logits.allFinite()) throw NumericError("softmax: non-finite logits");
  VectorX<Scalar> out = (logits.array() - logits.maxCoeff()).exp().matrix();
  out /= out.sum();
  return out;
}

inline RealArray softmax(const RealArray& logits) { return RealArray::vector(softmax(logits.flat())); }

// log(sum(exp(x))) without overflow.
template <class Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  const auto m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace eegssm
