#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "eegssm/ndarray.hpp"

namespace eegssm {

inline Index next_pow2(Index n) {
  Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline bool is_pow2(Index n) { return n > 0 && (n & (n - 1)) == 0; }

// Forward twiddles exp(-2 pi i k / n), k < n/2, from direct cos/sin so the
// error stays at the rounding floor; cached per thread and size.
template <class Real>
const std::vector<std::complex<Real>>& twiddles(Index n) {
  thread_local std::unordered_map<Index, std::vector<std::complex<Real>>> cache;
  auto [it, fresh] = cache.try_emplace(n);
  if (fresh) {
    it->second.resize(static_cast<std::size_t>(n / 2));
    for (Index k = 0; k < n / 2; ++k) {
      const Real ang = Real(-2) * std::numbers::pi_v<Real> * Real(k) / Real(n);
      it->second[static_cast<std::size_t>(k)] = std::complex<Real>(std::cos(ang), std::sin(ang));
    }
  }
  return it->second;
}

// Iterative radix-2 FFT. Forward uses exp(-2 pi i k n / N); the inverse
// includes the 1/N factor.
template <class Real>
void fft_inplace(VectorX<std::complex<Real>>& a, bool inverse = false) {
  using Complex = std::complex<Real>;
  const Index n = a.size();
  if (!is_pow2(n)) throw ShapeError("fft_inplace: length " + std::to_string(n) + " is not a power of two");
  if (n == 1) return;

  for (Index i = 1, j = 0; i < n; ++i) {
    Index bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  const std::vector<Complex>& tw = twiddles<Real>(n);
  const bool conj = inverse;

  for (Index len = 2; len <= n; len <<= 1) {
    const Index half = len / 2;
    const Index stride = n / len;
    for (Index start = 0; start < n; start += len) {
      for (Index k = 0; k < half; ++k) {
        const Complex w = conj ? std::conj(tw[static_cast<std::size_t>(k * stride)]) : tw[static_cast<std::size_t>(k * stride)];
        const Complex u = a[start + k];
        const Complex v = a[start + k + half] * w;
        a[start + k] = u + v;
        a[start + k + half] = u - v;
      }
    }
  }
  if (inverse) a /= Real(n);
}

// Zero-padded forward transform of a real or complex sequence.
template <class Derived>
auto fft_padded(const Eigen::MatrixBase<Derived>& x, Index n) {
  using Real = typename Eigen::NumTraits<typename Derived::Scalar>::Real;
  VectorX<std::complex<Real>> out = VectorX<std::complex<Real>>::Zero(n);
  const Index m = std::min<Index>(n, x.size());
  for (Index i = 0; i < m; ++i) out[i] = std::complex<Real>(x(i));
  fft_inplace(out);
  return out;
}

// Full linear convolution (length a + b - 1) through a zero-padded FFT.
template <class Scalar>
VectorX<Scalar> fft_linear_convolve(const VectorX<Scalar>& a, const VectorX<Scalar>& b) {
  using Real = typename Eigen::NumTraits<Scalar>::Real;
  if (a.size() == 0 || b.size() == 0) return VectorX<Scalar>();
  const Index out_len = a.size() + b.size() - 1;
  const Index n = next_pow2(out_len);
  auto fa = fft_padded(a, n);
  const auto fb = fft_padded(b, n);
  fa.array() *= fb.array();
  fft_inplace(fa, true);
  VectorX<Scalar> out(out_len);
  for (Index i = 0; i < out_len; ++i) {
    if constexpr (Eigen::NumTraits<Scalar>::IsComplex)
      out[i] = fa[i];
    else
      out[i] = static_cast<Real>(fa[i].real());
  }
  return out;
}

// Circular convolution of two equal-length sequences:
//   out[t] = sum_s a[s] * b[(t - s) mod L].
// Any L is accepted: the linear convolution is computed at a power-of-two
// length and folded back modulo L.
template <class Scalar>
NdArray<Scalar> fft_circular_convolve(const NdArray<Scalar>& a, const NdArray<Scalar>& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size())
    throw ShapeError("fft_circular_convolve: operands must be 1-D with equal lengths");
  const Index len = a.size();
  const VectorX<Scalar> full = fft_linear_convolve<Scalar>(a.flat(), b.flat());
  VectorX<Scalar> out = VectorX<Scalar>::Zero(len);
  for (Index i = 0; i < full.size(); ++i) out[i % len] += full[i];
  return NdArray<Scalar>::vector(std::move(out));
}

}  // namespace eegssm
