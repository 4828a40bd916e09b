#pragma once

#include <vector>

#include "eegssm/autodiff.hpp"
#include "eegssm/rng.hpp"

// Differentiable operations over ad::Var. Sequence inputs use the
// (features x batch*time) layout described in autodiff.hpp.
namespace eegssm::ad {

// Forward-pass mode shared by every model.
struct Mode {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; required when training with dropout > 0
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a + bias, bias is (rows x 1) broadcast over columns.
Var add_bias(Var a, Var bias);
// a .* gamma, gamma is (rows x 1) broadcast over columns.
Var scale_rows(Var a, Var gamma);

Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);

Var sum(Var a);
Var mean(Var a);
// Column-wise softmax.
Var softmax_cols(Var a);

Var concat_rows(Var a, Var b);
Var slice_rows(Var a, Index start, Index count);

// Per-sample time reversal.
Var reverse_time(Var a);
// Per-sample mean over time: (C x B*T) -> (C x B).
Var mean_time(Var a);
// Per-sample non-overlapping average pooling with window 2 (odd tails dropped).
Var avg_pool2(Var a);
// (C x B*T) -> (C*stride x B*T/stride); row c*stride + j of token n is x[c, n*stride + j].
Var patchify(Var a, Index stride);

// Per-sample 'same' correlation with zero padding. weight is
// (out x in*kernel) with column index c*kernel + j; kernel must be odd.
Var conv1d_same(Var x, Var weight, Var bias, Index kernel);

// Normalizes each row over all columns (batch and time).
Var batch_norm(Var x, Var gamma, Var beta, Parameter& running_mean, Parameter& running_var, bool training,
               double momentum = 0.1, double eps = 1e-5);
// Normalizes each column over its rows.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var dropout(Var x, double p, const Mode& mode);

// Scaled dot-product self-attention per sample, split into `heads` row groups.
Var multi_head_attention(Var q, Var k, Var v, Index heads);
// Row-softmax attention probabilities (queries x keys) for one head of one sample.
Matrix attention_probabilities(const Matrix& q, const Matrix& k);

// scores_t = w . x_t, weights = softmax over each sample's steps,
// output = sum_t weights_t x_t; (d x B*T) -> (d x B).
Var attention_pool(Var x, Var w);
Vector attention_pool_weights(const Matrix& x, const Vector& w);

// LSTM recurrence over precomputed input gates xw (4h x B*T, gate order
// i, f, g, o) with recurrent weights w_hh (4h x h); zero initial state.
// Returns hidden states (h x B*T); `reverse` runs each sample back to front.
Var lstm_recurrence(Var xw, Var w_hh, bool reverse);

// Mean cross-entropy of column logits (K x B) against integer labels.
Var cross_entropy(Var logits, const std::vector<int>& labels);

}  // namespace eegssm::ad
