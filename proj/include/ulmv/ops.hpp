#pragma once

#include <vector>

#include "ulmv/tensor.hpp"

namespace ulmv {

// Differentiable operations. Every op is a pure function of its inputs; when
// a TapeScope is active and any input participates in the graph, the op
// records a node whose backward accumulates into the parents.

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
/// x * s with s a learnable 1-element tensor.
Tensor scale_by(const Tensor& x, const Tensor& s);
/// -exp(x); keeps the state matrix A strictly negative.
Tensor neg_exp(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor relu(const Tensor& x);

// reductions
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// y = x . W^T + b over the last axis; x: [..., F_in], w: [F_out, F_in],
/// b: [F_out] or undefined for no bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

/// Cross-correlation, x: [N,C_in,H,W], w: [C_out,C_in,k,k], b: [C_out] or
/// undefined. H' = floor((H + 2p - d(k-1) - 1)/s) + 1, likewise W'.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1,
              int padding = 0, int dilation = 1);

/// Depthwise causal conv along the last axis. x: [B,D,L], w: [D,1,k],
/// b: [D]. Left-padded with k-1 zeros; output[t] depends on inputs <= t.
Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b);

/// Non-overlapping max pooling with window k (stride k); remainder rows and
/// columns beyond the last full window are dropped.
Tensor max_pool2d(const Tensor& x, int k = 2);
/// Mean over all spatial positions -> [N,C,1,1].
Tensor adaptive_avg_pool2d(const Tensor& x);
/// Mean over all spatial positions -> [N,C].
Tensor global_avg_pool(const Tensor& x);

/// Normalises the trailing axis with population (1/F) variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Per-channel batch norm over (N,H,W). Training mode normalises with batch
/// statistics and updates the running buffers in place (momentum mixing,
/// unbiased variance); eval mode normalises with the running buffers.
/// Collect mode behaves like training but also accumulates exact sums into
/// `collect` (2*C+1 doubles: sum_x[C], sum_x2[C], count).
enum class BnMode { Train, Eval, Collect };
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, BnMode mode,
                    double momentum = 0.1, double eps = 1e-5,
                    std::vector<double>* collect = nullptr);

// shape plumbing
std::vector<Tensor> split_channels(const Tensor& x, int parts);
Tensor concat_channels(const std::vector<Tensor>& xs);
std::vector<Tensor> split_lastdim(const Tensor& x, const std::vector<int64_t>& sizes);
Tensor concat_lastdim(const std::vector<Tensor>& xs);
/// Same storage, new shape; grads pass straight through.
Tensor reshape(const Tensor& x, Shape new_shape);
/// [N,C,H,W] -> [N,H*W,C] row-major over H then W.
Tensor nchw_to_nlc(const Tensor& x);
/// [N,H*W,C] -> [N,C,H,W].
Tensor nlc_to_nchw(const Tensor& x, int64_t h, int64_t w);
/// Swap axes 1 and 2 of a rank-3 tensor.
Tensor transpose12(const Tensor& x);
/// Flip a [B,L,D] tensor along L.
Tensor reverse_seq(const Tensor& x);

/// Channel-wise max / mean of [N,C,H,W] -> [N,1,H,W].
Tensor channel_max(const Tensor& x);
Tensor channel_mean(const Tensor& x);

/// y[n,c,h,w] = x[n,c,h,w] * s[n,c]   (channel attention application)
Tensor scale_channels(const Tensor& x, const Tensor& s);
/// y[n,c,h,w] = x[n,c,h,w] * m[n,0,h,w]   (spatial attention application)
Tensor scale_spatial(const Tensor& x, const Tensor& m);

}  // namespace ulmv
