#pragma once

#include <vector>

#include "vermouth/var.hpp"

// Differentiable operations on single-sample tensors. Feature maps are
// (C, H, W); token matrices are (N, D).
namespace vermouth::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
// Sum of any number of same-shaped inputs.
template <typename T> Var<T> sum_of(const std::vector<Var<T>>& xs);

// x: (C, ...), v: (C) broadcast over all trailing positions.
template <typename T> Var<T> add_channel(const Var<T>& x, const Var<T>& v);
// x: (N, D), v: (D) broadcast over rows.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& v);

template <typename T> Var<T> silu(const Var<T>& x);

// x: (Cin, H, W), w: (Cout, Cin, k, k), b: (Cout) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);

// x: (C, ...). gamma/beta: (C) or undefined for the bare normalization.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps);

// x: (N, Din), w: (Dout, Din), b: (Dout) or undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> softmax_rows(const Var<T>& a);

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
// (C, H, W) -> (H*W, C) and back.
template <typename T> Var<T> to_tokens(const Var<T>& x);
template <typename T> Var<T> from_tokens(const Var<T>& tokens, std::int64_t h, std::int64_t w);

template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::int64_t start, std::int64_t len);

template <typename T> Var<T> avg_pool2(const Var<T>& x);
template <typename T> Var<T> upsample_nearest2(const Var<T>& x);
// Half-pixel-centre bilinear resize of (C, H, W).
template <typename T> Var<T> resize_bilinear(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);

// Rows of table (V, D) selected by ids -> (N, D).
template <typename T> Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids);
// Mean over one axis of a rank-2 tensor; result keeps rank 2 with that axis of size 1.
template <typename T> Var<T> mean_axis(const Var<T>& a, std::size_t axis);

template <typename T> Var<T> sum_all(const Var<T>& a);
template <typename T> Var<T> mean_all(const Var<T>& a);
template <typename T> Var<T> mse(const Var<T>& pred, const Var<T>& target);

// Rows scaled to unit L2 norm; all-zero rows stay zero (and pass zero gradient).
template <typename T> Var<T> l2_normalize_rows(const Var<T>& a);

// logits: (N, K). Rows whose label equals ignore_index are skipped; the mean is
// over the remaining rows and is 0 when none remain.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels, int ignore_index = -1);

}  // namespace vermouth::ops
