#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "adalink/tensor/tensor.hpp"

namespace adalink::tensor {

using Rng = std::mt19937_64;

enum class Mode { kTrain, kEval };

// c = a·b for a[m×k], b[k×n]. Each output row depends only on the same row
// of `a`, with a fixed summation order, so results are independent of how
// many rows are stacked together.
Tensor matmul(const Tensor &a, const Tensor &b);

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, double factor);

// x[R×C] + y where y is [C] (bias) or [r×C] with R % r == 0 (tiled over
// consecutive row blocks).
Tensor add_broadcast_rows(const Tensor &x, const Tensor &y);

Tensor transpose(const Tensor &a);
Tensor reshape(const Tensor &a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor &a, std::size_t axis, std::size_t begin, std::size_t end);

// Row gather from table[V×d]; backward scatter-adds into the table so
// repeated ids accumulate.
Tensor embedding(const Tensor &table, std::span<const int> ids);

Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps = 1e-6);
Tensor relu(const Tensor &a);

// Inverted dropout. In eval mode, or with rate 0, returns `a` itself.
Tensor dropout(const Tensor &a, double rate, Mode mode, Rng *rng);

Tensor softmax_rows(const Tensor &a);

// Mean token cross-entropy over rows whose target != ignore_index.
Tensor cross_entropy(const Tensor &logits, std::span<const int> targets, int ignore_index);

Tensor sum(const Tensor &a);

struct AttentionShape {
    std::size_t batch = 1;
    std::size_t query_len = 1;
    std::size_t key_len = 1;
    std::size_t n_heads = 1;
    bool causal = false;
};

// Scaled dot-product multi-head attention over a stacked batch:
// q[B·Lq × d], k,v[B·Lk × d]. key_valid (size B·Lk, or empty for all valid)
// masks keys. If `probs` is non-null, the attention probabilities are
// written there as B·H·Lq rows of Lk.
Tensor attention(const Tensor &q, const Tensor &k, const Tensor &v, const AttentionShape &shape,
                 std::span<const std::uint8_t> key_valid = {}, std::vector<double> *probs = nullptr);

}  // namespace adalink::tensor
