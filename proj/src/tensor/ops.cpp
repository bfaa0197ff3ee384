#include "adalink/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "adalink/errors.hpp"

namespace adalink::tensor {

using detail::Node;

namespace {

void require_rank2(const Tensor &t, const char *op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Splits `shape` around `axis` into (outer, axis extent, inner).
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape &shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Tensor matmul(const Tensor &a, const Tensor &b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    std::vector<double> c(m * n, 0.0);
    const double *pa = a.data().data();
    const double *pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double *row = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            const double *brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
    return Tensor::from_op({m, n}, std::move(c), {a, b}, [m, k, n](Node &self) {
        Node &na = *self.parents[0];
        Node &nb = *self.parents[1];
        const double *g = self.grad.data();
        if (auto *ga = Tensor::grad_of(na)) {
            // dA = dC · Bᵀ, accumulated row by row against an explicit Bᵀ
            std::vector<double> bt(n * k);
            for (std::size_t p = 0; p < k; ++p) {
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = nb.data[p * n + j];
            }
            for (std::size_t i = 0; i < m; ++i) {
                double *garow = ga->data() + i * k;
                const double *grow = g + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = grow[j];
                    const double *btrow = bt.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) garow[p] += gij * btrow[p];
                }
            }
        }
        if (auto *gb = Tensor::grad_of(nb)) {
            // dB = Aᵀ · dC
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = na.data[i * k + p];
                    double *gbrow = gb->data() + p * n;
                    const double *grow = g + i * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node &self) {
        for (int p = 0; p < 2; ++p) {
            if (auto *gp = Tensor::grad_of(*self.parents[p])) {
                for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += self.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
        }
        if (auto *gb = Tensor::grad_of(*self.parents[1])) {
            for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node &self) {
        Node &na = *self.parents[0];
        Node &nb = *self.parents[1];
        // Read both operands before writing: a and b may be the same node.
        if (auto *ga = Tensor::grad_of(na)) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i] * nb.data[i];
        }
        if (auto *gb = Tensor::grad_of(nb)) {
            for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += self.grad[i] * na.data[i];
        }
    });
}

Tensor scale(const Tensor &a, double factor) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    return Tensor::from_op(a.shape(), std::move(out), {a}, [factor](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i] * factor;
        }
    });
}

Tensor add_broadcast_rows(const Tensor &x, const Tensor &y) {
    require_rank2(x, "add_broadcast_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::size_t block = 1;
    if (y.rank() == 1) {
        if (y.dim(0) != cols) {
            throw DimensionError("add_broadcast_rows: bias " + shape_str(y.shape()) + " vs " + shape_str(x.shape()));
        }
    } else if (y.rank() == 2 && y.dim(1) == cols && rows % y.dim(0) == 0) {
        block = y.dim(0);
    } else {
        throw DimensionError("add_broadcast_rows: cannot tile " + shape_str(y.shape()) + " over " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.size());
    const double *px = x.data().data();
    const double *py = y.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double *yr = py + (r % block) * cols;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = px[r * cols + c] + yr[c];
    }
    return Tensor::from_op(x.shape(), std::move(out), {x, y}, [rows, cols, block](Node &self) {
        if (auto *gx = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i];
        }
        if (auto *gy = Tensor::grad_of(*self.parents[1])) {
            for (std::size_t r = 0; r < rows; ++r) {
                double *yr = gy->data() + (r % block) * cols;
                for (std::size_t c = 0; c < cols; ++c) yr[c] += self.grad[r * cols + c];
            }
        }
    });
}

Tensor transpose(const Tensor &a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    return Tensor::from_op({n, m}, std::move(out), {a}, [m, n](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += self.grad[j * m + i];
        }
    });
}

Tensor reshape(const Tensor &a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::from_op(std::move(shape), std::move(out), {a}, [](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
        }
    });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape &first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto &p : parts) {
        const Shape &s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw DimensionError("concat: " + shape_str(first) + " vs " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    const AxisSplit split = split_at(out_shape, axis);
    std::vector<std::size_t> chunk;
    for (const auto &p : parts) chunk.push_back(p.dim(axis) * split.inner);
    const std::size_t row = split.extent * split.inner;

    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < split.outer; ++o) {
        std::size_t offset = o * row;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const double *src = parts[p].data().data() + o * chunk[p];
            std::copy(src, src + chunk[p], out.begin() + offset);
            offset += chunk[p];
        }
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return Tensor::from_op(out_shape, std::move(out), std::move(inputs), [split, chunk, row](Node &self) {
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::size_t offset = o * row;
            for (std::size_t p = 0; p < chunk.size(); ++p) {
                if (auto *gp = Tensor::grad_of(*self.parents[p])) {
                    double *dst = gp->data() + o * chunk[p];
                    for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += self.grad[offset + i];
                }
                offset += chunk[p];
            }
        }
    });
}

Tensor slice(const Tensor &a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape &s = a.shape();
    if (axis >= s.size() || begin >= end || end > s[axis]) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " of " + shape_str(s));
    }
    const AxisSplit split = split_at(s, axis);
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    const std::size_t len = (end - begin) * split.inner;
    std::vector<double> out(split.outer * len);
    for (std::size_t o = 0; o < split.outer; ++o) {
        const double *src = a.data().data() + o * split.extent * split.inner + begin * split.inner;
        std::copy(src, src + len, out.begin() + o * len);
    }
    return Tensor::from_op(std::move(out_shape), std::move(out), {a}, [split, begin, len](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t o = 0; o < split.outer; ++o) {
                double *dst = ga->data() + o * split.extent * split.inner + begin * split.inner;
                for (std::size_t i = 0; i < len; ++i) dst[i] += self.grad[o * len + i];
            }
        }
    });
}

Tensor embedding(const Tensor &table, std::span<const int> ids) {
    require_rank2(table, "embedding");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    if (ids.empty()) throw DimensionError("embedding lookup with no ids");
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(vocab),
                                  id);
        }
    }
    std::vector<double> out(ids.size() * width);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const double *src = table.data().data() + static_cast<std::size_t>(ids[r]) * width;
        std::copy(src, src + width, out.begin() + r * width);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return Tensor::from_op({ids.size(), width}, std::move(out), {table}, [idx, width](Node &self) {
        if (auto *gt = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t r = 0; r < idx.size(); ++r) {
                double *dst = gt->data() + static_cast<std::size_t>(idx[r]) * width;
                for (std::size_t c = 0; c < width; ++c) dst[c] += self.grad[r * width + c];
            }
        }
    });
}

Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps) {
    require_rank2(x, "layer_norm");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols}) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " vs input " + shape_str(x.shape()));
    }
    std::vector<double> xhat(x.size()), rstd(rows), out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double *xr = x.data().data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(cols);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[r * cols + c] = (xr[c] - mean) * rstd[r];
            out[r * cols + c] = xhat[r * cols + c] * gain.data()[c] + bias.data()[c];
        }
    }
    return Tensor::from_op(x.shape(), std::move(out), {x, gain, bias},
                           [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](Node &self) {
                               const Node &ng = *self.parents[1];
                               auto *gx = Tensor::grad_of(*self.parents[0]);
                               auto *gg = Tensor::grad_of(*self.parents[1]);
                               auto *gb = Tensor::grad_of(*self.parents[2]);
                               const double n = static_cast<double>(cols);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const double *dy = self.grad.data() + r * cols;
                                   const double *xh = xhat.data() + r * cols;
                                   if (gg || gb) {
                                       for (std::size_t c = 0; c < cols; ++c) {
                                           if (gg) (*gg)[c] += dy[c] * xh[c];
                                           if (gb) (*gb)[c] += dy[c];
                                       }
                                   }
                                   if (gx) {
                                       double mean_d = 0.0, mean_dx = 0.0;
                                       for (std::size_t c = 0; c < cols; ++c) {
                                           const double d = dy[c] * ng.data[c];
                                           mean_d += d;
                                           mean_dx += d * xh[c];
                                       }
                                       mean_d /= n;
                                       mean_dx /= n;
                                       for (std::size_t c = 0; c < cols; ++c) {
                                           const double d = dy[c] * ng.data[c];
                                           (*gx)[r * cols + c] += rstd[r] * (d - mean_d - xh[c] * mean_dx);
                                       }
                                   }
                               }
                           });
}

Tensor relu(const Tensor &a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    return Tensor::from_op(a.shape(), std::move(out), {a}, [](Node &self) {
        Node &na = *self.parents[0];
        if (auto *ga = Tensor::grad_of(na)) {
            for (std::size_t i = 0; i < ga->size(); ++i) {
                if (na.data[i] > 0.0) (*ga)[i] += self.grad[i];
            }
        }
    });
}

Tensor dropout(const Tensor &a, double rate, Mode mode, Rng *rng) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0,1), got " + std::to_string(rate));
    if (mode == Mode::kEval || rate == 0.0) return a;
    if (rng == nullptr) throw ContractError("dropout in train mode needs a random generator");
    const double keep = 1.0 - rate;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> mask(a.size());
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = unif(*rng) < keep ? 1.0 / keep : 0.0;
        out[i] = a.data()[i] * mask[i];
    }
    return Tensor::from_op(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i] * mask[i];
        }
    });
}

Tensor softmax_rows(const Tensor &a) {
    require_rank2(a, "softmax_rows");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double *ar = a.data().data() + r * cols;
        double *o = out.data() + r * cols;
        const double mx = *std::max_element(ar, ar + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(ar[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
    return Tensor::from_op(a.shape(), out, {a}, [rows, cols, out](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (std::size_t r = 0; r < rows; ++r) {
                const double *p = out.data() + r * cols;
                const double *g = self.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += p[c] * g[c];
                for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += p[c] * (g[c] - dot);
            }
        }
    });
}

Tensor cross_entropy(const Tensor &logits, std::span<const int> targets, int ignore_index) {
    require_rank2(logits, "cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    std::vector<double> probs(logits.size(), 0.0);
    std::vector<int> tgt(targets.begin(), targets.end());
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore_index) continue;
        if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
            throw VocabularyError("target id " + std::to_string(tgt[r]) + " outside vocabulary", tgt[r]);
        }
        const double *lr = logits.data().data() + r * vocab;
        double *p = probs.data() + r * vocab;
        const double mx = *std::max_element(lr, lr + vocab);
        double z = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) z += (p[c] = std::exp(lr[c] - mx));
        for (std::size_t c = 0; c < vocab; ++c) p[c] /= z;
        total += (std::log(z) + mx) - lr[tgt[r]];
        ++counted;
    }
    const double denom = counted ? static_cast<double>(counted) : 1.0;
    return Tensor::from_op({1}, {total / denom}, {logits},
                           [rows, vocab, denom, ignore_index, tgt = std::move(tgt), probs = std::move(probs)](Node &self) {
                               auto *gl = Tensor::grad_of(*self.parents[0]);
                               if (!gl) return;
                               const double g = self.grad[0] / denom;
                               for (std::size_t r = 0; r < rows; ++r) {
                                   if (tgt[r] == ignore_index) continue;
                                   for (std::size_t c = 0; c < vocab; ++c) (*gl)[r * vocab + c] += g * probs[r * vocab + c];
                                   (*gl)[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
                               }
                           });
}

Tensor sum(const Tensor &a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return Tensor::from_op({1}, {total}, {a}, [](Node &self) {
        if (auto *ga = Tensor::grad_of(*self.parents[0])) {
            for (auto &g : *ga) g += self.grad[0];
        }
    });
}

Tensor attention(const Tensor &q, const Tensor &k, const Tensor &v, const AttentionShape &shape,
                 std::span<const std::uint8_t> key_valid, std::vector<double> *probs) {
    require_rank2(q, "attention");
    require_rank2(k, "attention");
    require_rank2(v, "attention");
    const std::size_t B = shape.batch, Lq = shape.query_len, Lk = shape.key_len, H = shape.n_heads;
    const std::size_t d = q.dim(1);
    if (H == 0 || d % H != 0) throw DimensionError("attention: width " + std::to_string(d) + " not divisible by heads");
    if (q.dim(0) != B * Lq || k.dim(0) != B * Lk || v.dim(0) != B * Lk || k.dim(1) != d || v.dim(1) != d) {
        throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                             shape_str(v.shape()) + " inconsistent with batch " + std::to_string(B));
    }
    if (!key_valid.empty() && key_valid.size() != B * Lk) throw DimensionError("attention: key mask length");
    if (shape.causal && Lq != Lk) throw DimensionError("attention: causal mask needs equal query/key lengths");

    const std::size_t dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> P(B * H * Lq * Lk, 0.0);
    std::vector<double> out(B * Lq * d, 0.0);
    const double *pq = q.data().data();
    const double *pk = k.data().data();
    const double *pv = v.data().data();

    auto allowed = [&, causal = shape.causal](std::size_t b, std::size_t i, std::size_t j) {
        if (causal && j > i) return false;
        return key_valid.empty() || key_valid[b * Lk + j] != 0;
    };

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Lq; ++i) {
                double *prow = P.data() + ((b * H + h) * Lq + i) * Lk;
                const double *qi = pq + (b * Lq + i) * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < Lk; ++j) {
                    if (!allowed(b, i, j)) continue;
                    const double *kj = pk + (b * Lk + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    prow[j] = s * inv_sqrt;
                    mx = std::max(mx, prow[j]);
                }
                if (mx == -std::numeric_limits<double>::infinity()) continue;  // no visible key
                double z = 0.0;
                for (std::size_t j = 0; j < Lk; ++j) {
                    if (!allowed(b, i, j)) continue;
                    z += (prow[j] = std::exp(prow[j] - mx));
                }
                double *oi = out.data() + (b * Lq + i) * d + h * dh;
                for (std::size_t j = 0; j < Lk; ++j) {
                    if (!allowed(b, i, j)) continue;
                    prow[j] /= z;
                    const double *vj = pv + (b * Lk + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += prow[j] * vj[c];
                }
            }
        }
    }
    if (probs) *probs = P;

    return Tensor::from_op(
        {B * Lq, d}, std::move(out), {q, k, v}, [B, Lq, Lk, H, d, dh, inv_sqrt, P = std::move(P)](Node &self) {
            const Node &nq = *self.parents[0];
            const Node &nk = *self.parents[1];
            const Node &nv = *self.parents[2];
            auto *gq = Tensor::grad_of(*self.parents[0]);
            auto *gk = Tensor::grad_of(*self.parents[1]);
            auto *gv = Tensor::grad_of(*self.parents[2]);
            std::vector<double> dp(Lk);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t i = 0; i < Lq; ++i) {
                        const double *prow = P.data() + ((b * H + h) * Lq + i) * Lk;
                        const double *go = self.grad.data() + (b * Lq + i) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < Lk; ++j) {
                            dp[j] = 0.0;
                            if (prow[j] == 0.0) continue;
                            const double *vj = nv.data.data() + (b * Lk + j) * d + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) dp[j] += go[c] * vj[c];
                            dot += prow[j] * dp[j];
                            if (gv) {
                                double *gvj = gv->data() + (b * Lk + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gvj[c] += prow[j] * go[c];
                            }
                        }
                        if (!gq && !gk) continue;
                        const double *qi = nq.data.data() + (b * Lq + i) * d + h * dh;
                        for (std::size_t j = 0; j < Lk; ++j) {
                            if (prow[j] == 0.0) continue;
                            const double ds = prow[j] * (dp[j] - dot) * inv_sqrt;
                            const double *kj = nk.data.data() + (b * Lk + j) * d + h * dh;
                            if (gq) {
                                double *gqi = gq->data() + (b * Lq + i) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                            }
                            if (gk) {
                                double *gkj = gk->data() + (b * Lk + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace adalink::tensor
