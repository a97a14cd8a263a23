#pragma once

// Differentiable operations over mfseg::Value. Every op computes its forward
// value eagerly and, when recording, registers an analytic backward closure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mfseg/autodiff.hpp"

namespace mfseg::ops {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

namespace detail {

inline void require_rank2(const Value& v, const char* op, const char* name) {
    if (v.shape().size() != 2)
        throw DimensionError(std::string(op) + ": operand '" + name + "' must be a matrix, got " +
                             shape_str(v.shape()));
}

inline ConstMatMap as_matrix(std::span<const double> d, std::size_t rows, std::size_t cols) {
    return ConstMatMap(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MatMap as_matrix(std::vector<double>& d, std::size_t rows, std::size_t cols) {
    return MatMap(d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace detail

/// y = x W + b for x [N x Din], W [Din x Dout], b [Dout].
inline Value linear(Tape& t, const Value& x, const Value& W, const Value& b) {
    detail::require_rank2(x, "linear", "x");
    detail::require_rank2(W, "linear", "W");
    const std::size_t n = x.shape()[0], din = x.shape()[1], dout = W.shape()[1];
    if (W.shape()[0] != din)
        throw DimensionError("linear: x " + shape_str(x.shape()) + " and W " + shape_str(W.shape()) +
                             " do not conform");
    if (b.shape() != Shape{dout})
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match W " +
                             shape_str(W.shape()));

    Array out({n, dout});
    if (n > 0) {
        auto y = detail::as_matrix(out.data, n, dout);
        const auto bias = Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), static_cast<Eigen::Index>(dout));
        y.noalias() = detail::as_matrix(x.data(), n, din) * detail::as_matrix(W.data(), din, dout);
        y.rowwise() += bias;
    }
    return t.record(std::move(out), {&x, &W, &b}, [x, W, b, n, din, dout](Tape& tp, std::span<const double> g) {
        if (n == 0) return;
        const auto gy = detail::as_matrix(g, n, dout);
        if (tp.needs_grad(x)) {
            auto gx = detail::as_matrix(tp.grad_ref(x), n, din);
            gx.noalias() += gy * detail::as_matrix(W.data(), din, dout).transpose();
        }
        if (tp.needs_grad(W)) {
            auto gw = detail::as_matrix(tp.grad_ref(W), din, dout);
            gw.noalias() += detail::as_matrix(x.data(), n, din).transpose() * gy;
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad_ref(b);
            Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(dout)) += gy.colwise().sum();
        }
    });
}

/// Elementwise max(0, x). The subgradient at 0 is 0.
inline Value relu(Tape& t, const Value& x) {
    Array out(x.shape());
    const auto xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) out.data[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    return t.record(std::move(out), {&x}, [x](Tape& tp, std::span<const double> g) {
        auto& gx = tp.grad_ref(x);
        const auto xd = x.data();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xd[i] > 0.0) gx[i] += g[i];
    });
}

inline void require_same_shape(const Value& a, const Value& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

inline Value add(Tape& t, const Value& a, const Value& b) {
    require_same_shape(a, b, "add");
    Array out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] + b.data()[i];
    return t.record(std::move(out), {&a, &b}, [a, b](Tape& tp, std::span<const double> g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

inline Value sub(Tape& t, const Value& a, const Value& b) {
    require_same_shape(a, b, "sub");
    Array out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] - b.data()[i];
    return t.record(std::move(out), {&a, &b}, [a, b](Tape& tp, std::span<const double> g) {
        tp.accumulate(a, g);
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad_ref(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline Value mul(Tape& t, const Value& a, const Value& b) {
    require_same_shape(a, b, "mul");
    Array out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] * b.data()[i];
    return t.record(std::move(out), {&a, &b}, [a, b](Tape& tp, std::span<const double> g) {
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad_ref(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad_ref(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
    });
}

inline Value scale(Tape& t, const Value& a, double c) {
    Array out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data()[i] * c;
    return t.record(std::move(out), {&a}, [a, c](Tape& tp, std::span<const double> g) {
        auto& ga = tp.grad_ref(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

inline Value sum(Tape& t, const Value& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return t.record(Array::scalar(s), {&a}, [a](Tape& tp, std::span<const double> g) {
        auto& ga = tp.grad_ref(a);
        for (double& v : ga) v += g[0];
    });
}

inline Value mean(Tape& t, const Value& a) {
    if (a.size() == 0) throw DimensionError("mean of an empty array");
    const double n = static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return t.record(Array::scalar(s / n), {&a}, [a, n](Tape& tp, std::span<const double> g) {
        auto& ga = tp.grad_ref(a);
        for (double& v : ga) v += g[0] / n;
    });
}

/// Copy with a new shape of equal element count.
inline Value reshape(Tape& t, const Value& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Array out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
    return t.record(std::move(out), {&a}, [a](Tape& tp, std::span<const double> g) { tp.accumulate(a, g); });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Value concat_cols(Tape& t, const std::vector<Value>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no operands");
    for (const auto& p : parts) detail::require_rank2(p, "concat_cols", "part");
    const std::size_t n = parts[0].shape()[0];
    std::vector<std::size_t> widths, starts;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape()[0] != n)
            throw DimensionError("concat_cols: row counts " + std::to_string(n) + " and " +
                                 std::to_string(p.shape()[0]) + " differ");
        starts.push_back(total);
        widths.push_back(p.shape()[1]);
        total += p.shape()[1];
    }
    Array out({n, total});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data();
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(src.data() + r * widths[k], widths[k], out.data.data() + r * total + starts[k]);
    }
    return t.record(std::move(out), std::span<const Value>(parts),
                    [parts, widths, starts, n, total](Tape& tp, std::span<const double> g) {
                        for (std::size_t k = 0; k < parts.size(); ++k) {
                            if (!tp.needs_grad(parts[k])) continue;
                            auto& gp = tp.grad_ref(parts[k]);
                            for (std::size_t r = 0; r < n; ++r)
                                for (std::size_t c = 0; c < widths[k]; ++c)
                                    gp[r * widths[k] + c] += g[r * total + starts[k] + c];
                        }
                    });
}

/// Vertical concatenation of matrices with equal column counts.
inline Value concat_rows(Tape& t, const std::vector<Value>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no operands");
    for (const auto& p : parts) detail::require_rank2(p, "concat_rows", "part");
    const std::size_t cols = parts[0].shape()[1];
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.shape()[1] != cols)
            throw DimensionError("concat_rows: column counts " + std::to_string(cols) + " and " +
                                 std::to_string(p.shape()[1]) + " differ");
        rows += p.shape()[0];
    }
    Array out({rows, cols});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.size();
    }
    return t.record(std::move(out), std::span<const Value>(parts), [parts](Tape& tp, std::span<const double> g) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            tp.accumulate(p, g.subspan(off, p.size()));
            off += p.size();
        }
    });
}

/// Row gather; a negative index yields a zero row (padding).
inline Value gather_rows(Tape& t, const Value& x, std::vector<std::int64_t> index) {
    detail::require_rank2(x, "gather_rows", "x");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    Array out({index.size(), cols});
    for (std::size_t r = 0; r < index.size(); ++r) {
        const auto i = index[r];
        if (i < 0) continue;
        if (static_cast<std::size_t>(i) >= rows)
            throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " +
                                 shape_str(x.shape()));
        std::copy_n(x.data().data() + static_cast<std::size_t>(i) * cols, cols, out.data.data() + r * cols);
    }
    return t.record(std::move(out), {&x}, [x, index = std::move(index), cols](Tape& tp, std::span<const double> g) {
        auto& gx = tp.grad_ref(x);
        for (std::size_t r = 0; r < index.size(); ++r) {
            if (index[r] < 0) continue;
            const std::size_t base = static_cast<std::size_t>(index[r]) * cols;
            for (std::size_t c = 0; c < cols; ++c) gx[base + c] += g[r * cols + c];
        }
    });
}

/// Column-wise max over contiguous row segments [offsets[s], offsets[s+1]).
/// Ties route the gradient to the first maximal row.
inline Value segment_max(Tape& t, const Value& x, const std::vector<std::size_t>& offsets) {
    detail::require_rank2(x, "segment_max", "x");
    if (offsets.empty() || offsets.back() != x.shape()[0])
        throw DimensionError("segment_max: offsets do not cover " + shape_str(x.shape()));
    const std::size_t segs = offsets.size() - 1, cols = x.shape()[1];
    Array out({segs, cols});
    std::vector<std::size_t> argmax(segs * cols);
    const auto xd = x.data();
    for (std::size_t s = 0; s < segs; ++s) {
        if (offsets[s] >= offsets[s + 1]) throw DimensionError("segment_max: empty segment");
        for (std::size_t c = 0; c < cols; ++c) {
            std::size_t best = offsets[s];
            double v = xd[best * cols + c];
            for (std::size_t r = offsets[s] + 1; r < offsets[s + 1]; ++r) {
                if (xd[r * cols + c] > v) {
                    v = xd[r * cols + c];
                    best = r;
                }
            }
            out.data[s * cols + c] = v;
            argmax[s * cols + c] = best;
        }
    }
    return t.record(std::move(out), {&x}, [x, argmax = std::move(argmax), cols](Tape& tp, std::span<const double> g) {
        auto& gx = tp.grad_ref(x);
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i] * cols + i % cols] += g[i];
    });
}

namespace detail {

struct CosineParts {
    double dot, na, nb, norm_a, norm_b;
};

inline CosineParts cosine_parts(const double* a, const double* b, std::size_t d, double eps) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double norm_a = std::sqrt(aa), norm_b = std::sqrt(bb);
    return {dot, std::max(norm_a, eps), std::max(norm_b, eps), norm_a, norm_b};
}

// d cos / d a for one row, scaled by upstream g.
inline void cosine_grad(const double* a, const double* b, std::size_t d, const CosineParts& p, bool a_clamped,
                        double g, double* ga) {
    const double denom = p.na * p.nb;
    for (std::size_t i = 0; i < d; ++i) {
        double v = b[i] / denom;
        if (!a_clamped) v -= p.dot * a[i] / (p.na * p.na * p.na * p.nb);
        ga[i] += g * v;
    }
}

}  // namespace detail

/// Row-wise cosine similarity of two N x D matrices; returns [N].
inline Value rowwise_cosine(Tape& t, const Value& a, const Value& b, double eps = 1e-8) {
    detail::require_rank2(a, "rowwise_cosine", "a");
    require_same_shape(a, b, "rowwise_cosine");
    const std::size_t n = a.shape()[0], d = a.shape()[1];
    Array out({n});
    for (std::size_t r = 0; r < n; ++r) {
        const auto p = detail::cosine_parts(a.data().data() + r * d, b.data().data() + r * d, d, eps);
        out.data[r] = p.dot / (p.na * p.nb);
    }
    return t.record(std::move(out), {&a, &b}, [a, b, n, d, eps](Tape& tp, std::span<const double> g) {
        for (std::size_t r = 0; r < n; ++r) {
            const double* ar = a.data().data() + r * d;
            const double* br = b.data().data() + r * d;
            const auto p = detail::cosine_parts(ar, br, d, eps);
            if (tp.needs_grad(a))
                detail::cosine_grad(ar, br, d, p, p.norm_a <= eps, g[r], tp.grad_ref(a).data() + r * d);
            if (tp.needs_grad(b)) {
                const detail::CosineParts q{p.dot, p.nb, p.na, p.norm_b, p.norm_a};
                detail::cosine_grad(br, ar, d, q, p.norm_b <= eps, g[r], tp.grad_ref(b).data() + r * d);
            }
        }
    });
}

/// a.b / (max(|a|, eps) * max(|b|, eps)) for two vectors of length D.
inline Value cosine_similarity(Tape& t, const Value& a, const Value& b, double eps = 1e-8) {
    if (a.shape().size() != 1 || a.shape()[0] == 0)
        throw DimensionError("cosine_similarity: expected a nonempty vector, got " + shape_str(a.shape()));
    require_same_shape(a, b, "cosine_similarity");
    const std::size_t d = a.shape()[0];
    const auto am = reshape(t, a, {1, d});
    const auto bm = reshape(t, b, {1, d});
    return reshape(t, rowwise_cosine(t, am, bm, eps), {});
}

/// Mean over rows of -log softmax(logits)[label].
inline Value softmax_cross_entropy(Tape& t, const Value& logits, const std::vector<std::size_t>& labels) {
    detail::require_rank2(logits, "softmax_cross_entropy", "logits");
    const std::size_t n = logits.shape()[0], c = logits.shape()[1];
    if (labels.size() != n)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    if (n == 0) throw DimensionError("softmax_cross_entropy: no rows");
    std::vector<double> probs(n * c);
    double total = 0.0;
    const auto z = logits.data();
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] >= c)
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                                    " outside [0, " + std::to_string(c) + ")");
        const double* row = z.data() + r * c;
        const double m = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[r * c + j] = std::exp(row[j] - m);
            s += probs[r * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= s;
        total += std::log(s) - (row[labels[r]] - m);
    }
    const double nd = static_cast<double>(n);
    return t.record(Array::scalar(total / nd), {&logits},
                    [logits, labels, probs = std::move(probs), c, nd](Tape& tp, std::span<const double> g) {
                        auto& gz = tp.grad_ref(logits);
                        for (std::size_t r = 0; r < labels.size(); ++r)
                            for (std::size_t j = 0; j < c; ++j) {
                                const double target = j == labels[r] ? 1.0 : 0.0;
                                gz[r * c + j] += g[0] * (probs[r * c + j] - target) / nd;
                            }
                    });
}

}  // namespace mfseg::ops
