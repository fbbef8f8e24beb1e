#include "cgt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace cgt {

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

namespace {

void req(bool ok, const std::string& op, const std::string& detail) {
    if (!ok) throw ShapeError(op + ": " + detail);
}

template <class S>
std::string sstr(const Node<S>* n) {
    return shape_str(n->shape);
}

// One IT x JT output tile of C += A * B, partial sums held in registers
// across the whole k loop. a points at the tile's first row (stride k),
// b/c at its first column (strides n).
template <class S, int IT, int JT>
void mm_tile(const S* a, const S* b, S* c, int64_t k, int64_t n) {
    S acc[IT][JT] = {};
    for (int64_t p = 0; p < k; ++p) {
        const S* bp = b + p * n;
        for (int ii = 0; ii < IT; ++ii) {
            S av = a[ii * k + p];
            for (int jj = 0; jj < JT; ++jj) acc[ii][jj] += av * bp[jj];
        }
    }
    for (int ii = 0; ii < IT; ++ii)
        for (int jj = 0; jj < JT; ++jj) c[ii * n + jj] += acc[ii][jj];
}

// Rows [i0,i1) of C += A * B in axpy order; the inner loop runs down
// contiguous columns [j0,n) of B.
template <class S>
void mm_axpy(const S* a, const S* b, S* c, int64_t i0, int64_t i1, int64_t j0, int64_t k,
             int64_t n) {
    for (int64_t i = i0; i < i1; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (int64_t j = j0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[k,n]. Register-tiled over 4-row bands with narrowing
// column tiles; ragged edges fall back to the axpy form.
template <class S>
void mm_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    constexpr int64_t IT = 4;
    const int64_t mt = m - m % IT;
    for (int64_t i = 0; i < mt; i += IT) {
        const S* ai = a + i * k;
        S* ci = c + i * n;
        int64_t j = 0;
        for (; j + 32 <= n; j += 32) mm_tile<S, IT, 32>(ai, b + j, ci + j, k, n);
        if (j + 16 <= n) {
            mm_tile<S, IT, 16>(ai, b + j, ci + j, k, n);
            j += 16;
        }
        if (j + 8 <= n) {
            mm_tile<S, IT, 8>(ai, b + j, ci + j, k, n);
            j += 8;
        }
        if (j < n) mm_axpy(a, b, c, i, i + IT, j, k, n);
    }
    if (mt < m) mm_axpy(a, b, c, mt, m, int64_t(0), k, n);
}

template <class S>
std::vector<S> transposed(const S* a, int64_t m, int64_t n) {
    std::vector<S> t(size_t(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) t[size_t(j * m + i)] = a[i * n + j];
    return t;
}

template <class S>
int64_t rows_before_last(const Node<S>* x) {
    return x->numel() / x->shape.back();
}

}  // namespace

template <class S>
void Graph<S>::reset() {
    tape_.clear();
}

template <class S>
Node<S>* Graph<S>::fresh(std::vector<int> shape, std::vector<N> parents) {
    auto n = std::make_unique<Node<S>>();
    n->shape = std::move(shape);
    n->val.assign(size_t(shape_numel(n->shape)), S(0));
    n->leaf = false;
    n->id = int64_t(tape_.size());
    n->parents = std::move(parents);
    for (auto* p : n->parents)
        if (p && p->requires_grad) n->requires_grad = true;
    tape_.push_back(std::move(n));
    return tape_.back().get();
}

template <class S>
Node<S>* Graph<S>::input(const std::vector<int>& shape) {
    return fresh(shape, {});
}

template <class S>
Node<S>* Graph<S>::constant(const std::vector<int>& shape, const S* data) {
    N n = fresh(shape, {});
    std::memcpy(n->data(), data, sizeof(S) * size_t(n->numel()));
    return n;
}

template <class S>
Node<S>* Graph<S>::constant(const std::vector<int>& shape, const std::vector<S>& data) {
    req(int64_t(data.size()) == shape_numel(shape), "constant",
        "data size " + std::to_string(data.size()) + " vs shape " + shape_str(shape));
    return constant(shape, data.data());
}

// ---------------------------------------------------------------- matmul

template <class S>
Node<S>* Graph<S>::matmul(N a, N b) {
    req(a->shape.size() == 2 && b->shape.size() == 2, "matmul",
        "want 2-d operands, got " + sstr(a) + " x " + sstr(b));
    req(a->shape[1] == b->shape[0], "matmul", "inner dims differ: " + sstr(a) + " x " + sstr(b));
    int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    N out = fresh({int(m), int(n)}, {a, b});
    mm_acc(a->data(), b->data(), out->data(), m, k, n);
    if (out->requires_grad) {
        out->backfn = [m, k, n](Node<S>& o) {
            N a = o.parents[0], b = o.parents[1];
            if (a->requires_grad) {
                auto bt = transposed(b->data(), k, n);
                mm_acc(o.gptr(), bt.data(), a->gptr(), m, n, k);
            }
            if (b->requires_grad) {
                auto at = transposed(a->data(), m, k);
                mm_acc(at.data(), o.gptr(), b->gptr(), k, m, n);
            }
        };
    }
    return out;
}

template <class S>
Node<S>* Graph<S>::linear(N x, N w, N b) {
    req(x->shape.size() == 3 && w->shape.size() == 2, "linear",
        "want x [B,s,k], w [k,n], got " + sstr(x) + ", " + sstr(w));
    req(x->shape[2] == w->shape[0], "linear", "inner dims differ: " + sstr(x) + " x " + sstr(w));
    int64_t m = int64_t(x->shape[0]) * x->shape[1], k = w->shape[0], n = w->shape[1];
    if (b) req(b->shape.size() == 1 && b->shape[0] == int(n), "linear",
               "bias " + sstr(b) + " vs out width " + std::to_string(n));
    std::vector<N> par = b ? std::vector<N>{x, w, b} : std::vector<N>{x, w};
    N out = fresh({x->shape[0], x->shape[1], int(n)}, std::move(par));
    if (b)
        for (int64_t i = 0; i < m; ++i)
            std::memcpy(out->data() + i * n, b->data(), sizeof(S) * size_t(n));
    mm_acc(x->data(), w->data(), out->data(), m, k, n);
    if (out->requires_grad) {
        bool has_b = b != nullptr;
        out->backfn = [m, k, n, has_b](Node<S>& o) {
            N x = o.parents[0], w = o.parents[1];
            if (x->requires_grad) {
                auto wt = transposed(w->data(), k, n);
                mm_acc(o.gptr(), wt.data(), x->gptr(), m, n, k);
            }
            if (w->requires_grad) {
                auto xt = transposed(x->data(), m, k);
                mm_acc(xt.data(), o.gptr(), w->gptr(), k, m, n);
            }
            if (has_b && o.parents[2]->requires_grad) {
                S* gb = o.parents[2]->gptr();
                const S* g = o.gptr();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------- elementwise

template <class S>
Node<S>* Graph<S>::add(N a, N b) {
    req(a->shape == b->shape, "add", sstr(a) + " vs " + sstr(b));
    N out = fresh(a->shape, {a, b});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] + b->val[i];
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            for (N p : o.parents)
                if (p->requires_grad)
                    for (int64_t i = 0; i < o.numel(); ++i) p->grad[i] += o.grad[i];
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::sub(N a, N b) {
    req(a->shape == b->shape, "sub", sstr(a) + " vs " + sstr(b));
    N out = fresh(a->shape, {a, b});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] - b->val[i];
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N a = o.parents[0], b = o.parents[1];
            for (int64_t i = 0; i < o.numel(); ++i) {
                if (a->requires_grad) a->grad[i] += o.grad[i];
                if (b->requires_grad) b->grad[i] -= o.grad[i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::mul(N a, N b) {
    req(a->shape == b->shape, "mul", sstr(a) + " vs " + sstr(b));
    N out = fresh(a->shape, {a, b});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] * b->val[i];
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N a = o.parents[0], b = o.parents[1];
            for (int64_t i = 0; i < o.numel(); ++i) {
                if (a->requires_grad) a->grad[i] += o.grad[i] * b->val[i];
                if (b->requires_grad) b->grad[i] += o.grad[i] * a->val[i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::scale(N a, S c) {
    N out = fresh(a->shape, {a});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[i] = a->val[i] * c;
    if (out->requires_grad)
        out->backfn = [c](Node<S>& o) {
            N a = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i) a->grad[i] += o.grad[i] * c;
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::add_pos(N x, N table, int offset) {
    req(x->shape.size() == 3 && table->shape.size() == 2, "add_pos",
        "want x [B,s,d], table [n,d], got " + sstr(x) + ", " + sstr(table));
    req(x->shape[2] == table->shape[1], "add_pos", sstr(x) + " vs " + sstr(table));
    req(offset >= 0 && offset + x->shape[1] <= table->shape[0], "add_pos",
        "rows [" + std::to_string(offset) + "," + std::to_string(offset + x->shape[1]) +
            ") out of table " + sstr(table));
    int64_t bsz = x->shape[0], s = x->shape[1], d = x->shape[2];
    N out = fresh(x->shape, {x, table});
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t t = 0; t < s; ++t) {
            const S* xr = x->data() + (b * s + t) * d;
            const S* pr = table->data() + (offset + t) * d;
            S* orow = out->data() + (b * s + t) * d;
            for (int64_t i = 0; i < d; ++i) orow[i] = xr[i] + pr[i];
        }
    if (out->requires_grad)
        out->backfn = [bsz, s, d, offset](Node<S>& o) {
            N x = o.parents[0], table = o.parents[1];
            if (x->requires_grad)
                for (int64_t i = 0; i < o.numel(); ++i) x->grad[i] += o.grad[i];
            if (table->requires_grad)
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t t = 0; t < s; ++t) {
                        const S* g = o.gptr() + (b * s + t) * d;
                        S* tg = table->gptr() + (offset + t) * d;
                        for (int64_t i = 0; i < d; ++i) tg[i] += g[i];
                    }
        };
    return out;
}

// ---------------------------------------------------------------- reshape-ish

template <class S>
Node<S>* Graph<S>::reshape(N x, std::vector<int> shape) {
    req(shape_numel(shape) == x->numel(), "reshape",
        "cannot view " + sstr(x) + " as " + shape_str(shape));
    N out = fresh(std::move(shape), {x});
    std::copy(x->val.begin(), x->val.end(), out->val.begin());
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            if (!x->requires_grad) return;
            for (int64_t i = 0; i < o.numel(); ++i) x->grad[i] += o.grad[i];
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::concat_last(N a, N b) {
    req(a->shape.size() == b->shape.size(), "concat_last", sstr(a) + " vs " + sstr(b));
    for (size_t i = 0; i + 1 < a->shape.size(); ++i)
        req(a->shape[i] == b->shape[i], "concat_last", sstr(a) + " vs " + sstr(b));
    int64_t da = a->shape.back(), db = b->shape.back();
    int64_t rows = rows_before_last(a);
    std::vector<int> shp = a->shape;
    shp.back() = int(da + db);
    N out = fresh(shp, {a, b});
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out->data() + r * (da + db), a->data() + r * da, sizeof(S) * size_t(da));
        std::memcpy(out->data() + r * (da + db) + da, b->data() + r * db, sizeof(S) * size_t(db));
    }
    if (out->requires_grad)
        out->backfn = [rows, da, db](Node<S>& o) {
            N a = o.parents[0], b = o.parents[1];
            for (int64_t r = 0; r < rows; ++r) {
                const S* g = o.gptr() + r * (da + db);
                if (a->requires_grad)
                    for (int64_t i = 0; i < da; ++i) a->grad[size_t(r * da + i)] += g[i];
                if (b->requires_grad)
                    for (int64_t i = 0; i < db; ++i) b->grad[size_t(r * db + i)] += g[da + i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::slice_last(N a, int start, int len) {
    int64_t d = a->shape.back();
    req(start >= 0 && len > 0 && start + len <= d, "slice_last",
        "range [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " + sstr(a));
    int64_t rows = rows_before_last(a);
    std::vector<int> shp = a->shape;
    shp.back() = len;
    N out = fresh(shp, {a});
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out->data() + r * len, a->data() + r * d + start, sizeof(S) * size_t(len));
    if (out->requires_grad)
        out->backfn = [rows, d, start, len](Node<S>& o) {
            N a = o.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                const S* g = o.gptr() + r * len;
                S* ag = a->gptr() + r * d + start;
                for (int64_t i = 0; i < len; ++i) ag[i] += g[i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::slice_time(N a, int start, int len) {
    req(a->shape.size() == 3, "slice_time", "want [B,s,d], got " + sstr(a));
    int64_t bsz = a->shape[0], s = a->shape[1], d = a->shape[2];
    req(start >= 0 && len > 0 && start + len <= s, "slice_time",
        "range [" + std::to_string(start) + "," + std::to_string(start + len) + ") of " + sstr(a));
    N out = fresh({int(bsz), len, int(d)}, {a});
    for (int64_t b = 0; b < bsz; ++b)
        std::memcpy(out->data() + b * len * d, a->data() + (b * s + start) * d,
                    sizeof(S) * size_t(len * d));
    if (out->requires_grad)
        out->backfn = [bsz, s, d, start, len](Node<S>& o) {
            N a = o.parents[0];
            for (int64_t b = 0; b < bsz; ++b) {
                const S* g = o.gptr() + b * len * d;
                S* ag = a->gptr() + (b * s + start) * d;
                for (int64_t i = 0; i < len * d; ++i) ag[i] += g[i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::transpose(N a) {
    req(a->shape.size() == 2, "transpose", "want 2-d, got " + sstr(a));
    int64_t m = a->shape[0], n = a->shape[1];
    N out = fresh({int(n), int(m)}, {a});
    auto t = transposed(a->data(), m, n);
    std::copy(t.begin(), t.end(), out->val.begin());
    if (out->requires_grad)
        out->backfn = [m, n](Node<S>& o) {
            N a = o.parents[0];
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) a->grad[size_t(i * n + j)] += o.grad[size_t(j * m + i)];
        };
    return out;
}

// ---------------------------------------------------------------- softmax / norm

template <class S>
Node<S>* Graph<S>::softmax_last(N a, bool causal) {
    int64_t n = a->shape.back();
    int64_t rows = rows_before_last(a);
    if (causal)
        req(a->shape.size() >= 2 && a->shape[a->shape.size() - 2] == int(n), "softmax_last",
            "causal mask wants trailing [s,s], got " + sstr(a));
    N out = fresh(a->shape, {a});
    for (int64_t r = 0; r < rows; ++r) {
        int64_t len = causal ? (r % n) + 1 : n;
        const S* x = a->data() + r * n;
        S* y = out->data() + r * n;
        S mx = x[0];
        for (int64_t j = 1; j < len; ++j) mx = std::max(mx, x[j]);
        S z = S(0);
        for (int64_t j = 0; j < len; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int64_t j = 0; j < len; ++j) y[j] /= z;
        for (int64_t j = len; j < n; ++j) y[j] = S(0);
    }
    if (out->requires_grad)
        out->backfn = [rows, n, causal](Node<S>& o) {
            N a = o.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                int64_t len = causal ? (r % n) + 1 : n;
                const S* p = o.data() + r * n;
                const S* g = o.gptr() + r * n;
                S* ag = a->gptr() + r * n;
                S dot = S(0);
                for (int64_t j = 0; j < len; ++j) dot += p[j] * g[j];
                for (int64_t j = 0; j < len; ++j) ag[j] += p[j] * (g[j] - dot);
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::layer_norm(N x, N gain, N bias) {
    int64_t d = x->shape.back();
    req(gain->shape == std::vector<int>{int(d)} && bias->shape == std::vector<int>{int(d)},
        "layer_norm", "params " + sstr(gain) + "/" + sstr(bias) + " vs x " + sstr(x));
    int64_t rows = rows_before_last(x);
    N out = fresh(x->shape, {x, gain, bias});
    auto stats = std::make_shared<std::vector<S>>(size_t(rows * 2));
    const S eps = S(1e-5);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x->data() + r * d;
        S* yr = out->data() + r * d;
        S mean = S(0);
        for (int64_t i = 0; i < d; ++i) mean += xr[i];
        mean /= S(d);
        S var = S(0);
        for (int64_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= S(d);
        S inv = S(1) / std::sqrt(var + eps);
        (*stats)[size_t(2 * r)] = mean;
        (*stats)[size_t(2 * r + 1)] = inv;
        for (int64_t i = 0; i < d; ++i)
            yr[i] = gain->val[size_t(i)] * (xr[i] - mean) * inv + bias->val[size_t(i)];
    }
    if (out->requires_grad)
        out->backfn = [rows, d, stats](Node<S>& o) {
            N x = o.parents[0], gain = o.parents[1], bias = o.parents[2];
            std::vector<S> xhat(static_cast<size_t>(d));
            std::vector<S> gy(static_cast<size_t>(d));
            for (int64_t r = 0; r < rows; ++r) {
                const S* xr = x->data() + r * d;
                const S* g = o.gptr() + r * d;
                S mean = (*stats)[size_t(2 * r)], inv = (*stats)[size_t(2 * r + 1)];
                S m1 = S(0), m2 = S(0);
                for (int64_t i = 0; i < d; ++i) {
                    xhat[size_t(i)] = (xr[i] - mean) * inv;
                    gy[size_t(i)] = g[i] * gain->val[size_t(i)];
                    m1 += gy[size_t(i)];
                    m2 += gy[size_t(i)] * xhat[size_t(i)];
                }
                m1 /= S(d);
                m2 /= S(d);
                if (x->requires_grad) {
                    S* xg = x->gptr() + r * d;
                    for (int64_t i = 0; i < d; ++i)
                        xg[i] += inv * (gy[size_t(i)] - m1 - xhat[size_t(i)] * m2);
                }
                if (gain->requires_grad)
                    for (int64_t i = 0; i < d; ++i) gain->grad[size_t(i)] += g[i] * xhat[size_t(i)];
                if (bias->requires_grad)
                    for (int64_t i = 0; i < d; ++i) bias->grad[size_t(i)] += g[i];
            }
        };
    return out;
}

// ---------------------------------------------------------------- pointwise

template <class S>
Node<S>* Graph<S>::gelu(N x) {
    N out = fresh(x->shape, {x});
    const S k0 = S(0.7978845608028654), k1 = S(0.044715);
    for (int64_t i = 0; i < out->numel(); ++i) {
        S v = x->val[size_t(i)];
        S t = std::tanh(k0 * (v + k1 * v * v * v));
        out->val[size_t(i)] = S(0.5) * v * (S(1) + t);
    }
    if (out->requires_grad)
        out->backfn = [k0, k1](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i) {
                S v = x->val[size_t(i)];
                S t = std::tanh(k0 * (v + k1 * v * v * v));
                S dt = (S(1) - t * t) * k0 * (S(1) + S(3) * k1 * v * v);
                x->grad[size_t(i)] += o.grad[size_t(i)] * (S(0.5) * (S(1) + t) + S(0.5) * v * dt);
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::tanh_(N x) {
    N out = fresh(x->shape, {x});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[size_t(i)] = std::tanh(x->val[size_t(i)]);
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i) {
                S t = o.val[size_t(i)];
                x->grad[size_t(i)] += o.grad[size_t(i)] * (S(1) - t * t);
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::exp_(N x) {
    N out = fresh(x->shape, {x});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[size_t(i)] = std::exp(x->val[size_t(i)]);
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i)
                x->grad[size_t(i)] += o.grad[size_t(i)] * o.val[size_t(i)];
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::log_(N x) {
    N out = fresh(x->shape, {x});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[size_t(i)] = std::log(x->val[size_t(i)]);
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i)
                x->grad[size_t(i)] += o.grad[size_t(i)] / x->val[size_t(i)];
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::sqrt_(N x) {
    N out = fresh(x->shape, {x});
    for (int64_t i = 0; i < out->numel(); ++i) out->val[size_t(i)] = std::sqrt(x->val[size_t(i)]);
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i)
                x->grad[size_t(i)] += o.grad[size_t(i)] / (S(2) * o.val[size_t(i)]);
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::softplus(N x) {
    N out = fresh(x->shape, {x});
    for (int64_t i = 0; i < out->numel(); ++i) {
        S v = x->val[size_t(i)];
        out->val[size_t(i)] = v > S(20) ? v : std::log1p(std::exp(v));
    }
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i) {
                S v = x->val[size_t(i)];
                S sig = S(1) / (S(1) + std::exp(-v));
                x->grad[size_t(i)] += o.grad[size_t(i)] * sig;
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::square(N x) {
    N out = fresh(x->shape, {x});
    for (int64_t i = 0; i < out->numel(); ++i)
        out->val[size_t(i)] = x->val[size_t(i)] * x->val[size_t(i)];
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t i = 0; i < o.numel(); ++i)
                x->grad[size_t(i)] += o.grad[size_t(i)] * S(2) * x->val[size_t(i)];
        };
    return out;
}

// ---------------------------------------------------------------- reductions

template <class S>
Node<S>* Graph<S>::sum_all(N x) {
    N out = fresh({1}, {x});
    S acc = S(0);
    for (int64_t i = 0; i < x->numel(); ++i) acc += x->val[size_t(i)];
    out->val[0] = acc;
    if (out->requires_grad)
        out->backfn = [](Node<S>& o) {
            N x = o.parents[0];
            S g = o.grad[0];
            for (int64_t i = 0; i < x->numel(); ++i) x->grad[size_t(i)] += g;
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::mean_all(N x) {
    N s = sum_all(x);
    return scale(s, S(1) / S(x->numel()));
}

template <class S>
Node<S>* Graph<S>::sum_last(N x) {
    req(x->shape.size() >= 2, "sum_last", "want rank >= 2, got " + sstr(x));
    int64_t d = x->shape.back();
    int64_t rows = rows_before_last(x);
    std::vector<int> shp(x->shape.begin(), x->shape.end() - 1);
    N out = fresh(shp, {x});
    for (int64_t r = 0; r < rows; ++r) {
        S acc = S(0);
        const S* xr = x->data() + r * d;
        for (int64_t i = 0; i < d; ++i) acc += xr[i];
        out->val[size_t(r)] = acc;
    }
    if (out->requires_grad)
        out->backfn = [rows, d](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                S g = o.grad[size_t(r)];
                S* xg = x->gptr() + r * d;
                for (int64_t i = 0; i < d; ++i) xg[i] += g;
            }
        };
    return out;
}

// ---------------------------------------------------------------- lookups / losses

template <class S>
Node<S>* Graph<S>::embedding(N table, const std::vector<int>& ids, int batch, int seq) {
    req(table->shape.size() == 2, "embedding", "table must be 2-d, got " + sstr(table));
    req(int64_t(ids.size()) == int64_t(batch) * seq, "embedding",
        "ids size " + std::to_string(ids.size()) + " vs batch*seq " + std::to_string(batch * seq));
    int64_t v = table->shape[0], d = table->shape[1];
    for (int id : ids)
        req(id >= 0 && id < v, "embedding", "id " + std::to_string(id) + " out of vocab " + std::to_string(v));
    N out = fresh({batch, seq, int(d)}, {table});
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out->data() + int64_t(i) * d, table->data() + int64_t(ids[i]) * d,
                    sizeof(S) * size_t(d));
    if (out->requires_grad)
        out->backfn = [ids, d](Node<S>& o) {
            N table = o.parents[0];
            for (size_t i = 0; i < ids.size(); ++i) {
                const S* g = o.gptr() + int64_t(i) * d;
                S* tg = table->gptr() + int64_t(ids[i]) * d;
                for (int64_t j = 0; j < d; ++j) tg[j] += g[j];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::gather_time(N x, const std::vector<int>& idx) {
    req(x->shape.size() == 3, "gather_time", "want [B,s,d], got " + sstr(x));
    int64_t bsz = x->shape[0], s = x->shape[1], d = x->shape[2];
    req(int64_t(idx.size()) == bsz, "gather_time",
        "idx size " + std::to_string(idx.size()) + " vs batch " + std::to_string(bsz));
    for (int t : idx)
        req(t >= 0 && t < s, "gather_time", "index " + std::to_string(t) + " out of seq " + std::to_string(s));
    N out = fresh({int(bsz), int(d)}, {x});
    for (int64_t b = 0; b < bsz; ++b)
        std::memcpy(out->data() + b * d, x->data() + (b * s + idx[size_t(b)]) * d,
                    sizeof(S) * size_t(d));
    if (out->requires_grad)
        out->backfn = [idx, s, d](Node<S>& o) {
            N x = o.parents[0];
            for (size_t b = 0; b < idx.size(); ++b) {
                const S* g = o.gptr() + int64_t(b) * d;
                S* xg = x->gptr() + (int64_t(b) * s + idx[b]) * d;
                for (int64_t j = 0; j < d; ++j) xg[j] += g[j];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::cross_entropy_logits(N logits, const std::vector<int>& targets,
                                        const std::vector<S>& mask) {
    req(logits->shape.size() == 3, "cross_entropy_logits", "want [B,s,V], got " + sstr(logits));
    int64_t rows = rows_before_last(logits), v = logits->shape.back();
    req(int64_t(targets.size()) == rows && int64_t(mask.size()) == rows, "cross_entropy_logits",
        "targets/mask size vs " + std::to_string(rows) + " rows");
    S count = S(0);
    for (S m : mask) count += m;
    req(count > S(0), "cross_entropy_logits", "mask selects no positions");
    auto probs = std::make_shared<std::vector<S>>(size_t(rows * v));
    N out = fresh({1}, {logits});
    S loss = S(0);
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = logits->data() + r * v;
        S* p = probs->data() + r * v;
        S mx = x[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        S z = S(0);
        for (int64_t j = 0; j < v; ++j) {
            p[j] = std::exp(x[j] - mx);
            z += p[j];
        }
        for (int64_t j = 0; j < v; ++j) p[j] /= z;
        if (mask[size_t(r)] != S(0)) {
            int t = targets[size_t(r)];
            req(t >= 0 && t < v, "cross_entropy_logits",
                "target " + std::to_string(t) + " out of vocab " + std::to_string(v));
            loss -= mask[size_t(r)] * std::log(std::max(p[t], S(1e-30)));
        }
    }
    out->val[0] = loss / count;
    if (out->requires_grad)
        out->backfn = [rows, v, targets, mask, count, probs](Node<S>& o) {
            N logits = o.parents[0];
            S g = o.grad[0] / count;
            for (int64_t r = 0; r < rows; ++r) {
                if (mask[size_t(r)] == S(0)) continue;
                const S* p = probs->data() + r * v;
                S* lg = logits->gptr() + r * v;
                S w = g * mask[size_t(r)];
                for (int64_t j = 0; j < v; ++j) lg[j] += w * p[j];
                lg[targets[size_t(r)]] -= w;
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::sq_l2_loss(N pred, const std::vector<S>& target, const std::vector<S>& mask) {
    req(pred->shape.size() == 3, "sq_l2_loss", "want [B,s,d], got " + sstr(pred));
    int64_t rows = rows_before_last(pred), d = pred->shape.back();
    req(int64_t(target.size()) == pred->numel(), "sq_l2_loss",
        "target size " + std::to_string(target.size()) + " vs " + std::to_string(pred->numel()));
    req(int64_t(mask.size()) == rows, "sq_l2_loss", "mask size vs rows " + std::to_string(rows));
    S count = S(0);
    for (S m : mask) count += m;
    req(count > S(0), "sq_l2_loss", "mask selects no positions");
    N out = fresh({1}, {pred});
    S loss = S(0);
    for (int64_t r = 0; r < rows; ++r) {
        if (mask[size_t(r)] == S(0)) continue;
        const S* p = pred->data() + r * d;
        const S* t = target.data() + r * d;
        S acc = S(0);
        for (int64_t i = 0; i < d; ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
        loss += mask[size_t(r)] * acc;
    }
    out->val[0] = loss / count;
    if (out->requires_grad)
        out->backfn = [rows, d, target, mask, count](Node<S>& o) {
            N pred = o.parents[0];
            S g = o.grad[0] / count;
            for (int64_t r = 0; r < rows; ++r) {
                if (mask[size_t(r)] == S(0)) continue;
                const S* p = pred->data() + r * d;
                const S* t = target.data() + r * d;
                S* pg = pred->gptr() + r * d;
                S w = g * mask[size_t(r)] * S(2);
                for (int64_t i = 0; i < d; ++i) pg[i] += w * (p[i] - t[i]);
            }
        };
    return out;
}

// ---------------------------------------------------------------- attention

template <class S>
Node<S>* Graph<S>::causal_mha(N q, N k, N v, int heads) {
    req(q->shape.size() == 3 && q->shape == k->shape && q->shape == v->shape, "causal_mha",
        "q/k/v shapes " + sstr(q) + "/" + sstr(k) + "/" + sstr(v));
    int64_t bsz = q->shape[0], s = q->shape[1], dm = q->shape[2];
    req(heads > 0 && dm % heads == 0, "causal_mha",
        "model dim " + std::to_string(dm) + " not divisible by " + std::to_string(heads) + " heads");
    int64_t hd = dm / heads;
    N out = fresh(q->shape, {q, k, v});
    auto probs = std::make_shared<std::vector<S>>(size_t(bsz * heads * s * s));
    const S inv = S(1) / std::sqrt(S(hd));

    std::vector<S> qc(size_t(s * hd)), kc(size_t(s * hd)), vc(size_t(s * hd));
    std::vector<S> kt(size_t(hd * s)), att(size_t(s * hd));
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t t = 0; t < s; ++t) {
                const S* base = q->data() + (b * s + t) * dm + h * hd;
                std::memcpy(qc.data() + t * hd, base, sizeof(S) * size_t(hd));
                base = k->data() + (b * s + t) * dm + h * hd;
                std::memcpy(kc.data() + t * hd, base, sizeof(S) * size_t(hd));
                base = v->data() + (b * s + t) * dm + h * hd;
                std::memcpy(vc.data() + t * hd, base, sizeof(S) * size_t(hd));
            }
            S* p = probs->data() + (b * heads + h) * s * s;
            auto ktv = transposed(kc.data(), s, hd);
            std::fill(p, p + s * s, S(0));
            mm_acc(qc.data(), ktv.data(), p, s, hd, s);
            for (int64_t i = 0; i < s; ++i) {
                S* row = p + i * s;
                S mx = row[0] * inv;
                for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, row[j] * inv);
                S z = S(0);
                for (int64_t j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] * inv - mx);
                    z += row[j];
                }
                for (int64_t j = 0; j <= i; ++j) row[j] /= z;
                for (int64_t j = i + 1; j < s; ++j) row[j] = S(0);
            }
            std::fill(att.begin(), att.end(), S(0));
            mm_acc(p, vc.data(), att.data(), s, s, hd);
            for (int64_t t = 0; t < s; ++t)
                std::memcpy(out->data() + (b * s + t) * dm + h * hd, att.data() + t * hd,
                            sizeof(S) * size_t(hd));
        }
    if (out->requires_grad)
        out->backfn = [bsz, s, dm, heads, hd, inv, probs](Node<S>& o) {
            N q = o.parents[0], k = o.parents[1], v = o.parents[2];
            std::vector<S> go(size_t(s * hd)), qc(size_t(s * hd)), kc(size_t(s * hd)),
                vc(size_t(s * hd));
            std::vector<S> dp(size_t(s * s)), ds(size_t(s * s)), dq(size_t(s * hd)),
                dk(size_t(s * hd)), dv(size_t(s * hd));
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t h = 0; h < heads; ++h) {
                    for (int64_t t = 0; t < s; ++t) {
                        std::memcpy(go.data() + t * hd, o.gptr() + (b * s + t) * dm + h * hd,
                                    sizeof(S) * size_t(hd));
                        std::memcpy(qc.data() + t * hd, q->data() + (b * s + t) * dm + h * hd,
                                    sizeof(S) * size_t(hd));
                        std::memcpy(kc.data() + t * hd, k->data() + (b * s + t) * dm + h * hd,
                                    sizeof(S) * size_t(hd));
                        std::memcpy(vc.data() + t * hd, v->data() + (b * s + t) * dm + h * hd,
                                    sizeof(S) * size_t(hd));
                    }
                    const S* p = probs->data() + (b * heads + h) * s * s;
                    // dV = P^T * gO
                    std::fill(dv.begin(), dv.end(), S(0));
                    auto pt = transposed(p, s, s);
                    mm_acc(pt.data(), go.data(), dv.data(), s, s, hd);
                    // dP = gO * V^T
                    std::fill(dp.begin(), dp.end(), S(0));
                    auto vt = transposed(vc.data(), s, hd);
                    mm_acc(go.data(), vt.data(), dp.data(), s, hd, s);
                    // softmax backward within causal rows, then scale by inv
                    for (int64_t i = 0; i < s; ++i) {
                        const S* pr = p + i * s;
                        const S* dpr = dp.data() + i * s;
                        S* dsr = ds.data() + i * s;
                        S dot = S(0);
                        for (int64_t j = 0; j <= i; ++j) dot += pr[j] * dpr[j];
                        for (int64_t j = 0; j <= i; ++j) dsr[j] = pr[j] * (dpr[j] - dot) * inv;
                        for (int64_t j = i + 1; j < s; ++j) dsr[j] = S(0);
                    }
                    // dQ = dS * K, dK = dS^T * Q
                    std::fill(dq.begin(), dq.end(), S(0));
                    mm_acc(ds.data(), kc.data(), dq.data(), s, s, hd);
                    std::fill(dk.begin(), dk.end(), S(0));
                    auto dst = transposed(ds.data(), s, s);
                    mm_acc(dst.data(), qc.data(), dk.data(), s, s, hd);
                    for (int64_t t = 0; t < s; ++t) {
                        if (q->requires_grad) {
                            S* g = q->gptr() + (b * s + t) * dm + h * hd;
                            for (int64_t i = 0; i < hd; ++i) g[i] += dq[size_t(t * hd + i)];
                        }
                        if (k->requires_grad) {
                            S* g = k->gptr() + (b * s + t) * dm + h * hd;
                            for (int64_t i = 0; i < hd; ++i) g[i] += dk[size_t(t * hd + i)];
                        }
                        if (v->requires_grad) {
                            S* g = v->gptr() + (b * s + t) * dm + h * hd;
                            for (int64_t i = 0; i < hd; ++i) g[i] += dv[size_t(t * hd + i)];
                        }
                    }
                }
        };
    return out;
}

// ---------------------------------------------------------------- modulator algebra

template <class S>
Node<S>* Graph<S>::append_ones(N x) {
    req(x->shape.size() >= 2, "append_ones", "want rank >= 2, got " + sstr(x));
    int64_t d = x->shape.back();
    int64_t rows = rows_before_last(x);
    std::vector<int> shp = x->shape;
    shp.back() = int(d + 1);
    N out = fresh(shp, {x});
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out->data() + r * (d + 1), x->data() + r * d, sizeof(S) * size_t(d));
        out->val[size_t(r * (d + 1) + d)] = S(1);
    }
    if (out->requires_grad)
        out->backfn = [rows, d](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                const S* g = o.gptr() + r * (d + 1);
                S* xg = x->gptr() + r * d;
                for (int64_t i = 0; i < d; ++i) xg[i] += g[i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::mix_templates(N sig, N bank) {
    req(sig->shape.size() == 3 && bank->shape.size() == 3, "mix_templates",
        "want sig [B,t,M], bank [M,p,r], got " + sstr(sig) + ", " + sstr(bank));
    req(sig->shape[2] == bank->shape[0], "mix_templates",
        "template counts differ: " + sstr(sig) + " vs " + sstr(bank));
    int64_t rows = int64_t(sig->shape[0]) * sig->shape[1];
    int64_t m = bank->shape[0], pr = int64_t(bank->shape[1]) * bank->shape[2];
    N out = fresh({sig->shape[0], sig->shape[1], bank->shape[1], bank->shape[2]}, {sig, bank});
    mm_acc(sig->data(), bank->data(), out->data(), rows, m, pr);
    if (out->requires_grad)
        out->backfn = [rows, m, pr](Node<S>& o) {
            N sig = o.parents[0], bank = o.parents[1];
            if (sig->requires_grad) {
                auto bt = transposed(bank->data(), m, pr);
                mm_acc(o.gptr(), bt.data(), sig->gptr(), rows, pr, m);
            }
            if (bank->requires_grad) {
                auto st = transposed(sig->data(), rows, m);
                mm_acc(st.data(), o.gptr(), bank->gptr(), m, rows, pr);
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::pos_matvec(N m, N v) {
    req(m->shape.size() == 4 && v->shape.size() == 3, "pos_matvec",
        "want m [B,t,p,r], v [B,s,r], got " + sstr(m) + ", " + sstr(v));
    int64_t bsz = m->shape[0], tm = m->shape[1], p = m->shape[2], r = m->shape[3];
    int64_t s = v->shape[1];
    req(v->shape[0] == int(bsz) && v->shape[2] == int(r), "pos_matvec",
        sstr(m) + " vs " + sstr(v));
    req(tm == s || tm == 1, "pos_matvec",
        "time dims " + std::to_string(tm) + " vs " + std::to_string(s));
    N out = fresh({int(bsz), int(s), int(p)}, {m, v});
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t t = 0; t < s; ++t) {
            const S* mm = m->data() + ((b * tm + (tm == 1 ? 0 : t)) * p) * r;
            const S* vv = v->data() + (b * s + t) * r;
            S* oo = out->data() + (b * s + t) * p;
            for (int64_t i = 0; i < p; ++i) {
                S acc = S(0);
                const S* mrow = mm + i * r;
                for (int64_t j = 0; j < r; ++j) acc += mrow[j] * vv[j];
                oo[i] = acc;
            }
        }
    if (out->requires_grad)
        out->backfn = [bsz, tm, p, r, s](Node<S>& o) {
            N m = o.parents[0], v = o.parents[1];
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t t = 0; t < s; ++t) {
                    int64_t mt = tm == 1 ? 0 : t;
                    const S* g = o.gptr() + (b * s + t) * p;
                    const S* mm = m->data() + ((b * tm + mt) * p) * r;
                    const S* vv = v->data() + (b * s + t) * r;
                    if (m->requires_grad) {
                        S* mg = m->gptr() + ((b * tm + mt) * p) * r;
                        for (int64_t i = 0; i < p; ++i)
                            for (int64_t j = 0; j < r; ++j) mg[i * r + j] += g[i] * vv[j];
                    }
                    if (v->requires_grad) {
                        S* vg = v->gptr() + (b * s + t) * r;
                        for (int64_t i = 0; i < p; ++i)
                            for (int64_t j = 0; j < r; ++j) vg[j] += g[i] * mm[i * r + j];
                    }
                }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::pos_matvec_t(N m, N v) {
    req(m->shape.size() == 4 && v->shape.size() == 3, "pos_matvec_t",
        "want m [B,t,p,r], v [B,s,p], got " + sstr(m) + ", " + sstr(v));
    int64_t bsz = m->shape[0], tm = m->shape[1], p = m->shape[2], r = m->shape[3];
    int64_t s = v->shape[1];
    req(v->shape[0] == int(bsz) && v->shape[2] == int(p), "pos_matvec_t",
        sstr(m) + " vs " + sstr(v));
    req(tm == s || tm == 1, "pos_matvec_t",
        "time dims " + std::to_string(tm) + " vs " + std::to_string(s));
    N out = fresh({int(bsz), int(s), int(r)}, {m, v});
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t t = 0; t < s; ++t) {
            const S* mm = m->data() + ((b * tm + (tm == 1 ? 0 : t)) * p) * r;
            const S* vv = v->data() + (b * s + t) * p;
            S* oo = out->data() + (b * s + t) * r;
            for (int64_t i = 0; i < p; ++i) {
                S vi = vv[i];
                const S* mrow = mm + i * r;
                for (int64_t j = 0; j < r; ++j) oo[j] += vi * mrow[j];
            }
        }
    if (out->requires_grad)
        out->backfn = [bsz, tm, p, r, s](Node<S>& o) {
            N m = o.parents[0], v = o.parents[1];
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t t = 0; t < s; ++t) {
                    int64_t mt = tm == 1 ? 0 : t;
                    const S* g = o.gptr() + (b * s + t) * r;
                    const S* mm = m->data() + ((b * tm + mt) * p) * r;
                    const S* vv = v->data() + (b * s + t) * p;
                    if (m->requires_grad) {
                        S* mg = m->gptr() + ((b * tm + mt) * p) * r;
                        for (int64_t i = 0; i < p; ++i)
                            for (int64_t j = 0; j < r; ++j) mg[i * r + j] += vv[i] * g[j];
                    }
                    if (v->requires_grad) {
                        S* vg = v->gptr() + (b * s + t) * p;
                        for (int64_t i = 0; i < p; ++i) {
                            S acc = S(0);
                            const S* mrow = mm + i * r;
                            for (int64_t j = 0; j < r; ++j) acc += mrow[j] * g[j];
                            vg[i] += acc;
                        }
                    }
                }
        };
    return out;
}

// ---------------------------------------------------------------- regularizer helpers

template <class S>
Node<S>* Graph<S>::l2_normalize(N x, S eps) {
    req(x->shape.size() >= 2, "l2_normalize", "want rank >= 2, got " + sstr(x));
    int64_t d = x->shape.back();
    int64_t rows = rows_before_last(x);
    N out = fresh(x->shape, {x});
    auto denoms = std::make_shared<std::vector<S>>(size_t(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x->data() + r * d;
        S nrm = S(0);
        for (int64_t i = 0; i < d; ++i) nrm += xr[i] * xr[i];
        nrm = std::sqrt(nrm);
        S den = nrm + eps;
        (*denoms)[size_t(r)] = den;
        S* yr = out->data() + r * d;
        for (int64_t i = 0; i < d; ++i) yr[i] = xr[i] / den;
    }
    if (out->requires_grad)
        out->backfn = [rows, d, eps, denoms](Node<S>& o) {
            N x = o.parents[0];
            for (int64_t r = 0; r < rows; ++r) {
                const S* xr = x->data() + r * d;
                const S* g = o.gptr() + r * d;
                S* xg = x->gptr() + r * d;
                S den = (*denoms)[size_t(r)];
                S nrm = den - eps;
                S xg_dot = S(0);
                for (int64_t i = 0; i < d; ++i) xg_dot += xr[i] * g[i];
                S coef = nrm > S(1e-30) ? xg_dot / (den * den * nrm) : S(0);
                for (int64_t i = 0; i < d; ++i) xg[i] += g[i] / den - coef * xr[i];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::pair_dots_minus_delta(N n) {
    req(n->shape.size() == 3, "pair_dots_minus_delta", "want [B,s,d], got " + sstr(n));
    int64_t bsz = n->shape[0], s = n->shape[1], d = n->shape[2];
    N out = fresh({int(bsz), int(bsz), int(s)}, {n});
    for (int64_t a = 0; a < bsz; ++a)
        for (int64_t b = 0; b < bsz; ++b)
            for (int64_t t = 0; t < s; ++t) {
                const S* na = n->data() + (a * s + t) * d;
                const S* nb = n->data() + (b * s + t) * d;
                S acc = S(0);
                for (int64_t i = 0; i < d; ++i) acc += na[i] * nb[i];
                out->val[size_t((a * bsz + b) * s + t)] = acc - (a == b ? S(1) : S(0));
            }
    if (out->requires_grad)
        out->backfn = [bsz, s, d](Node<S>& o) {
            N n = o.parents[0];
            for (int64_t a = 0; a < bsz; ++a)
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t t = 0; t < s; ++t) {
                        S g = o.grad[size_t((a * bsz + b) * s + t)];
                        if (g == S(0)) continue;
                        const S* na = n->data() + (a * s + t) * d;
                        const S* nb = n->data() + (b * s + t) * d;
                        S* ga = n->gptr() + (a * s + t) * d;
                        S* gb = n->gptr() + (b * s + t) * d;
                        for (int64_t i = 0; i < d; ++i) {
                            ga[i] += g * nb[i];
                            gb[i] += g * na[i];
                        }
                    }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::gp_quad_form(N mu, const std::vector<S>& k_inv) {
    req(mu->shape.size() == 3, "gp_quad_form", "want [B,s,d], got " + sstr(mu));
    int64_t bsz = mu->shape[0], s = mu->shape[1], d = mu->shape[2];
    req(int64_t(k_inv.size()) == s * s, "gp_quad_form",
        "k_inv size " + std::to_string(k_inv.size()) + " vs s^2 " + std::to_string(s * s));
    N out = fresh({1}, {mu});
    auto km = std::make_shared<std::vector<S>>(size_t(bsz * s * d), S(0));
    for (int64_t b = 0; b < bsz; ++b)
        mm_acc(k_inv.data(), mu->data() + b * s * d, km->data() + b * s * d, s, s, d);
    S acc = S(0);
    for (int64_t i = 0; i < bsz * s * d; ++i) acc += mu->val[size_t(i)] * (*km)[size_t(i)];
    out->val[0] = acc;
    if (out->requires_grad)
        out->backfn = [km](Node<S>& o) {
            N mu = o.parents[0];
            S g = S(2) * o.grad[0];
            for (int64_t i = 0; i < mu->numel(); ++i) mu->grad[size_t(i)] += g * (*km)[size_t(i)];
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::weighted_sum_time(N x, const std::vector<S>& w) {
    req(x->shape.size() == 3, "weighted_sum_time", "want [B,s,d], got " + sstr(x));
    int64_t bsz = x->shape[0], s = x->shape[1], d = x->shape[2];
    req(int64_t(w.size()) == s, "weighted_sum_time",
        "weights size " + std::to_string(w.size()) + " vs seq " + std::to_string(s));
    N out = fresh({1}, {x});
    S acc = S(0);
    for (int64_t b = 0; b < bsz; ++b)
        for (int64_t t = 0; t < s; ++t) {
            const S* xr = x->data() + (b * s + t) * d;
            S row = S(0);
            for (int64_t i = 0; i < d; ++i) row += xr[i];
            acc += w[size_t(t)] * row;
        }
    out->val[0] = acc;
    if (out->requires_grad)
        out->backfn = [bsz, s, d, w](Node<S>& o) {
            N x = o.parents[0];
            S g = o.grad[0];
            for (int64_t b = 0; b < bsz; ++b)
                for (int64_t t = 0; t < s; ++t) {
                    S* xg = x->gptr() + (b * s + t) * d;
                    S gw = g * w[size_t(t)];
                    for (int64_t i = 0; i < d; ++i) xg[i] += gw;
                }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::weighted_sum_last(N x, const std::vector<S>& w) {
    int64_t t = x->shape.back();
    req(int64_t(w.size()) == t, "weighted_sum_last",
        "weights size " + std::to_string(w.size()) + " vs last dim " + std::to_string(t));
    int64_t rows = rows_before_last(x);
    N out = fresh({1}, {x});
    S acc = S(0);
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x->data() + r * t;
        for (int64_t j = 0; j < t; ++j) acc += w[size_t(j)] * xr[j];
    }
    out->val[0] = acc;
    if (out->requires_grad)
        out->backfn = [rows, t, w](Node<S>& o) {
            N x = o.parents[0];
            S g = o.grad[0];
            for (int64_t r = 0; r < rows; ++r) {
                S* xg = x->gptr() + r * t;
                for (int64_t j = 0; j < t; ++j) xg[j] += g * w[size_t(j)];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::mean_batch(N x) {
    req(x->shape.size() == 3, "mean_batch", "want [B,s,d], got " + sstr(x));
    int64_t bsz = x->shape[0], rest = x->numel() / bsz;
    N out = fresh({1, x->shape[1], x->shape[2]}, {x});
    for (int64_t b = 0; b < bsz; ++b) {
        const S* xr = x->data() + b * rest;
        for (int64_t i = 0; i < rest; ++i) out->val[size_t(i)] += xr[i];
    }
    const S inv = S(1) / S(bsz);
    for (auto& v : out->val) v *= inv;
    if (out->requires_grad)
        out->backfn = [bsz, rest, inv](Node<S>& o) {
            N x = o.parents[0];
            if (!x->requires_grad) return;
            for (int64_t b = 0; b < bsz; ++b) {
                S* xg = x->gptr() + b * rest;
                for (int64_t i = 0; i < rest; ++i) xg[i] += inv * o.grad[size_t(i)];
            }
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::sub_bcast_batch(N a, N b) {
    req(a->shape.size() == 3 && b->shape.size() == 3 && b->shape[0] == 1 &&
            a->shape[1] == b->shape[1] && a->shape[2] == b->shape[2],
        "sub_bcast_batch", sstr(a) + " vs " + sstr(b));
    int64_t bsz = a->shape[0], rest = a->numel() / bsz;
    N out = fresh(a->shape, {a, b});
    for (int64_t bb = 0; bb < bsz; ++bb)
        for (int64_t i = 0; i < rest; ++i)
            out->val[size_t(bb * rest + i)] = a->val[size_t(bb * rest + i)] - b->val[size_t(i)];
    if (out->requires_grad)
        out->backfn = [bsz, rest](Node<S>& o) {
            N a = o.parents[0], b = o.parents[1];
            if (a->requires_grad)
                for (int64_t i = 0; i < o.numel(); ++i) a->grad[size_t(i)] += o.grad[size_t(i)];
            if (b->requires_grad)
                for (int64_t bb = 0; bb < bsz; ++bb)
                    for (int64_t i = 0; i < rest; ++i)
                        b->grad[size_t(i)] -= o.grad[size_t(bb * rest + i)];
        };
    return out;
}

template <class S>
Node<S>* Graph<S>::cov_match(N x, const std::vector<int>& tuples, const std::vector<S>& targets) {
    req(x->shape.size() == 3, "cov_match", "want [B,s,d], got " + sstr(x));
    req(tuples.size() == targets.size() * 4,
        "cov_match", "tuples size " + std::to_string(tuples.size()) + " vs targets " +
                         std::to_string(targets.size()));
    const int64_t bsz = x->shape[0], n = x->shape[1], d = x->shape[2];
    const size_t nq = targets.size();
    for (size_t q = 0; q < nq; ++q) {
        int s = tuples[q * 4], t = tuples[q * 4 + 1], i = tuples[q * 4 + 2], j = tuples[q * 4 + 3];
        req(s >= 0 && s < n && t >= 0 && t < n && i >= 0 && i < d && j >= 0 && j < d, "cov_match",
            "tuple " + std::to_string(q) + " out of range for " + sstr(x));
    }
    N out = fresh({1}, {x});
    auto errs = std::make_shared<std::vector<S>>(nq);
    const S inv = S(1) / S(bsz);
    S acc = S(0);
    for (size_t q = 0; q < nq; ++q) {
        const int64_t s = tuples[q * 4], t = tuples[q * 4 + 1];
        const int64_t i = tuples[q * 4 + 2], j = tuples[q * 4 + 3];
        S c = S(0);
        for (int64_t b = 0; b < bsz; ++b)
            c += x->val[size_t((b * n + s) * d + i)] * x->val[size_t((b * n + t) * d + j)];
        S e = c * inv - targets[q];
        (*errs)[q] = e;
        acc += e * e;
    }
    out->val[0] = acc;
    if (out->requires_grad)
        out->backfn = [bsz, n, d, tuples, errs, inv, nq](Node<S>& o) {
            N x = o.parents[0];
            if (!x->requires_grad) return;
            S g = o.grad[0];
            for (size_t q = 0; q < nq; ++q) {
                const int64_t s = tuples[q * 4], t = tuples[q * 4 + 1];
                const int64_t i = tuples[q * 4 + 2], j = tuples[q * 4 + 3];
                S w = S(2) * g * (*errs)[q] * inv;
                for (int64_t b = 0; b < bsz; ++b) {
                    x->grad[size_t((b * n + s) * d + i)] += w * x->val[size_t((b * n + t) * d + j)];
                    x->grad[size_t((b * n + t) * d + j)] += w * x->val[size_t((b * n + s) * d + i)];
                }
            }
        };
    return out;
}

// ---------------------------------------------------------------- backward

template <class S>
void Graph<S>::backward(N loss) {
    if (loss->numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + sstr(loss));
    if (loss->id < 0) throw ShapeError("backward: loss was not recorded on this graph");
    static std::atomic<uint64_t> global_stamp{0};
    uint64_t stamp_ = ++global_stamp;
    std::vector<N> leaves;
    loss->tag = stamp_;
    for (int64_t i = loss->id; i >= 0; --i) {
        Node<S>* n = tape_[size_t(i)].get();
        if (n->tag != stamp_) continue;
        for (N p : n->parents) {
            if (!p->requires_grad && !p->leaf) continue;
            if (p->tag == stamp_) continue;
            p->tag = stamp_;
            if (p->leaf) leaves.push_back(p);
        }
    }
    for (int64_t i = 0; i <= loss->id; ++i) {
        Node<S>* n = tape_[size_t(i)].get();
        if (n->tag == stamp_) n->ensure_grad();
    }
    for (N l : leaves) l->ensure_grad();
    loss->grad[0] = S(1);
    for (int64_t i = loss->id; i >= 0; --i) {
        Node<S>* n = tape_[size_t(i)].get();
        if (n->tag == stamp_ && n->backfn) n->backfn(*n);
    }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace cgt
