#include "cgt/specialize.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cgt {

namespace {

template <class S>
std::vector<S> context_at(const ForwardResult<S>& r, int batch, int seq, int dim_y, int position) {
    if (position < 1 || position > seq)
        throw ShapeError("capture_context: position " + std::to_string(position) + " outside [1," +
                         std::to_string(seq) + "]");
    std::vector<S> out(size_t(batch) * size_t(dim_y));
    for (int bb = 0; bb < batch; ++bb)
        std::copy_n(r.y_read->val.begin() + (size_t(bb) * seq + size_t(position - 1)) * dim_y,
                    dim_y, out.begin() + size_t(bb) * dim_y);
    return out;
}

template <class S>
Node<S>* context_override(Graph<S>& g, const std::vector<S>& context, int batch, int dim_y) {
    if (int64_t(context.size()) != dim_y && int64_t(context.size()) != int64_t(batch) * dim_y)
        throw ShapeError("frozen_forward: context has " + std::to_string(context.size()) +
                         " values, want dim_y or batch*dim_y");
    if (int64_t(context.size()) == dim_y) {
        std::vector<S> tiled(size_t(batch) * size_t(dim_y));
        for (int bb = 0; bb < batch; ++bb)
            std::copy(context.begin(), context.end(), tiled.begin() + size_t(bb) * dim_y);
        return g.constant({batch, 1, dim_y}, tiled);
    }
    return g.constant({batch, 1, dim_y}, context);
}

// Mixed modulation factors for one slot at a fixed context, in double.
struct FoldFactors {
    std::vector<double> lw;  // [dim_x, rank]
    std::vector<double> rw;  // [dim_x + 1, rank]
};

template <class S>
FoldFactors mix_slot(const Model<S>& m, const std::vector<double>& ybar, int slot) {
    const ModelConfig& c = m.config();
    const std::string p = "bank.k" + std::to_string(slot) + ".";
    const auto& sv = m.param(p + "S")->val;  // [dim_y + 1, M]
    const auto& lv = m.param(p + "L")->val;  // [M, dim_x, rank]
    const auto& rv = m.param(p + "R")->val;  // [M, dim_x + 1, rank]
    const int mtpl = c.n_templates, dx = c.dim_x, r = c.rank;

    std::vector<double> z(size_t(mtpl), 0.0);
    for (int i = 0; i < c.dim_y + 1; ++i)
        for (int mm = 0; mm < mtpl; ++mm) z[size_t(mm)] += ybar[size_t(i)] * double(sv[size_t(i * mtpl + mm)]);
    std::vector<double> sig(static_cast<size_t>(mtpl));
    if (c.mixing == MixNonlin::tanh_mode) {
        for (int mm = 0; mm < mtpl; ++mm) sig[size_t(mm)] = std::tanh(z[size_t(mm)]);
    } else {
        double mx = *std::max_element(z.begin(), z.end());
        double tot = 0.0;
        for (int mm = 0; mm < mtpl; ++mm) {
            sig[size_t(mm)] = std::exp(z[size_t(mm)] - mx);
            tot += sig[size_t(mm)];
        }
        for (auto& s : sig) s /= tot;
    }

    FoldFactors f;
    f.lw.assign(size_t(dx) * size_t(r), 0.0);
    f.rw.assign(size_t(dx + 1) * size_t(r), 0.0);
    for (int mm = 0; mm < mtpl; ++mm) {
        for (int i = 0; i < dx; ++i)
            for (int q = 0; q < r; ++q)
                f.lw[size_t(i * r + q)] += sig[size_t(mm)] * double(lv[size_t((mm * dx + i) * r + q)]);
        for (int i = 0; i < dx + 1; ++i)
            for (int q = 0; q < r; ++q)
                f.rw[size_t(i * r + q)] +=
                    sig[size_t(mm)] * double(rv[size_t((mm * (dx + 1) + i) * r + q)]);
    }
    return f;
}

// In place: W += R_x (L^T W), b += r_b (L^T W) for one [dim_x, out] linear.
template <class S>
void fold_linear(Node<S>* w, Node<S>* b, const FoldFactors& f, int dx, int r) {
    const int out = w->shape[1];
    std::vector<double> g(size_t(r) * size_t(out), 0.0);  // L^T W
    for (int q = 0; q < r; ++q)
        for (int i = 0; i < dx; ++i) {
            const double lq = f.lw[size_t(i * r + q)];
            for (int o = 0; o < out; ++o) g[size_t(q * out + o)] += lq * double(w->val[size_t(i * out + o)]);
        }
    for (int j = 0; j < dx; ++j)
        for (int q = 0; q < r; ++q) {
            const double rq = f.rw[size_t(j * r + q)];
            for (int o = 0; o < out; ++o)
                w->val[size_t(j * out + o)] += S(rq * g[size_t(q * out + o)]);
        }
    for (int q = 0; q < r; ++q) {
        const double rb = f.rw[size_t(dx * r + q)];
        for (int o = 0; o < out; ++o) b->val[size_t(o)] += S(rb * g[size_t(q * out + o)]);
    }
}

}  // namespace

template <class S>
std::vector<S> capture_context(const Model<S>& m, const TokenBatch& b, int position) {
    Graph<S> g;
    auto r = forward(g, m, b, {});
    return context_at(r, b.batch, b.seq, m.config().dim_y, position);
}

template <class S>
std::vector<S> capture_context(const Model<S>& m, const VecBatch<S>& b, int position) {
    Graph<S> g;
    auto r = forward(g, m, b, {});
    return context_at(r, b.batch, b.seq, m.config().dim_y, position);
}

template <class S>
ForwardResult<S> frozen_forward(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                                const std::vector<S>& context, int pos_offset) {
    ForwardOpts<S> opts;
    opts.override_y = context_override(g, context, b.batch, m.config().dim_y);
    opts.pos_offset = pos_offset;
    return forward(g, m, b, opts);
}

template <class S>
ForwardResult<S> frozen_forward(Graph<S>& g, const Model<S>& m, const VecBatch<S>& b,
                                const std::vector<S>& context, int pos_offset) {
    ForwardOpts<S> opts;
    opts.override_y = context_override(g, context, b.batch, m.config().dim_y);
    opts.pos_offset = pos_offset;
    return forward(g, m, b, opts);
}

template <class S>
Specialized<S> fold(const Model<S>& m, const std::vector<S>& context) {
    const ModelConfig& c = m.config();
    if (int(context.size()) != c.dim_y)
        throw ShapeError("fold: context has " + std::to_string(context.size()) +
                         " values, want dim_y = " + std::to_string(c.dim_y));

    Specialized<S> sp;
    sp.context = context;
    sp.model = std::make_unique<Model<S>>(c);
    for (const auto& name : m.names()) sp.model->param(name)->val = m.param(name)->val;

    std::vector<double> ybar(size_t(c.dim_y) + 1, 1.0);
    for (int i = 0; i < c.dim_y; ++i) ybar[size_t(i)] = double(context[size_t(i)]);

    for (int v = c.readout_layer; v < c.n_layers; ++v) {
        const std::string p = "stage2." + std::to_string(v) + ".";
        const int ka = 2 * (v - c.readout_layer) + 1;
        fold_linear(sp.model->param(p + "attn.kqv.w"), sp.model->param(p + "attn.kqv.b"),
                    mix_slot(m, ybar, ka), c.dim_x, c.rank);
        fold_linear(sp.model->param(p + "mlp.w1.w"), sp.model->param(p + "mlp.w1.b"),
                    mix_slot(m, ybar, ka + 1), c.dim_x, c.rank);
    }
    for (int k = 1; k <= c.n_slots(); ++k) {
        const std::string p = "bank.k" + std::to_string(k) + ".";
        for (const char* t : {"S", "L", "R"})
            std::fill(sp.model->param(p + t)->val.begin(), sp.model->param(p + t)->val.end(), S(0));
    }
    return sp;
}

namespace {

template <class S, class Batch>
ForwardResult<S> ema_run(Graph<S>& g, const Model<S>& m, const Batch& b, int batch, int seq,
                         double gamma) {
    if (!(gamma > 0.0 && gamma <= 1.0))
        throw ShapeError("moving_average_run: gamma must lie in (0, 1], got " +
                         std::to_string(gamma));
    auto dyn = forward(g, m, b, {});
    const int dy = m.config().dim_y;
    std::vector<S> ybar(dyn.y_read->val);
    for (int bb = 0; bb < batch; ++bb)
        for (int s = 1; s < seq; ++s) {
            S* cur = ybar.data() + (size_t(bb) * seq + size_t(s)) * dy;
            const S* prev = cur - dy;
            for (int i = 0; i < dy; ++i)
                cur[i] = S(1.0 - gamma) * prev[i] + S(gamma) * cur[i];
        }
    ForwardOpts<S> opts;
    opts.override_y = g.constant({batch, seq, dy}, ybar);
    return forward(g, m, b, opts);
}

}  // namespace

template <class S>
ForwardResult<S> moving_average_run(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                                    double gamma) {
    return ema_run(g, m, b, b.batch, b.seq, gamma);
}

template <class S>
ForwardResult<S> moving_average_run(Graph<S>& g, const Model<S>& m, const VecBatch<S>& b,
                                    double gamma) {
    return ema_run(g, m, b, b.batch, b.seq, gamma);
}

#define CGT_INSTANTIATE(S)                                                                       \
    template std::vector<S> capture_context<S>(const Model<S>&, const TokenBatch&, int);        \
    template std::vector<S> capture_context<S>(const Model<S>&, const VecBatch<S>&, int);       \
    template ForwardResult<S> frozen_forward<S>(Graph<S>&, const Model<S>&, const TokenBatch&,  \
                                                const std::vector<S>&, int);                    \
    template ForwardResult<S> frozen_forward<S>(Graph<S>&, const Model<S>&, const VecBatch<S>&, \
                                                const std::vector<S>&, int);                    \
    template Specialized<S> fold<S>(const Model<S>&, const std::vector<S>&);                    \
    template ForwardResult<S> moving_average_run<S>(Graph<S>&, const Model<S>&,                 \
                                                    const TokenBatch&, double);                 \
    template ForwardResult<S> moving_average_run<S>(Graph<S>&, const Model<S>&,                 \
                                                    const VecBatch<S>&, double);

CGT_INSTANTIATE(float)
CGT_INSTANTIATE(double)
#undef CGT_INSTANTIATE

}  // namespace cgt
