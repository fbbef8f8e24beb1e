#include "cgt/model.hpp"

#include <cmath>

namespace cgt {

namespace {

bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

void cfg_req(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError("ModelConfig: " + msg);
}

}  // namespace

void ModelConfig::validate() const {
    cfg_req(n_layers >= 2, "n_layers must be >= 2, got " + std::to_string(n_layers));
    cfg_req(readout_layer >= 1 && readout_layer < n_layers,
            "readout_layer must lie in [1, n_layers-1], got " + std::to_string(readout_layer));
    cfg_req(dim_x >= 1 && dim_y >= 1, "dims must be positive");
    cfg_req(heads_x >= 1 && dim_x % heads_x == 0,
            "dim_x " + std::to_string(dim_x) + " not divisible by heads_x " + std::to_string(heads_x));
    cfg_req(heads_y >= 1 && dim_y_stream() % heads_y == 0,
            "y stream width " + std::to_string(dim_y_stream()) + " not divisible by heads_y " +
                std::to_string(heads_y));
    cfg_req(mlp_mult >= 1 && rank >= 1 && n_templates >= 1, "mlp_mult, rank, n_templates must be >= 1");
    cfg_req(max_seq_len >= 1, "max_seq_len must be >= 1");
    if (input_mode == InputMode::token) {
        cfg_req(vocab_size >= 2, "token mode needs vocab_size >= 2");
    } else {
        cfg_req(d_in >= 1 && d_out >= 1, "continuous mode needs d_in, d_out >= 1");
        cfg_req(d_in <= dim_x, "d_in " + std::to_string(d_in) + " exceeds dim_x " + std::to_string(dim_x));
    }
}

template <class S>
Model<S>::Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int dx = cfg_.dim_x, dy = cfg_.dim_y, dys = cfg_.dim_y_stream();
    const int ix = cfg_.inner_x(), iy = cfg_.inner_y();

    if (cfg_.input_mode == InputMode::token) {
        add({cfg_.vocab_size, dx}, "embed.x");
        add({cfg_.vocab_size, dys}, "embed.y");
    }
    add({cfg_.max_seq_len, dx}, "pos.x");
    add({cfg_.max_seq_len, dys}, "pos.y");

    for (int i = 0; i < cfg_.readout_layer; ++i) {
        const std::string p = "stage1." + std::to_string(i) + ".";
        add({dx}, p + "ln1x.g");
        add({dx}, p + "ln1x.b");
        add({dys}, p + "ln1y.g");
        add({dys}, p + "ln1y.b");
        add({dx, 3 * dx}, p + "attn_x.kqv.w");
        add({3 * dx}, p + "attn_x.kqv.b");
        add({dx, dx}, p + "attn_x.proj.w");
        add({dx}, p + "attn_x.proj.b");
        add({dx + dys, 3 * dys}, p + "attn_y.kqv.w");
        add({3 * dys}, p + "attn_y.kqv.b");
        add({dys, dys}, p + "attn_y.proj.w");
        add({dys}, p + "attn_y.proj.b");
        add({dx}, p + "ln2x.g");
        add({dx}, p + "ln2x.b");
        add({dys}, p + "ln2y.g");
        add({dys}, p + "ln2y.b");
        add({dx, ix}, p + "mlp_x.w1.w");
        add({ix}, p + "mlp_x.w1.b");
        add({ix, dx}, p + "mlp_x.w2.w");
        add({dx}, p + "mlp_x.w2.b");
        add({dx + dys, iy}, p + "mlp_y.w1.w");
        add({iy}, p + "mlp_y.w1.b");
        add({iy, dys}, p + "mlp_y.w2.w");
        add({dys}, p + "mlp_y.w2.b");
    }

    for (int v = cfg_.readout_layer; v < cfg_.n_layers; ++v) {
        const std::string p = "stage2." + std::to_string(v) + ".";
        add({dx}, p + "ln1.g");
        add({dx}, p + "ln1.b");
        add({dx, 3 * dx}, p + "attn.kqv.w");
        add({3 * dx}, p + "attn.kqv.b");
        add({dx, dx}, p + "attn.proj.w");
        add({dx}, p + "attn.proj.b");
        add({dx}, p + "ln2.g");
        add({dx}, p + "ln2.b");
        add({dx, ix}, p + "mlp.w1.w");
        add({ix}, p + "mlp.w1.b");
        add({ix, dx}, p + "mlp.w2.w");
        add({dx}, p + "mlp.w2.b");
    }

    // Mixer S is stored transposed ([dim_y+1, M]) so it feeds linear() directly;
    // L and R templates are [M, rows, rank] stacks consumed by mix_templates.
    for (int k = 1; k <= cfg_.n_slots(); ++k) {
        const std::string p = "bank.k" + std::to_string(k) + ".";
        add({dy + 1, cfg_.n_templates}, p + "S");
        add({cfg_.n_templates, dx, cfg_.rank}, p + "L");
        add({cfg_.n_templates, dx + 1, cfg_.rank}, p + "R");
    }

    add({dx}, "final.ln.g");
    add({dx}, "final.ln.b");
    add({dx, cfg_.head_width()}, "head.w");
    add({cfg_.head_width()}, "head.b");

    // Zero-constructed models should still normalize sanely.
    for (size_t i = 0; i < names_.size(); ++i)
        if (ends_with(names_[i], ".g"))
            for (auto& v : ptrs_[i]->val) v = S(1);
}

template <class S>
Node<S>* Model<S>::add(std::vector<int> shape, const std::string& name) {
    store_.push_back(make_param<S>(std::move(shape), name));
    Node<S>* p = store_.back().get();
    ptrs_.push_back(p);
    names_.push_back(name);
    index_.emplace(name, ptrs_.size() - 1);
    return p;
}

template <class S>
Node<S>* Model<S>::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("Model: no parameter named '" + name + "'");
    return ptrs_[it->second];
}

template <class S>
bool Model<S>::has_param(const std::string& name) const {
    return index_.count(name) != 0;
}

template <class S>
int64_t Model<S>::n_scalars() const {
    int64_t n = 0;
    for (auto* p : ptrs_) n += p->numel();
    return n;
}

template <class S>
void Model<S>::init_weights(Rng& rng) {
    const double base = 0.02;
    const double resid = base / std::sqrt(double(2 * cfg_.n_layers));
    for (size_t i = 0; i < ptrs_.size(); ++i) {
        const std::string& nm = names_[i];
        Node<S>* p = ptrs_[i];
        if (ends_with(nm, ".g")) {
            for (auto& v : p->val) v = S(1);
        } else if (ends_with(nm, ".b")) {
            for (auto& v : p->val) v = S(0);
        } else {
            const bool residual_proj =
                nm.find(".proj.w") != std::string::npos || nm.find(".w2.w") != std::string::npos;
            const double sd = residual_proj ? resid : base;
            for (auto& v : p->val) v = S(rng.normal() * sd);
        }
    }
}

namespace {

template <class S>
void check_override(const Node<S>* ov, int batch, int seq, int dim_y) {
    if (ov->shape.size() != 3 || ov->shape[0] != batch || ov->shape[2] != dim_y ||
        (ov->shape[1] != 1 && ov->shape[1] != seq))
        throw ShapeError("forward: override_y shape " + shape_str(ov->shape) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", dim_y " +
                         std::to_string(dim_y));
}

template <class S>
ForwardResult<S> forward_core(Graph<S>& g, const Model<S>& m, Node<S>* x0, Node<S>* y0, int batch,
                              int seq, const ForwardOpts<S>& opts) {
    const ModelConfig& c = m.config();
    const size_t ops0 = g.num_ops();
    const int dx = c.dim_x, dys = c.dim_y_stream();
    const bool skip_y = opts.override_y != nullptr;
    auto P = [&m](const std::string& s) { return m.param(s); };

    ForwardResult<S> out;
    Node<S>* x = x0;
    Node<S>* y = y0;
    if (opts.record_stage1) out.x_stage1.push_back(x);

    for (int i = 0; i < c.readout_layer; ++i) {
        const std::string p = "stage1." + std::to_string(i) + ".";
        Node<S>* xn1 = g.layer_norm(x, P(p + "ln1x.g"), P(p + "ln1x.b"));
        Node<S>* kqvx = g.linear(xn1, P(p + "attn_x.kqv.w"), P(p + "attn_x.kqv.b"));
        Node<S>* ax = g.causal_mha(g.slice_last(kqvx, 0, dx), g.slice_last(kqvx, dx, dx),
                                   g.slice_last(kqvx, 2 * dx, dx), c.heads_x);
        x = g.add(x, g.linear(ax, P(p + "attn_x.proj.w"), P(p + "attn_x.proj.b")));

        if (!skip_y) {
            Node<S>* yn1 = g.layer_norm(y, P(p + "ln1y.g"), P(p + "ln1y.b"));
            Node<S>* kqvy = g.linear(g.concat_last(xn1, yn1), P(p + "attn_y.kqv.w"),
                                     P(p + "attn_y.kqv.b"));
            Node<S>* ay = g.causal_mha(g.slice_last(kqvy, 0, dys), g.slice_last(kqvy, dys, dys),
                                       g.slice_last(kqvy, 2 * dys, dys), c.heads_y);
            y = g.add(y, g.linear(ay, P(p + "attn_y.proj.w"), P(p + "attn_y.proj.b")));
        }

        Node<S>* xn2 = g.layer_norm(x, P(p + "ln2x.g"), P(p + "ln2x.b"));
        Node<S>* hx = g.gelu(g.linear(xn2, P(p + "mlp_x.w1.w"), P(p + "mlp_x.w1.b")));
        x = g.add(x, g.linear(hx, P(p + "mlp_x.w2.w"), P(p + "mlp_x.w2.b")));

        if (!skip_y) {
            Node<S>* yn2 = g.layer_norm(y, P(p + "ln2y.g"), P(p + "ln2y.b"));
            Node<S>* hy = g.gelu(
                g.linear(g.concat_last(xn2, yn2), P(p + "mlp_y.w1.w"), P(p + "mlp_y.w1.b")));
            y = g.add(y, g.linear(hy, P(p + "mlp_y.w2.w"), P(p + "mlp_y.w2.b")));
        }
        if (opts.record_stage1) out.x_stage1.push_back(x);
    }

    if (skip_y) {
        check_override(opts.override_y, batch, seq, c.dim_y);
        out.y_read = opts.override_y;
    } else if (c.vae_mode) {
        out.mu = g.slice_last(y, 0, c.dim_y);
        out.sigma = g.softplus(g.slice_last(y, c.dim_y, c.dim_y));
        std::vector<S> eps(size_t(batch) * size_t(seq) * size_t(c.dim_y), S(0));
        if (opts.vae_eps) {
            if (opts.vae_eps->size() != eps.size())
                throw ShapeError("forward: vae_eps size " + std::to_string(opts.vae_eps->size()) +
                                 ", want " + std::to_string(eps.size()));
            eps = *opts.vae_eps;
        }
        out.y_read = g.add(out.mu, g.mul(out.sigma, g.constant({batch, seq, c.dim_y}, eps)));
    } else {
        out.y_read = y;
    }

    const int n_slots = c.n_slots();
    std::vector<ModFactors<S>> factors(size_t(n_slots) + 1);
    for (int k = 1; k <= n_slots; ++k) factors[size_t(k)] = modulator_factors(g, m, out.y_read, k);
    auto modulate = [&g, &factors](Node<S>* xn, int k) {
        return apply_modulator(g, xn, factors[size_t(k)]);
    };

    for (int v = c.readout_layer; v < c.n_layers; ++v) {
        const std::string p = "stage2." + std::to_string(v) + ".";
        const int ka = 2 * (v - c.readout_layer) + 1;
        Node<S>* xn1 = g.layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b"));
        Node<S>* kqv = g.linear(modulate(xn1, ka), P(p + "attn.kqv.w"), P(p + "attn.kqv.b"));
        Node<S>* a = g.causal_mha(g.slice_last(kqv, 0, dx), g.slice_last(kqv, dx, dx),
                                  g.slice_last(kqv, 2 * dx, dx), c.heads_x);
        x = g.add(x, g.linear(a, P(p + "attn.proj.w"), P(p + "attn.proj.b")));

        Node<S>* xn2 = g.layer_norm(x, P(p + "ln2.g"), P(p + "ln2.b"));
        Node<S>* h = g.gelu(g.linear(modulate(xn2, ka + 1), P(p + "mlp.w1.w"), P(p + "mlp.w1.b")));
        x = g.add(x, g.linear(h, P(p + "mlp.w2.w"), P(p + "mlp.w2.b")));
    }

    Node<S>* xf = g.layer_norm(x, P("final.ln.g"), P("final.ln.b"));
    out.logits = g.linear(xf, P("head.w"), P("head.b"));
    out.n_ops = g.num_ops() - ops0;
    return out;
}

template <class S>
void check_seq(const ModelConfig& c, int batch, int seq, int pos_offset) {
    if (batch < 1 || seq < 1)
        throw ShapeError("forward: batch and seq must be positive, got " + std::to_string(batch) +
                         ", " + std::to_string(seq));
    if (pos_offset < 0 || pos_offset + seq > c.max_seq_len)
        throw ShapeError("forward: positions [" + std::to_string(pos_offset) + "," +
                         std::to_string(pos_offset + seq) + ") exceed max_seq_len " +
                         std::to_string(c.max_seq_len));
    (void)c;
}

}  // namespace

template <class S>
ForwardResult<S> forward(Graph<S>& g, const Model<S>& m, const TokenBatch& batch,
                         const ForwardOpts<S>& opts) {
    const ModelConfig& c = m.config();
    if (c.input_mode != InputMode::token)
        throw ShapeError("forward: continuous-mode model fed a token batch");
    check_seq<S>(c, batch.batch, batch.seq, opts.pos_offset);
    if (int64_t(batch.ids.size()) != int64_t(batch.batch) * batch.seq)
        throw ShapeError("forward: ids size " + std::to_string(batch.ids.size()) + " vs batch*seq " +
                         std::to_string(int64_t(batch.batch) * batch.seq));
    Node<S>* x0 = g.add_pos(g.embedding(m.param("embed.x"), batch.ids, batch.batch, batch.seq),
                            m.param("pos.x"), opts.pos_offset);
    Node<S>* y0 = nullptr;
    if (!opts.override_y)
        y0 = g.add_pos(g.embedding(m.param("embed.y"), batch.ids, batch.batch, batch.seq),
                       m.param("pos.y"), opts.pos_offset);
    return forward_core(g, m, x0, y0, batch.batch, batch.seq, opts);
}

template <class S>
ForwardResult<S> forward(Graph<S>& g, const Model<S>& m, const VecBatch<S>& batch,
                         const ForwardOpts<S>& opts) {
    const ModelConfig& c = m.config();
    if (c.input_mode != InputMode::continuous)
        throw ShapeError("forward: token-mode model fed a vector batch");
    check_seq<S>(c, batch.batch, batch.seq, opts.pos_offset);
    if (batch.width < 1 || batch.width > c.dim_x)
        throw ShapeError("forward: vector width " + std::to_string(batch.width) + " vs dim_x " +
                         std::to_string(c.dim_x));
    if (int64_t(batch.vals.size()) != int64_t(batch.batch) * batch.seq * batch.width)
        throw ShapeError("forward: vals size " + std::to_string(batch.vals.size()) +
                         " vs batch*seq*width");

    // Zero-pad each input vector into the front of the x slot.
    std::vector<S> padded(size_t(batch.batch) * size_t(batch.seq) * size_t(c.dim_x), S(0));
    for (int64_t row = 0; row < int64_t(batch.batch) * batch.seq; ++row)
        for (int w = 0; w < batch.width; ++w)
            padded[size_t(row * c.dim_x + w)] = batch.vals[size_t(row * batch.width + w)];
    Node<S>* x0 = g.add_pos(g.constant({batch.batch, batch.seq, c.dim_x}, padded), m.param("pos.x"),
                            opts.pos_offset);
    Node<S>* y0 = nullptr;
    if (!opts.override_y)
        y0 = g.add_pos(g.input({batch.batch, batch.seq, c.dim_y_stream()}), m.param("pos.y"),
                       opts.pos_offset);
    return forward_core(g, m, x0, y0, batch.batch, batch.seq, opts);
}

template <class S>
ModFactors<S> modulator_factors(Graph<S>& g, const Model<S>& m, Node<S>* y_read, int slot) {
    const ModelConfig& c = m.config();
    if (slot < 1 || slot > c.n_slots())
        throw ShapeError("modulator_factors: slot " + std::to_string(slot) + " outside [1," +
                         std::to_string(c.n_slots()) + "]");
    const std::string p = "bank.k" + std::to_string(slot) + ".";
    Node<S>* z = g.linear(g.append_ones(y_read), m.param(p + "S"), nullptr);
    ModFactors<S> f;
    f.sig = c.mixing == MixNonlin::tanh_mode ? g.tanh_(z) : g.softmax_last(z);
    f.lmix = g.mix_templates(f.sig, m.param(p + "L"));
    f.rmix = g.mix_templates(f.sig, m.param(p + "R"));
    return f;
}

template <class S>
Node<S>* apply_modulator(Graph<S>& g, Node<S>* xn, const ModFactors<S>& f) {
    Node<S>* coeff = g.pos_matvec_t(f.rmix, g.append_ones(xn));
    return g.add(xn, g.pos_matvec(f.lmix, coeff));
}

template <class S>
Node<S>* make_override(Graph<S>& g, const std::vector<S>& y, int batch, int seq, int dim_y) {
    const size_t one = size_t(dim_y);
    const size_t per_pos = size_t(seq) * size_t(dim_y);
    const size_t full = size_t(batch) * per_pos;
    if (y.size() == one) {
        std::vector<S> tiled(size_t(batch) * one);
        for (int b = 0; b < batch; ++b)
            std::copy(y.begin(), y.end(), tiled.begin() + size_t(b) * one);
        return g.constant({batch, 1, dim_y}, tiled);
    }
    if (y.size() == per_pos) {
        std::vector<S> tiled(full);
        for (int b = 0; b < batch; ++b)
            std::copy(y.begin(), y.end(), tiled.begin() + size_t(b) * per_pos);
        return g.constant({batch, seq, dim_y}, tiled);
    }
    if (y.size() == full) return g.constant({batch, seq, dim_y}, y);
    throw ShapeError("make_override: got " + std::to_string(y.size()) + " values, want dim_y=" +
                     std::to_string(dim_y) + ", seq*dim_y, or batch*seq*dim_y");
}

template class Model<float>;
template class Model<double>;
template ForwardResult<float> forward(Graph<float>&, const Model<float>&, const TokenBatch&,
                                      const ForwardOpts<float>&);
template ForwardResult<double> forward(Graph<double>&, const Model<double>&, const TokenBatch&,
                                       const ForwardOpts<double>&);
template ForwardResult<float> forward(Graph<float>&, const Model<float>&, const VecBatch<float>&,
                                      const ForwardOpts<float>&);
template ForwardResult<double> forward(Graph<double>&, const Model<double>&, const VecBatch<double>&,
                                       const ForwardOpts<double>&);
template Node<float>* make_override(Graph<float>&, const std::vector<float>&, int, int, int);
template Node<double>* make_override(Graph<double>&, const std::vector<double>&, int, int, int);
template ModFactors<float> modulator_factors(Graph<float>&, const Model<float>&, Node<float>*, int);
template ModFactors<double> modulator_factors(Graph<double>&, const Model<double>&, Node<double>*,
                                              int);
template Node<float>* apply_modulator(Graph<float>&, Node<float>*, const ModFactors<float>&);
template Node<double>* apply_modulator(Graph<double>&, Node<double>*, const ModFactors<double>&);

}  // namespace cgt
