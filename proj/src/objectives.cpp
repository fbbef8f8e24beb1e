#include "cgt/objectives.hpp"

#include <algorithm>
#include <cmath>

namespace cgt {

std::vector<double> zeta_weights(ZetaProfile prof, int n_terms, int first_pos, int last_k) {
    if (n_terms < 1)
        throw ShapeError("zeta_weights: n_terms must be positive, got " + std::to_string(n_terms));
    if (first_pos < 1) throw ShapeError("zeta_weights: first_pos is 1-based and must be >= 1");
    std::vector<double> w(static_cast<size_t>(n_terms), 0.0);
    switch (prof) {
        case ZetaProfile::constant:
            std::fill(w.begin(), w.end(), 1.0);
            break;
        case ZetaProfile::linear:
            for (int t = 0; t < n_terms; ++t) w[size_t(t)] = double(first_pos + t);
            break;
        case ZetaProfile::quadratic:
            for (int t = 0; t < n_terms; ++t)
                w[size_t(t)] = double(first_pos + t) * double(first_pos + t);
            break;
        case ZetaProfile::last_k: {
            if (last_k < 1) throw ShapeError("zeta_weights: last_k must be >= 1");
            int k = std::min(last_k, n_terms);
            for (int t = n_terms - k; t < n_terms; ++t) w[size_t(t)] = 1.0;
            break;
        }
    }
    double sum = 0.0;
    for (double v : w) sum += v;
    const double scale = double(n_terms) / sum;
    for (double& v : w) v *= scale;
    return w;
}

namespace {

template <class S>
std::vector<S> to_scalar(const std::vector<double>& v) {
    return std::vector<S>(v.begin(), v.end());
}

template <class S>
Node<S>* zero_scalar(Graph<S>& g) {
    const S z = S(0);
    return g.constant({1}, &z);
}

// Valid 1-based split positions for the auxiliary loss: (2, n) open, or
// (2, n - horizon] with a horizon. Returns {lo, hi}; empty when hi < lo.
std::pair<int, int> split_range(int n, int horizon) {
    int lo = 3;
    int hi = horizon > 0 ? n - horizon : n - 1;
    return {lo, hi};
}

// Validates per-sequence splits and derives the suffix length and the
// positional offset of the suffix run. Mixed splits require a horizon (equal
// suffix lengths) and rebased positions (equal offsets).
struct SplitPlan {
    int len = 0;
    int pos_offset = 0;
};

SplitPlan plan_splits(const std::vector<int>& splits, int n, int bsz, const LossConfig& cfg) {
    if (int(splits.size()) != bsz)
        throw ShapeError("auxiliary_loss: split count " + std::to_string(splits.size()) +
                         " vs batch " + std::to_string(bsz));
    for (int s : splits) {
        if (s < 2 || s > n - 1)
            throw ShapeError("auxiliary_loss: split " + std::to_string(s) + " outside [2," +
                             std::to_string(n - 1) + "]");
        if (cfg.horizon > 0 && s + cfg.horizon > n)
            throw ShapeError("auxiliary_loss: split " + std::to_string(s) + " + horizon " +
                             std::to_string(cfg.horizon) + " overruns length " + std::to_string(n));
    }
    const bool uniform =
        std::all_of(splits.begin(), splits.end(), [&](int s) { return s == splits[0]; });
    if (!uniform && cfg.horizon == 0)
        throw ShapeError("auxiliary_loss: per-sequence splits need a horizon");
    if (!uniform && !cfg.rebase_positions)
        throw ShapeError("auxiliary_loss: per-sequence splits need rebased positions");
    SplitPlan p;
    p.len = cfg.horizon > 0 ? cfg.horizon + 1 : n - (splits[0] - 1);
    p.pos_offset = cfg.rebase_positions ? 0 : splits[0] - 1;
    return p;
}

// Context vector for each sequence: y at the position just before its split.
template <class S>
Node<S>* gather_context(Graph<S>& g, const Model<S>& m, const ForwardResult<S>& dyn,
                        const std::vector<int>& splits) {
    std::vector<int> idx(splits.size());
    for (size_t i = 0; i < splits.size(); ++i) idx[i] = splits[i] - 2;
    return g.reshape(g.gather_time(dyn.y_read, idx), {int(splits.size()), 1, m.config().dim_y});
}

template <class S>
Node<S>* aux_splits(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                    const ForwardResult<S>& dyn, const std::vector<int>& splits,
                    const LossConfig& cfg) {
    const SplitPlan p = plan_splits(splits, b.seq, b.batch, cfg);
    TokenBatch suf;
    suf.batch = b.batch;
    suf.seq = p.len;
    suf.ids.resize(size_t(b.batch) * size_t(p.len));
    for (int bb = 0; bb < b.batch; ++bb) {
        const int s0 = splits[size_t(bb)] - 1;
        for (int t = 0; t < p.len; ++t)
            suf.ids[size_t(bb * p.len + t)] = b.ids[size_t(bb * b.seq + s0 + t)];
    }
    ForwardOpts<S> opts;
    opts.override_y = gather_context(g, m, dyn, splits);
    opts.pos_offset = p.pos_offset;
    auto r = forward(g, m, suf, opts);
    return cross_entropy_loss(g, r.logits, suf);
}

template <class S>
Node<S>* aux_splits(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                    const ForwardResult<S>& dyn, const std::vector<int>& splits,
                    const LossConfig& cfg) {
    const SplitPlan p = plan_splits(splits, b.in.seq, b.in.batch, cfg);
    const int d_out = m.config().d_out;
    VecBatch<S> suf;
    suf.batch = b.in.batch;
    suf.seq = p.len;
    suf.width = b.in.width;
    suf.vals.resize(size_t(suf.batch) * size_t(p.len) * size_t(suf.width));
    std::vector<S> target(size_t(suf.batch) * size_t(p.len) * size_t(d_out));
    std::vector<S> mask(size_t(suf.batch) * size_t(p.len));
    S mask_sum = S(0);
    for (int bb = 0; bb < suf.batch; ++bb) {
        const int s0 = splits[size_t(bb)] - 1;
        for (int t = 0; t < p.len; ++t) {
            const int64_t src = int64_t(bb) * b.in.seq + s0 + t;
            const int64_t dst = int64_t(bb) * p.len + t;
            std::copy_n(b.in.vals.begin() + src * suf.width, suf.width,
                        suf.vals.begin() + dst * suf.width);
            std::copy_n(b.target.begin() + src * d_out, d_out, target.begin() + dst * d_out);
            mask[size_t(dst)] = b.mask[size_t(src)];
            mask_sum += b.mask[size_t(src)];
        }
    }
    if (mask_sum == S(0)) return nullptr;  // suffix scores nothing
    ForwardOpts<S> opts;
    opts.override_y = gather_context(g, m, dyn, splits);
    opts.pos_offset = p.pos_offset;
    auto r = forward(g, m, suf, opts);
    return g.sq_l2_loss(r.logits, target, mask);
}

template <class S, class Batch>
AuxResult<S> sample_aux(Graph<S>& g, const Model<S>& m, const Batch& b, int seq, int bsz,
                        const ForwardResult<S>& dyn, const LossConfig& cfg, Rng& rng) {
    AuxResult<S> out;
    auto [lo, hi] = split_range(seq, cfg.horizon);
    const int n_draws = std::max(1, cfg.aux_samples);
    if (hi < lo) {
        out.skipped = bsz * n_draws;
        return out;
    }
    const bool per_seq = cfg.horizon > 0 && cfg.rebase_positions;
    std::vector<Node<S>*> draws;
    for (int k = 0; k < n_draws; ++k) {
        std::vector<int> splits(static_cast<size_t>(bsz));
        if (per_seq) {
            for (auto& s : splits) s = lo + int(rng.below(uint64_t(hi - lo + 1)));
        } else {
            const int shared = lo + int(rng.below(uint64_t(hi - lo + 1)));
            std::fill(splits.begin(), splits.end(), shared);
        }
        out.splits.insert(out.splits.end(), splits.begin(), splits.end());
        Node<S>* l = aux_splits(g, m, b, dyn, splits, cfg);
        if (l)
            draws.push_back(l);
        else
            out.skipped += bsz;
    }
    if (draws.empty()) return out;
    Node<S>* acc = draws[0];
    for (size_t i = 1; i < draws.size(); ++i) acc = g.add(acc, draws[i]);
    out.loss = draws.size() > 1 ? g.scale(acc, S(1) / S(draws.size())) : acc;
    return out;
}

}  // namespace

template <class S>
Node<S>* cross_entropy_loss(Graph<S>& g, Node<S>* logits, const TokenBatch& b) {
    if (logits->shape.size() != 3 || logits->shape[0] != b.batch || logits->shape[1] != b.seq)
        throw ShapeError("cross_entropy_loss: logits " + shape_str(logits->shape) + " vs batch [" +
                         std::to_string(b.batch) + "," + std::to_string(b.seq) + "]");
    if (b.seq < 2) throw ShapeError("cross_entropy_loss: need seq >= 2 for next-token targets");
    const size_t rows = size_t(b.batch) * size_t(b.seq);
    std::vector<int> targets(rows, 0);
    std::vector<S> mask(rows, S(0));
    for (int bb = 0; bb < b.batch; ++bb)
        for (int t = 0; t + 1 < b.seq; ++t) {
            targets[size_t(bb * b.seq + t)] = b.ids[size_t(bb * b.seq + t + 1)];
            mask[size_t(bb * b.seq + t)] = S(1);
        }
    return g.cross_entropy_logits(logits, targets, mask);
}

template <class S>
Node<S>* reg_continuity(Graph<S>& g, Node<S>* y, ZetaProfile prof, int last_k) {
    if (y->shape.size() != 3)
        throw ShapeError("reg_continuity: want [B,s,d], got " + shape_str(y->shape));
    const int bsz = y->shape[0], n = y->shape[1];
    if (n < 2) throw ShapeError("reg_continuity: need at least two positions");
    const auto zeta = to_scalar<S>(zeta_weights(prof, n - 1, 2, last_k));
    Node<S>* nrm = g.l2_normalize(y);
    Node<S>* diff = g.sub(g.slice_time(nrm, 1, n - 1), g.slice_time(nrm, 0, n - 1));
    Node<S>* per_pos = g.sum_last(g.square(diff));  // [B, n-1]
    return g.scale(g.weighted_sum_last(per_pos, zeta), S(1) / S(bsz));
}

template <class S>
Node<S>* reg_orthogonality(Graph<S>& g, Node<S>* y, ZetaProfile prof, int last_k,
                           int* warn_singleton) {
    if (y->shape.size() != 3)
        throw ShapeError("reg_orthogonality: want [B,s,d], got " + shape_str(y->shape));
    const int bsz = y->shape[0], n = y->shape[1];
    if (bsz < 2) {
        if (warn_singleton) ++*warn_singleton;
        return zero_scalar(g);
    }
    const auto zeta = to_scalar<S>(zeta_weights(prof, n, 1, last_k));
    Node<S>* nrm = g.l2_normalize(y);
    Node<S>* pd = g.pair_dots_minus_delta(nrm);  // [B, B, n]
    Node<S>* tot = g.weighted_sum_last(g.square(pd), zeta);
    return g.scale(tot, S(1) / (S(bsz) * S(bsz) * S(n)));
}

template <class S>
Node<S>* auxiliary_loss_at(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                           const ForwardResult<S>& dyn, int split, const LossConfig& cfg) {
    return aux_splits(g, m, b, dyn, std::vector<int>(size_t(b.batch), split), cfg);
}

template <class S>
Node<S>* auxiliary_loss_at(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                           const ForwardResult<S>& dyn, int split, const LossConfig& cfg) {
    return aux_splits(g, m, b, dyn, std::vector<int>(size_t(b.in.batch), split), cfg);
}

template <class S>
AuxResult<S> auxiliary_loss(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                            const ForwardResult<S>& dyn, const LossConfig& cfg, Rng& rng) {
    return sample_aux(g, m, b, b.seq, b.batch, dyn, cfg, rng);
}

template <class S>
AuxResult<S> auxiliary_loss(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                            const ForwardResult<S>& dyn, const LossConfig& cfg, Rng& rng) {
    return sample_aux(g, m, b, b.in.seq, b.in.batch, dyn, cfg, rng);
}

template <class S>
Node<S>* vae_kl_term(Graph<S>& g, Node<S>* mu, Node<S>* sigma, const KernelMatrix& kernel,
                     double beta_y) {
    if (mu->shape.size() != 3 || sigma->shape != mu->shape)
        throw ShapeError("vae_kl_term: mu " + shape_str(mu->shape) + " vs sigma " +
                         shape_str(sigma->shape));
    const int bsz = mu->shape[0], n = mu->shape[1];
    if (kernel.n != n)
        throw ShapeError("vae_kl_term: kernel size " + std::to_string(kernel.n) + " vs seq " +
                         std::to_string(n));
    const std::vector<S> kinv(kernel.k_inv.begin(), kernel.k_inv.end());
    std::vector<S> diag(static_cast<size_t>(n));
    for (int s = 0; s < n; ++s) diag[size_t(s)] = S(kernel.k_inv[size_t(s * n + s)]);

    Node<S>* quad = g.gp_quad_form(mu, kinv);
    Node<S>* sig2 = g.square(sigma);
    Node<S>* trace = g.weighted_sum_time(sig2, diag);
    Node<S>* logdet = g.sum_all(g.log_(sig2));
    return g.scale(g.sub(g.add(quad, trace), logdet), S(beta_y / 2.0 / double(bsz)));
}

template <class S>
ForwardResult<S> vae_forward(Graph<S>& g, const Model<S>& m, const TokenBatch& b, Rng& rng,
                             ForwardOpts<S> opts) {
    if (!m.config().vae_mode) throw ShapeError("vae_forward: model was not built with vae_mode");
    std::vector<S> eps(size_t(b.batch) * size_t(b.seq) * size_t(m.config().dim_y));
    for (auto& e : eps) e = S(rng.normal());
    opts.vae_eps = &eps;
    return forward(g, m, b, opts);
}

template <class S>
DistMatch<S> dist_match_reg(Graph<S>& g, Node<S>* y, const KernelMatrix& kernel,
                            const std::vector<int>& tuples) {
    if (y->shape.size() != 3)
        throw ShapeError("dist_match_reg: want [B,s,d], got " + shape_str(y->shape));
    const int n = y->shape[1], d = y->shape[2];
    if (kernel.n != n)
        throw ShapeError("dist_match_reg: kernel size " + std::to_string(kernel.n) + " vs seq " +
                         std::to_string(n));
    if (tuples.size() % 4 != 0) throw ShapeError("dist_match_reg: tuples come in (s,t,i,j) groups");

    // Default tuple set: matched-coordinate pairs across all position pairs,
    // plus cross-coordinate pairs at equal positions.
    std::vector<int> tl = tuples;
    if (tl.empty()) {
        for (int s = 0; s < n; ++s)
            for (int t = 0; t < n; ++t)
                for (int i = 0; i < d; ++i) tl.insert(tl.end(), {s, t, i, i});
        for (int s = 0; s < n; ++s)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j)
                    if (i != j) tl.insert(tl.end(), {s, s, i, j});
    }
    const size_t nq = tl.size() / 4;
    std::vector<S> targets(nq, S(0));
    std::vector<int> same_pos;
    std::vector<S> same_targets;
    for (size_t q = 0; q < nq; ++q) {
        const int s = tl[q * 4], t = tl[q * 4 + 1], i = tl[q * 4 + 2], j = tl[q * 4 + 3];
        targets[q] = i == j ? S(kernel.k[size_t(s * n + t)]) : S(0);
        if (s == t) {
            same_pos.insert(same_pos.end(), {s, t, i, j});
            same_targets.push_back(targets[q]);
        }
    }

    Node<S>* mu_hat = g.mean_batch(y);
    Node<S>* first = g.scale(g.sum_all(g.square(mu_hat)), S(1) / S(n));
    Node<S>* dy = g.sub_bcast_batch(y, mu_hat);

    DistMatch<S> out;
    out.r_p = g.add(first, g.scale(g.cov_match(dy, tl, targets), S(1) / (S(n) * S(n))));
    out.r_d_prime = same_targets.empty()
                        ? zero_scalar(g)
                        : g.scale(g.cov_match(dy, same_pos, same_targets), S(1) / S(n));
    return out;
}

namespace {

template <class S, class FwdFn, class CeFn, class AuxFn>
LossParts<S> joint_core(Graph<S>& g, const Model<S>& m, const LossConfig& cfg, Rng& rng,
                        const VaeObjective* vae, int seq, int bsz, FwdFn fwd, CeFn ce,
                        AuxFn aux_fn) {
    if (cfg.eta < 0.0 || cfg.eta > 1.0)
        throw ShapeError("joint_loss: eta must lie in [0,1], got " + std::to_string(cfg.eta));
    if (vae && !m.config().vae_mode)
        throw ShapeError("joint_loss: VAE objective requires a vae_mode model");

    LossParts<S> out;
    ForwardOpts<S> opts;
    std::vector<S> eps;
    if (m.config().vae_mode) {
        eps.resize(size_t(bsz) * size_t(seq) * size_t(m.config().dim_y));
        for (auto& e : eps) e = S(rng.normal());
        opts.vae_eps = &eps;
    }
    out.fwd = fwd(opts);
    out.lce = ce(out.fwd);
    Node<S>* total = g.scale(out.lce, S(cfg.eta));

    if (cfg.eta < 1.0) {
        AuxResult<S> aux = aux_fn(out.fwd);
        out.aux_skipped = aux.skipped;
        out.aux_splits = aux.splits;
        if (aux.loss) {
            out.laux = aux.loss;
            total = g.add(total, g.scale(aux.loss, S(1.0 - cfg.eta)));
        }
    }
    if (cfg.w_c > 0.0) {
        out.rc = reg_continuity(g, out.fwd.y_read, cfg.zeta, cfg.zeta_last_k);
        total = g.add(total, g.scale(out.rc, S(cfg.w_c)));
    }
    if (cfg.w_d > 0.0) {
        out.rd =
            reg_orthogonality(g, out.fwd.y_read, cfg.zeta, cfg.zeta_last_k, &out.singleton_batch);
        total = g.add(total, g.scale(out.rd, S(cfg.w_d)));
    }
    if (vae) {
        KernelSpec spec = vae->kernel;
        spec.n = seq;
        const KernelMatrix kern = build_kernel(spec);
        out.kl = vae_kl_term(g, out.fwd.mu, out.fwd.sigma, kern, vae->beta_y);
        total = g.add(total, out.kl);
    }
    out.total = total;
    return out;
}

}  // namespace

template <class S>
LossParts<S> joint_loss(Graph<S>& g, const Model<S>& m, const TokenBatch& b, const LossConfig& cfg,
                        Rng& rng, const VaeObjective* vae) {
    return joint_core<S>(
        g, m, cfg, rng, vae, b.seq, b.batch,
        [&](const ForwardOpts<S>& opts) { return forward(g, m, b, opts); },
        [&](const ForwardResult<S>& f) { return cross_entropy_loss(g, f.logits, b); },
        [&](const ForwardResult<S>& f) { return auxiliary_loss(g, m, b, f, cfg, rng); });
}

template <class S>
LossParts<S> joint_loss(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                        const LossConfig& cfg, Rng& rng, const VaeObjective* vae) {
    return joint_core<S>(
        g, m, cfg, rng, vae, b.in.seq, b.in.batch,
        [&](const ForwardOpts<S>& opts) { return forward(g, m, b.in, opts); },
        [&](const ForwardResult<S>& f) { return g.sq_l2_loss(f.logits, b.target, b.mask); },
        [&](const ForwardResult<S>& f) { return auxiliary_loss(g, m, b, f, cfg, rng); });
}

#define CGT_INSTANTIATE(S)                                                                         \
    template Node<S>* cross_entropy_loss<S>(Graph<S>&, Node<S>*, const TokenBatch&);              \
    template Node<S>* reg_continuity<S>(Graph<S>&, Node<S>*, ZetaProfile, int);                   \
    template Node<S>* reg_orthogonality<S>(Graph<S>&, Node<S>*, ZetaProfile, int, int*);          \
    template Node<S>* auxiliary_loss_at<S>(Graph<S>&, const Model<S>&, const TokenBatch&,         \
                                           const ForwardResult<S>&, int, const LossConfig&);      \
    template Node<S>* auxiliary_loss_at<S>(Graph<S>&, const Model<S>&, const ContinuousBatch<S>&, \
                                           const ForwardResult<S>&, int, const LossConfig&);      \
    template AuxResult<S> auxiliary_loss<S>(Graph<S>&, const Model<S>&, const TokenBatch&,        \
                                            const ForwardResult<S>&, const LossConfig&, Rng&);    \
    template AuxResult<S> auxiliary_loss<S>(Graph<S>&, const Model<S>&, const ContinuousBatch<S>&,\
                                            const ForwardResult<S>&, const LossConfig&, Rng&);    \
    template Node<S>* vae_kl_term<S>(Graph<S>&, Node<S>*, Node<S>*, const KernelMatrix&, double); \
    template ForwardResult<S> vae_forward<S>(Graph<S>&, const Model<S>&, const TokenBatch&, Rng&, \
                                             ForwardOpts<S>);                                     \
    template DistMatch<S> dist_match_reg<S>(Graph<S>&, Node<S>*, const KernelMatrix&,             \
                                            const std::vector<int>&);                             \
    template LossParts<S> joint_loss<S>(Graph<S>&, const Model<S>&, const TokenBatch&,            \
                                        const LossConfig&, Rng&, const VaeObjective*);            \
    template LossParts<S> joint_loss<S>(Graph<S>&, const Model<S>&, const ContinuousBatch<S>&,    \
                                        const LossConfig&, Rng&, const VaeObjective*);

CGT_INSTANTIATE(float)
CGT_INSTANTIATE(double)
#undef CGT_INSTANTIATE

}  // namespace cgt
