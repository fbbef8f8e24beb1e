#include "cgt/protocol.hpp"

#include <algorithm>
#include <cmath>

#include "cgt/specialize.hpp"

namespace cgt {

namespace {

// All sequences in one batch must share the token geometry the generator
// guarantees for a fixed spec.
void check_equal_lengths(const std::vector<IclSequence>& seqs, size_t lo, size_t hi) {
    for (size_t i = lo + 1; i < hi; ++i)
        if (seqs[i].tokens.size() != seqs[lo].tokens.size())
            throw ShapeError("icl batch: sequences differ in length");
}

std::vector<AnswerSpan> task_e2_spans(const IclTask& task, int shift) {
    const int n_ex = int(task.examples.size());
    std::vector<AnswerSpan> spans;
    for (int e = std::max(0, n_ex - 2); e < n_ex; ++e)
        spans.push_back({task.examples[size_t(e)].answer_start - shift,
                         task.examples[size_t(e)].answer_len});
    return spans;
}

}  // namespace

TokenBatch pack_icl(const std::vector<IclSequence>& seqs, size_t lo, size_t hi) {
    check_equal_lengths(seqs, lo, hi);
    TokenBatch b;
    b.batch = int(hi - lo);
    b.seq = int(seqs[lo].tokens.size());
    b.ids.reserve(size_t(b.batch) * size_t(b.seq));
    for (size_t i = lo; i < hi; ++i)
        b.ids.insert(b.ids.end(), seqs[i].tokens.begin(), seqs[i].tokens.end());
    return b;
}

template <class S>
ContinuousBatch<S> pack_linreg(const std::vector<LinRegSequence>& seqs, size_t lo, size_t hi) {
    const LinRegSequence& first = seqs[lo];
    ContinuousBatch<S> b;
    b.in.batch = int(hi - lo);
    b.in.seq = 2 * first.n_pairs;
    b.in.width = first.width;
    b.in.vals.reserve(size_t(b.in.batch) * size_t(b.in.seq) * size_t(b.in.width));
    b.target.assign(size_t(b.in.batch) * size_t(b.in.seq) * size_t(first.d_out), S(0));
    b.mask.assign(size_t(b.in.batch) * size_t(b.in.seq), S(0));
    for (size_t i = lo; i < hi; ++i) {
        const LinRegSequence& s = seqs[i];
        if (s.n_pairs != first.n_pairs || s.width != first.width || s.d_out != first.d_out)
            throw ShapeError("linreg batch: sequences differ in geometry");
        for (double v : s.inputs) b.in.vals.push_back(S(v));
        const size_t base = (i - lo) * size_t(b.in.seq);
        for (int k = 0; k < s.n_pairs; ++k) {
            const size_t row = base + size_t(2 * k);
            b.mask[row] = S(1);
            for (int j = 0; j < s.d_out; ++j)
                b.target[row * size_t(s.d_out) + size_t(j)] =
                    S(s.targets[size_t(k * s.d_out + j)]);
        }
    }
    return b;
}

template <class S>
std::vector<std::vector<double>> y_traces(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                          int batch_size) {
    std::vector<std::vector<double>> traces;
    traces.reserve(seqs.size());
    const int dy = m.config().dim_y;
    for (size_t lo = 0; lo < seqs.size(); lo += size_t(batch_size)) {
        const size_t hi = std::min(seqs.size(), lo + size_t(batch_size));
        TokenBatch b = pack_icl(seqs, lo, hi);
        Graph<S> g;
        auto r = forward(g, m, b, {});
        for (size_t i = lo; i < hi; ++i) {
            std::vector<double> tr(size_t(b.seq) * size_t(dy));
            const S* src = r.y_read->val.data() + (i - lo) * tr.size();
            for (size_t j = 0; j < tr.size(); ++j) tr[j] = double(src[j]);
            traces.push_back(std::move(tr));
        }
    }
    return traces;
}

template <class S>
ForwardResult<S> clamped_forward(Graph<S>& g, const Model<S>& m, const TokenBatch& b, int s) {
    if (s < 1 || s > b.seq)
        throw ShapeError("clamped_forward: position " + std::to_string(s) + " outside [1," +
                         std::to_string(b.seq) + "]");
    auto dyn = forward(g, m, b, {});
    const int dy = m.config().dim_y;
    std::vector<S> vals(dyn.y_read->val);
    for (int i = 0; i < b.batch; ++i) {
        const S* pin = vals.data() + (size_t(i) * size_t(b.seq) + size_t(s - 1)) * size_t(dy);
        for (int t = s; t < b.seq; ++t)
            std::copy(pin, pin + dy,
                      vals.data() + (size_t(i) * size_t(b.seq) + size_t(t)) * size_t(dy));
    }
    auto* ov = make_override(g, vals, b.batch, b.seq, dy);
    ForwardOpts<S> opts;
    opts.override_y = ov;
    return forward(g, m, b, opts);
}

template <class S>
AccuracyReport icl_frozen_accuracy(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                   int batch_size) {
    AccuracyReport rep;
    if (seqs.empty()) return rep;
    const int vocab = m.config().vocab_size;
    const size_t n_tasks = seqs[0].tasks.size();
    for (size_t lo = 0; lo < seqs.size(); lo += size_t(batch_size)) {
        const size_t hi = std::min(seqs.size(), lo + size_t(batch_size));
        TokenBatch b = pack_icl(seqs, lo, hi);
        for (size_t j = 0; j < n_tasks; ++j) {
            const int s = seqs[lo].tasks[j].e1_end;
            for (size_t i = lo; i < hi; ++i)
                if (seqs[i].tasks.size() != n_tasks || seqs[i].tasks[j].e1_end != s)
                    throw ShapeError("icl_frozen_accuracy: task geometry differs across batch");
            Graph<S> g;
            auto r = clamped_forward(g, m, b, s);
            for (size_t i = lo; i < hi; ++i)
                rep.merge(score_answers(
                    r.logits->val.data() + (i - lo) * size_t(b.seq) * size_t(vocab), b.seq, vocab,
                    seqs[i].tokens.data(), task_e2_spans(seqs[i].tasks[j], 0)));
        }
    }
    return rep;
}

template <class S>
AccuracyReport icl_specialized_accuracy(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                        int batch_size) {
    AccuracyReport rep;
    if (seqs.empty()) return rep;
    const int vocab = m.config().vocab_size;

    struct Pair {
        const IclSequence* seq;
        const IclTask* task;
    };
    std::vector<Pair> pairs;
    for (const auto& seq : seqs)
        for (const auto& task : seq.tasks) pairs.push_back({&seq, &task});

    const int plen = pairs[0].task->e1_end - pairs[0].task->start;
    const int slen = pairs[0].task->end - pairs[0].task->e1_end;
    for (size_t lo = 0; lo < pairs.size(); lo += size_t(batch_size)) {
        const size_t hi = std::min(pairs.size(), lo + size_t(batch_size));
        TokenBatch prefix, suffix;
        prefix.batch = suffix.batch = int(hi - lo);
        prefix.seq = plen;
        suffix.seq = slen;
        for (size_t i = lo; i < hi; ++i) {
            const auto& [seq, task] = pairs[i];
            if (task->e1_end - task->start != plen || task->end - task->e1_end != slen)
                throw ShapeError("icl_specialized_accuracy: task geometry differs across batch");
            prefix.ids.insert(prefix.ids.end(), seq->tokens.begin() + task->start,
                              seq->tokens.begin() + task->e1_end);
            suffix.ids.insert(suffix.ids.end(), seq->tokens.begin() + task->e1_end,
                              seq->tokens.begin() + task->end);
        }
        const std::vector<S> ctx = capture_context(m, prefix, plen);
        Graph<S> g;
        auto r = frozen_forward(g, m, suffix, ctx, 0);
        for (size_t i = lo; i < hi; ++i) {
            const auto& [seq, task] = pairs[i];
            rep.merge(score_answers(
                r.logits->val.data() + (i - lo) * size_t(slen) * size_t(vocab), slen, vocab,
                seq->tokens.data() + task->e1_end, task_e2_spans(*task, task->e1_end)));
        }
    }
    return rep;
}

template <class S>
std::vector<double> icl_variation(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                  int batch_size) {
    const auto traces = y_traces(m, seqs, batch_size);
    const int dy = m.config().dim_y;
    std::vector<double> values;
    for (size_t i = 0; i < seqs.size(); ++i)
        for (const auto& task : seqs[i].tasks)
            values.push_back(representation_variation(traces[i], dy,
                                                      {task.e1_begin, task.e1_end},
                                                      {task.e2_begin, task.e2_end}));
    return values;
}

template <class S>
ProbeData icl_probe_data(const Model<S>& m, const std::vector<IclSequence>& seqs,
                         int batch_size) {
    const auto traces = y_traces(m, seqs, batch_size);
    const int dy = m.config().dim_y;
    ProbeData out;
    for (size_t i = 0; i < seqs.size(); ++i)
        for (const auto& task : seqs[i].tasks)
            for (int s = task.e2_begin; s < task.e2_end; ++s) {
                out.y.insert(out.y.end(), traces[i].begin() + size_t(s) * size_t(dy),
                             traces[i].begin() + size_t(s + 1) * size_t(dy));
                out.t.push_back(task.a);
                out.t.push_back(task.b);
                ++out.rows;
            }
    return out;
}

template <class S>
LinregReport linreg_specialized_error(const Model<S>& m, const LinearRegSpec& spec,
                                      const std::vector<LinRegSequence>& seqs, int freeze_pairs,
                                      int batch_size) {
    if (freeze_pairs < 1 || freeze_pairs >= spec.n_pairs)
        throw ShapeError("linreg_specialized_error: freeze point " +
                         std::to_string(freeze_pairs) + " outside [1," +
                         std::to_string(spec.n_pairs) + ")");
    LinregReport rep;
    double model_err = 0.0, ridge_err = 0.0;
    for (size_t lo = 0; lo < seqs.size(); lo += size_t(batch_size)) {
        const size_t hi = std::min(seqs.size(), lo + size_t(batch_size));
        ContinuousBatch<S> b = pack_linreg<S>(seqs, lo, hi);
        const std::vector<S> ctx = capture_context(m, b.in, 2 * freeze_pairs);
        Graph<S> g;
        auto r = frozen_forward(g, m, b.in, ctx, 0);
        for (size_t i = lo; i < hi; ++i) {
            const LinRegSequence& sq = seqs[i];
            // closed-form oracle on the frozen prefix
            std::vector<double> xk(size_t(freeze_pairs) * size_t(sq.d_in));
            std::vector<double> yk(size_t(freeze_pairs) * size_t(sq.d_out));
            for (int k = 0; k < freeze_pairs; ++k) {
                for (int j = 0; j < sq.d_in; ++j)
                    xk[size_t(k * sq.d_in + j)] = sq.inputs[size_t(2 * k * sq.width + j)];
                for (int j = 0; j < sq.d_out; ++j)
                    yk[size_t(k * sq.d_out + j)] = sq.targets[size_t(k * sq.d_out + j)];
            }
            const auto w = ridge_fit(xk, yk, freeze_pairs, sq.d_in, sq.d_out, spec.eps * spec.eps);
            for (int k = freeze_pairs; k < sq.n_pairs; ++k) {
                const double* x = sq.inputs.data() + size_t(2 * k) * size_t(sq.width);
                const auto pred = ridge_predict(w, x, sq.d_in, sq.d_out);
                const S* mp = r.logits->val.data() +
                              ((i - lo) * size_t(b.in.seq) + size_t(2 * k)) * size_t(sq.d_out);
                for (int j = 0; j < sq.d_out; ++j) {
                    const double truth = sq.targets[size_t(k * sq.d_out + j)];
                    ridge_err += (pred[size_t(j)] - truth) * (pred[size_t(j)] - truth);
                    model_err += (double(mp[j]) - truth) * (double(mp[j]) - truth);
                }
                ++rep.n_terms;
            }
        }
    }
    if (rep.n_terms) {
        rep.model_mse = model_err / rep.n_terms;
        rep.ridge_mse = ridge_err / rep.n_terms;
    }
    return rep;
}

#define CGT_INSTANTIATE(S)                                                                     \
    template ContinuousBatch<S> pack_linreg<S>(const std::vector<LinRegSequence>&, size_t,     \
                                               size_t);                                        \
    template std::vector<std::vector<double>> y_traces<S>(const Model<S>&,                     \
                                                          const std::vector<IclSequence>&,     \
                                                          int);                                \
    template ForwardResult<S> clamped_forward<S>(Graph<S>&, const Model<S>&, const TokenBatch&, \
                                                 int);                                         \
    template AccuracyReport icl_frozen_accuracy<S>(const Model<S>&,                            \
                                                   const std::vector<IclSequence>&, int);      \
    template AccuracyReport icl_specialized_accuracy<S>(const Model<S>&,                       \
                                                        const std::vector<IclSequence>&, int); \
    template std::vector<double> icl_variation<S>(const Model<S>&,                             \
                                                  const std::vector<IclSequence>&, int);       \
    template ProbeData icl_probe_data<S>(const Model<S>&, const std::vector<IclSequence>&,     \
                                         int);                                                 \
    template LinregReport linreg_specialized_error<S>(const Model<S>&, const LinearRegSpec&,   \
                                                      const std::vector<LinRegSequence>&, int, \
                                                      int);

CGT_INSTANTIATE(float)
CGT_INSTANTIATE(double)
#undef CGT_INSTANTIATE

}  // namespace cgt
