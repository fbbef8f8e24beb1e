#include "cgt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cgt/kernels.hpp"

namespace cgt {

std::vector<AnswerSpan> answer_spans(const IclSequence& seq, Segment seg) {
    std::vector<AnswerSpan> out;
    for (const auto& task : seq.tasks) {
        const int n_ex = int(task.examples.size());
        for (int e = 0; e < n_ex; ++e) {
            const bool in_e1 = e < 2;
            const bool in_e2 = e >= n_ex - 2;
            if ((seg == Segment::e1 && !in_e1) || (seg == Segment::e2 && !in_e2)) continue;
            out.push_back({task.examples[size_t(e)].answer_start,
                           task.examples[size_t(e)].answer_len});
        }
    }
    return out;
}

void AccuracyReport::merge(const AccuracyReport& o) {
    n_answers += o.n_answers;
    n_correct += o.n_correct;
    n_tokens += o.n_tokens;
    n_token_correct += o.n_token_correct;
}

template <class S>
AccuracyReport score_answers(const S* logits, int seq, int vocab, const int* tokens,
                             const std::vector<AnswerSpan>& spans) {
    AccuracyReport rep;
    for (const auto& span : spans) {
        if (span.start < 1 || span.start + span.len > seq)
            throw ShapeError("score_answers: span [" + std::to_string(span.start) + "," +
                             std::to_string(span.start + span.len) + ") outside (0," +
                             std::to_string(seq) + "]");
        bool all = true;
        for (int t = span.start; t < span.start + span.len; ++t) {
            const S* row = logits + size_t(t - 1) * size_t(vocab);
            int best = int(std::max_element(row, row + vocab) - row);
            const bool ok = best == tokens[t];
            all = all && ok;
            ++rep.n_tokens;
            rep.n_token_correct += ok ? 1 : 0;
        }
        ++rep.n_answers;
        rep.n_correct += all ? 1 : 0;
    }
    return rep;
}

template <class S>
AccuracyReport answer_accuracy(const Model<S>& m, const std::vector<IclSequence>& seqs,
                               Segment seg, int batch_size) {
    AccuracyReport rep;
    if (seqs.empty()) return rep;
    const int vocab = m.config().vocab_size;
    for (size_t lo = 0; lo < seqs.size(); lo += size_t(batch_size)) {
        const size_t hi = std::min(seqs.size(), lo + size_t(batch_size));
        const int n = int(seqs[lo].tokens.size());
        TokenBatch b;
        b.batch = int(hi - lo);
        b.seq = n;
        b.ids.reserve(size_t(b.batch) * size_t(n));
        for (size_t i = lo; i < hi; ++i) {
            if (int(seqs[i].tokens.size()) != n)
                throw ShapeError("answer_accuracy: sequences in one batch differ in length");
            b.ids.insert(b.ids.end(), seqs[i].tokens.begin(), seqs[i].tokens.end());
        }
        Graph<S> g;
        auto r = forward(g, m, b, {});
        for (size_t i = lo; i < hi; ++i)
            rep.merge(score_answers(r.logits->val.data() + (i - lo) * size_t(n) * size_t(vocab),
                                    n, vocab, seqs[i].tokens.data(), answer_spans(seqs[i], seg)));
    }
    return rep;
}

double representation_variation(const std::vector<double>& y_trace, int dim_y,
                                std::pair<int, int> e1, std::pair<int, int> e2) {
    const int n = dim_y > 0 ? int(y_trace.size()) / dim_y : 0;
    auto check = [&](std::pair<int, int> r, const char* which) {
        if (r.first < 0 || r.second > n || r.first >= r.second)
            throw ShapeError(std::string("representation_variation: bad ") + which + " range [" +
                             std::to_string(r.first) + "," + std::to_string(r.second) + ") for " +
                             std::to_string(n) + " positions");
    };
    check(e1, "e1");
    check(e2, "e2");
    if (e2.first < 1)
        throw ShapeError("representation_variation: e2 must start at position >= 1");

    auto in_union = [&](int s) {
        return (s >= e1.first && s < e1.second) || (s >= e2.first && s < e2.second);
    };
    std::vector<double> mean(static_cast<size_t>(dim_y), 0.0);
    int count = 0;
    for (int s = 0; s < n; ++s)
        if (in_union(s)) {
            for (int i = 0; i < dim_y; ++i) mean[size_t(i)] += y_trace[size_t(s * dim_y + i)];
            ++count;
        }
    for (auto& v : mean) v /= count;

    double var = 0.0;
    for (int s = 0; s < n; ++s)
        if (in_union(s))
            for (int i = 0; i < dim_y; ++i) {
                const double d = y_trace[size_t(s * dim_y + i)] - mean[size_t(i)];
                var += d * d;
            }
    var /= count;
    if (var == 0.0) return 0.0;
    const double scale = 1.0 / std::sqrt(var);

    double total = 0.0;
    for (int s = e2.first; s < e2.second; ++s) {
        double step = 0.0;
        for (int i = 0; i < dim_y; ++i) {
            const double d = (y_trace[size_t(s * dim_y + i)] - y_trace[size_t((s - 1) * dim_y + i)]) * scale;
            step += d * d;
        }
        total += std::sqrt(step);
    }
    return total / (e2.second - e2.first);
}

VariationReport summarize_variation(const std::vector<double>& values) {
    VariationReport rep;
    rep.values = values;
    if (values.empty()) return rep;
    for (double v : values) rep.mean += v;
    rep.mean /= double(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - rep.mean) * (v - rep.mean);
        rep.sigma3 = 3.0 * std::sqrt(ss / double(values.size() - 1) / double(values.size()));
    }
    return rep;
}

ProbeResult linear_probe(const std::vector<double>& y_train, const std::vector<double>& t_train,
                         const std::vector<double>& y_eval, const std::vector<double>& t_eval,
                         int dim_y, int n_targets) {
    const int p = dim_y + 1;
    const auto rows = [&](const std::vector<double>& y, const char* which) {
        if (dim_y < 1 || y.size() % size_t(dim_y) != 0)
            throw ShapeError(std::string("linear_probe: ") + which + " size " +
                             std::to_string(y.size()) + " not a multiple of dim_y");
        return int(y.size()) / dim_y;
    };
    const int k_tr = rows(y_train, "train y");
    const int k_ev = rows(y_eval, "eval y");
    if (int(t_train.size()) != k_tr * n_targets || int(t_eval.size()) != k_ev * n_targets)
        throw ShapeError("linear_probe: target rows must match sample rows");
    if (k_tr < 1 || k_ev < 1) throw ShapeError("linear_probe: need at least one row per split");

    // z-score each target column with evaluation-set statistics
    std::vector<double> mu(static_cast<size_t>(n_targets), 0.0);
    std::vector<double> sd(static_cast<size_t>(n_targets), 0.0);
    for (int r = 0; r < k_ev; ++r)
        for (int j = 0; j < n_targets; ++j) mu[size_t(j)] += t_eval[size_t(r * n_targets + j)];
    for (auto& v : mu) v /= k_ev;
    for (int r = 0; r < k_ev; ++r)
        for (int j = 0; j < n_targets; ++j) {
            const double d = t_eval[size_t(r * n_targets + j)] - mu[size_t(j)];
            sd[size_t(j)] += d * d;
        }
    for (auto& v : sd) v = std::sqrt(v / k_ev);
    for (auto& v : sd)
        if (v == 0.0) v = 1.0;

    auto zscore = [&](const std::vector<double>& t, int k) {
        std::vector<double> out(t.size());
        for (int r = 0; r < k; ++r)
            for (int j = 0; j < n_targets; ++j)
                out[size_t(r * n_targets + j)] =
                    (t[size_t(r * n_targets + j)] - mu[size_t(j)]) / sd[size_t(j)];
        return out;
    };
    const std::vector<double> zt_train = zscore(t_train, k_tr);
    const std::vector<double> zt_eval = zscore(t_eval, k_ev);

    // normal equations with bias column and a small ridge
    std::vector<double> xtx(size_t(p) * size_t(p), 0.0);
    std::vector<double> xty(size_t(p) * size_t(n_targets), 0.0);
    auto feat = [&](const std::vector<double>& y, int r, int i) {
        return i < dim_y ? y[size_t(r * dim_y + i)] : 1.0;
    };
    for (int r = 0; r < k_tr; ++r) {
        for (int i = 0; i < p; ++i) {
            const double fi = feat(y_train, r, i);
            for (int j = i; j < p; ++j) xtx[size_t(i * p + j)] += fi * feat(y_train, r, j);
            for (int j = 0; j < n_targets; ++j)
                xty[size_t(i * n_targets + j)] += fi * zt_train[size_t(r * n_targets + j)];
        }
    }
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < i; ++j) xtx[size_t(i * p + j)] = xtx[size_t(j * p + i)];
        xtx[size_t(i * p + i)] += 1e-6;
    }

    ProbeResult res;
    res.underdetermined = k_tr < p;
    std::vector<double> sol = spd_solve(xtx, p, xty, n_targets);  // [p, n_targets]
    res.w.assign(size_t(n_targets) * size_t(p), 0.0);
    for (int j = 0; j < n_targets; ++j)
        for (int i = 0; i < p; ++i) res.w[size_t(j * p + i)] = sol[size_t(i * n_targets + j)];

    res.mae_per_target.assign(static_cast<size_t>(n_targets), 0.0);
    for (int r = 0; r < k_ev; ++r)
        for (int j = 0; j < n_targets; ++j) {
            double pred = 0.0;
            for (int i = 0; i < p; ++i) pred += res.w[size_t(j * p + i)] * feat(y_eval, r, i);
            res.mae_per_target[size_t(j)] += std::abs(pred - zt_eval[size_t(r * n_targets + j)]);
        }
    for (int j = 0; j < n_targets; ++j) {
        res.mae_per_target[size_t(j)] /= k_ev;
        res.mae += res.mae_per_target[size_t(j)] / n_targets;
    }
    return res;
}

std::vector<double> dot_product_matrix(const std::vector<double>& y_trace, int n, int dim_y) {
    if (int64_t(y_trace.size()) != int64_t(n) * dim_y)
        throw ShapeError("dot_product_matrix: trace size " + std::to_string(y_trace.size()) +
                         " vs " + std::to_string(n) + "x" + std::to_string(dim_y));
    std::vector<double> nrm(y_trace);
    std::vector<bool> zero(static_cast<size_t>(n), false);
    for (int s = 0; s < n; ++s) {
        double norm = 0.0;
        for (int i = 0; i < dim_y; ++i) norm += nrm[size_t(s * dim_y + i)] * nrm[size_t(s * dim_y + i)];
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            zero[size_t(s)] = true;
            continue;
        }
        for (int i = 0; i < dim_y; ++i) nrm[size_t(s * dim_y + i)] /= norm;
    }
    std::vector<double> m(size_t(n) * size_t(n), 0.0);
    for (int s = 0; s < n; ++s) {
        m[size_t(s * n + s)] = zero[size_t(s)] ? 0.0 : 1.0;
        for (int t = s + 1; t < n; ++t) {
            double d = 0.0;
            for (int i = 0; i < dim_y; ++i)
                d += nrm[size_t(s * dim_y + i)] * nrm[size_t(t * dim_y + i)];
            d = std::clamp(d, -1.0, 1.0);
            m[size_t(s * n + t)] = d;
            m[size_t(t * n + s)] = d;
        }
    }
    return m;
}

void write_csv_matrix(const std::string& path, const std::vector<double>& m, int n) {
    std::ofstream out(path);
    if (!out) throw ShapeError("write_csv_matrix: cannot open " + path);
    out.precision(10);
    for (int s = 0; s < n; ++s) {
        for (int t = 0; t < n; ++t) out << (t ? "," : "") << m[size_t(s * n + t)];
        out << "\n";
    }
}

template <class S>
DocEmbedding embed_document(const Model<S>& m, const std::vector<int>& tokens, std::string doc_id,
                            std::string label) {
    if (tokens.empty()) throw ShapeError("embed_document: empty document " + doc_id);
    const ModelConfig& c = m.config();
    const int window = std::min<int>(int(tokens.size()), c.max_seq_len);
    TokenBatch b;
    b.batch = 1;
    b.seq = window;
    b.ids.assign(tokens.end() - window, tokens.end());

    Graph<S> g;
    auto r = forward(g, m, b, {});
    DocEmbedding row;
    row.doc_id = std::move(doc_id);
    row.label = std::move(label);
    const int take = std::min(16, window);
    row.truncated = take < 16;
    row.v.assign(static_cast<size_t>(c.dim_y), 0.0);
    for (int s = window - take; s < window; ++s)
        for (int i = 0; i < c.dim_y; ++i)
            row.v[size_t(i)] += double(r.y_read->val[size_t(s * c.dim_y + i)]) / take;
    return row;
}

void write_embeddings_csv(const std::string& path, const std::vector<DocEmbedding>& rows) {
    std::ofstream out(path);
    if (!out) throw ShapeError("write_embeddings_csv: cannot open " + path);
    out.precision(10);
    const size_t dim = rows.empty() ? 0 : rows[0].v.size();
    out << "doc_id,label,truncated";
    for (size_t i = 0; i < dim; ++i) out << ",v" << i;
    out << "\n";
    for (const auto& r : rows) {
        if (r.v.size() != dim)
            throw ShapeError("write_embeddings_csv: inconsistent embedding widths");
        out << r.doc_id << "," << r.label << "," << (r.truncated ? 1 : 0);
        for (double v : r.v) out << "," << v;
        out << "\n";
    }
}

#define CGT_INSTANTIATE(S)                                                                  \
    template AccuracyReport score_answers<S>(const S*, int, int, const int*,               \
                                             const std::vector<AnswerSpan>&);              \
    template AccuracyReport answer_accuracy<S>(const Model<S>&, const std::vector<IclSequence>&, \
                                               Segment, int);                              \
    template DocEmbedding embed_document<S>(const Model<S>&, const std::vector<int>&,      \
                                            std::string, std::string);

CGT_INSTANTIATE(float)
CGT_INSTANTIATE(double)
#undef CGT_INSTANTIATE

}  // namespace cgt
