#include "cgt/datasets.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "cgt/kernels.hpp"
#include "cgt/tensor.hpp"

namespace cgt {

namespace icl_vocab {

namespace {
constexpr char kChars[kSize + 1] = "0123456789*=+-|#";
}

int encode(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    switch (c) {
        case '*': return 10;
        case '=': return 11;
        case '+': return 12;
        case '-': return 13;
        case '|': return 14;
        case '#': return 15;
        default:
            throw ShapeError(std::string("icl_vocab: unknown character '") + c + "'");
    }
}

char decode(int t) {
    if (t < 0 || t >= kSize)
        throw ShapeError("icl_vocab: token " + std::to_string(t) + " out of range");
    return kChars[t];
}

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(encode(c));
    return out;
}

std::string detokenize(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(decode(t));
    return out;
}

}  // namespace icl_vocab

namespace byte_vocab {

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(int(static_cast<unsigned char>(c)));
    return out;
}

std::string detokenize(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= kSize)
            throw ShapeError("byte_vocab: token " + std::to_string(t) + " out of range");
        out.push_back(char(static_cast<unsigned char>(t)));
    }
    return out;
}

}  // namespace byte_vocab

long long truncated_combination(double a, double b, long long A, long long B) {
    double raw = a * double(A) + b * double(B);
    return (long long)std::trunc(raw);
}

std::string render_answer(long long c, int d) {
    long long mag = c < 0 ? -c : c;
    long long limit = 1;
    for (int i = 0; i < d + 2; ++i) limit *= 10;
    if (mag >= limit)
        throw ShapeError("render_answer: |" + std::to_string(c) + "| does not fit " +
                         std::to_string(d + 2) + " digits");
    std::string digits = std::to_string(mag);
    std::string out(1, c < 0 ? '-' : '+');
    out.append(size_t(d + 2) - digits.size(), '0');
    out += digits;
    return out;
}

int icl_example_len(int d) { return 3 * d + 6; }

int icl_task_len(const SyntheticTaskSpec& spec) {
    return spec.n_ex * icl_example_len(spec.d) + 1;
}

namespace {

std::string zero_pad(long long v, int width) {
    std::string digits = std::to_string(v);
    std::string out(size_t(width) - digits.size(), '0');
    return out + digits;
}

}  // namespace

IclSequence gen_icl_sequence(const SyntheticTaskSpec& spec, Rng& rng) {
    if (spec.n_tasks < 1 || spec.n_ex < 2 || spec.d < 1)
        throw ShapeError("gen_icl_sequence: need n_tasks >= 1, n_ex >= 2, d >= 1");
    long long base = 1;
    for (int i = 0; i < spec.d; ++i) base *= 10;
    std::string text;
    IclSequence seq;
    for (int ti = 0; ti < spec.n_tasks; ++ti) {
        IclTask task;
        task.a = rng.uniform(0.0, 10.0);
        task.b = rng.uniform(-10.0, 10.0);
        task.start = int(text.size());
        for (int ei = 0; ei < spec.n_ex; ++ei) {
            IclExample ex;
            ex.start = int(text.size());
            ex.A = (long long)rng.below(uint64_t(base));
            ex.B = (long long)rng.below(uint64_t(base));
            ex.C = truncated_combination(task.a, task.b, ex.A, ex.B);
            text += zero_pad(ex.A, spec.d);
            text += '*';
            text += zero_pad(ex.B, spec.d);
            text += '=';
            ex.answer_start = int(text.size());
            ex.answer_len = spec.d + 3;
            text += render_answer(ex.C, spec.d);
            text += '|';
            ex.end = int(text.size());
            task.examples.push_back(ex);
        }
        text += '#';
        task.end = int(text.size());
        task.e1_begin = task.examples[0].start;
        task.e1_end = task.examples[1].end;
        task.e2_begin = task.examples[size_t(spec.n_ex - 2)].start;
        task.e2_end = task.examples[size_t(spec.n_ex - 1)].end;
        seq.tasks.push_back(std::move(task));
    }
    seq.tokens = icl_vocab::tokenize(text);
    return seq;
}

AbFit fit_task_ab(const IclTask& task) {
    double saa = 0, sbb = 0, sab = 0, sac = 0, sbc = 0;
    for (const auto& ex : task.examples) {
        double A = double(ex.A), B = double(ex.B), C = double(ex.C);
        saa += A * A;
        sbb += B * B;
        sab += A * B;
        sac += A * C;
        sbc += B * C;
    }
    AbFit fit;
    double det = saa * sbb - sab * sab;
    if (std::abs(det) < 1e-9) {
        fit.a = task.a;
        fit.b = task.b;
    } else {
        fit.a = (sac * sbb - sbc * sab) / det;
        fit.b = (sbc * saa - sac * sab) / det;
    }
    for (const auto& ex : task.examples) {
        double r = fit.a * double(ex.A) + fit.b * double(ex.B) - double(ex.C);
        fit.max_residual = std::max(fit.max_residual, std::abs(r));
    }
    return fit;
}

LinRegSequence gen_linreg_sequence(const LinearRegSpec& spec, int width, Rng& rng) {
    if (spec.d_in > width || spec.d_out > width)
        throw ShapeError("gen_linreg_sequence: d_in/d_out exceed input width " +
                         std::to_string(width));
    if (spec.n_pairs < 1) throw ShapeError("gen_linreg_sequence: n_pairs must be >= 1");
    LinRegSequence seq;
    seq.d_in = spec.d_in;
    seq.d_out = spec.d_out;
    seq.n_pairs = spec.n_pairs;
    seq.width = width;
    seq.u.resize(size_t(spec.d_out) * spec.d_in);
    seq.bias.resize(size_t(spec.d_out));
    for (auto& v : seq.u) v = rng.normal();
    for (auto& v : seq.bias) v = rng.normal();
    seq.inputs.assign(size_t(2 * spec.n_pairs) * width, 0.0);
    seq.targets.assign(size_t(spec.n_pairs) * spec.d_out, 0.0);
    std::vector<double> x(static_cast<size_t>(spec.d_in));
    for (int k = 0; k < spec.n_pairs; ++k) {
        for (auto& v : x) v = rng.normal();
        double* xrow = seq.inputs.data() + size_t(2 * k) * width;
        for (int i = 0; i < spec.d_in; ++i) xrow[i] = x[size_t(i)];
        double* yrow = seq.inputs.data() + size_t(2 * k + 1) * width;
        for (int j = 0; j < spec.d_out; ++j) {
            double y = seq.bias[size_t(j)];
            for (int i = 0; i < spec.d_in; ++i) y += seq.u[size_t(j) * spec.d_in + i] * x[size_t(i)];
            y += spec.eps * rng.normal();
            yrow[j] = y;
            seq.targets[size_t(k) * spec.d_out + j] = y;
        }
    }
    return seq;
}

std::vector<double> ridge_fit(const std::vector<double>& x, const std::vector<double>& y, int k,
                              int d_in, int d_out, double lambda) {
    int dz = d_in + 1;
    std::vector<double> g(size_t(dz) * dz, 0.0), rhs(size_t(dz) * d_out, 0.0);
    std::vector<double> z(static_cast<size_t>(dz));
    for (int r = 0; r < k; ++r) {
        for (int i = 0; i < d_in; ++i) z[size_t(i)] = x[size_t(r) * d_in + i];
        z[size_t(d_in)] = 1.0;
        for (int i = 0; i < dz; ++i) {
            for (int j = 0; j < dz; ++j) g[size_t(i) * dz + j] += z[size_t(i)] * z[size_t(j)];
            for (int j = 0; j < d_out; ++j)
                rhs[size_t(i) * d_out + j] += z[size_t(i)] * y[size_t(r) * d_out + j];
        }
    }
    for (int i = 0; i < dz; ++i) g[size_t(i) * dz + i] += lambda;
    return spd_solve(g, dz, rhs, d_out);
}

std::vector<double> ridge_predict(const std::vector<double>& w, const double* x, int d_in,
                                  int d_out) {
    std::vector<double> out(static_cast<size_t>(d_out));
    for (int j = 0; j < d_out; ++j) {
        double acc = w[size_t(d_in) * d_out + j];
        for (int i = 0; i < d_in; ++i) acc += x[i] * w[size_t(i) * d_out + j];
        out[size_t(j)] = acc;
    }
    return out;
}

namespace {

const std::string& cached_file(const std::string& path) {
    static std::map<std::string, std::string> cache;
    auto it = cache.find(path);
    if (it != cache.end()) return it->second;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ShapeError("gen_text_mixture: cannot open corpus file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return cache.emplace(path, ss.str()).first->second;
}

}  // namespace

TextMixSequence gen_text_mixture(const TextMixSpec& spec, Rng& rng) {
    if (spec.corpus_paths.empty()) throw ShapeError("gen_text_mixture: no corpus files given");
    if (spec.n_excerpts < 1 || spec.n_excerpts > 3)
        throw ShapeError("gen_text_mixture: n_excerpts must be 1, 2 or 3");
    if (!(0 < spec.l_start && spec.l_start <= spec.l_finish && spec.l_finish <= spec.l_max))
        throw ShapeError("gen_text_mixture: need 0 < l_start <= l_finish <= l_max");

    int k = spec.n_excerpts;
    std::vector<int> joins;
    for (int i = 1; i < k; ++i) {
        int lo = spec.l_start * i / (k - 1);
        int hi = spec.l_finish * i / (k - 1);
        joins.push_back(lo + int(rng.below(uint64_t(hi - lo + 1))));
    }

    std::string text;
    text.reserve(size_t(spec.l_max));
    for (int e = 0; e < k; ++e) {
        int begin = e == 0 ? 0 : joins[size_t(e - 1)];
        int end = e == k - 1 ? spec.l_max : joins[size_t(e)];
        int need = end - begin;
        const std::string& path =
            spec.corpus_paths[size_t(rng.below(uint64_t(spec.corpus_paths.size())))];
        const std::string& doc = cached_file(path);
        if (int64_t(doc.size()) < int64_t(spec.l_max))
            throw ShapeError("gen_text_mixture: corpus file too short (< l_max bytes): " + path);
        size_t offset = size_t(rng.below(uint64_t(doc.size() - size_t(spec.l_max) + 1)));
        text.append(doc, offset, size_t(need));
    }
    TextMixSequence out;
    out.tokens = byte_vocab::tokenize(text);
    out.joins = std::move(joins);
    return out;
}

}  // namespace cgt
