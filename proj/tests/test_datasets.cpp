#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "cgt/datasets.hpp"
#include "cgt/rng.hpp"
#include "doctest.h"

using namespace cgt;

TEST_CASE("icl vocabulary round trip and rejection of unknown chars") {
    std::string all = "0123456789*=+-|#";
    auto toks = icl_vocab::tokenize(all);
    CHECK(toks.size() == 16);
    for (int i = 0; i < 16; ++i) CHECK(toks[size_t(i)] == i);
    CHECK(icl_vocab::detokenize(toks) == all);
    CHECK_THROWS_AS((void)icl_vocab::encode('x'), ShapeError);
    CHECK_THROWS_AS((void)icl_vocab::decode(16), ShapeError);
}

TEST_CASE("byte vocabulary round trip") {
    std::string s;
    for (int i = 0; i < 256; ++i) s.push_back(char(static_cast<unsigned char>(i)));
    auto toks = byte_vocab::tokenize(s);
    for (int i = 0; i < 256; ++i) CHECK(toks[size_t(i)] == i);
    CHECK(byte_vocab::detokenize(toks) == s);
}

TEST_CASE("truncated combination worked examples") {
    CHECK(truncated_combination(1.0, 1.0, 12, 23) == 35);
    CHECK(render_answer(35, 3) == "+00035");
    CHECK(truncated_combination(0.5, -1.5, 12, 23) == -28);
    CHECK(render_answer(-28, 3) == "-00028");
    CHECK(truncated_combination(0.0, 0.0, 999, 999) == 0);
    CHECK(render_answer(0, 3) == "+00000");
    CHECK_THROWS_AS((void)render_answer(123456, 3), ShapeError);
}

TEST_CASE("example and task token counts") {
    CHECK(icl_example_len(3) == 15);
    SyntheticTaskSpec spec;
    spec.n_tasks = 3;
    spec.n_ex = 4;
    spec.d = 3;
    CHECK(icl_task_len(spec) == 61);
    Rng rng(70);
    auto seq = gen_icl_sequence(spec, rng);
    CHECK(int(seq.tokens.size()) == 3 * 61);
}

TEST_CASE("generated sequences have the documented layout") {
    SyntheticTaskSpec spec;
    spec.n_tasks = 2;
    spec.n_ex = 4;
    spec.d = 3;
    Rng rng(71);
    auto seq = gen_icl_sequence(spec, rng);
    std::string text = icl_vocab::detokenize(seq.tokens);
    for (const auto& task : seq.tasks) {
        CHECK(text[size_t(task.end - 1)] == '#');
        for (const auto& ex : task.examples) {
            std::string es = text.substr(size_t(ex.start), size_t(ex.end - ex.start));
            REQUIRE(es.size() == 15);
            for (int i = 0; i < 3; ++i) CHECK(isdigit(es[size_t(i)]));
            CHECK(es[3] == '*');
            for (int i = 4; i < 7; ++i) CHECK(isdigit(es[size_t(i)]));
            CHECK(es[7] == '=');
            CHECK((es[8] == '+' || es[8] == '-'));
            for (int i = 9; i < 14; ++i) CHECK(isdigit(es[size_t(i)]));
            CHECK(es[14] == '|');
        }
        CHECK(task.e1_begin == task.examples[0].start);
        CHECK(task.e1_end == task.examples[1].end);
        CHECK(task.e2_begin == task.examples[2].start);
        CHECK(task.e2_end == task.examples[3].end);
    }
}

TEST_CASE("answers re-extracted from token spans round trip exactly") {
    SyntheticTaskSpec spec;
    Rng rng(72);
    for (int trial = 0; trial < 100; ++trial) {
        auto seq = gen_icl_sequence(spec, rng);
        std::string text = icl_vocab::detokenize(seq.tokens);
        for (const auto& task : seq.tasks)
            for (const auto& ex : task.examples) {
                std::string ans = text.substr(size_t(ex.answer_start), size_t(ex.answer_len));
                long long mag = std::stoll(ans.substr(1));
                long long parsed = ans[0] == '-' ? -mag : mag;
                CHECK(parsed == ex.C);
                CHECK(parsed == truncated_combination(task.a, task.b, ex.A, ex.B));
                std::string lhsA = text.substr(size_t(ex.start), 3);
                std::string lhsB = text.substr(size_t(ex.start) + 4, 3);
                CHECK(std::stoll(lhsA) == ex.A);
                CHECK(std::stoll(lhsB) == ex.B);
            }
    }
}

TEST_CASE("same seed reproduces the identical sequence") {
    SyntheticTaskSpec spec;
    Rng r1(73), r2(73);
    auto s1 = gen_icl_sequence(spec, r1);
    auto s2 = gen_icl_sequence(spec, r2);
    CHECK(s1.tokens == s2.tokens);
    CHECK(s1.tasks[0].a == s2.tasks[0].a);
}

TEST_CASE("tasks are identifiable: least-squares fit residual bounded by truncation") {
    SyntheticTaskSpec spec;
    Rng rng(74);
    for (int trial = 0; trial < 200; ++trial) {
        auto seq = gen_icl_sequence(spec, rng);
        for (const auto& task : seq.tasks) {
            for (const auto& ex : task.examples) {
                double r = task.a * double(ex.A) + task.b * double(ex.B) - double(ex.C);
                CHECK(std::abs(r) < 1.0);
            }
            auto fit = fit_task_ab(task);
            CHECK(fit.max_residual < 1.0 + 1e-9);
        }
    }
}

TEST_CASE("linear regression targets match the generative model") {
    LinearRegSpec spec;
    spec.eps = 0.0;
    spec.n_pairs = 10;
    Rng rng(75);
    auto seq = gen_linreg_sequence(spec, 32, rng);
    CHECK(seq.inputs.size() == size_t(20 * 32));
    for (int kk = 0; kk < 10; ++kk) {
        const double* x = seq.inputs.data() + size_t(2 * kk) * 32;
        for (int i = spec.d_in; i < 32; ++i) CHECK(x[i] == 0.0);
        double y = seq.bias[0];
        for (int i = 0; i < spec.d_in; ++i) y += seq.u[size_t(i)] * x[i];
        CHECK(seq.targets[size_t(kk)] == doctest::Approx(y).epsilon(1e-12));
        CHECK(seq.inputs[size_t(2 * kk + 1) * 32] == doctest::Approx(y).epsilon(1e-12));
    }
    CHECK_THROWS_AS((void)gen_linreg_sequence(spec, 8, rng), ShapeError);
}

TEST_CASE("noiseless ridge interpolates once the context determines the map") {
    LinearRegSpec spec;
    spec.eps = 0.0;
    spec.n_pairs = 30;
    Rng rng(76);
    auto seq = gen_linreg_sequence(spec, 32, rng);
    int k = spec.d_in + 1;
    std::vector<double> xs, ys;
    for (int kk = 0; kk < k; ++kk) {
        for (int i = 0; i < spec.d_in; ++i)
            xs.push_back(seq.inputs[size_t(2 * kk) * 32 + size_t(i)]);
        ys.push_back(seq.targets[size_t(kk)]);
    }
    auto w = ridge_fit(xs, ys, k, spec.d_in, spec.d_out, 1e-10);
    for (int kk = k; kk < spec.n_pairs; ++kk) {
        auto pred = ridge_predict(w, seq.inputs.data() + size_t(2 * kk) * 32, spec.d_in, 1);
        CHECK(pred[0] == doctest::Approx(seq.targets[size_t(kk)]).epsilon(1e-5));
    }
}

TEST_CASE("noisy ridge with bayes lambda beats the trivial predictor") {
    LinearRegSpec spec;
    Rng rng(77);
    double ridge_se = 0, zero_se = 0;
    int count = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto seq = gen_linreg_sequence(spec, 32, rng);
        int k = 20;
        std::vector<double> xs, ys;
        for (int kk = 0; kk < k; ++kk) {
            for (int i = 0; i < spec.d_in; ++i)
                xs.push_back(seq.inputs[size_t(2 * kk) * 32 + size_t(i)]);
            ys.push_back(seq.targets[size_t(kk)]);
        }
        auto w = ridge_fit(xs, ys, k, spec.d_in, spec.d_out, spec.eps * spec.eps);
        for (int kk = k; kk < spec.n_pairs; ++kk) {
            auto pred = ridge_predict(w, seq.inputs.data() + size_t(2 * kk) * 32, spec.d_in, 1);
            double e = pred[0] - seq.targets[size_t(kk)];
            ridge_se += e * e;
            zero_se += seq.targets[size_t(kk)] * seq.targets[size_t(kk)];
            ++count;
        }
    }
    CHECK(ridge_se / count < 0.1 * zero_se / count);
}

namespace {

std::string write_corpus_file(const std::string& name, const std::string& content) {
    std::string path = std::string("/tmp/") + name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    return path;
}

}  // namespace

TEST_CASE("text mixture: lengths, joins, and content provenance") {
    std::string doc_a(4000, 'a'), doc_b(4000, 'b');
    for (size_t i = 0; i < doc_a.size(); i += 7) doc_a[i] = 'A';
    auto pa = write_corpus_file("cgt_test_corpus_a.txt", doc_a);
    auto pb = write_corpus_file("cgt_test_corpus_b.txt", doc_b);

    TextMixSpec spec;
    spec.l_max = 64;
    spec.l_start = 24;
    spec.l_finish = 40;

    SUBCASE("single excerpt") {
        spec.corpus_paths = {pa};
        spec.n_excerpts = 1;
        Rng rng(80);
        auto seq = gen_text_mixture(spec, rng);
        CHECK(seq.tokens.size() == 64);
        CHECK(seq.joins.empty());
    }
    SUBCASE("two excerpts join inside the window") {
        spec.corpus_paths = {pa, pb};
        spec.n_excerpts = 2;
        Rng rng(81);
        for (int t = 0; t < 50; ++t) {
            auto seq = gen_text_mixture(spec, rng);
            CHECK(seq.tokens.size() == 64);
            REQUIRE(seq.joins.size() == 1);
            CHECK(seq.joins[0] >= 24);
            CHECK(seq.joins[0] <= 40);
        }
    }
    SUBCASE("three excerpts give two ascending joins") {
        spec.corpus_paths = {pa, pb};
        spec.n_excerpts = 3;
        Rng rng(82);
        auto seq = gen_text_mixture(spec, rng);
        REQUIRE(seq.joins.size() == 2);
        CHECK(seq.joins[0] >= 12);
        CHECK(seq.joins[0] <= 20);
        CHECK(seq.joins[1] >= 24);
        CHECK(seq.joins[1] <= 40);
        CHECK(seq.tokens.size() == 64);
    }
    SUBCASE("short corpus is rejected with the file named") {
        auto ps = write_corpus_file("cgt_test_corpus_short.txt", "tiny");
        spec.corpus_paths = {ps};
        spec.n_excerpts = 1;
        Rng rng(83);
        CHECK_THROWS_WITH_AS((void)gen_text_mixture(spec, rng),
                             doctest::Contains("cgt_test_corpus_short"), ShapeError);
    }
}

TEST_CASE("join position is uniform over the window (chi-squared)") {
    std::string doc(4000, 'z');
    auto pa = write_corpus_file("cgt_test_corpus_u.txt", doc);
    TextMixSpec spec;
    spec.corpus_paths = {pa};
    spec.l_max = 512;
    spec.l_start = 256;
    spec.l_finish = 384;
    spec.n_excerpts = 2;
    Rng rng(84);
    int bins = 384 - 256 + 1;
    std::vector<int> counts(size_t(bins), 0);
    int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto seq = gen_text_mixture(spec, rng);
        ++counts[size_t(seq.joins[0] - 256)];
    }
    double expected = double(draws) / bins;
    double chi2 = 0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    int dof = bins - 1;
    double z = 2.3263478740408408;  // 99th percentile of N(0,1)
    double crit = dof * std::pow(1.0 - 2.0 / (9.0 * dof) + z * std::sqrt(2.0 / (9.0 * dof)), 3.0);
    CHECK(chi2 < crit);
}
