#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"

using cgt::GraphD;
using cgt::Node;
using cgt::Rng;
using cgt::make_param;
using gradcheck::fill_uniform;
using gradcheck::max_rel_error;

namespace {
constexpr double kTol = 1e-4;

using P = std::unique_ptr<Node<double>>;
}  // namespace

TEST_CASE("matmul forward matches naive triple loop") {
    Rng rng(11);
    P a = make_param<double>({3, 4}, "a");
    P b = make_param<double>({4, 5}, "b");
    fill_uniform(a.get(), rng);
    fill_uniform(b.get(), rng);
    GraphD g;
    auto* c = g.matmul(a.get(), b.get());
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) {
            double ref = 0;
            for (int k = 0; k < 4; ++k) ref += a->val[i * 4 + k] * b->val[k * 5 + j];
            CHECK(c->val[i * 5 + j] == doctest::Approx(ref).epsilon(1e-12));
        }
}

TEST_CASE("matmul gradient") {
    Rng rng(12);
    P a = make_param<double>({3, 4}, "a");
    P b = make_param<double>({4, 5}, "b");
    fill_uniform(a.get(), rng);
    fill_uniform(b.get(), rng);
    auto build = [&](GraphD& g) { return g.sum_all(g.square(g.matmul(a.get(), b.get()))); };
    CHECK(max_rel_error({a.get(), b.get()}, build) < kTol);
}

TEST_CASE("matmul shape mismatch throws") {
    P a = make_param<double>({3, 4}, "a");
    P b = make_param<double>({5, 2}, "b");
    GraphD g;
    CHECK_THROWS_AS((void)g.matmul(a.get(), b.get()), cgt::ShapeError);
}

TEST_CASE("linear with and without bias") {
    Rng rng(13);
    P x = make_param<double>({2, 3, 4}, "x");
    P w = make_param<double>({4, 5}, "w");
    P b = make_param<double>({5}, "b");
    fill_uniform(x.get(), rng);
    fill_uniform(w.get(), rng);
    fill_uniform(b.get(), rng);
    {
        GraphD g;
        auto* y = g.linear(x.get(), w.get(), b.get());
        double ref = b->val[2];
        for (int k = 0; k < 4; ++k) ref += x->val[(1 * 3 + 2) * 4 + k] * w->val[k * 5 + 2];
        CHECK(y->val[(1 * 3 + 2) * 5 + 2] == doctest::Approx(ref).epsilon(1e-12));
    }
    auto build = [&](GraphD& g) {
        return g.sum_all(g.square(g.linear(x.get(), w.get(), b.get())));
    };
    CHECK(max_rel_error({x.get(), w.get(), b.get()}, build) < kTol);
    auto build_nb = [&](GraphD& g) { return g.sum_all(g.square(g.linear(x.get(), w.get(), nullptr))); };
    CHECK(max_rel_error({x.get(), w.get()}, build_nb) < kTol);
}

TEST_CASE("elementwise ops gradients") {
    Rng rng(14);
    P a = make_param<double>({2, 3}, "a");
    P b = make_param<double>({2, 3}, "b");
    fill_uniform(a.get(), rng);
    fill_uniform(b.get(), rng);
    auto leaves = std::vector<Node<double>*>{a.get(), b.get()};
    CHECK(max_rel_error(leaves, [&](GraphD& g) {
              return g.sum_all(g.mul(g.add(a.get(), b.get()), g.sub(a.get(), b.get())));
          }) < kTol);
    CHECK(max_rel_error({a.get()}, [&](GraphD& g) {
              return g.sum_all(g.scale(g.square(a.get()), 0.7));
          }) < kTol);
}

TEST_CASE("add_pos adds table rows with offset and backprops to both") {
    Rng rng(15);
    P x = make_param<double>({2, 3, 4}, "x");
    P tab = make_param<double>({8, 4}, "tab");
    fill_uniform(x.get(), rng);
    fill_uniform(tab.get(), rng);
    {
        GraphD g;
        auto* y = g.add_pos(x.get(), tab.get(), 2);
        CHECK(y->val[(1 * 3 + 2) * 4 + 1] ==
              doctest::Approx(x->val[(1 * 3 + 2) * 4 + 1] + tab->val[(2 + 2) * 4 + 1]));
    }
    CHECK(max_rel_error({x.get(), tab.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.add_pos(x.get(), tab.get(), 2)));
          }) < kTol);
}

TEST_CASE("concat and slice round trip") {
    Rng rng(16);
    P a = make_param<double>({2, 3, 4}, "a");
    P b = make_param<double>({2, 3, 2}, "b");
    fill_uniform(a.get(), rng);
    fill_uniform(b.get(), rng);
    {
        GraphD g;
        auto* c = g.concat_last(a.get(), b.get());
        auto* a2 = g.slice_last(c, 0, 4);
        auto* b2 = g.slice_last(c, 4, 2);
        for (int i = 0; i < a->numel(); ++i) CHECK(a2->val[i] == a->val[i]);
        for (int i = 0; i < b->numel(); ++i) CHECK(b2->val[i] == b->val[i]);
    }
    CHECK(max_rel_error({a.get(), b.get()}, [&](GraphD& g) {
              auto* c = g.concat_last(a.get(), b.get());
              return g.sum_all(g.square(g.slice_last(c, 2, 3)));
          }) < kTol);
    CHECK(max_rel_error({a.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.slice_time(a.get(), 1, 2)));
          }) < kTol);
}

TEST_CASE("transpose") {
    Rng rng(17);
    P a = make_param<double>({3, 5}, "a");
    fill_uniform(a.get(), rng);
    {
        GraphD g;
        auto* t = g.transpose(a.get());
        CHECK(t->val[2 * 3 + 1] == a->val[1 * 5 + 2]);
    }
    CHECK(max_rel_error({a.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.transpose(a.get())));
          }) < kTol);
}

TEST_CASE("softmax rows sum to one, causal zeroes the future") {
    Rng rng(18);
    P a = make_param<double>({2, 4, 4}, "a");
    fill_uniform(a.get(), rng, -2, 2);
    GraphD g;
    auto* p = g.softmax_last(a.get(), true);
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 4; ++i) {
            double s = 0;
            for (int j = 0; j < 4; ++j) {
                double v = p->val[(b * 4 + i) * 4 + j];
                if (j > i) CHECK(v == 0.0);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("softmax gradients plain and causal") {
    Rng rng(19);
    P a = make_param<double>({2, 3, 3}, "a");
    P w = make_param<double>({2, 3, 3}, "w");
    fill_uniform(a.get(), rng, -2, 2);
    fill_uniform(w.get(), rng);
    CHECK(max_rel_error({a.get()}, [&](GraphD& g) {
              return g.sum_all(g.mul(g.softmax_last(a.get(), false), w.get()));
          }) < kTol);
    CHECK(max_rel_error({a.get()}, [&](GraphD& g) {
              return g.sum_all(g.mul(g.softmax_last(a.get(), true), w.get()));
          }) < kTol);
}

TEST_CASE("layer_norm normalizes and backprops") {
    Rng rng(20);
    P x = make_param<double>({2, 3, 6}, "x");
    P gn = make_param<double>({6}, "g");
    P bn = make_param<double>({6}, "b");
    fill_uniform(x.get(), rng, -2, 2);
    for (auto& v : gn->val) v = 1.0;
    {
        GraphD g;
        auto* y = g.layer_norm(x.get(), gn.get(), bn.get());
        for (int r = 0; r < 6; ++r) {
            double m = 0, v2 = 0;
            for (int i = 0; i < 6; ++i) m += y->val[r * 6 + i];
            m /= 6;
            for (int i = 0; i < 6; ++i) v2 += (y->val[r * 6 + i] - m) * (y->val[r * 6 + i] - m);
            v2 /= 6;
            CHECK(m == doctest::Approx(0.0).epsilon(1e-10));
            CHECK(v2 == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
    fill_uniform(gn.get(), rng);
    fill_uniform(bn.get(), rng);
    CHECK(max_rel_error({x.get(), gn.get(), bn.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.layer_norm(x.get(), gn.get(), bn.get())));
          }) < kTol);
}

TEST_CASE("pointwise nonlinearity gradients") {
    Rng rng(21);
    P x = make_param<double>({2, 5}, "x");
    fill_uniform(x.get(), rng);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.gelu(x.get())); }) < kTol);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.tanh_(x.get())); }) < kTol);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.exp_(x.get())); }) < kTol);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.softplus(x.get())); }) < kTol);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.square(x.get())); }) < kTol);
    for (auto& v : x->val) v = std::abs(v) + 0.5;
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.log_(x.get())); }) < kTol);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) { return g.sum_all(g.sqrt_(x.get())); }) < kTol);
}

TEST_CASE("reductions") {
    Rng rng(22);
    P x = make_param<double>({2, 3, 4}, "x");
    fill_uniform(x.get(), rng);
    {
        GraphD g;
        double ref = 0;
        for (auto v : x->val) ref += v;
        CHECK(g.sum_all(x.get())->scalar() == doctest::Approx(ref).epsilon(1e-12));
        CHECK(g.mean_all(x.get())->scalar() == doctest::Approx(ref / 24).epsilon(1e-12));
    }
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.sum_last(x.get())));
          }) < kTol);
}

TEST_CASE("embedding gathers rows and scatters gradients") {
    Rng rng(23);
    P tab = make_param<double>({7, 3}, "tab");
    fill_uniform(tab.get(), rng);
    std::vector<int> ids = {1, 4, 4, 0, 6, 2};
    {
        GraphD g;
        auto* e = g.embedding(tab.get(), ids, 2, 3);
        CHECK(e->shape == std::vector<int>{2, 3, 3});
        CHECK(e->val[0 * 3 + 1] == tab->val[1 * 3 + 1]);
        CHECK(e->val[(1 * 3 + 2) * 3 + 0] == tab->val[2 * 3 + 0]);
        std::vector<int> bad = {7, 0, 0, 0, 0, 0};
        CHECK_THROWS_AS((void)g.embedding(tab.get(), bad, 2, 3), cgt::ShapeError);
    }
    CHECK(max_rel_error({tab.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.embedding(tab.get(), ids, 2, 3)));
          }) < kTol);
}

TEST_CASE("gather_time") {
    Rng rng(24);
    P x = make_param<double>({3, 5, 2}, "x");
    fill_uniform(x.get(), rng);
    std::vector<int> idx = {4, 0, 2};
    {
        GraphD g;
        auto* y = g.gather_time(x.get(), idx);
        CHECK(y->val[0 * 2 + 1] == x->val[(0 * 5 + 4) * 2 + 1]);
        CHECK(y->val[2 * 2 + 0] == x->val[(2 * 5 + 2) * 2 + 0]);
    }
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.gather_time(x.get(), idx)));
          }) < kTol);
}

TEST_CASE("cross entropy matches manual log-softmax and ignores masked rows") {
    Rng rng(25);
    P logits = make_param<double>({2, 3, 5}, "logits");
    fill_uniform(logits.get(), rng, -2, 2);
    std::vector<int> tgt = {1, 0, 3, 2, 2, 4};
    std::vector<double> mask = {1, 0, 1, 1, 0, 1};
    {
        GraphD g;
        auto* l = g.cross_entropy_logits(logits.get(), tgt, mask);
        double ref = 0, cnt = 0;
        for (int r = 0; r < 6; ++r) {
            if (mask[r] == 0) continue;
            double mx = -1e30, z = 0;
            for (int j = 0; j < 5; ++j) mx = std::max(mx, logits->val[r * 5 + j]);
            for (int j = 0; j < 5; ++j) z += std::exp(logits->val[r * 5 + j] - mx);
            ref -= logits->val[r * 5 + tgt[r]] - mx - std::log(z);
            cnt += 1;
        }
        CHECK(l->scalar() == doctest::Approx(ref / cnt).epsilon(1e-10));
    }
    CHECK(max_rel_error({logits.get()}, [&](GraphD& g) {
              return g.cross_entropy_logits(logits.get(), tgt, mask);
          }) < kTol);
}

TEST_CASE("squared l2 loss with mask") {
    Rng rng(26);
    P pred = make_param<double>({2, 3, 4}, "pred");
    fill_uniform(pred.get(), rng);
    std::vector<double> target(24), mask = {1, 0, 1, 0, 0, 1};
    Rng r2(27);
    for (auto& t : target) t = r2.uniform(-1, 1);
    {
        GraphD g;
        auto* l = g.sq_l2_loss(pred.get(), target, mask);
        double ref = 0;
        for (int r = 0; r < 6; ++r) {
            if (mask[r] == 0) continue;
            for (int i = 0; i < 4; ++i) {
                double d = pred->val[r * 4 + i] - target[r * 4 + i];
                ref += d * d;
            }
        }
        CHECK(l->scalar() == doctest::Approx(ref / 3).epsilon(1e-12));
    }
    CHECK(max_rel_error({pred.get()}, [&](GraphD& g) {
              return g.sq_l2_loss(pred.get(), target, mask);
          }) < kTol);
}

TEST_CASE("causal attention matches naive reference") {
    Rng rng(28);
    int B = 2, s = 5, H = 2, hd = 3, dm = H * hd;
    P q = make_param<double>({B, s, dm}, "q");
    P k = make_param<double>({B, s, dm}, "k");
    P v = make_param<double>({B, s, dm}, "v");
    fill_uniform(q.get(), rng);
    fill_uniform(k.get(), rng);
    fill_uniform(v.get(), rng);
    GraphD g;
    auto* o = g.causal_mha(q.get(), k.get(), v.get(), H);
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < s; ++i) {
                std::vector<double> sc(i + 1);
                double mx = -1e30;
                for (int j = 0; j <= i; ++j) {
                    double dot = 0;
                    for (int e = 0; e < hd; ++e)
                        dot += q->val[(b * s + i) * dm + h * hd + e] *
                               k->val[(b * s + j) * dm + h * hd + e];
                    sc[j] = dot / std::sqrt(double(hd));
                    mx = std::max(mx, sc[j]);
                }
                double z = 0;
                for (int j = 0; j <= i; ++j) {
                    sc[j] = std::exp(sc[j] - mx);
                    z += sc[j];
                }
                for (int e = 0; e < hd; ++e) {
                    double ref = 0;
                    for (int j = 0; j <= i; ++j)
                        ref += sc[j] / z * v->val[(b * s + j) * dm + h * hd + e];
                    CHECK(o->val[(b * s + i) * dm + h * hd + e] ==
                          doctest::Approx(ref).epsilon(1e-10));
                }
            }
}

TEST_CASE("causal attention gradient") {
    Rng rng(29);
    P q = make_param<double>({2, 4, 6}, "q");
    P k = make_param<double>({2, 4, 6}, "k");
    P v = make_param<double>({2, 4, 6}, "v");
    fill_uniform(q.get(), rng);
    fill_uniform(k.get(), rng);
    fill_uniform(v.get(), rng);
    CHECK(max_rel_error({q.get(), k.get(), v.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.causal_mha(q.get(), k.get(), v.get(), 2)));
          }) < kTol);
}

TEST_CASE("append_ones") {
    Rng rng(30);
    P x = make_param<double>({2, 3, 4}, "x");
    fill_uniform(x.get(), rng);
    {
        GraphD g;
        auto* y = g.append_ones(x.get());
        CHECK(y->shape == std::vector<int>{2, 3, 5});
        CHECK(y->val[0 * 5 + 4] == 1.0);
        CHECK(y->val[(1 * 3 + 2) * 5 + 4] == 1.0);
        CHECK(y->val[(1 * 3 + 2) * 5 + 1] == x->val[(1 * 3 + 2) * 4 + 1]);
    }
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.append_ones(x.get())));
          }) < kTol);
}

TEST_CASE("mix_templates equals explicit weighted sum of bank matrices") {
    Rng rng(31);
    int B = 2, t = 3, M = 4, p = 3, r = 2;
    P sig = make_param<double>({B, t, M}, "sig");
    P bank = make_param<double>({M, p, r}, "bank");
    fill_uniform(sig.get(), rng);
    fill_uniform(bank.get(), rng);
    {
        GraphD g;
        auto* o = g.mix_templates(sig.get(), bank.get());
        CHECK(o->shape == std::vector<int>{B, t, p, r});
        for (int b = 0; b < B; ++b)
            for (int tt = 0; tt < t; ++tt)
                for (int i = 0; i < p; ++i)
                    for (int j = 0; j < r; ++j) {
                        double ref = 0;
                        for (int m = 0; m < M; ++m)
                            ref += sig->val[(b * t + tt) * M + m] * bank->val[(m * p + i) * r + j];
                        CHECK(o->val[((b * t + tt) * p + i) * r + j] ==
                              doctest::Approx(ref).epsilon(1e-12));
                    }
    }
    CHECK(max_rel_error({sig.get(), bank.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.mix_templates(sig.get(), bank.get())));
          }) < kTol);
}

TEST_CASE("pos_matvec and transpose variant match loops, including broadcast time") {
    Rng rng(32);
    int B = 2, s = 3, p = 4, r = 2;
    P m = make_param<double>({B, s, p, r}, "m");
    P m1 = make_param<double>({B, 1, p, r}, "m1");
    P v = make_param<double>({B, s, r}, "v");
    P u = make_param<double>({B, s, p}, "u");
    fill_uniform(m.get(), rng);
    fill_uniform(m1.get(), rng);
    fill_uniform(v.get(), rng);
    fill_uniform(u.get(), rng);
    {
        GraphD g;
        auto* o = g.pos_matvec(m.get(), v.get());
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < s; ++t)
                for (int i = 0; i < p; ++i) {
                    double ref = 0;
                    for (int j = 0; j < r; ++j)
                        ref += m->val[((b * s + t) * p + i) * r + j] * v->val[(b * s + t) * r + j];
                    CHECK(o->val[(b * s + t) * p + i] == doctest::Approx(ref).epsilon(1e-12));
                }
        auto* o2 = g.pos_matvec_t(m.get(), u.get());
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < s; ++t)
                for (int j = 0; j < r; ++j) {
                    double ref = 0;
                    for (int i = 0; i < p; ++i)
                        ref += m->val[((b * s + t) * p + i) * r + j] * u->val[(b * s + t) * p + i];
                    CHECK(o2->val[(b * s + t) * r + j] == doctest::Approx(ref).epsilon(1e-12));
                }
    }
    CHECK(max_rel_error({m.get(), v.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.pos_matvec(m.get(), v.get())));
          }) < kTol);
    CHECK(max_rel_error({m1.get(), v.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.pos_matvec(m1.get(), v.get())));
          }) < kTol);
    CHECK(max_rel_error({m.get(), u.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.pos_matvec_t(m.get(), u.get())));
          }) < kTol);
    CHECK(max_rel_error({m1.get(), u.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.pos_matvec_t(m1.get(), u.get())));
          }) < kTol);
}

TEST_CASE("l2_normalize yields unit rows and clean gradients") {
    Rng rng(33);
    P x = make_param<double>({2, 3, 5}, "x");
    fill_uniform(x.get(), rng);
    {
        GraphD g;
        auto* n = g.l2_normalize(x.get());
        for (int r = 0; r < 6; ++r) {
            double nrm = 0;
            for (int i = 0; i < 5; ++i) nrm += n->val[r * 5 + i] * n->val[r * 5 + i];
            CHECK(std::sqrt(nrm) == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    {
        P z = make_param<double>({1, 1, 4}, "z");
        GraphD g;
        auto* n = g.l2_normalize(z.get());
        for (int i = 0; i < 4; ++i) CHECK(std::isfinite(n->val[i]));
        g.backward(g.sum_all(n));
        for (int i = 0; i < 4; ++i) CHECK(std::isfinite(z->grad[i]));
    }
    P w = make_param<double>({2, 3, 5}, "w");
    fill_uniform(w.get(), rng);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.sum_all(g.mul(g.l2_normalize(x.get()), w.get()));
          }) < kTol);
}

TEST_CASE("pair_dots_minus_delta") {
    Rng rng(34);
    int B = 3, s = 2, d = 4;
    P x = make_param<double>({B, s, d}, "x");
    fill_uniform(x.get(), rng);
    {
        GraphD g;
        auto* o = g.pair_dots_minus_delta(x.get());
        CHECK(o->shape == std::vector<int>{B, B, s});
        for (int a = 0; a < B; ++a)
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < s; ++t) {
                    double ref = a == b ? -1.0 : 0.0;
                    for (int i = 0; i < d; ++i)
                        ref += x->val[(a * s + t) * d + i] * x->val[(b * s + t) * d + i];
                    CHECK(o->val[(a * B + b) * s + t] == doctest::Approx(ref).epsilon(1e-12));
                }
    }
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.sum_all(g.square(g.pair_dots_minus_delta(x.get())));
          }) < kTol);
}

TEST_CASE("gp_quad_form matches explicit bilinear form") {
    Rng rng(35);
    int B = 2, s = 4, d = 3;
    P mu = make_param<double>({B, s, d}, "mu");
    fill_uniform(mu.get(), rng);
    std::vector<double> k(s * s);
    Rng r2(36);
    for (int i = 0; i < s; ++i)
        for (int j = 0; j <= i; ++j) {
            double v = r2.uniform(-1, 1);
            k[i * s + j] = v;
            k[j * s + i] = v;
        }
    for (int i = 0; i < s; ++i) k[i * s + i] += 4.0;
    {
        GraphD g;
        double ref = 0;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < d; ++i)
                for (int t1 = 0; t1 < s; ++t1)
                    for (int t2 = 0; t2 < s; ++t2)
                        ref += mu->val[(b * s + t1) * d + i] * k[t1 * s + t2] *
                               mu->val[(b * s + t2) * d + i];
        CHECK(g.gp_quad_form(mu.get(), k)->scalar() == doctest::Approx(ref).epsilon(1e-10));
    }
    CHECK(max_rel_error({mu.get()}, [&](GraphD& g) { return g.gp_quad_form(mu.get(), k); }) < kTol);
}

TEST_CASE("weighted sums over time and last dim") {
    Rng rng(37);
    P x = make_param<double>({2, 4, 3}, "x");
    fill_uniform(x.get(), rng);
    std::vector<double> wt = {0.5, 1.0, 2.0, 0.25};
    std::vector<double> wl = {1.5, -0.5, 2.0};
    {
        GraphD g;
        double ref = 0;
        for (int b = 0; b < 2; ++b)
            for (int t = 0; t < 4; ++t)
                for (int i = 0; i < 3; ++i) ref += wt[t] * x->val[(b * 4 + t) * 3 + i];
        CHECK(g.weighted_sum_time(x.get(), wt)->scalar() == doctest::Approx(ref).epsilon(1e-12));
        ref = 0;
        for (int r = 0; r < 8; ++r)
            for (int i = 0; i < 3; ++i) ref += wl[i] * x->val[r * 3 + i];
        CHECK(g.weighted_sum_last(x.get(), wl)->scalar() == doctest::Approx(ref).epsilon(1e-12));
    }
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.weighted_sum_time(g.square(x.get()), wt);
          }) < kTol);
    CHECK(max_rel_error({x.get()}, [&](GraphD& g) {
              return g.weighted_sum_last(g.square(x.get()), wl);
          }) < kTol);
}

TEST_CASE("backward twice produces identical gradients") {
    Rng rng(38);
    P a = make_param<double>({3, 3}, "a");
    P b = make_param<double>({3, 3}, "b");
    fill_uniform(a.get(), rng);
    fill_uniform(b.get(), rng);
    GraphD g;
    auto* loss = g.sum_all(g.square(g.matmul(a.get(), b.get())));
    g.backward(loss);
    auto ga = a->grad, gb = b->grad;
    g.backward(loss);
    CHECK(a->grad == ga);
    CHECK(b->grad == gb);
}

TEST_CASE("backward only touches the reachable subgraph") {
    Rng rng(39);
    P a = make_param<double>({2, 2}, "a");
    P b = make_param<double>({2, 2}, "b");
    fill_uniform(a.get(), rng);
    fill_uniform(b.get(), rng);
    GraphD g;
    auto* la = g.sum_all(g.square(a.get()));
    (void)g.sum_all(g.square(b.get()));
    g.backward(la);
    CHECK(a->grad.size() == 4);
    bool nonzero = false;
    for (double v : a->grad) nonzero |= (v != 0.0);
    CHECK(nonzero);
    CHECK(b->grad.empty());
}

TEST_CASE("backward rejects non-scalar losses") {
    Rng rng(40);
    P a = make_param<double>({2, 2}, "a");
    fill_uniform(a.get(), rng);
    GraphD g;
    auto* y = g.square(a.get());
    CHECK_THROWS_AS(g.backward(y), cgt::ShapeError);
}

TEST_CASE("reshape views values and routes gradients back") {
    Rng rng(41);
    P a = make_param<double>({2, 3}, "a");
    fill_uniform(a.get(), rng);
    GraphD g;
    auto* r = g.reshape(a.get(), {3, 2, 1});
    CHECK(r->shape == std::vector<int>{3, 2, 1});
    CHECK(r->val == a->val);
    CHECK_THROWS_AS(g.reshape(a.get(), {4, 2}), cgt::ShapeError);

    auto build = [&](GraphD& gg) {
        return gg.sum_all(gg.square(gg.reshape(a.get(), {6, 1, 1})));
    };
    CHECK(gradcheck::max_rel_error({a.get()}, build) < 1e-7);
}

TEST_CASE("mean_batch and sub_bcast_batch against naive reference") {
    Rng rng(42);
    P x = make_param<double>({3, 2, 4}, "x");
    fill_uniform(x.get(), rng);
    GraphD g;
    auto* mb = g.mean_batch(x.get());
    CHECK(mb->shape == std::vector<int>{1, 2, 4});
    for (int s = 0; s < 2; ++s)
        for (int d = 0; d < 4; ++d) {
            double want = 0.0;
            for (int b = 0; b < 3; ++b) want += x->val[size_t((b * 2 + s) * 4 + d)];
            want /= 3.0;
            CHECK(mb->val[size_t(s * 4 + d)] == doctest::Approx(want).epsilon(1e-15));
        }
    auto* dz = g.sub_bcast_batch(x.get(), mb);
    for (int s = 0; s < 2; ++s)
        for (int d = 0; d < 4; ++d) {
            double col = 0.0;
            for (int b = 0; b < 3; ++b) col += dz->val[size_t((b * 2 + s) * 4 + d)];
            CHECK(col == doctest::Approx(0.0).epsilon(1e-12));
        }

    auto build = [&](GraphD& gg) {
        auto* m = gg.mean_batch(x.get());
        auto* c = gg.sub_bcast_batch(x.get(), m);
        return gg.sum_all(gg.square(c));
    };
    CHECK(gradcheck::max_rel_error({x.get()}, build) < 1e-7);
}

TEST_CASE("cov_match matches hand-rolled covariance penalty") {
    Rng rng(43);
    P x = make_param<double>({4, 3, 2}, "x");
    fill_uniform(x.get(), rng);
    std::vector<int> tuples = {0, 0, 0, 0, 0, 1, 0, 1, 2, 2, 1, 1, 1, 2, 0, 1};
    std::vector<double> targets = {1.0, 0.0, 0.5, -0.25};

    GraphD g;
    auto* c = g.cov_match(x.get(), tuples, targets);
    double want = 0.0;
    for (size_t q = 0; q < targets.size(); ++q) {
        int s = tuples[q * 4], t = tuples[q * 4 + 1], i = tuples[q * 4 + 2], j = tuples[q * 4 + 3];
        double acc = 0.0;
        for (int b = 0; b < 4; ++b)
            acc += x->val[size_t((b * 3 + s) * 2 + i)] * x->val[size_t((b * 3 + t) * 2 + j)];
        double e = acc / 4.0 - targets[q];
        want += e * e;
    }
    CHECK(c->val[0] == doctest::Approx(want).epsilon(1e-14));
    CHECK_THROWS_AS(g.cov_match(x.get(), {0, 0, 0, 9}, {1.0}), cgt::ShapeError);
    CHECK_THROWS_AS(g.cov_match(x.get(), {0, 0, 0}, {1.0}), cgt::ShapeError);

    auto build = [&](GraphD& gg) { return gg.cov_match(x.get(), tuples, targets); };
    CHECK(gradcheck::max_rel_error({x.get()}, build) < 1e-6);
}
