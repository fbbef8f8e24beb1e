#include <cmath>

#include "cgt/optim.hpp"
#include "cgt/rng.hpp"
#include "doctest.h"

using cgt::Adam;
using cgt::AdamConfig;
using cgt::GraphD;
using cgt::Node;
using cgt::cosine_lr;
using cgt::make_param;

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 1000, 0.5) == 0.0);
    CHECK(cosine_lr(100, 100, 1000, 0.5) == doctest::Approx(0.5));
    CHECK(cosine_lr(1000, 100, 1000, 0.5) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(cosine_lr(50, 100, 1000, 0.5) == doctest::Approx(0.25));
    double mid = cosine_lr(550, 100, 1000, 0.5);
    CHECK(mid == doctest::Approx(0.25));
    CHECK_THROWS_AS(cosine_lr(0, 10, 5, 0.1), cgt::ShapeError);
    CHECK_THROWS_AS(cosine_lr(-1, 10, 100, 0.1), cgt::ShapeError);
    CHECK_THROWS_AS(cosine_lr(101, 10, 100, 0.1), cgt::ShapeError);
}

TEST_CASE("first Adam step moves by about lr in the sign direction") {
    auto p = make_param<double>({4}, "p");
    p->val = {1.0, -2.0, 0.5, 3.0};
    p->grad = {0.3, -0.7, 0.01, 2.0};
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam<double> opt({p.get()}, cfg);
    auto before = p->val;
    opt.step();
    for (int i = 0; i < 4; ++i) {
        double delta = p->val[i] - before[i];
        double sign = p->grad[i] > 0 ? 1.0 : -1.0;
        CHECK(delta == doctest::Approx(-0.1 * sign).epsilon(1e-4));
    }
}

TEST_CASE("zero gradient and zero decay leaves parameters unchanged") {
    auto p = make_param<double>({3}, "p");
    p->val = {1.0, 2.0, 3.0};
    p->grad = {0.0, 0.0, 0.0};
    Adam<double> opt({p.get()}, {});
    opt.step();
    opt.step();
    CHECK(p->val == std::vector<double>{1.0, 2.0, 3.0});

    auto q = make_param<double>({2}, "q");
    q->val = {1.0, -1.0};
    Adam<double> opt2({q.get()}, {});
    opt2.step();
    CHECK(q->val == std::vector<double>{1.0, -1.0});
}

TEST_CASE("Adam converges on a quadratic bowl") {
    auto w = make_param<double>({8}, "w");
    cgt::Rng rng(5);
    double nrm = 0;
    for (auto& v : w->val) v = rng.uniform(-1, 1);
    for (auto v : w->val) nrm += v * v;
    for (auto& v : w->val) v /= std::sqrt(nrm);
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam<double> opt({w.get()}, cfg);
    for (int i = 0; i < 100; ++i) {
        GraphD g;
        auto* loss = g.sum_all(g.square(w.get()));
        g.backward(loss);
        opt.step();
    }
    double n2 = 0;
    for (auto v : w->val) n2 += v * v;
    CHECK(std::sqrt(n2) < 1e-2);
}

TEST_CASE("non-finite gradient is rejected with the parameter name") {
    auto p = make_param<double>({2}, "blockA.w");
    p->val = {1.0, 1.0};
    p->grad = {0.1, std::nan("")};
    Adam<double> opt({p.get()}, {});
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("blockA.w"), std::runtime_error);
}

TEST_CASE("decoupled weight decay shrinks weights even with zero gradient") {
    auto p = make_param<double>({1}, "p");
    p->val = {1.0};
    p->grad = {0.0};
    AdamConfig cfg;
    cfg.lr = 0.5;
    cfg.weight_decay = 0.1;
    Adam<double> opt({p.get()}, cfg);
    opt.step();
    CHECK(p->val[0] == doctest::Approx(1.0 - 0.5 * 0.1));
}
