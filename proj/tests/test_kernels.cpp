#include <cmath>
#include <vector>

#include "cgt/kernels.hpp"
#include "cgt/rng.hpp"
#include "doctest.h"

using cgt::KernelSpec;
using cgt::Rng;
using cgt::build_kernel;

namespace {

int sign_changes(const std::vector<double>& vecs, int n, int col) {
    int count = 0;
    for (int i = 0; i + 1 < n; ++i)
        if (vecs[size_t(i) * n + col] * vecs[size_t(i + 1) * n + col] < 0) ++count;
    return count;
}

}  // namespace

TEST_CASE("cholesky factor reconstructs the matrix and rejects non-PD input") {
    Rng rng(50);
    int n = 8;
    std::vector<double> b(size_t(n) * n);
    for (auto& v : b) v = rng.uniform(-1, 1);
    std::vector<double> a(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) a[size_t(i) * n + j] += b[size_t(k) * n + i] * b[size_t(k) * n + j];
            if (i == j) a[size_t(i) * n + j] += 0.5;
        }
    auto l = cgt::cholesky_lower(a, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double rec = 0;
            for (int k = 0; k < n; ++k) rec += l[size_t(i) * n + k] * l[size_t(j) * n + k];
            CHECK(rec == doctest::Approx(a[size_t(i) * n + j]).epsilon(1e-10));
        }
    std::vector<double> neg = {1.0, 0.0, 0.0, -2.0};
    CHECK_THROWS_WITH_AS((void)cgt::cholesky_lower(neg, 2), doctest::Contains("pivot 1"),
                         cgt::ShapeError);
}

TEST_CASE("spd_solve solves against explicit residual") {
    Rng rng(51);
    int n = 6, nrhs = 3;
    std::vector<double> a(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double v = rng.uniform(-1, 1);
            a[size_t(i) * n + j] = v;
            a[size_t(j) * n + i] = v;
        }
    for (int i = 0; i < n; ++i) a[size_t(i) * n + i] += 4.0;
    std::vector<double> b(size_t(n) * nrhs);
    for (auto& v : b) v = rng.uniform(-1, 1);
    auto x = cgt::spd_solve(a, n, b, nrhs);
    for (int i = 0; i < n; ++i)
        for (int r = 0; r < nrhs; ++r) {
            double ax = 0;
            for (int k = 0; k < n; ++k) ax += a[size_t(i) * n + k] * x[size_t(k) * nrhs + r];
            CHECK(ax == doctest::Approx(b[size_t(i) * nrhs + r]).epsilon(1e-10));
        }
}

TEST_CASE("jacobi eigensolver returns ascending orthonormal eigenpairs") {
    Rng rng(52);
    int n = 8;
    std::vector<double> a(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double v = rng.uniform(-1, 1);
            a[size_t(i) * n + j] = v;
            a[size_t(j) * n + i] = v;
        }
    std::vector<double> vals, vecs;
    cgt::jacobi_eigen(a, n, vals, vecs);
    for (int j = 0; j + 1 < n; ++j) CHECK(vals[size_t(j)] <= vals[size_t(j + 1)]);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            double av = 0;
            for (int k = 0; k < n; ++k) av += a[size_t(i) * n + k] * vecs[size_t(k) * n + j];
            CHECK(av == doctest::Approx(vals[size_t(j)] * vecs[size_t(i) * n + j]).epsilon(1e-8));
        }
    for (int j1 = 0; j1 < n; ++j1)
        for (int j2 = 0; j2 < n; ++j2) {
            double dot = 0;
            for (int i = 0; i < n; ++i) dot += vecs[size_t(i) * n + j1] * vecs[size_t(i) * n + j2];
            CHECK(dot == doctest::Approx(j1 == j2 ? 1.0 : 0.0).epsilon(1e-8));
        }
}

TEST_CASE("rbf_mix kernel: unit diagonal, symmetry, valid inverse") {
    auto km = build_kernel(KernelSpec::rbf_mix(24, 0.03, 0.1));
    int n = km.n;
    for (int i = 0; i < n; ++i) CHECK(km.k[size_t(i) * n + i] == doctest::Approx(1.0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) CHECK(km.k[size_t(i) * n + j] == km.k[size_t(j) * n + i]);
    double worst = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double e = 0;
            for (int k = 0; k < n; ++k) e += km.k[size_t(i) * n + k] * km.k_inv[size_t(k) * n + j];
            worst = std::max(worst, std::abs(e - (i == j ? 1.0 : 0.0)));
        }
    CHECK(worst < 1e-8);
    CHECK_THROWS_AS((void)build_kernel(KernelSpec::rbf_mix(8, 0.0, 0.1)), cgt::ShapeError);
    CHECK_THROWS_AS((void)build_kernel(KernelSpec::rbf_mix(8, 0.1, 0.0)), cgt::ShapeError);
}

TEST_CASE("fewshot kernel values and long-range limit") {
    auto km = build_kernel(KernelSpec::fewshot(6, 0.5));
    CHECK(km.k[0] == doctest::Approx(1.0 + 0.25));
    CHECK(km.k[size_t(1) * 6 + 3] == doctest::Approx(1.0 + 0.25 * 2.0 / (2.0 * 4.0)));
    CHECK(std::abs(cgt::fewshot_entry(10000, 10000, 1.0) - 1.0) <= 1e-4);
    CHECK_THROWS_AS((void)cgt::fewshot_entry(0, 1, 1.0), cgt::ShapeError);
}

TEST_CASE("custom kernel validation") {
    std::vector<double> asym = {1.0, 0.2, 0.3, 1.0};
    CHECK_THROWS_WITH_AS((void)build_kernel(KernelSpec::custom_matrix(2, asym)),
                         doctest::Contains("symmetric"), cgt::ShapeError);
    std::vector<double> nonpd = {1.0, 2.0, 2.0, 1.0};
    CHECK_THROWS_WITH_AS((void)build_kernel(KernelSpec::custom_matrix(2, nonpd)),
                         doctest::Contains("pivot"), cgt::ShapeError);
    std::vector<double> ok = {2.0, 0.5, 0.5, 2.0};
    auto km = build_kernel(KernelSpec::custom_matrix(2, ok));
    CHECK(km.k == ok);
}

TEST_CASE("identity kernel samples are iid standard normal") {
    std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    auto km = build_kernel(KernelSpec::custom_matrix(3, eye));
    Rng rng(53);
    int draws = 20000;
    std::vector<double> sum(3, 0.0), sum2(3, 0.0), cross(1, 0.0);
    for (int d = 0; d < draws; ++d) {
        auto y = cgt::sample_gp(km, rng, 1);
        for (int t = 0; t < 3; ++t) {
            sum[size_t(t)] += y[size_t(t)];
            sum2[size_t(t)] += y[size_t(t)] * y[size_t(t)];
        }
        cross[0] += y[0] * y[1];
    }
    for (int t = 0; t < 3; ++t) {
        CHECK(std::abs(sum[size_t(t)] / draws) < 3.0 / std::sqrt(double(draws)));
        CHECK(sum2[size_t(t)] / draws ==
              doctest::Approx(1.0).epsilon(3.0 * std::sqrt(2.0 / draws)));
    }
    CHECK(std::abs(cross[0] / draws) < 3.0 / std::sqrt(double(draws)));
}

TEST_CASE("gp sample covariance matches the kernel within 3 SE") {
    auto km = build_kernel(KernelSpec::rbf_mix(6, 0.2, 0.25));
    Rng rng(54);
    int n = 6, draws = 10000;
    std::vector<double> sum(size_t(n) * n, 0.0), sum2(size_t(n) * n, 0.0);
    for (int d = 0; d < draws; ++d) {
        auto y = cgt::sample_gp(km, rng, 1);
        for (int s = 0; s < n; ++s)
            for (int t = 0; t < n; ++t) {
                double p = y[size_t(s)] * y[size_t(t)];
                sum[size_t(s) * n + t] += p;
                sum2[size_t(s) * n + t] += p * p;
            }
    }
    for (int64_t i = 0; i < int64_t(n) * n; ++i) {
        double mean = sum[size_t(i)] / draws;
        double se = std::sqrt(std::max(sum2[size_t(i)] / draws - mean * mean, 0.0) / draws);
        CHECK(std::abs(mean - km.k[size_t(i)]) < 3.0 * se);
    }
}

TEST_CASE("mean-estimation oracle: eps=0 collapses to the pure prior") {
    Rng rng(55);
    auto mc = cgt::mc_covariance_oracle(0.0, 4, 5000, rng);
    for (int64_t i = 0; i < 16; ++i)
        CHECK(std::abs(mc.cov[size_t(i)] - 1.0) < 3.0 * mc.se[size_t(i)]);
}

TEST_CASE("mean-estimation oracle matches the fewshot kernel within 3 SE") {
    Rng rng(56);
    int n = 8;
    auto mc = cgt::mc_covariance_oracle(0.5, n, 20000, rng);
    auto km = build_kernel(KernelSpec::fewshot(n, 0.5));
    for (int64_t i = 0; i < int64_t(n) * n; ++i)
        CHECK(std::abs(mc.cov[size_t(i)] - km.k[size_t(i)]) < 3.0 * mc.se[size_t(i)]);
    CHECK_THROWS_AS((void)cgt::mc_covariance_oracle(0.5, 4, 10, rng), cgt::ShapeError);
}

TEST_CASE("smoother eigenvectors of the inverse kernel have fewer sign changes") {
    int n = 16;
    auto km = build_kernel(KernelSpec::rbf_mix(n, 0.03, 0.1));
    std::vector<double> vals, vecs;
    cgt::jacobi_eigen(km.k_inv, n, vals, vecs);
    CHECK(sign_changes(vecs, n, 0) == 0);
    int prev = 0;
    for (int j = 0; j + 1 < n; ++j) {
        double gap = vals[size_t(j + 1)] - vals[size_t(j)];
        double scale = std::max(std::abs(vals[size_t(j + 1)]), 1.0);
        if (gap / scale < 1e-6) break;
        int cur = sign_changes(vecs, n, j + 1);
        CHECK(cur >= prev);
        prev = cur;
    }
}
