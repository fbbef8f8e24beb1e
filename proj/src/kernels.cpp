#include "cgt/kernels.hpp"

#include <cmath>
#include <string>

namespace cgt {

std::vector<double> cholesky_lower(const std::vector<double>& a, int n) {
    if (int64_t(a.size()) != int64_t(n) * n)
        throw ShapeError("cholesky: matrix size " + std::to_string(a.size()) + " vs n " +
                         std::to_string(n));
    std::vector<double> l(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = a[size_t(i) * n + j];
            for (int k = 0; k < j; ++k) sum -= l[size_t(i) * n + k] * l[size_t(j) * n + k];
            if (i == j) {
                if (sum <= 0.0)
                    throw ShapeError("cholesky: matrix not positive definite at pivot " +
                                     std::to_string(i));
                l[size_t(i) * n + j] = std::sqrt(sum);
            } else {
                l[size_t(i) * n + j] = sum / l[size_t(j) * n + j];
            }
        }
    }
    return l;
}

namespace {

// Solves L * y = b in place.
void forward_sub(const std::vector<double>& l, int n, double* b) {
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int k = 0; k < i; ++k) s -= l[size_t(i) * n + k] * b[k];
        b[i] = s / l[size_t(i) * n + i];
    }
}

// Solves L^T * x = y in place.
void backward_sub(const std::vector<double>& l, int n, double* b) {
    for (int i = n - 1; i >= 0; --i) {
        double s = b[i];
        for (int k = i + 1; k < n; ++k) s -= l[size_t(k) * n + i] * b[k];
        b[i] = s / l[size_t(i) * n + i];
    }
}

}  // namespace

std::vector<double> spd_inverse_from_chol(const std::vector<double>& chol, int n) {
    std::vector<double> inv(size_t(n) * n, 0.0);
    std::vector<double> col(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        std::fill(col.begin(), col.end(), 0.0);
        col[size_t(j)] = 1.0;
        forward_sub(chol, n, col.data());
        backward_sub(chol, n, col.data());
        for (int i = 0; i < n; ++i) inv[size_t(i) * n + j] = col[size_t(i)];
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < i; ++j) {
            double v = 0.5 * (inv[size_t(i) * n + j] + inv[size_t(j) * n + i]);
            inv[size_t(i) * n + j] = v;
            inv[size_t(j) * n + i] = v;
        }
    return inv;
}

std::vector<double> spd_solve(const std::vector<double>& a, int n, const std::vector<double>& b,
                              int nrhs) {
    if (int64_t(b.size()) != int64_t(n) * nrhs)
        throw ShapeError("spd_solve: rhs size " + std::to_string(b.size()) + " vs n*nrhs " +
                         std::to_string(int64_t(n) * nrhs));
    auto l = cholesky_lower(a, n);
    std::vector<double> x = b;
    std::vector<double> col(static_cast<size_t>(n));
    for (int r = 0; r < nrhs; ++r) {
        for (int i = 0; i < n; ++i) col[size_t(i)] = x[size_t(i) * nrhs + r];
        forward_sub(l, n, col.data());
        backward_sub(l, n, col.data());
        for (int i = 0; i < n; ++i) x[size_t(i) * nrhs + r] = col[size_t(i)];
    }
    return x;
}

void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) eigvecs[size_t(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[size_t(p) * n + q] * a[size_t(p) * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = a[size_t(p) * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[size_t(p) * n + p], aqq = a[size_t(q) * n + q];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a[size_t(k) * n + p], akq = a[size_t(k) * n + q];
                    a[size_t(k) * n + p] = c * akp - s * akq;
                    a[size_t(k) * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a[size_t(p) * n + k], aqk = a[size_t(q) * n + k];
                    a[size_t(p) * n + k] = c * apk - s * aqk;
                    a[size_t(q) * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = eigvecs[size_t(k) * n + p], vkq = eigvecs[size_t(k) * n + q];
                    eigvecs[size_t(k) * n + p] = c * vkp - s * vkq;
                    eigvecs[size_t(k) * n + q] = s * vkp + c * vkq;
                }
            }
    }
    eigvals.resize(size_t(n));
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        eigvals[size_t(i)] = a[size_t(i) * n + i];
        order[size_t(i)] = i;
    }
    std::sort(order.begin(), order.end(),
              [&](int x, int y) { return eigvals[size_t(x)] < eigvals[size_t(y)]; });
    std::vector<double> vals(static_cast<size_t>(n));
    std::vector<double> vecs(size_t(n) * n);
    for (int j = 0; j < n; ++j) {
        vals[size_t(j)] = eigvals[size_t(order[size_t(j)])];
        for (int i = 0; i < n; ++i)
            vecs[size_t(i) * n + j] = eigvecs[size_t(i) * n + order[size_t(j)]];
    }
    eigvals = std::move(vals);
    eigvecs = std::move(vecs);
}

KernelSpec KernelSpec::rbf_mix(int n, double nu, double lambda_frac) {
    KernelSpec s;
    s.kind = Kind::RbfMix;
    s.n = n;
    s.nu = nu;
    s.lambda_frac = lambda_frac;
    return s;
}

KernelSpec KernelSpec::fewshot(int n, double eps) {
    KernelSpec s;
    s.kind = Kind::Fewshot;
    s.n = n;
    s.eps = eps;
    return s;
}

KernelSpec KernelSpec::custom_matrix(int n, std::vector<double> k) {
    KernelSpec s;
    s.kind = Kind::Custom;
    s.n = n;
    s.custom = std::move(k);
    return s;
}

double fewshot_entry(int s, int t, double eps) {
    if (s < 1 || t < 1)
        throw ShapeError("fewshot_entry: indices are 1-based, got (" + std::to_string(s) + "," +
                         std::to_string(t) + ")");
    double sd = double(s), td = double(t);
    return 1.0 + eps * eps * std::min(sd, td) / (sd * td);
}

KernelMatrix build_kernel(const KernelSpec& spec) {
    if (spec.n < 1) throw ShapeError("build_kernel: n must be >= 1, got " + std::to_string(spec.n));
    int n = spec.n;
    KernelMatrix km;
    km.n = n;
    km.k.assign(size_t(n) * n, 0.0);
    switch (spec.kind) {
        case KernelSpec::Kind::RbfMix: {
            if (!(spec.nu > 0.0 && spec.nu <= 1.0))
                throw ShapeError("build_kernel: rbf_mix needs 0 < nu <= 1, got " +
                                 std::to_string(spec.nu));
            if (!(spec.lambda_frac > 0.0))
                throw ShapeError("build_kernel: rbf_mix needs lambda_frac > 0, got " +
                                 std::to_string(spec.lambda_frac));
            double lambda = spec.lambda_frac * n;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    double d = double(i - j);
                    double rbf = std::exp(-d * d / (2.0 * lambda * lambda));
                    km.k[size_t(i) * n + j] = (i == j ? spec.nu : 0.0) + (1.0 - spec.nu) * rbf;
                }
            break;
        }
        case KernelSpec::Kind::Fewshot: {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    km.k[size_t(i) * n + j] = fewshot_entry(i + 1, j + 1, spec.eps);
            break;
        }
        case KernelSpec::Kind::Custom: {
            if (int64_t(spec.custom.size()) != int64_t(n) * n)
                throw ShapeError("build_kernel: custom matrix size " +
                                 std::to_string(spec.custom.size()) + " vs n^2 " +
                                 std::to_string(int64_t(n) * n));
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < i; ++j) {
                    double d = std::abs(spec.custom[size_t(i) * n + j] -
                                        spec.custom[size_t(j) * n + i]);
                    if (d > 1e-12)
                        throw ShapeError("build_kernel: custom matrix not symmetric at (" +
                                         std::to_string(i) + "," + std::to_string(j) + ")");
                }
            km.k = spec.custom;
            break;
        }
    }
    km.chol = cholesky_lower(km.k, n);
    km.k_inv = spd_inverse_from_chol(km.chol, n);
    return km;
}

std::vector<double> sample_gp(const KernelMatrix& kernel, Rng& rng, int dims) {
    int n = kernel.n;
    std::vector<double> eps(size_t(n) * dims);
    for (auto& e : eps) e = rng.normal();
    std::vector<double> y(size_t(n) * dims, 0.0);
    for (int t = 0; t < n; ++t)
        for (int j = 0; j <= t; ++j) {
            double l = kernel.chol[size_t(t) * n + j];
            for (int i = 0; i < dims; ++i)
                y[size_t(t) * dims + i] += l * eps[size_t(j) * dims + i];
        }
    return y;
}

McCovariance mc_covariance_oracle(double eps, int n, int n_draws, Rng& rng) {
    if (n_draws < 1000)
        throw ShapeError("mc_covariance_oracle: need n_draws >= 1000, got " +
                         std::to_string(n_draws));
    McCovariance out;
    out.n = n;
    std::vector<double> sum(size_t(n) * n, 0.0), sum2(size_t(n) * n, 0.0);
    std::vector<double> ahat(static_cast<size_t>(n));
    for (int d = 0; d < n_draws; ++d) {
        double alpha = rng.normal();
        double run = 0.0;
        for (int s = 0; s < n; ++s) {
            run += alpha + eps * rng.normal();
            ahat[size_t(s)] = run / double(s + 1);
        }
        for (int s = 0; s < n; ++s)
            for (int t = 0; t < n; ++t) {
                double p = ahat[size_t(s)] * ahat[size_t(t)];
                sum[size_t(s) * n + t] += p;
                sum2[size_t(s) * n + t] += p * p;
            }
    }
    out.cov.resize(size_t(n) * n);
    out.se.resize(size_t(n) * n);
    for (int64_t i = 0; i < int64_t(n) * n; ++i) {
        double mean = sum[size_t(i)] / n_draws;
        double var = sum2[size_t(i)] / n_draws - mean * mean;
        out.cov[size_t(i)] = mean;
        out.se[size_t(i)] = std::sqrt(std::max(var, 0.0) / n_draws);
    }
    return out;
}

}  // namespace cgt
