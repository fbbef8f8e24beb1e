#pragma once

#include <vector>

#include "cgt/rng.hpp"
#include "cgt/tensor.hpp"

namespace cgt {

// Dense double-precision helpers for small SPD systems (row-major n x n).
std::vector<double> cholesky_lower(const std::vector<double>& a, int n);
std::vector<double> spd_inverse_from_chol(const std::vector<double>& chol, int n);
std::vector<double> spd_solve(const std::vector<double>& a, int n,
                              const std::vector<double>& b, int nrhs);

// Cyclic Jacobi eigensolver for symmetric matrices. Eigenvalues come back
// ascending; eigvecs column j is the eigenvector of eigvals[j].
void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs);

struct KernelSpec {
    enum class Kind { RbfMix, Fewshot, Custom };
    Kind kind = Kind::RbfMix;
    int n = 0;
    double nu = 0.03;
    double lambda_frac = 0.1;
    double eps = 1.0;
    std::vector<double> custom;

    static KernelSpec rbf_mix(int n, double nu, double lambda_frac);
    static KernelSpec fewshot(int n, double eps);
    static KernelSpec custom_matrix(int n, std::vector<double> k);
};

struct KernelMatrix {
    int n = 0;
    std::vector<double> k;      // covariance
    std::vector<double> k_inv;  // precomputed inverse
    std::vector<double> chol;   // lower-triangular factor of k
};

// 1-based indices; entry of the mean-estimation covariance kernel.
double fewshot_entry(int s, int t, double eps);

KernelMatrix build_kernel(const KernelSpec& spec);

// One zero-mean draw per dimension: returns [n*dims], y[t*dims + i].
std::vector<double> sample_gp(const KernelMatrix& kernel, Rng& rng, int dims);

struct McCovariance {
    int n = 0;
    std::vector<double> cov;  // empirical <a_s a_t> of running-mean estimates
    std::vector<double> se;   // standard error of each entry
};

// Simulates mean estimation from noisy observations: alpha ~ N(0,1),
// rho_s = alpha + eps*beta_s, estimate a_s = mean(rho_1..rho_s). The
// resulting covariance is the independent oracle for the fewshot kernel.
McCovariance mc_covariance_oracle(double eps, int n, int n_draws, Rng& rng);

}  // namespace cgt
