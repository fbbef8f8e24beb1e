#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cgt/rng.hpp"
#include "cgt/tensor.hpp"

namespace cgt {

// ------------------------------------------------------------ tokenizers

// Char-level vocabulary for the arithmetic sequences: digits, operators,
// separators. 16 symbols total.
namespace icl_vocab {
constexpr int kSize = 16;
int encode(char c);
char decode(int t);
std::vector<int> tokenize(std::string_view text);
std::string detokenize(const std::vector<int>& tokens);
}  // namespace icl_vocab

namespace byte_vocab {
constexpr int kSize = 256;
std::vector<int> tokenize(std::string_view text);
std::string detokenize(const std::vector<int>& tokens);
}  // namespace byte_vocab

// ------------------------------------------------------------ arithmetic ICL

struct SyntheticTaskSpec {
    int n_tasks = 2;
    int n_ex = 4;
    int d = 3;  // digits per operand
};

// C = truncate-toward-zero(a*A + b*B)
long long truncated_combination(double a, double b, long long A, long long B);

// Sign character plus d+2 zero-padded digits, e.g. +00035.
std::string render_answer(long long c, int d);

struct IclExample {
    long long A = 0, B = 0, C = 0;
    int start = 0;         // first token of "AAA*..."
    int answer_start = 0;  // token index of the sign
    int answer_len = 0;    // d+2 digits plus sign
    int end = 0;           // one past '|'
};

struct IclTask {
    double a = 0, b = 0;
    std::vector<IclExample> examples;
    int start = 0, end = 0;  // [start, end) includes trailing '#'
    int e1_begin = 0, e1_end = 0;  // first two examples
    int e2_begin = 0, e2_end = 0;  // last two examples
};

struct IclSequence {
    std::vector<int> tokens;
    std::vector<IclTask> tasks;
};

IclSequence gen_icl_sequence(const SyntheticTaskSpec& spec, Rng& rng);

// Tokens per example / per task for a given digit width.
int icl_example_len(int d);
int icl_task_len(const SyntheticTaskSpec& spec);

// Least-squares fit of (a, b) from a task's examples; the oracle that the
// task is identifiable from its data.
struct AbFit {
    double a = 0, b = 0;
    double max_residual = 0;
};
AbFit fit_task_ab(const IclTask& task);

// ------------------------------------------------------------ linear regression

struct LinearRegSpec {
    int d_in = 16;
    int d_out = 1;
    int n_pairs = 40;
    double eps = 0.1;
};

struct LinRegSequence {
    int d_in = 0, d_out = 0, n_pairs = 0, width = 0;
    std::vector<double> inputs;   // [2*n_pairs, width], zero-padded
    std::vector<double> targets;  // [n_pairs, d_out], target at each x position
    std::vector<double> u;        // [d_out, d_in]
    std::vector<double> bias;     // [d_out]
};

// width = model input size d_x; x rows carry x_k in dims [0,d_in),
// y rows carry y_k in dims [0,d_out).
LinRegSequence gen_linreg_sequence(const LinearRegSpec& spec, int width, Rng& rng);

// Bayes-optimal ridge for unit-normal weights and noise eps: fits
// [X 1] w = Y with lambda = eps^2 on the diagonal. Returns [(d_in+1), d_out].
std::vector<double> ridge_fit(const std::vector<double>& x, const std::vector<double>& y, int k,
                              int d_in, int d_out, double lambda);
std::vector<double> ridge_predict(const std::vector<double>& w, const double* x, int d_in,
                                  int d_out);

// ------------------------------------------------------------ text mixture

struct TextMixSpec {
    std::vector<std::string> corpus_paths;
    int l_max = 512;
    int l_start = 256;
    int l_finish = 384;
    int n_excerpts = 2;
};

struct TextMixSequence {
    std::vector<int> tokens;
    std::vector<int> joins;  // token index where each later excerpt begins
};

TextMixSequence gen_text_mixture(const TextMixSpec& spec, Rng& rng);

}  // namespace cgt
