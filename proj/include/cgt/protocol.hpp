#pragma once

#include <vector>

#include "cgt/analysis.hpp"
#include "cgt/datasets.hpp"
#include "cgt/model.hpp"
#include "cgt/objectives.hpp"

namespace cgt {

// Per-sequence context traces [seq, dim_y] from deterministic dynamic passes
// (the mean when the model is variational).
template <class S>
std::vector<std::vector<double>> y_traces(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                          int batch_size = 16);

// Dynamic run whose y pathway is clamped after the 1-based position s: the
// modulators see the dynamic y_t for t <= s and y_s for every t > s.
template <class S>
ForwardResult<S> clamped_forward(Graph<S>& g, const Model<S>& m, const TokenBatch& b, int s);

// Accuracy of the clamp-after-s protocol on a segment, freezing each task at
// the end of its first two examples (full context kept in the input).
template <class S>
AccuracyReport icl_frozen_accuracy(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                   int batch_size = 16);

// Examples-removed specialization: per task, the first two examples run in
// isolation, the context at their last token is captured, and the remaining
// examples are scored as a fresh rebased suffix with that frozen context.
template <class S>
AccuracyReport icl_specialized_accuracy(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                        int batch_size = 16);

// Variation of the context trace per (sequence, task) over the task's
// first-two / last-two example segments.
template <class S>
std::vector<double> icl_variation(const Model<S>& m, const std::vector<IclSequence>& seqs,
                                  int batch_size = 16);

// One probe row per last-two-example position of every task: the context
// vector and the task multipliers (a, b).
struct ProbeData {
    std::vector<double> y;  // [rows, dim_y]
    std::vector<double> t;  // [rows, 2]
    int rows = 0;
};
template <class S>
ProbeData icl_probe_data(const Model<S>& m, const std::vector<IclSequence>& seqs,
                         int batch_size = 16);

// Specialize-at-k-pairs regression error against the closed-form ridge
// oracle fitted on the same k pairs (lambda = eps^2), both evaluated on
// pairs (freeze_pairs, n_pairs]. Mean squared L2 per prediction.
struct LinregReport {
    double model_mse = 0;
    double ridge_mse = 0;
    int n_terms = 0;
};
template <class S>
LinregReport linreg_specialized_error(const Model<S>& m, const LinearRegSpec& spec,
                                      const std::vector<LinRegSequence>& seqs, int freeze_pairs,
                                      int batch_size = 8);

// Batch assembly shared by the trainer and the evaluators.
TokenBatch pack_icl(const std::vector<IclSequence>& seqs, size_t lo, size_t hi);
template <class S>
ContinuousBatch<S> pack_linreg(const std::vector<LinRegSequence>& seqs, size_t lo, size_t hi);

}  // namespace cgt
