#pragma once

#include <memory>
#include <vector>

#include "cgt/model.hpp"

namespace cgt {

// A context-specialized model: the per-slot low-rank modulations implied by a
// fixed context vector are folded into the stage-2 projection weights, and
// the modulator bank is zeroed so the folded network is a plain transformer.
// Run it with a zero override (frozen_forward with the stored context works
// too and costs the same).
template <class S>
struct Specialized {
    std::unique_ptr<Model<S>> model;
    std::vector<S> context;  // dim_y values baked into the weights
};

// Deterministic pass reading the context embedding at a 1-based position:
// returns [batch * dim_y] (the mean when the model is variational).
template <class S>
std::vector<S> capture_context(const Model<S>& m, const TokenBatch& b, int position);
template <class S>
std::vector<S> capture_context(const Model<S>& m, const VecBatch<S>& b, int position);

// Runs the model with the y pathway replaced by a fixed context: dim_y values
// (shared across the batch) or batch * dim_y (one per sequence).
template <class S>
ForwardResult<S> frozen_forward(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                                const std::vector<S>& context, int pos_offset = 0);
template <class S>
ForwardResult<S> frozen_forward(Graph<S>& g, const Model<S>& m, const VecBatch<S>& b,
                                const std::vector<S>& context, int pos_offset = 0);

// Folds the context into the stage-2 weights. For each slot the mixed factors
// L(y), R(y) turn the pre-projection modulation into
//   W' = W + R_x (L^T W),   b' = b + r_b (L^T W)
// on the attention kqv and MLP first-layer projections. The result matches
// frozen_forward on every suffix and never touches y at run time.
template <class S>
Specialized<S> fold(const Model<S>& m, const std::vector<S>& context);

// Per-position exponential moving average probe: runs the dynamic pass, forms
// ybar_s = gamma * y_s + (1 - gamma) * ybar_{s-1} (ybar_1 = y_1), and re-runs
// with ybar as a per-position override. gamma = 1 reproduces the dynamic
// model; gamma -> 0 pins the context at position 1.
template <class S>
ForwardResult<S> moving_average_run(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                                    double gamma);
template <class S>
ForwardResult<S> moving_average_run(Graph<S>& g, const Model<S>& m, const VecBatch<S>& b,
                                    double gamma);

}  // namespace cgt
