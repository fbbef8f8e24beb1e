#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cgt/rng.hpp"
#include "cgt/tensor.hpp"

namespace gradcheck {

// Central finite differences against the recorded backward pass. `build`
// must construct the scalar loss from the given graph and the leaf values
// as they are at call time; it is re-invoked for every perturbed coordinate.
template <class F>
double max_rel_error(const std::vector<cgt::Node<double>*>& leaves, F build, double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        cgt::GraphD g;
        cgt::Node<double>* loss = build(g);
        g.backward(loss);
    }
    for (auto* l : leaves) analytic.push_back(l->grad);

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        cgt::Node<double>* l = leaves[li];
        for (size_t i = 0; i < l->val.size(); ++i) {
            double keep = l->val[i];
            l->val[i] = keep + h;
            double fp;
            {
                cgt::GraphD g;
                fp = build(g)->scalar();
            }
            l->val[i] = keep - h;
            double fm;
            {
                cgt::GraphD g;
                fm = build(g)->scalar();
            }
            l->val[i] = keep;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[li].empty() ? 0.0 : analytic[li][i];
            double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline void fill_uniform(cgt::Node<double>* n, cgt::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : n->val) v = rng.uniform(lo, hi);
}

}  // namespace gradcheck
