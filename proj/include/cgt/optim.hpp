#pragma once

#include <cstdint>
#include <vector>

#include "cgt/tensor.hpp"

namespace cgt {

// Linear ramp 0 -> peak over `warmup` steps, then cosine decay peak -> 0 at
// `total`. Throws ShapeError on warmup > total or step outside [0, total].
double cosine_lr(int64_t step, int64_t warmup, int64_t total, double peak);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam with decoupled weight decay over an externally owned parameter set.
// A parameter whose grad buffer is empty is treated as having zero gradient.
template <class S>
class Adam {
public:
    Adam(std::vector<Node<S>*> params, AdamConfig cfg);
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t steps() const { return t_; }
    void step();

private:
    std::vector<Node<S>*> params_;
    std::vector<std::vector<S>> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace cgt
