#include "cgt/optim.hpp"

#include <cmath>

namespace cgt {

double cosine_lr(int64_t step, int64_t warmup, int64_t total, double peak) {
    if (warmup > total)
        throw ShapeError("cosine_lr: warmup " + std::to_string(warmup) + " > total " +
                         std::to_string(total));
    if (step < 0 || step > total)
        throw ShapeError("cosine_lr: step " + std::to_string(step) + " outside [0," +
                         std::to_string(total) + "]");
    if (step < warmup) return peak * double(step) / double(warmup);
    if (total == warmup) return peak;
    double frac = double(step - warmup) / double(total - warmup);
    return peak * 0.5 * (1.0 + std::cos(M_PI * frac));
}

template <class S>
Adam<S>::Adam(std::vector<Node<S>*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i]->val.size(), S(0));
        v_[i].assign(params_[i]->val.size(), S(0));
    }
}

template <class S>
void Adam<S>::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Node<S>* p = params_[pi];
        bool has_grad = !p->grad.empty();
        for (size_t i = 0; i < p->val.size(); ++i) {
            double g = has_grad ? double(p->grad[i]) : 0.0;
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient in parameter '" +
                                         p->name + "'");
            double m = cfg_.beta1 * double(m_[pi][i]) + (1.0 - cfg_.beta1) * g;
            double v = cfg_.beta2 * double(v_[pi][i]) + (1.0 - cfg_.beta2) * g * g;
            m_[pi][i] = S(m);
            v_[pi][i] = S(v);
            double update = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            double decay = cfg_.lr * cfg_.weight_decay * double(p->val[i]);
            p->val[i] = S(double(p->val[i]) - update - decay);
        }
    }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace cgt
