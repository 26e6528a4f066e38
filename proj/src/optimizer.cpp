#include "cascade_detr/optimizer.hpp"

#include <cmath>

namespace cdetr {

AdamW::AdamW(std::vector<Parameter>& params, const OptimizerConfig& cfg) : params_(&params), cfg_(cfg) {
    for (const Parameter& p : params) {
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
    }
}

double AdamW::grad_norm() const {
    double sq = 0.0;
    for (const Parameter& p : *params_) {
        if (!p.value.has_grad()) continue;
        for (double g : p.value.grad()) sq += g * g;
    }
    return std::sqrt(sq);
}

double AdamW::step() {
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw Error(ErrorCode::divergence, "non-finite gradient norm");
    const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_->size(); ++k) {
        Parameter& p = (*params_)[k];
        const double lr = (p.encoder ? cfg_.lr_encoder : cfg_.lr) * lr_scale_;
        std::span<double> w = p.value.mutable_data();
        const bool has = p.value.has_grad();
        const std::span<const double> g = has ? p.value.grad() : std::span<const double>{};
        std::vector<double>& m = m_[k];
        std::vector<double>& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? g[i] * clip : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            w[i] *= 1.0 - lr * cfg_.weight_decay;
            w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }
    zero_grad();
    return norm;
}

void AdamW::zero_grad() {
    for (Parameter& p : *params_) p.value.zero_grad();
}

}  // namespace cdetr
