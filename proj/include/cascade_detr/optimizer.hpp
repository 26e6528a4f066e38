#pragma once

#include <vector>

#include "cascade_detr/config.hpp"
#include "cascade_detr/model.hpp"

namespace cdetr {

// Adaptive moments with decoupled weight decay. Two step-size groups: the
// encoder stub and everything else.
class AdamW {
public:
    AdamW(std::vector<Parameter>& params, const OptimizerConfig& cfg);

    // Scales both group step sizes (used for the scheduled drop).
    void set_lr_scale(double scale) { lr_scale_ = scale; }
    double lr_scale() const { return lr_scale_; }

    // Global L2 norm of all gradients (before clipping).
    double grad_norm() const;

    // Clips, applies one update, and zeroes gradients. Returns the pre-clip norm.
    double step();

    void zero_grad();
    std::size_t steps() const { return t_; }

private:
    std::vector<Parameter>* params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    double lr_scale_ = 1.0;
    std::size_t t_ = 0;
};

}  // namespace cdetr
