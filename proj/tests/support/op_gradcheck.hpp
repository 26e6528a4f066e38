#pragma once

// Randomized central-difference checks for every registered tensor op.
// Shared by the unit suite and the acceptance gate.

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cascade_detr/geometry.hpp"
#include "cascade_detr/tensor.hpp"
#include "support/random.hpp"

namespace cdetr::testing {

struct OpCheckResult {
    std::string op;
    int trials = 0;
    double worst_error = 0.0;
};

// Builds (inputs, fn) for one random trial of an op.
using TrialFactory = std::function<std::pair<std::vector<Tensor>, ScalarFn>(std::mt19937_64&)>;

// Projects an op's output to a scalar with fixed random weights so that every
// output entry contributes a distinct gradient.
inline ScalarFn scalarized(std::function<Tensor(const std::vector<Tensor>&)> op, std::vector<double> weights) {
    return [op = std::move(op), weights = std::move(weights)](const std::vector<Tensor>& in) {
        return weighted_sum(op(in), weights);
    };
}

inline std::vector<double> random_weights(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<double> w(n);
    for (double& x : w) x = d(rng);
    return w;
}

// Output size is only known after one forward evaluation.
inline std::pair<std::vector<Tensor>, ScalarFn> make_trial(std::mt19937_64& rng, std::vector<Tensor> inputs,
                                                           std::function<Tensor(const std::vector<Tensor>&)> op) {
    std::size_t n = 0;
    {
        NoGradGuard guard;
        n = op(inputs).numel();
    }
    return {std::move(inputs), scalarized(std::move(op), random_weights(rng, n))};
}

inline std::vector<std::pair<std::string, TrialFactory>> op_trial_factories() {
    using V = std::vector<Tensor>;
    std::vector<std::pair<std::string, TrialFactory>> f;

    auto same_shape_binary = [](auto op) {
        return [op](std::mt19937_64& rng) {
            Shape s{random_size(rng, 1, 4), random_size(rng, 1, 5)};
            return make_trial(rng, V{random_tensor(rng, s), random_tensor(rng, s)},
                              [op](const V& in) { return op(in[0], in[1]); });
        };
    };
    auto unary = [](auto op, double lo = -1.0, double hi = 1.0) {
        return [op, lo, hi](std::mt19937_64& rng) {
            Shape s{random_size(rng, 1, 4), random_size(rng, 1, 5)};
            return make_trial(rng, V{random_tensor(rng, s, lo, hi)}, [op](const V& in) { return op(in[0]); });
        };
    };

    f.emplace_back("add", same_shape_binary([](const Tensor& a, const Tensor& b) { return add(a, b); }));
    f.emplace_back("sub", same_shape_binary([](const Tensor& a, const Tensor& b) { return sub(a, b); }));
    f.emplace_back("mul", same_shape_binary([](const Tensor& a, const Tensor& b) { return mul(a, b); }));
    f.emplace_back("scale", unary([](const Tensor& a) { return scale(a, -1.7); }));
    f.emplace_back("add_scalar", unary([](const Tensor& a) { return add_scalar(a, 0.3); }));
    f.emplace_back("relu", unary([](const Tensor& a) { return relu(a); }));
    f.emplace_back("sigmoid", unary([](const Tensor& a) { return sigmoid(a); }, -4.0, 4.0));
    f.emplace_back("square", unary([](const Tensor& a) { return square(a); }));
    f.emplace_back("abs", unary([](const Tensor& a) { return abs(a); }));
    f.emplace_back("huber", unary([](const Tensor& a) { return huber(a, 0.5); }));
    f.emplace_back("log", unary([](const Tensor& a) { return log(a); }, 0.5, 2.0));
    f.emplace_back("softmax", unary([](const Tensor& a) { return softmax(a); }, -3.0, 3.0));
    f.emplace_back("log_softmax", unary([](const Tensor& a) { return log_softmax(a); }, -3.0, 3.0));
    f.emplace_back("transpose", unary([](const Tensor& a) { return transpose(a); }));
    f.emplace_back("sum", unary([](const Tensor& a) { return sum(a); }));
    f.emplace_back("mean", unary([](const Tensor& a) { return mean(a); }));

    f.emplace_back("add_row", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 4), c = random_size(rng, 1, 5);
        return make_trial(rng, V{random_tensor(rng, {r, c}), random_tensor(rng, {c})},
                          [](const V& in) { return add_row(in[0], in[1]); });
    });
    f.emplace_back("matmul", [](std::mt19937_64& rng) {
        const std::size_t n = random_size(rng, 1, 4), k = random_size(rng, 1, 5), m = random_size(rng, 1, 4);
        return make_trial(rng, V{random_tensor(rng, {n, k}), random_tensor(rng, {k, m})},
                          [](const V& in) { return matmul(in[0], in[1]); });
    });
    f.emplace_back("matmul_nt", [](std::mt19937_64& rng) {
        const std::size_t n = random_size(rng, 1, 4), k = random_size(rng, 1, 5), m = random_size(rng, 1, 4);
        return make_trial(rng, V{random_tensor(rng, {n, k}), random_tensor(rng, {m, k})},
                          [](const V& in) { return matmul_nt(in[0], in[1]); });
    });
    f.emplace_back("linear", [](std::mt19937_64& rng) {
        const std::size_t n = random_size(rng, 1, 4), in_dim = random_size(rng, 1, 5), out = random_size(rng, 1, 4);
        return make_trial(rng,
                          V{random_tensor(rng, {n, in_dim}), random_tensor(rng, {out, in_dim}), random_tensor(rng, {out})},
                          [](const V& in) { return linear(in[0], in[1], in[2]); });
    });
    f.emplace_back("masked_softmax", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 4), c = random_size(rng, 1, 6);
        AttentionMask mask = random_mask(rng, r, c);
        return make_trial(rng, V{random_tensor(rng, {r, c}, -3.0, 3.0)},
                          [mask](const V& in) { return masked_softmax(in[0], mask); });
    });
    f.emplace_back("layer_norm", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 4), d = random_size(rng, 2, 6);
        return make_trial(rng,
                          V{random_tensor(rng, {r, d}), random_tensor(rng, {d}, 0.5, 1.5), random_tensor(rng, {d})},
                          [](const V& in) { return layer_norm(in[0], in[1], in[2]); });
    });
    f.emplace_back("conv2d", [](std::mt19937_64& rng) {
        const std::size_t c = random_size(rng, 1, 3), o = random_size(rng, 1, 3);
        const std::size_t h = random_size(rng, 3, 6), w = random_size(rng, 3, 6);
        const std::size_t stride = random_size(rng, 1, 2);
        const std::size_t k = random_size(rng, 0, 1) ? 3 : 1;
        const std::size_t pad = k == 3 ? 1 : 0;
        return make_trial(rng,
                          V{random_tensor(rng, {c, h, w}), random_tensor(rng, {o, c, k, k}), random_tensor(rng, {o})},
                          [stride, pad](const V& in) { return conv2d(in[0], in[1], in[2], stride, pad); });
    });
    f.emplace_back("reshape", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 4), c = random_size(rng, 1, 4);
        return make_trial(rng, V{random_tensor(rng, {r, c})}, [c, r](const V& in) { return reshape(in[0], {c * r}); });
    });
    f.emplace_back("slice_cols", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 4), c = random_size(rng, 2, 6);
        const std::size_t b = random_size(rng, 0, c - 1), e = random_size(rng, b + 1, c);
        return make_trial(rng, V{random_tensor(rng, {r, c})}, [b, e](const V& in) { return slice_cols(in[0], b, e); });
    });
    f.emplace_back("concat_cols", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 4);
        return make_trial(rng,
                          V{random_tensor(rng, {r, random_size(rng, 1, 3)}), random_tensor(rng, {r, random_size(rng, 1, 3)})},
                          [](const V& in) { return concat_cols({in[0], in[1]}); });
    });
    f.emplace_back("gather_rows", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 5), c = random_size(rng, 1, 4);
        std::vector<std::size_t> rows(random_size(rng, 1, 6));
        for (auto& x : rows) x = random_size(rng, 0, r - 1);
        return make_trial(rng, V{random_tensor(rng, {r, c})}, [rows](const V& in) { return gather_rows(in[0], rows); });
    });
    f.emplace_back("pick", [](std::mt19937_64& rng) {
        const std::size_t r = random_size(rng, 1, 5), c = random_size(rng, 1, 4);
        std::vector<std::size_t> rows(random_size(rng, 1, 6)), cols(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i] = random_size(rng, 0, r - 1);
            cols[i] = random_size(rng, 0, c - 1);
        }
        return make_trial(rng, V{random_tensor(rng, {r, c})},
                          [rows, cols](const V& in) { return pick(in[0], rows, cols); });
    });
    f.emplace_back("weighted_sum", unary([](const Tensor& a) {
        std::vector<double> w(a.numel());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.5 - static_cast<double>(i % 3);
        return weighted_sum(a, w);
    }));
    f.emplace_back("giou_loss_rows", [](std::mt19937_64& rng) {
        const std::size_t k = random_size(rng, 1, 4);
        std::vector<Box> targets(k), preds(k);
        for (auto& b : targets) b = random_box(rng, 0.1);
        for (std::size_t i = 0; i < k; ++i) {
            // Half the trials overlap their target, half are disjoint-ish.
            preds[i] = random_size(rng, 0, 1) ? Box{targets[i].cx + 0.05, targets[i].cy - 0.04, targets[i].w * 1.3,
                                                    targets[i].h * 0.8}
                                              : random_box(rng, 0.1);
        }
        Tensor p = boxes_to_tensor(preds);
        p.set_requires_grad(true);
        return make_trial(rng, V{p}, [targets](const V& in) { return giou_loss_rows(in[0], targets); });
    });
    return f;
}

inline std::vector<OpCheckResult> run_op_gradchecks(int trials, double eps, std::uint64_t seed = 7) {
    std::vector<OpCheckResult> results;
    std::mt19937_64 rng(seed);
    for (auto& [name, factory] : op_trial_factories()) {
        OpCheckResult r{name, 0, 0.0};
        for (int t = 0; t < trials; ++t) {
            auto [inputs, fn] = factory(rng);
            r.worst_error = std::max(r.worst_error, grad_check(fn, inputs, eps));
            ++r.trials;
        }
        results.push_back(r);
    }
    return results;
}

}  // namespace cdetr::testing
