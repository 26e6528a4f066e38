#pragma once

// Dense row-major tensors with reverse-mode autodiff.
//
// Every op records its parents and an adjoint closure on the result node.
// `Tensor::backward()` topologically sorts the graph reachable from the
// scalar root and replays the adjoints in reverse order. Parameters are leaf
// tensors with `requires_grad`; their gradients accumulate across backward
// calls until `zero_grad()`.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cascade_detr/errors.hpp"

namespace cdetr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct Node;
}

class Tensor {
public:
    // Adjoint: receives d(root)/d(output) and accumulates into the parents.
    using Adjoint = std::function<void(std::span<const double> out_grad)>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    // Builds an op result. `parents` that do not require grad are dropped; if
    // none remain (or grad recording is disabled) the adjoint is discarded.
    static Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                              Adjoint adjoint, const char* op_name = "custom");

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t i) const { return data()[i]; }
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    // Empty until a backward pass reaches this tensor.
    std::span<const double> grad() const;
    bool has_grad() const;
    // Lazily allocated zero-filled gradient buffer; used by adjoints.
    // Handle semantics: the node is shared, so this is callable on const handles.
    std::span<double> grad_buffer() const;
    void zero_grad();

    // Root must be a single-element tensor; seeds d(root)/d(root) = 1.
    void backward();

    // Same values, no history.
    Tensor detach() const;
    Tensor clone() const;

    const void* id() const noexcept { return node_.get(); }
    const char* op_name() const;

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// N x L boolean attendability; true = location may be attended.
struct AttentionMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allowed;

    static AttentionMask full(std::size_t rows, std::size_t cols);
    bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
    void set(std::size_t r, std::size_t c, bool value) { allowed[r * cols + c] = value ? 1 : 0; }
    std::size_t row_count(std::size_t r) const;
};

// ---- elementwise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
// a [rows, cols] + bias [cols] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
// Huber penalty with threshold delta: 0.5 x^2 if |x| <= delta else delta (|x| - 0.5 delta).
Tensor huber(const Tensor& a, double delta);
Tensor log(const Tensor& a);

// ---- linear algebra ----------------------------------------------------

// [n, k] x [k, m] -> [n, m]
Tensor matmul(const Tensor& a, const Tensor& b);
// [n, k] x [m, k]^T -> [n, m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x [n, in], weight [out, in], bias [out] (bias may be undefined)
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- normalization / softmax --------------------------------------------

// Row-wise softmax; identical code path to masked_softmax with a full mask.
Tensor softmax(const Tensor& logits);
// Row-wise softmax restricted to mask-true entries. Masked entries are exactly 0.
Tensor masked_softmax(const Tensor& logits, const AttentionMask& mask);
Tensor log_softmax(const Tensor& logits);
// Row-wise over the last axis of a [n, d] tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- convolution -------------------------------------------------------

// x [c, h, w], weight [o, c, k, k], bias [o] -> [o, h', w'] with zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding);

// ---- reductions and reshaping -----------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// Entries a[rows[i], cols[i]] as a flat [k] vector.
Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
// sum_i a[i] * weights[i]; weights are constants.
Tensor weighted_sum(const Tensor& a, std::span<const double> weights);

// ---- gradient checking -------------------------------------------------

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max over all input entries of |analytic - central difference| / max(1, |analytic|).
// Inputs are perturbed in place and restored; their gradients are reset.
double grad_check(const ScalarFn& fn, std::vector<Tensor>& inputs, double eps = 1e-5);

}  // namespace cdetr
