#include "cascade_detr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace cdetr {

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::shape_mismatch: return "E_SHAPE";
        case ErrorCode::precondition: return "E_PRECONDITION";
        case ErrorCode::invalid_box: return "E_BOX";
        case ErrorCode::non_finite: return "E_NONFINITE";
        case ErrorCode::parse: return "E_PARSE";
        case ErrorCode::io: return "E_IO";
        case ErrorCode::config: return "E_CONFIG";
        case ErrorCode::checkpoint: return "E_CHECKPOINT";
        case ErrorCode::divergence: return "E_DIVERGED";
    }
    return "E_UNKNOWN";
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    Tensor::Adjoint adjoint;
    const char* op = "leaf";
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& expected) {
    throw ShapeError(std::string(op) + ": got shape " + shape_str(a) + ", expected " + expected);
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) shape_fail(op, t.shape(), "rank " + std::to_string(rank));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                           Adjoint adjoint, const char* op_name) {
    Tensor out = from(std::move(shape), std::move(values), false);
    out.node_->op = op_name;
    if (!g_grad_enabled) return out;
    for (const Tensor& p : parents) {
        if (p.defined() && p.requires_grad()) out.node_->parents.push_back(p.node_);
    }
    if (!out.node_->parents.empty()) {
        out.node_->requires_grad = true;
        out.node_->adjoint = std::move(adjoint);
    }
    return out;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) shape_fail("dim", node_->shape, "axis " + std::to_string(axis) + " in range");
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
    if (numel() != 1) shape_fail("item", shape(), "a single element");
    return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const { return node_->value[row * node_->shape.back() + col]; }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<double> Tensor::grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

const char* Tensor::op_name() const { return node_->op; }

void Tensor::backward() {
    if (numel() != 1) shape_fail("backward", shape(), "a scalar root");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->adjoint && !node->grad.empty()) node->adjoint(node->grad);
    }
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone() const { return from(shape(), node_->value, node_->requires_grad); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
    return AttentionMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

std::size_t AttentionMask::row_count(std::size_t r) const {
    return static_cast<std::size_t>(
        std::count(allowed.begin() + static_cast<std::ptrdiff_t>(r * cols),
                   allowed.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols), std::uint8_t{1}));
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    // deriv(x, y) -> dy/dx
    auto y = out;
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [a, y = std::move(y), deriv](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            auto x = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
        },
        op);
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor::make_result(
        a.shape(), std::move(out), {a, b},
        [a, b](std::span<const double> g) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::make_result(
        a.shape(), std::move(out), {a, b},
        [a, b](std::span<const double> g) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor::make_result(
        a.shape(), std::move(out), {a, b},
        [a, b](std::span<const double> g) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return x * factor; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
    return unary("add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
    require_rank("add_row", a, 2);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (bias.numel() != cols) shape_fail("add_row", a.shape(), bias.shape());
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bias.data()[c];
    return Tensor::make_result(
        a.shape(), std::move(out), {a, bias},
        [a, bias, rows, cols](std::span<const double> g) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
            }
        },
        "add_row");
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
    return unary("abs", a, [](double x) { return std::fabs(x); },
                 [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor huber(const Tensor& a, double delta) {
    if (!(delta > 0.0)) throw PreconditionError("huber: delta must be positive");
    return unary(
        "huber", a,
        [delta](double x) {
            const double ax = std::fabs(x);
            return ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
        },
        [delta](double x, double) { return std::fabs(x) <= delta ? x : (x > 0.0 ? delta : -delta); });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw PreconditionError("log: non-positive input");
    }
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---- linear algebra ------------------------------------------------------

namespace {

// out[n, m] += a[n, k] * b[k, m]
void gemm_nn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        double* row = out + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
}

// out[n, m] += a[n, k] * b[m, k]^T
void gemm_nt(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out[i * m + j] += acc;
        }
    }
}

// out[k, m] += a[n, k]^T * b[n, m]
void gemm_tn(const double* a, const double* b, double* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            double* orow = out + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) shape_fail("matmul", a.shape(), b.shape());
    std::vector<double> out(n * m, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
    return Tensor::make_result(
        {n, m}, std::move(out), {a, b},
        [a, b, n, k, m](std::span<const double> g) mutable {
            if (a.requires_grad()) gemm_nt(g.data(), b.data().data(), a.grad_buffer().data(), n, m, k);
            if (b.requires_grad()) gemm_tn(a.data().data(), g.data(), b.grad_buffer().data(), n, k, m);
        },
        "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank("matmul_nt", a, 2);
    require_rank("matmul_nt", b, 2);
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
    if (b.dim(1) != k) shape_fail("matmul_nt", a.shape(), b.shape());
    std::vector<double> out(n * m, 0.0);
    gemm_nt(a.data().data(), b.data().data(), out.data(), n, k, m);
    return Tensor::make_result(
        {n, m}, std::move(out), {a, b},
        [a, b, n, k, m](std::span<const double> g) mutable {
            // dA = G B, dB = G^T A
            if (a.requires_grad()) gemm_nn(g.data(), b.data().data(), a.grad_buffer().data(), n, m, k);
            if (b.requires_grad()) gemm_tn(g.data(), a.data().data(), b.grad_buffer().data(), n, m, k);
        },
        "matmul_nt");
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    return Tensor::make_result(
        {c, r}, std::move(out), {a},
        [a, r, c](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        },
        "transpose");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank("linear", x, 2);
    require_rank("linear", weight, 2);
    const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) shape_fail("linear", x.shape(), weight.shape());
    if (bias.defined() && bias.numel() != out_dim) shape_fail("linear", weight.shape(), bias.shape());
    std::vector<double> out(n * out_dim, 0.0);
    if (bias.defined()) {
        for (std::size_t i = 0; i < n; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * out_dim);
    }
    gemm_nt(x.data().data(), weight.data().data(), out.data(), n, in, out_dim);
    return Tensor::make_result(
        {n, out_dim}, std::move(out), {x, weight, bias},
        [x, weight, bias, n, in, out_dim](std::span<const double> g) mutable {
            if (x.requires_grad()) gemm_nn(g.data(), weight.data().data(), x.grad_buffer().data(), n, out_dim, in);
            if (weight.requires_grad()) gemm_tn(g.data(), x.data().data(), weight.grad_buffer().data(), n, out_dim, in);
            if (bias.defined() && bias.requires_grad()) {
                auto gb = bias.grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
            }
        },
        "linear");
}

// ---- normalization / softmax -----------------------------------------------

Tensor masked_softmax(const Tensor& logits, const AttentionMask& mask) {
    require_rank("masked_softmax", logits, 2);
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (mask.rows != rows || mask.cols != cols || mask.allowed.size() != rows * cols) {
        shape_fail("masked_softmax", logits.shape(), "mask " + shape_str({mask.rows, mask.cols}));
    }
    std::vector<double> out(rows * cols, 0.0);
    auto x = logits.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double row_max = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c) {
            if (mask.allowed[base + c]) {
                row_max = std::max(row_max, x[base + c]);
                any = true;
            }
        }
        if (!any) throw PreconditionError("masked_softmax: row " + std::to_string(r) + " has no attendable entry");
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (mask.allowed[base + c]) {
                out[base + c] = std::exp(x[base + c] - row_max);
                total += out[base + c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) out[base + c] /= total;
    }
    auto y = out;
    return Tensor::make_result(
        {rows, cols}, std::move(out), {logits},
        [logits, y = std::move(y), rows, cols](std::span<const double> g) mutable {
            auto gx = logits.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
                for (std::size_t c = 0; c < cols; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
            }
        },
        "masked_softmax");
}

Tensor softmax(const Tensor& logits) {
    require_rank("softmax", logits, 2);
    return masked_softmax(logits, AttentionMask::full(logits.dim(0), logits.dim(1)));
}

Tensor log_softmax(const Tensor& logits) {
    require_rank("log_softmax", logits, 2);
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    std::vector<double> out(rows * cols);
    std::vector<double> probs(rows * cols);
    auto x = logits.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) row_max = std::max(row_max, x[base + c]);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[base + c] - row_max);
        const double log_total = std::log(total) + row_max;
        for (std::size_t c = 0; c < cols; ++c) {
            out[base + c] = x[base + c] - log_total;
            probs[base + c] = std::exp(out[base + c]);
        }
    }
    return Tensor::make_result(
        {rows, cols}, std::move(out), {logits},
        [logits, probs = std::move(probs), rows, cols](std::span<const double> g) mutable {
            auto gx = logits.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                double total = 0.0;
                for (std::size_t c = 0; c < cols; ++c) total += g[base + c];
                for (std::size_t c = 0; c < cols; ++c) gx[base + c] += g[base + c] - probs[base + c] * total;
            }
        },
        "log_softmax");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank("layer_norm", x, 2);
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d) shape_fail("layer_norm", x.shape(), gamma.shape());
    if (beta.numel() != d) shape_fail("layer_norm", x.shape(), beta.shape());
    std::vector<double> out(rows * d), xhat(rows * d), inv_std(rows);
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += xv[base + c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (xv[base + c] - mu) * (xv[base + c] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[base + c] = (xv[base + c] - mu) * inv_std[r];
            out[base + c] = gamma.data()[c] * xhat[base + c] + beta.data()[c];
        }
    }
    return Tensor::make_result(
        {rows, d}, std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](
            std::span<const double> g) mutable {
            if (gamma.requires_grad()) {
                auto gg = gamma.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
            }
            if (beta.requires_grad()) {
                auto gb = beta.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
            }
            if (!x.requires_grad()) return;
            auto gx = x.grad_buffer();
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * d;
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double dxhat = g[base + c] * gamma.data()[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[base + c];
                }
                for (std::size_t c = 0; c < d; ++c) {
                    const double dxhat = g[base + c] * gamma.data()[c];
                    gx[base + c] += inv_std[r] * (dxhat - inv_d * sum_dxhat - xhat[base + c] * inv_d * sum_dxhat_xhat);
                }
            }
        },
        "layer_norm");
}

// ---- convolution -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    require_rank("conv2d", x, 3);
    require_rank("conv2d", weight, 4);
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != k) shape_fail("conv2d", x.shape(), weight.shape());
    if (bias.defined() && bias.numel() != cout) shape_fail("conv2d", weight.shape(), bias.shape());
    if (stride == 0) throw PreconditionError("conv2d: stride must be >= 1");
    if (h + 2 * padding < k || w + 2 * padding < k) shape_fail("conv2d", x.shape(), weight.shape());
    const std::size_t oh = (h + 2 * padding - k) / stride + 1;
    const std::size_t ow = (w + 2 * padding - k) / stride + 1;

    // Lowered to a matrix product over an im2col buffer: cols[(c, ky, kx), pixel].
    const std::size_t patch = cin * k * k, pixels = oh * ow;
    auto cols = std::make_shared<std::vector<double>>(patch * pixels, 0.0);
    {
        const auto* xv = x.data().data();
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    double* row = cols->data() + ((c * k + ky) * k + kx) * pixels;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            row[oy * ow + ox] = xv[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
        }
    }
    const auto* wv = weight.data().data();
    std::vector<double> out(cout * pixels, 0.0);
    for (std::size_t o = 0; o < cout; ++o) {
        double* dst = out.data() + o * pixels;
        const double b = bias.defined() ? bias.data()[o] : 0.0;
        for (std::size_t p = 0; p < pixels; ++p) dst[p] = b;
        for (std::size_t q = 0; q < patch; ++q) {
            const double wq = wv[o * patch + q];
            const double* src = cols->data() + q * pixels;
            for (std::size_t p = 0; p < pixels; ++p) dst[p] += wq * src[p];
        }
    }
    return Tensor::make_result(
        {cout, oh, ow}, std::move(out), {x, weight, bias},
        [x, weight, bias, cols, cin, h, w, cout, k, oh, ow, stride, padding, patch, pixels](std::span<const double> g) mutable {
            const auto* wv = weight.data().data();
            if (bias.defined() && bias.requires_grad()) {
                double* gb = bias.grad_buffer().data();
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t p = 0; p < pixels; ++p) gb[o] += g[o * pixels + p];
            }
            if (weight.requires_grad()) {
                double* gw = weight.grad_buffer().data();
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* go = g.data() + o * pixels;
                    for (std::size_t q = 0; q < patch; ++q) {
                        const double* src = cols->data() + q * pixels;
                        double acc = 0.0;
                        for (std::size_t p = 0; p < pixels; ++p) acc += go[p] * src[p];
                        gw[o * patch + q] += acc;
                    }
                }
            }
            if (x.requires_grad()) {
                std::vector<double> gcols(patch * pixels, 0.0);
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* go = g.data() + o * pixels;
                    for (std::size_t q = 0; q < patch; ++q) {
                        const double wq = wv[o * patch + q];
                        double* dst = gcols.data() + q * pixels;
                        for (std::size_t p = 0; p < pixels; ++p) dst[p] += wq * go[p];
                    }
                }
                double* gx = x.grad_buffer().data();
                for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const double* row = gcols.data() + ((c * k + ky) * k + kx) * pixels;
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                    gx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        },
        "conv2d");
}

// ---- reductions and reshaping ---------------------------------------------

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return Tensor::make_result(
        {1}, {total}, {a},
        [a](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (double& v : ga) v += g[0];
        },
        "sum");
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw PreconditionError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::make_result(
        std::move(shape), std::move(out), {a},
        [a](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        },
        "reshape");
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_rank("slice_cols", a, 2);
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (begin >= end || end > cols) shape_fail("slice_cols", a.shape(), "column range within bounds");
    const std::size_t width = end - begin;
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = a.data()[r * cols + begin + c];
    return Tensor::make_result(
        {rows, width}, std::move(out), {a},
        [a, rows, cols, begin, width](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
        },
        "slice_cols");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw PreconditionError("concat_cols: no inputs");
    const std::size_t rows = parts.front().dim(0);
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_rank("concat_cols", p, 2);
        if (p.dim(0) != rows) shape_fail("concat_cols", parts.front().shape(), p.shape());
        total += p.dim(1);
    }
    std::vector<double> out(rows * total);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) out[r * total + offset + c] = p.data()[r * w + c];
        offset += w;
    }
    return Tensor::make_result(
        {rows, total}, std::move(out), parts,
        [parts, rows, total](std::span<const double> g) mutable {
            std::size_t offset = 0;
            for (const Tensor& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    auto gp = p.grad_buffer();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + offset + c];
                }
                offset += w;
            }
        },
        "concat_cols");
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    require_rank("gather_rows", a, 2);
    const std::size_t cols = a.dim(1);
    std::vector<std::size_t> index(rows.begin(), rows.end());
    std::vector<double> out(index.size() * cols);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= a.dim(0)) shape_fail("gather_rows", a.shape(), "row index " + std::to_string(index[i]));
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(index[i] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(i * cols));
    }
    const std::size_t n = index.size();
    return Tensor::make_result(
        {n, cols}, std::move(out), {a},
        [a, index = std::move(index), cols](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (std::size_t i = 0; i < index.size(); ++i)
                for (std::size_t c = 0; c < cols; ++c) ga[index[i] * cols + c] += g[i * cols + c];
        },
        "gather_rows");
}

Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
    require_rank("pick", a, 2);
    if (rows.size() != cols.size()) throw ShapeError("pick: row and column index lists differ in length");
    const std::size_t width = a.dim(1);
    std::vector<std::size_t> flat(rows.size());
    std::vector<double> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.dim(0) || cols[i] >= width) shape_fail("pick", a.shape(), "indices in range");
        flat[i] = rows[i] * width + cols[i];
        out[i] = a.data()[flat[i]];
    }
    const std::size_t n = flat.size();
    return Tensor::make_result(
        {n}, std::move(out), {a},
        [a, flat = std::move(flat)](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += g[i];
        },
        "pick");
}

Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
    if (weights.size() != a.numel()) shape_fail("weighted_sum", a.shape(), "weights of length " + std::to_string(weights.size()));
    std::vector<double> w(weights.begin(), weights.end());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) total += a.data()[i] * w[i];
    return Tensor::make_result(
        {1}, {total}, {a},
        [a, w = std::move(w)](std::span<const double> g) mutable {
            auto ga = a.grad_buffer();
            for (std::size_t i = 0; i < w.size(); ++i) ga[i] += g[0] * w[i];
        },
        "weighted_sum");
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const ScalarFn& fn, std::vector<Tensor>& inputs, double eps) {
    if (!(eps > 0.0)) throw PreconditionError("grad_check: eps must be positive");
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    const Tensor out = fn(inputs);
    if (out.numel() != 1) shape_fail("grad_check", out.shape(), "a scalar function");
    if (!std::isfinite(out.item())) throw Error(ErrorCode::non_finite, "grad_check: function value is not finite");
    Tensor root = out;
    root.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }

    auto evaluate = [&]() {
        NoGradGuard guard;
        const double v = fn(inputs).item();
        if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "grad_check: perturbed function value is not finite");
        return v;
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto values = inputs[i].mutable_data();
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double original = values[j];
            values[j] = original + eps;
            const double plus = evaluate();
            values[j] = original - eps;
            const double minus = evaluate();
            values[j] = original;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double a = analytic[i][j];
            worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
        }
    }
    for (Tensor& t : inputs) t.zero_grad();
    return worst;
}

}  // namespace cdetr
