// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to row-major storage. Copies alias the same
// storage (use clone() for a detached value copy). Operations record onto the
// GradientTape that is active on the calling thread, if any input is tracked
// by it; with no active tape every operation is a plain computation.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace magical {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct DegenerateVectorError : std::domain_error {
    using std::domain_error::domain_error;
};

struct NumericalDomainError : std::domain_error {
    using std::domain_error::domain_error;
};

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class GradientTape;

namespace detail {

inline std::atomic<std::uint64_t> g_next_tensor_id{1};
inline std::atomic<std::uint64_t> g_next_tape_serial{1};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::uint64_t id = g_next_tensor_id.fetch_add(1, std::memory_order_relaxed);
    // Serial of the tape that recorded this tensor as an op output (0 = none).
    std::uint64_t tape_serial = 0;
    std::size_t tape_index = 0;
};

inline thread_local GradientTape* t_active_tape = nullptr;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                                 " elements");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor filled(Shape shape, double value) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor vector(std::vector<double> v) {
        const auto n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(v));
    }

    static Tensor identity(std::size_t n) {
        auto t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
        return t;
    }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->data.size(); }
    bool is_scalar() const { return impl_->data.size() == 1; }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double item() const {
        if (!is_scalar()) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }

    std::uint64_t id() const { return impl_->id; }

    // Detached deep copy; never requires grad.
    Tensor clone() const { return Tensor(impl_->shape, impl_->data); }

    detail::TensorImpl& impl() const { return *impl_; }
    const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Gradients keyed by leaf identity. Absent leaves read as zero.
class GradientMap {
public:
    bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }

    const Tensor* find(const Tensor& leaf) const {
        auto it = grads_.find(leaf.id());
        return it == grads_.end() ? nullptr : &it->second;
    }

    Tensor get(const Tensor& leaf) const {
        if (const auto* g = find(leaf)) return *g;
        return Tensor::zeros(leaf.shape());
    }

    void insert(std::uint64_t id, Tensor grad) { grads_.insert_or_assign(id, std::move(grad)); }
    std::size_t size() const { return grads_.size(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    std::unordered_map<std::uint64_t, Tensor> grads_;
};

/// Records differentiable operations executed on this thread while alive.
/// One tape per training step; nested tapes shadow the outer one.
class GradientTape {
public:
    // gout: gradient of the op output; gin[i]: accumulation buffer for input i
    // or nullptr when that input is not tracked.
    using BackwardFn = std::function<void(std::span<const double> gout, std::span<double* const> gin)>;

    GradientTape() : serial_(detail::g_next_tape_serial.fetch_add(1)), previous_(detail::t_active_tape) {
        detail::t_active_tape = this;
    }
    ~GradientTape() { detail::t_active_tape = previous_; }
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    static GradientTape* active() { return detail::t_active_tape; }

    std::size_t size() const { return entries_.size(); }

    bool tracks(const Tensor& t) const {
        return t.defined() && (t.requires_grad() || t.impl().tape_serial == serial_);
    }

    void record(const Tensor& out, std::initializer_list<Tensor> inputs, BackwardFn fn) {
        record(out, std::vector<Tensor>(inputs), std::move(fn));
    }

    void record(const Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
        Entry e;
        e.output = out.handle();
        e.inputs.reserve(inputs.size());
        for (auto& in : inputs) e.inputs.push_back(tracks(in) ? in.handle() : nullptr);
        e.fn = std::move(fn);
        out.impl().tape_serial = serial_;
        out.impl().tape_index = entries_.size();
        entries_.push_back(std::move(e));
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// requires_grad leaf the loss depends on.
    GradientMap backward(const Tensor& loss) const {
        if (!loss.defined() || loss.size() != 1) {
            throw ContractError("backward requires a scalar loss, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
        }
        GradientMap result;
        if (!tracks(loss)) return result;
        if (loss.impl().tape_serial != serial_) {
            result.insert(loss.id(), Tensor::filled(loss.shape(), 1.0));
            return result;
        }

        std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
        std::unordered_map<const detail::TensorImpl*, std::shared_ptr<detail::TensorImpl>> leaves;
        grads[&loss.impl()] = {1.0};

        std::vector<double*> gin;
        for (std::size_t k = loss.impl().tape_index + 1; k-- > 0;) {
            const Entry& e = entries_[k];
            auto it = grads.find(e.output.get());
            if (it == grads.end()) continue;
            std::vector<double> gout = std::move(it->second);
            grads.erase(it);

            gin.assign(e.inputs.size(), nullptr);
            for (std::size_t i = 0; i < e.inputs.size(); ++i) {
                const auto& in = e.inputs[i];
                if (!in) continue;
                auto& buf = grads[in.get()];
                if (buf.empty()) buf.assign(in->data.size(), 0.0);
                gin[i] = buf.data();
                if (in->tape_serial != serial_) leaves.emplace(in.get(), in);
            }
            e.fn(gout, gin);
        }

        for (const auto& [ptr, leaf] : leaves) {
            auto it = grads.find(ptr);
            if (it == grads.end()) continue;
            result.insert(leaf->id, Tensor(leaf->shape, std::move(it->second)));
        }
        return result;
    }

private:
    struct Entry {
        std::shared_ptr<detail::TensorImpl> output;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        BackwardFn fn;
    };

    std::vector<Entry> entries_;
    std::uint64_t serial_;
    GradientTape* previous_;
};

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : saved_(detail::t_active_tape) { detail::t_active_tape = nullptr; }
    ~NoGradGuard() { detail::t_active_tape = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    GradientTape* saved_;
};

inline GradientMap backward(const Tensor& loss) {
    auto* tape = GradientTape::active();
    if (!tape) throw ContractError("backward called with no active gradient tape");
    return tape->backward(loss);
}

namespace detail {

// Returns the tape to record on, or nullptr when no input is tracked.
inline GradientTape* recording_tape(std::initializer_list<const Tensor*> inputs) {
    auto* tape = GradientTape::active();
    if (!tape) return nullptr;
    for (const auto* t : inputs) {
        if (tape->tracks(*t)) return tape;
    }
    return nullptr;
}

inline GradientTape* recording_tape(std::span<const Tensor> inputs) {
    auto* tape = GradientTape::active();
    if (!tape) return nullptr;
    for (const auto& t : inputs) {
        if (tape->tracks(t)) return tape;
    }
    return nullptr;
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// c[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Bwd dfdx) {
    std::vector<double> out(x.size());
    const auto xs = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = recording_tape({&x})) {
        tape->record(y, {x}, [x, y, dfdx](std::span<const double> g, std::span<double* const> gin) {
            const auto xs = x.data();
            const auto ys = y.data();
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * dfdx(xs[i], ys[i]);
        });
    }
    return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    auto c = Tensor::zeros({m, n});
    detail::gemm_nn(a.data().data(), b.data().data(), c.data().data(), m, k, n);
    if (auto* tape = detail::recording_tape({&a, &b})) {
        tape->record(c, {a, b}, [a, b, m, k, n](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0]) detail::gemm_nt(g.data(), b.data().data(), gin[0], m, n, k);
            if (gin[1]) detail::gemm_tn(a.data().data(), g.data(), gin[1], m, k, n);
        });
    }
    return c;
}

/// a · bᵀ for a[m×k], b[n×k]; the row-major form of y = W x applied to rows.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul_nt");
    detail::require_matrix(b, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    auto c = Tensor::zeros({m, n});
    detail::gemm_nt(a.data().data(), b.data().data(), c.data().data(), m, k, n);
    if (auto* tape = detail::recording_tape({&a, &b})) {
        tape->record(c, {a, b}, [a, b, m, k, n](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0]) detail::gemm_nn(g.data(), b.data().data(), gin[0], m, n, k);
            if (gin[1]) detail::gemm_tn(g.data(), a.data().data(), gin[1], m, n, k);
        });
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto t = Tensor::zeros({n, m});
    const auto as = a.data();
    auto ts = t.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ts[j * m + i] = as[i * n + j];
    if (auto* tape = detail::recording_tape({&a})) {
        tape->record(t, {a}, [m, n](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[j * m + i];
        });
    }
    return t;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    Tensor y(std::move(shape), x.values());
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Element-wise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&a, &b})) {
        tape->record(c, {a, b}, [](std::span<const double> g, std::span<double* const> gin) {
            for (auto* buf : gin) {
                if (!buf) continue;
                for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
            }
        });
    }
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tensor c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&a, &b})) {
        tape->record(c, {a, b}, [](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0])
                for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
            if (gin[1])
                for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
        });
    }
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor c(a.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&a, &b})) {
        tape->record(c, {a, b}, [a, b](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0])
                for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * b[i];
            if (gin[1])
                for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * a[i];
        });
    }
    return c;
}

inline Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [s](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * s;
        });
    }
    return y;
}

/// x * s where s is a differentiable scalar tensor.
inline Tensor scale(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("scale: factor must be scalar, got " + shape_str(s.shape()));
    const double sv = s[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * sv;
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&x, &s})) {
        tape->record(y, {x, s}, [x, sv](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0])
                for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * sv;
            if (gin[1]) gin[1][0] += detail::dot(g.data(), x.data().data(), g.size());
        });
    }
    return y;
}

/// Adds a length-n row vector to every row of an m×n matrix.
inline Tensor add_rowwise(const Tensor& x, const Tensor& row) {
    detail::require_matrix(x, "add_rowwise");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (row.size() != n) {
        throw DimensionError("add_rowwise: " + shape_str(x.shape()) + " with row " + shape_str(row.shape()));
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + row[j];
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&x, &row})) {
        tape->record(y, {x, row}, [m, n](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0])
                for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
            if (gin[1])
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gin[1][j] += g[i * n + j];
        });
    }
    return y;
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    for (double v : x.data()) {
        if (!(v > 0.0)) throw NumericalDomainError("log of non-positive value " + std::to_string(v));
    }
    return detail::unary_elementwise(
        x, [](double v) { return std::log(v); }, [](double xv, double) { return 1.0 / xv; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_elementwise(
        x,
        [](double v) {
            const double z = std::clamp(v, -700.0, 700.0);
            return 1.0 / (1.0 + std::exp(-z));
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary_elementwise(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return detail::unary_elementwise(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

/// Element-wise op with a caller-supplied derivative. Used for custom
/// activations and for negative-control gradient tests.
inline Tensor map_elementwise(const Tensor& x, std::function<double(double)> f,
                              std::function<double(double)> dfdx) {
    return detail::unary_elementwise(
        x, [f](double v) { return f(v); }, [dfdx](double v, double) { return dfdx(v); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto y = Tensor::scalar(s);
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [n = x.size()](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
        });
    }
    return y;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    auto y = Tensor::scalar(detail::dot(a.data().data(), b.data().data(), a.size()));
    if (auto* tape = detail::recording_tape({&a, &b})) {
        tape->record(y, {a, b}, [a, b](std::span<const double> g, std::span<double* const> gin) {
            if (gin[0])
                for (std::size_t i = 0; i < a.size(); ++i) gin[0][i] += g[0] * b[i];
            if (gin[1])
                for (std::size_t i = 0; i < a.size(); ++i) gin[1][i] += g[0] * a[i];
        });
    }
    return y;
}

/// Mean of rows [begin, end) of an m×n matrix, giving a length-n vector.
inline Tensor mean_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_matrix(x, "mean_rows");
    const std::size_t n = x.dim(1);
    if (begin >= end || end > x.dim(0)) {
        throw DimensionError("mean_rows: invalid row range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") for " + shape_str(x.shape()));
    }
    const double inv = 1.0 / static_cast<double>(end - begin);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = begin; i < end; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
    for (auto& v : out) v *= inv;
    auto y = Tensor::vector(std::move(out));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [begin, end, n, inv](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = begin; i < end; ++i)
                for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[j] * inv;
        });
    }
    return y;
}

inline Tensor mean_rows(const Tensor& x) { return mean_rows(x, 0, x.dim(0)); }

/// Numerically stable log Σ exp(x) over all entries.
inline Tensor logsumexp(const Tensor& x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x.data()) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : x.data()) s += std::exp(v - mx);
    auto y = Tensor::scalar(mx + std::log(s));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [x, y](std::span<const double> g, std::span<double* const> gin) {
            const double l = y[0];
            for (std::size_t i = 0; i < x.size(); ++i) gin[0][i] += g[0] * std::exp(x[i] - l);
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization and probability maps

/// Row-wise softmax of an m×n matrix (or a vector, treated as one row).
inline Tensor softmax(const Tensor& x) {
    const std::size_t n = x.shape().empty() ? 1 : x.shape().back();
    const std::size_t m = x.size() / n;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (out[i * n + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
    }
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [y, m, n](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* yr = y.data().data() + i * n;
                const double* gr = g.data() + i * n;
                const double d = detail::dot(yr, gr, n);
                for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += yr[j] * (gr[j] - d);
            }
        });
    }
    return y;
}

/// Softmax of a square score matrix with entries j > i masked out.
inline Tensor causal_softmax(const Tensor& x) {
    detail::require_matrix(x, "causal_softmax");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (m > n) throw DimensionError("causal_softmax: more query rows than key columns " + shape_str(x.shape()));
    // Query row i sees keys [0, offset + i]; offset > 0 when rows are a suffix.
    const std::size_t offset = n - m;
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t len = offset + i + 1;
        const double* row = x.data().data() + i * n;
        double mx = *std::max_element(row, row + len);
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) s += (out[i * n + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < len; ++j) out[i * n + j] /= s;
    }
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [y, m, n, offset](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t len = offset + i + 1;
                const double* yr = y.data().data() + i * n;
                const double* gr = g.data() + i * n;
                const double d = detail::dot(yr, gr, len);
                for (std::size_t j = 0; j < len; ++j) gin[0][i * n + j] += yr[j] * (gr[j] - d);
            }
        });
    }
    return y;
}

/// Row-wise layer normalization with learned gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gain.size() != n || bias.size() != n) {
        throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                             " bias " + shape_str(bias.shape()));
    }
    std::vector<double> xhat(x.size()), inv_std(m), out(x.size());
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (row[j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
        }
    }
    Tensor y(x.shape(), std::move(out));
    if (auto* tape = detail::recording_tape({&x, &gain, &bias})) {
        tape->record(y, {x, gain, bias},
                     [gain, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const double> g, std::span<double* const> gin) {
                         const double inv_n = 1.0 / static_cast<double>(n);
                         std::vector<double> gx(n);
                         for (std::size_t i = 0; i < m; ++i) {
                             const double* gr = g.data() + i * n;
                             const double* xr = xhat.data() + i * n;
                             if (gin[1])
                                 for (std::size_t j = 0; j < n; ++j) gin[1][j] += gr[j] * xr[j];
                             if (gin[2])
                                 for (std::size_t j = 0; j < n; ++j) gin[2][j] += gr[j];
                             if (!gin[0]) continue;
                             double mean_g = 0.0, mean_gx = 0.0;
                             for (std::size_t j = 0; j < n; ++j) {
                                 gx[j] = gr[j] * gain[j];
                                 mean_g += gx[j];
                                 mean_gx += gx[j] * xr[j];
                             }
                             mean_g *= inv_n;
                             mean_gx *= inv_n;
                             for (std::size_t j = 0; j < n; ++j)
                                 gin[0][i * n + j] += inv_std[i] * (gx[j] - mean_g - xr[j] * mean_gx);
                         }
                     });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Indexing, slicing, concatenation

/// Gathers rows of a V×d table, one per id.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    detail::require_matrix(table, "embedding");
    const std::size_t v = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw DimensionError("embedding: empty id sequence");
    std::vector<double> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= v) {
            throw DimensionError("embedding: id " + std::to_string(ids[t]) + " out of range for table " +
                                 shape_str(table.shape()));
        }
        std::copy_n(table.data().data() + ids[t] * d, d, out.data() + t * d);
    }
    Tensor y({ids.size(), d}, std::move(out));
    if (auto* tape = detail::recording_tape({&table})) {
        tape->record(y, {table},
                     [idv = std::vector<std::size_t>(ids.begin(), ids.end()), d](std::span<const double> g,
                                                                                std::span<double* const> gin) {
                         for (std::size_t t = 0; t < idv.size(); ++t)
                             for (std::size_t j = 0; j < d; ++j) gin[0][idv[t] * d + j] += g[t * d + j];
                     });
    }
    return y;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
    detail::require_matrix(x, "slice_rows");
    const std::size_t n = x.dim(1);
    if (count == 0 || begin + count > x.dim(0)) throw DimensionError("slice_rows out of range");
    std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
    Tensor y({count, n}, std::move(out));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [begin, n](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][begin * n + i] += g[i];
        });
    }
    return y;
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
    detail::require_matrix(x, "slice_cols");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (count == 0 || begin + count > n) throw DimensionError("slice_cols out of range");
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.data().data() + i * n + begin, count, out.data() + i * count);
    Tensor y({m, count}, std::move(out));
    if (auto* tape = detail::recording_tape({&x})) {
        tape->record(y, {x}, [m, n, begin, count](std::span<const double> g, std::span<double* const> gin) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < count; ++j) gin[0][i * n + begin + j] += g[i * count + j];
        });
    }
    return y;
}

/// Concatenates 1-D tensors (or scalars) end to end, or matrices along an
/// axis (0 = stack rows, 1 = join columns).
inline Tensor concat(std::span<const Tensor> parts, std::size_t axis = 0) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    if (parts[0].rank() <= 1) {
        if (axis != 0) throw DimensionError("concat: vectors only join along axis 0");
        std::vector<double> out;
        for (const auto& p : parts) {
            if (p.rank() > 1) throw DimensionError("concat: mixed vector and matrix parts");
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        auto y = Tensor::vector(std::move(out));
        if (auto* tape = detail::recording_tape(parts)) {
            std::vector<std::size_t> sizes;
            for (const auto& p : parts) sizes.push_back(p.size());
            tape->record(y, std::vector<Tensor>(parts.begin(), parts.end()),
                         [sizes](std::span<const double> g, std::span<double* const> gin) {
                             std::size_t off = 0;
                             for (std::size_t k = 0; k < sizes.size(); ++k) {
                                 if (gin[k])
                                     for (std::size_t i = 0; i < sizes[k]; ++i) gin[k][i] += g[off + i];
                                 off += sizes[k];
                             }
                         });
        }
        return y;
    }

    for (const auto& p : parts) detail::require_matrix(p, "concat");
    std::vector<std::size_t> extents;
    if (axis == 0) {
        const std::size_t n = parts[0].dim(1);
        std::size_t rows = 0;
        std::vector<double> out;
        for (const auto& p : parts) {
            if (p.dim(1) != n) throw DimensionError("concat rows: column count mismatch " + shape_str(p.shape()));
            rows += p.dim(0);
            extents.push_back(p.size());
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        Tensor y({rows, n}, std::move(out));
        if (auto* tape = detail::recording_tape(parts)) {
            tape->record(y, std::vector<Tensor>(parts.begin(), parts.end()),
                         [extents](std::span<const double> g, std::span<double* const> gin) {
                             std::size_t off = 0;
                             for (std::size_t k = 0; k < extents.size(); ++k) {
                                 if (gin[k])
                                     for (std::size_t i = 0; i < extents[k]; ++i) gin[k][i] += g[off + i];
                                 off += extents[k];
                             }
                         });
        }
        return y;
    }
    if (axis != 1) throw DimensionError("concat: axis must be 0 or 1");
    const std::size_t m = parts[0].dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.dim(0) != m) throw DimensionError("concat cols: row count mismatch " + shape_str(p.shape()));
        extents.push_back(p.dim(1));
        cols += p.dim(1);
    }
    std::vector<double> out(m * cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < m; ++i) std::copy_n(p.data().data() + i * w, w, out.data() + i * cols + off);
        off += w;
    }
    Tensor y({m, cols}, std::move(out));
    if (auto* tape = detail::recording_tape(parts)) {
        tape->record(y, std::vector<Tensor>(parts.begin(), parts.end()),
                     [extents, m, cols](std::span<const double> g, std::span<double* const> gin) {
                         std::size_t off = 0;
                         for (std::size_t k = 0; k < extents.size(); ++k) {
                             const std::size_t w = extents[k];
                             if (gin[k])
                                 for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < w; ++j) gin[k][i * w + j] += g[i * cols + off + j];
                             off += w;
                         }
                     });
    }
    return y;
}

inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis = 0) {
    std::vector<Tensor> v(parts);
    return concat(std::span<const Tensor>(v), axis);
}

// ---------------------------------------------------------------------------
// Losses and similarities

inline constexpr std::ptrdiff_t kIgnoreTarget = -1;

/// Mean cross-entropy of row-wise logits against class targets; rows whose
/// target is kIgnoreTarget are skipped. Uses log-sum-exp per row.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::ptrdiff_t> targets) {
    detail::require_matrix(logits, "cross_entropy");
    const std::size_t m = logits.dim(0), n = logits.dim(1);
    if (targets.size() != m) {
        throw ContractError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                            " logit rows");
    }
    std::size_t counted = 0;
    double total = 0.0;
    std::vector<double> probs(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] == kIgnoreTarget) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n) {
            throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " outside " +
                                 std::to_string(n) + " classes");
        }
        const double* row = logits.data().data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (probs[i * n + j] = std::exp(row[j] - mx));
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
        total += lse - row[targets[i]];
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: every target is ignored");
    const double inv = 1.0 / static_cast<double>(counted);
    auto y = Tensor::scalar(total * inv);
    if (auto* tape = detail::recording_tape({&logits})) {
        tape->record(y, {logits},
                     [probs = std::move(probs), tg = std::vector<std::ptrdiff_t>(targets.begin(), targets.end()), m,
                      n, inv](std::span<const double> g, std::span<double* const> gin) {
                         const double s = g[0] * inv;
                         for (std::size_t i = 0; i < m; ++i) {
                             if (tg[i] == kIgnoreTarget) continue;
                             for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += s * probs[i * n + j];
                             gin[0][i * n + static_cast<std::size_t>(tg[i])] -= s;
                         }
                     });
    }
    return y;
}

/// ⟨u,v⟩ / (‖u‖‖v‖). Throws DegenerateVectorError on a zero-norm input.
inline Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) {
        throw DimensionError("cosine_similarity: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
    }
    const std::size_t n = u.size();
    const double uv = detail::dot(u.data().data(), v.data().data(), n);
    const double nu = std::sqrt(detail::dot(u.data().data(), u.data().data(), n));
    const double nv = std::sqrt(detail::dot(v.data().data(), v.data().data(), n));
    if (nu == 0.0 || nv == 0.0) throw DegenerateVectorError("cosine_similarity of a zero-norm vector");
    const double c = uv / (nu * nv);
    auto y = Tensor::scalar(c);
    if (auto* tape = detail::recording_tape({&u, &v})) {
        tape->record(y, {u, v}, [u, v, n, nu, nv, c](std::span<const double> g, std::span<double* const> gin) {
            // d c / d u = v/(|u||v|) - c u/|u|^2
            if (gin[0])
                for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0] * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
            if (gin[1])
                for (std::size_t i = 0; i < n; ++i) gin[1][i] += g[0] * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
        });
    }
    return y;
}

}  // namespace magical
