#pragma once

// Reverse-mode autodiff on dense 64-bit float tensors. Ops executed while a
// ComputationRecord is active push a backward step onto the record; calling
// backward() on a scalar output replays the steps in reverse execution order,
// which is a valid reverse-topological order of the data flow.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "deltafusion/errors.hpp"

namespace deltafusion {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

class ComputationRecord;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;              // empty until touched by backward
    bool requires_grad = false;
    const ComputationRecord* record = nullptr; // record that produced this node
};

inline void ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.value.size(), 0.0);
}

} // namespace detail

// Handle with shared ownership; copies alias the same storage, which is what
// lets backward steps hold their operands alive.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->value.assign(shape_size(shape), 0.0);
        t.impl_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    static Tensor from_data(Shape shape, std::vector<double> data) {
        if (shape_size(shape) != data.size())
            throw ShapeError("from_data: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        return t;
    }

    static Tensor row_vector(std::vector<double> data) {
        Shape s{1, data.size()};
        return from_data(std::move(s), std::move(data));
    }

    static Tensor vector(std::vector<double> data) {
        Shape s{data.size()};
        return from_data(std::move(s), std::move(data));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("matrix: ragged initializer");
            data.insert(data.end(), row.begin(), row.end());
        }
        return from_data({r, c}, std::move(data));
    }

    // Zero-mean uniform in [-half_width, half_width].
    static Tensor uniform(Shape shape, double half_width, std::mt19937_64& rng) {
        Tensor t = zeros(std::move(shape));
        std::uniform_real_distribution<double> dist(-half_width, half_width);
        for (double& v : t.impl_->value) v = dist(rng);
        return t;
    }

    // Glorot: half-width sqrt(6 / (fan_in + fan_out)).
    static Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out,
                         std::mt19937_64& rng) {
        return uniform(std::move(shape),
                       std::sqrt(6.0 / double(fan_in + fan_out)), rng);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->value.size(); }

    std::size_t rows() const { return impl_->shape.at(0); }
    std::size_t cols() const { return impl_->shape.at(1); }

    std::vector<double>& data() { return impl_->value; }
    const std::vector<double>& data() const { return impl_->value; }

    double& at(std::size_t i) { return impl_->value.at(i); }
    double at(std::size_t i) const { return impl_->value.at(i); }
    double& at(std::size_t i, std::size_t j) { return impl_->value[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return impl_->value[i * cols() + j]; }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " entries");
        return impl_->value[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    // Gradient accumulated by the latest backward passes; zeros if untouched.
    std::vector<double> grad() const {
        if (!impl_->grad.empty()) return impl_->grad;
        return std::vector<double>(impl_->value.size(), 0.0);
    }
    double grad_at(std::size_t i) const { return impl_->grad.empty() ? 0.0 : impl_->grad[i]; }
    void zero_grad() { impl_->grad.clear(); }

    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

inline bool same_shape(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape();
}

// Record of backward steps for one forward computation.
class ComputationRecord {
  public:
    ComputationRecord() = default;
    ComputationRecord(const ComputationRecord&) = delete;
    ComputationRecord& operator=(const ComputationRecord&) = delete;

    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    void push(std::function<void()> step) { steps_.push_back(std::move(step)); }

    // Seeds d(root)/d(root) = 1 and replays steps newest-first.
    void backward(const Tensor& root) {
        if (root.size() != 1)
            throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
        if (root.impl()->record != this)
            throw std::logic_error("backward: root was not produced under this record");
        detail::ensure_grad(*root.impl());
        root.impl()->grad[0] += 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

  private:
    std::vector<std::function<void()>> steps_;
};

namespace detail {

inline const ComputationRecord*& active_record_slot() {
    thread_local const ComputationRecord* rec = nullptr;
    return rec;
}

} // namespace detail

inline ComputationRecord* active_record() {
    return const_cast<ComputationRecord*>(detail::active_record_slot());
}

// Makes `rec` the active record for the current scope. Ops run outside any
// scope are eager: no steps recorded, outputs carry no grad metadata.
class RecordScope {
  public:
    explicit RecordScope(ComputationRecord& rec) : prev_(detail::active_record_slot()) {
        detail::active_record_slot() = &rec;
    }
    ~RecordScope() { detail::active_record_slot() = prev_; }
    RecordScope(const RecordScope&) = delete;
    RecordScope& operator=(const RecordScope&) = delete;

  private:
    const ComputationRecord* prev_;
};

namespace detail {

// Tags `out` as produced on the active record when grads can flow; returns the
// record to push the backward step onto, or nullptr for eager execution.
inline ComputationRecord* mark_output(Tensor& out, bool any_input_requires) {
    ComputationRecord* rec = active_record();
    if (!rec || !any_input_requires) return nullptr;
    out.impl()->requires_grad = true;
    out.impl()->record = rec;
    return rec;
}

using ImplPtr = std::shared_ptr<TensorImpl>;

inline bool has_out_grad(const ImplPtr& out) { return !out->grad.empty(); }

} // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (auto* rec = detail::mark_output(out, a.requires_grad() || b.requires_grad())) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, bi, oi] {
            if (!detail::has_out_grad(oi)) return;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (auto* rec = detail::mark_output(out, a.requires_grad() || b.requires_grad())) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, bi, oi] {
            if (!detail::has_out_grad(oi)) return;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (auto* rec = detail::mark_output(out, a.requires_grad() || b.requires_grad())) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, bi, oi] {
            if (!detail::has_out_grad(oi)) return;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < oi->grad.size(); ++i)
                    ai->grad[i] += oi->grad[i] * bi->value[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < oi->grad.size(); ++i)
                    bi->grad[i] += oi->grad[i] * ai->value[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    if (auto* rec = detail::mark_output(out, a.requires_grad())) {
        auto ai = a.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, oi, c] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    if (auto* rec = detail::mark_output(out, a.requires_grad())) {
        auto ai = a.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, oi] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                if (ai->value[i] > 0.0) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// ---- matrix ops ------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data()[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
                out.data()[i * n + j] += av * b.data()[p * n + j];
        }
    if (auto* rec = detail::mark_output(out, a.requires_grad() || b.requires_grad())) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, bi, oi, m, k, n] {
            if (!detail::has_out_grad(oi)) return;
            if (ai->requires_grad) { // dA = G * B^T
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = oi->grad[i * n + j];
                        if (g == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p)
                            ai->grad[i * k + p] += g * bi->value[p * n + j];
                    }
            }
            if (bi->requires_grad) { // dB = A^T * G
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = ai->value[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            bi->grad[p * n + j] += av * oi->grad[i * n + j];
                    }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(a.shape()));
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (auto* rec = detail::mark_output(out, a.requires_grad())) {
        auto ai = a.impl_ptr(), oi = out.impl_ptr();
        rec->push([ai, oi, m, n] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ai->grad[i * n + j] += oi->grad[j * m + i];
        });
    }
    return out;
}

// Affine map with the bias absorbed into the weight: x is T x d, w is
// (d+1) x p, result row i = [x_i, 1] * w.
inline Tensor linear(const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2 || w.rows() != x.cols() + 1)
        throw ShapeError("linear: " + shape_str(x.shape()) + " with weights " + shape_str(w.shape()));
    const std::size_t t = x.rows(), d = x.cols(), p = w.cols();
    Tensor out = Tensor::zeros({t, p});
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t f = 0; f < d; ++f) {
            const double xv = x.data()[i * d + f];
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) out.data()[i * p + j] += xv * w.data()[f * p + j];
        }
        for (std::size_t j = 0; j < p; ++j) out.data()[i * p + j] += w.data()[d * p + j];
    }
    if (auto* rec = detail::mark_output(out, x.requires_grad() || w.requires_grad())) {
        auto xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, wi, oi, t, d, p] {
            if (!detail::has_out_grad(oi)) return;
            if (xi->requires_grad) { // dX = G * W[0:d,:]^T
                detail::ensure_grad(*xi);
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < p; ++j) {
                        const double g = oi->grad[i * p + j];
                        if (g == 0.0) continue;
                        for (std::size_t f = 0; f < d; ++f)
                            xi->grad[i * d + f] += g * wi->value[f * p + j];
                    }
            }
            if (wi->requires_grad) { // dW = [X | 1]^T * G
                detail::ensure_grad(*wi);
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < p; ++j) {
                        const double g = oi->grad[i * p + j];
                        if (g == 0.0) continue;
                        for (std::size_t f = 0; f < d; ++f)
                            wi->grad[f * p + j] += xi->value[i * d + f] * g;
                        wi->grad[d * p + j] += g;
                    }
            }
        });
    }
    return out;
}

// Adds a length-d bias row to every row of x.
inline Tensor add_rows(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.cols())
        throw ShapeError("add_rows: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
    const std::size_t t = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t f = 0; f < d; ++f) out.data()[i * d + f] = x.data()[i * d + f] + b.data()[f];
    if (auto* rec = detail::mark_output(out, x.requires_grad() || b.requires_grad())) {
        auto xi = x.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, bi, oi, t, d] {
            if (!detail::has_out_grad(oi)) return;
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                for (std::size_t i = 0; i < t * d; ++i) xi->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t f = 0; f < d; ++f) bi->grad[f] += oi->grad[i * d + f];
            }
        });
    }
    return out;
}

// ---- softmax ---------------------------------------------------------------

// Row-wise softmax over entries whose mask is nonzero; masked entries are
// exactly 0 in the output. mask may be undefined (no masking), a length-n
// vector applied to every row, or a matrix of x's shape. A row with no valid
// entry is degenerate.
inline Tensor masked_softmax(const Tensor& x, const Tensor& mask = Tensor()) {
    if (x.rank() != 2) throw ShapeError("masked_softmax: need rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    bool row_mask = false, full_mask = false;
    if (mask.defined()) {
        if (mask.rank() == 1 && mask.dim(0) == n) row_mask = true;
        else if (mask.rank() == 2 && mask.shape() == x.shape()) full_mask = true;
        else throw ShapeError("masked_softmax: mask " + shape_str(mask.shape()) +
                              " does not fit " + shape_str(x.shape()));
    }
    auto valid = [&](std::size_t i, std::size_t j) {
        if (row_mask) return mask.data()[j] != 0.0;
        if (full_mask) return mask.data()[i * n + j] != 0.0;
        return true;
    };
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (valid(i, j)) hi = std::max(hi, x.data()[i * n + j]);
        if (hi == -std::numeric_limits<double>::infinity())
            throw NumericError("masked_softmax: row " + std::to_string(i) + " has no valid entry");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (valid(i, j)) {
                const double e = std::exp(x.data()[i * n + j] - hi);
                out.data()[i * n + j] = e;
                z += e;
            }
        for (std::size_t j = 0; j < n; ++j)
            if (valid(i, j)) out.data()[i * n + j] /= z;
    }
    if (auto* rec = detail::mark_output(out, x.requires_grad())) {
        auto xi = x.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, oi, m, n] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*xi);
            // dx_j = y_j * (g_j - sum_k g_k y_k); masked entries have y == 0.
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += oi->grad[i * n + j] * oi->value[i * n + j];
                for (std::size_t j = 0; j < n; ++j) {
                    const double y = oi->value[i * n + j];
                    if (y != 0.0) xi->grad[i * n + j] += y * (oi->grad[i * n + j] - dot);
                }
            }
        });
    }
    return out;
}

// ---- temporal convolution ---------------------------------------------------

// 1-D convolution over time with same-length zero padding. x is T x d_in,
// kernel is k x d_in x d_out with k odd; out[t] = sum_u kernel[u] applied to
// x[t + u - k/2], rows outside [0, T) read as zero.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel) {
    if (x.rank() != 2 || kernel.rank() != 3)
        throw ShapeError("conv1d: " + shape_str(x.shape()) + " with kernel " + shape_str(kernel.shape()));
    const std::size_t k = kernel.dim(0), din = kernel.dim(1), dout = kernel.dim(2);
    if (k % 2 == 0) throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(k));
    if (din != x.cols())
        throw ShapeError("conv1d: input has " + std::to_string(x.cols()) + " channels, kernel expects " +
                         std::to_string(din));
    const std::size_t t = x.rows();
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out = Tensor::zeros({t, dout});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t u = 0; u < k; ++u) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(u) - half;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
            for (std::size_t f = 0; f < din; ++f) {
                const double xv = x.data()[static_cast<std::size_t>(src) * din + f];
                if (xv == 0.0) continue;
                for (std::size_t j = 0; j < dout; ++j)
                    out.data()[i * dout + j] += xv * kernel.data()[(u * din + f) * dout + j];
            }
        }
    if (auto* rec = detail::mark_output(out, x.requires_grad() || kernel.requires_grad())) {
        auto xi = x.impl_ptr(), ki = kernel.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, ki, oi, t, k, din, dout, half] {
            if (!detail::has_out_grad(oi)) return;
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t u = 0; u < k; ++u) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(u) - half;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
                    const std::size_t s = static_cast<std::size_t>(src);
                    for (std::size_t f = 0; f < din; ++f) {
                        for (std::size_t j = 0; j < dout; ++j) {
                            const double g = oi->grad[i * dout + j];
                            if (g == 0.0) continue;
                            if (xi->requires_grad) {
                                detail::ensure_grad(*xi);
                                xi->grad[s * din + f] += g * ki->value[(u * din + f) * dout + j];
                            }
                            if (ki->requires_grad) {
                                detail::ensure_grad(*ki);
                                ki->grad[(u * din + f) * dout + j] += g * xi->value[s * din + f];
                            }
                        }
                    }
                }
        });
    }
    return out;
}

// ---- shape ops ---------------------------------------------------------------

// axis 0 stacks rows, axis 1 stacks columns.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
    for (const Tensor& p : parts)
        if (p.rank() != 2) throw ShapeError("concat: need rank 2, got " + shape_str(p.shape()));
    std::size_t rows = parts[0].rows(), cols = parts[0].cols();
    for (std::size_t i = 1; i < parts.size(); ++i) {
        if (axis == 0) {
            if (parts[i].cols() != cols)
                throw ShapeError("concat axis 0: column mismatch " + shape_str(parts[i].shape()));
            rows += parts[i].rows();
        } else {
            if (parts[i].rows() != rows)
                throw ShapeError("concat axis 1: row mismatch " + shape_str(parts[i].shape()));
            cols += parts[i].cols();
        }
    }
    Tensor out = Tensor::zeros({rows, cols});
    bool any_req = false;
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        any_req = any_req || p.requires_grad();
        if (axis == 0) {
            std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * cols);
            off += p.rows();
        } else {
            for (std::size_t i = 0; i < rows; ++i)
                std::copy(p.data().begin() + i * p.cols(), p.data().begin() + (i + 1) * p.cols(),
                          out.data().begin() + i * cols + off);
            off += p.cols();
        }
    }
    if (auto* rec = detail::mark_output(out, any_req)) {
        std::vector<detail::ImplPtr> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
        auto oi = out.impl_ptr();
        rec->push([impls, oi, axis, rows, cols] {
            if (!detail::has_out_grad(oi)) return;
            std::size_t off = 0;
            for (const auto& pi : impls) {
                const std::size_t pr = pi->shape[0], pc = pi->shape[1];
                if (pi->requires_grad) {
                    detail::ensure_grad(*pi);
                    if (axis == 0) {
                        for (std::size_t i = 0; i < pr * pc; ++i)
                            pi->grad[i] += oi->grad[off * cols + i];
                    } else {
                        for (std::size_t i = 0; i < pr; ++i)
                            for (std::size_t j = 0; j < pc; ++j)
                                pi->grad[i * pc + j] += oi->grad[i * cols + off + j];
                    }
                }
                off += (axis == 0) ? pr : pc;
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.rank() != 2) throw ShapeError("slice_rows: need rank 2");
    if (begin > end || end > x.rows())
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + std::to_string(x.rows()) + " rows");
    const std::size_t d = x.cols();
    Tensor out = Tensor::zeros({end - begin, d});
    std::copy(x.data().begin() + begin * d, x.data().begin() + end * d, out.data().begin());
    if (auto* rec = detail::mark_output(out, x.requires_grad())) {
        auto xi = x.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, oi, begin, d] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*xi);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[begin * d + i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    if (x.rank() != 2) throw ShapeError("slice_cols: need rank 2");
    if (begin > end || end > x.cols())
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + std::to_string(x.cols()) + " columns");
    const std::size_t t = x.rows(), d = x.cols(), w = end - begin;
    Tensor out = Tensor::zeros({t, w});
    for (std::size_t i = 0; i < t; ++i)
        std::copy(x.data().begin() + i * d + begin, x.data().begin() + i * d + end,
                  out.data().begin() + i * w);
    if (auto* rec = detail::mark_output(out, x.requires_grad())) {
        auto xi = x.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, oi, begin, t, d, w] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*xi);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    xi->grad[i * d + begin + j] += oi->grad[i * w + j];
        });
    }
    return out;
}

// Row gather; rows may repeat, backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    if (x.rank() != 2) throw ShapeError("gather_rows: need rank 2");
    for (std::size_t i : idx)
        if (i >= x.rows()) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
    const std::size_t d = x.cols();
    Tensor out = Tensor::zeros({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(x.data().begin() + idx[r] * d, x.data().begin() + (idx[r] + 1) * d,
                  out.data().begin() + r * d);
    if (auto* rec = detail::mark_output(out, x.requires_grad())) {
        auto xi = x.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, oi, idx, d] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*xi);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t f = 0; f < d; ++f) xi->grad[idx[r] * d + f] += oi->grad[r * d + f];
        });
    }
    return out;
}

// ---- reductions --------------------------------------------------------------

// Mean over rows whose mask entry is nonzero; result is 1 x d. Undefined mask
// averages every row.
inline Tensor masked_mean_rows(const Tensor& x, const Tensor& mask = Tensor()) {
    if (x.rank() != 2) throw ShapeError("masked_mean_rows: need rank 2");
    const std::size_t t = x.rows(), d = x.cols();
    if (mask.defined() && (mask.rank() != 1 || mask.dim(0) != t))
        throw ShapeError("masked_mean_rows: mask " + shape_str(mask.shape()) + " for " +
                         shape_str(x.shape()));
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < t; ++i)
        if (!mask.defined() || mask.data()[i] != 0.0) keep.push_back(i);
    if (keep.empty()) throw NumericError("masked_mean_rows: no valid rows");
    const double inv = 1.0 / double(keep.size());
    Tensor out = Tensor::zeros({1, d});
    for (std::size_t i : keep)
        for (std::size_t f = 0; f < d; ++f) out.data()[f] += x.data()[i * d + f] * inv;
    if (auto* rec = detail::mark_output(out, x.requires_grad())) {
        auto xi = x.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, oi, keep, d, inv] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*xi);
            for (std::size_t i : keep)
                for (std::size_t f = 0; f < d; ++f) xi->grad[i * d + f] += oi->grad[f] * inv;
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (auto* rec = detail::mark_output(out, x.requires_grad())) {
        auto xi = x.impl_ptr(), oi = out.impl_ptr();
        rec->push([xi, oi] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*xi);
            for (double& g : xi->grad) g += oi->grad[0];
        });
    }
    return out;
}

// Negative log of probs[target]; probs is a 1 x n (or length-n) distribution.
inline Tensor nll(const Tensor& probs, std::size_t target) {
    if (probs.rank() > 2 || (probs.rank() == 2 && probs.rows() != 1))
        throw ShapeError("nll: need a single distribution, got " + shape_str(probs.shape()));
    if (target >= probs.size()) throw ShapeError("nll: target " + std::to_string(target) + " out of range");
    const double p = probs.data()[target];
    if (p <= 0.0) throw NumericError("nll: probability at target is not positive");
    Tensor out = Tensor::scalar(-std::log(p));
    if (auto* rec = detail::mark_output(out, probs.requires_grad())) {
        auto pi = probs.impl_ptr(), oi = out.impl_ptr();
        rec->push([pi, oi, target, p] {
            if (!detail::has_out_grad(oi)) return;
            detail::ensure_grad(*pi);
            pi->grad[target] += oi->grad[0] * (-1.0 / p);
        });
    }
    return out;
}

inline void zero_grads(const std::vector<Tensor>& params) {
    for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
}

} // namespace deltafusion
