#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "iisan/errors.hpp"
#include "iisan/rng.hpp"

namespace iisan {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
};

// Dense tensor with value semantics over a shared immutable payload.
// Mutation is only expected during initialization and optimizer updates.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        impl->shape = std::move(shape);
        impl->values.assign(n, 0.0);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        if (n != values.size())
            throw ShapeError("tensor init: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->values = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->values) v = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->values.size(); }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t rows() const { return impl_->shape.size() == 2 ? impl_->shape[0] : 1; }
    std::size_t cols() const { return impl_->shape.back(); }
    std::size_t bytes() const { return numel() * sizeof(double); }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    const std::vector<double>& values() const { return impl_->values; }
    std::vector<double>& mutable_values() { return impl_->values; }
    double item() const { return impl_->values.at(0); }
    double at(std::size_t i) const { return impl_->values[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->values[r * cols() + c]; }

    const TensorImpl* id() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

    bool all_finite() const {
        for (double v : impl_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

enum class OpKind {
    matmul, add, mul, concat, slice, transpose, softmax, layernorm,
    gelu, relu, sigmoid, embed_lookup, scale, log, gather, mean_all
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::transpose: return "transpose";
        case OpKind::softmax: return "softmax";
        case OpKind::layernorm: return "layernorm";
        case OpKind::gelu: return "gelu";
        case OpKind::relu: return "relu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::embed_lookup: return "embed_lookup";
        case OpKind::scale: return "scale";
        case OpKind::log: return "log";
        case OpKind::gather: return "gather";
        case OpKind::mean_all: return "mean_all";
    }
    return "?";
}

// Gradient buffers keyed by tensor identity, populated during backward.
class GradStore {
public:
    std::vector<double>& accum(const std::shared_ptr<TensorImpl>& t) {
        auto& g = grads_[t.get()];
        if (g.empty()) g.assign(t->values.size(), 0.0);
        return g;
    }

    const std::vector<double>* find(const TensorImpl* t) const {
        auto it = grads_.find(t);
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::unordered_map<const TensorImpl*, std::vector<double>>& raw() { return grads_; }

private:
    std::unordered_map<const TensorImpl*, std::vector<double>> grads_;
};

// Gradients for the trainable leaves of one backward pass.
class GradMap {
public:
    void insert(const Tensor& t, std::vector<double> g) { grads_[t.id()] = std::move(g); }

    const std::vector<double>* find(const Tensor& t) const {
        auto it = grads_.find(t.id());
        return it == grads_.end() ? nullptr : &it->second;
    }

    bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<const TensorImpl*, std::vector<double>> grads_;
};

struct TapeNode {
    OpKind kind;
    std::size_t retained_bytes;
    std::function<void(GradStore&)> backward;
};

struct TapeStats {
    std::size_t node_count = 0;
    std::size_t retained_bytes = 0;
};

// Records only operations whose output transitively depends on a
// trainable tensor; a fully frozen forward pass leaves the tape empty.
class Tape {
public:
    void record(OpKind kind, std::initializer_list<Tensor> inputs, const Tensor& output,
                std::function<void(GradStore&)> backward) {
        record_vec(kind, std::vector<Tensor>(inputs), output, std::move(backward));
    }

    void record_vec(OpKind kind, const std::vector<Tensor>& inputs, const Tensor& output,
                    std::function<void(GradStore&)> backward) {
        std::size_t retained = output.bytes();
        for (const auto& in : inputs) {
            retained += in.bytes();
            if (in.requires_grad() && produced_.count(in.id()) == 0) {
                if (leaf_ids_.insert(in.id()).second) leaves_.push_back(in);
            }
        }
        produced_.insert(output.id());
        retained_bytes_ += retained;
        nodes_.push_back({kind, retained, std::move(backward)});
    }

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t retained_bytes() const { return retained_bytes_; }
    std::size_t peak_retained_bytes() const { return retained_bytes_; }
    bool consumed() const { return consumed_; }
    TapeStats stats() const { return {nodes_.size(), retained_bytes_}; }

    bool produced(const TensorImpl* t) const { return produced_.count(t) != 0; }

    GradMap run_backward(const Tensor& loss) {
        if (consumed_) throw TapeError("backward called on a consumed tape");
        if (loss.numel() != 1) throw TapeError("backward requires a scalar loss");
        consumed_ = true;
        GradStore store;
        store.accum(loss.impl())[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward(store);
        GradMap out;
        for (const auto& leaf : leaves_) {
            if (const auto* g = store.find(leaf.id())) out.insert(leaf, *g);
        }
        if (loss.requires_grad() && produced_.count(loss.id()) == 0 && !out.contains(loss))
            out.insert(loss, {1.0});
        nodes_.clear();
        return out;
    }

private:
    std::vector<TapeNode> nodes_;
    std::unordered_set<const TensorImpl*> produced_;
    std::unordered_set<const TensorImpl*> leaf_ids_;
    std::vector<Tensor> leaves_;
    std::size_t retained_bytes_ = 0;
    bool consumed_ = false;
};

inline GradMap backward(Tape& tape, const Tensor& loss) { return tape.run_backward(loss); }

namespace detail {

inline void shape_check(bool ok, OpKind kind, const Shape& a, const Shape& b) {
    if (!ok)
        throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) +
                         " and " + shape_str(b));
}

inline bool should_record(Tape* tape, bool any_rg) { return tape != nullptr && any_rg; }

}  // namespace detail

// ---- operations -----------------------------------------------------------

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::shape_check(a.ndim() == 2 && b.ndim() == 2 && a.shape()[1] == b.shape()[0],
                        OpKind::matmul, a.shape(), b.shape());
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor out = Tensor::zeros({n, m}, a.requires_grad() || b.requires_grad());
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.mutable_values().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            if (av == 0.0) continue;
            const double* brow = pb + l * m;
            double* orow = po + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    if (detail::should_record(tape, out.requires_grad())) {
        const bool need_da = a.requires_grad();
        const bool need_db = b.requires_grad();
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(OpKind::matmul, {a, b}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            if (need_da) {
                auto& ga = gs.accum(ai);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double s = 0.0;
                        const double* gr = gout->data() + i * m;
                        const double* br = bi->values.data() + l * m;
                        for (std::size_t j = 0; j < m; ++j) s += gr[j] * br[j];
                        ga[i * k + l] += s;
                    }
            }
            if (need_db) {
                auto& gb = gs.accum(bi);
                for (std::size_t l = 0; l < k; ++l)
                    for (std::size_t i = 0; i < n; ++i) {
                        const double av = ai->values[i * k + l];
                        if (av == 0.0) continue;
                        const double* gr = gout->data() + i * m;
                        double* gbr = gb.data() + l * m;
                        for (std::size_t j = 0; j < m; ++j) gbr[j] += av * gr[j];
                    }
            }
        });
    }
    return out;
}

// add supports equal shapes, row-broadcast ([n x m] + [m]) and scalar b.
inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    enum class Mode { same, rowvec, scalar } mode;
    if (a.shape() == b.shape()) {
        mode = Mode::same;
    } else if (b.numel() == 1) {
        mode = Mode::scalar;
    } else if (a.ndim() == 2 && b.ndim() == 1 && b.numel() == a.shape()[1]) {
        mode = Mode::rowvec;
    } else {
        detail::shape_check(false, OpKind::add, a.shape(), b.shape());
        mode = Mode::same;
    }
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad() || b.requires_grad());
    const std::size_t n = a.numel(), m = b.numel();
    for (std::size_t i = 0; i < n; ++i) {
        double bv = mode == Mode::same ? b.at(i) : mode == Mode::scalar ? b.at(0) : b.at(i % m);
        out.mutable_values()[i] = a.at(i) + bv;
    }
    if (detail::should_record(tape, out.requires_grad())) {
        const bool need_da = a.requires_grad();
        const bool need_db = b.requires_grad();
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(OpKind::add, {a, b}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            if (need_da) {
                auto& ga = gs.accum(ai);
                for (std::size_t i = 0; i < n; ++i) ga[i] += (*gout)[i];
            }
            if (need_db) {
                auto& gb = gs.accum(bi);
                if (mode == Mode::same)
                    for (std::size_t i = 0; i < n; ++i) gb[i] += (*gout)[i];
                else if (mode == Mode::scalar)
                    for (std::size_t i = 0; i < n; ++i) gb[0] += (*gout)[i];
                else
                    for (std::size_t i = 0; i < n; ++i) gb[i % m] += (*gout)[i];
            }
        });
    }
    return out;
}

// mul supports equal shapes, row-broadcast and scalar operands (either side).
inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.numel() == 1 && b.numel() != 1) return mul(tape, b, a);
    enum class Mode { same, rowvec, scalar } mode;
    if (a.shape() == b.shape()) {
        mode = Mode::same;
    } else if (b.numel() == 1) {
        mode = Mode::scalar;
    } else if (a.ndim() == 2 && b.ndim() == 1 && b.numel() == a.shape()[1]) {
        mode = Mode::rowvec;
    } else {
        detail::shape_check(false, OpKind::mul, a.shape(), b.shape());
        mode = Mode::same;
    }
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad() || b.requires_grad());
    const std::size_t n = a.numel(), m = b.numel();
    auto bval = [&](std::size_t i) {
        return mode == Mode::same ? b.at(i) : mode == Mode::scalar ? b.at(0) : b.at(i % m);
    };
    for (std::size_t i = 0; i < n; ++i) out.mutable_values()[i] = a.at(i) * bval(i);
    if (detail::should_record(tape, out.requires_grad())) {
        const bool need_da = a.requires_grad();
        const bool need_db = b.requires_grad();
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(OpKind::mul, {a, b}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto bv = [&](std::size_t i) {
                return mode == Mode::same ? bi->values[i]
                       : mode == Mode::scalar ? bi->values[0]
                                              : bi->values[i % m];
            };
            if (need_da) {
                auto& ga = gs.accum(ai);
                for (std::size_t i = 0; i < n; ++i) ga[i] += (*gout)[i] * bv(i);
            }
            if (need_db) {
                auto& gb = gs.accum(bi);
                if (mode == Mode::same)
                    for (std::size_t i = 0; i < n; ++i) gb[i] += (*gout)[i] * ai->values[i];
                else if (mode == Mode::scalar)
                    for (std::size_t i = 0; i < n; ++i) gb[0] += (*gout)[i] * ai->values[i];
                else
                    for (std::size_t i = 0; i < n; ++i) gb[i % m] += (*gout)[i] * ai->values[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_values()[i] = a.at(i) * c;
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        const std::size_t n = a.numel();
        tape->record(OpKind::scale, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*gout)[i] * c;
        });
    }
    return out;
}

// concat along axis 0: stacks 1-D inputs into rows or concatenates 2-D blocks;
// along axis 1: concatenates 2-D blocks column-wise (equal row counts).
inline Tensor concat(Tape* tape, const std::vector<Tensor>& parts, std::size_t axis = 0) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    bool any_rg = false;
    for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
    Tensor out;
    std::vector<std::size_t> offsets;
    if (axis == 0) {
        std::size_t cols = parts[0].cols();
        std::size_t rows = 0;
        for (const auto& p : parts) {
            detail::shape_check(p.cols() == cols && p.ndim() <= 2, OpKind::concat,
                                parts[0].shape(), p.shape());
            rows += p.ndim() == 1 ? 1 : p.shape()[0];
        }
        out = Tensor::zeros({rows, cols}, any_rg);
        std::size_t off = 0;
        for (const auto& p : parts) {
            offsets.push_back(off);
            std::copy(p.values().begin(), p.values().end(), out.mutable_values().begin() + off);
            off += p.numel();
        }
    } else {
        std::size_t rows = parts[0].ndim() == 1 ? 1 : parts[0].shape()[0];
        std::size_t cols = 0;
        for (const auto& p : parts) {
            std::size_t prows = p.ndim() == 1 ? 1 : p.shape()[0];
            detail::shape_check(prows == rows, OpKind::concat, parts[0].shape(), p.shape());
            cols += p.cols();
        }
        Shape oshape = parts[0].ndim() == 1 ? Shape{cols} : Shape{rows, cols};
        out = Tensor::zeros(oshape, any_rg);
        std::size_t coff = 0;
        for (const auto& p : parts) {
            offsets.push_back(coff);
            const std::size_t pc = p.cols();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < pc; ++c)
                    out.mutable_values()[r * cols + coff + c] = p.values()[r * pc + c];
            coff += pc;
        }
    }
    if (tape != nullptr && any_rg) {
        auto oi = out.impl();
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        const std::size_t ocols = out.cols();
        tape->record_vec(OpKind::concat, parts, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                const auto& im = impls[pi];
                if (!im->requires_grad) continue;
                auto& g = gs.accum(im);
                const std::size_t n = im->values.size();
                if (axis == 0) {
                    const std::size_t off = offsets[pi];
                    for (std::size_t i = 0; i < n; ++i) g[i] += (*gout)[off + i];
                } else {
                    const std::size_t pc =
                        im->shape.size() == 1 ? im->shape[0] : im->shape[1];
                    const std::size_t rows = n / pc;
                    const std::size_t coff = offsets[pi];
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < pc; ++c)
                            g[r * pc + c] += (*gout)[r * ocols + coff + c];
                }
            }
        });
    }
    return out;
}

inline Tensor slice(Tape* tape, const Tensor& a, std::size_t axis, std::size_t start,
                    std::size_t len) {
    Tensor out;
    const std::size_t rows = a.ndim() == 2 ? a.shape()[0] : 1;
    const std::size_t cols = a.cols();
    if (axis == 0) {
        detail::shape_check(a.ndim() == 2 && start + len <= rows, OpKind::slice, a.shape(),
                            {start, len});
        out = Tensor::zeros({len, cols}, a.requires_grad());
        std::copy(a.values().begin() + start * cols, a.values().begin() + (start + len) * cols,
                  out.mutable_values().begin());
    } else {
        detail::shape_check(start + len <= cols, OpKind::slice, a.shape(), {start, len});
        Shape oshape = a.ndim() == 1 ? Shape{len} : Shape{rows, len};
        out = Tensor::zeros(oshape, a.requires_grad());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < len; ++c)
                out.mutable_values()[r * len + c] = a.values()[r * cols + start + c];
    }
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        tape->record(OpKind::slice, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            if (axis == 0) {
                for (std::size_t i = 0; i < len * cols; ++i) ga[start * cols + i] += (*gout)[i];
            } else {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < len; ++c)
                        ga[r * cols + start + c] += (*gout)[r * len + c];
            }
        });
    }
    return out;
}

inline Tensor transpose(Tape* tape, const Tensor& a) {
    detail::shape_check(a.ndim() == 2, OpKind::transpose, a.shape(), a.shape());
    const std::size_t n = a.shape()[0], m = a.shape()[1];
    Tensor out = Tensor::zeros({m, n}, a.requires_grad());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.mutable_values()[j * n + i] = a.values()[i * m + j];
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        tape->record(OpKind::transpose, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += (*gout)[j * n + i];
        });
    }
    return out;
}

// softmax over the last axis
inline Tensor softmax(Tape* tape, const Tensor& a) {
    const std::size_t cols = a.cols();
    const std::size_t rows = a.numel() / cols;
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = a.values().data() + r * cols;
        double* o = out.mutable_values().data() + r * cols;
        double mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
    }
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        tape->record(OpKind::softmax, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = oi->values.data() + r * cols;
                const double* gy = gout->data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[c] * (gy[c] - dot);
            }
        });
    }
    return out;
}

// mean 0 / variance 1 normalization over the last axis (affine applied
// separately through mul/add with parameter tensors)
inline Tensor layernorm(Tape* tape, const Tensor& a, double eps = 1e-5) {
    const std::size_t cols = a.cols();
    const std::size_t rows = a.numel() / cols;
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
    std::vector<double> inv_sigma(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = a.values().data() + r * cols;
        double* o = out.mutable_values().data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += in[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mean) * is;
    }
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        tape->record(OpKind::layernorm, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = oi->values.data() + r * cols;
                const double* gy = gout->data() + r * cols;
                double gmean = 0.0, gydot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    gmean += gy[c];
                    gydot += gy[c] * y[c];
                }
                gmean /= static_cast<double>(cols);
                gydot /= static_cast<double>(cols);
                for (std::size_t c = 0; c < cols; ++c)
                    ga[r * cols + c] += inv_sigma[r] * (gy[c] - gmean - y[c] * gydot);
            }
        });
    }
    return out;
}

namespace detail {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_bwd(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace detail

inline Tensor unary_op(Tape* tape, const Tensor& a, OpKind kind, double (*fwd)(double),
                       double (*bwd_from_xy)(double, double)) {
    Tensor out = Tensor::zeros(a.shape(), a.requires_grad());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_values()[i] = fwd(a.at(i));
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        const std::size_t n = a.numel();
        tape->record(kind, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t i = 0; i < n; ++i)
                ga[i] += (*gout)[i] * bwd_from_xy(ai->values[i], oi->values[i]);
        });
    }
    return out;
}

inline Tensor gelu(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, OpKind::gelu, [](double x) { return detail::gelu_fwd(x); },
                    [](double x, double) { return detail::gelu_bwd(x); });
}

inline Tensor relu(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, OpKind::relu, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, OpKind::sigmoid,
                    [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log_op(Tape* tape, const Tensor& a) {
    return unary_op(tape, a, OpKind::log, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

inline Tensor embed_lookup(Tape* tape, const Tensor& table, const std::vector<std::size_t>& ids) {
    detail::shape_check(table.ndim() == 2, OpKind::embed_lookup, table.shape(), {ids.size()});
    const std::size_t d = table.shape()[1];
    const std::size_t v = table.shape()[0];
    Tensor out = Tensor::zeros({ids.size(), d}, table.requires_grad());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v)
            throw ShapeError("embed_lookup: id " + std::to_string(ids[i]) + " out of range " +
                             shape_str(table.shape()));
        std::copy(table.values().begin() + ids[i] * d, table.values().begin() + (ids[i] + 1) * d,
                  out.mutable_values().begin() + i * d);
    }
    if (detail::should_record(tape, out.requires_grad())) {
        auto ti = table.impl(), oi = out.impl();
        auto idx = ids;
        tape->record(OpKind::embed_lookup, {table}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& gt = gs.accum(ti);
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t c = 0; c < d; ++c) gt[idx[i] * d + c] += (*gout)[i * d + c];
        });
    }
    return out;
}

// picks values()[r * cols + idx[r]] for each row -> 1-D tensor of length rows
inline Tensor gather(Tape* tape, const Tensor& a, const std::vector<std::size_t>& idx) {
    const std::size_t cols = a.cols();
    const std::size_t rows = a.numel() / cols;
    detail::shape_check(idx.size() == rows, OpKind::gather, a.shape(), {idx.size()});
    Tensor out = Tensor::zeros({rows}, a.requires_grad());
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] >= cols)
            throw ShapeError("gather: index out of range in " + shape_str(a.shape()));
        out.mutable_values()[r] = a.values()[r * cols + idx[r]];
    }
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        auto ix = idx;
        tape->record(OpKind::gather, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t r = 0; r < ix.size(); ++r) ga[r * cols + ix[r]] += (*gout)[r];
        });
    }
    return out;
}

inline Tensor mean_all(Tape* tape, const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i);
    Tensor out = Tensor::scalar(s / static_cast<double>(a.numel()));
    out.set_requires_grad(a.requires_grad());
    if (detail::should_record(tape, out.requires_grad())) {
        auto ai = a.impl(), oi = out.impl();
        const double inv = 1.0 / static_cast<double>(a.numel());
        const std::size_t n = a.numel();
        tape->record(OpKind::mean_all, {a}, out, [=](GradStore& gs) {
            const auto* gout = gs.find(oi.get());
            if (!gout) return;
            auto& ga = gs.accum(ai);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*gout)[0] * inv;
        });
    }
    return out;
}

inline Tensor sum_all(Tape* tape, const Tensor& a) {
    return scale(tape, mean_all(tape, a), static_cast<double>(a.numel()));
}

}  // namespace iisan
