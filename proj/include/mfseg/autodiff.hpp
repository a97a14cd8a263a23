#pragma once

// Dense 64-bit arrays and a define-by-run tape for reverse-mode differentiation.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mfseg {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Row-major dense buffer. A rank-0 shape is a scalar holding one element.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
    Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw DimensionError("array data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static Array scalar(double v) { return Array(Shape{}, {v}); }
    static Array vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Array({n}, std::move(v));
    }
    static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Array({rows, cols}, std::move(v));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : data.size() / (shape[0] ? shape[0] : 1); }

    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool operator==(const Array&) const = default;
};

/// Immutable handle to an array, optionally tied to a node on a Tape.
/// Values without a node are constants: gradients never flow into them.
class Value {
public:
    Value() : array_(std::make_shared<const Array>()) {}
    explicit Value(Array a) : array_(std::make_shared<const Array>(std::move(a))) {}

    const Array& array() const { return *array_; }
    const Shape& shape() const { return array_->shape; }
    std::span<const double> data() const { return array_->data; }
    std::size_t size() const { return array_->size(); }
    std::size_t rows() const { return array_->rows(); }
    std::size_t cols() const { return array_->cols(); }
    std::optional<std::size_t> node() const { return node_; }
    bool is_constant() const { return !node_.has_value(); }

    double item() const {
        if (array_->size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
        return array_->data[0];
    }

    /// Same data, detached from any tape.
    Value detach() const {
        Value v;
        v.array_ = array_;
        return v;
    }

private:
    friend class Tape;
    std::shared_ptr<const Array> array_;
    std::optional<std::size_t> node_;
};

/// Append-only record of operations. Nodes only reference earlier nodes, so a
/// reverse sweep over node ids is a valid topological order.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::span<const double> upstream)>;

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    /// Leaf that receives a gradient. On a non-recording tape this is a constant.
    Value variable(Array a) {
        Value v(std::move(a));
        if (recording_) {
            v.node_ = nodes_.size();
            nodes_.push_back(Node{{}, v.shape(), nullptr});
        }
        return v;
    }

    bool needs_grad(const Value& v) const { return recording_ && v.node_.has_value(); }

    /// Registers the result of an op. Returns a constant when no input needs a gradient.
    Value record(Array out, std::initializer_list<const Value*> inputs, BackwardFn fn) {
        std::vector<std::size_t> ids;
        for (const Value* in : inputs)
            if (needs_grad(*in)) ids.push_back(*in->node_);
        return record_ids(std::move(out), std::move(ids), std::move(fn));
    }

    Value record(Array out, std::span<const Value> inputs, BackwardFn fn) {
        std::vector<std::size_t> ids;
        for (const Value& in : inputs)
            if (needs_grad(in)) ids.push_back(*in.node_);
        return record_ids(std::move(out), std::move(ids), std::move(fn));
    }

    /// Adds `g` into the gradient buffer of `v`; no-op for constants.
    void accumulate(const Value& v, std::span<const double> g) {
        if (!needs_grad(v)) return;
        auto& buf = grad_buffer(*v.node_);
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }

    /// Writable gradient buffer for `v`, zero-initialized on first access.
    std::vector<double>& grad_ref(const Value& v) {
        if (!needs_grad(v)) throw std::logic_error("grad_ref on a value without a tape node");
        return grad_buffer(*v.node_);
    }

    void backward(const Value& root) {
        if (root.size() != 1)
            throw DimensionError("backward root must be scalar, got " + shape_str(root.shape()));
        grads_.assign(nodes_.size(), {});
        if (!needs_grad(root)) return;
        const std::size_t start = *root.node_;
        grad_buffer(start)[0] = 1.0;
        for (std::size_t id = start + 1; id-- > 0;) {
            auto& node = nodes_[id];
            if (!node.backward || grads_[id].empty()) continue;
            // The upstream buffer stays alive: ops only write to strictly earlier nodes.
            node.backward(*this, std::span<const double>(grads_[id]));
        }
    }

    /// Gradient of the last backward root w.r.t. `v`; all zeros when unreached.
    std::vector<double> grad(const Value& v) const {
        if (!needs_grad(v)) return std::vector<double>(v.size(), 0.0);
        const std::size_t id = *v.node_;
        if (id >= grads_.size() || grads_[id].empty()) return std::vector<double>(v.size(), 0.0);
        return grads_[id];
    }

private:
    struct Node {
        std::vector<std::size_t> inputs;
        Shape shape;
        BackwardFn backward;
    };

    Value record_ids(Array out, std::vector<std::size_t> ids, BackwardFn fn) {
        Value v(std::move(out));
        if (!recording_ || ids.empty()) return v;
        v.node_ = nodes_.size();
        nodes_.push_back(Node{std::move(ids), v.shape(), std::move(fn)});
        return v;
    }

    std::vector<double>& grad_buffer(std::size_t id) {
        if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
        auto& buf = grads_[id];
        if (buf.empty()) buf.assign(numel(nodes_[id].shape), 0.0);
        return buf;
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

}  // namespace mfseg
