// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors and a per-pass reverse-mode tape.
//
// A Tensor is a shape plus a shared float buffer. Copies share storage; use
// clone() for a deep copy. Trainable leaves own a gradient buffer
// (set_requires_grad). Nothing is recorded unless a Tape is involved: a leaf
// enters a tape through Tape::watch(), and every op whose inputs include a
// taped tensor appends one node to that tape. The tape is the only owner of
// graph state, so discarding it (clear() or destruction) drops the whole graph.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace upl {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative extent in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

/// Gradient buffers of a node's inputs; null for inputs that are not taped.
using GradRefs = std::vector<std::vector<float>*>;
using BackwardFn = std::function<void(const std::vector<float>& grad_out, GradRefs& grad_in)>;

struct Node {
    std::vector<int> inputs;  // node ids, -1 for constants
    std::size_t numel = 0;
    std::vector<float> grad;  // lazily allocated
    BackwardFn backward;      // empty for leaves
    std::shared_ptr<std::vector<float>> leaf_grad;  // set for watched leaves
};

struct TapeImpl {
    std::vector<Node> nodes;
    std::uint64_t generation = 1;
    std::unordered_map<const void*, int> watched;  // leaf storage -> node id
};

}  // namespace detail

class Tape;
class Tensor;
void backward(const Tensor& scalar);

class Tensor {
   public:
    Tensor() : data_(std::make_shared<std::vector<float>>()) {}

    explicit Tensor(Shape shape, float fill = 0.0f)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<float>>(shape_numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)) {
        if (values.size() != shape_numel(shape_)) {
            throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape_));
        }
        data_ = std::make_shared<std::vector<float>>(std::move(values));
    }

    static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    std::size_t numel() const { return data_->size(); }

    std::span<const float> data() const { return *data_; }
    /// Writes go to the shared buffer; every copy of this tensor observes them.
    std::span<float> mutable_data() { return *data_; }
    const std::vector<float>& values() const { return *data_; }

    float operator[](std::size_t i) const { return (*data_)[i]; }
    float item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return (*data_)[0];
    }

    /// Deep copy of values (and gradient buffer, if any); never taped.
    Tensor clone() const {
        Tensor t(shape_, *data_);
        if (grad_) t.grad_ = std::make_shared<std::vector<float>>(*grad_);
        return t;
    }

    /// Same storage, no tape link, no gradient buffer.
    Tensor detach() const {
        Tensor t = *this;
        t.tape_.reset();
        t.node_ = -1;
        t.grad_.reset();
        return t;
    }

    /// Same storage, new shape of equal element count.
    Tensor reshaped(Shape s) const;

    bool requires_grad() const { return grad_ != nullptr; }
    Tensor& set_requires_grad(bool on) {
        if (on && !grad_) grad_ = std::make_shared<std::vector<float>>(numel(), 0.0f);
        if (!on) grad_.reset();
        return *this;
    }
    bool has_grad() const { return grad_ != nullptr; }
    std::span<const float> grad() const {
        if (!grad_) throw std::logic_error("tensor has no gradient buffer");
        return *grad_;
    }
    std::span<float> mutable_grad() {
        if (!grad_) throw std::logic_error("tensor has no gradient buffer");
        return *grad_;
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
    }

    bool is_taped() const;
    const void* storage_id() const { return data_.get(); }

   private:
    friend class Tape;
    friend void backward(const Tensor& scalar);
    friend Tensor make_result(Tensor out, std::initializer_list<const Tensor*> inputs, detail::BackwardFn fn);
    friend Tensor make_result_v(Tensor out, const std::vector<const Tensor*>& inputs, detail::BackwardFn fn);

    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
    std::shared_ptr<std::vector<float>> grad_;
    std::shared_ptr<detail::TapeImpl> tape_;
    std::uint64_t generation_ = 0;
    int node_ = -1;
};

/// Records operations applied to watched leaves during one forward pass.
class Tape {
   public:
    Tape() : impl_(std::make_shared<detail::TapeImpl>()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() { clear(); }

    /// Returns a view of `leaf` that participates in this tape. Gradients
    /// reaching it are accumulated into the leaf's gradient buffer by
    /// backward(). Watching the same storage twice returns the same node.
    Tensor watch(const Tensor& leaf) {
        if (!leaf.requires_grad()) throw std::logic_error("watch() requires a leaf with requires_grad");
        if (leaf.is_taped()) throw std::logic_error("watch() called on a non-leaf tensor");
        Tensor view = leaf;
        auto it = impl_->watched.find(leaf.storage_id());
        int id;
        if (it != impl_->watched.end()) {
            id = it->second;
        } else {
            detail::Node n;
            n.numel = leaf.numel();
            n.leaf_grad = leaf.grad_;
            impl_->nodes.push_back(std::move(n));
            id = static_cast<int>(impl_->nodes.size()) - 1;
            impl_->watched.emplace(leaf.storage_id(), id);
        }
        view.tape_ = impl_;
        view.generation_ = impl_->generation;
        view.node_ = id;
        return view;
    }

    std::size_t size() const { return impl_->nodes.size(); }

    /// Reverse replay from a one-element tensor. Each node's backward runs at
    /// most once, after every consumer has contributed to its gradient.
    void backward(const Tensor& scalar) {
        if (scalar.tape_ != impl_) throw std::logic_error("backward() on a tensor not recorded by this tape");
        upl::backward(scalar);
    }

    /// Drops every node. Tensors still linked to the cleared generation are
    /// rejected by later ops instead of reading freed graph state.
    void clear() {
        impl_->nodes.clear();
        impl_->watched.clear();
        ++impl_->generation;
    }

   private:
    std::shared_ptr<detail::TapeImpl> impl_;
};

inline bool Tensor::is_taped() const { return tape_ != nullptr && node_ >= 0; }

/// Reverse replay from a one-element taped tensor. Nodes are visited in
/// reverse creation order, which is a reverse topological order, so each
/// node's backward runs once, after all its consumers have contributed.
inline void backward(const Tensor& scalar) {
    if (scalar.numel() != 1) {
        throw ShapeError("backward() needs a one-element tensor, got " + shape_str(scalar.shape()));
    }
    if (!scalar.tape_ || scalar.node_ < 0) throw std::logic_error("backward() on an untaped tensor");
    auto& impl = *scalar.tape_;
    if (scalar.generation_ != impl.generation) throw std::logic_error("backward() on a cleared tape");
    auto& nodes = impl.nodes;
    nodes[static_cast<std::size_t>(scalar.node_)].grad.assign(1, 1.0f);
    detail::GradRefs refs;
    for (int i = scalar.node_; i >= 0; --i) {
        auto& n = nodes[static_cast<std::size_t>(i)];
        if (n.grad.empty()) continue;
        if (n.leaf_grad) {
            auto& dst = *n.leaf_grad;
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
        } else if (n.backward) {
            refs.assign(n.inputs.size(), nullptr);
            for (std::size_t j = 0; j < n.inputs.size(); ++j) {
                const int in = n.inputs[j];
                if (in < 0) continue;
                auto& src = nodes[static_cast<std::size_t>(in)];
                if (src.grad.empty()) src.grad.assign(src.numel, 0.0f);
                refs[j] = &src.grad;
            }
            n.backward(n.grad, refs);
        }
        std::vector<float>().swap(n.grad);
    }
}


inline Tensor make_result_v(Tensor out, const std::vector<const Tensor*>& inputs, detail::BackwardFn fn) {
    std::shared_ptr<detail::TapeImpl> tape;
    std::uint64_t gen = 0;
    for (const Tensor* t : inputs) {
        if (!t->tape_) continue;
        if (t->generation_ != t->tape_->generation) {
            throw std::logic_error("tensor refers to a cleared tape");
        }
        if (tape && tape != t->tape_) throw std::logic_error("op inputs recorded on different tapes");
        tape = t->tape_;
        gen = t->generation_;
    }
    if (!tape) return out;
    detail::Node n;
    n.numel = out.numel();
    n.inputs.reserve(inputs.size());
    for (const Tensor* t : inputs) n.inputs.push_back(t->tape_ ? t->node_ : -1);
    n.backward = std::move(fn);
    tape->nodes.push_back(std::move(n));
    out.tape_ = tape;
    out.generation_ = gen;
    out.node_ = static_cast<int>(tape->nodes.size()) - 1;
    return out;
}

/// Attaches `out` to the tape shared by the taped inputs (if any).
inline Tensor make_result(Tensor out, std::initializer_list<const Tensor*> inputs, detail::BackwardFn fn) {
    return make_result_v(std::move(out), std::vector<const Tensor*>(inputs), std::move(fn));
}

inline Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    Tensor out = detach();
    out.shape_ = std::move(s);
    return make_result(std::move(out), {this}, [](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& dst = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
}

}  // namespace upl
