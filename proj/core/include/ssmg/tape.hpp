#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssmg/tensor.hpp"

namespace ssmg {

// One named parameter tensor plus its gradient accumulator.
template <typename T>
struct ParamTensor {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;

    void zero_grad() { grad.fill(T(0)); }
};

// Ordered parameter collection. Creation order is stable, which makes the
// optimizer sweep and the checkpoint tensor order deterministic.
template <typename T>
class ParamStore {
public:
    ParamTensor<T>& create(const std::string& name, std::vector<int64_t> shape) {
        if (by_name_.count(name)) throw Error("ParamStore: duplicate parameter " + name);
        auto p = std::make_unique<ParamTensor<T>>();
        p->name = name;
        p->value = TensorT<T>(shape);
        p->grad = TensorT<T>(std::move(shape));
        ParamTensor<T>* raw = p.get();
        by_name_[name] = raw;
        list_.push_back(std::move(p));
        return *raw;
    }

    ParamTensor<T>* find(const std::string& name) {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    ParamTensor<T>& at(const std::string& name) {
        ParamTensor<T>* p = find(name);
        if (!p) throw Error("ParamStore: unknown parameter " + name);
        return *p;
    }

    const std::vector<std::unique_ptr<ParamTensor<T>>>& all() const { return list_; }

    void zero_grads() {
        for (auto& p : list_) p->zero_grad();
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& p : list_) n += p->value.numel();
        return n;
    }

private:
    std::vector<std::unique_ptr<ParamTensor<T>>> list_;
    std::unordered_map<std::string, ParamTensor<T>*> by_name_;
};

template <typename T>
class Tape;

// Handle to a tape node.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
    const TensorT<T>& val() const;
};

// Reverse-mode tape. Nodes are created in topological order, so the backward
// sweep just walks them in reverse. Node buffers are released as soon as the
// sweep has passed them to bound peak memory.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape<T>&, int self)>;

    struct Node {
        TensorT<T> val;
        TensorT<T> grad;
        BackFn back;
        bool needs_grad = false;
        bool has_grad = false;
        bool is_param = false;
    };

    Var<T> make(TensorT<T> v, bool needs_grad, BackFn back = {}) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<T> input(TensorT<T> v, bool needs_grad = false) { return make(std::move(v), needs_grad); }

    // Injects a parameter as a leaf. Repeated injection of the same parameter
    // within one tape returns the same node so gradients accumulate.
    Var<T> param(ParamTensor<T>& p) {
        auto it = param_idx_.find(&p);
        if (it != param_idx_.end()) return Var<T>{this, it->second};
        Var<T> v = make(p.value, true);
        nodes_.back().is_param = true;
        param_idx_[&p] = v.idx;
        param_nodes_.emplace_back(&p, v.idx);
        return v;
    }

    Node& node(int idx) { return nodes_[static_cast<size_t>(idx)]; }
    const TensorT<T>& val(int idx) const { return nodes_[static_cast<size_t>(idx)].val; }
    const TensorT<T>& val(Var<T> v) const { return val(v.idx); }
    bool needs(Var<T> v) const { return nodes_[static_cast<size_t>(v.idx)].needs_grad; }

    // Gradient buffer of a node, or nullptr when the node does not require
    // grad. Allocated with zeros on first request.
    T* gptr(int idx) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        if (!n.needs_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = TensorT<T>(n.val.shape);
            n.has_grad = true;
        }
        return n.grad.ptr();
    }

    void accum(int idx, const T* g, int64_t count) {
        T* dst = gptr(idx);
        if (!dst) return;
        for (int64_t i = 0; i < count; ++i) dst[i] += g[i];
    }

    const TensorT<T>& grad(Var<T> v) const { return nodes_[static_cast<size_t>(v.idx)].grad; }

    // Runs the backward sweep from a scalar root and accumulates parameter
    // gradients into their stores.
    void backward(Var<T> root) {
        Node& r = nodes_[static_cast<size_t>(root.idx)];
        if (r.val.numel() != 1) throw ShapeError("backward: root must be a scalar");
        if (!r.needs_grad) return;
        r.grad = TensorT<T>(r.val.shape);
        r.grad.data[0] = T(1);
        r.has_grad = true;

        for (int i = root.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.needs_grad && n.has_grad && n.back) {
                n.back(*this, i);
                if (i != root.idx && !n.is_param) {
                    n.val = TensorT<T>();
                    n.grad = TensorT<T>();
                }
            }
        }
        for (auto& [p, idx] : param_nodes_) {
            Node& n = nodes_[static_cast<size_t>(idx)];
            if (!n.has_grad) continue;
            T* dst = p->grad.ptr();
            const T* src = n.grad.ptr();
            for (int64_t i = 0; i < n.grad.numel(); ++i) dst[i] += src[i];
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::vector<std::pair<ParamTensor<T>*, int>> param_nodes_;
    std::unordered_map<const ParamTensor<T>*, int> param_idx_;
};

template <typename T>
const TensorT<T>& Var<T>::val() const {
    return tape->val(idx);
}

}  // namespace ssmg
