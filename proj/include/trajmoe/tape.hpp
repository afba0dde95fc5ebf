#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "trajmoe/types.hpp"

namespace trajmoe {

// A learnable array plus its gradient and AdamW moment accumulators.
// Moments always match the value's shape.
struct Param {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix m;
    Matrix v;

    Param(std::string n, Index rows, Index cols)
        : name(std::move(n)),
          value(Matrix::Zero(rows, cols)),
          grad(Matrix::Zero(rows, cols)),
          m(Matrix::Zero(rows, cols)),
          v(Matrix::Zero(rows, cols)) {}

    Index size() const { return value.size(); }
    void zero_grad() { grad.setZero(); }
};

// Insertion-ordered collection of parameters. Iteration order is the
// creation order, which fixes the init sequence and the checkpoint layout.
class ParamStore {
  public:
    Param& create(const std::string& name, Index rows, Index cols) {
        if (index_.count(name))
            throw std::invalid_argument("ParamStore: duplicate parameter " + name);
        params_.push_back(std::make_unique<Param>(name, rows, cols));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("ParamStore: no parameter " + name);
        return *params_[it->second];
    }

    const Param& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("ParamStore: no parameter " + name);
        return *params_[it->second];
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t count() const { return params_.size(); }

    Index total_size() const {
        Index n = 0;
        for (const auto& p : params_) n += p->size();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p->grad.setZero();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

  private:
    std::vector<std::unique_ptr<Param>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until Tape::clear().
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
};

// Reverse-mode tape. Nodes are appended in execution order, so walking
// the list backwards is already a topological order of the DAG.
class Tape {
  public:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        std::function<void(Tape&, const Matrix&)> backward;  // receives this node's grad
        Param* param = nullptr;
    };

    // Constant input; gradients never flow into it.
    Var constant(Matrix value) {
        nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    // Leaf bound to a parameter. Repeated use() of the same parameter on
    // one tape returns the same node, so gradient contributions from every
    // consumer accumulate in one place.
    Var use(Param& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return Var{this, it->second};
        nodes_.push_back(Node{p.value, {}, true, false, nullptr, &p});
        int id = static_cast<int>(nodes_.size()) - 1;
        param_nodes_[&p] = id;
        return Var{this, id};
    }

    Var make(Matrix value, bool requires_grad, std::function<void(Tape&, const Matrix&)> backward) {
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false,
                              requires_grad ? std::move(backward) : nullptr, nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Matrix& value(Var v) const { return nodes_[v.id].value; }

    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    // Accumulate into a node's gradient (no-op for non-grad nodes).
    void accumulate(Var v, const Matrix& g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            n.grad += g;
        }
    }

    // Gradient of the last backward() with respect to node v (zeros if it
    // did not participate).
    Matrix grad(Var v) const {
        const Node& n = nodes_[v.id];
        if (n.has_grad) return n.grad;
        return Matrix::Zero(n.value.rows(), n.value.cols());
    }

    // Reverse sweep from a scalar loss. Parameter leaves accumulate into
    // Param::grad; call ParamStore::zero_grads() between steps.
    void backward(Var loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
        Node& top = nodes_[loss.id];
        if (top.value.rows() != 1 || top.value.cols() != 1)
            throw std::invalid_argument("backward: loss must be a 1x1 scalar, got " +
                                        shape_str(top.value));
        if (!top.requires_grad) return;
        accumulate(loss, Matrix::Ones(1, 1));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.has_grad) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param) n.param->grad += n.grad;
        }
    }

    void clear() {
        nodes_.clear();
        param_nodes_.clear();
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    std::unordered_map<Param*, int> param_nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

}  // namespace trajmoe
