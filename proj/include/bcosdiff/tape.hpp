#pragma once

#include "bcosdiff/tensor.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bcosdiff {

template <typename S>
class Tape;

template <typename S>
using TensorRefs = std::vector<const Tensor<S>*>;

/// A differentiable primitive. `forward` must be a pure function of its inputs
/// so that a recorded tape can be replayed; `backward` accumulates into the
/// non-null entries of `grad_in`.
template <typename S>
class Op {
 public:
  virtual ~Op() = default;
  virtual const char* name() const = 0;
  virtual Tensor<S> forward(const TensorRefs<S>& in) const = 0;
  virtual void backward(const TensorRefs<S>& in, const Tensor<S>& out, const Tensor<S>& grad_out,
                        const std::vector<Tensor<S>*>& grad_in) const = 0;
};

/// Marks nodes the alignment audit looks for.
enum class NodeTag : std::uint8_t { kNone, kBcosCosine, kBcosOutput };

template <typename S>
struct Node {
  std::shared_ptr<const Op<S>> op;  // null for leaves
  std::vector<int> inputs;
  Tensor<S> value;
  bool requires_grad = false;
  bool frozen = false;
  NodeTag tag = NodeTag::kNone;
  int partner = -1;
};

template <typename S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, int id) : tape_(tape), id_(id) {}

  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  Tape<S>& tape() const { return *tape_; }
  const Tensor<S>& value() const { return tape_->node(id_).value; }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index i) const { return value().dim(i); }

 private:
  Tape<S>* tape_ = nullptr;
  int id_ = -1;
};

/// Leaf gradients produced by a backward sweep.
template <typename S>
class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor<S>>> grads) : grads_(std::move(grads)) {}

  bool has(const Var<S>& v) const {
    return v.id() >= 0 && static_cast<std::size_t>(v.id()) < grads_.size() && grads_[v.id()].has_value();
  }
  const Tensor<S>& operator[](const Var<S>& v) const {
    if (!has(v)) throw std::invalid_argument("no gradient recorded for node " + std::to_string(v.id()));
    return *grads_[v.id()];
  }
  Tensor<S> take(const Var<S>& v) { return std::move(*grads_.at(v.id())); }

 private:
  std::vector<std::optional<Tensor<S>>> grads_;
};

/// Explicit, replayable record of primitive evaluations.
///
/// In dynamic-freeze mode every value routed through `dynamic()` becomes a
/// frozen node: numerically equal to its source, but a constant for both
/// differentiation and replay. Freezing all data-dependent coefficients of a
/// bias-free network turns the recorded graph into a fixed linear map of its
/// inputs.
template <typename S>
class Tape {
 public:
  explicit Tape(bool freeze_dynamic = false) : freeze_dynamic_(freeze_dynamic) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool freezes_dynamic() const { return freeze_dynamic_; }

  Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
    Node<S> n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<int>(nodes_.size() - 1));
  }

  Var<S> apply(std::shared_ptr<const Op<S>> op, const std::vector<Var<S>>& inputs) {
    TensorRefs<S> refs;
    refs.reserve(inputs.size());
    Node<S> n;
    for (const auto& v : inputs) {
      check_owned(v);
      refs.push_back(&nodes_[v.id()].value);
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    n.value = op->forward(refs);
    n.op = std::move(op);
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<int>(nodes_.size() - 1));
  }

  /// Severs `v` from its upstream dependence; the result is a constant with
  /// the same value.
  Var<S> freeze(const Var<S>& v) {
    check_owned(v);
    Node<S> n;
    n.op = identity_op();
    n.inputs = {v.id()};
    n.value = nodes_[v.id()].value;
    n.frozen = true;
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<int>(nodes_.size() - 1));
  }

  /// Freezes `v` when the tape records a linearized run, otherwise passes it through.
  Var<S> dynamic(const Var<S>& v) { return freeze_dynamic_ ? freeze(v) : v; }

  void tag(const Var<S>& v, NodeTag tag, int partner = -1) {
    check_owned(v);
    nodes_[v.id()].tag = tag;
    nodes_[v.id()].partner = partner;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node<S>& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  /// Total number of scalars held by recorded node values.
  std::size_t stored_elements() const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += static_cast<std::size_t>(node.value.size());
    return n;
  }

  /// Reverse sweep from a scalar root. Returns gradients for every leaf that
  /// requires them (zero when the root does not depend on the leaf).
  Gradients<S> backward(const Var<S>& root) const {
    check_owned(root);
    const Tensor<S>& rv = nodes_[root.id()].value;
    if (rv.size() != 1) throw ShapeError("backward: root must be scalar, got " + to_string(rv.shape()));
    return vjp(root, Tensor<S>::full(rv.shape(), S(1)));
  }

  /// Vector-Jacobian product of `output` with `cotangent`.
  Gradients<S> vjp(const Var<S>& output, const Tensor<S>& cotangent) const {
    check_owned(output);
    require_same_shape(cotangent.shape(), nodes_[output.id()].value.shape(), "vjp cotangent");
    std::vector<std::optional<Tensor<S>>> grads(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].op && nodes_[i].requires_grad) grads[i] = Tensor<S>(nodes_[i].value.shape());
    }
    if (!nodes_[output.id()].requires_grad) return Gradients<S>(std::move(grads));
    if (nodes_[output.id()].op) {
      grads[output.id()] = cotangent;
    } else {
      grads[output.id()]->array() += cotangent.array();
    }

    for (int id = output.id(); id >= 0; --id) {
      const Node<S>& n = nodes_[id];
      if (!n.op || n.frozen || !grads[id]) continue;
      TensorRefs<S> in;
      std::vector<Tensor<S>*> gin;
      for (int src : n.inputs) {
        in.push_back(&nodes_[src].value);
        if (nodes_[src].requires_grad) {
          if (!grads[src]) grads[src] = Tensor<S>(nodes_[src].value.shape());
          gin.push_back(&*grads[src]);
        } else {
          gin.push_back(nullptr);
        }
      }
      n.op->backward(in, n.value, *grads[id], gin);
      grads[id].reset();
    }
    return Gradients<S>(std::move(grads));
  }

  /// Re-evaluates `output` with some leaves replaced. Frozen nodes keep their
  /// recorded values; nodes unaffected by the replaced leaves are reused.
  Tensor<S> replay(const Var<S>& output, const std::vector<std::pair<Var<S>, Tensor<S>>>& leaves) const {
    check_owned(output);
    const int out = output.id();
    std::vector<std::optional<Tensor<S>>> fresh(out + 1);
    std::vector<char> dirty(out + 1, 0), needed(out + 1, 0);
    for (const auto& [v, t] : leaves) {
      check_owned(v);
      if (nodes_[v.id()].op) throw std::invalid_argument("replay: node " + std::to_string(v.id()) + " is not a leaf");
      require_same_shape(t.shape(), nodes_[v.id()].value.shape(), "replay leaf");
      if (v.id() <= out) {
        dirty[v.id()] = 1;
        fresh[v.id()] = t;
      }
    }
    needed[out] = 1;
    for (int id = out; id >= 0; --id) {
      const Node<S>& n = nodes_[id];
      if (!needed[id] || n.frozen || !n.op) continue;
      for (int src : n.inputs) needed[src] = 1;
    }
    std::vector<int> last_use(out + 1, -1);
    for (int id = 0; id <= out; ++id) {
      const Node<S>& n = nodes_[id];
      if (!n.op || n.frozen || !needed[id]) continue;
      for (int src : n.inputs) {
        if (dirty[src]) {
          dirty[id] = 1;
          last_use[src] = id;
        }
      }
    }
    for (int id = 0; id <= out; ++id) {
      const Node<S>& n = nodes_[id];
      if (!dirty[id] || !n.op) continue;
      TensorRefs<S> in;
      for (int src : n.inputs) in.push_back(dirty[src] ? &*fresh[src] : &nodes_[src].value);
      fresh[id] = n.op->forward(in);
      for (int src : n.inputs) {
        if (dirty[src] && last_use[src] == id && src != out) fresh[src].reset();
      }
    }
    return dirty[out] ? std::move(*fresh[out]) : nodes_[out].value;
  }

 private:
  class IdentityOp final : public Op<S> {
   public:
    const char* name() const override { return "identity"; }
    Tensor<S> forward(const TensorRefs<S>& in) const override { return *in[0]; }
    void backward(const TensorRefs<S>&, const Tensor<S>&, const Tensor<S>& g,
                  const std::vector<Tensor<S>*>& gin) const override {
      if (gin[0]) gin[0]->array() += g.array();
    }
  };

  static std::shared_ptr<const Op<S>> identity_op() {
    static const auto op = std::make_shared<const IdentityOp>();
    return op;
  }

  void check_owned(const Var<S>& v) const {
    if (!v.valid() || &v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
      throw std::invalid_argument("variable does not belong to this tape");
    }
  }

  bool freeze_dynamic_;
  std::vector<Node<S>> nodes_;
};

}  // namespace bcosdiff
