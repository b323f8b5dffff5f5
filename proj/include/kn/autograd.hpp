#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kn/tensor.hpp"

namespace kn {

template <typename T>
struct Node;

/// Handle to one differentiable operation record. Graphs are built
/// dynamically per forward pass and discarded after backward.
template <typename T>
using Value = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  std::string op;               // operation tag, or parameter name for leaves
  Tensor4<T> value;
  Tensor4<T> grad;              // cotangent, allocated on first accumulation
  bool requires_grad = false;
  std::vector<Value<T>> parents;
  // Reads this->grad and accumulates cotangents into each parent's grad.
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (grad.size() == 0) grad = Tensor4<T>(value.n, value.c, value.h, value.w);
  }

  void accumulate(const Tensor4<T>& g) {
    ensure_grad();
    if (!grad.same_shape(g))
      throw std::runtime_error("shape mismatch in VJP for op '" + op + "'");
    for (std::size_t i = 0; i < g.size(); ++i) grad.data[i] += g.data[i];
  }
};

template <typename T>
Value<T> leaf(Tensor4<T> v, bool requires_grad = false, std::string name = "leaf") {
  auto n = std::make_shared<Node<T>>();
  n->op = std::move(name);
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

template <typename T>
Value<T> make_node(std::string op, Tensor4<T> v, std::vector<Value<T>> parents,
                   std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->op = std::move(op);
  n->value = std::move(v);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

/// Topological order of the graph rooted at `root` (leaves first).
/// Throws on cycles.
template <typename T>
std::vector<Node<T>*> topo_order(const Value<T>& root) {
  enum class Mark : unsigned char { White, Gray, Black };
  std::unordered_map<Node<T>*, Mark> mark;
  std::vector<Node<T>*> order;
  // iterative DFS; second visit of a frame finalizes the node
  std::vector<std::pair<Node<T>*, bool>> stack{{root.get(), false}};
  while (!stack.empty()) {
    auto [node, done] = stack.back();
    stack.pop_back();
    if (done) {
      mark[node] = Mark::Black;
      order.push_back(node);
      continue;
    }
    auto m = mark.find(node);
    if (m != mark.end()) {
      if (m->second == Mark::Gray) throw std::runtime_error("cycle detected");
      continue;
    }
    mark[node] = Mark::Gray;
    stack.push_back({node, true});
    for (const auto& p : node->parents) {
      auto pm = mark.find(p.get());
      if (pm != mark.end() && pm->second == Mark::Gray)
        throw std::runtime_error("cycle detected");
      if (pm == mark.end()) stack.push_back({p.get(), false});
    }
  }
  return order;
}

/// Reverse-mode sweep: seeds the root with `seed` and accumulates cotangents
/// into every node reachable from it. Leaf gradients are left in node->grad.
template <typename T>
void backward(const Value<T>& root, const Tensor4<T>& seed) {
  if (!root->value.same_shape(seed))
    throw std::runtime_error("seed cotangent shape mismatch: root " +
                             root->value.shape_str() + " vs seed " +
                             seed.shape_str());
  auto order = topo_order(root);
  root->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backprop && node->grad.size() != 0) node->backprop(*node);
  }
}

template <typename T>
void backward(const Value<T>& root) {
  backward(root, Tensor4<T>(root->value.n, root->value.c, root->value.h,
                            root->value.w, T(1)));
}

template <typename T>
void zero_grad(const std::vector<Value<T>>& params) {
  for (auto& p : params) p->grad = Tensor4<T>();
}

}  // namespace kn
