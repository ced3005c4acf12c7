#pragma once

// Dense float tensors with tape-based reverse-mode autodiff.
//
// Each op builds a Node whose backward_fn pulls the node's gradient into its
// parents. Graphs are rebuilt per forward pass and dropped after backward, so
// closures stay small and never capture their own node. A tape and its
// tensors belong to one thread; gradient recording can be suspended with
// NoGradGuard for value-only evaluation (finite differences, inference).

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cachesteer/real.hpp"

namespace cachesteer {

struct Node {
  std::vector<size_t> shape;
  std::vector<real> data;
  std::vector<real> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  bool trainable = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), real(0));
  }
};

using NodePtr = std::shared_ptr<Node>;

bool grad_enabled();

// Suspends gradient recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

std::string shape_str(const std::vector<size_t>& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node(std::move(n)) {}

  // Constant leaf (no gradient).
  static Tensor constant(std::vector<size_t> shape, std::vector<real> values);
  static Tensor zeros(std::vector<size_t> shape);
  static Tensor full(std::vector<size_t> shape, real value);
  // Trainable leaf: accumulates gradients and is updatable in place.
  static Tensor param(std::vector<size_t> shape, std::vector<real> values);

  bool defined() const { return node != nullptr; }
  const std::vector<size_t>& shape() const { return node->shape; }
  size_t rank() const { return node->shape.size(); }
  size_t size() const { return node->data.size(); }
  const std::vector<real>& data() const { return node->data; }
  std::vector<real>& mutable_data() { return node->data; }
  bool has_grad() const { return node && node->grad.size() == node->data.size(); }
  const std::vector<real>& grad() const;
  bool requires_grad() const { return node && node->requires_grad; }
  bool trainable() const { return node && node->trainable; }
  void set_trainable(bool on);  // leaves only
  void zero_grad() {
    if (node) node->grad.clear();
  }
  // Fresh constant leaf holding a copy of the current values.
  Tensor detached() const;

  NodePtr node;
};

class Scalar {
 public:
  Scalar() = default;
  explicit Scalar(NodePtr n) : node(std::move(n)) {}

  static Scalar constant(real value);

  bool defined() const { return node != nullptr; }
  real value() const { return node->data[0]; }
  bool requires_grad() const { return node && node->requires_grad; }

  NodePtr node;
};

// ---- tensor ops ----
Tensor matmul(const Tensor& a, const Tensor& b);           // [m,k]x[k,n] -> [m,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[.,k] w[k,n] + b[n]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps = real(1e-5));
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real alpha);
Tensor mul_scalar(const Tensor& a, const Scalar& s);
Tensor transpose2d(const Tensor& a);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor index_select(const Tensor& x, const std::vector<int>& ids);  // 1-D gather
Tensor row(const Tensor& x, size_t r);       // [T,d] -> [d]
Tensor mean_rows(const Tensor& x);           // [T,d] -> [d]
Tensor stack_rows(const std::vector<Tensor>& rows);  // B x [d] -> [B,d]

// Single-query multi-head attention over a cache laid out [heads, len, head_dim].
// k_cache/v_cache may be undefined (empty cache); the query always attends to
// the freshly computed k_new/v_new of its own position.
Tensor attend_cached(const Tensor& q, const Tensor& k_cache, const Tensor& v_cache,
                     const Tensor& k_new, const Tensor& v_new, size_t heads);
// Full-sequence causal self-attention for training; q,k,v are [T,d].
Tensor attend_causal(const Tensor& q, const Tensor& k, const Tensor& v, size_t heads);

// ---- reductions to Scalar ----
Scalar sum(const Tensor& x);
Scalar mean(const Tensor& x);
Scalar dot(const Tensor& u, const Tensor& v);
Scalar pick(const Tensor& x, size_t i);
Scalar cosine_similarity(const Tensor& u, const Tensor& v);
// Target is treated as a constant distribution; gradient w.r.t. logits is
// softmax(logits) - target.
Scalar cross_entropy(const Tensor& logits, const Tensor& target_probs);
// Mean token-level cross entropy of logits[T,V] against integer targets.
Scalar cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// ---- scalar ops ----
Scalar add(const Scalar& a, const Scalar& b);
Scalar sub(const Scalar& a, const Scalar& b);
Scalar mul(const Scalar& a, const Scalar& b);
Scalar scale(const Scalar& a, real alpha);
Scalar exp(const Scalar& a);
// -log(max(p, floor)): keeps the guidance loss finite as p -> 0.
Scalar neg_log_clamped(const Scalar& p, real floor = real(1e-7));

inline Scalar operator+(const Scalar& a, const Scalar& b) { return add(a, b); }
inline Scalar operator-(const Scalar& a, const Scalar& b) { return sub(a, b); }
inline Scalar operator*(const Scalar& a, const Scalar& b) { return mul(a, b); }
inline Scalar operator*(real alpha, const Scalar& a) { return scale(a, alpha); }

// Accumulates gradients into every reachable node that requires them.
// Repeated calls without zero_grad accumulate.
void backward(const Scalar& loss);

}  // namespace cachesteer
