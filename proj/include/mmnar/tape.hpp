#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmnar/tensor.hpp"

// Reverse-mode computation tape. A fresh tape is built for every batch;
// nodes are append-only, so every node's inputs have smaller ids and one
// reverse sweep reaches everything the loss depends on.

namespace mmnar {

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Named parameter with gradient and optimizer moment buffers.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m1, m2;
};

// Parameters in creation order; the order doubles as the checkpoint manifest.
class ParamStore {
 public:
  Param& add(const std::string& name, int rows, int cols);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  Param* find(const std::string& name);

  size_t count() const { return params_.size(); }
  std::vector<std::unique_ptr<Param>>& all() { return params_; }
  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }

  void zero_grads();
  size_t value_count() const;

  // flat copy of all values, used for best-epoch snapshots
  std::vector<double> snapshot() const;
  void restore(const std::vector<double>& snap);

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, int> index_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  Var leaf(Tensor value);
  // Leaf whose gradient is accumulated into p.grad by backward();
  // repeated calls for the same parameter return the same node.
  Var leaf_param(Param& p);

  Var emit(Tensor value, const char* op, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& val(int id) const { return nodes_[id].value; }
  const char* op_name(int id) const { return nodes_[id].op; }

  // Allocates a zero gradient on first touch.
  Tensor& grad_ref(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }
  const Tensor& grad(Var v) const;

  // loss must be 1x1; seeds d(loss)/d(loss) = 1 and sweeps in reverse order,
  // then accumulates into parameter grads.
  void backward(Var loss);

  size_t node_count() const { return nodes_.size(); }

  // Throws naming the offending op if any node value (or gradient) is not finite.
  void check_finite() const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    const char* op;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Param*>> param_sinks_;
  std::map<const Param*, int> param_nodes_;
};

// ---- operations -----------------------------------------------------------
// Shape mismatches throw std::invalid_argument naming the op and both shapes.

Var matmul(Var a, Var b);     // [m,k]x[k,n]
Var matmul_tb(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double c);
Var add_rowvec(Var a, Var b);  // [m,n] + [1,n] broadcast over rows
Var sigmoid(Var a);
Var tanh_op(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
// Softmax over key columns with mask[j]==0 forced to exactly zero weight.
Var masked_softmax_rows(Var a, std::vector<uint8_t> key_mask);
Var mean_axis(Var a, int axis);  // 0: column means [1,n]; 1: row means [m,1]
Var sum_all(Var a);              // 1x1
Var sum_squares(Var a);          // 1x1
Var l2_norm(Var a);              // 1x1
Var cosine_sim(Var a, Var b);    // 1x1; 1e-12 added to each norm
// S[i][j] = cos(e_i, r_j) over row pairs, same norm guard as cosine_sim.
Var cosine_sim_matrix(Var e, Var r);
Var concat_cols(std::span<const Var> parts);
Var stack_rows(std::span<const Var> parts);
Var slice_rows(Var a, int row0, int nrows);
// Mean over rows with mask==1; requires at least one active row.
Var masked_mean_pool(Var a, std::vector<uint8_t> row_mask);
// Elementwise binary cross-entropy on logits (stable log-sum-exp form).
Var bce_with_logits(Var logits, Tensor targets);
// Focal variant; gamma == 0 reduces to bce_with_logits.
Var focal_bce_with_logits(Var logits, Tensor targets, double gamma);
Var mse(Var a, Var b);  // 1x1 mean over entries
// Mean over rows i of [logsumexp_j(S[i][j]/t) - S[i][i]/t]; S must be square.
Var info_nce_rows(Var sims, double temperature);
// Inverted dropout with mask drawn from StreamRng(key, "dropout").
Var dropout(Var a, double p, uint64_t key);

}  // namespace mmnar
