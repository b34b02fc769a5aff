#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dplc/tensor.hpp"

namespace dplc::ad {

// Define-by-run reverse-mode autodiff. Backward functions emit gradients as
// graph nodes built from the same op set, so gradients are themselves
// differentiable (needed by the critic gradient penalty, which trains through
// an input-gradient norm).

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> parents;
  // Maps the upstream gradient to per-parent gradients. Closures may capture
  // parent Vars and plain tensors, never the node's own Var (that would leak).
  std::function<std::vector<Var>(const Var&)> backward;
  const char* op = "";
};

/// Non-differentiable graph input.
Var constant(Tensor v);
Var constant_scalar(double v);
/// Differentiable graph input (parameters, probe inputs).
Var leaf(Tensor v, bool requires_grad = true);

/// While a guard is alive, new nodes record no graph structure. Used for
/// plain evaluation and for first-order-only backward passes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- elementwise / arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double c);
Var square(const Var& a);
Var sqrt_(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var recip(const Var& a);
Var tanh_(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// ---- reductions and broadcasts (rank-2 operands) ----
Var sum_all(const Var& a);                       // -> (1)
Var mean_all(const Var& a);                      // -> (1)
Var row_sum(const Var& a);                       // (n,m) -> (n,1)
Var col_sum(const Var& a);                       // (n,m) -> (1,m)
Var broadcast_cols(const Var& a, std::int64_t m);  // (n,1) -> (n,m)
Var broadcast_rows(const Var& a, std::int64_t n);  // (1,m) -> (n,m)

// ---- structural ----
Var reshape(const Var& a, Shape shape);
Var concat_cols(const Var& a, const Var& b);     // (n,p),(n,q) -> (n,p+q)
Var slice_cols(const Var& a, std::int64_t start, std::int64_t len);
/// Channel concat for (b,c,h,w) stacks.
Var concat_channels(const Var& a, const Var& b);

// Index map ops; gather and scatter_add are adjoint to each other. Entries
// of -1 read as zero / write nowhere.
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;
Var gather(const Var& a, IndexMap idx, Shape out_shape);
Var scatter_add(const Var& a, IndexMap idx, Shape out_shape);

// ---- composed helpers ----
Var softmax_rows(const Var& logits);
/// Per-row Euclidean norm: (n,m) -> (n,1).
Var row_norm(const Var& a);
/// Forward takes `forward_value` verbatim; backward passes gradients to
/// `grad_path` unchanged (straight-through estimator).
Var value_override(Tensor forward_value, const Var& grad_path);

/// Gradients of a scalar output w.r.t. `wrt`. With `create_graph` the
/// returned Vars carry their own graph and can be differentiated again.
/// Nodes not reached by the backward sweep yield zero gradients.
std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt,
                      bool create_graph = false);

}  // namespace dplc::ad
