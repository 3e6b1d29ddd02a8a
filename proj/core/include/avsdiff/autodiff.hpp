#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "avsdiff/tensor.hpp"

namespace avsdiff {

/// Trainable tensor. grad has the same shape as value and accumulates across
/// backward passes until zero_grad().
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}
  void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), 0.0); }
};

/// Owns parameters and non-trainable buffers (batch-norm running stats) in a
/// fixed registration order; checkpoints serialize in this order.
class ParamStore {
 public:
  Param& create(const std::string& name, Tensor init);
  Tensor& buffer(const std::string& name, Tensor init);

  const std::vector<std::unique_ptr<Param>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor*>> buffers();
  Param* find(const std::string& name);
  Tensor* find_buffer(const std::string& name);
  void zero_grads();
  std::int64_t total_param_count() const;

 private:
  struct NamedBuffer {
    std::string name;
    Tensor value;
  };
  std::vector<std::unique_ptr<Param>> params_;
  std::vector<std::unique_ptr<NamedBuffer>> buffers_;
};

/// Batch-norm running statistics (one pair per normalized channel axis).
struct RunningStats {
  Tensor* mean = nullptr;
  Tensor* var = nullptr;
};

enum class NetMode { kTrain, kEval };

using NodeId = int;

/// Reverse-mode tape. Forward values are computed eagerly; backward() walks
/// the recorded nodes once in reverse creation order. A tape is built fresh
/// for every forward pass and recorded tensors are never mutated in place.
class Tape {
 public:
  NodeId constant(Tensor v);
  NodeId param(Param& p);

  // Elementwise.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId affine(NodeId a, double scale, double shift);
  NodeId cmul(NodeId a, Tensor weights);  // elementwise multiply by a constant
  NodeId leaky_relu(NodeId a, double slope);
  NodeId sigmoid(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);  // zero gradient outside (lo, hi)
  NodeId detach(NodeId a);

  // Linear algebra.
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  /// y[n,o] = sum_k x[n,k] * w[o,k] + b[o]; w is [out x in].
  NodeId linear(NodeId x, NodeId w, NodeId b);
  NodeId linear(NodeId x, NodeId w);
  /// Cross-correlation with zero padding; x [B,C,H,W], w [O,C,kh,kw].
  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int padding);
  NodeId conv2d(NodeId x, NodeId w, int stride, int padding);

  // Shape.
  NodeId reshape(NodeId a, std::vector<int> shape);
  NodeId slice0(NodeId a, int begin, int end);
  NodeId concat(const std::vector<NodeId>& parts, int axis);
  NodeId broadcast_row(NodeId row, int copies);     // [D] or [1,D] -> [copies,D]
  NodeId tile_spatial(NodeId a, int h, int w);      // [B,D] -> [B,D,h,w]
  NodeId upsample2x(NodeId a);                      // nearest, [B,C,H,W] -> [B,C,2H,2W]
  NodeId global_avg_pool(NodeId a);                 // [B,C,H,W] -> [B,C]

  // Row-wise (matrix) ops.
  NodeId row_l2_normalize(NodeId a);
  NodeId softmax_rows(NodeId a);
  NodeId log_softmax_rows(NodeId a);

  // Normalization. Updates running stats in train mode as a side effect.
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, RunningStats stats, double eps,
                    double momentum, NetMode mode);

  // Reductions and losses.
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId neg_mean_diag(NodeId a);  // [N,N] -> scalar, -mean of the diagonal
  NodeId mse(NodeId pred, Tensor target);
  /// Weighted binary cross-entropy, averaged over weight mass. Predictions
  /// are clamped to [1e-6, 1-1e-6] before the logs.
  NodeId bce(NodeId pred, Tensor target, Tensor weight);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  /// Gradient w.r.t. a node; empty tensor if backward did not reach it.
  const Tensor& grad(NodeId id) const { return grads_[static_cast<size_t>(id)]; }

  /// Accumulates d(loss)/dp into every reachable Param.grad. loss must be a
  /// scalar node.
  void backward(NodeId loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    std::function<void(Tape&, NodeId)> back;  // nullptr for leaves
    Param* bound = nullptr;
  };

  NodeId push(Tensor value, std::vector<NodeId> parents, std::function<void(Tape&, NodeId)> back);
  Tensor& grad_buf(NodeId id);
  const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

/// Process-wide kernel thread count (1 = fully sequential). Parallel regions
/// only ever split disjoint output rows, so results are identical for any
/// setting.
void set_num_threads(int n);
int num_threads();

namespace kernels {
/// c[m x n] += a[m x k] * b[k x n]; accumulation over k is sequential per
/// output element, which fixes the floating-point summation order.
void mm_acc(const double* a, const double* b, double* c, int m, int k, int n);
Tensor transpose2d(const Tensor& t);
}  // namespace kernels

}  // namespace avsdiff
