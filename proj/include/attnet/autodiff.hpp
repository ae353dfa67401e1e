#ifndef ATTNET_AUTODIFF_HPP_
#define ATTNET_AUTODIFF_HPP_

#include <cstdint>
#include <functional>
#include <vector>

#include "attnet/tensor.hpp"

namespace attnet {

// Handle to a node on a Tape.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Operations append nodes in execution order; backward()
// replays them in exact reverse order, so gradient accumulation into any
// tensor happens in one fixed deterministic order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor value, bool requires_grad = false);

  const Tensor& val(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return node(v).grad.numel() > 0; }
  // Gradient accumulated for v; zeros if backward never reached it.
  Tensor grad(Var v) const;

  size_t size() const { return nodes_.size(); }

  // --- primitives ------------------------------------------------------

  // Cross-correlation (no kernel flip), zero padding.
  // input [N,C,H,W], weight [K,C,kh,kw], bias [K] -> [N,K,H',W']
  Var conv2d(Var input, Var weight, Var bias, int stride, int pad);

  // Window max; ties route the gradient to the first element in row-major
  // window order.
  Var maxpool2d(Var input, int k, int stride);

  // Pools to a fixed output grid regardless of input resolution; windows
  // partition the input per axis.
  Var adaptive_maxpool2d(Var input, int out_h, int out_w);

  // input [N,D] * weight [D,M] + bias [M] -> [N,M]
  Var linear(Var input, Var weight, Var bias);

  Var relu(Var x);
  Var add(Var a, Var b);   // identical shapes only
  Var mul(Var a, Var b);   // identical shapes only
  Var scalar_mul(Var a, double c);
  Var scalar_add(Var a, double c);
  Var reshape(Var x, std::vector<int64_t> shape);
  Var concat(const std::vector<Var>& xs, int axis);
  Var reduce_sum(Var x);   // -> scalar
  Var reduce_mean(Var x);  // -> scalar

  // Per-channel y = x*scale[c] + shift[c] on [N,C,H,W]; scale/shift are
  // compile-time constants of the graph (no gradient).
  Var channel_affine(Var x, const std::vector<double>& scale, const std::vector<double>& shift);

  // Max-subtracted softmax along `axis`.
  Var softmax(Var x, int axis);

  // Mean over the batch of -log(prob of the true class); probabilities are
  // clamped at 1e-12 before the log. probs [N,T], rows must sum to 1 +- 1e-6.
  Var cross_entropy(Var probs, const std::vector<int>& labels);

  // Per-channel batch norm over (N,H,W). Running stats live outside the tape
  // and are updated in place during training passes.
  Var batchnorm2d(Var x, Var gamma, Var beta, Tensor* running_mean, Tensor* running_var,
                  bool training, double momentum = 0.1, double eps = 1e-5);

  // --- attention primitives (batched) ----------------------------------

  // scores[n,i] = <feat[n,:,i], g[n,:]> over flattened spatial i.
  // feat [N,C,H,W], g [N,C] -> [N, H*W]
  Var attention_scores_dp(Var feat, Var g);

  // scores[n,i] = <u, feat[n,:,i] + g[n,:]>.
  // feat [N,C,H,W], g [N,C], u [C] -> [N, H*W]
  Var attention_scores_pc(Var feat, Var g, Var u);

  // g_a[n,c] = sum_i a[n,i] * feat[n,c,i].
  // feat [N,C,H,W], a [N, H*W] -> [N, C]
  Var attend(Var feat, Var a);

  // Seeds d(loss)/d(loss) = 1 and walks the tape backwards.
  void backward(Var scalar_loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated to value's shape
    bool requires_grad = false;
    std::function<void(Tape&)> back;  // empty for inputs / no-grad nodes
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var emit(Tensor value, bool requires_grad, std::function<void(Tape&)> back);
  Tensor& grad_buf(Var v);  // allocate-on-demand accumulator

  std::vector<Node> nodes_;
};

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
// using central differences with step h. f must produce a scalar node whose
// value depends on the input var. When max_coords > 0 and the input has more
// coordinates than that, a deterministic random subset is checked.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h = 1e-5,
                  int64_t max_coords = -1, uint64_t seed = 0x5eed);

// Worker cap for the optional batch-parallel mode. Results are bitwise
// identical for every thread count: work is split over fixed-size chunks and
// all floating-point reductions happen in chunk order.
void set_num_threads(int n);
int num_threads();

// Runs fn(task) for task in [0, n_tasks); tasks must write disjoint outputs.
void parallel_for(int64_t n_tasks, const std::function<void(int64_t)>& fn);

}  // namespace attnet

#endif  // ATTNET_AUTODIFF_HPP_
