#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdf/rng.hpp"
#include "mdf/tensor.hpp"

namespace mdf {

// Trainable tensor with persistent gradient and momentum buffers.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;
};

class ParamStore {
 public:
  Parameter& create(const std::string& name, std::vector<int> shape);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Parameter* find(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  size_t size() const { return params_.size(); }
  int64_t total_values() const;

  void zero_grads();
  double grad_l2_norm() const;
  // Classic momentum: v = mu*v + g ; p -= lr*v. clip <= 0 disables clipping.
  void sgd_step(double lr, double momentum, double clip);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Tape-based reverse-mode autodiff, rebuilt each forward pass. Ops evaluate
// eagerly; backward() replays the record in reverse. A second backward()
// without a new forward is an error.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool finite_checks = true;

  // leaves
  Var input(Tensor v);
  Var param(Parameter& p);

  // primitives
  Var conv2d(Var x, Var kernel, int stride, int padding);    // kernel [Cout,Cin,kh,kw]
  Var deconv2d(Var x, Var kernel, int stride, int padding);  // kernel [Cin,Cout,kh,kw]
  Var maxpool2d(Var x, int k, int stride);
  Var roi_pool(Var map, int x0, int y0, int x1, int y1, int out_w, int out_h);
  Var linear(Var x, Var w, Var b);  // x [N,In], w [Out,In], b [Out]
  Var embedding(Var table, int row);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var softmax_rows(Var x);  // [N,C], rows sum to 1
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_scalar(Var a, double s);
  Var mul_scalar(Var a, double s);
  Var exp(Var a);
  Var channel_bias(Var x, Var b);  // [B,C,H,W] + [C]
  Var concat(const std::vector<Var>& xs, int axis);
  Var reshape(Var x, std::vector<int> shape);
  Var flatten(Var x);                              // -> [numel]
  Var gather(Var x, std::vector<int64_t> indices); // flat indices -> [n]
  Var sum(Var x);                                  // -> scalar

  // fused losses
  Var smooth_l1(Var pred, Var target, double beta);                 // Eq-style piecewise sum
  Var softmax_xent_mean(Var logits, const std::vector<int>& labels);
  Var bce_logits_mean(Var logits, Var targets);

  void backward(Var loss);
  bool backward_done() const { return backward_done_; }

  const Tensor& value(Var v) const;
  Tensor grad(Var v) const;               // zero tensor if never touched
  Tensor grad_of(const Parameter& p) const;  // throws if p not on this tape
  size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op {
    Input, Param, Conv2d, Deconv2d, MaxPool2d, RoiPool, Linear, Embedding,
    Relu, Sigmoid, SoftmaxRows, Add, Mul, AddScalar, MulScalar, Exp,
    ChannelBias, Concat, Reshape, Gather, Sum, SmoothL1, SoftmaxXentMean,
    BceLogitsMean
  };

  struct Node {
    Op op;
    std::array<int, 3> in{-1, -1, -1};
    std::vector<int> in_list;  // concat only
    Tensor val;
    Tensor grd;               // lazily sized during backward
    Tensor aux;               // op scratch (e.g. softmax probs)
    Parameter* p = nullptr;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0, i4 = 0, i5 = 0;
    double f0 = 0.0;
    std::vector<int64_t> iaux;  // argmax indices / labels / gather indices
  };

  int push(Node n);
  Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }
  Tensor& grad_buf(int id);
  void check(const Tensor& t, const char* what) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Analytic value+gradient of a scalar map at `point`.
struct DiffResult {
  double value = 0.0;
  Tensor grad;
};

// Max over sampled coordinates of |analytic - central difference| / max(1,|analytic|).
// `f` must be deterministic; `samples <= 0` checks every coordinate.
double finite_diff_check(const std::function<DiffResult(const Tensor&)>& f,
                         const Tensor& point, double epsilon, int samples, Rng& rng);

// Same check against a set of parameters: `loss` re-evaluates the full forward
// pass from current parameter values, `with_grad` additionally fills grads.
double finite_diff_check_params(const std::function<double()>& loss,
                                const std::function<void()>& loss_backward,
                                ParamStore& params, double epsilon,
                                int total_samples, Rng& rng);

}  // namespace mdf
