#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fot/tensor.hpp"

namespace fot::ad {

// A named, trainable tensor. Gradients accumulate into `grad` during
// Tape::backward; optimizers consume and reset them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParamRefs = std::vector<Parameter*>;

std::uint64_t params_checksum(const ParamRefs& params);
std::int64_t params_count(const ParamRefs& params);

// Dynamic reverse-mode tape. One Tape per forward pass; nodes are created in
// topological order, so backward is a reverse sweep over the node list.
class Tape {
 public:
  struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  // Leaves.
  Value input(Tensor v);          // constant, no gradient
  Value param(Parameter& p);      // gradient flows iff p.requires_grad

  const Tensor& val(Value v) const;
  const Tensor& grad(Value v) const;

  // Elementwise / shape.
  Value add(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, double c);
  Value relu(Value a);
  Value sigmoid(Value a);
  Value log_eps(Value a, double eps);  // log(a + eps), a >= 0
  Value flatten2(Value a);             // (B, ...) -> (B, rest)
  Value concat_channels(const std::vector<Value>& xs);  // (B,Ci,H,W) along C

  // Linear algebra.
  Value matmul_nt(Value a, Value b);   // (B,d) x (C,d)^T -> (B,C)
  Value l2normalize_rows(Value a, double eps);
  Value scale_by(Value a, Value s);    // s has shape {1}

  // Convolutional.
  Value conv2d(Value x, Value w, Value bias, int stride, int pad);
  Value conv_transpose2d(Value x, Value w, Value bias, int stride, int pad);
  Value pad_spatial(Value x, int pad_bottom, int pad_right);  // zero padding
  Value crop_spatial(Value x, int out_h, int out_w);          // top-left corner
  Value maxpool2(Value x);
  Value instance_norm(Value x, Value gamma, Value beta, double eps = 1e-5);
  Value global_avg_pool(Value x);      // (B,C,H,W) -> (B,C)

  // Reductions / losses (scalar outputs, shape {1}).
  Value sum_all(Value a);
  Value softmax(Value logits);         // rowwise, (B,C)
  Value softmax_cross_entropy(Value logits, const std::vector<int>& labels);
  Value mse(Value pred, Value target);

  // Seeds d(root)/d(root)=1 and sweeps the tape in reverse; parameter
  // gradients are accumulated into their Parameter::grad buffers.
  void backward(Value root);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* bound = nullptr;
    std::function<void(Tape&, int)> back;
  };

  int push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> back);
  Tensor& grad_buf(int id);
  void add_grad(int id, const Tensor& g);
  const Tensor& node_val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  std::vector<Node> nodes_;
};

using Value = Tape::Value;

// First-order adaptive-moment optimizer.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamRefs& params);
  static void zero_grad(const ParamRefs& params);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct State {
    Tensor m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<State> state_;
  std::vector<Parameter*> order_;
};

}  // namespace fot::ad
