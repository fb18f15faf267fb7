#pragma once

// Minimal reverse-mode automatic differentiation over real arrays: exactly
// the operator set the reconstruction network needs, plus a custom-node hook
// that lets other modules (losses, normalization) join the same tape.
//
// A Tape owns every tensor created on it. Ops record closures; backward()
// replays them in reverse creation order, which is a valid topological order
// by construction. Image tensors are (channels, height, width), row-major
// with width fastest.

#include <functional>
#include <string>
#include <vector>

namespace ktraj::diff {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);

// Lightweight handle; valid only for the tape that created it.
struct TapeTensor {
  int id = -1;
  Shape shape;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;             // op closures capture `this`
  Tape& operator=(const Tape&) = delete;

  TapeTensor leaf(const Shape& shape, std::vector<double> values, bool requires_grad);

  const std::vector<double>& values(const TapeTensor& t) const;
  // Valid after backward(); throws if the tensor received no gradient.
  const std::vector<double>& grad(const TapeTensor& t) const;
  bool has_grad(const TapeTensor& t) const;

  // x (C,H,W) * kernel (Co,C,kh,kw) + bias (Co) -> (Co,H,W); stride 1,
  // zero-padded "same", odd kernel sides required.
  TapeTensor conv2d(const TapeTensor& x, const TapeTensor& kernel, const TapeTensor& bias);
  TapeTensor leaky_relu(const TapeTensor& x, double slope = 0.01);
  // Per-channel normalization over (H,W) to zero mean / unit variance,
  // epsilon 1e-5, no learned affine.
  TapeTensor instance_norm(const TapeTensor& x);
  // 2x2, stride 2; even H and W required. Ties route the gradient to the
  // lowest flat index of the window.
  TapeTensor max_pool2d(const TapeTensor& x);
  TapeTensor nearest_upsample(const TapeTensor& x);  // x2 in H and W
  TapeTensor concat(const TapeTensor& a, const TapeTensor& b);  // channel axis
  TapeTensor add(const TapeTensor& a, const TapeTensor& b);
  TapeTensor mul(const TapeTensor& a, const TapeTensor& b);  // elementwise
  TapeTensor mul_scalar(const TapeTensor& x, double s);
  // x (N) * weight (M,N) + bias (M) -> (M)
  TapeTensor linear(const TapeTensor& x, const TapeTensor& weight, const TapeTensor& bias);
  TapeTensor sum(const TapeTensor& x);  // -> shape {1}

  // Extension point: a node with arbitrary forward values whose backward
  // receives the output gradient plus parent values, and accumulates into the
  // non-null parent gradient buffers (null = parent needs no gradient).
  using CustomBackward =
      std::function<void(const std::vector<double>& grad_out,
                         const std::vector<const std::vector<double>*>& parent_values,
                         const std::vector<std::vector<double>*>& parent_grads)>;
  TapeTensor custom(const std::string& name, const std::vector<TapeTensor>& parents,
                    const Shape& out_shape, std::vector<double> out_values,
                    CustomBackward back);

  // Seeds d(root)/d(root) = 1 and accumulates gradients into every
  // requires_grad tensor the root depends on. The root must be scalar; a
  // second call on the same tape is rejected.
  void backward(const TapeTensor& root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::function<void(const std::vector<double>&)> back;
  };

  const Node& at(const TapeTensor& t, const char* who) const;
  int push(Shape shape, std::vector<double> values, bool requires_grad,
           std::function<void(const std::vector<double>&)> back);
  std::vector<double>& grad_buf(int id);
  bool wants_grad(int id) const { return nodes_[id].requires_grad; }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool backward_done_ = false;
};

}  // namespace ktraj::diff
