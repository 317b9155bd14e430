#include "patchrot/tensor.hpp"

#include <cmath>
#include <numeric>

namespace patchrot {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw Error(ErrorKind::ShapeMismatch, "negative extent");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_size(shape_)) {
    throw Error(ErrorKind::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                              " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "cannot view " + shape_string(shape_) + " as " + shape_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

MatrixMap Tensor::matrix() {
  const Eigen::Index cols = shape_.empty() ? 1 : shape_.back();
  const Eigen::Index rows = cols == 0 ? 0 : static_cast<Eigen::Index>(data_.size()) / cols;
  return {data_.data(), rows, cols};
}

ConstMatrixMap Tensor::matrix() const {
  const Eigen::Index cols = shape_.empty() ? 1 : shape_.back();
  const Eigen::Index rows = cols == 0 ? 0 : static_cast<Eigen::Index>(data_.size()) / cols;
  return {data_.data(), rows, cols};
}

bool Tensor::all_finite() const { return vec().allFinite(); }

void Parameter::zero_grad() {
  if (grad.shape() != value.shape() || grad.size() != value.size()) {
    grad = Tensor(value.shape(), 0.0f);
  } else {
    grad.vec().setZero();
  }
}

// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Var::grad() const {
  if (const Tensor* g = tape_->grad_if_any(id_)) return *g;
  return Tensor(value().shape(), 0.0f);
}

Var Tape::constant(Tensor value) { return input(std::move(value), false); }

Var Tape::input(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw Error(ErrorKind::NonFiniteValue, "non-finite input tensor");
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(Parameter& param) {
  Node& n = nodes_.emplace_back();
  n.value = param.value;
  n.requires_grad = param.trainable;
  n.param = &param;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  if (consumed_) throw Error(ErrorKind::TapeConsumed, "cannot record on a consumed tape");
  if (!value.all_finite()) throw Error(ErrorKind::NonFiniteValue, "operation produced NaN/Inf");
  bool needs = false;
  for (const Var& p : parents) {
    if (&p.tape() != this) throw Error(ErrorKind::ShapeMismatch, "operands on different tapes");
    needs = needs || p.requires_grad();
  }
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  // A rank-0 value shares its empty shape with a default Tensor, so compare sizes too.
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape(), 0.0f);
  }
  return n.grad;
}

void Tape::accumulate_grad(int id, Tensor&& delta) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (!n.requires_grad) return;
  if (delta.shape() != n.value.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "gradient " + shape_string(delta.shape()) + " for value " +
                                              shape_string(n.value.shape()));
  }
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = std::move(delta);
  } else {
    n.grad.vec() += delta.vec();
  }
}

const Tensor* Tape::grad_if_any(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  return n.grad.shape() == n.value.shape() && n.grad.size() == n.value.size() ? &n.grad : nullptr;
}

void Tape::backward(const Var& loss) {
  if (consumed_) throw Error(ErrorKind::TapeConsumed, "backward already ran on this tape");
  if (&loss.tape() != this) throw Error(ErrorKind::ShapeMismatch, "loss recorded on another tape");
  if (loss.value().size() != 1) {
    throw Error(ErrorKind::NotScalar, "loss has shape " + shape_string(loss.shape()));
  }
  consumed_ = true;
  if (!requires_grad(loss.id())) return;
  grad_buffer(loss.id()).vec().setConstant(1.0f);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (!n.grad.all_finite()) throw Error(ErrorKind::NonFiniteValue, "gradient became NaN/Inf");
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.size() != p.value.size() || p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape(), 0.0f);
      p.grad.vec() += n.grad.vec();
    }
  }
}

// ---------------------------------------------------------------------------

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, const SgdOptions& opt) {
  if (grad.shape() != param.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "grad " + shape_string(grad.shape()) + " vs param " +
                                              shape_string(param.shape()));
  }
  if (!(opt.lr > 0.0f)) throw Error(ErrorKind::InvalidConfig, "learning rate must be positive");
  if (velocity.shape() != param.shape()) velocity = Tensor(param.shape(), 0.0f);
  auto v = velocity.vec();
  v = opt.momentum * v + grad.vec() + opt.weight_decay * param.vec();
  param.vec() -= opt.lr * v;
}

void sgd_step(std::span<Parameter* const> params, const SgdOptions& opt) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (p->grad.size() != p->value.size() || p->grad.shape() != p->value.shape()) p->zero_grad();
    sgd_step(p->value, p->grad, p->velocity, opt);
  }
}

std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace patchrot
