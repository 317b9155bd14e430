#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patchrot/error.hpp"

namespace patchrot {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrixXf>;
using ConstMatrixMap = Eigen::Map<const RowMatrixXf>;
using VectorMap = Eigen::Map<Eigen::VectorXf>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXf>;

/// Dense row-major float array. Plain value type; gradients live on the tape.
/// Storage is aligned to Eigen's maximum packet alignment so vectorized
/// reductions peel the same way on every run.
class Tensor {
 public:
  using Storage = std::vector<float, Eigen::aligned_allocator<float>>;

  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }
  /// Same values under a shape with the same element count.
  Tensor reshaped(Shape shape) const;

  VectorMap vec() { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }
  ConstVectorMap vec() const { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }

  /// Row-major view with the last axis as columns and all leading axes folded into rows.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  Storage data_;
};

/// Trainable (or frozen) model weight plus its gradient and optimizer state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad();
};

/// Running statistics of a batch-norm layer (non-trainable buffers).
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  explicit BatchNormStats(int channels = 0)
      : running_mean(Shape{channels}, 0.0f), running_var(Shape{channels}, 1.0f) {}
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient after backward(); a zero tensor when nothing flowed here.
  Tensor grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode gradient tape. Operations are appended in execution order and
/// backward() visits them in exact reverse. A tape can be consumed once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value, bool requires_grad);
  /// Leaf bound to a model parameter. backward() adds into `param.grad`
  /// when the parameter is trainable.
  Var parameter(Parameter& param);

  void backward(const Var& loss);
  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }
  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  /// Gradient accumulator for node `id`, zero-initialized on first use.
  Tensor& grad_buffer(int id);
  const Tensor* grad_if_any(int id) const;
  /// Adds `delta` into node `id`'s gradient, adopting the buffer on first use.
  void accumulate_grad(int id, Tensor&& delta);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Shapes use N x C x H x W for images and N x F for
// feature matrices. All reductions run in a fixed order.

enum class Padding { Same, Valid };

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
/// Weight layout O x C x kh x kw. Same padding pads (k - 1) / 2 on each side.
Var conv2d(const Var& x, const Var& weight, int stride, Padding padding);
Var relu(const Var& x);
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                bool training, float momentum = 0.1f, float epsilon = 1e-5f);
Var global_avg_pool(const Var& x);
/// x: N x in, weight: out x in, bias: out.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var concat(std::span<const Var> parts, int axis);
Var concat(const Var& a, const Var& b, int axis);
/// Mean cross-entropy over the batch with max-subtracted log-sum-exp.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);
Var sum(const Var& x);
/// Option-A residual shortcut: spatial subsampling by `stride` and symmetric
/// zero-padding of the channel axis up to `out_channels`.
Var shortcut_pad(const Var& x, int out_channels, int stride);

/// Row-wise softmax of an N x K tensor.
Tensor softmax(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

struct SgdOptions {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
};

/// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, const SgdOptions& opt);
void sgd_step(std::span<Parameter* const> params, const SgdOptions& opt);

// ---------------------------------------------------------------------------
// Checkpoints: "PRCK" magic, u32 version, u64 model hash, u32 entry count,
// then per entry: u32 name length, name bytes, u32 rank, i32 extents, raw
// little-endian float32 payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t model_hash = 0;
  std::vector<NamedTensor> entries;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// 64-bit FNV-1a, used for model-structure hashes.
std::uint64_t fnv1a64(std::string_view text) noexcept;

}  // namespace patchrot
