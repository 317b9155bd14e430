#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "patchrot/image.hpp"
#include "patchrot/pretext.hpp"
#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

namespace patchrot {

enum class EncoderVariant { ResNet8, ResNet32 };

std::string_view to_string(EncoderVariant v) noexcept;
EncoderVariant parse_encoder(std::string_view text);

/// CIFAR-style ResNet (6n + 2 layers), stage widths 16/32/64.
struct EncoderSpec {
  EncoderVariant variant = EncoderVariant::ResNet8;
  int input_channels = 3;
  int latent_dim = 64;

  int blocks_per_stage() const noexcept { return variant == EncoderVariant::ResNet8 ? 1 : 5; }
  std::string describe() const;
};

inline constexpr int kLatentDim = 64;
inline constexpr float kBatchNormMomentum = 0.1f;
inline constexpr float kBatchNormEpsilon = 1e-5f;

/// Visitor over every persistent tensor (trainable weights and BN buffers).
using StateVisitor = std::function<void(const std::string& name, Tensor& tensor)>;
using ConstStateVisitor = std::function<void(const std::string& name, const Tensor& tensor)>;

struct LinearLayer {
  Parameter weight;  // out x in
  Parameter bias;    // out

  LinearLayer() = default;
  LinearLayer(const std::string& name, int in, int out, Rng& rng);

  int in_features() const { return weight.value.dim(1); }
  int out_features() const { return weight.value.dim(0); }

  Var forward(Tape& tape, const Var& x);
  Var forward_frozen(Tape& tape, const Var& x) const;
  void collect(std::vector<Parameter*>& out);
  void visit(const StateVisitor& f);
  void visit(const ConstStateVisitor& f) const;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderSpec& spec, Rng& rng);

  const EncoderSpec& spec() const noexcept { return spec_; }

  /// N x C x H x W -> N x 64. `last_stage`, when given, receives the final
  /// residual stage output (pre-pool).
  Var forward(Tape& tape, const Var& x, bool training, Var* last_stage = nullptr);
  /// Eval-mode pass with weights entered as constants; nothing is mutated.
  Var forward_frozen(Tape& tape, const Var& x, Var* last_stage = nullptr) const;

  void collect(std::vector<Parameter*>& out);
  void visit(const StateVisitor& f);
  void visit(const ConstStateVisitor& f) const;
  std::size_t parameter_count() const;

 private:
  struct ConvBn {
    Parameter weight;
    Parameter gamma;
    Parameter beta;
    BatchNormStats stats;
    std::string name;
  };
  struct Block {
    ConvBn first;
    ConvBn second;
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
  };

  static ConvBn make_conv(const std::string& name, int in, int out, Rng& rng);
  template <typename Self>
  static Var run(Self& self, Tape& tape, const Var& x, bool training, Var* last_stage);

  EncoderSpec spec_;
  ConvBn stem_;
  std::vector<Block> blocks_;
};

enum class HeadKind { RotNet4, PatchRot8, RelNet4 };

HeadKind head_for(Variant v) noexcept;
std::string_view to_string(HeadKind h) noexcept;
int head_inputs(HeadKind h) noexcept;
int head_outputs(HeadKind h) noexcept;

/// Encoder plus the pretext classifier: 64 -> 4 (RotNet), 64 -> 8 (Patch
/// RotNet) or concat(64, 64) = 128 -> 4 (Patch RelNet).
class Model {
 public:
  Model() = default;
  Model(const EncoderSpec& spec, HeadKind head, std::uint64_t seed);

  const EncoderSpec& spec() const noexcept { return encoder_.spec(); }
  HeadKind head_kind() const noexcept { return head_kind_; }
  Encoder& encoder() noexcept { return encoder_; }
  const Encoder& encoder() const noexcept { return encoder_; }
  LinearLayer& head() noexcept { return head_; }
  const LinearLayer& head() const noexcept { return head_; }

  /// Single-image heads.
  Var logits(Tape& tape, const Var& x, bool training);
  /// Relation head on an ordered pair.
  Var logits(Tape& tape, const Var& a, const Var& b, bool training);

  std::vector<Parameter*> parameters();
  std::uint64_t structure_hash() const;
  Checkpoint to_checkpoint() const;
  /// Throws CheckpointMismatch when structure or tensor shapes differ.
  void load(const Checkpoint& ckpt);

 private:
  HeadKind head_kind_ = HeadKind::PatchRot8;
  Encoder encoder_;
  LinearLayer head_;
};

/// Eval-mode, gradient-free helpers.
Tensor encode(const Model& model, const Tensor& batch);
Tensor encode(const Encoder& encoder, const Tensor& batch);
Tensor classify_patchrot(const Model& model, const Tensor& batch);
Tensor classify_rotnet(const Model& model, const Tensor& batch);
Tensor classify_rel(const Model& model, const Tensor& batch_a, const Tensor& batch_b);

/// Frozen or trainable encoder followed by a two-layer classifier
/// (64 -> hidden -> classes, ReLU between).
class DownstreamModel {
 public:
  DownstreamModel() = default;
  DownstreamModel(Encoder encoder, int hidden, int classes, std::uint64_t seed);

  Encoder& encoder() noexcept { return encoder_; }
  const Encoder& encoder() const noexcept { return encoder_; }
  int classes() const { return fc2_.out_features(); }
  int hidden() const { return fc1_.out_features(); }

  Var head_forward(Tape& tape, const Var& features);
  Var forward(Tape& tape, const Var& x, bool training);
  Tensor head_predict(const Tensor& features) const;
  /// Eval-mode logits.
  Tensor predict(const Tensor& batch) const;

  std::vector<Parameter*> head_parameters();
  std::vector<Parameter*> parameters();
  std::uint64_t structure_hash() const;
  Checkpoint to_checkpoint() const;
  void load(const Checkpoint& ckpt);

 private:
  Encoder encoder_;
  LinearLayer fc1_;
  LinearLayer fc2_;
};

/// Loads only the encoder tensors (names prefixed "encoder.") of a checkpoint.
void load_encoder(Encoder& encoder, const Checkpoint& ckpt);

struct GradCamOptions {
  bool upsample_to_input = false;
  /// Relation heads: the first pair member. The image passed to gradcam() is
  /// then the second member and is the one being explained.
  const Image* partner = nullptr;
};

/// Heatmap from a C x h x w activation and its gradient: ReLU(sum_c w_c A_c)
/// with w_c the spatial mean of the gradient, divided by its maximum.
Image cam_from_activations(const Tensor& activations, const Tensor& gradients);

/// GradCAM over the last residual stage. Returns a single-channel image in [0, 1].
Image gradcam(const Model& model, const Image& image, int target_class,
              const GradCamOptions& options = {});

/// Heat colour map blended over the image (for inspection).
Image overlay_heatmap(const Image& image, const Image& heatmap, float alpha = 0.5f);

}  // namespace patchrot
