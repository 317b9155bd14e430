#include "patchrot/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <type_traits>

namespace patchrot {

std::string_view to_string(EncoderVariant v) noexcept {
  return v == EncoderVariant::ResNet8 ? "resnet8" : "resnet32";
}

EncoderVariant parse_encoder(std::string_view text) {
  if (text == "resnet8") return EncoderVariant::ResNet8;
  if (text == "resnet32") return EncoderVariant::ResNet32;
  throw Error(ErrorKind::InvalidConfig, "unknown encoder '" + std::string(text) + "'");
}

std::string EncoderSpec::describe() const {
  return std::string(to_string(variant)) + "/in" + std::to_string(input_channels) + "/latent" +
         std::to_string(latent_dim);
}

// ---------------------------------------------------------------------------

LinearLayer::LinearLayer(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", Tensor(Shape{out, in})), bias(name + ".bias", Tensor(Shape{out})) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (float& v : weight.value.data()) v = static_cast<float>((2.0 * rng.uniform01() - 1.0) * bound);
  for (float& v : bias.value.data()) v = static_cast<float>((2.0 * rng.uniform01() - 1.0) * bound);
}

Var LinearLayer::forward(Tape& tape, const Var& x) {
  return linear(x, tape.parameter(weight), tape.parameter(bias));
}

Var LinearLayer::forward_frozen(Tape& tape, const Var& x) const {
  return linear(x, tape.constant(weight.value), tape.constant(bias.value));
}

void LinearLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

void LinearLayer::visit(const StateVisitor& f) {
  f(weight.name, weight.value);
  f(bias.name, bias.value);
}

void LinearLayer::visit(const ConstStateVisitor& f) const {
  f(weight.name, weight.value);
  f(bias.name, bias.value);
}

// ---------------------------------------------------------------------------

Encoder::ConvBn Encoder::make_conv(const std::string& name, int in, int out, Rng& rng) {
  ConvBn c;
  c.name = name;
  c.weight = Parameter(name + ".conv", Tensor(Shape{out, in, 3, 3}));
  const double std_dev = std::sqrt(2.0 / (in * 9.0));
  for (float& v : c.weight.value.data()) v = static_cast<float>(rng.normal() * std_dev);
  c.gamma = Parameter(name + ".bn.gamma", Tensor(Shape{out}, 1.0f));
  c.beta = Parameter(name + ".bn.beta", Tensor(Shape{out}, 0.0f));
  c.stats = BatchNormStats(out);
  return c;
}

Encoder::Encoder(const EncoderSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.latent_dim != kLatentDim) {
    throw Error(ErrorKind::InvalidConfig, "latent dimension is fixed at 64");
  }
  if (spec.input_channels < 1) throw Error(ErrorKind::InvalidConfig, "input channels must be >= 1");
  stem_ = make_conv("encoder.stem", spec.input_channels, 16, rng);
  const int widths[3] = {16, 32, 64};
  int in = 16;
  for (int stage = 0; stage < 3; ++stage) {
    for (int b = 0; b < spec.blocks_per_stage(); ++b) {
      Block blk;
      blk.in_channels = in;
      blk.out_channels = widths[stage];
      blk.stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string name =
          "encoder.stage" + std::to_string(stage + 1) + ".block" + std::to_string(b);
      blk.first = make_conv(name + ".a", in, widths[stage], rng);
      blk.second = make_conv(name + ".b", widths[stage], widths[stage], rng);
      blocks_.push_back(std::move(blk));
      in = widths[stage];
    }
  }
}

template <typename Self>
Var Encoder::run(Self& self, Tape& tape, const Var& x, bool training, Var* last_stage) {
  constexpr bool frozen = std::is_const_v<Self>;
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != self.spec_.input_channels) {
    throw Error(ErrorKind::ShapeMismatch, "encoder expects N x " +
                                              std::to_string(self.spec_.input_channels) +
                                              " x H x W, got " + shape_string(s));
  }
  if (s[2] < 8 || s[3] < 8) throw Error(ErrorKind::ShapeMismatch, "spatial dims must be >= 8");

  auto conv_bn = [&](auto& c, const Var& in, int stride) {
    if constexpr (frozen) {
      BatchNormStats stats = c.stats;
      const Var y = conv2d(in, tape.constant(c.weight.value), stride, Padding::Same);
      return batchnorm2d(y, tape.constant(c.gamma.value), tape.constant(c.beta.value), stats,
                         false, kBatchNormMomentum, kBatchNormEpsilon);
    } else {
      const Var y = conv2d(in, tape.parameter(c.weight), stride, Padding::Same);
      return batchnorm2d(y, tape.parameter(c.gamma), tape.parameter(c.beta), c.stats, training,
                         kBatchNormMomentum, kBatchNormEpsilon);
    }
  };

  Var h = relu(conv_bn(self.stem_, x, 1));
  for (auto& blk : self.blocks_) {
    const Var a = relu(conv_bn(blk.first, h, blk.stride));
    const Var b = conv_bn(blk.second, a, 1);
    const Var skip = (blk.stride == 1 && blk.in_channels == blk.out_channels)
                         ? h
                         : shortcut_pad(h, blk.out_channels, blk.stride);
    h = relu(add(b, skip));
  }
  if (last_stage != nullptr) *last_stage = h;
  return global_avg_pool(h);
}

Var Encoder::forward(Tape& tape, const Var& x, bool training, Var* last_stage) {
  return run(*this, tape, x, training, last_stage);
}

Var Encoder::forward_frozen(Tape& tape, const Var& x, Var* last_stage) const {
  return run(*this, tape, x, false, last_stage);
}

void Encoder::collect(std::vector<Parameter*>& out) {
  auto add_conv = [&out](ConvBn& c) {
    out.push_back(&c.weight);
    out.push_back(&c.gamma);
    out.push_back(&c.beta);
  };
  add_conv(stem_);
  for (auto& b : blocks_) {
    add_conv(b.first);
    add_conv(b.second);
  }
}

void Encoder::visit(const StateVisitor& f) {
  auto conv = [&f](ConvBn& c) {
    f(c.weight.name, c.weight.value);
    f(c.gamma.name, c.gamma.value);
    f(c.beta.name, c.beta.value);
    f(c.name + ".bn.running_mean", c.stats.running_mean);
    f(c.name + ".bn.running_var", c.stats.running_var);
  };
  conv(stem_);
  for (auto& b : blocks_) {
    conv(b.first);
    conv(b.second);
  }
}

void Encoder::visit(const ConstStateVisitor& f) const {
  const_cast<Encoder*>(this)->visit(
      StateVisitor([&f](const std::string& name, Tensor& t) { f(name, t); }));
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  auto& self = const_cast<Encoder&>(*this);
  std::vector<Parameter*> params;
  self.collect(params);
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------

HeadKind head_for(Variant v) noexcept {
  switch (v) {
    case Variant::RotNet: return HeadKind::RotNet4;
    case Variant::PatchRotNet: return HeadKind::PatchRot8;
    case Variant::PatchRelNet: return HeadKind::RelNet4;
  }
  return HeadKind::PatchRot8;
}

std::string_view to_string(HeadKind h) noexcept {
  switch (h) {
    case HeadKind::RotNet4: return "rotnet4";
    case HeadKind::PatchRot8: return "patchrot8";
    case HeadKind::RelNet4: return "relnet4";
  }
  return "?";
}

int head_inputs(HeadKind h) noexcept { return h == HeadKind::RelNet4 ? 2 * kLatentDim : kLatentDim; }
int head_outputs(HeadKind h) noexcept { return h == HeadKind::PatchRot8 ? 8 : 4; }

namespace {

void load_state(const std::function<void(const StateVisitor&)>& visit, const Checkpoint& ckpt,
                std::string_view prefix) {
  std::map<std::string, const Tensor*, std::less<>> by_name;
  for (const auto& e : ckpt.entries) by_name.emplace(e.name, &e.tensor);
  visit([&](const std::string& name, Tensor& t) {
    if (!name.starts_with(prefix)) return;
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorKind::CheckpointMismatch, "missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw Error(ErrorKind::CheckpointMismatch, "shape mismatch for " + name + ": " +
                                                     shape_string(it->second->shape()) + " vs " +
                                                     shape_string(t.shape()));
    }
    t = *it->second;
  });
}

}  // namespace

Model::Model(const EncoderSpec& spec, HeadKind head, std::uint64_t seed) : head_kind_(head) {
  Rng rng = Rng(seed).split({0x6d6f64656cULL});
  encoder_ = Encoder(spec, rng);
  head_ = LinearLayer("head.fc", head_inputs(head), head_outputs(head), rng);
}

Var Model::logits(Tape& tape, const Var& x, bool training) {
  if (head_kind_ == HeadKind::RelNet4) {
    throw Error(ErrorKind::ShapeMismatch, "relation head needs an image pair");
  }
  return head_.forward(tape, encoder_.forward(tape, x, training));
}

Var Model::logits(Tape& tape, const Var& a, const Var& b, bool training) {
  if (head_kind_ != HeadKind::RelNet4) {
    throw Error(ErrorKind::ShapeMismatch, "pair input needs the relation head");
  }
  if (a.shape().empty() || b.shape().empty() || a.shape()[0] != b.shape()[0]) {
    throw Error(ErrorKind::ShapeMismatch, "paired batches must have equal size");
  }
  const Var fa = encoder_.forward(tape, a, training);
  const Var fb = encoder_.forward(tape, b, training);
  return head_.forward(tape, concat(fa, fb, 1));
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  encoder_.collect(out);
  head_.collect(out);
  return out;
}

std::uint64_t Model::structure_hash() const {
  return fnv1a64("pretext-model/" + spec().describe() + "/" + std::string(to_string(head_kind_)));
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.model_hash = structure_hash();
  const ConstStateVisitor collect = [&ckpt](const std::string& name, const Tensor& t) {
    ckpt.entries.push_back({name, t});
  };
  encoder_.visit(collect);
  head_.visit(collect);
  return ckpt;
}

void Model::load(const Checkpoint& ckpt) {
  if (ckpt.model_hash != structure_hash()) {
    throw Error(ErrorKind::CheckpointMismatch, "checkpoint was written for a different model");
  }
  load_state(
      [this](const StateVisitor& f) {
        encoder_.visit(f);
        head_.visit(f);
      },
      ckpt, "");
}

void load_encoder(Encoder& encoder, const Checkpoint& ckpt) {
  load_state([&encoder](const StateVisitor& f) { encoder.visit(f); }, ckpt, "encoder.");
}

Tensor encode(const Encoder& encoder, const Tensor& batch) {
  Tape tape;
  return encoder.forward_frozen(tape, tape.constant(batch)).value();
}

Tensor encode(const Model& model, const Tensor& batch) { return encode(model.encoder(), batch); }

namespace {

Tensor single_head(const Model& model, const Tensor& batch, HeadKind expected) {
  if (model.head_kind() != expected) {
    throw Error(ErrorKind::ShapeMismatch, "model carries a " + std::string(to_string(model.head_kind())) +
                                              " head");
  }
  Tape tape;
  const Var f = model.encoder().forward_frozen(tape, tape.constant(batch));
  return model.head().forward_frozen(tape, f).value();
}

}  // namespace

Tensor classify_patchrot(const Model& model, const Tensor& batch) {
  return single_head(model, batch, HeadKind::PatchRot8);
}

Tensor classify_rotnet(const Model& model, const Tensor& batch) {
  return single_head(model, batch, HeadKind::RotNet4);
}

Tensor classify_rel(const Model& model, const Tensor& batch_a, const Tensor& batch_b) {
  if (model.head_kind() != HeadKind::RelNet4) {
    throw Error(ErrorKind::ShapeMismatch, "model has no relation head");
  }
  if (batch_a.rank() < 1 || batch_b.rank() < 1 || batch_a.dim(0) != batch_b.dim(0)) {
    throw Error(ErrorKind::ShapeMismatch, "paired batches must have equal size");
  }
  Tape tape;
  const Var fa = model.encoder().forward_frozen(tape, tape.constant(batch_a));
  const Var fb = model.encoder().forward_frozen(tape, tape.constant(batch_b));
  return model.head().forward_frozen(tape, concat(fa, fb, 1)).value();
}

// ---------------------------------------------------------------------------

DownstreamModel::DownstreamModel(Encoder encoder, int hidden, int classes, std::uint64_t seed)
    : encoder_(std::move(encoder)) {
  if (classes < 2) throw Error(ErrorKind::InvalidConfig, "need at least two classes");
  if (hidden < 1) throw Error(ErrorKind::InvalidConfig, "hidden width must be >= 1");
  Rng rng = Rng(seed).split({0x68656164ULL});
  fc1_ = LinearLayer("classifier.fc1", kLatentDim, hidden, rng);
  fc2_ = LinearLayer("classifier.fc2", hidden, classes, rng);
}

Var DownstreamModel::head_forward(Tape& tape, const Var& features) {
  return fc2_.forward(tape, relu(fc1_.forward(tape, features)));
}

Var DownstreamModel::forward(Tape& tape, const Var& x, bool training) {
  return head_forward(tape, encoder_.forward(tape, x, training));
}

Tensor DownstreamModel::head_predict(const Tensor& features) const {
  Tape tape;
  const Var h = relu(fc1_.forward_frozen(tape, tape.constant(features)));
  return fc2_.forward_frozen(tape, h).value();
}

Tensor DownstreamModel::predict(const Tensor& batch) const {
  return head_predict(encode(encoder_, batch));
}

std::vector<Parameter*> DownstreamModel::head_parameters() {
  std::vector<Parameter*> out;
  fc1_.collect(out);
  fc2_.collect(out);
  return out;
}

std::vector<Parameter*> DownstreamModel::parameters() {
  std::vector<Parameter*> out;
  encoder_.collect(out);
  fc1_.collect(out);
  fc2_.collect(out);
  return out;
}

std::uint64_t DownstreamModel::structure_hash() const {
  return fnv1a64("downstream-model/" + encoder_.spec().describe() + "/mlp" +
                 std::to_string(hidden()) + "x" + std::to_string(classes()));
}

Checkpoint DownstreamModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.model_hash = structure_hash();
  const ConstStateVisitor collect = [&ckpt](const std::string& name, const Tensor& t) {
    ckpt.entries.push_back({name, t});
  };
  encoder_.visit(collect);
  fc1_.visit(collect);
  fc2_.visit(collect);
  return ckpt;
}

void DownstreamModel::load(const Checkpoint& ckpt) {
  if (ckpt.model_hash != structure_hash()) {
    throw Error(ErrorKind::CheckpointMismatch, "checkpoint was written for a different model");
  }
  load_state(
      [this](const StateVisitor& f) {
        encoder_.visit(f);
        fc1_.visit(f);
        fc2_.visit(f);
      },
      ckpt, "");
}

// ---------------------------------------------------------------------------

Image cam_from_activations(const Tensor& activations, const Tensor& gradients) {
  if (activations.rank() != 3 || activations.shape() != gradients.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "GradCAM expects matching C x h x w tensors");
  }
  const int c = activations.dim(0);
  const int h = activations.dim(1);
  const int w = activations.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> cam(hw, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const float* a = activations.data().data() + ch * hw;
    const float* g = gradients.data().data() + ch * hw;
    double weight = 0.0;
    for (std::size_t i = 0; i < hw; ++i) weight += g[i];
    weight /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += weight * a[i];
  }
  double peak = 0.0;
  for (double& v : cam) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  Image out(h, w, 1);
  for (std::size_t i = 0; i < hw; ++i) {
    out.data()[i] = peak > 0.0 ? std::clamp(static_cast<float>(cam[i] / peak), 0.0f, 1.0f) : 0.0f;
  }
  return out;
}

Image gradcam(const Model& model, const Image& image, int target_class, const GradCamOptions& options) {
  const int classes = head_outputs(model.head_kind());
  if (target_class < 0 || target_class >= classes) {
    throw Error(ErrorKind::InvalidClass, "class " + std::to_string(target_class) + " invalid for " +
                                             std::string(to_string(model.head_kind())) + " head");
  }
  const bool pair = model.head_kind() == HeadKind::RelNet4;
  if (pair && options.partner == nullptr) {
    throw Error(ErrorKind::ShapeMismatch, "relation head GradCAM needs the partner image");
  }

  Tape tape;
  const Image* one[] = {&image};
  const Var x = tape.input(stack_images(std::span<const Image* const>(one)), true);
  Var stage;
  Var features = model.encoder().forward_frozen(tape, x, &stage);
  if (pair) {
    const Image* other[] = {options.partner};
    const Var a = tape.constant(stack_images(std::span<const Image* const>(other)));
    features = concat(model.encoder().forward_frozen(tape, a), features, 1);
  }
  const Var logits = model.head().forward_frozen(tape, features);
  Tensor select(Shape{1, classes}, 0.0f);
  select[static_cast<std::size_t>(target_class)] = 1.0f;
  const Var score = sum(mul(logits, tape.constant(select)));
  tape.backward(score);

  const Tensor& act = stage.value();
  const Shape chw{act.dim(1), act.dim(2), act.dim(3)};
  const Image cam = cam_from_activations(act.reshaped(chw), stage.grad().reshaped(chw));
  if (!options.upsample_to_input) return cam;
  return bilinear_resize(cam, image.height(), image.width());
}

Image overlay_heatmap(const Image& image, const Image& heatmap, float alpha) {
  const Image heat = (heatmap.height() == image.height() && heatmap.width() == image.width())
                         ? heatmap
                         : bilinear_resize(heatmap, image.height(), image.width());
  Image out(image.height(), image.width(), 3);
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      const float v = heat(r, c);
      // Blue -> green -> red ramp.
      const float rgb[3] = {std::clamp(2.0f * v - 1.0f, 0.0f, 1.0f), 1.0f - std::abs(2.0f * v - 1.0f),
                            std::clamp(1.0f - 2.0f * v, 0.0f, 1.0f)};
      for (int z = 0; z < 3; ++z) {
        const float base = image(r, c, image.channels() == 3 ? z : 0);
        out(r, c, z) = std::clamp((1.0f - alpha) * base + alpha * rgb[z], 0.0f, 1.0f);
      }
    }
  }
  return out;
}

}  // namespace patchrot
