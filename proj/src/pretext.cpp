#include "patchrot/pretext.hpp"

#include <cmath>
#include <numeric>

namespace patchrot {

namespace {

constexpr std::uint64_t kPlacementKey = 0x706c6163;  // "plac"
constexpr std::uint64_t kShuffleKey = 0x73687566;    // "shuf"
constexpr std::uint64_t kLabelKey = 0x6c61626c;      // "labl"

}  // namespace

int class_count(Variant v) noexcept { return v == Variant::PatchRotNet ? 8 : 4; }

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::RotNet: return "rotnet";
    case Variant::PatchRotNet: return "patch-rotnet";
    case Variant::PatchRelNet: return "patch-relnet";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  if (text == "rotnet") return Variant::RotNet;
  if (text == "patch-rotnet") return Variant::PatchRotNet;
  if (text == "patch-relnet") return Variant::PatchRelNet;
  throw Error(ErrorKind::InvalidConfig, "unknown variant '" + std::string(text) + "'");
}

std::pair<int, int> patch_extent(int height, int width, double ratio) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) {
    throw Error(ErrorKind::InvalidConfig, "ratio must be positive, got " + std::to_string(ratio));
  }
  const int ph = static_cast<int>(std::floor(ratio * height + 0.5));
  const int pw = static_cast<int>(std::floor(ratio * width + 0.5));
  if (ph > height || pw > width) {
    throw Error(ErrorKind::PatchTooLarge, "patch " + std::to_string(ph) + "x" + std::to_string(pw) +
                                              " exceeds " + std::to_string(height) + "x" +
                                              std::to_string(width) + " image");
  }
  if (ratio >= 1.0) throw Error(ErrorKind::InvalidConfig, "ratio must lie in (0, 1)");
  if (ph < 1 || pw < 1) throw Error(ErrorKind::InvalidConfig, "ratio yields an empty patch");
  return {ph, pw};
}

Image make_patched(const Image& x, int k, const Placement& where) {
  const Image patch = bilinear_resize(rotate90(x, k), where.height, where.width);
  return paste(x, patch, where.top, where.left);
}

Placement sample_placement(const Image& x, int patch_h, int patch_w, Rng& rng) {
  Placement p;
  p.height = patch_h;
  p.width = patch_w;
  p.top = static_cast<int>(rng.uniform_int(0, x.height() - patch_h));
  p.left = static_cast<int>(rng.uniform_int(0, x.width() - patch_w));
  return p;
}

std::vector<PretextSample> generate_rotnet_set(const Image& x) {
  std::vector<PretextSample> out;
  out.reserve(4);
  for (int k = 0; k < 4; ++k) out.push_back({rotate90(x, k), k, Variant::RotNet, std::nullopt});
  return out;
}

std::vector<PretextSample> generate_patched_set(const Image& x, const PretextConfig& cfg, Rng& rng) {
  const auto [ph, pw] = patch_extent(x.height(), x.width(), cfg.ratio);
  std::vector<PretextSample> out;
  out.reserve(8);
  for (int k = 0; k < 4; ++k) out.push_back({rotate90(x, k), k, Variant::PatchRotNet, std::nullopt});
  for (int k = 0; k < 4; ++k) {
    const Placement where = sample_placement(x, ph, pw, rng);
    out.push_back({make_patched(x, k, where), 4 + k, Variant::PatchRotNet, where});
  }
  return out;
}

std::vector<PretextPair> generate_pairs(const Image& x, const PretextConfig& cfg, Rng& rng) {
  const auto [ph, pw] = patch_extent(x.height(), x.width(), cfg.ratio);
  std::vector<PretextPair> out;
  out.reserve(4);
  for (int k = 0; k < 4; ++k) {
    const Placement where = sample_placement(x, ph, pw, rng);
    out.push_back({rotate90(x, k), make_patched(x, k, where), k, where});
  }
  return out;
}

Rng image_stream(const PretextConfig& cfg, int epoch, std::size_t image_index) {
  const int effective = cfg.resample_position_each_epoch ? epoch : 0;
  return Rng(cfg.rng_seed).split({kPlacementKey, static_cast<std::uint64_t>(effective), image_index});
}

Tensor stack_images(std::span<const Image* const> images) {
  if (images.empty()) throw Error(ErrorKind::EmptyDataset, "no images to stack");
  const int h = images[0]->height();
  const int w = images[0]->width();
  const int c = images[0]->channels();
  Tensor out(Shape{static_cast<int>(images.size()), c, h, w});
  float* dst = out.data().data();
  for (const Image* img : images) {
    if (img->height() != h || img->width() != w || img->channels() != c) {
      throw Error(ErrorKind::ShapeMismatch, "images in a batch must share dimensions");
    }
    for (int z = 0; z < c; ++z)
      for (int r = 0; r < h; ++r)
        for (int col = 0; col < w; ++col) *dst++ = (*img)(r, col, z);
  }
  return out;
}

Tensor stack_images(std::span<const Image> images) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const Image& img : images) ptrs.push_back(&img);
  return stack_images(std::span<const Image* const>(ptrs));
}

// ---------------------------------------------------------------------------

EpochStream::EpochStream(std::span<const Image> dataset, Variant variant, const PretextConfig& cfg,
                         int epoch, int batch_size)
    : dataset_(dataset), variant_(variant), cfg_(cfg), epoch_(epoch), batch_size_(batch_size) {
  if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "pretext dataset is empty");
  if (batch_size < 1) throw Error(ErrorKind::InvalidConfig, "batch size must be >= 1");
  if (variant != Variant::RotNet) {
    patch_extent(dataset[0].height(), dataset[0].width(), cfg.ratio);
  }

  order_.resize(dataset.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng shuffle = Rng(cfg.rng_seed).split({kShuffleKey, static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = order_.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order_[i - 1], order_[j]);
  }

  const int classes = class_count(variant);
  for (const std::size_t img : order_) {
    if (cfg.one_transform_per_image) {
      Rng pick = Rng(cfg.rng_seed).split({kLabelKey, static_cast<std::uint64_t>(epoch), img});
      items_.push_back({img, static_cast<int>(pick.uniform_int(0, classes - 1))});
    } else {
      for (int y = 0; y < classes; ++y) items_.push_back({img, y});
    }
  }
}

std::size_t EpochStream::batch_count() const noexcept {
  const auto b = static_cast<std::size_t>(batch_size_);
  return (items_.size() + b - 1) / b;
}

PretextBatch EpochStream::batch(std::size_t index) const {
  const std::size_t begin = index * static_cast<std::size_t>(batch_size_);
  const std::size_t end = std::min(items_.size(), begin + static_cast<std::size_t>(batch_size_));
  if (begin >= end) throw Error(ErrorKind::OutOfBounds, "batch index out of range");

  PretextBatch out;
  std::vector<Image> first;
  std::vector<Image> second;
  std::size_t cached = static_cast<std::size_t>(-1);
  std::vector<PretextSample> samples;
  std::vector<PretextPair> pairs;

  for (std::size_t i = begin; i < end; ++i) {
    const Item& item = items_[i];
    if (item.image != cached) {
      cached = item.image;
      const Image& x = dataset_[item.image];
      Rng rng = image_stream(cfg_, epoch_, item.image);
      switch (variant_) {
        case Variant::RotNet: samples = generate_rotnet_set(x); break;
        case Variant::PatchRotNet: samples = generate_patched_set(x, cfg_, rng); break;
        case Variant::PatchRelNet: pairs = generate_pairs(x, cfg_, rng); break;
      }
    }
    const auto y = static_cast<std::size_t>(item.label);
    if (variant_ == Variant::PatchRelNet) {
      first.push_back(pairs[y].image_a);
      second.push_back(pairs[y].image_b);
      out.patches.emplace_back(pairs[y].patch);
    } else {
      first.push_back(samples[y].image);
      out.patches.push_back(samples[y].patch);
    }
    out.labels.push_back(item.label);
    out.source_index.push_back(item.image);
  }
  out.inputs = stack_images(std::span<const Image>(first));
  if (!second.empty()) out.partner = stack_images(std::span<const Image>(second));
  return out;
}

std::optional<PretextBatch> EpochStream::next() {
  if (cursor_ >= batch_count()) return std::nullopt;
  return batch(cursor_++);
}

EpochStream build_epoch(std::span<const Image> dataset, Variant variant, const PretextConfig& cfg,
                        int epoch, int batch_size) {
  return EpochStream(dataset, variant, cfg, epoch, batch_size);
}

}  // namespace patchrot
