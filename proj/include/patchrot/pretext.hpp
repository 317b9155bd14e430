#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchrot/image.hpp"
#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

namespace patchrot {

/// RotNet: 4 whole-image rotations. PatchRotNet: those 4 plus 4 patched images
/// (8 classes). PatchRelNet: 4 (rotated, patched) pairs sharing a quarter-turn count.
enum class Variant { RotNet, PatchRotNet, PatchRelNet };

int class_count(Variant v) noexcept;
std::string_view to_string(Variant v) noexcept;
Variant parse_variant(std::string_view text);

/// Rectangle occupied by a pasted patch.
struct Placement {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  bool contains(int r, int c) const noexcept {
    return r >= top && r < top + height && c >= left && c < left + width;
  }
  bool operator==(const Placement&) const = default;
};

/// Labels 0..3: whole image turned k quarter turns. Labels 4..7: upright image
/// carrying a patch whose content is turned (label - 4) quarter turns.
struct PretextSample {
  Image image;
  int label = 0;
  Variant variant = Variant::PatchRotNet;
  std::optional<Placement> patch;
};

struct PretextPair {
  Image image_a;  // rotate90(x, label)
  Image image_b;  // x with a patch of rotate90(x, label)
  int label = 0;
  Placement patch;
};

struct PretextConfig {
  double ratio = 0.4;
  std::uint64_t rng_seed = 0;
  bool resample_position_each_epoch = true;
  /// Draw a single random transform per image and epoch instead of all N.
  bool one_transform_per_image = false;
};

/// round-half-up(ratio * dim) per axis. Throws PatchTooLarge / InvalidConfig.
std::pair<int, int> patch_extent(int height, int width, double ratio);

/// Deterministic building block: x with bilinear_resize(rotate90(x, k)) pasted at (top, left).
Image make_patched(const Image& x, int k, const Placement& where);

/// Uniform placement of an (h x w) patch over every valid position.
Placement sample_placement(const Image& x, int patch_h, int patch_w, Rng& rng);

std::vector<PretextSample> generate_rotnet_set(const Image& x);
std::vector<PretextSample> generate_patched_set(const Image& x, const PretextConfig& cfg, Rng& rng);
std::vector<PretextPair> generate_pairs(const Image& x, const PretextConfig& cfg, Rng& rng);

/// Per-image generator used by the epoch stream: depends only on the seed,
/// the (effective) epoch and the image's dataset index.
Rng image_stream(const PretextConfig& cfg, int epoch, std::size_t image_index);

/// Source images stacked as an N x C x H x W tensor (channel-planar).
Tensor stack_images(std::span<const Image> images);
Tensor stack_images(std::span<const Image* const> images);

struct PretextBatch {
  Tensor inputs;   // N x C x H x W (image_a for pairs)
  Tensor partner;  // pairs only: image_b
  std::vector<int> labels;
  std::vector<std::size_t> source_index;
  std::vector<std::optional<Placement>> patches;

  std::size_t size() const noexcept { return labels.size(); }
};

/// Lazily materialized batches for one epoch. Source images are shuffled with a
/// seeded generator, each expands into its pretext samples (or pairs) in class
/// order, and consecutive samples are grouped into batches.
class EpochStream {
 public:
  EpochStream(std::span<const Image> dataset, Variant variant, const PretextConfig& cfg, int epoch,
              int batch_size);

  std::size_t sample_count() const noexcept { return items_.size(); }
  std::size_t batch_count() const noexcept;
  std::span<const std::size_t> image_order() const noexcept { return order_; }

  PretextBatch batch(std::size_t index) const;
  std::optional<PretextBatch> next();

 private:
  struct Item {
    std::size_t image;
    int label;
  };

  std::span<const Image> dataset_;
  Variant variant_;
  PretextConfig cfg_;
  int epoch_;
  int batch_size_;
  std::vector<std::size_t> order_;
  std::vector<Item> items_;
  std::size_t cursor_ = 0;
};

EpochStream build_epoch(std::span<const Image> dataset, Variant variant, const PretextConfig& cfg,
                        int epoch, int batch_size);

}  // namespace patchrot
