#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "patchrot/image.hpp"

namespace patchrot {

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int num_classes = 0;
  /// Optional per-class names (PPM directory layouts, synthetic glyphs).
  std::vector<std::string> class_names;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr int kCifarSide = 32;
inline constexpr int kCifarClasses = 10;

/// CIFAR-10 binary batches: 1 label byte then 1024 R, 1024 G, 1024 B bytes,
/// each plane row-major.
LabeledDataset decode_cifar_binary(std::span<const unsigned char> bytes);
LabeledDataset load_cifar_binary(const std::filesystem::path& path);
std::vector<unsigned char> encode_cifar_binary(const LabeledDataset& data);

/// Either `root/<class>/*.ppm` (labels from sorted class directory names) or a
/// flat directory of .ppm files (every label 0). Files are read in sorted order.
LabeledDataset load_ppm_directory(const std::filesystem::path& root);

/// 5 x 5 glyph bitmaps used by the synthetic dataset, row-major, true = ink.
struct Glyph {
  std::string name;
  std::vector<bool> cells;  // 25 entries
  static constexpr int kSide = 5;

  bool at(int r, int c) const { return cells[static_cast<std::size_t>(r * kSide + c)]; }
  Glyph rotated(int k) const;
  bool operator==(const Glyph& other) const { return cells == other.cells; }
};

const std::vector<Glyph>& glyph_set();

/// Randomly placed, upright asymmetric glyphs on a noisy dark background; the
/// label is the glyph type. Deterministic in (n, size, seed).
LabeledDataset make_synthetic_shapes(std::size_t n, int size, std::uint64_t seed);

}  // namespace patchrot
