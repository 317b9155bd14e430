#include "patchrot/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "patchrot/rng.hpp"

namespace patchrot {

LabeledDataset decode_cifar_binary(std::span<const unsigned char> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw Error(ErrorKind::TruncatedRecord,
                std::to_string(bytes.size()) + " bytes is not a multiple of the 3073-byte record");
  }
  constexpr int plane = kCifarSide * kCifarSide;
  LabeledDataset out;
  out.num_classes = kCifarClasses;
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  out.images.reserve(records);
  out.labels.reserve(records);
  for (std::size_t i = 0; i < records; ++i) {
    const auto rec = bytes.subspan(i * kCifarRecordBytes, kCifarRecordBytes);
    if (rec[0] >= kCifarClasses) {
      throw Error(ErrorKind::LabelOutOfRange, "record " + std::to_string(i) + " has label " +
                                                  std::to_string(rec[0]));
    }
    Image img(kCifarSide, kCifarSide, 3);
    for (int z = 0; z < 3; ++z) {
      for (int p = 0; p < plane; ++p) {
        img(p / kCifarSide, p % kCifarSide, z) = from_u8(rec[1 + static_cast<std::size_t>(z * plane + p)]);
      }
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(rec[0]);
  }
  return out;
}

LabeledDataset load_cifar_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_cifar_binary(bytes);
}

std::vector<unsigned char> encode_cifar_binary(const LabeledDataset& data) {
  std::vector<unsigned char> out;
  out.reserve(data.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Image& img = data.images[i];
    if (img.height() != kCifarSide || img.width() != kCifarSide || img.channels() != 3) {
      throw Error(ErrorKind::ShapeMismatch, "CIFAR records hold 32x32 RGB images");
    }
    out.push_back(static_cast<unsigned char>(data.labels[i]));
    for (int z = 0; z < 3; ++z)
      for (int r = 0; r < kCifarSide; ++r)
        for (int c = 0; c < kCifarSide; ++c) out.push_back(to_u8(img(r, c, z)));
  }
  return out;
}

LabeledDataset load_ppm_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw Error(ErrorKind::IOFailure, root.string() + " is not a directory");

  auto ppm_files = [](const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
  };

  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  LabeledDataset out;
  if (class_dirs.empty()) {
    for (const auto& f : ppm_files(root)) {
      out.images.push_back(read_ppm(f));
      out.labels.push_back(0);
    }
    out.num_classes = 1;
  } else {
    for (std::size_t k = 0; k < class_dirs.size(); ++k) {
      out.class_names.push_back(class_dirs[k].filename().string());
      for (const auto& f : ppm_files(class_dirs[k])) {
        out.images.push_back(read_ppm(f));
        out.labels.push_back(static_cast<int>(k));
      }
    }
    out.num_classes = static_cast<int>(class_dirs.size());
  }
  if (out.empty()) throw Error(ErrorKind::EmptyDataset, "no .ppm files under " + root.string());
  return out;
}

// ---------------------------------------------------------------------------

Glyph Glyph::rotated(int k) const {
  k = ((k % 4) + 4) % 4;
  Glyph g = *this;
  for (int step = 0; step < k; ++step) {
    Glyph next = g;
    // Counter-clockwise, matching rotate90.
    for (int r = 0; r < kSide; ++r)
      for (int c = 0; c < kSide; ++c)
        next.cells[static_cast<std::size_t>(r * kSide + c)] = g.at(c, kSide - 1 - r);
    g = std::move(next);
  }
  return g;
}

namespace {

Glyph parse_glyph(std::string name, const char* rows) {
  Glyph g;
  g.name = std::move(name);
  for (const char* p = rows; *p; ++p) {
    if (*p == '#' || *p == '.') g.cells.push_back(*p == '#');
  }
  return g;
}

}  // namespace

const std::vector<Glyph>& glyph_set() {
  static const std::vector<Glyph> glyphs = {
      parse_glyph("arrow", "..#.. ...#. ##### ...#. ..#.."),
      parse_glyph("ell", "#.... #.... #.... #.... #####"),
      parse_glyph("eff", "##### #.... ####. #.... #...."),
      parse_glyph("tee", "##### ..#.. ..#.. ..#.. ..#.."),
  };
  return glyphs;
}

LabeledDataset make_synthetic_shapes(std::size_t n, int size, std::uint64_t seed) {
  if (size < 16) throw Error(ErrorKind::InvalidConfig, "synthetic images need size >= 16");
  const auto& glyphs = glyph_set();
  LabeledDataset out;
  out.num_classes = static_cast<int>(glyphs.size());
  for (const auto& g : glyphs) out.class_names.push_back(g.name);

  const int cell_lo = std::max(2, size / 8);
  const int cell_hi = std::max(cell_lo, (size * 5) / 32);
  const Rng root(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.split({0x676c7970ULL, i});
    const int label = static_cast<int>(rng.uniform_int(0, out.num_classes - 1));
    const Glyph& glyph = glyphs[static_cast<std::size_t>(label)];
    const int cell = static_cast<int>(rng.uniform_int(cell_lo, cell_hi));
    const int extent = cell * Glyph::kSide;
    const int top = static_cast<int>(rng.uniform_int(0, size - extent));
    const int left = static_cast<int>(rng.uniform_int(0, size - extent));

    float bg[3];
    float ink[3];
    for (float& v : bg) v = static_cast<float>(0.05 + 0.3 * rng.uniform01());
    for (float& v : ink) v = static_cast<float>(0.65 + 0.35 * rng.uniform01());

    Image img(size, size, 3);
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        const bool in_box = r >= top && r < top + extent && c >= left && c < left + extent;
        const bool on = in_box && glyph.at((r - top) / cell, (c - left) / cell);
        for (int z = 0; z < 3; ++z) {
          const float noise = static_cast<float>(0.08 * (rng.uniform01() - 0.5));
          img(r, c, z) = std::clamp((on ? ink[z] : bg[z]) + noise, 0.0f, 1.0f);
        }
      }
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

}  // namespace patchrot
