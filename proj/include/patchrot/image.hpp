#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "patchrot/error.hpp"

namespace patchrot {

/// Row-major raster with interleaved channels: element (r, c, ch) lives at
/// ((r * width) + c) * channels + ch. Pixel values are expected in [0, 1].
template <typename Scalar>
class BasicImage {
 public:
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  BasicImage() = default;

  BasicImage(int height, int width, int channels, Scalar fill = Scalar(0))
      : height_(height), width_(width), channels_(channels) {
    if (height < 1 || width < 1 || channels < 1) {
      throw Error(ErrorKind::ShapeMismatch, "image dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  BasicImage(int height, int width, int channels, std::vector<Scalar> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (height < 1 || width < 1 || channels < 1 ||
        data_.size() != static_cast<std::size_t>(height) * width * channels) {
      throw Error(ErrorKind::ShapeMismatch, "image data length does not match dimensions");
    }
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Scalar& operator()(int r, int c, int ch = 0) { return data_[index(r, c, ch)]; }
  Scalar operator()(int r, int c, int ch = 0) const { return data_[index(r, c, ch)]; }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }

  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const {
    return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  bool operator==(const BasicImage& other) const = default;

 private:
  std::size_t index(int r, int c, int ch) const noexcept {
    return (static_cast<std::size_t>(r) * width_ + c) * channels_ + ch;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<Scalar> data_;
};

using Image = BasicImage<float>;

/// Rotates counter-clockwise by `k` quarter turns (k taken modulo 4).
/// Destination (r, c) of a single quarter turn reads source (c, W - 1 - r).
template <typename Scalar>
BasicImage<Scalar> rotate90(const BasicImage<Scalar>& img, int k) {
  k = ((k % 4) + 4) % 4;
  const int h = img.height();
  const int w = img.width();
  const int ch = img.channels();
  if (k == 0) return img;
  const bool swap = (k % 2) == 1;
  BasicImage<Scalar> out(swap ? w : h, swap ? h : w, ch);
  for (int r = 0; r < out.height(); ++r) {
    for (int c = 0; c < out.width(); ++c) {
      int sr = 0;
      int sc = 0;
      switch (k) {
        case 1: sr = c; sc = w - 1 - r; break;
        case 2: sr = h - 1 - r; sc = w - 1 - c; break;
        default: sr = h - 1 - c; sc = r; break;
      }
      for (int z = 0; z < ch; ++z) out(r, c, z) = img(sr, sc, z);
    }
  }
  return out;
}

/// Bilinear resampling with half-pixel centers and edge clamping.
template <typename Scalar>
BasicImage<Scalar> bilinear_resize(const BasicImage<Scalar>& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw Error(ErrorKind::ShapeMismatch, "resize target must be at least 1x1");
  }
  const int in_h = img.height();
  const int in_w = img.width();
  const int ch = img.channels();
  BasicImage<Scalar> out(out_h, out_w, ch);

  struct Tap {
    int lo;
    int hi;
    Scalar frac;
  };
  auto taps = [](int in, int out_n) {
    std::vector<Tap> t(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in) / out_n;
    for (int d = 0; d < out_n; ++d) {
      double s = (d + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int lo = static_cast<int>(std::floor(s));
      const int hi = std::min(lo + 1, in - 1);
      t[static_cast<std::size_t>(d)] = {lo, hi, static_cast<Scalar>(s - lo)};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);

  for (int r = 0; r < out_h; ++r) {
    const Tap& y = ty[static_cast<std::size_t>(r)];
    for (int c = 0; c < out_w; ++c) {
      const Tap& x = tx[static_cast<std::size_t>(c)];
      for (int z = 0; z < ch; ++z) {
        const Scalar top = img(y.lo, x.lo, z) * (1 - x.frac) + img(y.lo, x.hi, z) * x.frac;
        const Scalar bot = img(y.hi, x.lo, z) * (1 - x.frac) + img(y.hi, x.hi, z) * x.frac;
        out(r, c, z) = top * (1 - y.frac) + bot * y.frac;
      }
    }
  }
  return out;
}

/// Copy of `background` with the rectangle at (top, left) replaced by `patch`.
template <typename Scalar>
BasicImage<Scalar> paste(const BasicImage<Scalar>& background, const BasicImage<Scalar>& patch,
                         int top, int left) {
  if (patch.channels() != background.channels()) {
    throw Error(ErrorKind::ChannelMismatch, "patch and background channel counts differ");
  }
  if (top < 0 || left < 0 || top + patch.height() > background.height() ||
      left + patch.width() > background.width()) {
    throw Error(ErrorKind::OutOfBounds, "patch does not fit inside background");
  }
  BasicImage<Scalar> out = background;
  const int ch = patch.channels();
  for (int r = 0; r < patch.height(); ++r) {
    const auto src = patch.data().subspan(static_cast<std::size_t>(r) * patch.width() * ch,
                                          static_cast<std::size_t>(patch.width()) * ch);
    auto dst = out.data().subspan(
        (static_cast<std::size_t>(top + r) * out.width() + left) * ch, src.size());
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

/// P6 binary PPM, maxval 255. Single-channel images are written as gray RGB.
Image read_ppm(const std::filesystem::path& path);
Image decode_ppm(std::span<const unsigned char> bytes);
void write_ppm(const Image& img, const std::filesystem::path& path);
std::vector<unsigned char> encode_ppm(const Image& img);

/// u8 -> [0,1] and back (round to nearest, clamped).
inline float from_u8(unsigned char v) noexcept { return static_cast<float>(v) / 255.0f; }
inline unsigned char to_u8(float v) noexcept {
  const float s = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  return static_cast<unsigned char>(std::lround(s));
}

}  // namespace patchrot
