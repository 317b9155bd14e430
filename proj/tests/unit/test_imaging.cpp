#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "../support/image_oracles.hpp"
#include "patchrot/error.hpp"
#include "patchrot/image.hpp"
#include "patchrot/rng.hpp"

using namespace patchrot;
using patchrot::reference::bilinear_oracle;
using patchrot::reference::rotate_by_point_map;

namespace {

Image numbered(int h, int w, int ch) {
  Image img(h, w, ch);
  std::iota(img.data().begin(), img.data().end(), 0.0f);
  return img;
}

Image random_image(int h, int w, int ch, Rng& rng) {
  Image img(h, w, ch);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform01());
  return img;
}

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::InvalidConfig;
}

}  // namespace

TEST_CASE("rotate90 matches the point map on every shape up to 5x5") {
  for (int h = 1; h <= 5; ++h)
    for (int w = 1; w <= 5; ++w)
      for (int ch = 1; ch <= 3; ch += 2)
        for (int k = -4; k <= 7; ++k) {
          const Image img = numbered(h, w, ch);
          CAPTURE(h);
          CAPTURE(w);
          CAPTURE(k);
          CHECK(rotate90(img, k) == rotate_by_point_map(img, k));
        }
}

TEST_CASE("rotate90 small cases") {
  const Image img(2, 2, 1, std::vector<float>{1, 2, 3, 4});
  CHECK(rotate90(img, 1) == Image(2, 2, 1, std::vector<float>{2, 4, 1, 3}));
  CHECK(rotate90(img, 0) == img);
  CHECK(rotate90(rotate90(img, 1), 3) == img);
  Rng rng(3);
  const Image wide = random_image(3, 7, 3, rng);
  CHECK(rotate90(wide, 1).height() == 7);
  CHECK(rotate90(wide, 1).width() == 3);
  CHECK(rotate90(rotate90(wide, 2), 2) == wide);
}

TEST_CASE("rotate90 works on other scalar types") {
  const BasicImage<unsigned char> img(2, 3, 1, std::vector<unsigned char>{1, 2, 3, 4, 5, 6});
  const auto r = rotate90(img, 1);
  CHECK(r(0, 0) == 3);
  CHECK(r(2, 1) == 4);
}

TEST_CASE("bilinear_resize matches the interpolation oracle") {
  Rng rng(5);
  for (int i = 0; i < 150; ++i) {
    const int h = static_cast<int>(rng.uniform_int(1, 12));
    const int w = static_cast<int>(rng.uniform_int(1, 12));
    const int ch = static_cast<int>(rng.uniform_int(1, 3));
    const int oh = static_cast<int>(rng.uniform_int(1, 16));
    const int ow = static_cast<int>(rng.uniform_int(1, 16));
    const Image img = random_image(h, w, ch, rng);
    const Image out = bilinear_resize(img, oh, ow);
    REQUIRE(out.height() == oh);
    REQUIRE(out.width() == ow);
    double worst = 0.0;
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c)
        for (int z = 0; z < ch; ++z)
          worst = std::max(worst, std::abs(out(r, c, z) - bilinear_oracle(img, oh, ow, r, c, z)));
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("bilinear_resize fixed values") {
  const Image cross(2, 2, 1, std::vector<float>{0, 1, 1, 0});
  CHECK(bilinear_resize(cross, 1, 1)(0, 0) == doctest::Approx(0.5));

  // v(r, c) = 4r + c is linear, so samples at source (0.5|2.5, 0.5|2.5) are exact.
  const Image ramp = numbered(4, 4, 1);
  const Image small = bilinear_resize(ramp, 2, 2);
  CHECK(small(0, 0) == doctest::Approx(2.5));
  CHECK(small(0, 1) == doctest::Approx(4.5));
  CHECK(small(1, 0) == doctest::Approx(10.5));
  CHECK(small(1, 1) == doctest::Approx(12.5));

  const Image flat(5, 3, 3, 0.25f);
  CHECK(bilinear_resize(flat, 9, 2) == Image(9, 2, 3, 0.25f));
  CHECK(kind_of([&] { (void)bilinear_resize(flat, 0, 2); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("paste replaces only the rectangle") {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const int h = static_cast<int>(rng.uniform_int(2, 10));
    const int w = static_cast<int>(rng.uniform_int(2, 10));
    const int ph = static_cast<int>(rng.uniform_int(1, h));
    const int pw = static_cast<int>(rng.uniform_int(1, w));
    const int top = static_cast<int>(rng.uniform_int(0, h - ph));
    const int left = static_cast<int>(rng.uniform_int(0, w - pw));
    const Image bg = random_image(h, w, 3, rng);
    const Image patch = random_image(ph, pw, 3, rng);
    const Image out = paste(bg, patch, top, left);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int z = 0; z < 3; ++z) {
          const bool inside = r >= top && r < top + ph && c >= left && c < left + pw;
          const float expected = inside ? patch(r - top, c - left, z) : bg(r, c, z);
          // Bitwise: no arithmetic may touch either region.
          const float got = out(r, c, z);
          REQUIRE(std::memcmp(&got, &expected, sizeof(float)) == 0);
        }
  }
}

TEST_CASE("paste fixed cases and errors") {
  const Image zeros(4, 4, 1, 0.0f);
  const Image out = paste(zeros, Image(2, 2, 1, 1.0f), 1, 1);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(out(r, c) == ((r >= 1 && r <= 2 && c >= 1 && c <= 2) ? 1.0f : 0.0f));

  const Image bg = numbered(4, 4, 1);
  Image corner(2, 2, 1, std::vector<float>{0, 1, 4, 5});
  CHECK(paste(bg, corner, 0, 0) == bg);

  CHECK(kind_of([&] { (void)paste(bg, Image(3, 3, 1), 2, 2); }) == ErrorKind::OutOfBounds);
  CHECK(kind_of([&] { (void)paste(bg, Image(1, 1, 1), -1, 0); }) == ErrorKind::OutOfBounds);
  CHECK(kind_of([&] { (void)paste(bg, Image(1, 1, 3), 0, 0); }) == ErrorKind::ChannelMismatch);
}

TEST_CASE("ppm round trip stays within quantization") {
  Rng rng(9);
  const Image img = random_image(8, 8, 3, rng);
  const Image back = decode_ppm(encode_ppm(img));
  REQUIRE(back.height() == 8);
  REQUIRE(back.channels() == 3);
  float worst = 0.0f;
  for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(img.data()[i] - back.data()[i]));
  CHECK(worst <= 1.0f / 510.0f + 1e-7f);

  const auto path = std::filesystem::temp_directory_path() / "patchrot_ppm_roundtrip.ppm";
  write_ppm(img, path);
  CHECK(read_ppm(path) == back);
  std::filesystem::remove(path);
}

TEST_CASE("ppm header handling") {
  auto bytes = [](const std::string& s) { return std::vector<unsigned char>(s.begin(), s.end()); };
  CHECK(kind_of([&] { (void)decode_ppm(bytes("P5\n2 2\n255\n0123")); }) == ErrorKind::MalformedHeader);
  CHECK(kind_of([&] { (void)decode_ppm(bytes("P6\n2\n")); }) == ErrorKind::MalformedHeader);
  CHECK(kind_of([&] { (void)decode_ppm(bytes("P6\n1 1\n65535\n012345")); }) == ErrorKind::UnsupportedMaxval);
  CHECK(kind_of([&] { (void)decode_ppm(bytes("P6\n16 16\n255\n" + std::string(100, 'x'))); }) ==
        ErrorKind::TruncatedPayload);

  const std::string header_text = "P6 # comment\n1 # width\n 1\n255\n";
  auto raw = bytes(header_text);
  raw.insert(raw.end(), {0xff, 0x00, 0x80});
  const Image img = decode_ppm(raw);
  CHECK(img(0, 0, 0) == 1.0f);
  CHECK(img(0, 0, 1) == 0.0f);
  CHECK(img(0, 0, 2) == doctest::Approx(128.0 / 255.0));

  const auto header = encode_ppm(Image(1, 2, 1, 0.0f));
  CHECK(std::string(header.begin(), header.begin() + 11) == "P6\n2 1\n255\n");
  CHECK(header.size() == 11 + 6);
}

TEST_CASE("u8 conversion clamps and rounds") {
  CHECK(to_u8(-0.5f) == 0);
  CHECK(to_u8(2.0f) == 255);
  CHECK(to_u8(from_u8(77)) == 77);
}
