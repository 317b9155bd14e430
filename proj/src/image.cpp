#include "patchrot/image.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <optional>

namespace patchrot {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::optional<long> next_int() {
    skip_space_and_comments();
    long value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000'000L) return std::nullopt;
      ++pos_;
      ++digits;
    }
    if (digits == 0) return std::nullopt;
    return value;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  bool consume_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) return false;
    ++pos_;
    return true;
  }

  std::size_t position() const { return pos_; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

Image decode_ppm(std::span<const unsigned char> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw Error(ErrorKind::MalformedHeader, "expected P6 magic");
  }
  HeaderReader reader(bytes);
  const auto w = reader.next_int();
  const auto h = reader.next_int();
  const auto maxval = reader.next_int();
  if (!w || !h || !maxval || *w < 1 || *h < 1) {
    throw Error(ErrorKind::MalformedHeader, "invalid width/height/maxval fields");
  }
  if (*maxval != 255) {
    throw Error(ErrorKind::UnsupportedMaxval, "maxval " + std::to_string(*maxval));
  }
  if (!reader.consume_single_space()) {
    throw Error(ErrorKind::MalformedHeader, "missing whitespace after maxval");
  }
  const std::size_t need = static_cast<std::size_t>(*w) * static_cast<std::size_t>(*h) * 3;
  const std::size_t have = bytes.size() - reader.position();
  if (have < need) {
    throw Error(ErrorKind::TruncatedPayload,
                "expected " + std::to_string(need) + " bytes, got " + std::to_string(have));
  }
  Image img(static_cast<int>(*h), static_cast<int>(*w), 3);
  auto dst = img.data();
  const auto src = bytes.subspan(reader.position(), need);
  for (std::size_t i = 0; i < need; ++i) dst[i] = from_u8(src[i]);
  return img;
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

std::vector<unsigned char> encode_ppm(const Image& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw Error(ErrorKind::ChannelMismatch, "PPM output needs 1 or 3 channels");
  }
  const std::string header =
      "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + static_cast<std::size_t>(img.width()) * img.height() * 3);
  for (int r = 0; r < img.height(); ++r) {
    for (int c = 0; c < img.width(); ++c) {
      for (int z = 0; z < 3; ++z) {
        out.push_back(to_u8(img(r, c, img.channels() == 3 ? z : 0)));
      }
    }
  }
  return out;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IOFailure, "write failed for " + path.string());
}

}  // namespace patchrot
