#pragma once

// Binary PGM (P5) / PPM (P6) with maxval <= 255.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "abstain/error.hpp"
#include "abstain/tensor.hpp"

namespace abstain::pnm {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 for P5, 3 for P6
  unsigned maxval = 255;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

namespace detail {

inline std::size_t read_header_int(std::istream& is, const std::string& path) {
  int c = is.peek();
  while (is && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else {
      is.get();
    }
    c = is.peek();
  }
  if (!std::isdigit(c)) throw FormatError(path, "malformed PNM header");
  std::size_t v = 0;
  while (std::isdigit(is.peek())) v = v * 10 + static_cast<std::size_t>(is.get() - '0');
  return v;
}

}  // namespace detail

inline Image read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path, "cannot open");
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) throw FormatError(path, "unknown magic (expected P5 or P6)");
  Image img;
  img.channels = magic[1] == '5' ? 1 : 3;
  img.width = detail::read_header_int(is, path);
  img.height = detail::read_header_int(is, path);
  img.maxval = static_cast<unsigned>(detail::read_header_int(is, path));
  if (img.width == 0 || img.height == 0) throw FormatError(path, "zero image dimension");
  if (img.maxval == 0 || img.maxval > 255) throw FormatError(path, "only 8-bit PNM (maxval <= 255) is supported");
  if (!std::isspace(is.get())) throw FormatError(path, "malformed PNM header");
  img.pixels.resize(img.width * img.height * img.channels);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw FormatError(path, "truncated raster");
  }
  return img;
}

inline void write(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path, "cannot open for writing");
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw FormatError(path, "write failed");
}

// Class-id mask as an 8-bit P5 file.
inline void write_mask(const std::string& path, const LabelMask& mask) {
  Image img;
  img.width = mask.width();
  img.height = mask.height() * mask.batch();
  img.channels = 1;
  img.maxval = 255;
  img.pixels.assign(mask.labels().begin(), mask.labels().end());
  write(path, img);
}

inline LabelMask read_mask(const std::string& path) {
  const auto img = read(path);
  if (img.channels != 1) throw FormatError(path, "mask must be a single-channel P5 image");
  return LabelMask(1, img.height, img.width, img.pixels);
}

}  // namespace abstain::pnm
