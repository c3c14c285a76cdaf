#include "dr1mask/image_io.hpp"

#include <algorithm>
#include <cmath>

#include "dr1mask/serialize.hpp"

namespace dr1mask {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string header(const char* magic, Index h, Index w) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

}  // namespace

std::string encode_ppm(const TensorF& rgb) {
  const auto& s = rgb.shape();
  if (s.n != 1 || s.c != 3) throw InvalidArgument("encode_ppm expects shape (1, 3, H, W), got " + s.str());
  std::string out = header("P6", s.h, s.w);
  for (Index y = 0; y < s.h; ++y) {
    for (Index x = 0; x < s.w; ++x) {
      for (Index c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(rgb(0, c, y, x))));
    }
  }
  return out;
}

std::string encode_pgm(const std::vector<float>& gray, Index h, Index w) {
  if (Index(gray.size()) != h * w) throw InvalidArgument("encode_pgm: map size does not match extents");
  std::string out = header("P5", h, w);
  for (float v : gray) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

std::array<std::uint8_t, 3> segment_color(std::int32_t id, Index n_stuff) {
  // Knuth multiplicative hash spreads hues; thing segments are brighter than stuff.
  const std::uint32_t hsh = static_cast<std::uint32_t>(id + 1) * 2654435761u;
  const bool thing = id >= n_stuff;
  const int lo = thing ? 128 : 40;
  const int span = thing ? 127 : 100;
  return {static_cast<std::uint8_t>(lo + int(hsh & 0xff) * span / 255),
          static_cast<std::uint8_t>(lo + int((hsh >> 8) & 0xff) * span / 255),
          static_cast<std::uint8_t>(lo + int((hsh >> 16) & 0xff) * span / 255)};
}

std::string encode_label_ppm(const std::vector<std::int32_t>& labels, Index h, Index w, Index n_stuff) {
  if (Index(labels.size()) != h * w) throw InvalidArgument("encode_label_ppm: label map size does not match extents");
  std::string out = header("P6", h, w);
  for (auto id : labels) {
    const auto c = segment_color(id, n_stuff);
    out.append(reinterpret_cast<const char*>(c.data()), 3);
  }
  return out;
}

void write_ppm(const std::string& path, const TensorF& rgb) { write_file(path, encode_ppm(rgb)); }

void write_pgm(const std::string& path, const std::vector<float>& gray, Index h, Index w) {
  write_file(path, encode_pgm(gray, h, w));
}

}  // namespace dr1mask
