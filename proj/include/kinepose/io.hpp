#pragma once

// Binary PPM (P6) frames and PGM (P5) heatmap dumps. Frames hold RGB in
// [0,1] as [3,H,W] tensors; files quantize to 8 bits.

#include <cmath>
#include <cstdint>
#include <string>

#include "tensor.hpp"

namespace kinepose {

inline void write_ppm(const std::filesystem::path& path, const Tensor& frame) {
  if (frame.ndim() != 3 || frame.dim(0) != 3) {
    throw std::invalid_argument("write_ppm: expected [3,H,W], got " + frame.shape_str());
  }
  const std::size_t h = frame.dim(1), w = frame.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double v = std::min(1.0, std::max(0.0, frame(c, y, x)));
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  detail::write_file_atomic(path, out);
}

namespace detail {

inline std::size_t ppm_token(const std::string& s, std::size_t pos, std::string& tok) {
  while (pos < s.size()) {
    if (s[pos] == '#') {  // comment runs to end of line
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  tok.clear();
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) tok += s[pos++];
  return pos;
}

}  // namespace detail

inline Tensor read_ppm(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  std::string tok;
  std::size_t pos = detail::ppm_token(bytes, 0, tok);
  if (tok != "P6") throw std::runtime_error(path.string() + ": not a binary PPM");
  pos = detail::ppm_token(bytes, pos, tok);
  const long w = std::atol(tok.c_str());
  pos = detail::ppm_token(bytes, pos, tok);
  const long h = std::atol(tok.c_str());
  pos = detail::ppm_token(bytes, pos, tok);
  if (w <= 0 || h <= 0 || tok != "255") {
    throw std::runtime_error(path.string() + ": unsupported PPM header");
  }
  ++pos;  // single whitespace after maxval
  if (bytes.size() - pos != static_cast<std::size_t>(3 * w * h)) {
    throw std::runtime_error(path.string() + ": PPM payload size mismatch");
  }
  Tensor frame({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        frame(c, y, x) = static_cast<unsigned char>(bytes[pos++]) / 255.0;
      }
    }
  }
  return frame;
}

// Min-max normalized grayscale dump, for eyeballing heatmaps.
inline void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.ndim() != 2) {
    throw std::invalid_argument("write_pgm: expected [h,w], got " + map.shape_str());
  }
  double lo = map[0], hi = map[0];
  for (std::size_t i = 0; i < map.size(); ++i) {
    lo = std::min(lo, map[i]);
    hi = std::max(hi, map[i]);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::string out =
      "P5\n" + std::to_string(map.dim(1)) + " " + std::to_string(map.dim(0)) + "\n255\n";
  for (std::size_t i = 0; i < map.size(); ++i) {
    out.push_back(static_cast<char>(
        static_cast<unsigned char>(std::lround((map[i] - lo) / span * 255.0))));
  }
  detail::write_file_atomic(path, out);
}

}  // namespace kinepose
