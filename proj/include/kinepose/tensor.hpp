#pragma once

// Dense row-major tensor of 64-bit floats plus the ".ten" file format.
// Shapes are immutable after construction; data length always equals the
// product of the dims.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kinepose {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_)) {
      throw std::invalid_argument("tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str());
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D access: row i, column j.
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  // 3-D access: channel c, row y, column x.
  double& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
  }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero dimension");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64_le(std::string& out, double d) {
  auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write to a temp file in the same directory, then rename, so a failure never
// leaves a partial file at the destination.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// ".ten" format: magic "KTEN", version byte 1, u8 ndim, ndim x u32 LE dims,
// then dim-product x f64 LE values in row-major order.
inline std::string encode_tensor(const Tensor& t) {
  if (t.ndim() > 255) throw std::invalid_argument("tensor rank too large for .ten");
  std::string out;
  out.reserve(6 + 4 * t.ndim() + 8 * t.size());
  out += "KTEN";
  out.push_back(1);
  out.push_back(static_cast<char>(t.ndim()));
  for (std::size_t d : t.shape()) {
    if (d > 0xffffffffu) throw std::invalid_argument("tensor dim too large for .ten");
    detail::put_u32_le(out, static_cast<std::uint32_t>(d));
  }
  for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64_le(out, t[i]);
  return out;
}

// Decodes one tensor starting at pos and advances pos past it, so several
// tensors can be packed back to back in one buffer (checkpoint records).
inline Tensor decode_tensor_at(const std::string& bytes, std::size_t& pos,
                               const std::string& what = ".ten data") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < pos + 6 || std::memcmp(p + pos, "KTEN", 4) != 0) {
    throw std::runtime_error(what + ": bad magic");
  }
  if (p[pos + 4] != 1) throw std::runtime_error(what + ": unsupported version");
  std::size_t ndim = p[pos + 5];
  if (ndim == 0 || bytes.size() < pos + 6 + 4 * ndim) {
    throw std::runtime_error(what + ": truncated header");
  }
  std::vector<std::size_t> shape(ndim);
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    shape[i] = detail::get_u32_le(p + pos + 6 + 4 * i);
    if (shape[i] == 0) throw std::runtime_error(what + ": zero dimension");
    count *= shape[i];
  }
  std::size_t off = pos + 6 + 4 * ndim;
  if (bytes.size() < off + 8 * count) throw std::runtime_error(what + ": payload size mismatch");
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = detail::get_f64_le(p + off + 8 * i);
  pos = off + 8 * count;
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& what = ".ten data") {
  std::size_t pos = 0;
  Tensor t = decode_tensor_at(bytes, pos, what);
  if (pos != bytes.size()) throw std::runtime_error(what + ": payload size mismatch");
  return t;
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file_bytes(path), path.string());
}

}  // namespace kinepose
