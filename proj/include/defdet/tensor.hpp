#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace defdet {

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense N-d array of doubles, row-major. Feature maps are (batch, channels,
/// height, width); kernels are (outC, inC, kH, kW).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)), data(count(shape), 0.0) {
    for (std::size_t d : shape) {
      if (d < 1) throw ShapeError("Tensor: zero-sized dimension in " + shape_str());
    }
  }
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size()) {
      throw ShapeError("Tensor: shape " + shape_str() + " does not match " +
                       std::to_string(data.size()) + " values");
    }
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  Tensor zeros_like() const { return Tensor(shape); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // 4-d accessors for the (b, c, y, x) layout used everywhere.
  double& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return data[((b * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  const double& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((b * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  double* plane(std::size_t b, std::size_t c) {
    return data.data() + (b * shape[1] + c) * shape[2] * shape[3];
  }
  const double* plane(std::size_t b, std::size_t c) const {
    return data.data() + (b * shape[1] + c) * shape[2] * shape[3];
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << "x";
      os << shape[i];
    }
    os << ")";
    return os.str();
  }
};

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

// ---------------------------------------------------------------------------
// Flat binary tensor file: magic "DTNS", u32 rank, u32 dims (little-endian),
// then f64 values row-major.
// ---------------------------------------------------------------------------

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}
}  // namespace detail

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_tensor: cannot open " + path);
  os.write("DTNS", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data) detail::put_f64(os, v);
  if (!os) throw IoError("save_tensor: write failed for " + path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_tensor: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DTNS", 4) != 0) {
    throw IoError("load_tensor: bad magic in " + path);
  }
  std::uint32_t rank = detail::get_u32(is);
  if (rank > 8) throw IoError("load_tensor: implausible rank in " + path);
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = detail::get_u32(is);
  Tensor t{shape};
  for (double& v : t.data) v = detail::get_f64(is);
  if (!is) throw IoError("load_tensor: truncated file " + path);
  return t;
}

}  // namespace defdet
