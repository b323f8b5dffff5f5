#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace kn {

/// Dense 4D tensor in row-major NCHW layout. The single value type of the
/// library; vectors are (n, k, 1, 1), scalars (1, 1, 1, 1).
template <typename T>
struct Tensor4 {
  static_assert(std::is_floating_point_v<T>);

  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_) {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw std::invalid_argument("Tensor4: all dimensions must be >= 1");
    data.assign(size(), fill);
  }

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }

  std::size_t index(int i, int j, int y, int x) const {
    return ((static_cast<std::size_t>(i) * c + j) * h + y) * w + x;
  }

  T& at(int i, int j, int y, int x) { return data[index(i, j, y, x)]; }
  const T& at(int i, int j, int y, int x) const { return data[index(i, j, y, x)]; }

  T* row(int i, int j, int y) { return data.data() + index(i, j, y, 0); }
  const T* row(int i, int j, int y) const { return data.data() + index(i, j, y, 0); }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <typename T>
Tensor4<T> scalar_tensor(T v) {
  Tensor4<T> t(1, 1, 1, 1);
  t.data[0] = v;
  return t;
}

// ---------------------------------------------------------------------------
// Flat binary tensor format.
//
// Header (24 bytes, little-endian):
//   bytes 0..3   magic "KNT4"
//   bytes 4..7   dtype code as u32 (1 = f32, 2 = f64)
//   bytes 8..23  dims n, c, h, w as 4 x u32
// followed by n*c*h*w raw little-endian elements.
// ---------------------------------------------------------------------------

template <typename T>
constexpr std::uint32_t dtype_code() {
  return std::is_same_v<T, float> ? 1u : 2u;
}

template <typename T>
void save_tensor(std::ostream& os, const Tensor4<T>& t) {
  const char magic[4] = {'K', 'N', 'T', '4'};
  os.write(magic, 4);
  std::uint32_t head[5] = {dtype_code<T>(), static_cast<std::uint32_t>(t.n),
                           static_cast<std::uint32_t>(t.c),
                           static_cast<std::uint32_t>(t.h),
                           static_cast<std::uint32_t>(t.w)};
  os.write(reinterpret_cast<const char*>(head), sizeof(head));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw std::runtime_error("tensor write failed");
}

template <typename T>
void save_tensor(const std::string& path, const Tensor4<T>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  save_tensor(f, t);
}

template <typename T>
Tensor4<T> load_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "KNT4", 4) != 0)
    throw std::runtime_error("bad tensor magic");
  std::uint32_t head[5];
  is.read(reinterpret_cast<char*>(head), sizeof(head));
  if (!is) throw std::runtime_error("truncated tensor header");
  if (head[0] != dtype_code<T>())
    throw std::runtime_error("tensor dtype mismatch");
  Tensor4<T> t(static_cast<int>(head[1]), static_cast<int>(head[2]),
               static_cast<int>(head[3]), static_cast<int>(head[4]));
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!is) throw std::runtime_error("truncated tensor data");
  return t;
}

template <typename T>
Tensor4<T> load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  return load_tensor<T>(f);
}

}  // namespace kn
