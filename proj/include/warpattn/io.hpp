#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "warpattn/tensor.hpp"

namespace warpattn {

// ---------------------------------------------------------------------------
// TNSR binary tensor format (bit-exact):
//   "TNSR" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | u8 pad=0 |
//   rank x u64 little-endian dims | row-major scalars little-endian
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <class S>
constexpr std::uint8_t tnsr_dtype() {
  return std::is_same_v<S, float> ? 0 : 1;
}

template <class S>
void put_scalar_le(std::ostream& os, S v) {
  if constexpr (std::is_same_v<S, float>) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64_le(os, bits);
  }
}

template <class S>
S get_scalar_le(std::istream& is) {
  if constexpr (std::is_same_v<S, float>) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  } else {
    std::uint64_t bits = get_u64_le(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return static_cast<S>(v);
  }
}

}  // namespace detail

template <class S>
void write_tnsr(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("TNSR", 4);
  const unsigned char head[4] = {1, detail::tnsr_dtype<S>(),
                                 static_cast<unsigned char>(t.rank()), 0};
  os.write(reinterpret_cast<const char*>(head), 4);
  for (Index i = 0; i < t.rank(); ++i)
    detail::put_u64_le(os, static_cast<std::uint64_t>(t.dim(i)));
  for (Index i = 0; i < t.size(); ++i) detail::put_scalar_le(os, t[i]);
  if (!os) throw IoError("write failed: " + path);
}

inline std::uint8_t read_tnsr_dtype(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "TNSR")
    throw IoError("not a TNSR file: " + path);
  unsigned char head[4];
  is.read(reinterpret_cast<char*>(head), 4);
  if (!is || head[0] != 1) throw IoError("unsupported TNSR version in " + path);
  if (head[1] > 1) throw IoError("unknown TNSR dtype in " + path);
  return head[1];
}

template <class S>
Tensor<S> read_tnsr(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "TNSR")
    throw IoError("not a TNSR file: " + path);
  unsigned char head[4];
  is.read(reinterpret_cast<char*>(head), 4);
  if (!is) throw IoError("truncated TNSR header: " + path);
  if (head[0] != 1) throw IoError("unsupported TNSR version in " + path);
  if (head[1] > 1) throw IoError("unknown TNSR dtype in " + path);
  if (head[1] != detail::tnsr_dtype<S>())
    throw IoError("TNSR dtype mismatch in " + path + " (found " +
                  (head[1] == 0 ? std::string("f32") : std::string("f64")) + ")");
  const Index rank = head[2];
  Shape shape(static_cast<std::size_t>(rank));
  for (Index i = 0; i < rank; ++i)
    shape[static_cast<std::size_t>(i)] = static_cast<Index>(detail::get_u64_le(is));
  const Index n = shape_numel(shape);
  auto buf = detail::make_buffer<S>(n);
  for (Index i = 0; i < n; ++i) (*buf)[static_cast<std::size_t>(i)] = detail::get_scalar_le<S>(is);
  if (!is) throw IoError("truncated TNSR data: " + path);
  return Tensor<S>::wrap(std::move(shape), std::move(buf));
}

// ---------------------------------------------------------------------------
// PPM P6, 8-bit, values mapped linearly from [0,1]
// ---------------------------------------------------------------------------

template <class S>
void write_ppm(const std::string& path, const Tensor<S>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ValidationError("write_ppm expects 3xHxW image, got " +
                          shape_str(image.shape()));
  const Index h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(3 * w));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) {
        double v = static_cast<double>(image.at({c, y, x}));
        v = std::min(std::max(v, 0.0), 1.0);
        row[static_cast<std::size_t>(3 * x + c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("write failed: " + path);
}

namespace detail {

inline int ppm_next_token(std::istream& is) {
  // skips whitespace and '#' comments, returns the next integer
  for (;;) {
    int ch = is.peek();
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(ch)) {
      is.get();
    } else {
      break;
    }
  }
  int value;
  if (!(is >> value)) throw IoError("malformed PPM header");
  return value;
}

}  // namespace detail

template <class S>
Tensor<S> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '6') throw IoError("not a PPM P6 file: " + path);
  const Index w = detail::ppm_next_token(is);
  const Index h = detail::ppm_next_token(is);
  const Index maxval = detail::ppm_next_token(is);
  if (w < 1 || h < 1 || maxval != 255)
    throw IoError("unsupported PPM header in " + path);
  is.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(3 * w * h));
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) throw IoError("truncated PPM data: " + path);
  auto buf = detail::make_buffer<S>(3 * h * w);
  S* p = buf->data();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c)
        p[(c * h + y) * w + x] =
            static_cast<S>(raw[static_cast<std::size_t>((y * w + x) * 3 + c)]) / S(255);
  return Tensor<S>::wrap({3, h, w}, std::move(buf));
}

// ---------------------------------------------------------------------------
// Parameter directories: one TNSR per kernel plus a plain-text manifest
// (one line per kernel: name, shape).
// ---------------------------------------------------------------------------

template <class S, class P>
void save_params(const std::string& dir, P params) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw IoError("cannot open for writing: " + dir + "/manifest.txt");
  params.visit([&](const std::string& name, Tensor<S>& t) {
    write_tnsr(dir + "/" + name + ".tnsr", t);
    manifest << name << " " << shape_str(t.shape()) << "\n";
  });
  if (!manifest) throw IoError("write failed: " + dir + "/manifest.txt");
}

template <class S, class P>
void load_params(const std::string& dir, P& params) {
  params.visit([&](const std::string& name, Tensor<S>& t) {
    Tensor<S> loaded = read_tnsr<S>(dir + "/" + name + ".tnsr");
    if (loaded.shape() != t.shape())
      throw IoError("parameter '" + name + "' has shape " +
                    shape_str(loaded.shape()) + ", expected " + shape_str(t.shape()));
    t = loaded;
  });
}

}  // namespace warpattn
