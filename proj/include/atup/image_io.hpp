#pragma once

// Image files, colour conversion, cubic resampling and dataset manifests.
//
// PNG support covers non-interlaced 8-bit grayscale, RGB, gray+alpha and
// RGBA (alpha is dropped on load). Depth maps use binary PGM with up to 16
// bits per sample.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "atup/ops.hpp"
#include "atup/tensor.hpp"

namespace atup {

/// Interleaved 8-bit image, channels 1 or 3.
struct ImageU8 {
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<std::uint8_t> data;  // H x W x C

  ImageU8() = default;
  ImageU8(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), data(c * h * w) {
    if (c != 1 && c != 3) throw ShapeError("ImageU8 holds 1 or 3 channels");
  }

  std::uint8_t& at(std::size_t i, std::size_t j, std::size_t c) { return data[(i * width + j) * channels + c]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t c) const { return data[(i * width + j) * channels + c]; }
  bool operator==(const ImageU8&) const = default;
};

/// 16-bit depth samples plus the physical size of one count.
struct DepthMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> data;
  double units_per_count = 1.0;

  DepthMap() = default;
  DepthMap(std::size_t h, std::size_t w) : height(h), width(w), data(h * w) {}
  bool operator==(const DepthMap& o) const { return height == o.height && width == o.width && data == o.data; }
};

/// C x H x W in [0, 1].
template <class T = float>
Tensor<T> to_tensor(const ImageU8& img) {
  Tensor<T> t({img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.height; ++i)
      for (std::size_t j = 0; j < img.width; ++j) t(c, i, j) = static_cast<T>(img.at(i, j, c)) / T{255};
  return t;
}

/// Rounds and clamps a [0, 1] tensor back to 8 bits.
template <class T>
ImageU8 to_image(const Tensor<T>& t) {
  detail::require_rank(t.shape(), 3, "to_image");
  ImageU8 img(t.dim(0), t.dim(1), t.dim(2));
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.height; ++i)
      for (std::size_t j = 0; j < img.width; ++j) {
        const double v = std::round(std::clamp(static_cast<double>(t(c, i, j)), 0.0, 1.0) * 255.0);
        img.at(i, j, c) = static_cast<std::uint8_t>(v);
      }
  return img;
}

template <class T = float>
Tensor<T> to_tensor(const DepthMap& d) {
  Tensor<T> t({1, d.height, d.width});
  for (std::size_t i = 0; i < d.data.size(); ++i) t[i] = static_cast<T>(d.data[i]);
  return t;
}

// ---------------------------------------------------------------------------
// PNG

namespace detail {

inline constexpr std::array<std::uint8_t, 8> kPngSignature{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

inline std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c, pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  return static_cast<std::uint8_t>(pb <= pc ? b : c);
}

inline std::vector<std::uint8_t> inflate_all(const std::vector<std::uint8_t>& in, std::size_t expected,
                                             std::size_t idat_offset) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw DecodeError("png: zlib init failed");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const std::size_t consumed = zs.total_in, produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected)
    throw DecodeError("png: corrupt image data in IDAT stream starting at byte " + std::to_string(idat_offset) +
                      " (compressed offset " + std::to_string(consumed) + ")");
  return out;
}

}  // namespace detail

inline ImageU8 decode_png(const std::vector<std::uint8_t>& bytes) {
  using detail::be32;
  if (bytes.size() < 8 || !std::equal(detail::kPngSignature.begin(), detail::kPngSignature.end(), bytes.begin()))
    throw DecodeError("png: bad signature at byte 0");
  std::size_t pos = 8, idat_offset = 0;
  std::uint32_t width = 0, height = 0;
  int color = -1;
  std::vector<std::uint8_t> idat;
  bool seen_end = false;
  while (!seen_end) {
    if (pos + 12 > bytes.size()) throw DecodeError("png: truncated chunk header at byte " + std::to_string(pos));
    const std::uint32_t len = be32(&bytes[pos]);
    const std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
    if (len > bytes.size() || pos + 12 + len > bytes.size())
      throw DecodeError("png: chunk " + type + " at byte " + std::to_string(pos) + " overruns the file");
    const std::uint8_t* body = &bytes[pos + 8];
    const std::uint32_t crc = be32(body + len);
    const auto actual = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), &bytes[pos + 4], len + 4));
    if (crc != actual) throw DecodeError("png: CRC mismatch in chunk " + type + " at byte " + std::to_string(pos));
    if (type == "IHDR") {
      if (len != 13) throw DecodeError("png: IHDR length " + std::to_string(len) + " at byte " + std::to_string(pos));
      width = be32(body);
      height = be32(body + 4);
      const int depth = body[8];
      color = body[9];
      if (width == 0 || height == 0) throw DecodeError("png: zero dimension at byte " + std::to_string(pos + 8));
      if (depth != 8) throw DecodeError("png: unsupported bit depth " + std::to_string(depth) + " at byte " + std::to_string(pos + 16));
      if (color != 0 && color != 2 && color != 4 && color != 6)
        throw DecodeError("png: unsupported colour type " + std::to_string(color) + " at byte " + std::to_string(pos + 17));
      if (body[10] != 0 || body[11] != 0) throw DecodeError("png: unknown compression/filter method at byte " + std::to_string(pos + 18));
      if (body[12] != 0) throw DecodeError("png: interlaced images unsupported (byte " + std::to_string(pos + 20) + ")");
    } else if (type == "IDAT") {
      if (color < 0) throw DecodeError("png: IDAT before IHDR at byte " + std::to_string(pos));
      if (idat.empty()) idat_offset = pos;
      idat.insert(idat.end(), body, body + len);
    } else if (type == "IEND") {
      seen_end = true;
    } else if (color < 0) {
      throw DecodeError("png: first chunk is " + type + ", expected IHDR at byte " + std::to_string(pos));
    } else if (!(type[0] & 0x20)) {
      throw DecodeError("png: unsupported critical chunk " + type + " at byte " + std::to_string(pos));
    }
    pos += 12 + len;
  }
  if (idat.empty()) throw DecodeError("png: no image data before IEND at byte " + std::to_string(pos));

  const std::size_t spp = color == 0 ? 1 : color == 2 ? 3 : color == 4 ? 2 : 4;
  const std::size_t stride = spp * width;
  const auto raw = detail::inflate_all(idat, (stride + 1) * height, idat_offset);
  std::vector<std::uint8_t> px(stride * height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = &raw[y * (stride + 1) + 1];
    std::uint8_t* row = &px[y * stride];
    const std::uint8_t* up = y ? &px[(y - 1) * stride] : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= spp ? row[x - spp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= spp) ? up[x - spp] : 0;
      int pred = 0;
      switch (filter) {
        case 0: pred = 0; break;
        case 1: pred = a; break;
        case 2: pred = b; break;
        case 3: pred = (a + b) / 2; break;
        case 4: pred = detail::paeth(a, b, c); break;
        default:
          throw DecodeError("png: bad filter type " + std::to_string(filter) + " on row " + std::to_string(y) +
                            " (IDAT at byte " + std::to_string(idat_offset) + ")");
      }
      row[x] = static_cast<std::uint8_t>(src[x] + pred);
    }
  }
  const std::size_t out_c = (color == 0 || color == 4) ? 1 : 3;
  ImageU8 img(out_c, height, width);
  for (std::size_t p = 0; p < std::size_t{width} * height; ++p)
    for (std::size_t c = 0; c < out_c; ++c) img.data[p * out_c + c] = px[p * spp + c];
  return img;
}

inline std::vector<std::uint8_t> encode_png(const ImageU8& img) {
  if (img.height == 0 || img.width == 0) throw ShapeError("png: empty image");
  std::vector<std::uint8_t> raw;
  const std::size_t stride = img.width * img.channels;
  raw.reserve((stride + 1) * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.data.begin() + static_cast<std::ptrdiff_t>(y * stride),
               img.data.begin() + static_cast<std::ptrdiff_t>((y + 1) * stride));
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  z.resize(zlen);

  std::vector<std::uint8_t> out(detail::kPngSignature.begin(), detail::kPngSignature.end());
  auto chunk = [&out](const char* type, const std::vector<std::uint8_t>& body) {
    detail::put_be32(out, static_cast<std::uint32_t>(body.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    detail::put_be32(out, static_cast<std::uint32_t>(
                              crc32(crc32(0L, Z_NULL, 0), &out[start], static_cast<uInt>(body.size() + 4))));
  };
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, static_cast<std::uint8_t>(img.channels == 1 ? 0 : 2), 0, 0, 0});
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", {});
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline ImageU8 load_png(const std::filesystem::path& path) {
  try {
    return decode_png(detail::read_bytes(path));
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

inline void save_png(const std::filesystem::path& path, const ImageU8& img) {
  detail::write_bytes(path, encode_png(img));
}

// ---------------------------------------------------------------------------
// PGM (binary, 8 or 16 bit)

inline DepthMap decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos]) && v < 1'000'000'000) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw DecodeError(std::string("pgm: expected ") + what + " at byte " + std::to_string(start));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw DecodeError("pgm: bad magic at byte 0");
  pos = 2;
  const auto w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0) throw DecodeError("pgm: zero dimension before byte " + std::to_string(pos));
  if (maxval == 0 || maxval > 65535) throw DecodeError("pgm: maxval out of range before byte " + std::to_string(pos));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DecodeError("pgm: missing separator at byte " + std::to_string(pos));
  ++pos;
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t need = w * h * bps;
  if (bytes.size() - pos < need)
    throw DecodeError("pgm: raster truncated at byte " + std::to_string(bytes.size()) + ", need " +
                      std::to_string(pos + need));
  DepthMap d(h, w);
  for (std::size_t i = 0; i < w * h; ++i) {
    const std::uint16_t v = bps == 2 ? static_cast<std::uint16_t>((bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1])
                                     : bytes[pos + i];
    if (v > maxval) throw DecodeError("pgm: sample exceeds maxval at byte " + std::to_string(pos + bps * i));
    d.data[i] = v;
  }
  return d;
}

inline std::vector<std::uint8_t> encode_pgm16(const DepthMap& d) {
  const std::string header = "P5\n" + std::to_string(d.width) + " " + std::to_string(d.height) + "\n65535\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::uint16_t v : d.data) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

inline DepthMap load_pgm16(const std::filesystem::path& path) {
  try {
    return decode_pgm(detail::read_bytes(path));
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

inline void save_pgm16(const std::filesystem::path& path, const DepthMap& d) {
  detail::write_bytes(path, encode_pgm16(d));
}

// ---------------------------------------------------------------------------
// Colour (BT.601, studio swing)

/// Luma in [0, 1]. Single-channel input is normalized as is.
template <class T = float>
Tensor<T> rgb_to_y(const ImageU8& img) {
  if (img.channels == 1) return to_tensor<T>(img);
  Tensor<T> y({1, img.height, img.width});
  for (std::size_t i = 0; i < img.height; ++i)
    for (std::size_t j = 0; j < img.width; ++j) {
      const double v = (65.481 * img.at(i, j, 0) + 128.553 * img.at(i, j, 1) + 24.966 * img.at(i, j, 2)) / 255.0 + 16.0;
      y(0, i, j) = static_cast<T>(v / 255.0);
    }
  return y;
}

namespace detail {

inline constexpr double kYcc[3][3] = {{65.481, 128.553, 24.966}, {-37.797, -74.203, 112.0}, {112.0, -93.786, -18.214}};
inline constexpr double kYccOffset[3] = {16.0, 128.0, 128.0};

inline std::array<std::array<double, 3>, 3> ycc_inverse() {
  const auto& m = kYcc;
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  std::array<std::array<double, 3>, 3> inv{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const int r1 = (c + 1) % 3, r2 = (c + 2) % 3, c1 = (r + 1) % 3, c2 = (r + 2) % 3;
      inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
    }
  return inv;
}

}  // namespace detail

/// 3 x H x W RGB in [0, 1] -> YCbCr in [0, 1].
template <class T>
Tensor<T> rgb_to_ycbcr(const Tensor<T>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("rgb_to_ycbcr needs 3 x H x W");
  Tensor<T> out(rgb.shape());
  const std::size_t n = rgb.dim(1) * rgb.dim(2);
  for (std::size_t p = 0; p < n; ++p)
    for (int o = 0; o < 3; ++o) {
      double v = detail::kYccOffset[o];
      for (int c = 0; c < 3; ++c) v += detail::kYcc[o][c] * rgb[c * n + p];
      out[o * n + p] = static_cast<T>(v / 255.0);
    }
  return out;
}

template <class T>
Tensor<T> ycbcr_to_rgb(const Tensor<T>& ycc) {
  if (ycc.rank() != 3 || ycc.dim(0) != 3) throw ShapeError("ycbcr_to_rgb needs 3 x H x W");
  static const auto inv = detail::ycc_inverse();
  Tensor<T> out(ycc.shape());
  const std::size_t n = ycc.dim(1) * ycc.dim(2);
  for (std::size_t p = 0; p < n; ++p)
    for (int o = 0; o < 3; ++o) {
      double v = 0;
      for (int c = 0; c < 3; ++c) v += inv[o][c] * (255.0 * ycc[c * n + p] - detail::kYccOffset[c]);
      out[o * n + p] = static_cast<T>(v);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Cubic resampling (Keys, a = -0.5)

inline double cubic_kernel(double x, double a = -0.5) {
  x = std::abs(x);
  if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
  if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
  return 0;
}

namespace detail {

struct ResampleTaps {
  std::vector<std::vector<std::pair<std::size_t, double>>> taps;  // per output sample
};

/// Pixel-centre aligned taps; the kernel is widened by 1/scale when shrinking
/// and `antialias` is set. Indices clamp to the border; weights are normalized.
inline ResampleTaps resample_taps(std::size_t in, std::size_t out, bool antialias) {
  const double scale = static_cast<double>(out) / static_cast<double>(in);
  const double kscale = (antialias && scale < 1) ? scale : 1.0;
  const double support = 2.0 / kscale;
  ResampleTaps r;
  r.taps.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double u = (static_cast<double>(o) + 0.5) / scale - 0.5;
    const auto lo = static_cast<std::ptrdiff_t>(std::floor(u - support)), hi = static_cast<std::ptrdiff_t>(std::ceil(u + support));
    double total = 0;
    for (std::ptrdiff_t s = lo; s <= hi; ++s) {
      const double w = kscale * cubic_kernel(kscale * (u - static_cast<double>(s)));
      if (w == 0) continue;
      const auto idx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(s, 0, static_cast<std::ptrdiff_t>(in) - 1));
      r.taps[o].emplace_back(idx, w);
      total += w;
    }
    for (auto& t : r.taps[o]) t.second /= total;
  }
  return r;
}

/// Taps for output sample o reading input coordinate o / S (grid aligned).
inline ResampleTaps aligned_taps(std::size_t in, std::size_t s) {
  ResampleTaps r;
  r.taps.resize(in * s);
  for (std::size_t o = 0; o < in * s; ++o) {
    const double u = static_cast<double>(o) / static_cast<double>(s);
    const auto base = static_cast<std::ptrdiff_t>(std::floor(u));
    for (std::ptrdiff_t k = base - 1; k <= base + 2; ++k) {
      const double w = cubic_kernel(u - static_cast<double>(k));
      if (w == 0) continue;
      const auto idx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(in) - 1));
      r.taps[o].emplace_back(idx, w);
    }
  }
  return r;
}

template <class T>
Tensor<T> separable(const Tensor<T>& x, const ResampleTaps& rows, const ResampleTaps& cols) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), OH = rows.taps.size(), OW = cols.taps.size();
  Tensor<T> tmp({C, OH, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = 0;
        for (const auto& [s, w] : rows.taps[i]) acc += w * x(c, s, j);
        tmp(c, i, j) = static_cast<T>(acc);
      }
  (void)H;
  Tensor<T> out({C, OH, OW});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j) {
        double acc = 0;
        for (const auto& [s, w] : cols.taps[j]) acc += w * tmp(c, i, s);
        out(c, i, j) = static_cast<T>(acc);
      }
  return out;
}

}  // namespace detail

/// Resize C x H x W to C x out_h x out_w with the Keys cubic kernel.
/// Downscaling widens the kernel (antialiasing) unless `antialias` is false.
template <class T>
Tensor<T> bicubic_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w, bool antialias = true) {
  detail::require_rank(x.shape(), 3, "bicubic_resize");
  if (out_h == 0 || out_w == 0) throw ParamError("bicubic_resize: target dims must be positive");
  return detail::separable(x, detail::resample_taps(x.dim(1), out_h, antialias),
                           detail::resample_taps(x.dim(2), out_w, antialias));
}

/// Cubic upsampling by S where output (i, j) reads input coordinate
/// (i/S, j/S): the inverse of top-left grid sampling.
template <class T>
Tensor<T> bicubic_upsample_aligned(const Tensor<T>& x, int s) {
  detail::require_rank(x.shape(), 3, "bicubic_upsample_aligned");
  if (s < 1) throw ParamError("bicubic_upsample_aligned: factor must be >= 1");
  const auto S = static_cast<std::size_t>(s);
  return detail::separable(x, detail::aligned_taps(x.dim(1), S), detail::aligned_taps(x.dim(2), S));
}

// ---------------------------------------------------------------------------
// Manifests

enum class Role { train, eval };

struct ManifestRecord {
  Role role = Role::train;
  std::filesystem::path target;
  std::optional<std::filesystem::path> guide;
};

struct Manifest {
  std::filesystem::path source;
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> with_role(Role r) const {
    std::vector<ManifestRecord> out;
    for (const auto& rec : records)
      if (rec.role == r) out.push_back(rec);
    return out;
  }
};

namespace detail {

inline void verify_decodes(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw std::runtime_error("manifest: missing file " + p.string());
  const auto ext = p.extension().string();
  if (ext == ".png")
    (void)load_png(p);
  else if (ext == ".pgm")
    (void)load_pgm16(p);
  else
    throw DecodeError("manifest: unsupported file type " + p.string());
}

}  // namespace detail

/// Parses `role<TAB>target[<TAB>guide]` lines; `#` starts a comment.
/// Relative paths resolve against the manifest's directory.
inline Manifest load_manifest(const std::filesystem::path& path, bool verify = true) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  m.source = path;
  const auto base = path.parent_path();
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (fields.size() < 2 || fields.size() > 3)
      throw DecodeError(path.string() + ":" + std::to_string(lineno) + ": expected 2 or 3 tab-separated fields");
    ManifestRecord r;
    if (fields[0] == "train")
      r.role = Role::train;
    else if (fields[0] == "eval")
      r.role = Role::eval;
    else
      throw DecodeError(path.string() + ":" + std::to_string(lineno) + ": unknown role '" + fields[0] + "'");
    auto resolve = [&](const std::string& f) {
      std::filesystem::path p(f);
      return p.is_absolute() ? p : base / p;
    };
    r.target = resolve(fields[1]);
    if (fields.size() == 3) r.guide = resolve(fields[2]);
    if (verify) {
      detail::verify_decodes(r.target);
      if (r.guide) detail::verify_decodes(*r.guide);
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  const auto base = path.parent_path();
  for (const auto& r : records) {
    out << (r.role == Role::train ? "train" : "eval") << '\t' << std::filesystem::relative(r.target, base).string();
    if (r.guide) out << '\t' << std::filesystem::relative(*r.guide, base).string();
    out << '\n';
  }
}

}  // namespace atup
