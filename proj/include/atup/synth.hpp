#pragma once

// Procedural stand-ins for natural-image and RGB-D training sets.

#include <array>
#include <cmath>
#include <vector>

#include "atup/image_io.hpp"

namespace atup::synth {

namespace detail {

struct Shape2D {
  enum Kind { rect, disk, triangle, stripes } kind;
  double a[6];           // geometry
  std::array<double, 3> color;
  double period = 0, angle = 0;
};

inline bool inside(const Shape2D& s, double y, double x) {
  switch (s.kind) {
    case Shape2D::rect:
    case Shape2D::stripes:
      return y >= s.a[0] && y < s.a[2] && x >= s.a[1] && x < s.a[3];
    case Shape2D::disk: {
      const double dy = (y - s.a[0]) / s.a[2], dx = (x - s.a[1]) / s.a[3];
      return dy * dy + dx * dx <= 1.0;
    }
    case Shape2D::triangle: {
      auto edge = [&](int p, int q) {
        return (s.a[2 * q + 1] - s.a[2 * p + 1]) * (y - s.a[2 * p]) - (s.a[2 * q] - s.a[2 * p]) * (x - s.a[2 * p + 1]);
      };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

inline Shape2D random_shape(std::size_t h, std::size_t w, Rng& rng, bool allow_stripes) {
  Shape2D s{};
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  const std::size_t kinds = allow_stripes ? 4 : 3;
  s.kind = static_cast<Shape2D::Kind>(rng.below(kinds));
  for (auto& c : s.color) c = rng.uniform(0.05, 0.95);
  switch (s.kind) {
    case Shape2D::rect:
    case Shape2D::stripes: {
      const double y0 = rng.uniform(-0.1, 0.8) * H, x0 = rng.uniform(-0.1, 0.8) * W;
      s.a[0] = y0;
      s.a[1] = x0;
      s.a[2] = y0 + rng.uniform(0.15, 0.6) * H;
      s.a[3] = x0 + rng.uniform(0.15, 0.6) * W;
      s.period = rng.uniform(3.0, 9.0);
      s.angle = rng.uniform(0.0, 3.14159265358979);
      break;
    }
    case Shape2D::disk:
      s.a[0] = rng.uniform(0.0, 1.0) * H;
      s.a[1] = rng.uniform(0.0, 1.0) * W;
      s.a[2] = rng.uniform(0.08, 0.35) * H;
      s.a[3] = rng.uniform(0.08, 0.35) * W;
      break;
    case Shape2D::triangle:
      for (int k = 0; k < 3; ++k) {
        s.a[2 * k] = rng.uniform(-0.1, 1.1) * H;
        s.a[2 * k + 1] = rng.uniform(-0.1, 1.1) * W;
      }
      break;
  }
  return s;
}

inline std::array<double, 3> shade(const Shape2D& s, double y, double x) {
  if (s.kind != Shape2D::stripes) return s.color;
  const double t = std::sin((std::cos(s.angle) * y + std::sin(s.angle) * x) * 6.283185307179586 / s.period);
  const double k = t > 0 ? 1.0 : 0.35;
  return {s.color[0] * k, s.color[1] * k, s.color[2] * k};
}

}  // namespace detail

/// RGB scene of overlapping rectangles, ellipses, triangles and striped
/// patches over a gradient, rendered with 4x4 supersampling.
inline ImageU8 natural_like(std::size_t h, std::size_t w, Rng& rng, std::size_t n_shapes = 12) {
  std::array<double, 3> g0{}, g1{};
  for (auto& c : g0) c = rng.uniform(0.1, 0.9);
  for (auto& c : g1) c = rng.uniform(0.1, 0.9);
  const double ga = rng.uniform(0.0, 6.283185307179586);
  std::vector<detail::Shape2D> shapes;
  for (std::size_t k = 0; k < n_shapes; ++k) shapes.push_back(detail::random_shape(h, w, rng, true));
  ImageU8 img(3, h, w);
  constexpr int ss = 4;
  const double diag = std::hypot(static_cast<double>(h), static_cast<double>(w));
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double y = static_cast<double>(i) + (sy + 0.5) / ss, x = static_cast<double>(j) + (sx + 0.5) / ss;
          const double t = 0.5 + 0.5 * (std::cos(ga) * y + std::sin(ga) * x) / diag;
          std::array<double, 3> c{};
          for (int k = 0; k < 3; ++k) c[k] = g0[k] + (g1[k] - g0[k]) * t;
          for (const auto& s : shapes)
            if (detail::inside(s, y, x)) c = detail::shade(s, y, x);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k)
        img.at(i, j, static_cast<std::size_t>(k)) =
            static_cast<std::uint8_t>(std::lround(std::clamp(acc[k] / (ss * ss), 0.0, 1.0) * 255.0));
    }
  return img;
}

struct RgbdPair {
  ImageU8 guide;
  DepthMap depth;
};

/// Piecewise-constant depth whose discontinuities coincide with colour edges
/// of the guide. Each region gets its own colour with mild shading; depth
/// values lie in [min_depth, max_depth] stored counts.
inline RgbdPair rgbd_pair(std::size_t h, std::size_t w, Rng& rng, std::size_t n_shapes = 6,
                          std::uint16_t min_depth = 1000, std::uint16_t max_depth = 5000) {
  std::vector<detail::Shape2D> shapes;
  for (std::size_t k = 0; k < n_shapes; ++k) shapes.push_back(detail::random_shape(h, w, rng, false));
  std::vector<std::uint16_t> depth_of(n_shapes + 1);
  for (auto& d : depth_of) d = static_cast<std::uint16_t>(min_depth + rng.below(max_depth - min_depth + 1u));
  std::array<double, 3> bg{};
  for (auto& c : bg) c = rng.uniform(0.1, 0.9);
  const double shade_dir = rng.uniform(0.0, 6.283185307179586);

  RgbdPair out{ImageU8(3, h, w), DepthMap(h, w)};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double y = static_cast<double>(i) + 0.5, x = static_cast<double>(j) + 0.5;
      std::size_t label = 0;
      for (std::size_t k = 0; k < n_shapes; ++k)
        if (detail::inside(shapes[k], y, x)) label = k + 1;
      const auto& c = label ? shapes[label - 1].color : bg;
      const double s = 1.0 + 0.08 * std::sin((std::cos(shade_dir) * y + std::sin(shade_dir) * x) / 9.0);
      for (std::size_t k = 0; k < 3; ++k)
        out.guide.at(i, j, k) = static_cast<std::uint8_t>(std::lround(std::clamp(c[k] * s, 0.0, 1.0) * 255.0));
      out.depth.data[i * w + j] = depth_of[label];
    }
  return out;
}

}  // namespace atup::synth
