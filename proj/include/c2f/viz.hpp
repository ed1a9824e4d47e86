#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include "c2f/attention.hpp"
#include "c2f/image.hpp"

namespace c2f {

inline GrayImage to_gray(const AttentionMap& map) {
  GrayImage g(map.grid_h, map.grid_w);
  if (map.weights.size() != g.pixels.size()) throw ShapeError("attention map size does not match its grid");
  g.pixels = map.weights;
  return g;
}

/// Nearest-neighbour enlargement by an integer factor per axis.
inline GrayImage upsample(const GrayImage& src, std::size_t factor) {
  if (factor < 1) throw std::invalid_argument("upsample: factor must be at least 1");
  GrayImage out(src.height * factor, src.width * factor);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = src.at(y / factor, x / factor);
  return out;
}

inline GrayImage upsample(const AttentionMap& map, std::size_t factor) { return upsample(to_gray(map), factor); }

/// Normalized 1-D Gaussian taps for offsets -r..r, r = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_filter: sigma must be positive");
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long i = -radius; i <= radius; ++i)
    total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur; samples beyond the border clamp to the edge pixel.
inline GrayImage gaussian_filter(const GrayImage& src, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const long h = static_cast<long>(src.height), w = static_cast<long>(src.width);
  GrayImage tmp(src.height, src.width), out(src.height, src.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long i = -r; i <= r; ++i)
        s += k[static_cast<std::size_t>(i + r)] *
             src.at(static_cast<std::size_t>(y), static_cast<std::size_t>(std::clamp(x + i, 0L, w - 1)));
      tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = s;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long i = -r; i <= r; ++i)
        s += k[static_cast<std::size_t>(i + r)] *
             tmp.at(static_cast<std::size_t>(std::clamp(y + i, 0L, h - 1)), static_cast<std::size_t>(x));
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = s;
    }
  return out;
}

/// Min-max rescale to bytes; a constant image maps to 128 everywhere.
inline std::vector<std::uint8_t> heatmap_bytes(const GrayImage& img) {
  std::vector<std::uint8_t> out(img.pixels.size(), 128);
  if (img.pixels.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround((img.pixels[i] - *lo) / range * 255.0));
  return out;
}

/// Path of the colour overlay written next to a heatmap.
inline std::filesystem::path overlay_path(const std::filesystem::path& heatmap) {
  std::filesystem::path p = heatmap;
  p.replace_filename(heatmap.stem().string() + "_overlay.ppm");
  return p;
}

/// Writes the heatmap as P5. With a scene, also writes a P6 overlay where each
/// pixel averages a red tint of the heat with the scene (nearest-neighbour
/// resized to the heatmap).
inline void write_heatmap(const GrayImage& heat, const std::filesystem::path& path,
                          const std::optional<Image>& scene = std::nullopt) {
  const std::vector<std::uint8_t> gray = heatmap_bytes(heat);
  netpbm::write_pgm(path, heat.width, heat.height, gray);
  if (!scene) return;
  if (scene->height == 0 || scene->width == 0) throw std::invalid_argument("write_heatmap: empty overlay scene");
  std::vector<std::uint8_t> rgb(heat.width * heat.height * 3);
  for (std::size_t y = 0; y < heat.height; ++y)
    for (std::size_t x = 0; x < heat.width; ++x) {
      const std::size_t sy = y * scene->height / heat.height, sx = x * scene->width / heat.width;
      const std::uint8_t tint[3] = {gray[y * heat.width + x], 0, 0};
      for (std::size_t c = 0; c < 3; ++c)
        rgb[(y * heat.width + x) * 3 + c] =
            static_cast<std::uint8_t>((tint[c] + static_cast<unsigned>(to_byte(scene->at(sy, sx, c)))) / 2);
    }
  netpbm::write_ppm(overlay_path(path), heat.width, heat.height, rgb);
}

/// Upsample by `factor`, then blur with the given sigma (default factor / 2).
inline GrayImage render_attention(const AttentionMap& map, std::size_t factor, std::optional<double> sigma = std::nullopt) {
  GrayImage up = upsample(map, factor);
  return gaussian_filter(up, sigma.value_or(static_cast<double>(factor) / 2.0));
}

}  // namespace c2f
