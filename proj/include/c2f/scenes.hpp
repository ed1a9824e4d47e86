#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "c2f/image.hpp"
#include "c2f/rng.hpp"

namespace c2f {

enum class ShapeKind { Square, Disc, Triangle, Cross };

inline constexpr std::size_t kShapeKinds = 4;
inline constexpr std::size_t kColors = 2;
inline constexpr std::size_t kSceneClasses = kShapeKinds * kColors;

// Class id = color * 4 + shape.
inline const std::array<const char*, kSceneClasses> kClassNames = {
    "red_square", "red_disc", "red_triangle", "red_cross", "green_square", "green_disc", "green_triangle", "green_cross"};

inline constexpr std::array<std::array<double, 3>, kColors> kPalette = {{{0.9, 0.1, 0.1}, {0.1, 0.9, 0.1}}};

struct SceneSpec {
  std::size_t image_size = 32;
  std::size_t layout_cells = 2;  // per axis
  std::size_t min_cardinality = 1;
  std::size_t max_cardinality = 3;
  std::size_t min_scale = 8;
  std::size_t max_scale = 12;
  double min_class_frequency = 0.02;
  std::uint64_t seed = 42;

  std::size_t capacity() const { return layout_cells * layout_cells; }
  std::size_t cell_size() const { return image_size / layout_cells; }

  void validate() const {
    if (image_size == 0 || layout_cells == 0 || image_size % layout_cells)
      throw std::invalid_argument("SceneSpec: image size must be a positive multiple of the layout grid");
    if (min_cardinality == 0 || min_cardinality > max_cardinality)
      throw std::invalid_argument("SceneSpec: cardinality range must satisfy 1 <= min <= max");
    if (max_cardinality > capacity())
      throw std::invalid_argument("SceneSpec: cardinality " + std::to_string(max_cardinality) +
                                  " exceeds layout capacity " + std::to_string(capacity()));
    if (max_cardinality > kSceneClasses) throw std::invalid_argument("SceneSpec: cardinality exceeds class count");
    if (min_scale == 0 || min_scale > max_scale || max_scale > cell_size())
      throw std::invalid_argument("SceneSpec: shape scale must fit inside one layout cell");
  }
};

struct Placement {
  std::size_t class_id = 0;
  std::size_t cell = 0;  // row-major layout cell
  std::size_t x0 = 0, y0 = 0, scale = 0;
};

struct Scene {
  Image image;
  std::vector<std::uint8_t> labels;  // C indicators
  std::vector<Placement> placements;
};

inline bool shape_covers(ShapeKind kind, double u, double v) {
  // (u, v) in [0, 1)^2 relative to the shape's bounding box.
  switch (kind) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Disc:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::Triangle:
      return std::abs(u - 0.5) <= 0.5 * v;
    case ShapeKind::Cross:
      return std::abs(u - 0.5) <= 1.0 / 6.0 || std::abs(v - 0.5) <= 1.0 / 6.0;
  }
  return false;
}

inline void draw(Image& img, const Placement& p) {
  const auto kind = static_cast<ShapeKind>(p.class_id % kShapeKinds);
  const auto& color = kPalette[p.class_id / kShapeKinds];
  const double s = static_cast<double>(p.scale);
  for (std::size_t y = p.y0; y < p.y0 + p.scale; ++y)
    for (std::size_t x = p.x0; x < p.x0 + p.scale; ++x) {
      const double u = (static_cast<double>(x - p.x0) + 0.5) / s;
      const double v = (static_cast<double>(y - p.y0) + 0.5) / s;
      if (shape_covers(kind, u, v))
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
    }
}

/// Renders one scene from its own seed: distinct classes in distinct layout
/// cells, each shape fully inside its cell.
inline Scene render_scene(const SceneSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t k = spec.min_cardinality + rng.below(spec.max_cardinality - spec.min_cardinality + 1);
  std::vector<std::size_t> classes(kSceneClasses), cells(spec.capacity());
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  rng.shuffle(classes);
  rng.shuffle(cells);
  Scene scene;
  scene.image = Image(spec.image_size, spec.image_size);
  scene.labels.assign(kSceneClasses, 0);
  const std::size_t cs = spec.cell_size();
  for (std::size_t i = 0; i < k; ++i) {
    Placement p;
    p.class_id = classes[i];
    p.cell = cells[i];
    p.scale = spec.min_scale + rng.below(spec.max_scale - spec.min_scale + 1);
    p.x0 = (p.cell % spec.layout_cells) * cs + rng.below(cs - p.scale + 1);
    p.y0 = (p.cell / spec.layout_cells) * cs + rng.below(cs - p.scale + 1);
    draw(scene.image, p);
    scene.labels[p.class_id] = 1;
    scene.placements.push_back(p);
  }
  std::sort(scene.placements.begin(), scene.placements.end(),
            [](const Placement& a, const Placement& b) { return a.class_id < b.class_id; });
  return scene;
}

/// n scenes, deterministic in (spec, n). Every class must reach the minimum
/// frequency; otherwise the whole set is redrawn from the next seed round.
inline std::vector<Scene> generate(const SceneSpec& spec, std::size_t n) {
  spec.validate();
  if (n == 0) throw std::invalid_argument("generate: n must be at least 1");
  const auto required = static_cast<std::size_t>(std::ceil(spec.min_class_frequency * static_cast<double>(n)));
  if (required * kSceneClasses > n * spec.max_cardinality)
    throw std::invalid_argument("generate: " + std::to_string(n) + " scenes cannot give every class " +
                                std::to_string(required) + " occurrences");
  constexpr std::size_t kRounds = 1000;
  for (std::size_t round = 0; round < kRounds; ++round) {
    const std::uint64_t round_seed = derive_seed(spec.seed, round);
    std::vector<Scene> out;
    out.reserve(n);
    std::vector<std::size_t> counts(kSceneClasses, 0);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(render_scene(spec, derive_seed(round_seed, i)));
      for (std::size_t c = 0; c < kSceneClasses; ++c) counts[c] += out.back().labels[c];
    }
    if (*std::min_element(counts.begin(), counts.end()) >= required) return out;
  }
  throw std::runtime_error("generate: class frequency floor not reached after redraws");
}

inline std::string image_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

/// Writes `<id>.ppm` per scene and `labels.txt` with lines `id idx idx ...`.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes) {
  std::filesystem::create_directories(dir);
  std::ofstream labels(dir / "labels.txt", std::ios::binary);
  if (!labels) throw IoError("cannot open " + (dir / "labels.txt").string() + " for writing");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string id = image_id(i);
    write_ppm(dir / (id + ".ppm"), scenes[i].image);
    labels << id;
    for (std::size_t c = 0; c < scenes[i].labels.size(); ++c)
      if (scenes[i].labels[c]) labels << ' ' << c;
    labels << '\n';
  }
  if (!labels) throw IoError("write failed for " + (dir / "labels.txt").string());
}

struct LabeledImage {
  std::string id;
  Image image;
  std::vector<std::uint8_t> labels;
};

inline std::vector<LabeledImage> read_dataset(const std::filesystem::path& dir, std::size_t classes = kSceneClasses) {
  std::ifstream in(dir / "labels.txt");
  if (!in) throw IoError("cannot open " + (dir / "labels.txt").string());
  std::vector<LabeledImage> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    LabeledImage item;
    ss >> item.id;
    item.labels.assign(classes, 0);
    long idx;
    while (ss >> idx) {
      if (idx < 0 || static_cast<std::size_t>(idx) >= classes)
        throw IoError((dir / "labels.txt").string() + ":" + std::to_string(lineno) + ": class index " +
                      std::to_string(idx) + " out of range");
      item.labels[static_cast<std::size_t>(idx)] = 1;
    }
    if (!ss.eof()) throw IoError((dir / "labels.txt").string() + ":" + std::to_string(lineno) + ": malformed line");
    item.image = read_ppm(dir / (item.id + ".ppm"));
    out.push_back(std::move(item));
  }
  return out;
}

}  // namespace c2f
