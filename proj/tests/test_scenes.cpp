#include <gtest/gtest.h>

#include <algorithm>

#include "c2f/scenes.hpp"
#include "helpers.hpp"

using namespace c2f;

namespace {

bool is_background(const Image& img, std::size_t y, std::size_t x) {
  return img.at(y, x, 0) == 0.0 && img.at(y, x, 1) == 0.0 && img.at(y, x, 2) == 0.0;
}

}  // namespace

TEST(Scenes, SameSeedGivesIdenticalScenes) {
  SceneSpec spec;
  const auto a = generate(spec, 50), b = generate(spec, 50);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].labels, b[i].labels);
  }
  spec.seed = 7;
  const auto c = generate(spec, 50);
  bool differs = false;
  for (std::size_t i = 0; i < 50; ++i) differs |= !(a[i].image == c[i].image);
  EXPECT_TRUE(differs);
}

TEST(Scenes, CardinalityOneGivesSinglePositive) {
  SceneSpec spec;
  spec.max_cardinality = 1;
  for (const Scene& s : generate(spec, 200)) EXPECT_EQ(std::count(s.labels.begin(), s.labels.end(), 1), 1);
}

TEST(Scenes, StandardSetMeetsClassFloor) {
  const auto scenes = generate(SceneSpec{}, 2000);
  std::vector<std::size_t> counts(kSceneClasses, 0), card(4, 0);
  for (const Scene& s : scenes) {
    for (std::size_t c = 0; c < kSceneClasses; ++c) counts[c] += s.labels[c];
    ++card[static_cast<std::size_t>(std::count(s.labels.begin(), s.labels.end(), 1))];
  }
  for (std::size_t c : counts) EXPECT_GE(static_cast<double>(c) / 2000.0, 0.02);
  EXPECT_EQ(card[0], 0u);
  for (std::size_t k = 1; k <= 3; ++k) EXPECT_GT(card[k], 500u);  // roughly uniform over {1, 2, 3}
}

TEST(Scenes, LabelsMatchRenderedContent) {
  SceneSpec spec;
  spec.seed = 5;
  for (const Scene& s : generate(spec, 100)) {
    std::vector<std::uint8_t> from_placements(kSceneClasses, 0);
    std::vector<std::size_t> cells;
    for (const Placement& p : s.placements) {
      from_placements[p.class_id] = 1;
      cells.push_back(p.cell);
      // Inside its own cell, with the class colour present.
      const std::size_t cs = spec.cell_size();
      EXPECT_EQ(p.x0 / cs, p.cell % 2);
      EXPECT_EQ(p.y0 / cs, p.cell / 2);
      EXPECT_EQ((p.x0 + p.scale - 1) / cs, p.cell % 2);
      EXPECT_EQ((p.y0 + p.scale - 1) / cs, p.cell / 2);
      EXPECT_GE(p.scale, 8u);
      EXPECT_LE(p.scale, 12u);
      const auto& color = kPalette[p.class_id / kShapeKinds];
      const std::size_t cy = p.y0 + p.scale / 2, cx = p.x0 + p.scale / 2;
      EXPECT_EQ(s.image.at(cy, cx, 0), color[0]);
      EXPECT_EQ(s.image.at(cy, cx, 1), color[1]);
    }
    EXPECT_EQ(from_placements, s.labels);
    std::sort(cells.begin(), cells.end());
    EXPECT_EQ(std::adjacent_find(cells.begin(), cells.end()), cells.end());  // no shared cells, no overlap
    // Pixels outside every placement box are background.
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        bool inside = false;
        for (const Placement& p : s.placements)
          inside |= y >= p.y0 && y < p.y0 + p.scale && x >= p.x0 && x < p.x0 + p.scale;
        if (!inside) EXPECT_TRUE(is_background(s.image, y, x));
      }
  }
}

TEST(Scenes, ShapesAreDistinguishable) {
  SceneSpec spec;
  for (std::size_t shape = 0; shape < kShapeKinds; ++shape)
    for (std::size_t other = shape + 1; other < kShapeKinds; ++other) {
      std::size_t diff = 0;
      for (std::size_t v = 0; v < 12; ++v)
        for (std::size_t u = 0; u < 12; ++u)
          diff += shape_covers(static_cast<ShapeKind>(shape), (u + 0.5) / 12, (v + 0.5) / 12) !=
                  shape_covers(static_cast<ShapeKind>(other), (u + 0.5) / 12, (v + 0.5) / 12);
      EXPECT_GT(diff, 10u) << shape << " vs " << other;
    }
}

TEST(Scenes, InvalidSpecsAreErrors) {
  SceneSpec spec;
  spec.max_cardinality = 5;
  EXPECT_THROW(generate(spec, 10), std::invalid_argument);
  spec = SceneSpec{};
  EXPECT_THROW(generate(spec, 0), std::invalid_argument);
  spec.max_scale = 20;
  EXPECT_THROW(generate(spec, 10), std::invalid_argument);
  spec = SceneSpec{};
  spec.min_cardinality = 0;
  EXPECT_THROW(generate(spec, 10), std::invalid_argument);
  spec = SceneSpec{};
  spec.max_cardinality = 1;
  EXPECT_THROW(generate(spec, 3), std::invalid_argument);  // 8 classes cannot all appear in 3 scenes
}

TEST(Scenes, DatasetDirectoryRoundTrip) {
  const auto dir = testing_util::scratch("scenes_rt");
  const auto scenes = generate(SceneSpec{}, 12);
  write_dataset(dir, scenes);
  EXPECT_TRUE(std::filesystem::exists(dir / "000011.ppm"));
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(back[i].id, image_id(i));
    EXPECT_EQ(back[i].labels, scenes[i].labels);
    ASSERT_EQ(back[i].image.rgb.size(), scenes[i].image.rgb.size());
    for (std::size_t j = 0; j < back[i].image.rgb.size(); ++j)
      ASSERT_EQ(to_byte(back[i].image.rgb[j]), to_byte(scenes[i].image.rgb[j]));
  }
  const std::string first = testing_util::read_bytes(dir / "labels.txt");
  write_dataset(dir, scenes);
  EXPECT_EQ(testing_util::read_bytes(dir / "labels.txt"), first);
}

TEST(Scenes, MalformedLabelsFileIsReported) {
  const auto dir = testing_util::scratch("scenes_bad");
  write_dataset(dir, generate(SceneSpec{}, 10));
  std::ofstream(dir / "labels.txt") << "000000 1 9\n";
  EXPECT_THROW(read_dataset(dir), IoError);
  std::ofstream(dir / "labels.txt") << "000000 1 x\n";
  EXPECT_THROW(read_dataset(dir), IoError);
  std::ofstream(dir / "labels.txt") << "nosuchimage 1\n";
  EXPECT_THROW(read_dataset(dir), IoError);
}
