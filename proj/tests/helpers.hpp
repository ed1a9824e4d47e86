#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "c2f/c2f.hpp"

namespace testing_util {

inline c2f::Tensor random(c2f::Shape shape, c2f::Rng& rng, double lo = -2.0, double hi = 2.0) {
  return c2f::uniform_tensor(std::move(shape), lo, hi, rng);
}

inline c2f::Image random_image(std::size_t h, std::size_t w, c2f::Rng& rng) {
  c2f::Image img(h, w);
  for (double& v : img.rgb) v = rng.uniform();
  return img;
}

inline std::vector<std::uint8_t> random_labels(std::size_t c, c2f::Rng& rng, double p = 0.4) {
  std::vector<std::uint8_t> y(c);
  for (auto& v : y) v = rng.uniform() < p;
  return y;
}

inline std::vector<double> row_vec(const c2f::Tensor& t) { return t.values; }

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("c2f_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_util
