#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace c2f {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// RGB image, row-major, interleaved channels, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), rgb(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

/// Single-channel real-valued image.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace netpbm {

inline void write_file(const std::filesystem::path& path, const std::string& header, const std::vector<std::uint8_t>& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

/// Binary P5, maxval 255.
inline void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& gray) {
  if (gray.size() != width * height) throw std::invalid_argument("write_pgm: pixel count does not match size");
  write_file(path, "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", gray);
}

/// Binary P6, maxval 255.
inline void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3) throw std::invalid_argument("write_ppm: pixel count does not match size");
  write_file(path, "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", rgb);
}

struct Raster {
  std::string magic;
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> data;
};

inline Raster read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string tok;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };
  Raster r;
  r.magic = token();
  if (r.magic != "P5" && r.magic != "P6") throw IoError(path.string() + ": unsupported netpbm magic '" + r.magic + "'");
  try {
    r.width = std::stoul(token());
    r.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed netpbm header");
  }
  r.channels = r.magic == "P6" ? 3 : 1;
  r.data.resize(r.width * r.height * r.channels);
  in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  if (static_cast<std::size_t>(in.gcount()) != r.data.size()) throw IoError(path.string() + ": truncated pixel data");
  return r;
}

}  // namespace netpbm

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> bytes(img.rgb.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(img.rgb[i]);
  netpbm::write_ppm(path, img.width, img.height, bytes);
}

inline Image read_ppm(const std::filesystem::path& path) {
  netpbm::Raster r = netpbm::read(path);
  if (r.channels != 3) throw IoError(path.string() + ": expected a P6 image");
  Image img(r.height, r.width);
  for (std::size_t i = 0; i < r.data.size(); ++i) img.rgb[i] = r.data[i] / 255.0;
  return img;
}

}  // namespace c2f
