#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "c2f/autograd.hpp"
#include "c2f/binary_io.hpp"
#include "c2f/image.hpp"
#include "c2f/rng.hpp"

namespace c2f {

/// L region vectors of D channels laid out as an [L, D] tensor, region-major,
/// regions in row-major grid order.
struct FeatureGrid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = 0;
  Tensor data;

  std::size_t regions() const { return grid_h * grid_w; }

  static FeatureGrid from(std::size_t grid_h, std::size_t grid_w, Tensor data) {
    if (data.rank() != 2 || data.dim(0) != grid_h * grid_w)
      throw ShapeError("feature grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                       " does not match data shape " + to_string(data.shape));
    FeatureGrid g{grid_h, grid_w, data.dim(1), std::move(data)};
    return g;
  }
};

struct GlobalFeature {
  Tensor data;  // [D_fc]
  std::size_t dim() const { return data.size(); }
};

struct EncoderConfig {
  std::size_t conv1_channels = 16;
  std::size_t conv2_channels = 32;
  std::size_t fc_dim = 64;
};

struct EncoderParams {
  Tensor conv1_w, conv1_b;  // [3, 3, 3, c1], [c1]
  Tensor conv2_w, conv2_b;  // [3, 3, c1, c2], [c2]
  Tensor fc_w, fc_b;        // [L * c2, fc_dim], [fc_dim]

  static EncoderParams init(std::size_t grid_h, std::size_t grid_w, const EncoderConfig& cfg, Rng& rng) {
    const std::size_t c1 = cfg.conv1_channels, c2 = cfg.conv2_channels;
    const std::size_t flat = grid_h * grid_w * c2;
    EncoderParams p;
    p.conv1_w = lecun({3, 3, 3, c1}, 27, rng);
    p.conv1_b = Tensor({c1});
    p.conv2_w = lecun({3, 3, c1, c2}, 9 * c1, rng);
    p.conv2_b = Tensor({c2});
    p.fc_w = glorot({flat, cfg.fc_dim}, flat, cfg.fc_dim, rng);
    p.fc_b = Tensor({cfg.fc_dim});
    return p;
  }

  std::size_t channels() const { return conv2_w.dim(3); }
  std::size_t fc_dim() const { return fc_w.dim(1); }
};

struct EncodedImage {
  Var grid;    // [L, D]
  Var global;  // [1, D_fc]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

inline void validate_image(const Image& image) {
  if (image.height == 0 || image.width == 0 || image.height % 4 || image.width % 4)
    throw std::invalid_argument("encode: image dimensions " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " must be positive multiples of 4");
  if (image.rgb.size() != image.height * image.width * 3)
    throw std::invalid_argument("encode: pixel buffer does not match image dimensions");
  for (double v : image.rgb)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("encode: pixel value outside [0, 1]");
}

/// conv3x3 -> tanh -> avgpool, twice, then an affine map of the flattened grid.
template <typename Params>
EncodedImage encode(Tape& tape, const Image& image, Params& params) {
  validate_image(image);
  Var x = tape.constant(Tensor({image.height, image.width, 3}, image.rgb));
  Var h1 = avgpool2(tanh(conv3x3(x, tape.param(params.conv1_w), tape.param(params.conv1_b))));
  Var h2 = avgpool2(tanh(conv3x3(h1, tape.param(params.conv2_w), tape.param(params.conv2_b))));
  const std::size_t gh = image.height / 4, gw = image.width / 4;
  const std::size_t d = h2.shape()[2];
  Var grid = reshape(h2, {gh * gw, d});
  if (params.fc_w.dim(0) != gh * gw * d)
    throw ShapeError("encode: fc weights expect " + std::to_string(params.fc_w.dim(0)) +
                     " inputs, grid provides " + std::to_string(gh * gw * d));
  Var flat = reshape(grid, {1, gh * gw * d});
  Var global = add(matmul(flat, tape.param(params.fc_w)), tape.param(params.fc_b));
  return EncodedImage{grid, global, gh, gw};
}

/// Value-only encoding without gradient tracking.
inline std::pair<FeatureGrid, GlobalFeature> encode(const Image& image, const EncoderParams& params) {
  Tape tape(false);
  EncodedImage e = encode(tape, image, params);
  FeatureGrid grid = FeatureGrid::from(e.grid_h, e.grid_w, e.grid.value());
  GlobalFeature global{Tensor({e.global.size()}, e.global.value().values)};
  return {std::move(grid), std::move(global)};
}

// ---------------------------------------------------------------------------
// Feature files: "C2FA", version 1, little-endian, float32 payloads.

struct FeatureRecord {
  FeatureGrid grid;
  GlobalFeature global;
  std::vector<std::uint8_t> labels;
};

struct FeatureDataset {
  std::size_t grid_h = 0, grid_w = 0, channels = 0, fc_dim = 0, classes = 0;
  std::vector<FeatureRecord> records;
};

inline constexpr char kFeatureMagic[4] = {'C', '2', 'F', 'A'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void save_features(const FeatureDataset& ds, const std::filesystem::path& path) {
  const std::size_t l = ds.grid_h * ds.grid_w;
  binio::Writer w;
  w.bytes(kFeatureMagic, 4);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(ds.records.size()));
  w.u32(static_cast<std::uint32_t>(ds.grid_h));
  w.u32(static_cast<std::uint32_t>(ds.grid_w));
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.fc_dim));
  w.u32(static_cast<std::uint32_t>(ds.classes));
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const FeatureRecord& r = ds.records[i];
    if (r.grid.grid_h != ds.grid_h || r.grid.grid_w != ds.grid_w || r.grid.channels != ds.channels ||
        r.grid.data.size() != l * ds.channels || r.global.dim() != ds.fc_dim || r.labels.size() != ds.classes)
      throw ShapeError("save_features: record " + std::to_string(i) + " dimension mismatch with dataset header");
    for (double v : r.grid.data.values) w.f32(static_cast<float>(v));
    for (double v : r.global.data.values) w.f32(static_cast<float>(v));
    for (std::uint8_t y : r.labels) {
      if (y > 1) throw std::invalid_argument("save_features: labels must be 0 or 1");
      w.u8(y);
    }
  }
  w.save(path);
}

inline FeatureDataset load_features(const std::filesystem::path& path) {
  binio::Reader r = binio::Reader::open(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kFeatureMagic, 4) != 0) throw IoError(r.origin() + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kFeatureVersion) throw IoError(r.origin() + ": unsupported version " + std::to_string(version));
  FeatureDataset ds;
  const std::uint32_t count = r.u32();
  ds.grid_h = r.u32();
  ds.grid_w = r.u32();
  ds.channels = r.u32();
  ds.fc_dim = r.u32();
  ds.classes = r.u32();
  const std::size_t l = ds.grid_h * ds.grid_w;
  if (count > 0 && (l == 0 || ds.channels == 0 || ds.fc_dim == 0 || ds.classes == 0))
    throw IoError(r.origin() + ": dimension mismatch, zero extent in header");
  const std::size_t record_bytes = (l * ds.channels + ds.fc_dim) * 4 + ds.classes;
  r.need(record_bytes * count);
  ds.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    Tensor grid({l, ds.channels});
    for (double& v : grid.values) v = r.f32();
    rec.grid = FeatureGrid::from(ds.grid_h, ds.grid_w, std::move(grid));
    rec.global.data = Tensor({ds.fc_dim});
    for (double& v : rec.global.data.values) v = r.f32();
    rec.labels.resize(ds.classes);
    for (auto& y : rec.labels) {
      y = r.u8();
      if (y > 1) throw IoError(r.origin() + ": label byte outside {0, 1} in record " + std::to_string(i));
    }
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw IoError(r.origin() + ": dimension mismatch, trailing bytes after last record");
  return ds;
}

}  // namespace c2f
