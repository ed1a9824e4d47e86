#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "c2f/attention.hpp"
#include "c2f/binary_io.hpp"
#include "c2f/decoder.hpp"
#include "c2f/encoder.hpp"
#include "c2f/grad_check.hpp"

namespace c2f {

struct ModelConfig {
  std::size_t classes = 8;
  std::size_t image_h = 32, image_w = 32;  // ignored without an encoder
  std::size_t grid_h = 8, grid_w = 8;
  std::size_t channels = 32;  // D
  std::size_t fc_dim = 64;
  std::size_t embed_dim = 32;
  std::size_t hidden = 64;
  std::size_t attn_hidden = 32;
  std::size_t steps = 3;
  bool use_local = true;
  bool use_global = true;
  bool use_fc = false;      // concatenate f_fc to the step-1 decoder input
  bool has_encoder = true;  // false when consuming precomputed features
  EncoderConfig encoder{};

  void validate() const {
    if (classes == 0 || grid_h == 0 || grid_w == 0 || channels == 0 || embed_dim == 0 || hidden == 0 ||
        attn_hidden == 0 || steps == 0 || fc_dim == 0)
      throw std::invalid_argument("ModelConfig: all sizes must be positive");
    if (has_encoder) {
      if (image_h != 4 * grid_h || image_w != 4 * grid_w)
        throw std::invalid_argument("ModelConfig: encoder grid must be a quarter of the image size");
      if (channels != encoder.conv2_channels || fc_dim != encoder.fc_dim)
        throw std::invalid_argument("ModelConfig: encoder output sizes disagree with the decoder inputs");
    }
  }
};

/// Everything the network learns, plus the configuration that shapes it.
struct Model {
  ModelConfig config;
  std::optional<EncoderParams> encoder;
  GlobalAttnParams global_attn;
  LocalAttnParams local_attn;
  DecoderParams decoder;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model m;
    m.config = cfg;
    if (cfg.has_encoder) m.encoder = EncoderParams::init(cfg.grid_h, cfg.grid_w, cfg.encoder, rng);
    m.global_attn = GlobalAttnParams::init(cfg.channels, cfg.hidden, rng);
    m.local_attn = LocalAttnParams::init(cfg.channels, cfg.hidden, cfg.attn_hidden, rng);
    m.decoder = DecoderParams::init(cfg.classes, cfg.embed_dim, cfg.hidden, cfg.channels, rng,
                                    cfg.use_fc ? cfg.fc_dim : 0);
    return m;
  }

  /// Every trainable tensor with its checkpoint name, in a fixed order.
  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> p;
    if (encoder) {
      p.push_back({"enc.conv1_w", &encoder->conv1_w});
      p.push_back({"enc.conv1_b", &encoder->conv1_b});
      p.push_back({"enc.conv2_w", &encoder->conv2_w});
      p.push_back({"enc.conv2_b", &encoder->conv2_b});
      p.push_back({"enc.fc_w", &encoder->fc_w});
      p.push_back({"enc.fc_b", &encoder->fc_b});
    }
    p.push_back({"gatt.W_g", &global_attn.score_w});
    p.push_back({"gatt.b_g", &global_attn.score_b});
    p.push_back({"gatt.I_c_w", &global_attn.init_c_w});
    p.push_back({"gatt.I_c_b", &global_attn.init_c_b});
    p.push_back({"gatt.I_h_w", &global_attn.init_h_w});
    p.push_back({"gatt.I_h_b", &global_attn.init_h_b});
    p.push_back({"latt.region_w", &local_attn.region_w});
    p.push_back({"latt.hidden_w", &local_attn.hidden_w});
    p.push_back({"latt.layer_b", &local_attn.layer_b});
    p.push_back({"latt.out_w", &local_attn.out_w});
    p.push_back({"latt.out_b", &local_attn.out_b});
    p.push_back({"dec.E", &decoder.embed});
    const std::pair<const char*, GateParams*> gates[] = {
        {"c", &decoder.cell}, {"i", &decoder.input}, {"f", &decoder.forget}, {"o", &decoder.output}};
    for (auto [g, gp] : gates) {
      const std::string s(g);
      p.push_back({"dec.W_x" + s, &gp->w_x});
      p.push_back({"dec.W_h" + s, &gp->w_h});
      p.push_back({"dec.W_z" + s, &gp->w_z});
      p.push_back({"dec.b_" + s, &gp->b});
    }
    p.push_back({"dec.W_p", &decoder.pred_w});
    p.push_back({"dec.b_p", &decoder.pred_b});
    return p;
  }

  UnrollOptions unroll_options() const { return UnrollOptions{config.steps, config.use_global, config.use_local}; }
};

/// A decoder-ready feature pair, either computed by the encoder or loaded.
struct PrecomputedFeatures {
  const FeatureGrid* grid;
  const GlobalFeature* global;
};

using ModelInput = std::variant<const Image*, PrecomputedFeatures>;

/// Full forward pass: encoder (or precomputed features) -> unroll.
/// Passing a non-const model tracks its parameters on the tape.
template <typename M>
UnrollTrace forward(Tape& tape, M& model, const ModelInput& input, const LabelSet* supervision = nullptr) {
  DecoderInput in;
  if (const Image* const* img = std::get_if<const Image*>(&input)) {
    if (!model.encoder) throw std::invalid_argument("forward: model has no encoder; supply precomputed features");
    EncodedImage e = encode(tape, **img, *model.encoder);
    in.grid = e.grid;
    in.grid_h = e.grid_h;
    in.grid_w = e.grid_w;
    if (model.config.use_fc) in.global_feature = e.global;
  } else {
    const PrecomputedFeatures& f = std::get<PrecomputedFeatures>(input);
    in.grid = tape.constant_ref(f.grid->data);
    in.grid_h = f.grid->grid_h;
    in.grid_w = f.grid->grid_w;
    if (model.config.use_fc) in.global_feature = reshape(tape.constant_ref(f.global->data), {1, f.global->dim()});
  }
  if (in.grid_h != model.config.grid_h || in.grid_w != model.config.grid_w || in.grid.shape()[1] != model.config.channels)
    throw ShapeError("forward: feature grid does not match the model configuration");
  return unroll(tape, in, model.decoder, model.global_attn, model.local_attn, model.unroll_options(), supervision);
}

// ---------------------------------------------------------------------------
// Checkpoints: "C2FW", version, then named float32 sections until EOF.

inline constexpr char kCheckpointMagic[4] = {'C', '2', 'F', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kConfigSection = "config";

namespace detail {

inline void write_section(binio::Writer& w, const std::string& name, const Shape& shape, const std::vector<double>& v) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t e : shape) w.u32(static_cast<std::uint32_t>(e));
  for (double x : v) w.f32(static_cast<float>(x));
}

inline std::vector<double> config_values(const ModelConfig& c) {
  return {double(c.classes),     double(c.image_h),   double(c.image_w),   double(c.grid_h),
          double(c.grid_w),      double(c.channels),  double(c.fc_dim),    double(c.embed_dim),
          double(c.hidden),      double(c.attn_hidden), double(c.steps),   double(c.use_local),
          double(c.use_global),  double(c.use_fc),    double(c.has_encoder), double(c.encoder.conv1_channels)};
}

inline ModelConfig config_from(const std::vector<double>& v, const std::string& origin) {
  if (v.size() != 16) throw IoError(origin + ": config section has " + std::to_string(v.size()) + " entries");
  auto n = [&](std::size_t i) { return static_cast<std::size_t>(v[i]); };
  ModelConfig c;
  c.classes = n(0);
  c.image_h = n(1);
  c.image_w = n(2);
  c.grid_h = n(3);
  c.grid_w = n(4);
  c.channels = n(5);
  c.fc_dim = n(6);
  c.embed_dim = n(7);
  c.hidden = n(8);
  c.attn_hidden = n(9);
  c.steps = n(10);
  c.use_local = v[11] != 0.0;
  c.use_global = v[12] != 0.0;
  c.use_fc = v[13] != 0.0;
  c.has_encoder = v[14] != 0.0;
  c.encoder = EncoderConfig{n(15), c.channels, c.fc_dim};
  return c;
}

}  // namespace detail

inline binio::Writer checkpoint_writer(const Model& model) {
  binio::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const std::vector<double> cfg = detail::config_values(model.config);
  detail::write_section(w, kConfigSection, {cfg.size()}, cfg);
  for (const NamedParam& p : const_cast<Model&>(model).parameters())
    detail::write_section(w, p.name, p.tensor->shape, p.tensor->values);
  return w;
}

inline std::vector<std::uint8_t> checkpoint_bytes(const Model& model) { return checkpoint_writer(model).buffer(); }

/// Writes through a temporary file so an interrupted write never clobbers
/// the previous checkpoint.
inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  checkpoint_writer(model).save(tmp);
  std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  binio::Reader r = binio::Reader::open(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError(r.origin() + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError(r.origin() + ": unsupported version " + std::to_string(version));
  std::map<std::string, Tensor> sections;
  while (!r.at_end()) {
    const std::uint16_t len = r.u16();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    Tensor t;
    try {
      t = Tensor(shape);
    } catch (const ShapeError& e) {
      throw IoError(r.origin() + ": section " + name + ": " + e.what());
    }
    r.need(t.size() * 4);
    for (double& v : t.values) v = r.f32();
    if (!sections.emplace(name, std::move(t)).second) throw IoError(r.origin() + ": duplicate section " + name);
  }
  auto cfg_it = sections.find(kConfigSection);
  if (cfg_it == sections.end()) throw IoError(r.origin() + ": missing config section");
  Model model;
  model.config = detail::config_from(cfg_it->second.values, r.origin());
  try {
    model = Model::init(model.config, 0);
  } catch (const std::invalid_argument& e) {
    throw IoError(r.origin() + ": invalid config: " + e.what());
  }
  for (const NamedParam& p : model.parameters()) {
    auto it = sections.find(p.name);
    if (it == sections.end()) throw IoError(r.origin() + ": missing section " + p.name);
    if (it->second.shape != p.tensor->shape)
      throw IoError(r.origin() + ": section " + p.name + " has shape " + to_string(it->second.shape) + ", expected " +
                    to_string(p.tensor->shape));
    p.tensor->values = std::move(it->second.values);
  }
  if (sections.size() != model.parameters().size() + 1) throw IoError(r.origin() + ": unexpected extra sections");
  return model;
}

}  // namespace c2f
