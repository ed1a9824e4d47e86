#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "c2f/metrics.hpp"
#include "c2f/model.hpp"
#include "c2f/objective.hpp"
#include "c2f/scenes.hpp"

namespace c2f {

/// Images or precomputed features with their binary labels.
struct Dataset {
  std::size_t classes = 0;
  std::vector<Image> images;
  std::vector<FeatureRecord> features;
  std::vector<std::vector<std::uint8_t>> labels;
  std::size_t grid_h = 0, grid_w = 0, channels = 0, fc_dim = 0;

  bool precomputed() const { return !features.empty(); }
  std::size_t size() const { return labels.size(); }

  ModelInput input(std::size_t i) const {
    if (precomputed()) return PrecomputedFeatures{&features[i].grid, &features[i].global};
    return &images[i];
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (const auto& y : labels)
      for (std::size_t c = 0; c < classes; ++c) counts[c] += y[c];
    return counts;
  }

  std::size_t max_cardinality() const {
    std::size_t m = 0;
    for (const auto& y : labels) m = std::max<std::size_t>(m, static_cast<std::size_t>(std::count(y.begin(), y.end(), 1)));
    return m;
  }

  static Dataset from_images(std::vector<LabeledImage> items, std::size_t classes) {
    Dataset d;
    d.classes = classes;
    for (auto& it : items) {
      if (!d.images.empty() && (it.image.height != d.images[0].height || it.image.width != d.images[0].width))
        throw std::invalid_argument("dataset images must share one size; " + it.id + " differs");
      d.images.push_back(std::move(it.image));
      d.labels.push_back(std::move(it.labels));
    }
    if (!d.images.empty()) {
      d.grid_h = d.images[0].height / 4;
      d.grid_w = d.images[0].width / 4;
    }
    return d;
  }

  static Dataset from_directory(const std::filesystem::path& dir, std::size_t classes = kSceneClasses) {
    return from_images(read_dataset(dir, classes), classes);
  }

  static Dataset from_scenes(const std::vector<Scene>& scenes) {
    Dataset d;
    d.classes = kSceneClasses;
    for (const auto& s : scenes) {
      d.images.push_back(s.image);
      d.labels.push_back(s.labels);
    }
    if (!d.images.empty()) {
      d.grid_h = d.images[0].height / 4;
      d.grid_w = d.images[0].width / 4;
    }
    return d;
  }

  static Dataset from_features(FeatureDataset fd) {
    Dataset d;
    d.classes = fd.classes;
    d.grid_h = fd.grid_h;
    d.grid_w = fd.grid_w;
    d.channels = fd.channels;
    d.fc_dim = fd.fc_dim;
    for (auto& r : fd.records) d.labels.push_back(r.labels);
    d.features = std::move(fd.records);
    return d;
  }
};

struct OptimizerConfig {
  enum class Kind { Adam, Sgd };
  Kind kind = Kind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Training run settings. local/global/mm are the ablation switches.
struct RunConfig {
  bool local = true;
  bool global = true;
  bool mm = true;
  bool use_fc = false;
  OptimizerConfig optimizer{};
  std::size_t batch = 16;
  std::size_t epochs = 30;
  std::size_t steps = 0;  // 0: maximum label cardinality of the training set
  std::size_t hidden = 64;
  std::size_t embed = 32;
  std::size_t attn_hidden = 32;
  LossConfig loss{};
  std::uint64_t seed = 42;

  LossConfig effective_loss() const {
    LossConfig l = loss;
    if (!mm) l.lambda1 = l.lambda2 = 0.0;
    return l;
  }

  void validate() const {
    if (batch == 0) throw std::invalid_argument("batch size must be at least 1");
    if (!(optimizer.lr > 0.0)) throw std::invalid_argument("step size must be positive");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
      throw std::invalid_argument("moment decay rates must lie in [0, 1)");
    if (!(optimizer.eps > 0.0)) throw std::invalid_argument("optimizer epsilon must be positive");
    loss.validate();
  }
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<NamedParam>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor->size(), 0.0);
        v_.emplace_back(p.tensor->size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k].tensor;
      if (!p.has_grad()) continue;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        if (cfg_.kind == OptimizerConfig::Kind::Sgd) {
          p.values[i] -= cfg_.lr * g;
          continue;
        }
        double& m = m_[k][i];
        double& v = v_[k][i];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        p.values[i] -= cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double bce = 0.0;
  double r1 = 0.0;
  double r2 = 0.0;
  double train_map = 0.0;

  std::string line() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f", epoch, loss, bce, r1, r2, train_map);
    return buf;
  }
};

inline constexpr const char* kLogHeader = "epoch,loss,bce,R1,R2,train_mAP";

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline ModelConfig model_config_for(const RunConfig& run, const Dataset& data) {
  ModelConfig mc;
  mc.classes = data.classes;
  mc.hidden = run.hidden;
  mc.embed_dim = run.embed;
  mc.attn_hidden = run.attn_hidden;
  mc.steps = run.steps ? run.steps : std::max<std::size_t>(1, data.max_cardinality());
  mc.use_local = run.local;
  mc.use_global = run.global;
  mc.use_fc = run.use_fc;
  mc.grid_h = data.grid_h;
  mc.grid_w = data.grid_w;
  if (data.precomputed()) {
    mc.has_encoder = false;
    mc.channels = data.channels;
    mc.fc_dim = data.fc_dim;
  } else {
    mc.has_encoder = true;
    mc.image_h = data.grid_h * 4;
    mc.image_w = data.grid_w * 4;
    mc.channels = mc.encoder.conv2_channels;
    mc.fc_dim = mc.encoder.fc_dim;
  }
  return mc;
}

/// Aggregated per-class scores for every sample (inference-mode decoding).
inline EvalBatch predict(const Model& model, const Dataset& data, std::vector<std::size_t> ks = {3, 5}) {
  EvalBatch b;
  b.samples = data.size();
  b.classes = data.classes;
  b.ks = std::move(ks);
  if (model.config.classes != data.classes)
    throw std::invalid_argument("model predicts " + std::to_string(model.config.classes) + " classes, dataset has " +
                                std::to_string(data.classes));
  b.scores.reserve(b.samples * b.classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape tape(false);
    UnrollTrace trace = forward(tape, model, data.input(i));
    const auto& v = trace.aggregated.value().values;
    b.scores.insert(b.scores.end(), v.begin(), v.end());
    b.labels.insert(b.labels.end(), data.labels[i].begin(), data.labels[i].end());
  }
  return b;
}

/// Fraction of rows (with both a positive and a negative) whose lowest positive
/// score exceeds the highest negative score by more than eps.
inline double margin_satisfaction(const EvalBatch& b, double eps) {
  std::size_t ok = 0, rows = 0;
  for (std::size_t n = 0; n < b.samples; ++n) {
    double min_pos = 2.0, max_neg = -1.0;
    for (std::size_t c = 0; c < b.classes; ++c) {
      if (b.label(n, c)) min_pos = std::min(min_pos, b.score(n, c));
      else max_neg = std::max(max_neg, b.score(n, c));
    }
    if (min_pos > 1.5 || max_neg < -0.5) continue;
    ++rows;
    ok += min_pos > max_neg + eps;
  }
  return rows ? static_cast<double>(ok) / static_cast<double>(rows) : 1.0;
}

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint;  // rewritten after every epoch
  std::function<void(const EpochLog&)> on_epoch;
};

/// Mini-batch training of the full objective. Per-sample gradients of each
/// sample's share of the batch objective are summed, then one optimizer step
/// is taken per batch. Deterministic in (config, data).
inline Model train(const RunConfig& run, const Dataset& data, const TrainOptions& opts = {}) {
  run.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  Model model = Model::init(model_config_for(run, data), run.seed);
  const LossConfig loss_cfg = run.effective_loss();
  const std::vector<std::size_t> order = frequency_order(data.class_counts());
  std::vector<LabelSet> targets;
  targets.reserve(data.size());
  for (const auto& y : data.labels) targets.push_back(LabelSet::make(y, order));

  std::vector<NamedParam> params = model.parameters();
  Optimizer optimizer(run.optimizer);
  Rng shuffle_rng(derive_seed(run.seed, 0x5eed));
  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    shuffle_rng.shuffle(perm);
    EpochLog log{epoch};
    EvalBatch seen;
    seen.samples = data.size();
    seen.classes = data.classes;
    seen.scores.assign(data.size() * data.classes, 0.0);
    seen.labels.assign(data.size() * data.classes, 0);
    for (std::size_t start = 0; start < perm.size(); start += run.batch) {
      const std::size_t end = std::min(perm.size(), start + run.batch);
      for (const auto& p : params) p.tensor->zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = perm[k];
        Tape tape;
        std::optional<UnrollTrace> trace;
        std::optional<LossTerms> terms_or;
        try {
          trace = forward(tape, model, data.input(i), &targets[i]);
          terms_or = total_loss(tape, trace->predictions, trace->aggregated, targets[i], loss_cfg);
        } catch (const std::domain_error& e) {
          throw TrainingDiverged("numerical failure in epoch " + std::to_string(epoch) + ": " + e.what());
        }
        const LossTerms& terms = *terms_or;
        if (!std::isfinite(terms.total.item()))
          throw TrainingDiverged("non-finite loss in epoch " + std::to_string(epoch));
        backward(tape, batch_share(terms, end - start, loss_cfg));
        log.loss += terms.total.item();
        log.bce += terms.bce.item();
        log.r1 += terms.r1.item();
        log.r2 += terms.r2.item();
        const auto& ph = trace->aggregated.value().values;
        std::copy(ph.begin(), ph.end(), seen.scores.begin() + static_cast<long>(i * data.classes));
        std::copy(data.labels[i].begin(), data.labels[i].end(), seen.labels.begin() + static_cast<long>(i * data.classes));
      }
      for (const auto& p : params)
        if (!p.tensor->all_finite()) throw TrainingDiverged("non-finite gradient in " + p.name);
      optimizer.step(params);
      for (const auto& p : params)
        if (!p.tensor->all_finite()) throw TrainingDiverged("non-finite parameter " + p.name + " after update");
    }
    const double n = static_cast<double>(data.size());
    log.loss /= n;
    log.bce /= n;
    log.r1 /= n;
    log.r2 /= n;
    log.train_map = evaluate(seen).get("mAP");
    for (const auto& p : params) p.tensor->zero_grad();
    if (opts.checkpoint) save_checkpoint(model, *opts.checkpoint);
    if (opts.on_epoch) opts.on_epoch(log);
  }
  return model;
}

}  // namespace c2f
