#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "c2f/c2f.hpp"
#include "helpers.hpp"

using namespace c2f;

namespace {

ModelConfig toy_config(std::size_t classes = 2) {
  ModelConfig cfg;
  cfg.classes = classes;
  cfg.image_h = cfg.image_w = 8;
  cfg.grid_h = cfg.grid_w = 2;
  cfg.encoder = EncoderConfig{3, 4, 5};
  cfg.channels = 4;
  cfg.fc_dim = 5;
  cfg.embed_dim = 3;
  cfg.hidden = 4;
  cfg.attn_hidden = 3;
  cfg.steps = 2;
  return cfg;
}

void randomize_biases(Model& m, Rng& rng) {
  for (const NamedParam& p : m.parameters())
    if (p.tensor->rank() == 1)
      for (double& v : p.tensor->values) v = rng.uniform(-0.5, 0.5);
}

Dataset small_scenes(std::size_t n, std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  return Dataset::from_scenes(generate(spec, n));
}

RunConfig quick_run(std::size_t epochs) {
  RunConfig run;
  run.epochs = epochs;
  run.batch = 4;
  run.hidden = 16;
  run.embed = 8;
  run.attn_hidden = 8;
  return run;
}

}  // namespace

TEST(Model, FullLossGradientsMatchFiniteDifferences) {
  for (bool use_fc : {false, true}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ModelConfig cfg = toy_config();
      cfg.use_fc = use_fc;
      Model m = Model::init(cfg, seed);
      Rng rng(derive_seed(1, seed));
      randomize_biases(m, rng);
      const Image img = testing_util::random_image(8, 8, rng);
      const LabelSet y = LabelSet::make({1, 0}, {0, 1});
      auto f = [&](Tape& t) {
        UnrollTrace tr = forward(t, m, &img, &y);
        return total_loss(t, tr.predictions, tr.aggregated, y, LossConfig{0.5, 0.5, 0.9, 0.9}).total;
      };
      auto report = grad_check(f, m.parameters(), 1e-5, 1e-4);
      EXPECT_TRUE(report.passed) << "use_fc=" << use_fc << " seed=" << seed << " err " << report.max_rel_error;
      std::size_t checked = 0;
      for (const auto& e : report.params) checked += e.checked;
      EXPECT_GT(checked, 100u);
    }
  }
}

TEST(Model, PrecomputedFeaturesMatchImagePath) {
  Model m = Model::init(toy_config(), 3);
  Rng rng(4);
  const Image img = testing_util::random_image(8, 8, rng);
  auto [grid, global] = encode(img, *m.encoder);
  ModelConfig fcfg = m.config;
  fcfg.has_encoder = false;
  Model headless = m;
  headless.config = fcfg;
  headless.encoder.reset();
  Tape a(false), b(false);
  const auto qa = forward(a, m, &img).predictions.value().values;
  const auto qb = forward(b, headless, PrecomputedFeatures{&grid, &global}).predictions.value().values;
  EXPECT_EQ(qa, qb);
  Tape c(false);
  EXPECT_THROW(forward(c, headless, &img), std::invalid_argument);
}

TEST(Model, ConfigValidation) {
  ModelConfig cfg = toy_config();
  cfg.image_h = 12;
  EXPECT_THROW(Model::init(cfg, 0), std::invalid_argument);
  cfg = toy_config();
  cfg.hidden = 0;
  EXPECT_THROW(Model::init(cfg, 0), std::invalid_argument);
  cfg = toy_config();
  cfg.channels = 7;
  EXPECT_THROW(Model::init(cfg, 0), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = testing_util::scratch("ckpt");
  Model m = Model::init(toy_config(3), 5);
  save_checkpoint(m, dir / "a.c2fw");
  Model back = load_checkpoint(dir / "a.c2fw");
  save_checkpoint(back, dir / "b.c2fw");
  EXPECT_EQ(testing_util::read_bytes(dir / "a.c2fw"), testing_util::read_bytes(dir / "b.c2fw"));
  auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(pa[i].tensor->shape, pb[i].tensor->shape);
    for (std::size_t j = 0; j < pa[i].tensor->size(); ++j)
      EXPECT_EQ(pb[i].tensor->values[j], static_cast<double>(static_cast<float>(pa[i].tensor->values[j])));
  }
  EXPECT_EQ(back.config.classes, 3u);
  EXPECT_EQ(back.config.steps, 2u);
}

TEST(Checkpoint, LayoutStartsWithMagicVersionAndNamedSections) {
  const auto bytes = checkpoint_bytes(Model::init(toy_config(), 6));
  ASSERT_GT(bytes.size(), 20u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "C2FW");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 6);  // u16 name length of "config"
  EXPECT_EQ(std::string(bytes.begin() + 10, bytes.begin() + 16), "config");
  const std::string all(bytes.begin(), bytes.end());
  for (const char* name : {"dec.W_xc", "dec.W_hi", "dec.W_zf", "dec.b_o", "dec.E", "dec.W_p", "gatt.W_g", "latt.out_w"})
    EXPECT_NE(all.find(name), std::string::npos) << name;
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto dir = testing_util::scratch("ckpt_bad");
  save_checkpoint(Model::init(toy_config(), 7), dir / "ok.c2fw");
  const std::string good = testing_util::read_bytes(dir / "ok.c2fw");
  auto fails = [&](const std::string& bytes, const std::string& needle) {
    std::ofstream(dir / "x.c2fw", std::ios::binary | std::ios::trunc) << bytes;
    try {
      load_checkpoint(dir / "x.c2fw");
    } catch (const IoError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(fails("C2FX" + good.substr(4), "bad magic"));
  EXPECT_TRUE(fails(good.substr(0, good.size() - 2), "truncated"));
  // Drop the last section (dec.b_p: 2-byte length + 7 name bytes + rank + extent + 2 floats).
  EXPECT_TRUE(fails(good.substr(0, good.size() - (2 + 7 + 4 + 4 + 8)), "missing section dec.b_p"));
  std::string bigger = good;
  const auto pos = bigger.find("dec.b_p");
  bigger[pos + 7 + 4] = 3;  // claim 3 classes in the bias extent
  EXPECT_TRUE(fails(bigger, "truncated"));
  EXPECT_THROW(load_checkpoint(dir / "none.c2fw"), IoError);
}

TEST(Training, OneEpochOnEightSamplesRoundTrips) {
  const auto dir = testing_util::scratch("train_small");
  Dataset data = small_scenes(8, 1);
  TrainOptions opts;
  opts.checkpoint = dir / "m.c2fw";
  std::vector<EpochLog> logs;
  opts.on_epoch = [&](const EpochLog& l) { logs.push_back(l); };
  Model m = train(quick_run(1), data, opts);
  ASSERT_EQ(logs.size(), 1u);
  EXPECT_TRUE(std::isfinite(logs[0].loss));
  const auto bytes = checkpoint_bytes(m);
  EXPECT_EQ(testing_util::read_bytes(dir / "m.c2fw"), std::string(bytes.begin(), bytes.end()));
  Model back = load_checkpoint(dir / "m.c2fw");
  EXPECT_EQ(checkpoint_bytes(back), checkpoint_bytes(m));
  const MetricsReport r = evaluate(predict(back, data));
  for (const auto& row : r.rows) EXPECT_TRUE(std::isfinite(row.value)) << row.name;
}

TEST(Training, DeterministicGivenSeed) {
  Dataset data = small_scenes(16, 2);
  std::vector<std::string> la, lb;
  TrainOptions a, b;
  a.on_epoch = [&](const EpochLog& l) { la.push_back(l.line()); };
  b.on_epoch = [&](const EpochLog& l) { lb.push_back(l.line()); };
  const Model ma = train(quick_run(2), data, a), mb = train(quick_run(2), data, b);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(checkpoint_bytes(ma), checkpoint_bytes(mb));
  RunConfig other = quick_run(2);
  other.seed = 43;
  EXPECT_NE(checkpoint_bytes(train(other, data)), checkpoint_bytes(ma));
}

TEST(Training, MarginTermsOffMeansLossEqualsBce) {
  Dataset data = small_scenes(8, 3);
  RunConfig run = quick_run(1);
  run.mm = false;
  std::vector<EpochLog> logs;
  TrainOptions opts;
  opts.on_epoch = [&](const EpochLog& l) { logs.push_back(l); };
  train(run, data, opts);
  EXPECT_EQ(logs[0].loss, logs[0].bce);
  EXPECT_GT(logs[0].r1 + logs[0].r2, 0.0);  // still reported, unweighted
}

TEST(Training, AblationFlagsShapeTheModel) {
  Dataset data = small_scenes(4, 4);
  RunConfig run = quick_run(0);
  run.global = false;
  run.local = false;
  Model m = Model::init(model_config_for(run, data), 1);
  Tape tape(false);
  UnrollTrace tr = forward(tape, m, data.input(0));
  for (double v : tr.initial.h.value().values) EXPECT_EQ(v, 0.0);
  for (double v : tr.initial.c.value().values) EXPECT_EQ(v, 0.0);
  for (const auto& map : tr.local)
    for (double w : map.weights) EXPECT_EQ(w, 1.0 / 64.0);
  EXPECT_EQ(m.config.steps, data.max_cardinality());
}

TEST(Training, UniformAttentionContextIsExactRegionMean) {
  Rng rng(5);
  const Tensor grid = testing_util::random({6, 3}, rng);
  Tape tape;
  AttentionResult r = uniform_attention(tape, tape.constant(grid));
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) s += grid.at(i, k);
    EXPECT_EQ(r.context.value()[k], s / 6.0);
  }
}

TEST(Training, DivergenceKeepsLastGoodCheckpoint) {
  const auto dir = testing_util::scratch("train_nan");
  Dataset data = small_scenes(8, 6);
  TrainOptions opts;
  opts.checkpoint = dir / "m.c2fw";
  train(quick_run(1), data, opts);
  const std::string good = testing_util::read_bytes(dir / "m.c2fw");
  RunConfig wild = quick_run(3);
  wild.optimizer.kind = OptimizerConfig::Kind::Sgd;
  wild.optimizer.lr = 1e300;
  EXPECT_THROW(train(wild, data, opts), TrainingDiverged);
  EXPECT_EQ(testing_util::read_bytes(dir / "m.c2fw"), good);
  EXPECT_NO_THROW(load_checkpoint(dir / "m.c2fw"));
}

TEST(Training, RandomWeightsScoreNearClassPrior) {
  Dataset data = small_scenes(400, 7);
  RunConfig run;
  Model m = Model::init(model_config_for(run, data), 11);
  const MetricsReport r = evaluate(predict(m, data));
  const auto counts = data.class_counts();
  double prior = 0;
  for (std::size_t c : counts) prior += static_cast<double>(c) / static_cast<double>(data.size());
  prior /= static_cast<double>(counts.size());
  EXPECT_NEAR(r.get("mAP"), prior, 0.1);
  EXPECT_LT(r.get("mAP"), 0.6);
}

TEST(Training, FeatureDatasetsTrain) {
  Rng rng(8);
  FeatureDataset fd;
  fd.grid_h = fd.grid_w = 2;
  fd.channels = 3;
  fd.fc_dim = 4;
  fd.classes = 3;
  for (int i = 0; i < 6; ++i) {
    FeatureRecord r;
    r.grid = FeatureGrid::from(2, 2, testing_util::random({4, 3}, rng));
    r.global.data = testing_util::random({4}, rng);
    r.labels = {1, static_cast<std::uint8_t>(i % 2), 0};
    fd.records.push_back(std::move(r));
  }
  Dataset data = Dataset::from_features(fd);
  RunConfig run = quick_run(2);
  run.use_fc = true;
  Model m = train(run, data);
  EXPECT_FALSE(m.encoder.has_value());
  EXPECT_TRUE(m.config.use_fc);
  EXPECT_EQ(predict(m, data).scores.size(), 18u);
}
