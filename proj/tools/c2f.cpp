// c2f: generate synthetic scenes, train, evaluate and visualize attention.
//
// Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "c2f/c2f.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 2;
constexpr int kRuntime = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerateArgs {
  std::size_t n = 0;
  std::uint64_t seed = 42;
  std::size_t size = 32;
  std::size_t min_card = 1, max_card = 3;
  std::string out;
};

struct DataArgs {
  std::string data;      // scene directory
  std::string features;  // feature file
  std::size_t classes = c2f::kSceneClasses;

  c2f::Dataset load() const {
    if (data.empty() == features.empty()) throw UsageError("give exactly one of --data or --features");
    if (!features.empty()) return c2f::Dataset::from_features(c2f::load_features(features));
    return c2f::Dataset::from_directory(data, classes);
  }
};

struct TrainArgs {
  DataArgs data;
  c2f::RunConfig run;
  std::string optimizer = "adam";
  bool no_local = false, no_global = false, no_mm = false;
  std::string out = "model.c2fw";
  std::string log;
};

struct EvaluateArgs {
  DataArgs data;
  std::string checkpoint;
  std::vector<std::size_t> ks{3, 5};
  std::string csv;
};

struct VisualizeArgs {
  std::string checkpoint, image, out;
  std::size_t factor = 16;
  std::optional<double> sigma;
  bool overlay = true;
};

struct ExtractArgs {
  std::string checkpoint, data, out;
  std::size_t classes = c2f::kSceneClasses;
};

void add_data_options(CLI::App* cmd, DataArgs& a) {
  cmd->add_option("--data", a.data, "Scene directory (PPM images + labels.txt)");
  cmd->add_option("--features", a.features, "Precomputed feature file");
  cmd->add_option("--classes", a.classes, "Class count for --data")->check(CLI::PositiveNumber);
}

int run_generate(const GenerateArgs& a) {
  if (a.n == 0) throw UsageError("--n must be at least 1");
  c2f::SceneSpec spec;
  spec.seed = a.seed;
  spec.image_size = a.size;
  spec.min_cardinality = a.min_card;
  spec.max_cardinality = a.max_card;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  c2f::write_dataset(a.out, c2f::generate(spec, a.n));
  std::printf("wrote %zu scenes to %s\n", a.n, a.out.c_str());
  return 0;
}

int run_train(TrainArgs a) {
  if (a.optimizer == "adam") a.run.optimizer.kind = c2f::OptimizerConfig::Kind::Adam;
  else if (a.optimizer == "sgd") a.run.optimizer.kind = c2f::OptimizerConfig::Kind::Sgd;
  else throw UsageError("--optimizer must be adam or sgd");
  a.run.local = !a.no_local;
  a.run.global = !a.no_global;
  a.run.mm = !a.no_mm;
  try {
    a.run.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const c2f::Dataset data = a.data.load();

  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::binary | std::ios::trunc);
    if (!log) throw c2f::IoError("cannot open " + a.log + " for writing");
    log << c2f::kLogHeader << '\n';
  }
  std::printf("%s\n", c2f::kLogHeader);
  c2f::TrainOptions opts;
  opts.checkpoint = fs::path(a.out);
  opts.on_epoch = [&](const c2f::EpochLog& e) {
    const std::string line = e.line();
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    if (log.is_open()) log << line << '\n' << std::flush;
  };
  c2f::train(a.run, data, opts);
  return 0;
}

int run_evaluate(const EvaluateArgs& a) {
  const c2f::Model model = c2f::load_checkpoint(a.checkpoint);
  const c2f::Dataset data = a.data.load();
  if (data.size() == 0) throw std::invalid_argument("dataset is empty");
  const c2f::MetricsReport report = c2f::evaluate(c2f::predict(model, data, a.ks));
  std::cout << report.text();
  if (!a.csv.empty()) {
    std::ofstream out(a.csv, std::ios::binary);
    out << report.csv();
    if (!out) throw c2f::IoError("write failed for " + a.csv);
  }
  return 0;
}

int run_visualize(const VisualizeArgs& a) {
  if (a.factor < 1) throw UsageError("--factor must be at least 1");
  if (a.sigma && !(*a.sigma > 0.0)) throw UsageError("--sigma must be positive");
  const c2f::Model model = c2f::load_checkpoint(a.checkpoint);
  if (!model.encoder) throw std::invalid_argument(a.checkpoint + ": model was trained on features and has no encoder");
  const c2f::Image image = c2f::read_ppm(a.image);
  c2f::Tape tape(false);
  const c2f::UnrollTrace trace = c2f::forward(tape, model, &image);
  fs::create_directories(a.out);
  const std::optional<c2f::Image> scene = a.overlay ? std::optional<c2f::Image>(image) : std::nullopt;
  const fs::path dir(a.out);
  c2f::write_heatmap(c2f::render_attention(trace.global, a.factor, a.sigma), dir / "global.pgm", scene);
  for (std::size_t t = 0; t < trace.local.size(); ++t)
    c2f::write_heatmap(c2f::render_attention(trace.local[t], a.factor, a.sigma),
                       dir / ("step_" + std::to_string(t + 1) + ".pgm"), scene);
  std::printf("wrote %zu heatmaps to %s\n", trace.local.size() + 1, a.out.c_str());
  return 0;
}

int run_extract(const ExtractArgs& a) {
  const c2f::Model model = c2f::load_checkpoint(a.checkpoint);
  if (!model.encoder) throw std::invalid_argument(a.checkpoint + ": model has no encoder");
  const auto items = c2f::read_dataset(a.data, a.classes);
  c2f::FeatureDataset fd;
  fd.grid_h = model.config.grid_h;
  fd.grid_w = model.config.grid_w;
  fd.channels = model.config.channels;
  fd.fc_dim = model.config.fc_dim;
  fd.classes = a.classes;
  for (const auto& it : items) {
    auto [grid, global] = c2f::encode(it.image, *model.encoder);
    fd.records.push_back({std::move(grid), std::move(global), it.labels});
  }
  c2f::save_features(fd, a.out);
  std::printf("wrote %zu feature records to %s\n", fd.records.size(), a.out.c_str());
  return 0;
}

/// Splices `train --config FILE` entries in front of the command-line flags so
/// that explicit flags, parsed later, take precedence. Keys may sit at top
/// level or under a [train] section.
std::vector<std::string> expand_train_config(std::vector<std::string> args) {
  if (args.size() < 2 || args[1] != "train") return args;
  std::string path;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::vector<std::string> spliced;
  for (const CLI::ConfigItem& item : CLI::ConfigINI().from_file(path)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (!item.parents.empty() && item.parents != std::vector<std::string>{"train"})
      throw CLI::ConfigError("unknown section for " + item.fullname() + " in " + path);
    if (item.inputs.size() == 1) {
      spliced.push_back("--" + item.name + "=" + item.inputs[0]);
    } else {
      spliced.push_back("--" + item.name);
      for (const std::string& v : item.inputs) spliced.push_back(v);
    }
  }
  args.insert(args.begin() + 2, spliced.begin(), spliced.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine attention multi-label classifier"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Render a synthetic scene dataset");
  g->add_option("--n", gen.n, "Number of scenes")->required();
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--size", gen.size, "Image side length in pixels");
  g->add_option("--min-card", gen.min_card, "Minimum shapes per scene");
  g->add_option("--max-card", gen.max_card, "Maximum shapes per scene");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  std::string config_file;
  t->add_option("--config", config_file, "key = value settings file (flags override it)")->check(CLI::ExistingFile);
  add_data_options(t, tr.data);
  t->add_option("--out", tr.out, "Checkpoint path, rewritten every epoch");
  t->add_option("--log", tr.log, "Per-epoch CSV log path");
  t->add_option("--epochs", tr.run.epochs, "Training epochs");
  t->add_option("--batch", tr.run.batch, "Mini-batch size");
  t->add_option("--lr", tr.run.optimizer.lr, "Step size");
  t->add_option("--beta1", tr.run.optimizer.beta1, "First-moment decay");
  t->add_option("--beta2", tr.run.optimizer.beta2, "Second-moment decay");
  t->add_option("--adam-eps", tr.run.optimizer.eps, "Optimizer epsilon");
  t->add_option("--optimizer", tr.optimizer, "adam or sgd");
  t->add_option("--seed", tr.run.seed, "Initialization and shuffling seed");
  t->add_option("--steps", tr.run.steps, "Decoder steps T (0: max label count)");
  t->add_option("--hidden", tr.run.hidden, "LSTM hidden size");
  t->add_option("--embed", tr.run.embed, "Label embedding size");
  t->add_option("--attn-hidden", tr.run.attn_hidden, "Local attention MLP width");
  t->add_option("--lambda1", tr.run.loss.lambda1, "Horizontal margin weight");
  t->add_option("--lambda2", tr.run.loss.lambda2, "Vertical margin weight");
  t->add_option("--margin", tr.run.loss.margin, "Horizontal margin");
  t->add_option("--vmargin", tr.run.loss.vertical_margin, "Vertical margin");
  t->add_flag("--no-local", tr.no_local, "Disable local attention");
  t->add_flag("--no-global", tr.no_global, "Disable global attention");
  t->add_flag("--no-mm", tr.no_mm, "Disable the margin terms");
  t->add_flag("--use-fc", tr.run.use_fc, "Feed the global feature vector to the first decoder step");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Report multi-label metrics for a checkpoint");
  add_data_options(e, ev.data);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
  e->add_option("--k", ev.ks, "Cutoffs for @k metrics (repeatable)")->check(CLI::PositiveNumber);
  e->add_option("--csv", ev.csv, "Also write the report as CSV");

  VisualizeArgs vz;
  auto* v = app.add_subcommand("visualize", "Write attention heatmaps for one image");
  v->add_option("--checkpoint", vz.checkpoint, "Checkpoint path")->required();
  v->add_option("--image", vz.image, "Input PPM image")->required();
  v->add_option("--out", vz.out, "Output directory")->required();
  v->add_option("--factor", vz.factor, "Upsampling factor");
  v->add_option("--sigma", vz.sigma, "Gaussian sigma in pixels (default factor/2)");
  v->add_flag("!--no-overlay", vz.overlay, "Skip the PPM overlays");

  ExtractArgs ex;
  auto* x = app.add_subcommand("extract", "Encode a scene directory into a feature file");
  x->add_option("--checkpoint", ex.checkpoint, "Checkpoint with an encoder")->required();
  x->add_option("--data", ex.data, "Scene directory")->required();
  x->add_option("--out", ex.out, "Feature file to write")->required();
  x->add_option("--classes", ex.classes, "Class count")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> args = expand_train_config(std::vector<std::string>(argv, argv + argc));
    args.erase(args.begin());
    std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed argument list
    app.parse(args);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*e) return run_evaluate(ev);
    if (*v) return run_visualize(vz);
    if (*x) return run_extract(ex);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "usage error: %s\n", err.what());
    return kUsage;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kRuntime;
  }
  return kUsage;
}
