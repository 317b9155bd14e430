// patchrot: command-line front end for the pretext pipeline.
//
// Every subcommand resolves one flat key=value config (defaults < --config file
// < flags), prints it as a header and writes it next to its artifacts, so a run
// can be replayed with `--config <out>/<command>.config.txt`.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "patchrot/config.hpp"
#include "patchrot/datasets.hpp"
#include "patchrot/error.hpp"
#include "patchrot/models.hpp"
#include "patchrot/pretext.hpp"
#include "patchrot/training.hpp"

using namespace patchrot;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitInternal = 1;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::PatchTooLarge:
    case ErrorKind::InvalidClass:
      return kExitUsage;
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::NonFiniteValue:
      return kExitNumeric;
    case ErrorKind::NotScalar:
    case ErrorKind::TapeConsumed:
      return kExitInternal;
    default:
      return kExitData;
  }
}

struct FlagSpec {
  const char* flag;
  const char* key;
  const char* help;
};

// Flags shared by every subcommand; each one overrides a config key.
constexpr FlagSpec kSharedFlags[] = {
    {"--seed", "seed", "training and placement seed"},
    {"--ratio", "ratio", "patch side as a fraction of the image side"},
    {"--variant", "variant", "rotnet | patch-rotnet | patch-relnet"},
    {"--encoder", "encoder", "resnet8 | resnet32"},
    {"--epochs", "epochs", "training epochs"},
    {"--batch-size", "batch_size", "mini-batch size"},
    {"--data", "data", "synthetic | cifar | ppm-dir"},
    {"--train", "train_path", "train split: CIFAR batch file(s), comma separated, or a PPM directory"},
    {"--test", "test_path", "test split, same forms as --train"},
    {"--count", "synthetic_count", "synthetic train images"},
    {"--test-count", "synthetic_test_count", "synthetic test images"},
    {"--size", "image_size", "synthetic image side"},
    {"--data-seed", "data_seed", "synthetic dataset seed"},
    {"--limit", "limit", "keep only the first N images of each split"},
    {"--out", "out_dir", "output directory"},
    {"--checkpoint", "checkpoint", "checkpoint to load"},
};

struct Command {
  std::string name;
  Phase phase = Phase::SSL;
  CLI::App* app = nullptr;
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::vector<std::pair<CLI::Option*, std::string>> options;

  void add(const char* flag, const char* key, const char* help) {
    options.emplace_back(app->add_option(flag, values[key], help), key);
  }
};

Config resolve(const Command& cmd) {
  Config cfg;
  if (!cmd.config_path.empty()) cfg = Config::load(cmd.config_path);
  for (const auto& [opt, key] : cmd.options) {
    if (opt->count() > 0) cfg.set(key, cmd.values.at(key));
  }
  for (const auto& kv : cmd.sets) {
    cfg.merge(Config::parse(kv));
  }
  cfg.set_default("data", "synthetic");
  cfg.set_default("synthetic_count", "256");
  cfg.set_default("synthetic_test_count", "256");
  cfg.set_default("image_size", "32");
  cfg.set_default("data_seed", "0");
  cfg.set_default("variant", "patch-rotnet");
  cfg.set_default("encoder", "resnet8");
  cfg.set_default("ratio", "0.4");
  cfg.set_default("out_dir", "runs/" + cmd.name);
  apply_phase_defaults(cfg, cmd.phase);
  return cfg;
}

std::vector<std::string> split_paths(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

LabeledDataset load_split(const Config& cfg, bool test) {
  const std::string kind = cfg.get_string("data");
  LabeledDataset out;
  if (kind == "synthetic") {
    const auto n = cfg.get_int(test ? "synthetic_test_count" : "synthetic_count");
    if (n <= 0) throw Error(ErrorKind::InvalidConfig, "synthetic image count must be positive");
    // Train and test draw from disjoint seeds.
    const auto seed = static_cast<std::uint64_t>(cfg.get_int("data_seed")) * 2 + (test ? 1 : 0);
    out = make_synthetic_shapes(static_cast<std::size_t>(n), static_cast<int>(cfg.get_int("image_size")), seed);
  } else {
    const char* key = test ? "test_path" : "train_path";
    if (!cfg.has(key)) throw Error(ErrorKind::InvalidConfig, std::string("data=") + kind + " needs " + key);
    if (kind == "cifar") {
      for (const auto& path : split_paths(cfg.get_string(key))) {
        LabeledDataset part = load_cifar_binary(path);
        out.num_classes = part.num_classes;
        for (std::size_t i = 0; i < part.size(); ++i) {
          out.images.push_back(std::move(part.images[i]));
          out.labels.push_back(part.labels[i]);
        }
      }
    } else if (kind == "ppm-dir") {
      out = load_ppm_directory(cfg.get_string(key));
    } else {
      throw Error(ErrorKind::InvalidConfig, "unknown data source '" + kind + "'");
    }
  }
  if (cfg.has("limit")) {
    const auto limit = static_cast<std::size_t>(cfg.get_int("limit"));
    if (out.size() > limit) {
      out.images.resize(limit);
      out.labels.resize(limit);
    }
  }
  if (out.empty()) throw Error(ErrorKind::EmptyDataset, std::string(test ? "test" : "train") + " split is empty");
  return out;
}

fs::path out_dir(const Config& cfg) {
  const fs::path dir = cfg.get_string("out_dir");
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot create " + path.string());
  out << text;
}

void announce(const Command& cmd, const Config& cfg) {
  std::cout << "# patchrot " << cmd.name << "\n" << cfg.render() << std::flush;
  write_text(out_dir(cfg) / (cmd.name + ".config.txt"), "# patchrot " + cmd.name + "\n" + cfg.render());
}

EpochCallback progress() {
  return [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %d  loss %.6f  acc %.4f  (%.1fs)\n", r.epoch + 1, r.loss, r.accuracy, r.seconds);
  };
}

// Loaded pretrained encoder, or a seeded random one when no checkpoint is given.
Encoder pretrained_encoder(const Config& cfg) {
  const EncoderSpec spec = encoder_spec_from(cfg);
  Model fresh(spec, HeadKind::PatchRot8, static_cast<std::uint64_t>(cfg.get_int("seed")));
  Encoder enc = fresh.encoder();
  if (cfg.has("checkpoint")) {
    load_encoder(enc, load_checkpoint(cfg.get_string("checkpoint")));
  } else {
    std::cerr << "note: no --checkpoint, using a randomly initialised encoder\n";
  }
  return enc;
}

Model pretext_model(const Config& cfg) {
  if (!cfg.has("checkpoint")) throw Error(ErrorKind::InvalidConfig, "--checkpoint is required");
  Model model(encoder_spec_from(cfg), head_for(parse_variant(cfg.get_string("variant"))), 0);
  model.load(load_checkpoint(cfg.get_string("checkpoint")));
  return model;
}

void set_channels(Config& cfg, const LabeledDataset& data) {
  cfg.set_default("input_channels", std::to_string(data.images.front().channels()));
}

std::string placement_fields(const std::optional<Placement>& p) {
  if (!p) return "- - - -";
  return std::to_string(p->top) + " " + std::to_string(p->left) + " " + std::to_string(p->height) + " " +
         std::to_string(p->width);
}

// ---------------------------------------------------------------------------

int run_generate(const Command& cmd) {
  Config cfg = resolve(cmd);
  const LabeledDataset data = load_split(cfg, false);
  announce(cmd, cfg);
  const Variant variant = parse_variant(cfg.get_string("variant"));
  const PretextConfig pcfg = pretext_config_from(cfg);
  const fs::path dir = out_dir(cfg);
  fs::create_directories(dir / "samples");

  std::string manifest = "# path label variant top left height width\n";
  const std::string vname(to_string(variant));
  char stem[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Image& x = data.images[i];
    Rng rng = image_stream(pcfg, 0, i);
    if (variant == Variant::PatchRelNet) {
      for (const PretextPair& p : generate_pairs(x, pcfg, rng)) {
        std::snprintf(stem, sizeof stem, "samples/img%05zu_l%d", i, p.label);
        const std::string a = std::string(stem) + "_a.ppm";
        const std::string b = std::string(stem) + "_b.ppm";
        write_ppm(p.image_a, dir / a);
        write_ppm(p.image_b, dir / b);
        manifest += a + "," + b + " " + std::to_string(p.label) + " " + vname + " " + placement_fields(p.patch) + "\n";
      }
    } else {
      const auto samples = variant == Variant::RotNet ? generate_rotnet_set(x) : generate_patched_set(x, pcfg, rng);
      for (const PretextSample& s : samples) {
        std::snprintf(stem, sizeof stem, "samples/img%05zu_l%d.ppm", i, s.label);
        write_ppm(s.image, dir / stem);
        manifest += std::string(stem) + " " + std::to_string(s.label) + " " + vname + " " + placement_fields(s.patch) + "\n";
      }
    }
  }
  write_text(dir / "manifest.txt", manifest);
  std::cout << "wrote " << (dir / "manifest.txt").string() << "\n";
  return 0;
}

int run_pretrain(const Command& cmd) {
  Config cfg = resolve(cmd);
  const LabeledDataset data = load_split(cfg, false);
  set_channels(cfg, data);
  announce(cmd, cfg);
  const Variant variant = parse_variant(cfg.get_string("variant"));
  TrainConfig tc = train_config_from(cfg, Phase::SSL);
  const fs::path dir = out_dir(cfg);
  tc.checkpoint_dir = dir;
  const PretrainResult res = pretrain_ssl(data.images, variant, encoder_spec_from(cfg), tc,
                                          pretext_config_from(cfg), progress());
  res.metrics.write(dir / "pretrain.csv");
  save_checkpoint(res.model.to_checkpoint(), dir / "model.ckpt");
  std::cout << "final pretext accuracy " << res.metrics.epochs.back().accuracy << "\n"
            << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int run_downstream(const Command& cmd) {
  Config cfg = resolve(cmd);
  const LabeledDataset train = load_split(cfg, false);
  const LabeledDataset test = load_split(cfg, true);
  set_channels(cfg, train);
  announce(cmd, cfg);
  const TrainConfig tc = train_config_from(cfg, cmd.phase);
  const Encoder enc = pretrained_encoder(cfg);
  const DownstreamResult res = cmd.phase == Phase::LinearEval ? linear_eval(enc, train, test, tc, progress())
                                                             : finetune(enc, train, test, tc, progress());
  const fs::path dir = out_dir(cfg);
  const std::string stem = cmd.phase == Phase::LinearEval ? "linear_eval" : "finetune";
  res.metrics.write(dir / (stem + ".csv"));
  save_checkpoint(res.model.to_checkpoint(), dir / (stem + ".ckpt"));
  std::printf("test accuracy %.6f\n", *res.metrics.test_accuracy);
  return 0;
}

int entry_extent(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& e : ckpt.entries) {
    if (e.name == name && e.tensor.rank() == 1) return e.tensor.dim(0);
  }
  throw Error(ErrorKind::CheckpointMismatch, "checkpoint has no '" + name + "' (not a downstream model?)");
}

int run_evaluate(const Command& cmd) {
  Config cfg = resolve(cmd);
  const LabeledDataset test = load_split(cfg, true);
  set_channels(cfg, test);
  announce(cmd, cfg);
  if (!cfg.has("checkpoint")) throw Error(ErrorKind::InvalidConfig, "--checkpoint is required");
  const Checkpoint ckpt = load_checkpoint(cfg.get_string("checkpoint"));
  const int hidden = entry_extent(ckpt, "classifier.fc1.bias");
  const int classes = entry_extent(ckpt, "classifier.fc2.bias");
  Model shell(encoder_spec_from(cfg), HeadKind::PatchRot8, 0);
  DownstreamModel model(shell.encoder(), hidden, classes, 0);
  model.load(ckpt);
  std::printf("test accuracy %.6f\n", evaluate(model, test));
  return 0;
}

int run_gradcam(const Command& cmd) {
  Config cfg = resolve(cmd);
  cfg.set_default("index", "0");
  const Variant variant = parse_variant(cfg.get_string("variant"));
  Image input;
  std::optional<Image> partner;
  std::optional<Placement> where;
  int target = -1;
  int sample_class = -1;
  if (cfg.has("class")) target = static_cast<int>(cfg.get_int("class"));

  if (cfg.has("image")) {
    if (variant == Variant::PatchRelNet) {
      throw Error(ErrorKind::InvalidConfig, "relation models explain generated pairs; use --index");
    }
    input = read_ppm(cfg.get_string("image"));
    cfg.set_default("input_channels", std::to_string(input.channels()));
  } else {
    const LabeledDataset data = load_split(cfg, false);
    set_channels(cfg, data);
    const auto index = static_cast<std::size_t>(cfg.get_int("index"));
    if (index >= data.size()) throw Error(ErrorKind::InvalidConfig, "--index past the end of the split");
    // Explain the pretext sample of the requested class (default: the first patched one).
    const int wanted = target >= 0 ? target : (variant == Variant::PatchRotNet ? 4 : 0);
    if (wanted >= class_count(variant)) throw Error(ErrorKind::InvalidClass, "no such pretext class");
    sample_class = wanted;
    const PretextConfig pcfg = pretext_config_from(cfg);
    Rng rng = image_stream(pcfg, 0, index);
    const Image& x = data.images[index];
    if (variant == Variant::PatchRelNet) {
      const PretextPair p = generate_pairs(x, pcfg, rng)[static_cast<std::size_t>(wanted)];
      input = p.image_b;
      partner = p.image_a;
      where = p.patch;
    } else {
      const auto set = variant == Variant::RotNet ? generate_rotnet_set(x) : generate_patched_set(x, pcfg, rng);
      input = set[static_cast<std::size_t>(wanted)].image;
      where = set[static_cast<std::size_t>(wanted)].patch;
    }
  }
  announce(cmd, cfg);
  const Model model = pretext_model(cfg);

  const Tensor batch = stack_images(std::span<const Image>(&input, 1));
  const Tensor logits = partner ? classify_rel(model, stack_images(std::span<const Image>(&*partner, 1)), batch)
                                : (variant == Variant::RotNet ? classify_rotnet(model, batch)
                                                              : classify_patchrot(model, batch));
  const int predicted = argmax_rows(logits).front();
  if (target < 0) target = predicted;

  GradCamOptions opt;
  opt.upsample_to_input = true;
  if (partner) opt.partner = &*partner;
  const Image heat = gradcam(model, input, target, opt);

  const fs::path dir = out_dir(cfg);
  write_ppm(input, dir / "gradcam_input.ppm");
  write_ppm(heat, dir / "gradcam_heatmap.ppm");
  write_ppm(overlay_heatmap(input, heat), dir / "gradcam_overlay.ppm");
  if (sample_class >= 0) std::cout << "sample class " << sample_class << ", ";
  std::cout << "predicted class " << predicted << ", explained class " << target << "\n";
  if (where) {
    double inside = 0.0, total = 0.0;
    for (int r = 0; r < heat.height(); ++r)
      for (int c = 0; c < heat.width(); ++c) {
        total += heat(r, c, 0);
        if (where->contains(r, c)) inside += heat(r, c, 0);
      }
    std::cout << "patch " << placement_fields(where) << ", heat mass inside patch "
              << (total > 0.0 ? inside / total : 0.0) << "\n";
  }
  return 0;
}

int run_export(const Command& cmd) {
  Config cfg = resolve(cmd);
  cfg.set_default("split", "train");
  const std::string split = cfg.get_string("split");
  if (split != "train" && split != "test") throw Error(ErrorKind::InvalidConfig, "split must be train or test");
  const LabeledDataset data = load_split(cfg, split == "test");
  set_channels(cfg, data);
  announce(cmd, cfg);
  const Encoder enc = pretrained_encoder(cfg);
  const fs::path path = out_dir(cfg) / "embeddings.csv";
  export_embeddings(enc, data, path);
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch rotation pretext tasks: generate, pretrain, evaluate"};
  app.require_subcommand(1);

  std::vector<Command> commands = {
      {"generate", Phase::SSL},        {"pretrain", Phase::SSL},      {"linear-eval", Phase::LinearEval},
      {"finetune", Phase::Finetune},   {"evaluate", Phase::LinearEval}, {"gradcam", Phase::SSL},
      {"export-embeddings", Phase::SSL},
  };
  const std::map<std::string, std::string> about = {
      {"generate", "write pretext samples as PPM files plus a manifest"},
      {"pretrain", "self-supervised pretraining on the train split"},
      {"linear-eval", "train a classifier on a frozen encoder"},
      {"finetune", "train encoder and classifier together"},
      {"evaluate", "score a downstream checkpoint on the test split"},
      {"gradcam", "heatmap for one pretext sample or image"},
      {"export-embeddings", "write encoder latents as CSV"},
  };
  for (Command& cmd : commands) {
    cmd.app = app.add_subcommand(cmd.name, about.at(cmd.name));
    cmd.app->add_option("--config", cmd.config_path, "key=value config file");
    cmd.app->add_option("--set", cmd.sets, "extra key=value override (repeatable)");
    for (const FlagSpec& f : kSharedFlags) cmd.add(f.flag, f.key, f.help);
    if (cmd.name == "gradcam") {
      cmd.add("--index", "index", "train-split image to build the pretext sample from");
      cmd.add("--class", "class", "pretext class to explain (default: the prediction)");
      cmd.add("--image", "image", "explain this PPM instead of a generated sample");
    }
    if (cmd.name == "export-embeddings") cmd.add("--split", "split", "train | test");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    for (const Command& cmd : commands) {
      if (!cmd.app->parsed()) continue;
      if (cmd.name == "generate") return run_generate(cmd);
      if (cmd.name == "pretrain") return run_pretrain(cmd);
      if (cmd.name == "linear-eval" || cmd.name == "finetune") return run_downstream(cmd);
      if (cmd.name == "evaluate") return run_evaluate(cmd);
      if (cmd.name == "gradcam") return run_gradcam(cmd);
      if (cmd.name == "export-embeddings") return run_export(cmd);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}
