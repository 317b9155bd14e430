#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchrot/datasets.hpp"
#include "patchrot/models.hpp"
#include "patchrot/pretext.hpp"

namespace patchrot {

enum class Phase { SSL, LinearEval, Finetune };

std::string_view to_string(Phase p) noexcept;

struct LrSchedule {
  enum class Kind { Constant, StepDecay };
  Kind kind = Kind::Constant;
  /// Fractions of the total epoch count at which the rate is multiplied by `factor`.
  std::vector<double> milestones;
  double factor = 1.0;

  float rate(float base, int epoch, int total_epochs) const;
  /// "constant" or "step:0.6,0.8:0.2".
  std::string to_string() const;
  static LrSchedule parse(std::string_view text);
  static LrSchedule constant() { return {}; }
  static LrSchedule step(std::vector<double> milestones, double factor) {
    return {Kind::StepDecay, std::move(milestones), factor};
  }
};

struct TrainConfig {
  Phase phase = Phase::SSL;
  int epochs = 200;
  int batch_size = 64;
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  LrSchedule schedule;
  std::uint64_t seed = 0;
  /// Hidden width of the two-layer downstream classifier.
  int hidden = 128;
  /// When set, best-by-accuracy and last checkpoints are written here.
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Pretext training only: stop after the first epoch whose training
  /// accuracy reaches this value; the learning-rate schedule still spans `epochs`.
  std::optional<double> stop_at_accuracy;

  /// SSL: 200 epochs, batch 64, lr 0.1 with x0.2 steps at 60%/80%.
  /// LinearEval: 100 epochs, batch 32, lr 0.01. Finetune: 20 epochs, batch 32, lr 0.001.
  static TrainConfig defaults(Phase phase);
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double seconds = 0.0;
};

struct RunMetrics {
  Phase phase = Phase::SSL;
  std::vector<EpochRecord> epochs;
  std::optional<double> test_accuracy;

  /// Deterministic columns: epoch,loss,acc. Test accuracy, when present, is a final
  /// row with epoch "test".
  std::string to_csv() const;
  /// Wall-clock sidecar: epoch,seconds.
  std::string timing_csv() const;
  void write(const std::filesystem::path& csv_path) const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct PretrainResult {
  Model model;
  RunMetrics metrics;
};

/// Minimizes the mean cross-entropy over every (image, pretext class) pair.
PretrainResult pretrain_ssl(std::span<const Image> unlabeled, Variant variant,
                            const EncoderSpec& encoder, const TrainConfig& cfg,
                            const PretextConfig& pretext, const EpochCallback& on_epoch = {});

/// Same, continuing from an existing model (its head must match the variant).
RunMetrics pretrain_ssl(Model& model, std::span<const Image> unlabeled, Variant variant,
                        const TrainConfig& cfg, const PretextConfig& pretext,
                        const EpochCallback& on_epoch = {});

struct PretextScore {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
};

/// Eval-mode pretext accuracy and mean loss over one generated epoch.
PretextScore evaluate_pretext(const Model& model, std::span<const Image> images, Variant variant,
                              const PretextConfig& pretext, int epoch, int batch_size = 64);

struct DownstreamResult {
  DownstreamModel model;
  RunMetrics metrics;
};

/// Frozen encoder (eval-mode BN), two-layer head trained on the train split,
/// accuracy reported on the test split.
DownstreamResult linear_eval(const Encoder& pretrained, const LabeledDataset& train,
                             const LabeledDataset& test, const TrainConfig& cfg,
                             const EpochCallback& on_epoch = {});

/// Encoder and a fresh two-layer head trained jointly.
DownstreamResult finetune(const Encoder& pretrained, const LabeledDataset& train,
                          const LabeledDataset& test, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});

/// Top-1 accuracy in dataset order. Throws EmptyTestSet on an empty set.
double evaluate(const DownstreamModel& model, const LabeledDataset& test, int batch_size = 64);

/// Eval-mode latents for every image, in dataset order (N x 64).
Tensor embed(const Encoder& encoder, std::span<const Image> images, int batch_size = 64);

/// CSV rows "label,f0,...,f63" with round-trip float precision.
void export_embeddings(const Encoder& encoder, const LabeledDataset& data,
                       const std::filesystem::path& path);
std::string embeddings_csv(const Encoder& encoder, const LabeledDataset& data);

}  // namespace patchrot
