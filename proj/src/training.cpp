#include "patchrot/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace patchrot {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string format_float(double v, const char* fmt = "%.9g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot create " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::IOFailure, "write failed for " + path.string());
}

int count_correct(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return correct;
}

// Runs one optimization step and returns the batch loss; rethrows numeric
// failures as NonFiniteLoss with the batch location.
template <typename Forward>
float train_step(std::span<Parameter* const> params, const SgdOptions& opt, std::span<const int> labels,
                 int epoch, std::size_t batch, Forward&& forward, int* correct) {
  for (Parameter* p : params) p->zero_grad();
  try {
    Tape tape;
    const Var logits = forward(tape);
    const Var loss = softmax_cross_entropy(logits, labels);
    const float value = loss.value()[0];
    if (!std::isfinite(value)) throw Error(ErrorKind::NonFiniteValue, "loss");
    tape.backward(loss);
    *correct += count_correct(logits.value(), labels);
    sgd_step(params, opt);
    return value;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NonFiniteValue) throw;
    throw Error(ErrorKind::NonFiniteLoss, "epoch " + std::to_string(epoch) + ", batch " +
                                              std::to_string(batch) + ": " + e.what());
  }
}

void validate_config(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw Error(ErrorKind::InvalidConfig, "epochs must be >= 0");
  if (cfg.batch_size < 1) throw Error(ErrorKind::InvalidConfig, "batch size must be >= 1");
  if (!(cfg.lr > 0.0f)) throw Error(ErrorKind::InvalidConfig, "learning rate must be positive");
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).split({0x7368756666ULL, static_cast<std::uint64_t>(epoch)});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Tensor gather_rows(const Tensor& features, std::span<const std::size_t> rows) {
  const int width = features.dim(1);
  Tensor out(Shape{static_cast<int>(rows.size()), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.matrix().row(static_cast<Eigen::Index>(i)) =
        features.matrix().row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

Tensor gather_images(const LabeledDataset& data, std::span<const std::size_t> rows) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(rows.size());
  for (const std::size_t r : rows) ptrs.push_back(&data.images[r]);
  return stack_images(std::span<const Image* const>(ptrs));
}

void check_labeled(const LabeledDataset& data, const char* which) {
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, std::string(which) + " split is empty");
  if (data.labels.size() != data.images.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(which) + " split has mismatched labels");
  }
}

int infer_classes(const LabeledDataset& train, const LabeledDataset& test) {
  int classes = std::max(train.num_classes, test.num_classes);
  for (const int y : train.labels) classes = std::max(classes, y + 1);
  for (const int y : test.labels) classes = std::max(classes, y + 1);
  if (classes < 2) throw Error(ErrorKind::InvalidConfig, "downstream task needs >= 2 classes");
  return classes;
}

}  // namespace

std::string_view to_string(Phase p) noexcept {
  switch (p) {
    case Phase::SSL: return "ssl";
    case Phase::LinearEval: return "linear-eval";
    case Phase::Finetune: return "finetune";
  }
  return "?";
}

float LrSchedule::rate(float base, int epoch, int total_epochs) const {
  if (kind == Kind::Constant) return base;
  double lr = base;
  for (const double m : milestones) {
    if (epoch >= static_cast<int>(std::lround(m * total_epochs))) lr *= factor;
  }
  return static_cast<float>(lr);
}

std::string LrSchedule::to_string() const {
  if (kind == Kind::Constant) return "constant";
  std::string s = "step:";
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i) s += ",";
    s += format_float(milestones[i], "%g");
  }
  return s + ":" + format_float(factor, "%g");
}

LrSchedule LrSchedule::parse(std::string_view text) {
  if (text == "constant") return constant();
  if (!text.starts_with("step:")) {
    throw Error(ErrorKind::InvalidConfig, "unknown lr schedule '" + std::string(text) + "'");
  }
  const std::string body(text.substr(5));
  const auto colon = body.rfind(':');
  if (colon == std::string::npos) {
    throw Error(ErrorKind::InvalidConfig, "step schedule needs 'step:<m1>,<m2>:<factor>'");
  }
  LrSchedule s;
  s.kind = Kind::StepDecay;
  try {
    s.factor = std::stod(body.substr(colon + 1));
    std::stringstream list(body.substr(0, colon));
    std::string item;
    while (std::getline(list, item, ',')) {
      if (!item.empty()) s.milestones.push_back(std::stod(item));
    }
  } catch (const std::exception&) {
    throw Error(ErrorKind::InvalidConfig, "malformed lr schedule '" + std::string(text) + "'");
  }
  return s;
}

TrainConfig TrainConfig::defaults(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  switch (phase) {
    case Phase::SSL:
      c.epochs = 200;
      c.batch_size = 64;
      c.lr = 0.1f;
      c.schedule = LrSchedule::step({0.6, 0.8}, 0.2);
      break;
    case Phase::LinearEval:
      c.epochs = 100;
      c.batch_size = 32;
      c.lr = 0.01f;
      c.schedule = LrSchedule::constant();
      break;
    case Phase::Finetune:
      c.epochs = 20;
      c.batch_size = 32;
      c.lr = 0.001f;
      c.schedule = LrSchedule::constant();
      break;
  }
  return c;
}

std::string RunMetrics::to_csv() const {
  std::string s = "epoch,loss,acc\n";
  for (const auto& e : epochs) {
    s += std::to_string(e.epoch) + "," + format_float(e.loss) + "," + format_float(e.accuracy) + "\n";
  }
  if (test_accuracy) s += "test,," + format_float(*test_accuracy) + "\n";
  return s;
}

std::string RunMetrics::timing_csv() const {
  std::string s = "epoch,seconds\n";
  for (const auto& e : epochs) s += std::to_string(e.epoch) + "," + format_float(e.seconds, "%.3f") + "\n";
  return s;
}

void RunMetrics::write(const std::filesystem::path& csv_path) const {
  write_text(csv_path, to_csv());
  auto timing = csv_path;
  timing.replace_extension(".timing.csv");
  write_text(timing, timing_csv());
}

// ---------------------------------------------------------------------------

RunMetrics pretrain_ssl(Model& model, std::span<const Image> unlabeled, Variant variant,
                        const TrainConfig& cfg, const PretextConfig& pretext,
                        const EpochCallback& on_epoch) {
  validate_config(cfg);
  if (unlabeled.empty()) throw Error(ErrorKind::EmptyDataset, "no unlabeled images");
  if (model.head_kind() != head_for(variant)) {
    throw Error(ErrorKind::InvalidConfig, "model head does not match variant " +
                                              std::string(to_string(variant)));
  }
  RunMetrics metrics;
  metrics.phase = Phase::SSL;
  auto params = model.parameters();
  double best = -1.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const SgdOptions opt{cfg.schedule.rate(cfg.lr, epoch, cfg.epochs), cfg.momentum, cfg.weight_decay};
    EpochStream stream = build_epoch(unlabeled, variant, pretext, epoch, cfg.batch_size);
    double loss_sum = 0.0;
    int correct = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < stream.batch_count(); ++b) {
      const PretextBatch batch = stream.batch(b);
      const float loss = train_step(params, opt, batch.labels, epoch, b,
                                    [&](Tape& tape) {
                                      if (variant == Variant::PatchRelNet) {
                                        return model.logits(tape, tape.constant(batch.inputs),
                                                            tape.constant(batch.partner), true);
                                      }
                                      return model.logits(tape, tape.constant(batch.inputs), true);
                                    },
                                    &correct);
      loss_sum += static_cast<double>(loss) * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen),
                    static_cast<double>(correct) / static_cast<double>(seen), seconds_since(start)};
    metrics.epochs.push_back(rec);
    if (cfg.checkpoint_dir) {
      std::filesystem::create_directories(*cfg.checkpoint_dir);
      const Checkpoint ckpt = model.to_checkpoint();
      save_checkpoint(ckpt, *cfg.checkpoint_dir / "last.ckpt");
      if (rec.accuracy > best) {
        best = rec.accuracy;
        save_checkpoint(ckpt, *cfg.checkpoint_dir / "best.ckpt");
      }
    }
    if (on_epoch) on_epoch(rec);
    if (cfg.stop_at_accuracy && rec.accuracy >= *cfg.stop_at_accuracy) break;
  }
  return metrics;
}

PretrainResult pretrain_ssl(std::span<const Image> unlabeled, Variant variant,
                            const EncoderSpec& encoder, const TrainConfig& cfg,
                            const PretextConfig& pretext, const EpochCallback& on_epoch) {
  if (unlabeled.empty()) throw Error(ErrorKind::EmptyDataset, "no unlabeled images");
  PretrainResult result{Model(encoder, head_for(variant), cfg.seed), {}};
  result.metrics = pretrain_ssl(result.model, unlabeled, variant, cfg, pretext, on_epoch);
  return result;
}

PretextScore evaluate_pretext(const Model& model, std::span<const Image> images, Variant variant,
                              const PretextConfig& pretext, int epoch, int batch_size) {
  EpochStream stream = build_epoch(images, variant, pretext, epoch, batch_size);
  PretextScore score;
  double loss_sum = 0.0;
  int correct = 0;
  for (std::size_t b = 0; b < stream.batch_count(); ++b) {
    const PretextBatch batch = stream.batch(b);
    const Tensor logits = variant == Variant::PatchRelNet
                              ? classify_rel(model, batch.inputs, batch.partner)
                              : (variant == Variant::PatchRotNet ? classify_patchrot(model, batch.inputs)
                                                                 : classify_rotnet(model, batch.inputs));
    Tape tape;
    const Var loss = softmax_cross_entropy(tape.constant(logits), batch.labels);
    loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(batch.size());
    correct += count_correct(logits, batch.labels);
    score.samples += batch.size();
  }
  score.accuracy = static_cast<double>(correct) / static_cast<double>(score.samples);
  score.loss = loss_sum / static_cast<double>(score.samples);
  return score;
}

// ---------------------------------------------------------------------------

Tensor embed(const Encoder& encoder, std::span<const Image> images, int batch_size) {
  if (images.empty()) throw Error(ErrorKind::EmptyDataset, "nothing to embed");
  Tensor out(Shape{static_cast<int>(images.size()), kLatentDim});
  for (std::size_t begin = 0; begin < images.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(images.size(), begin + static_cast<std::size_t>(batch_size));
    const Tensor f = encode(encoder, stack_images(images.subspan(begin, end - begin)));
    out.matrix().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        f.matrix();
  }
  return out;
}

DownstreamResult linear_eval(const Encoder& pretrained, const LabeledDataset& train,
                             const LabeledDataset& test, const TrainConfig& cfg,
                             const EpochCallback& on_epoch) {
  validate_config(cfg);
  check_labeled(train, "train");
  check_labeled(test, "test");
  const int classes = infer_classes(train, test);

  DownstreamResult result{DownstreamModel(pretrained, cfg.hidden, classes, cfg.seed), {}};
  DownstreamModel& model = result.model;
  std::vector<Parameter*> frozen;
  model.encoder().collect(frozen);
  for (Parameter* p : frozen) p->trainable = false;

  const Tensor features = embed(model.encoder(), train.images);
  auto params = model.head_parameters();
  result.metrics.phase = Phase::LinearEval;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const SgdOptions opt{cfg.schedule.rate(cfg.lr, epoch, cfg.epochs), cfg.momentum, cfg.weight_decay};
    const auto order = shuffled_indices(train.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    int correct = 0;
    std::size_t b = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size), ++b) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      std::vector<int> labels;
      for (const std::size_t r : rows) labels.push_back(train.labels[r]);
      const Tensor x = gather_rows(features, rows);
      const float loss = train_step(params, opt, labels, epoch, b,
                                    [&](Tape& tape) { return model.head_forward(tape, tape.constant(x)); },
                                    &correct);
      loss_sum += static_cast<double>(loss) * static_cast<double>(rows.size());
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()),
                    static_cast<double>(correct) / static_cast<double>(train.size()), seconds_since(start)};
    result.metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.metrics.test_accuracy = evaluate(model, test);
  return result;
}

DownstreamResult finetune(const Encoder& pretrained, const LabeledDataset& train,
                          const LabeledDataset& test, const TrainConfig& cfg,
                          const EpochCallback& on_epoch) {
  validate_config(cfg);
  check_labeled(train, "train");
  check_labeled(test, "test");
  const int classes = infer_classes(train, test);

  DownstreamResult result{DownstreamModel(pretrained, cfg.hidden, classes, cfg.seed), {}};
  DownstreamModel& model = result.model;
  auto params = model.parameters();
  for (Parameter* p : params) p->trainable = true;
  result.metrics.phase = Phase::Finetune;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const SgdOptions opt{cfg.schedule.rate(cfg.lr, epoch, cfg.epochs), cfg.momentum, cfg.weight_decay};
    const auto order = shuffled_indices(train.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    int correct = 0;
    std::size_t b = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size), ++b) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      std::vector<int> labels;
      for (const std::size_t r : rows) labels.push_back(train.labels[r]);
      const Tensor x = gather_images(train, rows);
      // BatchNorm needs more than one value per channel in train mode.
      const bool train_bn = x.dim(0) * x.dim(2) * x.dim(3) > 1;
      const float loss = train_step(params, opt, labels, epoch, b,
                                    [&](Tape& tape) { return model.forward(tape, tape.constant(x), train_bn); },
                                    &correct);
      loss_sum += static_cast<double>(loss) * static_cast<double>(rows.size());
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()),
                    static_cast<double>(correct) / static_cast<double>(train.size()), seconds_since(start)};
    result.metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.metrics.test_accuracy = evaluate(model, test);
  return result;
}

double evaluate(const DownstreamModel& model, const LabeledDataset& test, int batch_size) {
  if (test.empty()) throw Error(ErrorKind::EmptyTestSet, "cannot score an empty test set");
  if (test.labels.size() != test.images.size()) {
    throw Error(ErrorKind::ShapeMismatch, "test split has mismatched labels");
  }
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < test.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(test.size(), begin + static_cast<std::size_t>(batch_size));
    const Tensor logits =
        model.predict(stack_images(std::span<const Image>(test.images).subspan(begin, end - begin)));
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[begin + i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::string embeddings_csv(const Encoder& encoder, const LabeledDataset& data) {
  const Tensor latents = embed(encoder, data.images);
  std::string out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    out += std::to_string(data.labels[i]);
    for (int j = 0; j < kLatentDim; ++j) {
      out += ",";
      out += format_float(latents[i * kLatentDim + static_cast<std::size_t>(j)]);
    }
    out += "\n";
  }
  return out;
}

void export_embeddings(const Encoder& encoder, const LabeledDataset& data,
                       const std::filesystem::path& path) {
  write_text(path, embeddings_csv(encoder, data));
}

}  // namespace patchrot
