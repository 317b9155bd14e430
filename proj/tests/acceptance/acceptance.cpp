// Acceptance runner: checks each criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Exit status is nonzero if any fails.
//
// Usage: acceptance <path to patchrot CLI> [scratch dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "../support/gradcheck_suite.hpp"
#include "../support/image_oracles.hpp"
#include "../support/loss_oracle.hpp"
#include "patchrot/datasets.hpp"
#include "patchrot/error.hpp"
#include "patchrot/image.hpp"
#include "patchrot/models.hpp"
#include "patchrot/pretext.hpp"
#include "patchrot/training.hpp"

using namespace patchrot;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool bit_equal(float a, float b) { return std::memcmp(&a, &b, sizeof a) == 0; }

Image random_image(int h, int w, int ch, Rng& rng) {
  Image img(h, w, ch);
  for (auto& v : img.data()) v = static_cast<float>(rng.uniform01());
  return img;
}

// Central interval of Binomial(n, p) holding at least `level` of the mass, as
// accuracy fractions. Exact tail sums, no normal approximation.
std::pair<double, double> binomial_interval(int n, double p, double level) {
  std::vector<double> pmf(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k) {
    const double log_choose = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    pmf[static_cast<std::size_t>(k)] = std::exp(log_choose + k * std::log(p) + (n - k) * std::log1p(-p));
  }
  const double tail = (1.0 - level) / 2.0;
  int lo = 0;
  for (double mass = 0.0; mass + pmf[static_cast<std::size_t>(lo)] <= tail; ++lo) mass += pmf[static_cast<std::size_t>(lo)];
  int hi = n;
  for (double mass = 0.0; mass + pmf[static_cast<std::size_t>(hi)] <= tail; --hi) mass += pmf[static_cast<std::size_t>(hi)];
  return {static_cast<double>(lo) / n, static_cast<double>(hi) / n};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Shared state: models trained once and reused by later criteria.
struct Shared {
  LabeledDataset glyph_train;
  LabeledDataset glyph_test;
  std::optional<Model> patchrot_model;  // seed 0
  double patchrot_train_acc = 0.0;
  std::optional<DownstreamResult> linear_seed0;
};

constexpr int kGlyphImages = 256;
constexpr int kGlyphSide = 32;
constexpr double kRatio = 0.4;
constexpr int kMaxEpochs = 50;
constexpr double kTargetAccuracy = 0.9;

TrainConfig ssl_config(std::uint64_t seed) {
  TrainConfig cfg = TrainConfig::defaults(Phase::SSL);
  cfg.epochs = kMaxEpochs;
  cfg.seed = seed;
  cfg.stop_at_accuracy = kTargetAccuracy;
  return cfg;
}

PretextConfig glyph_pretext(std::uint64_t seed) {
  PretextConfig p;
  p.ratio = kRatio;
  p.rng_seed = seed;
  return p;
}

double best_accuracy(const RunMetrics& m) {
  double best = 0.0;
  for (const auto& e : m.epochs) best = std::max(best, e.accuracy);
  return best;
}

// ---------------------------------------------------------------------------

Verdict autodiff_oracle() {
  const auto start = Clock::now();
  constexpr int instances = 25;
  double worst = 0.0;
  std::string worst_op;
  bool ok = true;
  const auto suite = testing::gradcheck_suite();
  for (const auto& check : suite) {
    const double err = check.run(instances);
    if (err > worst) {
      worst = err;
      worst_op = check.op;
    }
    ok = ok && err < testing::kGradcheckTolerance;
  }
  const double secs = seconds_since(start);
  ok = ok && secs < 60.0;
  return {ok, fmt("%zu ops x %d instances, worst relative error %.2e (%s), %.2fs", suite.size(), instances,
                  worst, worst_op.c_str(), secs)};
}

Verdict transform_oracles() {
  Rng rng(2024);
  int rotations = 0;
  bool rot_ok = true;
  for (int h = 1; h <= 5; ++h)
    for (int w = 1; w <= 5; ++w)
      for (int ch : {1, 3})
        for (int k = 0; k < 4; ++k) {
          const Image img = random_image(h, w, ch, rng);
          rot_ok = rot_ok && rotate90(img, k) == reference::rotate_by_point_map(img, k);
          ++rotations;
        }

  constexpr int kResizeCases = 200;
  double worst = 0.0;
  for (int i = 0; i < kResizeCases; ++i) {
    const Image img = random_image(static_cast<int>(rng.uniform_int(1, 12)), static_cast<int>(rng.uniform_int(1, 12)),
                                   rng.uniform01() < 0.5 ? 1 : 3, rng);
    const int oh = static_cast<int>(rng.uniform_int(1, 16));
    const int ow = static_cast<int>(rng.uniform_int(1, 16));
    const Image out = bilinear_resize(img, oh, ow);
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c)
        for (int z = 0; z < img.channels(); ++z)
          worst = std::max(worst, std::abs(out(r, c, z) - reference::bilinear_oracle(img, oh, ow, r, c, z)));
  }

  constexpr int kPasteCases = 200;
  bool paste_ok = true;
  for (int i = 0; i < kPasteCases; ++i) {
    const int h = static_cast<int>(rng.uniform_int(1, 16));
    const int w = static_cast<int>(rng.uniform_int(1, 16));
    const Image bg = random_image(h, w, 3, rng);
    const int ph = static_cast<int>(rng.uniform_int(1, h));
    const int pw = static_cast<int>(rng.uniform_int(1, w));
    const Image patch = random_image(ph, pw, 3, rng);
    const int top = static_cast<int>(rng.uniform_int(0, h - ph));
    const int left = static_cast<int>(rng.uniform_int(0, w - pw));
    const Image out = paste(bg, patch, top, left);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int z = 0; z < 3; ++z) {
          const bool inside = r >= top && r < top + ph && c >= left && c < left + pw;
          const float expect = inside ? patch(r - top, c - left, z) : bg(r, c, z);
          paste_ok = paste_ok && bit_equal(out(r, c, z), expect);
        }
  }
  const bool ok = rot_ok && worst <= 1e-6 && paste_ok;
  return {ok, fmt("rotate90 %d/%d shape/turn cases exact; bilinear %d cases, worst |err| %.2e; paste %d cases %s",
                  rot_ok ? rotations : 0, rotations, kResizeCases, worst, kPasteCases,
                  paste_ok ? "bit-identical" : "MISMATCH")};
}

Verdict loss_recomputation() {
  const auto data = make_synthetic_shapes(4, kGlyphSide, 77);
  const PretextConfig pretext = glyph_pretext(5);
  double worst = 0.0;
  std::string parts;
  for (const Variant v : {Variant::PatchRotNet, Variant::PatchRelNet, Variant::RotNet}) {
    TrainConfig cfg = TrainConfig::defaults(Phase::SSL);
    cfg.epochs = 1;
    cfg.seed = 9;
    // One batch holds the whole epoch, so the reported loss is evaluated at the initial weights.
    cfg.batch_size = 4 * class_count(v);
    const Model init(EncoderSpec{}, head_for(v), cfg.seed);
    const auto result = pretrain_ssl(data.images, v, EncoderSpec{}, cfg, pretext);
    const double oracle = reference::pretext_objective(init, data.images, v, pretext, data.size());
    const double err = std::abs(result.metrics.epochs[0].loss - oracle);
    worst = std::max(worst, err);
    parts += fmt("; %s %.8f vs %.8f", std::string(to_string(v)).c_str(), result.metrics.epochs[0].loss, oracle);
  }
  return {worst < 1e-5, fmt("4 images, max |reported - oracle| %.2e", worst) + parts};
}

Verdict chance_baselines(const Shared& s) {
  std::string detail;
  bool ok = true;
  for (const Variant v : {Variant::PatchRotNet, Variant::PatchRelNet}) {
    const Model untrained(EncoderSpec{}, head_for(v), 31);
    const auto score = evaluate_pretext(untrained, s.glyph_train.images, v, glyph_pretext(31), 0);
    const double p = 1.0 / class_count(v);
    const auto [lo, hi] = binomial_interval(static_cast<int>(score.samples), p, 0.99);
    const bool inside = score.samples >= 800 && score.accuracy >= lo && score.accuracy <= hi;
    ok = ok && inside;
    detail += fmt("%s untrained acc %.4f on %zu samples, 99%% interval [%.4f, %.4f]; ",
                  std::string(to_string(v)).c_str(), score.accuracy, score.samples, lo, hi);
  }
  for (const Variant v : {Variant::PatchRotNet, Variant::PatchRelNet}) {
    Model m(EncoderSpec{}, head_for(v), 32);
    m.head().weight.value.vec().setZero();
    m.head().bias.value.vec().setZero();
    const auto score = evaluate_pretext(m, std::span<const Image>(s.glyph_train.images).first(16), v,
                                        glyph_pretext(32), 0);
    const double expect = std::log(static_cast<double>(class_count(v)));
    ok = ok && std::abs(score.loss - expect) < 1e-4;
    detail += fmt("uniform-logit loss %.6f vs ln %d = %.6f; ", score.loss, class_count(v), expect);
  }
  detail.resize(detail.size() - 2);  // trailing "; "
  return {ok, detail};
}

Verdict learnability(Shared& s) {
  std::string detail;
  bool ok = true;
  double total = 0.0;
  for (const Variant v : {Variant::PatchRotNet, Variant::PatchRelNet}) {
    const auto start = Clock::now();
    auto result = pretrain_ssl(s.glyph_train.images, v, EncoderSpec{}, ssl_config(0), glyph_pretext(0));
    const double secs = seconds_since(start);
    total += secs;
    const double acc = best_accuracy(result.metrics);
    ok = ok && acc >= kTargetAccuracy && result.metrics.epochs.size() <= kMaxEpochs;
    detail += fmt("%s train acc %.4f after %zu epochs (%.0fs); ", std::string(to_string(v)).c_str(), acc,
                  result.metrics.epochs.size(), secs);
    if (v == Variant::PatchRotNet) {
      s.patchrot_model = std::move(result.model);
      s.patchrot_train_acc = acc;
    }
  }
  detail += fmt("total %.0fs (target < 900s)", total);
  return {ok, detail};
}

Verdict downstream_signal(Shared& s) {
  double gap_sum = 0.0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Model pretrained = seed == 0 && s.patchrot_model
                           ? *s.patchrot_model
                           : pretrain_ssl(s.glyph_train.images, Variant::PatchRotNet, EncoderSpec{},
                                          ssl_config(seed), glyph_pretext(seed))
                                 .model;
    TrainConfig cfg = TrainConfig::defaults(Phase::LinearEval);
    cfg.seed = seed;
    auto from_pretext = linear_eval(pretrained.encoder(), s.glyph_train, s.glyph_test, cfg);
    const Model random(EncoderSpec{}, HeadKind::PatchRot8, seed);
    const auto from_random = linear_eval(random.encoder(), s.glyph_train, s.glyph_test, cfg);
    const double gap = *from_pretext.metrics.test_accuracy - *from_random.metrics.test_accuracy;
    gap_sum += gap;
    detail += fmt("seed %d: %.4f vs %.4f; ", static_cast<int>(seed), *from_pretext.metrics.test_accuracy,
                  *from_random.metrics.test_accuracy);
    if (seed == 0) s.linear_seed0 = std::move(from_pretext);
  }
  const double mean_gap = gap_sum / 3.0;
  return {mean_gap >= 0.10, detail + fmt("mean gap %.1f points (need >= 10)", 100.0 * mean_gap)};
}

Verdict determinism(const std::string& cli, const fs::path& scratch) {
  const char* steps[] = {
      "pretrain --seed 7 --count 64 --epochs 3 --out run",
      "linear-eval --seed 7 --count 64 --test-count 64 --epochs 20 --checkpoint run/model.ckpt --out run",
  };
  std::vector<fs::path> roots;
  for (const char* name : {"first", "second"}) {
    const fs::path root = scratch / "determinism" / name;
    fs::remove_all(root);
    fs::create_directories(root);
    for (const char* step : steps) {
      const std::string cmd = "cd \"" + root.string() + "\" && \"" + cli + "\" " + step + " > log.txt 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, std::string("command failed: ") + step};
    }
    roots.push_back(root / "run");
  }
  int compared = 0;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(roots[0])) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::string mismatched;
  bool saw_ckpt = false;
  bool saw_csv = false;
  for (const auto& name : names) {
    if (name.find(".timing.") != std::string::npos) continue;  // wall-clock sidecars
    ++compared;
    saw_ckpt = saw_ckpt || name.ends_with(".ckpt");
    saw_csv = saw_csv || name.ends_with(".csv");
    if (read_file(roots[0] / name) != read_file(roots[1] / name)) mismatched += " " + name;
  }
  const bool ok = mismatched.empty() && saw_ckpt && saw_csv;
  return {ok, fmt("%d artifacts compared byte for byte across two CLI runs", compared) +
                  (mismatched.empty() ? std::string() : "; differing:" + mismatched)};
}

Verdict gradcam_contract(const Shared& s) {
  if (!s.patchrot_model) return {false, "no pretrained model"};
  const Model& model = *s.patchrot_model;
  const PretextConfig pretext = glyph_pretext(0);
  const auto eval = evaluate_pretext(model, s.glyph_train.images, Variant::PatchRotNet, pretext, 0);
  bool ranges_ok = true;
  double mass_sum = 0.0;
  double baseline_sum = 0.0;
  int samples = 0;
  for (std::size_t i = 0; i < s.glyph_train.size() && samples < 200; ++i) {
    Rng rng = image_stream(pretext, 0, i);
    const auto set = generate_patched_set(s.glyph_train.images[i], pretext, rng);
    for (int label = 4; label < 8; ++label) {
      const PretextSample& sample = set[static_cast<std::size_t>(label)];
      const Tensor logits = classify_patchrot(model, stack_images(std::span<const Image>(&sample.image, 1)));
      const int pred = argmax_rows(logits).front();
      const Image native = gradcam(model, sample.image, pred);
      GradCamOptions up;
      up.upsample_to_input = true;
      const Image heat = gradcam(model, sample.image, pred, up);
      ranges_ok = ranges_ok && native.height() == kGlyphSide / 4 && native.width() == kGlyphSide / 4 &&
                  heat.height() == kGlyphSide && heat.width() == kGlyphSide && heat.channels() == 1;
      for (const float v : heat.data()) ranges_ok = ranges_ok && v >= 0.0f && v <= 1.0f;
      for (const float v : native.data()) ranges_ok = ranges_ok && v >= 0.0f && v <= 1.0f;
      if (pred < 4) continue;  // only patched-class predictions are scored
      double inside = 0.0;
      double total = 0.0;
      for (int r = 0; r < heat.height(); ++r)
        for (int c = 0; c < heat.width(); ++c) {
          total += heat(r, c, 0);
          if (sample.patch->contains(r, c)) inside += heat(r, c, 0);
        }
      if (total <= 0.0) continue;
      const double area = static_cast<double>(sample.patch->height * sample.patch->width) /
                          (static_cast<double>(heat.height()) * heat.width());
      mass_sum += inside / total;
      baseline_sum += std::max(kRatio * kRatio, area);
      ++samples;
    }
  }
  const double mass = samples ? mass_sum / samples : 0.0;
  const double baseline = samples ? baseline_sum / samples : 1.0;
  const bool trained = s.patchrot_train_acc >= kTargetAccuracy;
  const bool ok = ranges_ok && trained && samples >= 50 && mass > baseline;
  return {ok, fmt("model train acc %.4f (eval %.4f); heatmaps in [0,1] with shapes 8x8/32x32: %s; "
                  "mean mass inside patch %.4f vs baseline %.4f over %d patched predictions",
                  s.patchrot_train_acc, eval.accuracy, ranges_ok ? "yes" : "NO", mass, baseline, samples)};
}

Verdict checkpoint_round_trip(const Shared& s, const fs::path& scratch) {
  if (!s.linear_seed0 || !s.patchrot_model) return {false, "no trained models"};
  const DownstreamModel& model = s.linear_seed0->model;
  const double before = evaluate(model, s.glyph_test);
  const fs::path path = scratch / "roundtrip.ckpt";
  save_checkpoint(model.to_checkpoint(), path);
  DownstreamModel restored(Model(EncoderSpec{}, HeadKind::PatchRot8, 1234).encoder(), model.hidden(),
                           model.classes(), 1234);
  restored.load(load_checkpoint(path));
  const double after = evaluate(restored, s.glyph_test);

  const fs::path ppath = scratch / "roundtrip_pretext.ckpt";
  save_checkpoint(s.patchrot_model->to_checkpoint(), ppath);
  Model pretext_restored(EncoderSpec{}, HeadKind::PatchRot8, 99);
  pretext_restored.load(load_checkpoint(ppath));
  const auto a = evaluate_pretext(*s.patchrot_model, s.glyph_test.images, Variant::PatchRotNet, glyph_pretext(0), 0);
  const auto b = evaluate_pretext(pretext_restored, s.glyph_test.images, Variant::PatchRotNet, glyph_pretext(0), 0);

  const bool ok = std::memcmp(&before, &after, sizeof before) == 0 &&
                  before == *s.linear_seed0->metrics.test_accuracy && a.accuracy == b.accuracy &&
                  std::memcmp(&a.loss, &b.loss, sizeof a.loss) == 0;
  return {ok, fmt("downstream test acc %.17g -> %.17g; pretext acc %.17g -> %.17g, loss %.17g -> %.17g", before, after,
                  a.accuracy, b.accuracy, a.loss, b.loss)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <patchrot cli> [scratch dir]\n", argv[0]);
    return 2;
  }
  const std::string cli = fs::absolute(argv[1]).string();
  const fs::path scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "patchrot_acceptance";
  fs::create_directories(scratch);

  Shared shared;
  shared.glyph_train = make_synthetic_shapes(kGlyphImages, kGlyphSide, 0);
  shared.glyph_test = make_synthetic_shapes(kGlyphImages, kGlyphSide, 1);

  struct Criterion {
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {"autodiff oracle", [] { return autodiff_oracle(); }},
      {"transformation oracles", [] { return transform_oracles(); }},
      {"objective recomputation", [] { return loss_recomputation(); }},
      {"chance baselines", [&] { return chance_baselines(shared); }},
      {"pretext learnability", [&] { return learnability(shared); }},
      {"downstream signal", [&] { return downstream_signal(shared); }},
      {"determinism", [&] { return determinism(cli, scratch); }},
      {"gradcam contract", [&] { return gradcam_contract(shared); }},
      {"checkpoint round trip", [&] { return checkpoint_round_trip(shared, scratch); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = Clock::now();
    Verdict v;
    try {
      v = criteria[i].run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::printf("[%s] %zu. %s: %s (%.1fs)\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, v.detail.c_str(),
                seconds_since(start));
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
