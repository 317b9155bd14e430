#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "../support/reference_ops.hpp"
#include "patchrot/error.hpp"
#include "patchrot/rng.hpp"
#include "patchrot/tensor.hpp"

using namespace patchrot;
namespace ref = patchrot::reference;

namespace {

Tensor filled(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform01() * 2.0 - 1.0);
  return t;
}

}  // namespace

TEST_CASE("conv2d with a 1x1 identity kernel copies the input") {
  Rng rng(1);
  const Tensor x = filled({2, 3, 5, 4}, rng);
  Tensor k({3, 3, 1, 1}, 0.0f);
  for (int i = 0; i < 3; ++i) k[static_cast<std::size_t>(i * 3 + i)] = 1.0f;
  Tape tape;
  CHECK(conv2d(tape.constant(x), tape.constant(k), 1, Padding::Same).value() == x);
}

TEST_CASE("conv2d valid 3x3 equals the dot product") {
  const Tensor x({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor k({1, 1, 3, 3}, std::vector<float>{0, 1, 0, 1, -4, 1, 0, 1, 0});
  Tape tape;
  const Var y = conv2d(tape.constant(x), tape.constant(k), 1, Padding::Valid);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value()[0] == doctest::Approx(2 + 4 + 6 + 8 - 4 * 5));
}

TEST_CASE("conv2d agrees with the direct summation") {
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const int stride = 1 + i % 2;
    const Tensor x = filled({2, 3, 9, 7}, rng);
    const Tensor k = filled({4, 3, 3, 3}, rng);
    Tape tape;
    const Var y = conv2d(tape.constant(x), tape.constant(k), stride, Padding::Same);
    int oh = 0;
    int ow = 0;
    const auto expected = ref::conv2d(ref::Vec(x.data().begin(), x.data().end()), 2, 3, 9, 7,
                                      ref::Vec(k.data().begin(), k.data().end()), 4, 3, 3, stride, 1, &oh, &ow);
    REQUIRE(y.shape() == Shape{2, 4, oh, ow});
    for (std::size_t j = 0; j < expected.size(); ++j) CHECK(y.value()[j] == doctest::Approx(expected[j]).epsilon(1e-5));
  }
}

TEST_CASE("softmax cross-entropy of uniform logits") {
  Tape tape;
  const std::vector<int> labels{0, 7, 3};
  CHECK(softmax_cross_entropy(tape.constant(Tensor({3, 8}, 0.25f)), labels).value()[0] ==
        doctest::Approx(std::log(8.0)).epsilon(1e-6));
  CHECK(softmax_cross_entropy(tape.constant(Tensor({3, 4}, -2.0f)), std::vector<int>{1, 1, 2}).value()[0] ==
        doctest::Approx(std::log(4.0)).epsilon(1e-6));
  // Large logits stay finite thanks to max subtraction.
  Tensor big({1, 2}, std::vector<float>{1000.0f, 0.0f});
  CHECK(softmax_cross_entropy(tape.constant(big), std::vector<int>{1}).value()[0] == doctest::Approx(1000.0));
  try {
    (void)softmax_cross_entropy(tape.constant(Tensor({1, 4})), std::vector<int>{4});
    FAIL("label 4 accepted for 4 classes");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidClass);
  }
}

TEST_CASE("batchnorm normalizes in training mode and tracks running stats") {
  Rng rng(3);
  const Tensor x = filled({4, 2, 3, 3}, rng);
  BatchNormStats stats(2);
  Tape tape;
  const Var y = batchnorm2d(tape.constant(x), tape.constant(Tensor({2}, 1.0f)), tape.constant(Tensor({2}, 0.0f)),
                            stats, true);
  for (int ch = 0; ch < 2; ++ch) {
    double mean = 0.0;
    double sq = 0.0;
    double raw_mean = 0.0;
    double raw_sq = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int j = 0; j < 9; ++j) {
        const std::size_t idx = (static_cast<std::size_t>(n) * 2 + ch) * 9 + j;
        mean += y.value()[idx];
        sq += y.value()[idx] * y.value()[idx];
        raw_mean += x[idx];
        raw_sq += x[idx] * x[idx];
      }
    mean /= 36;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-6).scale(1.0));
    CHECK(sq / 36 - mean * mean == doctest::Approx(1.0).epsilon(1e-3));
    raw_mean /= 36;
    const double unbiased = (raw_sq - 36 * raw_mean * raw_mean) / 35;
    CHECK(stats.running_mean[static_cast<std::size_t>(ch)] == doctest::Approx(0.1 * raw_mean).epsilon(1e-5));
    CHECK(stats.running_var[static_cast<std::size_t>(ch)] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-5));
  }

  // Eval mode reads the running statistics and leaves them alone.
  const BatchNormStats before = stats;
  Tape eval;
  const Var z = batchnorm2d(eval.constant(x), eval.constant(Tensor({2}, 2.0f)), eval.constant(Tensor({2}, 0.5f)),
                            stats, false);
  CHECK(stats.running_mean == before.running_mean);
  const double expected = 2.0 * (x[0] - stats.running_mean[0]) / std::sqrt(stats.running_var[0] + 1e-5) + 0.5;
  CHECK(z.value()[0] == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("sum has an all-ones gradient") {
  Tape tape;
  const Var x = tape.input(Tensor({2, 3, 4}, 0.3f), true);
  tape.backward(sum(x));
  CHECK(x.grad() == Tensor({2, 3, 4}, 1.0f));
}

TEST_CASE("parameter leaves accumulate into the parameter") {
  Parameter p("w", Tensor({3}, 2.0f));
  p.zero_grad();
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    const Var w = tape.parameter(p);
    tape.backward(sum(mul(w, w)));
  }
  CHECK(p.grad == Tensor({3}, 8.0f));  // 2 * (2w)

  Parameter frozen("f", Tensor({3}, 1.0f));
  frozen.trainable = false;
  Tape tape;
  const Var f = tape.parameter(frozen);
  const Var x = tape.input(Tensor({3}, 1.0f), true);
  tape.backward(sum(mul(f, x)));
  CHECK(frozen.grad.size() == 0);
  CHECK(x.grad() == Tensor({3}, 1.0f));
}

TEST_CASE("global average pool and shortcut padding values") {
  Tape tape;
  Tensor x({1, 2, 2, 2}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(global_avg_pool(tape.constant(x)).value() == Tensor({1, 2}, std::vector<float>{2.5f, 6.5f}));
  const Var s = shortcut_pad(tape.constant(x), 4, 2);
  CHECK(s.shape() == Shape{1, 4, 1, 1});
  CHECK(s.value() == Tensor({1, 4, 1, 1}, std::vector<float>{0, 1, 5, 0}));
}

TEST_CASE("sgd update rules") {
  SgdOptions plain{0.1f, 0.0f, 0.0f};
  Tensor p({2}, std::vector<float>{1.0f, -1.0f});
  Tensor v;
  sgd_step(p, Tensor({2}, std::vector<float>{0.5f, 2.0f}), v, plain);
  CHECK(p[0] == doctest::Approx(0.95));
  CHECK(p[1] == doctest::Approx(-1.2));

  Tensor q({2}, 3.0f);
  Tensor vq;
  sgd_step(q, Tensor({2}, 0.0f), vq, SgdOptions{0.1f, 0.9f, 0.0f});
  CHECK(q == Tensor({2}, 3.0f));
  CHECK(vq == Tensor({2}, 0.0f));

  // Two momentum steps on a constant gradient move by lr * g * (1 + 1.9).
  Tensor r({1}, 0.0f);
  Tensor vr;
  const Tensor g({1}, 1.0f);
  const SgdOptions mom{0.01f, 0.9f, 0.0f};
  sgd_step(r, g, vr, mom);
  sgd_step(r, g, vr, mom);
  CHECK(r[0] == doctest::Approx(-0.01 * 2.9));

  Tensor w({1}, 2.0f);
  Tensor vw;
  sgd_step(w, Tensor({1}, 0.0f), vw, SgdOptions{0.1f, 0.0f, 0.5f});
  CHECK(w[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));

  CHECK_THROWS_AS(sgd_step(w, Tensor({2}), vw, mom), Error);
}

TEST_CASE("checkpoint bytes round trip") {
  Checkpoint c;
  c.model_hash = 0x0123456789abcdefULL;
  c.entries.push_back({"a.weight", Tensor({2, 3}, std::vector<float>{1, 2, 3, 4, 5, -6.5f})});
  c.entries.push_back({"b", Tensor({1}, 0.125f)});
  const auto bytes = encode_checkpoint(c);
  REQUIRE(bytes.size() == 4 + 4 + 8 + 4 + (4 + 8 + 4 + 8 + 24) + (4 + 1 + 4 + 4 + 4));
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PRCK");
  CHECK(bytes[4] == 1);
  CHECK(decode_checkpoint(bytes) == c);

  const auto path = std::filesystem::temp_directory_path() / "patchrot_ckpt_test.ckpt";
  save_checkpoint(c, path);
  CHECK(load_checkpoint(path) == c);
  std::filesystem::remove(path);

  auto kind = [](std::vector<unsigned char> b) {
    try {
      (void)decode_checkpoint(b);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::InvalidConfig;
  };
  CHECK(kind(std::vector<unsigned char>(bytes.begin(), bytes.end() - 1)) == ErrorKind::CheckpointMismatch);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(kind(bad_magic) == ErrorKind::CheckpointMismatch);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK(kind(bad_version) == ErrorKind::CheckpointMismatch);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(kind(trailing) == ErrorKind::CheckpointMismatch);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}
