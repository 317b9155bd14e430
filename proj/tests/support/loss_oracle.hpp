#pragma once

// Straight-line recomputation of the pretext objective: the mean over images
// of the mean over that image's transforms of -log softmax(f(T_j(x_i)))[j].
// Logits come from the model in training mode with `images_per_group` images
// per forward pass, which matches the training stream when a group is a
// single image (batch = class count) or the whole dataset.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "patchrot/models.hpp"
#include "patchrot/pretext.hpp"

namespace patchrot::reference {

inline double pretext_objective(Model model, std::span<const Image> images, Variant variant,
                                const PretextConfig& cfg, std::size_t images_per_group) {
  const int classes = class_count(variant);
  double outer = 0.0;
  for (std::size_t begin = 0; begin < images.size(); begin += images_per_group) {
    const std::size_t end = std::min(images.size(), begin + images_per_group);
    std::vector<Image> first;
    std::vector<Image> second;
    std::vector<int> labels;
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng = image_stream(cfg, 0, i);
      if (variant == Variant::PatchRelNet) {
        for (const auto& p : generate_pairs(images[i], cfg, rng)) {
          first.push_back(p.image_a);
          second.push_back(p.image_b);
          labels.push_back(p.label);
        }
      } else {
        const auto set = variant == Variant::RotNet ? generate_rotnet_set(images[i])
                                                    : generate_patched_set(images[i], cfg, rng);
        for (const auto& s : set) {
          first.push_back(s.image);
          labels.push_back(s.label);
        }
      }
    }
    Tape tape;
    const Var a = tape.constant(stack_images(std::span<const Image>(first)));
    const Tensor logits = variant == Variant::PatchRelNet
                              ? model.logits(tape, a, tape.constant(stack_images(std::span<const Image>(second))), true).value()
                              : model.logits(tape, a, true).value();
    for (std::size_t img = 0; img < end - begin; ++img) {
      double inner = 0.0;
      for (int j = 0; j < classes; ++j) {
        const std::size_t row = img * static_cast<std::size_t>(classes) + static_cast<std::size_t>(j);
        double mx = -1e300;
        for (int c = 0; c < classes; ++c) mx = std::max(mx, static_cast<double>(logits[row * classes + c]));
        double s = 0.0;
        for (int c = 0; c < classes; ++c) s += std::exp(logits[row * classes + c] - mx);
        inner += std::log(s) + mx - logits[row * classes + static_cast<std::size_t>(labels[row])];
      }
      outer += inner / classes;
    }
  }
  return outer / static_cast<double>(images.size());
}

}  // namespace patchrot::reference
