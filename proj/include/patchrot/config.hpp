#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "patchrot/models.hpp"
#include "patchrot/pretext.hpp"
#include "patchrot/training.hpp"

namespace patchrot {

/// Flat key=value settings. Blank lines and lines starting with '#' are ignored,
/// so a rendered config is itself a valid config file.
class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  /// Only sets keys that are not present yet.
  void set_default(const std::string& key, std::string value) { values_.try_emplace(key, std::move(value)); }
  bool has(std::string_view key) const { return values_.find(key) != values_.end(); }
  void merge(const Config& overrides);

  std::optional<std::string> get(std::string_view key) const;
  std::string get_string(std::string_view key) const;
  long long get_int(std::string_view key) const;
  double get_double(std::string_view key) const;
  bool get_bool(std::string_view key) const;

  /// Sorted "key=value" lines.
  std::string render() const;

  const std::map<std::string, std::string, std::less<>>& values() const noexcept { return values_; }

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

/// Keys consumed: epochs, batch_size, lr, momentum, weight_decay, lr_schedule, seed, hidden,
/// stop_at_accuracy.
TrainConfig train_config_from(const Config& cfg, Phase phase);
/// Keys consumed: ratio, seed, resample_position_each_epoch, one_transform_per_image.
PretextConfig pretext_config_from(const Config& cfg);
/// Keys consumed: encoder, input_channels.
EncoderSpec encoder_spec_from(const Config& cfg);

/// Writes the phase defaults for any key the config does not set yet.
void apply_phase_defaults(Config& cfg, Phase phase);

}  // namespace patchrot
