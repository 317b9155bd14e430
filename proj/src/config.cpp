#include "patchrot/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace patchrot {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string shortest(float v) {
  char buf[64];
  for (int prec = 6; prec <= 9; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, static_cast<double>(v));
    if (std::stof(buf) == v) break;
  }
  return buf;
}

}  // namespace

Config Config::parse(std::string_view text) {
  Config cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error(ErrorKind::InvalidConfig, "line " + std::to_string(number) + ": expected key=value");
    }
    cfg.values_[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Config::merge(const Config& overrides) {
  for (const auto& [k, v] : overrides.values_) values_[k] = v;
}

std::optional<std::string> Config::get(std::string_view key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::get_string(std::string_view key) const {
  auto v = get(key);
  if (!v) throw Error(ErrorKind::InvalidConfig, "missing key '" + std::string(key) + "'");
  return *v;
}

long long Config::get_int(std::string_view key) const {
  const std::string v = get_string(key);
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw Error(ErrorKind::InvalidConfig, "key '" + std::string(key) + "' is not an integer: " + v);
  }
  return out;
}

double Config::get_double(std::string_view key) const {
  const std::string v = get_string(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::InvalidConfig, "key '" + std::string(key) + "' is not a number: " + v);
}

bool Config::get_bool(std::string_view key) const {
  const std::string v = get_string(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorKind::InvalidConfig, "key '" + std::string(key) + "' is not a boolean: " + v);
}

std::string Config::render() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

void apply_phase_defaults(Config& cfg, Phase phase) {
  const TrainConfig d = TrainConfig::defaults(phase);
  cfg.set_default("epochs", std::to_string(d.epochs));
  cfg.set_default("batch_size", std::to_string(d.batch_size));
  cfg.set_default("lr", shortest(d.lr));
  cfg.set_default("momentum", shortest(d.momentum));
  cfg.set_default("weight_decay", shortest(d.weight_decay));
  cfg.set_default("lr_schedule", d.schedule.to_string());
  cfg.set_default("seed", "0");
  if (phase != Phase::SSL) cfg.set_default("hidden", std::to_string(d.hidden));
}

TrainConfig train_config_from(const Config& cfg, Phase phase) {
  TrainConfig t = TrainConfig::defaults(phase);
  if (cfg.has("epochs")) t.epochs = static_cast<int>(cfg.get_int("epochs"));
  if (cfg.has("batch_size")) t.batch_size = static_cast<int>(cfg.get_int("batch_size"));
  if (cfg.has("lr")) t.lr = static_cast<float>(cfg.get_double("lr"));
  if (cfg.has("momentum")) t.momentum = static_cast<float>(cfg.get_double("momentum"));
  if (cfg.has("weight_decay")) t.weight_decay = static_cast<float>(cfg.get_double("weight_decay"));
  if (cfg.has("lr_schedule")) t.schedule = LrSchedule::parse(cfg.get_string("lr_schedule"));
  if (cfg.has("seed")) t.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  if (cfg.has("hidden")) t.hidden = static_cast<int>(cfg.get_int("hidden"));
  if (cfg.has("stop_at_accuracy")) t.stop_at_accuracy = cfg.get_double("stop_at_accuracy");
  if (t.epochs < 0 || t.batch_size < 1) throw Error(ErrorKind::InvalidConfig, "invalid epochs/batch_size");
  return t;
}

PretextConfig pretext_config_from(const Config& cfg) {
  PretextConfig p;
  if (cfg.has("ratio")) p.ratio = cfg.get_double("ratio");
  if (cfg.has("seed")) p.rng_seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  if (cfg.has("resample_position_each_epoch")) {
    p.resample_position_each_epoch = cfg.get_bool("resample_position_each_epoch");
  }
  if (cfg.has("one_transform_per_image")) p.one_transform_per_image = cfg.get_bool("one_transform_per_image");
  if (!(p.ratio > 0.0 && p.ratio < 1.0)) throw Error(ErrorKind::InvalidConfig, "ratio must lie in (0, 1)");
  return p;
}

EncoderSpec encoder_spec_from(const Config& cfg) {
  EncoderSpec s;
  if (cfg.has("encoder")) s.variant = parse_encoder(cfg.get_string("encoder"));
  if (cfg.has("input_channels")) s.input_channels = static_cast<int>(cfg.get_int("input_channels"));
  return s;
}

}  // namespace patchrot
