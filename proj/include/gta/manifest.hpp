#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gta/data.hpp"
#include "gta/train.hpp"

namespace gta {

// Key=value manifest with sections; one file fully determines one run. The
// resolved manifest is written next to every run's outputs so a re-run
// reproduces it byte for byte.
struct ExperimentManifest {
  // [run]
  std::string kind = "finetune";  // pretrain | finetune
  std::uint64_t seed = 42;
  std::string out_dir;

  // [data]
  std::string data_mode = "synthetic";  // synthetic | dir
  std::string data_dir;
  SyntheticSpec synth;
  int upstream_per_class = 0;  // 0: same as per_class
  std::uint64_t data_seed = 7;
  double rate = 1.0;

  // [model]
  std::string model_size = "small";  // tiny | small

  // [train] + [guidance] + [transmix] + [eval]
  TrainConfig train;

  // [finetune]
  std::string source_checkpoint;

  void validate() const {
    if (kind != "pretrain" && kind != "finetune")
      throw config_error("manifest: kind must be pretrain or finetune");
    if (data_mode != "synthetic" && data_mode != "dir")
      throw config_error("manifest: data mode must be synthetic or dir");
    if (data_mode == "dir" && data_dir.empty())
      throw config_error("manifest: data mode dir requires a directory");
    if (data_mode == "synthetic") synth.validate();
    if (!(rate > 0.0 && rate <= 1.0))
      throw config_error("manifest: rate must lie in (0,1]");
    if (model_size != "tiny" && model_size != "small")
      throw config_error("manifest: model size must be tiny or small");
    if (kind == "finetune" && source_checkpoint.empty())
      throw config_error("manifest: finetune requires a source checkpoint");
    if (out_dir.empty())
      throw config_error("manifest: an output directory is required");
    train.validate();
  }
};

/// tiny = 16x16/P4/D32/h4/M4, small = 32x32/P4/D64/h4/M6.
inline ViTConfig named_model_config(const std::string& size, int num_classes) {
  if (size == "tiny") return ViTConfig{16, 4, 32, 4, 4, num_classes};
  if (size == "small") return ViTConfig{32, 4, 64, 4, 6, num_classes};
  throw config_error("unknown model size '" + size +
                     "' (expected tiny|small)");
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string format_double(double v) {
  return nlohmann::json(v).dump();  // shortest round-trip representation
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw config_error("manifest: bad numeric value '" + v + "' for " + key);
  }
}

inline long long parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw config_error("manifest: bad integer value '" + v + "' for " + key);
  }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const std::uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw config_error("manifest: bad seed value '" + v + "' for " + key);
  }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw config_error("manifest: bad boolean value '" + v + "' for " + key);
}

}  // namespace detail

inline std::string serialize_manifest(const ExperimentManifest& m) {
  using detail::format_double;
  std::ostringstream out;
  out << "[run]\n";
  out << "kind = " << m.kind << "\n";
  out << "seed = " << m.seed << "\n";
  out << "out = " << m.out_dir << "\n";
  out << "\n[data]\n";
  out << "mode = " << m.data_mode << "\n";
  out << "dir = " << m.data_dir << "\n";
  out << "classes = " << m.synth.classes << "\n";
  out << "per_class = " << m.synth.per_class << "\n";
  out << "upstream_per_class = " << m.upstream_per_class << "\n";
  out << "image_size = " << m.synth.image_size << "\n";
  out << "textures = " << m.synth.textures << "\n";
  out << "rho_train = " << format_double(m.synth.rho_train) << "\n";
  out << "rho_test = " << format_double(m.synth.rho_test) << "\n";
  out << "noise = " << format_double(m.synth.noise) << "\n";
  out << "seed = " << m.data_seed << "\n";
  out << "rate = " << format_double(m.rate) << "\n";
  out << "\n[model]\n";
  out << "size = " << m.model_size << "\n";
  out << "\n[train]\n";
  out << "iterations = " << m.train.iterations << "\n";
  out << "batch = " << m.train.batch_size << "\n";
  out << "lr = " << format_double(m.train.lr) << "\n";
  out << "weight_decay = " << format_double(m.train.weight_decay) << "\n";
  out << "beta1 = " << format_double(m.train.beta1) << "\n";
  out << "beta2 = " << format_double(m.train.beta2) << "\n";
  out << "adam_eps = " << format_double(m.train.adam_eps) << "\n";
  out << "eval_interval = " << m.train.eval_interval << "\n";
  out << "eval_subset = " << m.train.eval_subset << "\n";
  out << "\n[guidance]\n";
  out << "method = " << to_string(m.train.guidance.method) << "\n";
  out << "lambda = " << format_double(m.train.guidance.lambda) << "\n";
  out << "freeze = " << to_string(m.train.guidance.freeze) << "\n";
  out << "\n[transmix]\n";
  out << "enabled = " << (m.train.transmix ? "true" : "false") << "\n";
  out << "prob = " << format_double(m.train.transmix_prob) << "\n";
  out << "area = " << format_double(m.train.transmix_area) << "\n";
  out << "\n[eval]\n";
  out << "mass_fraction = " << format_double(m.train.mass_fraction) << "\n";
  out << "map_mode = " << to_string(m.train.map_mode) << "\n";
  out << "\n[finetune]\n";
  out << "source = " << m.source_checkpoint << "\n";
  return out.str();
}

inline ExperimentManifest parse_manifest_text(const std::string& text,
                                              const std::string& origin) {
  using namespace detail;
  ExperimentManifest m;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = t.substr(1, t.size() - 2);
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw config_error(origin + ":" + std::to_string(line_no) +
                         ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const std::string qual = section + "." + key;

    if (qual == "run.kind") m.kind = value;
    else if (qual == "run.seed") m.seed = parse_u64(value, qual);
    else if (qual == "run.out") m.out_dir = value;
    else if (qual == "data.mode") m.data_mode = value;
    else if (qual == "data.dir") m.data_dir = value;
    else if (qual == "data.classes") m.synth.classes = static_cast<int>(parse_int(value, qual));
    else if (qual == "data.per_class") m.synth.per_class = static_cast<int>(parse_int(value, qual));
    else if (qual == "data.upstream_per_class") m.upstream_per_class = static_cast<int>(parse_int(value, qual));
    else if (qual == "data.image_size") m.synth.image_size = static_cast<int>(parse_int(value, qual));
    else if (qual == "data.textures") m.synth.textures = static_cast<int>(parse_int(value, qual));
    else if (qual == "data.rho_train") m.synth.rho_train = parse_double(value, qual);
    else if (qual == "data.rho_test") m.synth.rho_test = parse_double(value, qual);
    else if (qual == "data.noise") m.synth.noise = parse_double(value, qual);
    else if (qual == "data.seed") m.data_seed = parse_u64(value, qual);
    else if (qual == "data.rate") m.rate = parse_double(value, qual);
    else if (qual == "model.size") m.model_size = value;
    else if (qual == "train.iterations") m.train.iterations = static_cast<int>(parse_int(value, qual));
    else if (qual == "train.batch") m.train.batch_size = static_cast<int>(parse_int(value, qual));
    else if (qual == "train.lr") m.train.lr = parse_double(value, qual);
    else if (qual == "train.weight_decay") m.train.weight_decay = parse_double(value, qual);
    else if (qual == "train.beta1") m.train.beta1 = parse_double(value, qual);
    else if (qual == "train.beta2") m.train.beta2 = parse_double(value, qual);
    else if (qual == "train.adam_eps") m.train.adam_eps = parse_double(value, qual);
    else if (qual == "train.eval_interval") m.train.eval_interval = static_cast<int>(parse_int(value, qual));
    else if (qual == "train.eval_subset") m.train.eval_subset = static_cast<int>(parse_int(value, qual));
    else if (qual == "guidance.method") m.train.guidance.method = guidance_method_from_string(value);
    else if (qual == "guidance.lambda") m.train.guidance.lambda = parse_double(value, qual);
    else if (qual == "guidance.freeze") m.train.guidance.freeze = freeze_policy_from_string(value);
    else if (qual == "transmix.enabled") m.train.transmix = parse_bool(value, qual);
    else if (qual == "transmix.prob") m.train.transmix_prob = parse_double(value, qual);
    else if (qual == "transmix.area") m.train.transmix_area = parse_double(value, qual);
    else if (qual == "eval.mass_fraction") m.train.mass_fraction = parse_double(value, qual);
    else if (qual == "eval.map_mode") m.train.map_mode = map_mode_from_string(value);
    else if (qual == "finetune.source") m.source_checkpoint = value;
    else
      throw config_error(origin + ":" + std::to_string(line_no) +
                         ": unknown manifest key '" + qual + "'");
  }
  m.train.seed = m.seed;
  return m;
}

inline ExperimentManifest parse_manifest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open manifest " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_manifest_text(text, path);
}

}  // namespace gta
