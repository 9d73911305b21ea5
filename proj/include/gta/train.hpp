#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gta/augment.hpp"
#include "gta/data.hpp"
#include "gta/eval.hpp"
#include "gta/guidance.hpp"
#include "gta/vit.hpp"

namespace gta {

struct TrainConfig {
  int iterations = 1500;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  GuidanceSpec guidance;
  bool transmix = false;
  double transmix_prob = 0.5;
  double transmix_area = 0.25;
  std::uint64_t seed = 0;
  int eval_interval = 250;
  int eval_subset = 64;  // sample cap for interim evals; final eval is full
  double mass_fraction = 0.6;
  MapMode map_mode = MapMode::final_block;

  void validate() const {
    if (iterations < 1) throw config_error("TrainConfig: iterations must be >= 1");
    if (batch_size < 1) throw config_error("TrainConfig: batch size must be >= 1");
    if (!(lr > 0.0)) throw config_error("TrainConfig: learning rate must be positive");
    if (weight_decay < 0.0) throw config_error("TrainConfig: weight decay must be nonnegative");
    if (!(transmix_prob >= 0.0 && transmix_prob <= 1.0))
      throw config_error("TrainConfig: transmix probability must lie in [0,1]");
    if (!(transmix_area >= 0.0 && transmix_area <= 1.0))
      throw config_error("TrainConfig: transmix area fraction must lie in [0,1]");
    guidance.validate();
  }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return nlohmann::json{
      {"iterations", c.iterations},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"weight_decay", c.weight_decay},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"method", to_string(c.guidance.method)},
      {"lambda", c.guidance.lambda},
      {"freeze", to_string(c.guidance.freeze)},
      {"transmix", c.transmix},
      {"transmix_prob", c.transmix_prob},
      {"transmix_area", c.transmix_area},
      {"seed", c.seed},
      {"eval_interval", c.eval_interval},
      {"eval_subset", c.eval_subset},
      {"mass_fraction", c.mass_fraction},
      {"map_mode", to_string(c.map_mode)},
  };
}

/// Cosine annealing without warmup: lr0 at step 0, zero at step T.
inline double cosine_lr(int step, int total_steps, double lr0) {
  if (step < 0 || step > total_steps)
    throw config_error("cosine_lr: step outside [0, T]");
  const double lr =
      lr0 * 0.5 *
      (1.0 + std::cos(3.14159265358979323846 * step / total_steps));
  return std::max(0.0, lr);
}

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;

  static AdamWState init(const ViTModel& model) {
    AdamWState s;
    s.m.reserve(model.params().size());
    s.v.reserve(model.params().size());
    for (const Param& p : model.params()) {
      s.m.emplace_back(p.value.numel(), 0.0);
      s.v.emplace_back(p.value.numel(), 0.0);
    }
    return s;
  }
};

/// One decoupled-weight-decay Adam step over the model's registry. Decay is
/// applied before the adaptive update and only to decay-class tensors;
/// masked-out (frozen) tensors are untouched, including their moments.
inline void adamw_step(ViTModel& model, const GradientMap& grads,
                       AdamWState& state, const TrainConfig& cfg, double lr,
                       const std::vector<bool>& trainable) {
  auto& params = model.params();
  if (trainable.size() != params.size() || state.m.size() != params.size())
    throw config_error("adamw_step: mask/state size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable[i]) continue;
    Param& p = params[i];
    const std::vector<double>& g = grads.at_node(p.leaf);
    std::vector<double> x = p.value.data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    const bool decay = p.decay && cfg.weight_decay != 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (decay) x[j] -= lr * cfg.weight_decay * x[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      x[j] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    model.set_param_value(i, Tensor(p.value.shape(), std::move(x)));
  }
}

struct StepRecord {
  int step = 0;
  double lr = 0.0, ce = 0.0, reg = 0.0, total = 0.0;
};

struct EvalStepRecord {
  int step = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::optional<double> cls_logit_dist;
  std::optional<double> jaccard;
  std::optional<double> fg_attn_mass;
};

struct RunReport {
  std::vector<StepRecord> steps;
  std::vector<EvalStepRecord> evals;
  int iterations = 0;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;
  std::optional<double> final_cls_logit_dist;
  std::optional<double> final_jaccard;
  std::optional<double> final_fg_attn_mass;
  std::string final_rng_state;  // training stream at exit; not serialized

  std::string to_jsonl() const {
    auto opt = [](const std::optional<double>& v) {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    std::string out;
    out += nlohmann::json{{"schema", "gta.run_report"}, {"version", 1}}.dump();
    out += "\n";
    for (const StepRecord& s : steps) {
      out += nlohmann::json{{"type", "step"}, {"step", s.step},   {"lr", s.lr},
                            {"ce", s.ce},     {"reg", s.reg},
                            {"total", s.total}}
                 .dump();
      out += "\n";
    }
    for (const EvalStepRecord& e : evals) {
      out += nlohmann::json{{"type", "eval"},
                            {"step", e.step},
                            {"train_acc", e.train_acc},
                            {"test_acc", e.test_acc},
                            {"cls_logit_dist", opt(e.cls_logit_dist)},
                            {"jaccard", opt(e.jaccard)},
                            {"fg_attn_mass", opt(e.fg_attn_mass)}}
                 .dump();
      out += "\n";
    }
    out += nlohmann::json{{"type", "summary"},
                          {"iterations", iterations},
                          {"final_train_acc", final_train_acc},
                          {"final_test_acc", final_test_acc},
                          {"final_cls_logit_dist", opt(final_cls_logit_dist)},
                          {"final_jaccard", opt(final_jaccard)},
                          {"final_fg_attn_mass", opt(final_fg_attn_mass)}}
               .dump();
    out += "\n";
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path);
    const std::string text = to_jsonl();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw io_error("short write to " + path);
  }
};

namespace detail {

inline void require_finite_params(const ViTModel& model, int step) {
  for (const Param& p : model.params())
    for (double v : p.value.data())
      if (!std::isfinite(v))
        throw numeric_error("non-finite parameter " + p.name + " after step " +
                            std::to_string(step));
}

inline EvalStepRecord run_eval(const ViTModel& target, const ViTModel* source,
                               const Dataset& train_set,
                               const Dataset& test_set, const TrainConfig& cfg,
                               int step, bool final_pass) {
  NoTapeScope off;
  EvalOptions options;
  options.mass_fraction = cfg.mass_fraction;
  options.map_mode = cfg.map_mode;
  options.max_samples = final_pass ? 0 : cfg.eval_subset;
  options.source = source;
  const EvalRecord test = evaluate_model(target, test_set, options);
  EvalOptions train_options = options;
  train_options.source = nullptr;
  const EvalRecord train = evaluate_model(target, train_set, train_options);
  EvalStepRecord rec;
  rec.step = step;
  rec.train_acc = train.accuracy;
  rec.test_acc = test.accuracy;
  rec.cls_logit_dist = test.mean_logit_distance;
  rec.jaccard = test.mean_jaccard;
  rec.fg_attn_mass = test.mean_fg_attention;
  return rec;
}

// Shared by pretraining (source == nullptr) and fine-tuning.
inline RunReport train_loop(const ViTModel* source, ViTModel& target,
                            const Dataset& train_set, const Dataset& test_set,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.samples.empty() || test_set.samples.empty())
    throw config_error("train_loop: empty dataset");
  const ViTConfig& mc = target.config();
  if (train_set.image_size != mc.image_size)
    throw config_error("train_loop: dataset image size " +
                       std::to_string(train_set.image_size) +
                       " does not match model config " +
                       std::to_string(mc.image_size));
  if (train_set.num_classes > mc.num_classes)
    throw config_error("train_loop: dataset has more classes than the model");
  if (source && !(source->config() == mc))
    throw config_error("train_loop: source and target configs differ");

  const GuidanceSpec& gs = cfg.guidance;
  const bool trace_reg = gs.active() && gs.uses_traces();
  const bool l2sp_reg = gs.active() && gs.method == GuidanceMethod::l2sp;
  if (trace_reg && !source)
    throw config_error("train_loop: guidance method " + to_string(gs.method) +
                       " requires a source model");

  ParamMap anchors;
  if (l2sp_reg) anchors = param_map(target);  // starting-point weights

  const std::vector<bool> trainable = apply_freeze_policy(gs.freeze, target);
  Tape tape;
  target.attach(tape);
  TapeScope scope(tape);
  AdamWState opt = AdamWState::init(target);
  Rng rng(derive_seed(cfg.seed, "train"));

  const int h = mc.image_size, w = mc.image_size;
  const std::size_t n_train = train_set.samples.size();
  RunReport report;
  report.iterations = cfg.iterations;
  report.steps.reserve(static_cast<std::size_t>(cfg.iterations));

  for (int step = 0; step < cfg.iterations; ++step) {
    tape.reset_ops();
    const double lr = cosine_lr(step, cfg.iterations, cfg.lr);
    Tensor ce_sum = Tensor::scalar(0.0);
    Tensor reg_sum = Tensor::scalar(0.0);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = rng.uniform_index(n_train);
      const Sample& sample = train_set.samples[idx];
      Tensor image = basic_augment(sample.image, rng);
      int label_b = -1;
      CutBox box;
      bool mixed = false;
      if (cfg.transmix && rng.bernoulli(cfg.transmix_prob)) {
        const std::size_t jdx = rng.uniform_index(n_train);
        const Tensor partner =
            basic_augment(train_set.samples[jdx].image, rng);
        box = sample_cut_box(rng, h, w, cfg.transmix_area);
        image = mix_images(image, partner, box);
        label_b = train_set.samples[jdx].label;
        mixed = true;
      }
      const bool capture = trace_reg || mixed;
      const ForwardResult out = target.forward(image, capture);
      Tensor ce_i;
      if (mixed) {
        const std::vector<std::uint8_t> patch_mask =
            box_patch_mask(box, h, w, mc.patch_size);
        const std::vector<double> attention =
            cls_patch_attention(*out.trace, mc.depth - 1);
        const double c = transmix_coefficient(attention, patch_mask);
        ce_i = add(scale(cross_entropy_with_logits(out.class_logits,
                                                   sample.label),
                         1.0 - c),
                   scale(cross_entropy_with_logits(out.class_logits, label_b),
                         c));
      } else {
        ce_i = cross_entropy_with_logits(out.class_logits, sample.label);
      }
      ce_sum = add(ce_sum, ce_i);
      if (trace_reg) {
        const ForwardResult guide = source->forward(image, true);
        const Tensor reg_i =
            gs.method == GuidanceMethod::gta_attn_logits
                ? gta_loss(*guide.trace, *out.trace)
                : feature_guide_loss(gs.method, *guide.trace, *out.trace);
        reg_sum = add(reg_sum, reg_i);
      }
    }
    const Tensor ce_batch = scale(ce_sum, 1.0 / cfg.batch_size);
    Tensor reg_batch = Tensor::scalar(0.0);
    if (trace_reg)
      reg_batch = scale(reg_sum, 1.0 / cfg.batch_size);
    else if (l2sp_reg)
      reg_batch = l2sp_penalty(param_map(target), anchors);
    const LossBreakdown loss = combine_loss(ce_batch, reg_batch, gs);

    const double ce_v = loss.ce.value();
    const double reg_v = gs.active() ? loss.reg.value() : 0.0;
    const double total_v = loss.total.value();
    if (!std::isfinite(total_v) || !std::isfinite(ce_v) ||
        !std::isfinite(reg_v))
      throw numeric_error(
          "non-finite loss at step " + std::to_string(step + 1) + " (ce=" +
          std::to_string(ce_v) + ", reg=" + std::to_string(reg_v) + ")");

    const GradientMap grads = tape.backward(loss.total);
    adamw_step(target, grads, opt, cfg, lr, trainable);
    require_finite_params(target, step + 1);

    report.steps.push_back({step + 1, lr, ce_v, reg_v, total_v});

    const bool final_step = step + 1 == cfg.iterations;
    const bool interval_hit =
        cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
    if (final_step || interval_hit)
      report.evals.push_back(run_eval(target, source, train_set, test_set,
                                      cfg, step + 1, final_step));
  }
  tape.reset_ops();
  report.final_rng_state = rng.serialize();

  const EvalStepRecord& last = report.evals.back();
  report.final_train_acc = last.train_acc;
  report.final_test_acc = last.test_acc;
  report.final_cls_logit_dist = last.cls_logit_dist;
  report.final_jaccard = last.jaccard;
  report.final_fg_attn_mass = last.fg_attn_mass;
  return report;
}

}  // namespace detail

/// Fine-tune against a frozen source model: target receives the source
/// weights with a freshly initialized classifier head, then trains under the
/// configured guidance method. Deterministic given (seed, config, data).
inline RunReport finetune(const ViTModel& source, ViTModel& target,
                          const Dataset& train_set, const Dataset& test_set,
                          const TrainConfig& cfg) {
  target.copy_weights_from(source);
  Rng head_rng(derive_seed(cfg.seed, "head-init"));
  target.reinit_head(head_rng);
  return detail::train_loop(&source, target, train_set, test_set, cfg);
}

/// Supervised pre-training of a fresh model on the upstream split (the
/// stand-in for large-scale pre-training).
inline ViTModel pretrain_source(const ViTConfig& model_cfg,
                                const Dataset& upstream,
                                const Dataset& eval_set, const TrainConfig& cfg,
                                RunReport* report_out = nullptr) {
  Rng init_rng(derive_seed(cfg.seed, "model-init"));
  ViTModel model = ViTModel::random_init(model_cfg, init_rng);
  TrainConfig plain = cfg;
  plain.guidance = GuidanceSpec{};  // no guidance during pre-training
  plain.transmix = false;
  RunReport report =
      detail::train_loop(nullptr, model, upstream, eval_set, plain);
  if (report_out) *report_out = std::move(report);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "GTAC", u32 version, u64 JSON header length, JSON
// header (config, tensor table, RNG state, train-config echo), then raw
// little-endian float64 data in table order.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline nlohmann::json vit_config_json(const ViTConfig& c) {
  return nlohmann::json{{"image_size", c.image_size},
                        {"patch_size", c.patch_size},
                        {"embed_dim", c.embed_dim},
                        {"heads", c.heads},
                        {"depth", c.depth},
                        {"num_classes", c.num_classes}};
}

inline ViTConfig vit_config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.depth = j.at("depth").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  return c;
}

}  // namespace detail

inline constexpr char checkpoint_magic[4] = {'G', 'T', 'A', 'C'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
  ViTConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;  // table order
  std::string rng_state;
  nlohmann::json train_config;  // echo, may be null
  std::optional<std::int64_t> optimizer_step;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const ViTModel& model, const std::string& path,
                            const std::string& rng_state = "",
                            const TrainConfig* train_cfg = nullptr,
                            const AdamWState* opt = nullptr) {
  nlohmann::json table = nlohmann::json::array();
  std::vector<const std::vector<double>*> blobs;
  std::uint64_t offset = 0;
  auto add_entry = [&](const std::string& name, const Tensor& t) {
    nlohmann::json shape = nlohmann::json::array();
    for (int d : t.shape()) shape.push_back(d);
    table.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    blobs.push_back(&t.data());
    offset += t.numel();
  };
  std::vector<Tensor> opt_holders;  // keep optimizer tensors alive
  for (const Param& p : model.params()) add_entry(p.name, p.value);
  if (opt) {
    const auto& params = model.params();
    opt_holders.reserve(params.size() * 2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt_holders.push_back(Tensor(params[i].value.shape(), opt->m[i]));
      add_entry("optimizer.m." + params[i].name, opt_holders.back());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt_holders.push_back(Tensor(params[i].value.shape(), opt->v[i]));
      add_entry("optimizer.v." + params[i].name, opt_holders.back());
    }
  }
  nlohmann::json header{
      {"config", detail::vit_config_json(model.config())},
      {"tensors", table},
      {"rng", rng_state},
      {"train_config",
       train_cfg ? train_config_json(*train_cfg) : nlohmann::json(nullptr)},
      {"optimizer_step",
       opt ? nlohmann::json(opt->step) : nlohmann::json(nullptr)},
  };
  const std::string header_text = header.dump();

  std::string out;
  out.append(checkpoint_magic, 4);
  detail::put_u32le(out, checkpoint_version);
  detail::put_u64le(out, header_text.size());
  out += header_text;
  for (const auto* blob : blobs)
    for (double v : *blob)
      detail::put_u64le(out, std::bit_cast<std::uint64_t>(v));

  std::ofstream file(path, std::ios::binary);
  if (!file) throw io_error("cannot write checkpoint " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw io_error("short write to checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw io_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(file)),
                    std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), checkpoint_magic, 4) != 0)
    throw io_error("corrupt checkpoint " + path + ": bad magic");
  if (detail::get_u32le(p + 4) != checkpoint_version)
    throw io_error("corrupt checkpoint " + path + ": unsupported version");
  const std::uint64_t header_len = detail::get_u64le(p + 8);
  if (16 + header_len > bytes.size())
    throw io_error("corrupt checkpoint " + path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception&) {
    throw io_error("corrupt checkpoint " + path + ": malformed header");
  }

  Checkpoint ckpt;
  try {
    ckpt.config = detail::vit_config_from_json(header.at("config"));
    ckpt.rng_state = header.at("rng").get<std::string>();
    ckpt.train_config = header.at("train_config");
    if (!header.at("optimizer_step").is_null())
      ckpt.optimizer_step = header.at("optimizer_step").get<std::int64_t>();

    const std::size_t data_start = 16 + header_len;
    const std::size_t data_doubles = (bytes.size() - data_start) / 8;
    if ((bytes.size() - data_start) % 8 != 0)
      throw io_error("corrupt checkpoint " + path + ": ragged data section");
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      Shape shape;
      for (const auto& d : entry.at("shape")) shape.push_back(d.get<int>());
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      if (offset != expected_offset)
        throw io_error("corrupt checkpoint " + path +
                       ": tensor table offsets are inconsistent");
      const std::size_t count = shape_numel(shape);
      if (offset + count > data_doubles)
        throw io_error("corrupt checkpoint " + path +
                       ": data shorter than the tensor table");
      std::vector<double> values(count);
      const unsigned char* src = p + data_start + offset * 8;
      for (std::size_t i = 0; i < count; ++i)
        values[i] = std::bit_cast<double>(detail::get_u64le(src + i * 8));
      ckpt.tensors.emplace_back(name, Tensor(std::move(shape), std::move(values)));
      expected_offset = offset + count;
    }
    if (expected_offset != data_doubles)
      throw io_error("corrupt checkpoint " + path +
                     ": data longer than the tensor table");
  } catch (const nlohmann::json::exception&) {
    throw io_error("corrupt checkpoint " + path + ": malformed tensor table");
  }
  return ckpt;
}

/// Validates config and the full tensor table before touching the model; a
/// mismatch loads nothing.
inline void load_into(ViTModel& model, const Checkpoint& ckpt) {
  if (!(ckpt.config == model.config()))
    throw config_error("checkpoint config does not match the model config");
  std::vector<std::pair<std::size_t, const Tensor*>> plan;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const Param& p = model.params()[i];
    const Tensor* t = ckpt.find(p.name);
    if (!t) throw io_error("checkpoint is missing tensor " + p.name);
    if (t->shape() != p.value.shape())
      throw io_error("checkpoint tensor " + p.name + " has shape " +
                     shape_str(t->shape()) + ", expected " +
                     shape_str(p.value.shape()));
    plan.emplace_back(i, t);
  }
  for (const auto& [i, t] : plan) model.set_param_value(i, *t);
}

inline ViTModel model_from_checkpoint(const Checkpoint& ckpt) {
  ViTModel model(ckpt.config);
  load_into(model, ckpt);
  return model;
}

}  // namespace gta
