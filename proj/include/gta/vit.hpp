#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gta/rng.hpp"
#include "gta/tensor.hpp"

namespace gta {

inline constexpr double layer_norm_epsilon = 1e-6;
inline constexpr int ffn_hidden_ratio = 4;

struct ViTConfig {
  int image_size = 16;  // square images
  int patch_size = 4;
  int embed_dim = 32;
  int heads = 4;
  int depth = 4;
  int num_classes = 2;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int tokens() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / heads; }
  int patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || embed_dim <= 0 || heads <= 0 ||
        depth <= 0 || num_classes <= 0)
      throw config_error("ViTConfig: all dimensions must be positive");
    if (image_size % patch_size != 0)
      throw config_error("ViTConfig: image size " +
                         std::to_string(image_size) +
                         " is not divisible by patch size " +
                         std::to_string(patch_size));
    if (embed_dim % heads != 0)
      throw config_error("ViTConfig: embed dim " + std::to_string(embed_dim) +
                         " is not divisible by head count " +
                         std::to_string(heads));
  }

  bool operator==(const ViTConfig&) const = default;
};

// Per-block, per-head pre-softmax logit matrices plus the per-block MSA and
// block outputs, all captured from one forward pass.
struct AttentionTrace {
  std::uint64_t pass_id = 0;
  int depth = 0;
  int heads = 0;
  int tokens = 0;
  std::vector<Tensor> logits;         // depth*heads, each [tokens, tokens]
  std::vector<Tensor> msa_outputs;    // depth, each [tokens, embed_dim]
  std::vector<Tensor> block_outputs;  // depth, each [tokens, embed_dim]

  const Tensor& logit(int block, int head) const {
    return logits[static_cast<std::size_t>(block) * heads + head];
  }
};

inline void require_compatible(const AttentionTrace& a,
                               const AttentionTrace& b) {
  if (a.depth != b.depth || a.heads != b.heads || a.tokens != b.tokens)
    throw config_error("attention traces come from incompatible models");
}

struct ForwardResult {
  Tensor class_logits;  // [1, num_classes]
  std::optional<AttentionTrace> trace;
};

struct Param {
  std::string name;
  Tensor value;
  bool decay = false;  // weight-decay eligible
  int leaf = no_node;  // tape slot once attached
};

/// The [cls]-query row of an attention logit matrix with its self-logit
/// removed.
inline Tensor cls_attention_row(const Tensor& a) {
  if (a.shape().size() != 2 || a.rows() != a.cols())
    throw config_error("cls_attention_row: expects a square matrix, got " +
                       shape_str(a.shape()));
  if (a.rows() < 2)
    throw config_error("cls_attention_row: matrix side must be at least 2");
  return slice_cols(slice_rows(a, 0, 1), 1, a.cols());
}

/// One attention head: pre-softmax logits A = q k^T / sqrt(k) and the
/// attended values softmax(A) v.
inline std::pair<Tensor, Tensor> attention_head(const Tensor& z,
                                                const Tensor& wq,
                                                const Tensor& wk,
                                                const Tensor& wv) {
  const Tensor q = matmul(z, wq);
  const Tensor k = matmul(z, wk);
  const Tensor v = matmul(z, wv);
  const Tensor logits =
      scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(wq.cols())));
  return {logits, matmul(softmax_rows(logits), v)};
}

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  std::vector<std::array<Tensor, 3>> head_qkv;  // per head {wq, wk, wv}
  Tensor wproj;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

struct MsaResult {
  Tensor out;                       // [tokens, embed_dim]
  std::vector<Tensor> head_logits;  // heads, each [tokens, tokens]
};

inline MsaResult msa(const Tensor& z,
                     const std::vector<std::array<Tensor, 3>>& head_qkv,
                     const Tensor& wproj) {
  if (head_qkv.empty()) throw config_error("msa: no attention heads");
  std::vector<Tensor> logits;
  std::vector<Tensor> attended;
  logits.reserve(head_qkv.size());
  attended.reserve(head_qkv.size());
  for (const auto& w : head_qkv) {
    auto [a, sa] = attention_head(z, w[0], w[1], w[2]);
    logits.push_back(std::move(a));
    attended.push_back(std::move(sa));
  }
  return {matmul(concat_last_dim(attended), wproj), std::move(logits)};
}

struct BlockTrace {
  std::vector<Tensor> head_logits;
  Tensor msa_out;
  Tensor block_out;
};

/// Pre-norm residual block: z + MSA(LN(z)), then + FFN(LN(.)).
inline Tensor transformer_block(const Tensor& z, const BlockWeights& w,
                                BlockTrace* trace) {
  MsaResult attn =
      msa(layer_norm(z, w.ln1_gamma, w.ln1_beta, layer_norm_epsilon),
          w.head_qkv, w.wproj);
  const Tensor z_mid = add(z, attn.out);
  const Tensor normed =
      layer_norm(z_mid, w.ln2_gamma, w.ln2_beta, layer_norm_epsilon);
  const Tensor hidden = gelu(add_rowvec(matmul(normed, w.fc1_weight), w.fc1_bias));
  const Tensor ffn = add_rowvec(matmul(hidden, w.fc2_weight), w.fc2_bias);
  const Tensor out = add(z_mid, ffn);
  if (trace) {
    trace->head_logits = std::move(attn.head_logits);
    trace->msa_out = attn.out;
    trace->block_out = out;
  }
  return out;
}

namespace detail {
inline std::uint64_t next_pass_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

// Miniature pre-norm ViT. Parameters live in a named registry whose order is
// canonical for checkpoints and optimizer state.
class ViTModel {
 public:
  explicit ViTModel(const ViTConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build_registry();
  }

  ViTModel(ViTModel&&) = default;
  ViTModel& operator=(ViTModel&&) = default;
  ViTModel(const ViTModel&) = delete;
  ViTModel& operator=(const ViTModel&) = delete;

  static ViTModel random_init(const ViTConfig& cfg, Rng& rng) {
    ViTModel model(cfg);
    for (Param& p : model.params_) model.init_param(p, rng);
    return model;
  }

  /// Independent copy with constant (tape-free) parameter values.
  ViTModel clone_detached() const {
    ViTModel copy(cfg_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      copy.params_[i].value = params_[i].value.detached();
    return copy;
  }

  /// Fresh classifier head (fine-tuning entry point).
  void reinit_head(Rng& rng) {
    init_param(param("head.weight"), rng);
    init_param(param("head.bias"), rng);
  }

  const ViTConfig& config() const { return cfg_; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.value.numel();
    return n;
  }

  int param_index(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : static_cast<int>(it->second);
  }

  Param& param(const std::string& name) {
    const int i = param_index(name);
    if (i < 0) throw config_error("ViTModel: unknown parameter " + name);
    return params_[static_cast<std::size_t>(i)];
  }
  const Param& param(const std::string& name) const {
    return const_cast<ViTModel*>(this)->param(name);
  }

  /// Register every parameter as a leaf on the tape, in registry order.
  void attach(Tape& tape) {
    tape_ = &tape;
    for (Param& p : params_) {
      p.value = tape.watch(p.value);
      p.leaf = p.value.node();
    }
  }

  bool attached() const { return tape_ != nullptr; }

  /// Replace a parameter value, preserving its tape identity if attached.
  void set_param_value(std::size_t index, const Tensor& v) {
    Param& p = params_[index];
    if (v.numel() != p.value.numel())
      throw config_error("set_param_value: size mismatch for " + p.name);
    p.value = tape_ ? tape_->bind(v, p.leaf) : v.detached();
  }

  /// Store a tensor as given, keeping whatever tape identity it carries
  /// (gradient-check support).
  void set_param_tensor(std::size_t index, const Tensor& v) {
    Param& p = params_[index];
    if (v.numel() != p.value.numel())
      throw config_error("set_param_tensor: size mismatch for " + p.name);
    p.value = v;
  }

  void copy_weights_from(const ViTModel& other) {
    if (!(other.cfg_ == cfg_))
      throw config_error("copy_weights_from: model configs differ");
    for (std::size_t i = 0; i < params_.size(); ++i)
      set_param_value(i, other.params_[i].value);
  }

  /// Patch tokens via linear projection, [cls] prepended, position added.
  Tensor embed(const Tensor& image) const {
    if (image.shape() != Shape{3, cfg_.image_size, cfg_.image_size})
      throw config_error("embed: image shape " + shape_str(image.shape()) +
                         " does not match config " +
                         shape_str({3, cfg_.image_size, cfg_.image_size}));
    const Tensor patches = patch_matrix(image);
    const Tensor projected = add_rowvec(
        matmul(patches, param("patch_proj.weight").value),
        param("patch_proj.bias").value);
    const Tensor tokens = concat_rows(param("cls_token").value, projected);
    return add(tokens, param("pos_embed").value);
  }

  ForwardResult forward(const Tensor& image, bool capture) const {
    Tensor z = embed(image);
    AttentionTrace trace;
    if (capture) {
      trace.pass_id = detail::next_pass_id();
      trace.depth = cfg_.depth;
      trace.heads = cfg_.heads;
      trace.tokens = cfg_.tokens();
      trace.logits.reserve(static_cast<std::size_t>(cfg_.depth) * cfg_.heads);
      trace.msa_outputs.reserve(static_cast<std::size_t>(cfg_.depth));
      trace.block_outputs.reserve(static_cast<std::size_t>(cfg_.depth));
    }
    for (int m = 0; m < cfg_.depth; ++m) {
      BlockTrace bt;
      z = transformer_block(z, block_weights(m), capture ? &bt : nullptr);
      if (capture) {
        for (Tensor& t : bt.head_logits) trace.logits.push_back(std::move(t));
        trace.msa_outputs.push_back(std::move(bt.msa_out));
        trace.block_outputs.push_back(std::move(bt.block_out));
      }
    }
    z = layer_norm(z, param("final_ln.gamma").value,
                   param("final_ln.beta").value, layer_norm_epsilon);
    const Tensor cls_token = slice_rows(z, 0, 1);
    Tensor logits = add_rowvec(matmul(cls_token, param("head.weight").value),
                               param("head.bias").value);
    ForwardResult result{std::move(logits), std::nullopt};
    if (capture) result.trace = std::move(trace);
    return result;
  }

  BlockWeights block_weights(int m) const {
    const std::string base = "blocks." + std::to_string(m) + ".";
    BlockWeights w;
    w.ln1_gamma = param(base + "ln1.gamma").value;
    w.ln1_beta = param(base + "ln1.beta").value;
    for (int l = 0; l < cfg_.heads; ++l) {
      const std::string head = base + "attn.head" + std::to_string(l) + ".";
      w.head_qkv.push_back({param(head + "wq").value, param(head + "wk").value,
                            param(head + "wv").value});
    }
    w.wproj = param(base + "attn.wproj").value;
    w.ln2_gamma = param(base + "ln2.gamma").value;
    w.ln2_beta = param(base + "ln2.beta").value;
    w.fc1_weight = param(base + "ffn.fc1.weight").value;
    w.fc1_bias = param(base + "ffn.fc1.bias").value;
    w.fc2_weight = param(base + "ffn.fc2.weight").value;
    w.fc2_bias = param(base + "ffn.fc2.bias").value;
    return w;
  }

 private:
  void add_param(std::string name, Shape shape, bool decay,
                 double fill = 0.0) {
    index_[name] = params_.size();
    params_.push_back(Param{std::move(name), Tensor::full(std::move(shape), fill),
                            decay, no_node});
  }

  void build_registry() {
    const int d = cfg_.embed_dim;
    const int hidden = ffn_hidden_ratio * d;
    add_param("patch_proj.weight", {cfg_.patch_dim(), d}, true);
    add_param("patch_proj.bias", {d}, false);
    add_param("cls_token", {1, d}, false);
    add_param("pos_embed", {cfg_.tokens(), d}, false);
    for (int m = 0; m < cfg_.depth; ++m) {
      const std::string base = "blocks." + std::to_string(m) + ".";
      add_param(base + "ln1.gamma", {d}, false, 1.0);
      add_param(base + "ln1.beta", {d}, false);
      for (int l = 0; l < cfg_.heads; ++l) {
        const std::string head = base + "attn.head" + std::to_string(l) + ".";
        add_param(head + "wq", {d, cfg_.head_dim()}, true);
        add_param(head + "wk", {d, cfg_.head_dim()}, true);
        add_param(head + "wv", {d, cfg_.head_dim()}, true);
      }
      add_param(base + "attn.wproj", {cfg_.heads * cfg_.head_dim(), d}, true);
      add_param(base + "ln2.gamma", {d}, false, 1.0);
      add_param(base + "ln2.beta", {d}, false);
      add_param(base + "ffn.fc1.weight", {d, hidden}, true);
      add_param(base + "ffn.fc1.bias", {hidden}, false);
      add_param(base + "ffn.fc2.weight", {hidden, d}, true);
      add_param(base + "ffn.fc2.bias", {d}, false);
    }
    add_param("final_ln.gamma", {d}, false, 1.0);
    add_param("final_ln.beta", {d}, false);
    add_param("head.weight", {d, cfg_.num_classes}, true);
    add_param("head.bias", {cfg_.num_classes}, false);
  }

  // Truncated-normal (std 0.02) for projection weights and position
  // embeddings; ones/zeros for layer norms; zeros for biases and [cls].
  void init_param(Param& p, Rng& rng) {
    const bool normal_init = p.decay || p.name == "pos_embed";
    std::vector<double> values(p.value.numel());
    if (normal_init) {
      for (auto& v : values) v = rng.truncated_normal(0.02);
    } else if (p.name.find(".gamma") != std::string::npos ||
               p.name == "final_ln.gamma") {
      for (auto& v : values) v = 1.0;
    }  // everything else stays zero
    Tensor fresh(p.value.shape(), std::move(values));
    if (tape_)
      p.value = tape_->bind(fresh, p.leaf);
    else
      p.value = fresh;
  }

  /// Rows are flattened P x P x 3 patches in row-major patch-grid order.
  Tensor patch_matrix(const Tensor& image) const {
    const int p = cfg_.patch_size;
    const int grid = cfg_.patches_per_side();
    const int hw = cfg_.image_size;
    std::vector<double> out(static_cast<std::size_t>(cfg_.num_patches()) *
                            cfg_.patch_dim());
    const double* img = image.data().data();
    std::size_t idx = 0;
    for (int gy = 0; gy < grid; ++gy)
      for (int gx = 0; gx < grid; ++gx)
        for (int c = 0; c < 3; ++c)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
              out[idx++] = img[(static_cast<std::size_t>(c) * hw +
                                gy * p + py) *
                                   hw +
                               gx * p + px];
    return Tensor({cfg_.num_patches(), cfg_.patch_dim()}, std::move(out));
  }

  ViTConfig cfg_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
  Tape* tape_ = nullptr;
};

}  // namespace gta
