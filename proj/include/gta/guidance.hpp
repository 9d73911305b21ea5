#pragma once

#include <map>
#include <string>

#include "gta/vit.hpp"

namespace gta {

enum class GuidanceMethod {
  none,
  gta_attn_logits,
  msa_output,
  block_output,
  l2sp,
};

enum class FreezePolicy { none, attention_only, ffn_only };

inline std::string to_string(GuidanceMethod m) {
  switch (m) {
    case GuidanceMethod::none: return "none";
    case GuidanceMethod::gta_attn_logits: return "gta";
    case GuidanceMethod::msa_output: return "msa-guide";
    case GuidanceMethod::block_output: return "block-guide";
    case GuidanceMethod::l2sp: return "l2sp";
  }
  return "none";
}

inline GuidanceMethod guidance_method_from_string(const std::string& s) {
  if (s == "none") return GuidanceMethod::none;
  if (s == "gta") return GuidanceMethod::gta_attn_logits;
  if (s == "msa-guide") return GuidanceMethod::msa_output;
  if (s == "block-guide") return GuidanceMethod::block_output;
  if (s == "l2sp") return GuidanceMethod::l2sp;
  throw config_error("unknown guidance method '" + s +
                     "' (expected none|gta|msa-guide|block-guide|l2sp)");
}

inline std::string to_string(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::none: return "none";
    case FreezePolicy::attention_only: return "attention-only";
    case FreezePolicy::ffn_only: return "ffn-only";
  }
  return "none";
}

inline FreezePolicy freeze_policy_from_string(const std::string& s) {
  if (s == "none") return FreezePolicy::none;
  if (s == "attention-only") return FreezePolicy::attention_only;
  if (s == "ffn-only") return FreezePolicy::ffn_only;
  throw config_error("unknown freeze policy '" + s +
                     "' (expected none|attention-only|ffn-only)");
}

struct GuidanceSpec {
  GuidanceMethod method = GuidanceMethod::none;
  double lambda = 0.0;
  FreezePolicy freeze = FreezePolicy::none;

  void validate() const {
    if (lambda < 0.0)
      throw config_error("GuidanceSpec: lambda must be nonnegative");
  }

  bool uses_traces() const {
    return method == GuidanceMethod::gta_attn_logits ||
           method == GuidanceMethod::msa_output ||
           method == GuidanceMethod::block_output;
  }

  /// True when the regularizer contributes to the objective at all.
  bool active() const {
    return method != GuidanceMethod::none && lambda != 0.0;
  }
};

struct LossBreakdown {
  Tensor ce;
  Tensor reg;
  Tensor total;
  double lambda = 0.0;
};

/// Squared L2 distance between source and target [cls] attention-logit rows
/// (self-logit excluded), summed over every block and head. The source side
/// is detached, so gradients flow into the target only.
inline Tensor gta_loss(const AttentionTrace& src, const AttentionTrace& tgt) {
  require_compatible(src, tgt);
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < tgt.logits.size(); ++i) {
    const Tensor guide = detach(cls_attention_row(src.logits[i]));
    const Tensor row = cls_attention_row(tgt.logits[i]);
    acc = add(acc, sum(square(sub(row, guide))));
  }
  return acc;
}

/// Same objective applied to per-block MSA outputs or block outputs instead
/// of the attention logits (full token-by-feature tensors).
inline Tensor feature_guide_loss(GuidanceMethod kind, const AttentionTrace& src,
                                 const AttentionTrace& tgt) {
  if (kind != GuidanceMethod::msa_output && kind != GuidanceMethod::block_output)
    throw config_error("feature_guide_loss: kind must be msa-guide or block-guide");
  require_compatible(src, tgt);
  const auto& src_feats = kind == GuidanceMethod::msa_output
                              ? src.msa_outputs
                              : src.block_outputs;
  const auto& tgt_feats = kind == GuidanceMethod::msa_output
                              ? tgt.msa_outputs
                              : tgt.block_outputs;
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t m = 0; m < tgt_feats.size(); ++m)
    acc = add(acc, sum(square(sub(tgt_feats[m], detach(src_feats[m])))));
  return acc;
}

using ParamMap = std::map<std::string, Tensor>;

inline ParamMap param_map(const ViTModel& model) {
  ParamMap out;
  for (const Param& p : model.params()) out.emplace(p.name, p.value);
  return out;
}

inline bool is_head_param(const std::string& name) {
  return name.rfind("head.", 0) == 0;
}

/// Sum of squared distances to the starting-point weights over every
/// parameter except the classifier head (it has no pre-trained counterpart).
inline Tensor l2sp_penalty(const ParamMap& params, const ParamMap& anchors) {
  for (const auto& [name, value] : params)
    if (!is_head_param(name) && anchors.find(name) == anchors.end())
      throw config_error("l2sp_penalty: checkpoint incompatibility, anchor "
                         "missing parameter " + name);
  for (const auto& [name, value] : anchors)
    if (!is_head_param(name) && params.find(name) == params.end())
      throw config_error("l2sp_penalty: checkpoint incompatibility, model "
                         "missing parameter " + name);
  Tensor acc = Tensor::scalar(0.0);
  for (const auto& [name, value] : params) {
    if (is_head_param(name)) continue;
    const Tensor& anchor = anchors.at(name);
    if (anchor.shape() != value.shape())
      throw config_error("l2sp_penalty: checkpoint incompatibility, shape of " +
                         name + " differs");
    acc = add(acc, sum(square(sub(value, detach(anchor)))));
  }
  return acc;
}

/// Trainable mask over the model's parameter registry. Frozen parameters
/// receive no optimizer updates and no weight decay. Layer norms, embeddings
/// and the patch projection freeze under both restricted policies, so
/// attention-only and ffn-only partition the block weights.
inline std::vector<bool> apply_freeze_policy(FreezePolicy policy,
                                             const ViTModel& model) {
  std::vector<bool> mask(model.params().size(), true);
  if (policy == FreezePolicy::none) return mask;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const std::string& name = model.params()[i].name;
    const bool attention = name.find(".attn.") != std::string::npos;
    const bool ffn = name.find(".ffn.") != std::string::npos;
    const bool head = is_head_param(name);
    mask[i] = head || (policy == FreezePolicy::attention_only ? attention : ffn);
  }
  return mask;
}

/// total = ce + lambda * regularizer. When the regularizer is inactive the
/// returned total IS the ce tensor, bit for bit.
inline LossBreakdown combine_loss(const Tensor& ce, const Tensor& reg,
                                  const GuidanceSpec& spec) {
  spec.validate();
  if (!spec.active()) return {ce, Tensor::scalar(0.0), ce, spec.lambda};
  return {ce, reg, add(ce, scale(reg, spec.lambda)), spec.lambda};
}

inline LossBreakdown total_loss(const Tensor& ce, const GuidanceSpec& spec,
                                const AttentionTrace* src_trace,
                                const AttentionTrace* tgt_trace,
                                const ParamMap* params,
                                const ParamMap* init_params) {
  spec.validate();
  if (!spec.active()) return combine_loss(ce, Tensor::scalar(0.0), spec);
  Tensor reg;
  switch (spec.method) {
    case GuidanceMethod::gta_attn_logits:
    case GuidanceMethod::msa_output:
    case GuidanceMethod::block_output:
      if (!src_trace || !tgt_trace)
        throw config_error("total_loss: method " + to_string(spec.method) +
                           " requires source and target traces");
      reg = spec.method == GuidanceMethod::gta_attn_logits
                ? gta_loss(*src_trace, *tgt_trace)
                : feature_guide_loss(spec.method, *src_trace, *tgt_trace);
      break;
    case GuidanceMethod::l2sp:
      if (!params || !init_params)
        throw config_error("total_loss: l2sp requires parameter maps");
      reg = l2sp_penalty(*params, *init_params);
      break;
    case GuidanceMethod::none:
      reg = Tensor::scalar(0.0);
      break;
  }
  return combine_loss(ce, reg, spec);
}

}  // namespace gta
