#include "speechanim/lora.hpp"

#include <algorithm>

#include "speechanim/model.hpp"
#include "speechanim/rng.hpp"

namespace speechanim {

const char* lora_target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::kTransformerDecoder: return "transformer_decoder";
    case LoraTarget::kMotionDecoder: return "motion_decoder";
    case LoraTarget::kBoth: return "both";
  }
  throw ConfigError("lora_target_name: bad enum value");
}

LoraTarget lora_target_from_string(const std::string& s) {
  if (s == "transformer_decoder") return LoraTarget::kTransformerDecoder;
  if (s == "motion_decoder") return LoraTarget::kMotionDecoder;
  if (s == "both") return LoraTarget::kBoth;
  throw ConfigError("unknown adaptation target '" + s +
                    "' (expected transformer_decoder|motion_decoder|both)");
}

std::vector<std::string> lora_target_names(const ModelWeights& base, LoraTarget targets) {
  std::vector<std::string> names;
  if (targets == LoraTarget::kTransformerDecoder || targets == LoraTarget::kBoth) {
    auto attn = base.attention_projection_weights();
    names.insert(names.end(), attn.begin(), attn.end());
  }
  if (targets == LoraTarget::kMotionDecoder || targets == LoraTarget::kBoth) {
    auto motion = base.motion_decoder_weights();
    names.insert(names.end(), motion.begin(), motion.end());
  }
  return names;
}

LoraSet lora_attach(const ModelWeights& base, const LoraConfig& config, std::uint64_t seed) {
  if (config.rank < 1) throw ConfigError("lora_attach: rank must be >= 1");
  if (!(config.alpha > 0.0)) throw ConfigError("lora_attach: alpha must be positive");

  LoraSet set;
  set.config = config;
  Rng root(seed);

  for (const std::string& name : lora_target_names(base, config.targets)) {
    const Matrix& weight = base.at(name);  // throws ConfigError on unknown target
    const Index in = weight.rows();
    const Index out = weight.cols();
    if (!config.allow_full_rank && config.rank >= std::min(in, out)) {
      throw ConfigError("lora_attach: rank " + std::to_string(config.rank) +
                        " not below min dim of " + name + " (" + shape_str(weight) + ")");
    }

    LoraAdaptor ad;
    ad.target = name;
    ad.rank = config.rank;
    ad.alpha = config.alpha;
    Rng r = root.fork(name);
    ad.a = Matrix(in, config.rank);
    for (Index i = 0; i < in; ++i) {
      for (Index j = 0; j < config.rank; ++j) ad.a(i, j) = r.normal(0.0, 0.02);
    }
    ad.b = Matrix::Zero(out, config.rank);
    set.adaptors[name] = std::move(ad);
  }
  return set;
}

ModelWeights lora_merge(const ModelWeights& base, const LoraSet& lora) {
  ModelWeights merged = base;
  for (const auto& [name, ad] : lora.adaptors) {
    merged.at(name) += ad.delta();
  }
  return merged;
}

std::int64_t lora_count_trainable(const LoraSet& lora) {
  std::int64_t n = 0;
  for (const auto& [name, ad] : lora.adaptors) {
    n += static_cast<std::int64_t>(ad.rank) * (ad.a.rows() + ad.b.rows());
  }
  return n;
}

LoraGradMap lora_zero_grads(const LoraSet& lora) {
  LoraGradMap g;
  for (const auto& [name, ad] : lora.adaptors) {
    g[name] = LoraGrad{Matrix::Zero(ad.a.rows(), ad.a.cols()),
                       Matrix::Zero(ad.b.rows(), ad.b.cols())};
  }
  return g;
}

}  // namespace speechanim
