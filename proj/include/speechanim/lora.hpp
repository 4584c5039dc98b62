#pragma once

// Low-rank adaptation of the model's linear layers.
//
// A wrapped layer with base weight W (in x out) computes
//   y = x W + b + (alpha / r) * (x A) B^T
// with A (in x r) and B (out x r).  A is initialised from N(0, 0.02^2), B to
// zero, so a freshly attached adaptor is output-identical to the base model.
// Only A and B train; base tensors are never touched.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "speechanim/types.hpp"

namespace speechanim {

struct ModelWeights;  // model.hpp

enum class LoraTarget { kTransformerDecoder, kMotionDecoder, kBoth };

struct LoraConfig {
  int rank = 4;
  double alpha = 8.0;
  LoraTarget targets = LoraTarget::kBoth;
  // Permits rank >= min(layer dims); a full-rank "adaptor" stops being
  // low-rank, so this stays opt-in (the rank sweep needs it at desk scale).
  bool allow_full_rank = false;
};

struct LoraAdaptor {
  std::string target;  // name of the wrapped weight tensor
  Matrix a;            // in x r
  Matrix b;            // out x r
  int rank = 0;
  double alpha = 0.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
  // Explicit (alpha / r) * A B^T, shaped like the wrapped weight.
  Matrix delta() const { return scaling() * (a * b.transpose()); }
};

// Adaptors keyed by wrapped tensor name, plus lookup used inside the model's
// linear layers.
struct LoraSet {
  LoraConfig config;
  std::map<std::string, LoraAdaptor> adaptors;

  const LoraAdaptor* find(const std::string& target) const {
    auto it = adaptors.find(target);
    return it == adaptors.end() ? nullptr : &it->second;
  }
};

// Gradient buffers for a LoraSet, same keys.
struct LoraGrad {
  Matrix da;
  Matrix db;
};
using LoraGradMap = std::map<std::string, LoraGrad>;

// Names of the tensors a target selection resolves to: all self-attention
// Q/K/V/O projection weights for the transformer decoder, every motion-decoder
// linear weight for the motion decoder.
std::vector<std::string> lora_target_names(const ModelWeights& base, LoraTarget targets);

// Builds seeded adaptors for every resolved target.  Throws ConfigError on an
// unknown target or (unless allow_full_rank) rank >= min(layer dims).
LoraSet lora_attach(const ModelWeights& base, const LoraConfig& config, std::uint64_t seed);

// Returns a copy of the base with every adaptor folded into its wrapped
// weight; the result carries no adaptor structure.
ModelWeights lora_merge(const ModelWeights& base, const LoraSet& lora);

// Sum of r * (in + out) over adaptors.
std::int64_t lora_count_trainable(const LoraSet& lora);

LoraGradMap lora_zero_grads(const LoraSet& lora);

const char* lora_target_name(LoraTarget t);
LoraTarget lora_target_from_string(const std::string& s);

}  // namespace speechanim
