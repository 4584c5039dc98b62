#pragma once

// Speech-to-animation model: a learnable linear audio encoder over synthetic
// acoustic features, a causal transformer decoder with full cross-attention to
// the encoded audio, and a motion decoder emitting per-frame vertex offsets
// from a per-subject neutral face.
//
// Two style-conditioning modes:
//   kFaceformer - autoregressive.  Token t encodes the previous output frame,
//                 plus the style code and a sinusoidal positional term; the
//                 motion decoder is a single linear layer.  Training uses
//                 teacher forcing.
//   kImitator   - non-autoregressive.  Token t is the shared start token plus
//                 the frame's audio encoding (no positional term: frame
//                 identity comes from content, keeping the decoder
//                 translation-equivariant), the style code is added to the
//                 transformer output, and a 2-layer MLP decodes motion.
//
// Causal self-attention carries a fixed per-head recency penalty on the
// scores, linear in token distance with geometric per-head slopes, so heads
// specialize into a ladder of context horizons.  It depends only on distance
// (never absolute position), so chunked and full inference still agree away
// from chunk edges.  Cross-attention to the audio is unbiased.
//
// The training path caches every intermediate for the hand-written backward;
// the inference path streams tokens through per-layer K/V caches so that a
// causal pass over T frames evaluates exactly T(T+1)/2 self-attention scores
// per layer per head (counted by the instrumentation below).

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "speechanim/lora.hpp"
#include "speechanim/types.hpp"

namespace speechanim {

enum class StyleMode { kFaceformer, kImitator };

const char* style_mode_name(StyleMode m);
StyleMode style_mode_from_string(const std::string& s);

struct ModelConfig {
  int d_audio = 16;
  int d_model = 32;
  int n_heads = 4;
  int n_layers = 2;
  int n_vertices = 120;
  int fps = 25;
  int feature_rate = 50;  // Hz of the input acoustic features
  int n_styles = 8;
  StyleMode style_mode = StyleMode::kImitator;
  std::vector<int> lip_vertex_ids;  // defaults to 0..23
  int ffn_hidden = 128;
  int motion_hidden = 256;  // kImitator motion MLP width
  double ln_eps = 1e-5;

  ModelConfig();
  int out_dim() const { return 3 * n_vertices; }
  int d_head() const { return d_model / n_heads; }
  void validate() const;  // throws ConfigError

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Named dense tensors.  Layer naming:
//   audio_proj.{w,b}                     d_audio x d_model encoder projection
//   dec{i}.self_{q,k,v,o}.{w,b}          self-attention projections
//   dec{i}.cross_{q,k,v,o}.{w,b}         cross-attention projections
//   dec{i}.norm{1,2,3}.{g,b}             pre-attention / pre-cross / pre-ffn LN
//   dec{i}.ffn{1,2}.{w,b}                position-wise MLP (tanh)
//   final_norm.{g,b}
//   motion1.{w,b} [, motion2.{w,b}]      motion decoder (2 layers in kImitator)
//   style_table                          n_styles x d_model
//   start_token (kImitator) / prev_enc.{w,b} (kFaceformer)
struct ModelWeights {
  ModelConfig config;
  std::map<std::string, Matrix> tensors;

  static ModelWeights init(const ModelConfig& config, std::uint64_t seed);

  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  // Weight names of every linear layer (LoRA attachment points).
  std::vector<std::string> attention_projection_weights() const;
  std::vector<std::string> motion_decoder_weights() const;

  std::int64_t parameter_count() const;
};

using GradMap = std::map<std::string, Matrix>;
GradMap zero_grads(const ModelWeights& w);

// --- instrumentation ---------------------------------------------------------
// Process-wide atomic counters of evaluated attention scores (every layer and
// head; both training and inference paths count).  Thread-safe.

struct AttentionCounts {
  std::uint64_t self_scores = 0;
  std::uint64_t cross_scores = 0;
};

void reset_attention_counters();
AttentionCounts attention_counters();

// --- shared pieces -----------------------------------------------------------

// Sinusoidal positional term, PE[2i] = sin(t / 10000^(2i/d)), PE[2i+1] = cos.
RowVector positional_term(int t, int d_model);

// Linear-interpolation resampling along rows (time) from one rate to another;
// output length is round(rows * to_rate / from_rate).  Constant and linear
// signals are preserved.  Throws on fewer than 2 input rows.
Matrix resample_linear(const Matrix& x, int from_rate, int to_rate);

// resample_linear to the fps timeline followed by the learnable projection.
Matrix encode_audio(const ModelWeights& w, const Matrix& features);

// --- training path -----------------------------------------------------------

struct AttentionCache {
  Matrix ln_out;            // normalised block input
  Matrix q, k, v;           // projections (k, v over audio for cross)
  std::vector<Matrix> attn; // per-head probabilities (self: exact zeros above diag)
  Matrix ctx;               // concatenated head contexts, before the O projection
};

struct FfnCache {
  Matrix ln_out;
  Matrix h;  // post-tanh hidden
};

struct LayerCache {
  Matrix self_in, cross_in, ffn_in;  // residual stream at each block entry
  AttentionCache self_attn, cross_attn;
  FfnCache ffn;
};

struct ForwardCache {
  Matrix feats_fps;    // resampled input features, T x d_audio
  Matrix audio_enc;    // T x d_model
  Matrix prev_in;      // kFaceformer: teacher-forced previous offsets, T x out
  Matrix tokens;       // transformer input, T x d_model
  std::vector<LayerCache> layers;
  Matrix stack_out;    // before the final LN
  Matrix final_ln_out;
  Matrix motion_in;    // kImitator: final_ln_out + style
  Matrix motion_h;     // kImitator: post-tanh hidden
  Matrix pred;         // offsets, T x out
};

// Full forward over one sentence; returns predicted offsets (T x out) and
// fills the cache.  teacher_prev_offsets (required in kFaceformer mode, null
// otherwise) holds the ground-truth offsets whose row t-1 feeds token t.
Matrix model_forward(const ModelWeights& w, const Matrix& features, const RowVector& style,
                     const LoraSet* lora, ForwardCache& cache,
                     const Matrix* teacher_prev_offsets = nullptr);

struct BackwardOptions {
  bool weight_grads = true;  // false: skip base-weight gradients (adaptor-only training)
};

// Accumulates gradients of the cached forward into the provided buffers (any
// may be null).  dpred is dL/d(pred offsets).
void model_backward(const ModelWeights& w, const ForwardCache& cache, const Matrix& dpred,
                    const LoraSet* lora, const BackwardOptions& opts, GradMap* dweights,
                    LoraGradMap* dlora, RowVector* dstyle);

// --- inference path ----------------------------------------------------------

// Streaming causal inference over features already on the fps timeline
// (T x d_audio).  Deterministic; pure given (weights, inputs, config).
Matrix infer_offsets_fps(const ModelWeights& w, const Matrix& feats_fps, const RowVector& style,
                         const LoraSet* lora = nullptr);

// Same, but resamples raw features (frames_in x d_audio at feature_rate) first.
Matrix infer_offsets(const ModelWeights& w, const Matrix& features, const RowVector& style,
                     const LoraSet* lora = nullptr);

}  // namespace speechanim
