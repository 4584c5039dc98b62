#pragma once

// Fixed-context chunked inference.  A sequence of T frames is split into
// ceil(T/K) chunks; chunk i keeps output frames [iK, min((i+1)K, T)) and runs
// the model over the padded cover [max(0, iK-P), min(T, (i+1)K+P)).  Keep
// ranges partition [0, T) exactly, so per-chunk outputs concatenate into a
// full-length answer while every attention window stays bounded by K + 2P.
//
// Chunks are pure functions of (weights, features, style, chunk); they share
// no state and may run in any order or concurrently.

#include <cstdint>
#include <vector>

#include "speechanim/lora.hpp"
#include "speechanim/model.hpp"
#include "speechanim/types.hpp"

namespace speechanim {

struct Chunk {
  Index keep_begin = 0;   // inclusive, fps frames
  Index keep_end = 0;     // exclusive
  Index cover_begin = 0;  // inclusive; cover ⊇ keep
  Index cover_end = 0;    // exclusive

  Index keep_frames() const { return keep_end - keep_begin; }
  Index cover_frames() const { return cover_end - cover_begin; }
};

struct ChunkPlan {
  Index total_frames = 0;
  Index chunk_size = 0;  // K
  Index padding = 0;     // P
  std::vector<Chunk> chunks;
};

// Builds the plan for T frames.  K >= 1, P >= 0, T >= 1 (ConfigError).
ChunkPlan plan_chunks(Index total_frames, Index chunk_size, Index padding);

// Throws ConfigError unless the chunks exactly partition [0, T), every cover
// contains its keep range with correct clamped padding, and windows are
// bounded by K + 2P.
void validate_plan(const ChunkPlan& plan);

struct AttentionOpCounts {
  std::uint64_t full = 0;     // causal scores over the whole sequence: T(T+1)/2
  std::uint64_t chunked = 0;  // sum of c(c+1)/2 over chunk covers
};

// Per-layer, per-head causal self-attention score counts for a length-T
// sequence, unchunked vs chunked.
AttentionOpCounts attention_ops(Index total_frames, Index chunk_size, Index padding);

// Runs one chunk: slices the cover from features already on the fps timeline,
// streams it through the model, returns only the keep rows.
Matrix infer_chunk_offsets(const ModelWeights& w, const Matrix& feats_fps,
                           const RowVector& style, const Chunk& chunk,
                           const LoraSet* lora = nullptr);

// Full chunked inference: resamples features once, then runs every chunk and
// stitches the keep rows together.  n_threads > 1 runs chunks concurrently;
// the result is identical (chunks are independent).
Matrix chunked_infer_offsets(const ModelWeights& w, const Matrix& features,
                             const RowVector& style, Index chunk_size, Index padding,
                             const LoraSet* lora = nullptr, int n_threads = 1);

}  // namespace speechanim
