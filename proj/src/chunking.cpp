#include "speechanim/chunking.hpp"

#include <algorithm>
#include <atomic>
#include <string>
#include <thread>

namespace speechanim {

ChunkPlan plan_chunks(Index total_frames, Index chunk_size, Index padding) {
  if (total_frames < 1) throw ConfigError("plan_chunks: total_frames must be >= 1");
  if (chunk_size < 1) throw ConfigError("plan_chunks: chunk_size must be >= 1");
  if (padding < 0) throw ConfigError("plan_chunks: padding must be >= 0");

  ChunkPlan plan;
  plan.total_frames = total_frames;
  plan.chunk_size = chunk_size;
  plan.padding = padding;
  const Index n = (total_frames + chunk_size - 1) / chunk_size;  // ceil
  plan.chunks.reserve(n);
  for (Index i = 0; i < n; ++i) {
    Chunk c;
    c.keep_begin = i * chunk_size;
    c.keep_end = std::min((i + 1) * chunk_size, total_frames);
    c.cover_begin = std::max<Index>(0, c.keep_begin - padding);
    c.cover_end = std::min(total_frames, c.keep_end + padding);
    plan.chunks.push_back(c);
  }
  return plan;
}

void validate_plan(const ChunkPlan& plan) {
  const Index T = plan.total_frames;
  const Index K = plan.chunk_size;
  const Index P = plan.padding;
  if (T < 1 || K < 1 || P < 0) throw ConfigError("validate_plan: bad plan dimensions");
  const Index expect_n = (T + K - 1) / K;
  if (static_cast<Index>(plan.chunks.size()) != expect_n) {
    throw ConfigError("validate_plan: " + std::to_string(plan.chunks.size()) +
                      " chunks, expected " + std::to_string(expect_n));
  }
  Index next = 0;
  for (const Chunk& c : plan.chunks) {
    if (c.keep_begin != next || c.keep_end <= c.keep_begin || c.keep_end > T) {
      throw ConfigError("validate_plan: keep ranges do not partition [0, T)");
    }
    if (c.cover_begin != std::max<Index>(0, c.keep_begin - P) ||
        c.cover_end != std::min(T, c.keep_end + P)) {
      throw ConfigError("validate_plan: cover range does not match clamped padding");
    }
    if (c.cover_frames() > K + 2 * P) {
      throw ConfigError("validate_plan: cover exceeds K + 2P");
    }
    next = c.keep_end;
  }
  if (next != T) throw ConfigError("validate_plan: keep ranges stop short of T");
}

AttentionOpCounts attention_ops(Index total_frames, Index chunk_size, Index padding) {
  const ChunkPlan plan = plan_chunks(total_frames, chunk_size, padding);
  AttentionOpCounts counts;
  const auto tri = [](std::uint64_t n) { return n * (n + 1) / 2; };
  counts.full = tri(static_cast<std::uint64_t>(total_frames));
  for (const Chunk& c : plan.chunks) {
    counts.chunked += tri(static_cast<std::uint64_t>(c.cover_frames()));
  }
  return counts;
}

Matrix infer_chunk_offsets(const ModelWeights& w, const Matrix& feats_fps,
                           const RowVector& style, const Chunk& chunk, const LoraSet* lora) {
  if (chunk.cover_begin < 0 || chunk.cover_end > feats_fps.rows() ||
      chunk.keep_begin < chunk.cover_begin || chunk.keep_end > chunk.cover_end) {
    throw ConfigError("infer_chunk_offsets: chunk outside the feature timeline");
  }
  const Matrix cover = feats_fps.middleRows(chunk.cover_begin, chunk.cover_frames());
  const Matrix out = infer_offsets_fps(w, cover, style, lora);
  return out.middleRows(chunk.keep_begin - chunk.cover_begin, chunk.keep_frames());
}

Matrix chunked_infer_offsets(const ModelWeights& w, const Matrix& features,
                             const RowVector& style, Index chunk_size, Index padding,
                             const LoraSet* lora, int n_threads) {
  const Matrix feats_fps = resample_linear(features, w.config.feature_rate, w.config.fps);
  const ChunkPlan plan = plan_chunks(feats_fps.rows(), chunk_size, padding);
  Matrix out(feats_fps.rows(), w.config.out_dim());

  const int workers = std::max(1, std::min(n_threads, static_cast<int>(plan.chunks.size())));
  if (workers == 1) {
    for (const Chunk& c : plan.chunks) {
      out.middleRows(c.keep_begin, c.keep_frames()) =
          infer_chunk_offsets(w, feats_fps, style, c, lora);
    }
    return out;
  }

  std::atomic<std::size_t> cursor{0};
  std::atomic<bool> failed{false};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= plan.chunks.size() || failed.load()) return;
      try {
        const Chunk& c = plan.chunks[i];
        out.middleRows(c.keep_begin, c.keep_frames()) =
            infer_chunk_offsets(w, feats_fps, style, c, lora);
      } catch (...) {
        failed.store(true);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failed.load()) throw IoError("chunked_infer_offsets: a chunk worker failed");
  return out;
}

}  // namespace speechanim
