#pragma once

// Seeded synthetic corpus: subjects x sentences of (acoustic features, vertex
// trajectories), plus the evaluation metrics.
//
// A shared "teacher" signal chain produces ground truth: causal temporal
// convolution over the features, 2:1 decimation onto the fps timeline (grid-
// aligned with the model's linear resampler), and a small tanh MLP emitting a
// 360-dim backbone trajectory.  Every subject warps that backbone through a
// rank-2 perturbation with a SHARED basis plus a per-subject bias, so
// cross-subject differences have low rank by construction - after removing
// the constant directions, exactly rank 2.
//
// Generation is fully determined by the master seed; regeneration is
// bit-identical.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "speechanim/rng.hpp"
#include "speechanim/types.hpp"

namespace speechanim {

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);

struct CorpusConfig {
  int n_subjects = 12;  // 8 train / 2 val / 2 test
  int n_train = 8;
  int n_val = 2;
  int n_test = 2;
  int sentences_per_subject = 40;
  int held_out_per_subject = 10;  // trailing sentences, test-only
  int fps = 25;
  int feature_rate = 50;
  int d_audio = 16;
  int n_vertices = 120;
  int min_frames = 75;  // sentence length range at fps (~3-6 s)
  int max_frames = 150;

  // teacher signal chain
  int conv_channels = 24;
  int conv_width = 9;
  int conv_dilation = 3;  // receptive field 1 + 8*3 = 25 features = 0.5 s
  int teacher_hidden = 48;
  double backbone_scale = 0.3;
  double style_scale = 0.1;   // rank-2 per-subject perturbation strength
  double bias_sigma = 0.02;   // per-subject constant offset
  double neutral_sigma = 1.0; // per-subject neutral face
  double noise_sigma = 0.08;  // audio noise before width-5 smoothing
  double vertex_bound = 50.0; // sanity bound on |vertices|

  std::uint64_t seed = 1234;

  int out_dim() const { return 3 * n_vertices; }
  void validate() const;  // throws ConfigError

  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

struct Sentence {
  int subject = 0;
  int index = 0;   // position within the subject (-1 for concatenations)
  Matrix audio;    // frames_in x d_audio at feature_rate
  Matrix vertices; // T x 3*n_vertices, absolute positions at fps
  std::vector<std::uint8_t> silence_mask;  // length T; 1 = silence (excluded from metrics)
  RowVector neutral;  // the subject's neutral face, 1 x 3*n_vertices

  Index frames() const { return vertices.rows(); }
  // ground-truth offsets from the neutral face (the model's regression target)
  Matrix offsets() const;
};

struct Subject {
  int id = 0;
  Split split = Split::kTrain;
  RowVector neutral;
  std::vector<Sentence> sentences;  // [0, 30) adaptation pool, [30, 40) held out
};

struct Corpus {
  CorpusConfig config;
  std::vector<Subject> subjects;

  const Subject& subject(int id) const;
  std::vector<int> split_ids(Split s) const;
};

Corpus generate_corpus(const CorpusConfig& config);

// Re-derives the deterministic teacher chain for this config and renders the
// given features as the given subject - exactly the vertex trajectory the
// generator would pair with this audio.  Lets tests probe properties the
// corpus alone cannot show (e.g. two subjects on identical audio).
Matrix render_subject_vertices(const CorpusConfig& config, int subject_id, const Matrix& audio);

// Joins same-subject sentences with gap_seconds of silence in between:
// zero audio, neutral-pose vertices, silence_mask set on exactly the gap
// frames.  A single sentence passes through unchanged.
Sentence concat_sentences(const std::vector<Sentence>& parts, double gap_seconds = 1.0,
                          int fps = 25, int feature_rate = 50);

// --- metrics ----------------------------------------------------------------
// All three average per-vertex Euclidean distances over unmasked frames:
//   l2_face  - mean over frames and all vertices,
//   l2_lip   - mean over frames and the lip subset,
//   lip_max  - mean over frames of the worst lip vertex.
// Throws ConfigError when every frame is masked, ShapeError on disagreement.

double l2_face(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask);
double l2_lip(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask,
              const std::vector<int>& lip_ids);
double lip_max(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask,
               const std::vector<int>& lip_ids);

struct MetricTriple {
  double l2_face = 0.0;
  double l2_lip = 0.0;
  double lip_max = 0.0;

  nlohmann::json to_json() const;
};

MetricTriple eval_metrics(const Matrix& pred, const Matrix& gt,
                          const std::vector<std::uint8_t>& mask,
                          const std::vector<int>& lip_ids);

// Frame/vertex-weighted pooling across sentences; mean() over everything
// added so far equals the metric of the concatenated sequences.
class MetricAccumulator {
 public:
  void add(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask,
           const std::vector<int>& lip_ids);
  MetricTriple mean() const;  // throws ConfigError when nothing was added

 private:
  double face_sum_ = 0.0;
  double lip_sum_ = 0.0;
  double lip_max_sum_ = 0.0;
  std::int64_t face_count_ = 0;
  std::int64_t lip_count_ = 0;
  std::int64_t frame_count_ = 0;
};

}  // namespace speechanim
