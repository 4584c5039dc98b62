#include "speechanim/data.hpp"

#include <algorithm>
#include <cmath>

namespace speechanim {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw ConfigError("split_name: bad enum value");
}

void CorpusConfig::validate() const {
  if (n_subjects < 1 || sentences_per_subject < 1) {
    throw ConfigError("corpus config: need at least one subject and sentence");
  }
  if (n_train + n_val + n_test != n_subjects) {
    throw ConfigError("corpus config: split sizes " + std::to_string(n_train) + "+" +
                      std::to_string(n_val) + "+" + std::to_string(n_test) +
                      " do not sum to n_subjects = " + std::to_string(n_subjects));
  }
  if (n_train < 1 || n_val < 0 || n_test < 0) {
    throw ConfigError("corpus config: bad split sizes");
  }
  if (held_out_per_subject < 0 || held_out_per_subject >= sentences_per_subject) {
    throw ConfigError("corpus config: held_out_per_subject must be in [0, sentences)");
  }
  if (fps < 1 || feature_rate < 1 || d_audio < 1 || n_vertices < 1) {
    throw ConfigError("corpus config: dimensions must be positive");
  }
  if (min_frames < 2 || max_frames < min_frames) {
    throw ConfigError("corpus config: bad frame range");
  }
  if (conv_channels < 1 || conv_width < 1 || conv_dilation < 1 || teacher_hidden < 1) {
    throw ConfigError("corpus config: bad teacher dimensions");
  }
  if (!(noise_sigma >= 0.0) || !(vertex_bound > 0.0)) {
    throw ConfigError("corpus config: bad noise/bound values");
  }
}

nlohmann::json CorpusConfig::to_json() const {
  return nlohmann::json{{"n_subjects", n_subjects},
                        {"n_train", n_train},
                        {"n_val", n_val},
                        {"n_test", n_test},
                        {"sentences_per_subject", sentences_per_subject},
                        {"held_out_per_subject", held_out_per_subject},
                        {"fps", fps},
                        {"feature_rate", feature_rate},
                        {"d_audio", d_audio},
                        {"n_vertices", n_vertices},
                        {"min_frames", min_frames},
                        {"max_frames", max_frames},
                        {"conv_channels", conv_channels},
                        {"conv_width", conv_width},
                        {"conv_dilation", conv_dilation},
                        {"teacher_hidden", teacher_hidden},
                        {"backbone_scale", backbone_scale},
                        {"style_scale", style_scale},
                        {"bias_sigma", bias_sigma},
                        {"neutral_sigma", neutral_sigma},
                        {"noise_sigma", noise_sigma},
                        {"vertex_bound", vertex_bound},
                        {"seed", seed}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.n_subjects = j.at("n_subjects").get<int>();
  c.n_train = j.at("n_train").get<int>();
  c.n_val = j.at("n_val").get<int>();
  c.n_test = j.at("n_test").get<int>();
  c.sentences_per_subject = j.at("sentences_per_subject").get<int>();
  c.held_out_per_subject = j.at("held_out_per_subject").get<int>();
  c.fps = j.at("fps").get<int>();
  c.feature_rate = j.at("feature_rate").get<int>();
  c.d_audio = j.at("d_audio").get<int>();
  c.n_vertices = j.at("n_vertices").get<int>();
  c.min_frames = j.at("min_frames").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
  c.conv_channels = j.at("conv_channels").get<int>();
  c.conv_width = j.at("conv_width").get<int>();
  c.conv_dilation = j.at("conv_dilation").get<int>();
  c.teacher_hidden = j.at("teacher_hidden").get<int>();
  c.backbone_scale = j.at("backbone_scale").get<double>();
  c.style_scale = j.at("style_scale").get<double>();
  c.bias_sigma = j.at("bias_sigma").get<double>();
  c.neutral_sigma = j.at("neutral_sigma").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.vertex_bound = j.at("vertex_bound").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

Matrix Sentence::offsets() const {
  Matrix o = vertices;
  o.rowwise() -= neutral;
  return o;
}

const Subject& Corpus::subject(int id) const {
  for (const Subject& s : subjects) {
    if (s.id == id) return s;
  }
  throw ConfigError("corpus: no subject with id " + std::to_string(id));
}

std::vector<int> Corpus::split_ids(Split s) const {
  std::vector<int> ids;
  for (const Subject& subj : subjects) {
    if (subj.split == s) ids.push_back(subj.id);
  }
  return ids;
}

// --- teacher ----------------------------------------------------------------

namespace {

Matrix gaussian_matrix(Rng& rng, Index rows, Index cols, double sigma) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, sigma);
  }
  return m;
}

struct Teacher {
  std::vector<Matrix> conv_w;  // conv_width taps, each d_audio x conv_channels
  RowVector conv_b;
  Matrix w1;  // conv_channels x hidden
  RowVector b1;
  Matrix w2;  // hidden x out
  RowVector b2;
  Matrix style_basis;  // out x 2, shared across subjects
};

Teacher make_teacher(const CorpusConfig& cfg, Rng rng) {
  Teacher t;
  const double conv_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.conv_width * cfg.d_audio));
  t.conv_w.reserve(cfg.conv_width);
  for (int k = 0; k < cfg.conv_width; ++k) {
    t.conv_w.push_back(gaussian_matrix(rng, cfg.d_audio, cfg.conv_channels, conv_sigma));
  }
  t.conv_b = RowVector::Zero(cfg.conv_channels);
  t.w1 = gaussian_matrix(rng, cfg.conv_channels, cfg.teacher_hidden,
                         1.0 / std::sqrt(static_cast<double>(cfg.conv_channels)));
  t.b1 = RowVector::Zero(cfg.teacher_hidden);
  t.w2 = gaussian_matrix(rng, cfg.teacher_hidden, cfg.out_dim(),
                         cfg.backbone_scale / std::sqrt(static_cast<double>(cfg.teacher_hidden)));
  t.b2 = RowVector::Zero(cfg.out_dim());
  t.style_basis =
      gaussian_matrix(rng, cfg.out_dim(), 2, 1.0 / std::sqrt(static_cast<double>(cfg.out_dim())));
  return t;
}

// Causal dilated convolution + tanh over the feature timeline, 2:1 decimation
// onto the fps grid (even rows - exactly what resample_linear at 50->25
// selects), then the 2-layer MLP.  Returns the backbone trajectory, T x out.
Matrix teacher_backbone(const CorpusConfig& cfg, const Teacher& t, const Matrix& audio) {
  const Index frames_in = audio.rows();
  Matrix conv = Matrix::Zero(frames_in, cfg.conv_channels);
  for (Index at = 0; at < frames_in; ++at) {
    RowVector acc = t.conv_b;
    for (int k = 0; k < cfg.conv_width; ++k) {
      const Index src = at - static_cast<Index>(k) * cfg.conv_dilation;
      if (src < 0) continue;  // causal zero padding before the first frame
      acc.noalias() += audio.row(src) * t.conv_w[k];
    }
    conv.row(at) = acc.array().tanh();
  }
  const Index T = frames_in / 2;
  Matrix dec(T, cfg.conv_channels);
  for (Index i = 0; i < T; ++i) dec.row(i) = conv.row(2 * i);
  Matrix h = (dec * t.w1).rowwise() + t.b1;
  h = h.array().tanh();
  return (h * t.w2).rowwise() + t.b2;
}

struct SubjectParams {
  Matrix u;         // out x 2
  RowVector bias;   // 1 x out
  RowVector neutral;
};

SubjectParams make_subject(const CorpusConfig& cfg, Rng rng) {
  SubjectParams p;
  p.u = gaussian_matrix(rng, cfg.out_dim(), 2, 1.0);
  p.bias = gaussian_matrix(rng, 1, cfg.out_dim(), cfg.bias_sigma).row(0);
  p.neutral = gaussian_matrix(rng, 1, cfg.out_dim(), cfg.neutral_sigma).row(0);
  return p;
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Sum of three random sinusoids per channel plus smoothed Gaussian noise.
Matrix make_audio(const CorpusConfig& cfg, Rng& rng, Index frames_in) {
  Matrix audio = Matrix::Zero(frames_in, cfg.d_audio);
  for (int c = 0; c < cfg.d_audio; ++c) {
    for (int k = 0; k < 3; ++k) {
      const double freq = rng.uniform(0.5, 8.0);
      const double phase = rng.uniform(0.0, kTwoPi);
      const double amp = rng.uniform(0.3, 1.0);
      for (Index ft = 0; ft < frames_in; ++ft) {
        const double seconds = static_cast<double>(ft) / cfg.feature_rate;
        audio(ft, c) += amp * std::sin(kTwoPi * freq * seconds + phase);
      }
    }
  }
  if (cfg.noise_sigma > 0.0) {
    const Matrix noise = gaussian_matrix(rng, frames_in, cfg.d_audio, cfg.noise_sigma);
    // centred width-5 moving average, window clamped at the edges
    for (Index ft = 0; ft < frames_in; ++ft) {
      const Index lo = std::max<Index>(0, ft - 2);
      const Index hi = std::min(frames_in - 1, ft + 2);
      audio.row(ft) += noise.middleRows(lo, hi - lo + 1).colwise().mean();
    }
  }
  return audio;
}

}  // namespace

Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.config = cfg;
  Rng root(cfg.seed);
  const Teacher teacher = make_teacher(cfg, root.fork("teacher"));

  corpus.subjects.resize(cfg.n_subjects);
  for (int s = 0; s < cfg.n_subjects; ++s) {
    Subject& subj = corpus.subjects[s];
    subj.id = s;
    subj.split = s < cfg.n_train            ? Split::kTrain
                 : s < cfg.n_train + cfg.n_val ? Split::kVal
                                               : Split::kTest;
    const SubjectParams params = make_subject(cfg, root.fork("subject", s));
    subj.neutral = params.neutral;

    Rng len_rng = root.fork("length", s);
    const Rng audio_root = root.fork("audio", s);
    subj.sentences.reserve(cfg.sentences_per_subject);
    for (int j = 0; j < cfg.sentences_per_subject; ++j) {
      const Index T = len_rng.uniform_int(cfg.min_frames, cfg.max_frames);
      Rng audio_rng = audio_root.fork("sentence", j);

      Sentence sent;
      sent.subject = s;
      sent.index = j;
      sent.audio = make_audio(cfg, audio_rng, 2 * T);
      const Matrix backbone = teacher_backbone(cfg, teacher, sent.audio);
      // rank-2 style warp with the shared basis, plus per-subject bias
      Matrix offs = backbone;
      offs.noalias() += cfg.style_scale * ((backbone * teacher.style_basis) * params.u.transpose());
      offs.rowwise() += params.bias;
      sent.vertices = offs.rowwise() + params.neutral;
      sent.neutral = params.neutral;
      sent.silence_mask.assign(T, 0);

      if (sent.vertices.cwiseAbs().maxCoeff() > cfg.vertex_bound) {
        throw ConfigError("generate_corpus: vertex magnitude exceeded vertex_bound; "
                          "lower the teacher scales");
      }
      subj.sentences.push_back(std::move(sent));
    }
  }
  return corpus;
}

Matrix render_subject_vertices(const CorpusConfig& cfg, int subject_id, const Matrix& audio) {
  cfg.validate();
  if (subject_id < 0 || subject_id >= cfg.n_subjects) {
    throw ConfigError("render_subject_vertices: subject " + std::to_string(subject_id) +
                      " outside [0, " + std::to_string(cfg.n_subjects) + ")");
  }
  if (audio.cols() != cfg.d_audio || audio.rows() < 2) {
    throw ShapeError("render_subject_vertices: audio " + shape_str(audio) + ", expected >=2 x " +
                     std::to_string(cfg.d_audio));
  }
  Rng root(cfg.seed);
  const Teacher teacher = make_teacher(cfg, root.fork("teacher"));
  const SubjectParams params = make_subject(cfg, root.fork("subject", subject_id));
  const Matrix backbone = teacher_backbone(cfg, teacher, audio);
  Matrix offs = backbone;
  offs.noalias() += cfg.style_scale * ((backbone * teacher.style_basis) * params.u.transpose());
  offs.rowwise() += params.bias;
  return offs.rowwise() + params.neutral;
}

Sentence concat_sentences(const std::vector<Sentence>& parts, double gap_seconds, int fps,
                          int feature_rate) {
  if (parts.empty()) throw ConfigError("concat_sentences: no sentences given");
  const int subject = parts.front().subject;
  Index total_T = 0, total_in = 0;
  for (const Sentence& p : parts) {
    if (p.subject != subject) {
      throw ConfigError("concat_sentences: sentences from subjects " + std::to_string(subject) +
                        " and " + std::to_string(p.subject) + " cannot be joined");
    }
    require_same_shape(Matrix(p.neutral), Matrix(parts.front().neutral), "concat_sentences");
    total_T += p.frames();
    total_in += p.audio.rows();
  }
  const Index gap_T = static_cast<Index>(std::llround(gap_seconds * fps));
  const Index gap_in = static_cast<Index>(std::llround(gap_seconds * feature_rate));
  const Index n_gaps = static_cast<Index>(parts.size()) - 1;

  Sentence out;
  out.subject = subject;
  out.index = -1;
  out.neutral = parts.front().neutral;
  out.audio = Matrix::Zero(total_in + n_gaps * gap_in, parts.front().audio.cols());
  out.vertices = Matrix::Zero(total_T + n_gaps * gap_T, parts.front().vertices.cols());
  out.silence_mask.assign(out.vertices.rows(), 0);

  Index at_T = 0, at_in = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Sentence& p = parts[i];
    out.audio.middleRows(at_in, p.audio.rows()) = p.audio;
    out.vertices.middleRows(at_T, p.frames()) = p.vertices;
    for (Index t = 0; t < p.frames(); ++t) {
      out.silence_mask[at_T + t] = p.silence_mask[t];
    }
    at_in += p.audio.rows();
    at_T += p.frames();
    if (i + 1 < parts.size()) {
      // silence gap: zero audio, neutral pose, masked
      out.vertices.middleRows(at_T, gap_T).rowwise() = out.neutral;
      for (Index t = 0; t < gap_T; ++t) out.silence_mask[at_T + t] = 1;
      at_in += gap_in;
      at_T += gap_T;
    }
  }
  return out;
}

// --- metrics ----------------------------------------------------------------

namespace {

void check_metric_args(const Matrix& pred, const Matrix& gt,
                       const std::vector<std::uint8_t>& mask) {
  require_same_shape(pred, gt, "metrics");
  if (pred.cols() % 3 != 0) {
    throw ShapeError("metrics: columns " + std::to_string(pred.cols()) +
                     " are not vertex triples");
  }
  if (static_cast<Index>(mask.size()) != pred.rows()) {
    throw ShapeError("metrics: mask length " + std::to_string(mask.size()) + " vs " +
                     std::to_string(pred.rows()) + " frames");
  }
}

double vertex_distance(const Matrix& pred, const Matrix& gt, Index t, int v) {
  const double dx = pred(t, 3 * v) - gt(t, 3 * v);
  const double dy = pred(t, 3 * v + 1) - gt(t, 3 * v + 1);
  const double dz = pred(t, 3 * v + 2) - gt(t, 3 * v + 2);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

void check_lips(const Matrix& pred, const std::vector<int>& lip_ids) {
  if (lip_ids.empty()) throw ConfigError("metrics: empty lip set");
  for (int v : lip_ids) {
    if (v < 0 || 3 * v + 2 >= pred.cols()) {
      throw ConfigError("metrics: lip vertex " + std::to_string(v) + " out of range");
    }
  }
}

}  // namespace

double l2_face(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask) {
  check_metric_args(pred, gt, mask);
  const int nv = static_cast<int>(pred.cols() / 3);
  double sum = 0.0;
  std::int64_t frames = 0;
  for (Index t = 0; t < pred.rows(); ++t) {
    if (mask[t]) continue;
    ++frames;
    for (int v = 0; v < nv; ++v) sum += vertex_distance(pred, gt, t, v);
  }
  if (frames == 0) throw ConfigError("l2_face: every frame is masked");
  return sum / (static_cast<double>(frames) * nv);
}

double l2_lip(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask,
              const std::vector<int>& lip_ids) {
  check_metric_args(pred, gt, mask);
  check_lips(pred, lip_ids);
  double sum = 0.0;
  std::int64_t frames = 0;
  for (Index t = 0; t < pred.rows(); ++t) {
    if (mask[t]) continue;
    ++frames;
    for (int v : lip_ids) sum += vertex_distance(pred, gt, t, v);
  }
  if (frames == 0) throw ConfigError("l2_lip: every frame is masked");
  return sum / (static_cast<double>(frames) * lip_ids.size());
}

double lip_max(const Matrix& pred, const Matrix& gt, const std::vector<std::uint8_t>& mask,
               const std::vector<int>& lip_ids) {
  check_metric_args(pred, gt, mask);
  check_lips(pred, lip_ids);
  double sum = 0.0;
  std::int64_t frames = 0;
  for (Index t = 0; t < pred.rows(); ++t) {
    if (mask[t]) continue;
    ++frames;
    double worst = 0.0;
    for (int v : lip_ids) worst = std::max(worst, vertex_distance(pred, gt, t, v));
    sum += worst;
  }
  if (frames == 0) throw ConfigError("lip_max: every frame is masked");
  return sum / static_cast<double>(frames);
}

nlohmann::json MetricTriple::to_json() const {
  return nlohmann::json{{"l2_face", l2_face}, {"l2_lip", l2_lip}, {"lip_max", lip_max}};
}

MetricTriple eval_metrics(const Matrix& pred, const Matrix& gt,
                          const std::vector<std::uint8_t>& mask,
                          const std::vector<int>& lip_ids) {
  MetricTriple m;
  m.l2_face = l2_face(pred, gt, mask);
  m.l2_lip = l2_lip(pred, gt, mask, lip_ids);
  m.lip_max = lip_max(pred, gt, mask, lip_ids);
  return m;
}

void MetricAccumulator::add(const Matrix& pred, const Matrix& gt,
                            const std::vector<std::uint8_t>& mask,
                            const std::vector<int>& lip_ids) {
  check_metric_args(pred, gt, mask);
  check_lips(pred, lip_ids);
  const int nv = static_cast<int>(pred.cols() / 3);
  for (Index t = 0; t < pred.rows(); ++t) {
    if (mask[t]) continue;
    ++frame_count_;
    for (int v = 0; v < nv; ++v) face_sum_ += vertex_distance(pred, gt, t, v);
    face_count_ += nv;
    double worst = 0.0;
    for (int v : lip_ids) {
      const double d = vertex_distance(pred, gt, t, v);
      lip_sum_ += d;
      worst = std::max(worst, d);
    }
    lip_count_ += static_cast<std::int64_t>(lip_ids.size());
    lip_max_sum_ += worst;
  }
}

MetricTriple MetricAccumulator::mean() const {
  if (frame_count_ == 0) throw ConfigError("MetricAccumulator: no unmasked frames added");
  MetricTriple m;
  m.l2_face = face_sum_ / static_cast<double>(face_count_);
  m.l2_lip = lip_sum_ / static_cast<double>(lip_count_);
  m.lip_max = lip_max_sum_ / static_cast<double>(frame_count_);
  return m;
}

}  // namespace speechanim
