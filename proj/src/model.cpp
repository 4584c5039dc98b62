#include "speechanim/model.hpp"

#include <cmath>

#include "speechanim/numerics.hpp"
#include "speechanim/rng.hpp"

namespace speechanim {

namespace {

std::atomic<std::uint64_t> g_self_scores{0};
std::atomic<std::uint64_t> g_cross_scores{0};

}  // namespace

void reset_attention_counters() {
  g_self_scores.store(0);
  g_cross_scores.store(0);
}

AttentionCounts attention_counters() {
  return {g_self_scores.load(), g_cross_scores.load()};
}

const char* style_mode_name(StyleMode m) {
  return m == StyleMode::kFaceformer ? "faceformer" : "imitator";
}

StyleMode style_mode_from_string(const std::string& s) {
  if (s == "faceformer") return StyleMode::kFaceformer;
  if (s == "imitator") return StyleMode::kImitator;
  throw ConfigError("unknown style mode '" + s + "' (expected faceformer|imitator)");
}

ModelConfig::ModelConfig() {
  lip_vertex_ids.resize(24);
  for (int i = 0; i < 24; ++i) lip_vertex_ids[i] = i;
}

void ModelConfig::validate() const {
  if (d_audio < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || n_vertices < 1 ||
      n_styles < 1 || ffn_hidden < 1 || motion_hidden < 1) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (fps < 1 || feature_rate < 1) {
    throw ConfigError("model config: fps and feature_rate must be positive");
  }
  if (lip_vertex_ids.empty()) {
    throw ConfigError("model config: lip_vertex_ids must be non-empty");
  }
  for (int v : lip_vertex_ids) {
    if (v < 0 || v >= n_vertices) {
      throw ConfigError("model config: lip vertex id " + std::to_string(v) +
                        " outside [0, " + std::to_string(n_vertices) + ")");
    }
  }
  if (!(ln_eps > 0.0)) {
    throw ConfigError("model config: ln_eps must be positive");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"d_audio", d_audio},
                        {"d_model", d_model},
                        {"n_heads", n_heads},
                        {"n_layers", n_layers},
                        {"n_vertices", n_vertices},
                        {"fps", fps},
                        {"feature_rate", feature_rate},
                        {"n_styles", n_styles},
                        {"style_mode", style_mode_name(style_mode)},
                        {"lip_vertex_ids", lip_vertex_ids},
                        {"ffn_hidden", ffn_hidden},
                        {"motion_hidden", motion_hidden},
                        {"ln_eps", ln_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_audio = j.at("d_audio").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_vertices = j.at("n_vertices").get<int>();
  c.fps = j.at("fps").get<int>();
  c.feature_rate = j.at("feature_rate").get<int>();
  c.n_styles = j.at("n_styles").get<int>();
  c.style_mode = style_mode_from_string(j.at("style_mode").get<std::string>());
  c.lip_vertex_ids = j.at("lip_vertex_ids").get<std::vector<int>>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.motion_hidden = j.at("motion_hidden").get<int>();
  c.ln_eps = j.at("ln_eps").get<double>();
  c.validate();
  return c;
}

// --- weights -----------------------------------------------------------------

namespace {

Matrix gaussian_matrix(Rng& rng, Index rows, Index cols, double sigma) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, sigma);
  }
  return m;
}

}  // namespace

ModelWeights ModelWeights::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelWeights w;
  w.config = config;
  Rng root(seed);

  auto gauss = [&](const std::string& name, Index rows, Index cols, double sigma) {
    Rng r = root.fork(name);
    w.tensors[name] = gaussian_matrix(r, rows, cols, sigma);
  };
  auto fan_in = [&](const std::string& name, Index rows, Index cols) {
    gauss(name, rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)));
  };
  auto zeros = [&](const std::string& name, Index rows, Index cols) {
    w.tensors[name] = Matrix::Zero(rows, cols);
  };
  auto ones = [&](const std::string& name, Index cols) {
    w.tensors[name] = Matrix::Ones(1, cols);
  };

  const int d = config.d_model;
  const int out = config.out_dim();

  fan_in("audio_proj.w", config.d_audio, d);
  zeros("audio_proj.b", 1, d);

  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "dec" + std::to_string(l) + ".";
    for (const char* blk : {"self_q", "self_k", "self_v", "self_o",
                            "cross_q", "cross_k", "cross_v", "cross_o"}) {
      fan_in(p + blk + ".w", d, d);
      zeros(p + blk + ".b", 1, d);
    }
    for (const char* n : {"norm1", "norm2", "norm3"}) {
      ones(p + n + ".g", d);
      zeros(p + n + ".b", 1, d);
    }
    fan_in(p + "ffn1.w", d, config.ffn_hidden);
    zeros(p + "ffn1.b", 1, config.ffn_hidden);
    fan_in(p + "ffn2.w", config.ffn_hidden, d);
    zeros(p + "ffn2.b", 1, d);
  }

  ones("final_norm.g", d);
  zeros("final_norm.b", 1, d);

  if (config.style_mode == StyleMode::kImitator) {
    fan_in("motion1.w", d, config.motion_hidden);
    zeros("motion1.b", 1, config.motion_hidden);
    gauss("motion2.w", config.motion_hidden, out, 0.02);  // start near the neutral face
    zeros("motion2.b", 1, out);
    gauss("start_token", 1, d, 1.0);
  } else {
    gauss("motion1.w", d, out, 0.02);
    zeros("motion1.b", 1, out);
    fan_in("prev_enc.w", out, d);
    zeros("prev_enc.b", 1, d);
  }

  gauss("style_table", config.n_styles, d, 0.1);
  return w;
}

const Matrix& ModelWeights::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("model weights: no tensor named '" + name + "'");
  return it->second;
}

Matrix& ModelWeights::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("model weights: no tensor named '" + name + "'");
  return it->second;
}

std::vector<std::string> ModelWeights::attention_projection_weights() const {
  std::vector<std::string> names;
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "dec" + std::to_string(l) + ".";
    for (const char* blk : {"self_q", "self_k", "self_v", "self_o"}) {
      names.push_back(p + blk + ".w");
    }
  }
  return names;
}

std::vector<std::string> ModelWeights::motion_decoder_weights() const {
  std::vector<std::string> names = {"motion1.w"};
  if (has("motion2.w")) names.push_back("motion2.w");
  return names;
}

std::int64_t ModelWeights::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) n += static_cast<std::int64_t>(t.rows()) * t.cols();
  return n;
}

GradMap zero_grads(const ModelWeights& w) {
  GradMap g;
  for (const auto& [name, t] : w.tensors) g[name] = Matrix::Zero(t.rows(), t.cols());
  return g;
}

// --- shared pieces -----------------------------------------------------------

RowVector positional_term(int t, int d_model) {
  RowVector pe(d_model);
  for (int i = 0; i < d_model; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
    pe(i) = std::sin(t * freq);
    if (i + 1 < d_model) pe(i + 1) = std::cos(t * freq);
  }
  return pe;
}

Matrix resample_linear(const Matrix& x, int from_rate, int to_rate) {
  if (from_rate < 1 || to_rate < 1) {
    throw ConfigError("resample_linear: rates must be positive");
  }
  if (x.rows() < 2) {
    throw ShapeError("resample_linear: need at least 2 input frames, got " + shape_str(x));
  }
  const Index rows_out =
      static_cast<Index>(std::llround(static_cast<double>(x.rows()) * to_rate / from_rate));
  Matrix y(rows_out, x.cols());
  const double step = static_cast<double>(from_rate) / to_rate;
  for (Index t = 0; t < rows_out; ++t) {
    const double p = t * step;
    Index i0 = static_cast<Index>(std::floor(p));
    if (i0 >= x.rows() - 1) {
      y.row(t) = x.row(x.rows() - 1);
      continue;
    }
    const double frac = p - i0;
    if (frac == 0.0) {
      y.row(t) = x.row(i0);
    } else {
      y.row(t) = (1.0 - frac) * x.row(i0) + frac * x.row(i0 + 1);
    }
  }
  return y;
}

namespace {

// y = x W + b, plus the adaptor delta when `prefix`.w is wrapped.  With B = 0
// the delta is exactly zero, so a freshly attached adaptor cannot change the
// output.
Matrix linear_fwd(const ModelWeights& w, const LoraSet* lora, const std::string& prefix,
                  const Matrix& x) {
  const Matrix& wt = w.at(prefix + ".w");
  if (x.cols() != wt.rows()) {
    throw ShapeError(prefix + ": input " + shape_str(x) + " does not match weight " +
                     shape_str(wt));
  }
  Matrix y = x * wt;
  y.rowwise() += w.at(prefix + ".b").row(0);
  if (lora != nullptr) {
    if (const LoraAdaptor* ad = lora->find(prefix + ".w")) {
      y.noalias() += ad->scaling() * ((x * ad->a) * ad->b.transpose());
    }
  }
  return y;
}

void linear_bwd(const ModelWeights& w, const LoraSet* lora, const std::string& prefix,
                const Matrix& x, const Matrix& dy, bool weight_grads, GradMap* dweights,
                LoraGradMap* dlora, Matrix* dx) {
  const Matrix& wt = w.at(prefix + ".w");
  if (dx != nullptr) dx->noalias() += dy * wt.transpose();
  if (weight_grads && dweights != nullptr) {
    (*dweights)[prefix + ".w"].noalias() += x.transpose() * dy;
    (*dweights)[prefix + ".b"].row(0) += dy.colwise().sum();
  }
  if (lora != nullptr) {
    if (const LoraAdaptor* ad = lora->find(prefix + ".w")) {
      const double s = ad->scaling();
      if (dx != nullptr) dx->noalias() += s * ((dy * ad->b) * ad->a.transpose());
      if (dlora != nullptr) {
        LoraGrad& g = dlora->at(prefix + ".w");
        g.da.noalias() += s * (x.transpose() * (dy * ad->b));
        g.db.noalias() += s * (dy.transpose() * (x * ad->a));
      }
    }
  }
}

}  // namespace

Matrix encode_audio(const ModelWeights& w, const Matrix& features) {
  if (features.cols() != w.config.d_audio) {
    throw ShapeError("encode_audio: features " + shape_str(features) + ", expected d_audio = " +
                     std::to_string(w.config.d_audio) + " columns");
  }
  const Matrix fps_feats = resample_linear(features, w.config.feature_rate, w.config.fps);
  return linear_fwd(w, nullptr, "audio_proj", fps_feats);
}

// --- training-path forward ---------------------------------------------------

namespace {

void check_style(const ModelConfig& c, const RowVector& style) {
  if (style.cols() != c.d_model) {
    throw ShapeError("style code has " + std::to_string(style.cols()) + " columns, expected " +
                     std::to_string(c.d_model));
  }
}

// Fixed recency slope for causal self-attention: the score of key s at query t
// is penalized by slope * (t - s).  Geometric per-head slopes give the heads a
// ladder of effective horizons (steep heads local, shallow heads long-range).
// Depending only on token distance keeps the decoder translation-equivariant,
// and the penalty is constant w.r.t. q/k, so the backward pass is untouched.
double recency_slope(int head, int n_heads) {
  return std::pow(2.0, -8.0 * (head + 1) / n_heads);
}

// Causal multi-head self-attention over x_ln; fills cache.attn/ctx, returns
// the O-projected result.  Only lower-triangle scores are ever evaluated.
Matrix self_attention_fwd(const ModelWeights& w, const LoraSet* lora, const std::string& p,
                          const Matrix& x_ln, AttentionCache& cc, std::uint64_t& self_count) {
  const int H = w.config.n_heads;
  const int dh = w.config.d_head();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index T = x_ln.rows();

  cc.ln_out = x_ln;
  cc.q = linear_fwd(w, lora, p + "self_q", x_ln);
  cc.k = linear_fwd(w, lora, p + "self_k", x_ln);
  cc.v = linear_fwd(w, lora, p + "self_v", x_ln);
  cc.attn.assign(H, Matrix());
  cc.ctx = Matrix(T, w.config.d_model);

  for (int h = 0; h < H; ++h) {
    const auto qh = cc.q.middleCols(h * dh, dh);
    const auto kh = cc.k.middleCols(h * dh, dh);
    const auto vh = cc.v.middleCols(h * dh, dh);
    Matrix& attn = cc.attn[h];
    attn = Matrix::Zero(T, T);
    auto ctxh = cc.ctx.middleCols(h * dh, dh);
    const double slope = recency_slope(h, H);
    for (Index t = 0; t < T; ++t) {
      const Index n = t + 1;
      auto row = attn.row(t).head(n);
      row = (kh.topRows(n) * qh.row(t).transpose()).transpose() * inv_sqrt;
      // distance penalty: key s sits t - s frames in the past
      for (Index s = 0; s < n; ++s) row(s) -= slope * static_cast<double>(t - s);
      const double m = row.maxCoeff();
      row.array() = (row.array() - m).exp();
      row /= row.sum();
      ctxh.row(t).noalias() = row * vh.topRows(n);
    }
    self_count += static_cast<std::uint64_t>(T) * (T + 1) / 2;
  }
  return linear_fwd(w, lora, p + "self_o", cc.ctx);
}

// Full (unmasked) multi-head cross-attention from x_ln to the encoded audio.
Matrix cross_attention_fwd(const ModelWeights& w, const LoraSet* lora, const std::string& p,
                           const Matrix& x_ln, const Matrix& audio_enc, AttentionCache& cc,
                           std::uint64_t& cross_count) {
  const int H = w.config.n_heads;
  const int dh = w.config.d_head();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index T = x_ln.rows();
  const Index S = audio_enc.rows();

  cc.ln_out = x_ln;
  cc.q = linear_fwd(w, lora, p + "cross_q", x_ln);
  cc.k = linear_fwd(w, nullptr, p + "cross_k", audio_enc);
  cc.v = linear_fwd(w, nullptr, p + "cross_v", audio_enc);
  cc.attn.assign(H, Matrix());
  cc.ctx = Matrix(T, w.config.d_model);

  for (int h = 0; h < H; ++h) {
    const auto qh = cc.q.middleCols(h * dh, dh);
    const auto kh = cc.k.middleCols(h * dh, dh);
    const auto vh = cc.v.middleCols(h * dh, dh);
    Matrix scores = (qh * kh.transpose()) * inv_sqrt;
    cc.attn[h] = softmax_rows(scores, false);
    cc.ctx.middleCols(h * dh, dh).noalias() = cc.attn[h] * vh;
    cross_count += static_cast<std::uint64_t>(T) * S;
  }
  return linear_fwd(w, lora, p + "cross_o", cc.ctx);
}

}  // namespace

Matrix model_forward(const ModelWeights& w, const Matrix& features, const RowVector& style,
                     const LoraSet* lora, ForwardCache& cache,
                     const Matrix* teacher_prev_offsets) {
  const ModelConfig& c = w.config;
  check_style(c, style);

  cache.feats_fps = resample_linear(features, c.feature_rate, c.fps);
  cache.audio_enc = linear_fwd(w, nullptr, "audio_proj", cache.feats_fps);
  const Index T = cache.feats_fps.rows();

  if (c.style_mode == StyleMode::kFaceformer) {
    if (teacher_prev_offsets == nullptr) {
      throw ConfigError("model_forward: faceformer mode needs teacher_prev_offsets");
    }
    if (teacher_prev_offsets->rows() != T || teacher_prev_offsets->cols() != c.out_dim()) {
      throw ShapeError("model_forward: teacher offsets " + shape_str(*teacher_prev_offsets) +
                       ", expected " + shape_str(T, c.out_dim()));
    }
    cache.prev_in = Matrix::Zero(T, c.out_dim());
    if (T > 1) cache.prev_in.bottomRows(T - 1) = teacher_prev_offsets->topRows(T - 1);
    cache.tokens = linear_fwd(w, nullptr, "prev_enc", cache.prev_in);
    cache.tokens.rowwise() += style;
    for (Index t = 0; t < T; ++t) cache.tokens.row(t) += positional_term(t, c.d_model);
  } else {
    if (teacher_prev_offsets != nullptr) {
      throw ConfigError("model_forward: teacher_prev_offsets is a faceformer-only input");
    }
    // Tokens are seeded from the per-frame audio encoding: frame identity
    // comes from content, not from any absolute position, which keeps the
    // decoder translation-equivariant (what makes chunked inference agree
    // with full inference away from chunk edges).
    cache.tokens = cache.audio_enc;
    cache.tokens.rowwise() += w.at("start_token").row(0);
  }

  std::uint64_t self_count = 0, cross_count = 0;
  Matrix x = cache.tokens;
  cache.layers.assign(c.n_layers, LayerCache());
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "dec" + std::to_string(l) + ".";
    LayerCache& lc = cache.layers[l];

    lc.self_in = x;
    Matrix ln1 = layer_norm(x, w.at(p + "norm1.g").row(0), w.at(p + "norm1.b").row(0), c.ln_eps);
    x += self_attention_fwd(w, lora, p, ln1, lc.self_attn, self_count);

    lc.cross_in = x;
    Matrix ln2 = layer_norm(x, w.at(p + "norm2.g").row(0), w.at(p + "norm2.b").row(0), c.ln_eps);
    x += cross_attention_fwd(w, lora, p, ln2, cache.audio_enc, lc.cross_attn, cross_count);

    lc.ffn_in = x;
    lc.ffn.ln_out =
        layer_norm(x, w.at(p + "norm3.g").row(0), w.at(p + "norm3.b").row(0), c.ln_eps);
    lc.ffn.h = linear_fwd(w, nullptr, p + "ffn1", lc.ffn.ln_out).array().tanh();
    x += linear_fwd(w, nullptr, p + "ffn2", lc.ffn.h);
  }
  cache.stack_out = x;
  cache.final_ln_out =
      layer_norm(x, w.at("final_norm.g").row(0), w.at("final_norm.b").row(0), c.ln_eps);

  if (c.style_mode == StyleMode::kImitator) {
    cache.motion_in = cache.final_ln_out;
    cache.motion_in.rowwise() += style;
    cache.motion_h = linear_fwd(w, lora, "motion1", cache.motion_in).array().tanh();
    cache.pred = linear_fwd(w, lora, "motion2", cache.motion_h);
  } else {
    cache.pred = linear_fwd(w, lora, "motion1", cache.final_ln_out);
  }

  g_self_scores.fetch_add(self_count, std::memory_order_relaxed);
  g_cross_scores.fetch_add(cross_count, std::memory_order_relaxed);
  return cache.pred;
}

// --- training-path backward --------------------------------------------------

namespace {

// Backward through one multi-head attention given d(context, pre-O-projection).
// Returns d(normalised q-input).  For cross-attention, kv_src is the k/v input
// (the encoded audio) and its gradient accumulates into dkv_src.
Matrix attention_bwd(const ModelWeights& w, const AttentionCache& cc, const Matrix& d_ctx,
                     bool causal, const Matrix* kv_src, const std::string& p, const char* qn,
                     const char* kn, const char* vn, const LoraSet* lora, bool weight_grads,
                     GradMap* dweights, LoraGradMap* dlora, Matrix* dkv_src) {
  const int H = w.config.n_heads;
  const int dh = w.config.d_head();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index T = cc.q.rows();
  const Index S = cc.k.rows();

  Matrix dq = Matrix::Zero(T, w.config.d_model);
  Matrix dk = Matrix::Zero(S, w.config.d_model);
  Matrix dv = Matrix::Zero(S, w.config.d_model);

  for (int h = 0; h < H; ++h) {
    const auto qh = cc.q.middleCols(h * dh, dh);
    const auto kh = cc.k.middleCols(h * dh, dh);
    const auto vh = cc.v.middleCols(h * dh, dh);
    const Matrix& attn = cc.attn[h];
    const auto d_ctxh = d_ctx.middleCols(h * dh, dh);

    dv.middleCols(h * dh, dh).noalias() += attn.transpose() * d_ctxh;
    Matrix d_attn = d_ctxh * vh.transpose();  // T x S
    Matrix d_scores = Matrix::Zero(T, S);
    softmax_rows_backward(attn, d_attn, causal, d_scores);
    dq.middleCols(h * dh, dh).noalias() += d_scores * kh * inv_sqrt;
    dk.middleCols(h * dh, dh).noalias() += d_scores.transpose() * qh * inv_sqrt;
  }

  Matrix d_ln = Matrix::Zero(T, w.config.d_model);
  linear_bwd(w, lora, p + qn, cc.ln_out, dq, weight_grads, dweights, dlora, &d_ln);
  if (causal) {
    // self-attention: K and V come from the same normalised input
    linear_bwd(w, lora, p + kn, cc.ln_out, dk, weight_grads, dweights, dlora, &d_ln);
    linear_bwd(w, lora, p + vn, cc.ln_out, dv, weight_grads, dweights, dlora, &d_ln);
  } else {
    linear_bwd(w, nullptr, p + kn, *kv_src, dk, weight_grads, dweights, nullptr, dkv_src);
    linear_bwd(w, nullptr, p + vn, *kv_src, dv, weight_grads, dweights, nullptr, dkv_src);
  }
  return d_ln;
}

}  // namespace

void model_backward(const ModelWeights& w, const ForwardCache& cache, const Matrix& dpred,
                    const LoraSet* lora, const BackwardOptions& opts, GradMap* dweights,
                    LoraGradMap* dlora, RowVector* dstyle) {
  const ModelConfig& c = w.config;
  const Index T = cache.pred.rows();
  require_same_shape(dpred, cache.pred, "model_backward");
  const bool wg = opts.weight_grads;

  Matrix d_final_ln = Matrix::Zero(T, c.d_model);
  if (c.style_mode == StyleMode::kImitator) {
    Matrix d_motion_h = Matrix::Zero(T, c.motion_hidden);
    linear_bwd(w, lora, "motion2", cache.motion_h, dpred, wg, dweights, dlora, &d_motion_h);
    const Matrix d_motion_pre =
        (d_motion_h.array() * (1.0 - cache.motion_h.array().square())).matrix();
    Matrix d_motion_in = Matrix::Zero(T, c.d_model);
    linear_bwd(w, lora, "motion1", cache.motion_in, d_motion_pre, wg, dweights, dlora,
               &d_motion_in);
    if (dstyle != nullptr) *dstyle += d_motion_in.colwise().sum();
    d_final_ln = d_motion_in;
  } else {
    linear_bwd(w, lora, "motion1", cache.final_ln_out, dpred, wg, dweights, dlora, &d_final_ln);
  }

  Matrix d_x = Matrix::Zero(T, c.d_model);
  {
    RowVector dg = RowVector::Zero(c.d_model), db = RowVector::Zero(c.d_model);
    layer_norm_backward(cache.stack_out, w.at("final_norm.g").row(0), c.ln_eps, d_final_ln, d_x,
                        dg, db);
    if (wg && dweights != nullptr) {
      (*dweights)["final_norm.g"].row(0) += dg;
      (*dweights)["final_norm.b"].row(0) += db;
    }
  }

  Matrix d_audio_enc = Matrix::Zero(cache.audio_enc.rows(), c.d_model);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l) + ".";
    const LayerCache& lc = cache.layers[l];

    // ffn block
    {
      Matrix d_h = Matrix::Zero(T, c.ffn_hidden);
      linear_bwd(w, nullptr, p + "ffn2", lc.ffn.h, d_x, wg, dweights, nullptr, &d_h);
      const Matrix d_pre = (d_h.array() * (1.0 - lc.ffn.h.array().square())).matrix();
      Matrix d_ln3 = Matrix::Zero(T, c.d_model);
      linear_bwd(w, nullptr, p + "ffn1", lc.ffn.ln_out, d_pre, wg, dweights, nullptr, &d_ln3);
      RowVector dg = RowVector::Zero(c.d_model), db = RowVector::Zero(c.d_model);
      layer_norm_backward(lc.ffn_in, w.at(p + "norm3.g").row(0), c.ln_eps, d_ln3, d_x, dg, db);
      if (wg && dweights != nullptr) {
        (*dweights)[p + "norm3.g"].row(0) += dg;
        (*dweights)[p + "norm3.b"].row(0) += db;
      }
    }

    // cross-attention block
    {
      Matrix d_ctx = Matrix::Zero(T, c.d_model);
      linear_bwd(w, lora, p + "cross_o", lc.cross_attn.ctx, d_x, wg, dweights, dlora, &d_ctx);
      Matrix d_ln2 = attention_bwd(w, lc.cross_attn, d_ctx, false, &cache.audio_enc, p,
                                   "cross_q", "cross_k", "cross_v", lora, wg, dweights, dlora,
                                   &d_audio_enc);
      RowVector dg = RowVector::Zero(c.d_model), db = RowVector::Zero(c.d_model);
      layer_norm_backward(lc.cross_in, w.at(p + "norm2.g").row(0), c.ln_eps, d_ln2, d_x, dg, db);
      if (wg && dweights != nullptr) {
        (*dweights)[p + "norm2.g"].row(0) += dg;
        (*dweights)[p + "norm2.b"].row(0) += db;
      }
    }

    // self-attention block
    {
      Matrix d_ctx = Matrix::Zero(T, c.d_model);
      linear_bwd(w, lora, p + "self_o", lc.self_attn.ctx, d_x, wg, dweights, dlora, &d_ctx);
      Matrix d_ln1 = attention_bwd(w, lc.self_attn, d_ctx, true, nullptr, p, "self_q", "self_k",
                                   "self_v", lora, wg, dweights, dlora, nullptr);
      RowVector dg = RowVector::Zero(c.d_model), db = RowVector::Zero(c.d_model);
      layer_norm_backward(lc.self_in, w.at(p + "norm1.g").row(0), c.ln_eps, d_ln1, d_x, dg, db);
      if (wg && dweights != nullptr) {
        (*dweights)[p + "norm1.g"].row(0) += dg;
        (*dweights)[p + "norm1.b"].row(0) += db;
      }
    }
  }

  // token construction
  if (c.style_mode == StyleMode::kFaceformer) {
    if (dstyle != nullptr) *dstyle += d_x.colwise().sum();
    linear_bwd(w, nullptr, "prev_enc", cache.prev_in, d_x, wg, dweights, nullptr, nullptr);
  } else {
    if (wg && dweights != nullptr) {
      (*dweights)["start_token"].row(0) += d_x.colwise().sum();
    }
    d_audio_enc += d_x;  // tokens are audio-seeded
  }

  // audio encoder
  linear_bwd(w, nullptr, "audio_proj", cache.feats_fps, d_audio_enc, wg, dweights, nullptr,
             nullptr);
}

// --- inference path ----------------------------------------------------------

namespace {

RowVector ln_row(const RowVector& x, const Matrix& gain, const Matrix& bias, double eps) {
  const double mean = x.mean();
  const Eigen::Array<double, 1, Eigen::Dynamic> centered = x.array() - mean;
  const double var = centered.square().sum() / static_cast<double>(x.cols());
  const double inv_sigma = 1.0 / std::sqrt(var + eps);
  return ((centered * inv_sigma) * gain.row(0).array() + bias.row(0).array()).matrix();
}

RowVector linear_row(const ModelWeights& w, const LoraSet* lora, const std::string& prefix,
                     const RowVector& x) {
  const Matrix& wt = w.at(prefix + ".w");
  RowVector y = x * wt + w.at(prefix + ".b").row(0);
  if (lora != nullptr) {
    if (const LoraAdaptor* ad = lora->find(prefix + ".w")) {
      y.noalias() += ad->scaling() * ((x * ad->a) * ad->b.transpose());
    }
  }
  return y;
}

// Streaming causal decoder.  Feeding token t attends to the t+1 tokens seen so
// far through per-layer K/V caches, so a full pass evaluates exactly
// T(T+1)/2 self-attention scores per layer per head.
class DecoderStream {
 public:
  DecoderStream(const ModelWeights& w, const LoraSet* lora, const Matrix& audio_enc)
      : w_(w), lora_(lora), audio_enc_(audio_enc) {
    const ModelConfig& c = w.config;
    const Index cap = audio_enc.rows();
    k_cache_.resize(c.n_layers);
    v_cache_.resize(c.n_layers);
    cross_k_.resize(c.n_layers);
    cross_v_.resize(c.n_layers);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "dec" + std::to_string(l) + ".";
      k_cache_[l] = Matrix(cap, c.d_model);
      v_cache_[l] = Matrix(cap, c.d_model);
      cross_k_[l] = linear_fwd(w, nullptr, p + "cross_k", audio_enc);
      cross_v_[l] = linear_fwd(w, nullptr, p + "cross_v", audio_enc);
    }
  }

  ~DecoderStream() {
    g_self_scores.fetch_add(self_count_, std::memory_order_relaxed);
    g_cross_scores.fetch_add(cross_count_, std::memory_order_relaxed);
  }

  RowVector feed(const RowVector& token) {
    const ModelConfig& c = w_.config;
    const int H = c.n_heads;
    const int dh = c.d_head();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const Index S = audio_enc_.rows();
    const Index n = t_ + 1;

    RowVector x = token;
    RowVector ctx(c.d_model);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "dec" + std::to_string(l) + ".";

      // causal self-attention over the cached history
      RowVector ln = ln_row(x, w_.at(p + "norm1.g"), w_.at(p + "norm1.b"), c.ln_eps);
      k_cache_[l].row(t_) = linear_row(w_, lora_, p + "self_k", ln);
      v_cache_[l].row(t_) = linear_row(w_, lora_, p + "self_v", ln);
      const RowVector q = linear_row(w_, lora_, p + "self_q", ln);
      for (int h = 0; h < H; ++h) {
        const auto kh = k_cache_[l].topRows(n).middleCols(h * dh, dh);
        const auto vh = v_cache_[l].topRows(n).middleCols(h * dh, dh);
        Eigen::RowVectorXd scores = (kh * q.middleCols(h * dh, dh).transpose()).transpose();
        scores *= inv_sqrt;
        const double slope = recency_slope(h, H);
        for (Index s = 0; s < n; ++s) scores(s) -= slope * static_cast<double>(t_ - s);
        const double m = scores.maxCoeff();
        scores.array() = (scores.array() - m).exp();
        scores /= scores.sum();
        ctx.middleCols(h * dh, dh).noalias() = scores * vh;
      }
      self_count_ += static_cast<std::uint64_t>(n) * H;
      x += linear_row(w_, lora_, p + "self_o", ctx);

      // full cross-attention to the audio window
      ln = ln_row(x, w_.at(p + "norm2.g"), w_.at(p + "norm2.b"), c.ln_eps);
      const RowVector qc = linear_row(w_, lora_, p + "cross_q", ln);
      for (int h = 0; h < H; ++h) {
        const auto kh = cross_k_[l].middleCols(h * dh, dh);
        const auto vh = cross_v_[l].middleCols(h * dh, dh);
        Eigen::RowVectorXd scores = (kh * qc.middleCols(h * dh, dh).transpose()).transpose();
        scores *= inv_sqrt;
        const double m = scores.maxCoeff();
        scores.array() = (scores.array() - m).exp();
        scores /= scores.sum();
        ctx.middleCols(h * dh, dh).noalias() = scores * vh;
      }
      cross_count_ += static_cast<std::uint64_t>(S) * H;
      x += linear_row(w_, lora_, p + "cross_o", ctx);

      // position-wise mlp
      ln = ln_row(x, w_.at(p + "norm3.g"), w_.at(p + "norm3.b"), c.ln_eps);
      const RowVector h1 = linear_row(w_, nullptr, p + "ffn1", ln).array().tanh().matrix();
      x += linear_row(w_, nullptr, p + "ffn2", h1);
    }
    ++t_;
    return ln_row(x, w_.at("final_norm.g"), w_.at("final_norm.b"), c.ln_eps);
  }

 private:
  const ModelWeights& w_;
  const LoraSet* lora_;
  Matrix audio_enc_;
  std::vector<Matrix> k_cache_, v_cache_, cross_k_, cross_v_;
  Index t_ = 0;
  std::uint64_t self_count_ = 0, cross_count_ = 0;
};

}  // namespace

Matrix infer_offsets_fps(const ModelWeights& w, const Matrix& feats_fps, const RowVector& style,
                         const LoraSet* lora) {
  const ModelConfig& c = w.config;
  check_style(c, style);
  if (feats_fps.cols() != c.d_audio) {
    throw ShapeError("infer_offsets_fps: features " + shape_str(feats_fps) +
                     ", expected d_audio = " + std::to_string(c.d_audio) + " columns");
  }
  const Index T = feats_fps.rows();
  if (T < 1) throw ShapeError("infer_offsets_fps: empty input");

  const Matrix audio_enc = linear_fwd(w, nullptr, "audio_proj", feats_fps);
  DecoderStream stream(w, lora, audio_enc);

  if (c.style_mode == StyleMode::kImitator) {
    Matrix dec(T, c.d_model);
    const RowVector start = w.at("start_token").row(0);
    for (Index t = 0; t < T; ++t) {
      dec.row(t) = stream.feed(start + audio_enc.row(t));
    }
    dec.rowwise() += style;
    const Matrix h = linear_fwd(w, lora, "motion1", dec).array().tanh();
    return linear_fwd(w, lora, "motion2", h);
  }

  Matrix pred(T, c.out_dim());
  RowVector prev = RowVector::Zero(c.out_dim());
  for (Index t = 0; t < T; ++t) {
    RowVector token = linear_row(w, nullptr, "prev_enc", prev) + style +
                      positional_term(static_cast<int>(t), c.d_model);
    const RowVector d = stream.feed(token);
    pred.row(t) = linear_row(w, lora, "motion1", d);
    prev = pred.row(t);
  }
  return pred;
}

Matrix infer_offsets(const ModelWeights& w, const Matrix& features, const RowVector& style,
                     const LoraSet* lora) {
  return infer_offsets_fps(w, resample_linear(features, w.config.feature_rate, w.config.fps),
                           style, lora);
}

}  // namespace speechanim
