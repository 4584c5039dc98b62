#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "speechanim/model.hpp"
#include "speechanim/numerics.hpp"
#include "speechanim/rng.hpp"

using namespace speechanim;

namespace {

ModelConfig tiny_config(StyleMode mode) {
  ModelConfig c;
  c.d_audio = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.n_vertices = 5;
  c.n_styles = 3;
  c.ffn_hidden = 12;
  c.motion_hidden = 10;
  c.style_mode = mode;
  c.lip_vertex_ids = {0, 1, 2};
  return c;
}

Matrix random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, scale);
  }
  return m;
}

}  // namespace

TEST_CASE("default config parameter counts are exact") {
  ModelConfig c;  // imitator defaults
  const ModelWeights w = ModelWeights::init(c, 1);
  CHECK(w.parameter_count() == 135848);

  ModelConfig f;
  f.style_mode = StyleMode::kFaceformer;
  const ModelWeights wf = ModelWeights::init(f, 1);
  CHECK(wf.parameter_count() == 58280);
}

TEST_CASE("init is deterministic in the seed and independent per tensor") {
  const ModelConfig c = tiny_config(StyleMode::kImitator);
  const ModelWeights a = ModelWeights::init(c, 42);
  const ModelWeights b = ModelWeights::init(c, 42);
  const ModelWeights d = ModelWeights::init(c, 43);
  REQUIRE(a.tensors.size() == b.tensors.size());
  bool any_diff = false;
  for (const auto& [name, t] : a.tensors) {
    REQUIRE(b.has(name));
    CHECK(t == b.tensors.at(name));  // bitwise
    if (d.has(name) && t.rows() > 0 && (t.array() != 0.0).any() &&
        t != Matrix::Ones(t.rows(), t.cols())) {
      any_diff = any_diff || (t != d.tensors.at(name));
    }
  }
  CHECK(any_diff);
}

TEST_CASE("init layout and tensor inventory") {
  const ModelConfig ci = tiny_config(StyleMode::kImitator);
  const ModelWeights wi = ModelWeights::init(ci, 7);
  // 2 audio + 2*26 decoder + 2 final + 4 motion + start_token + style_table
  CHECK(wi.tensors.size() == 62);
  CHECK(wi.has("start_token"));
  CHECK(wi.has("motion2.w"));
  CHECK_FALSE(wi.has("prev_enc.w"));
  CHECK(wi.at("motion2.w").rows() == ci.motion_hidden);
  CHECK(wi.at("motion2.w").cols() == ci.out_dim());
  CHECK(wi.at("style_table").rows() == ci.n_styles);

  const ModelConfig cf = tiny_config(StyleMode::kFaceformer);
  const ModelWeights wf = ModelWeights::init(cf, 7);
  CHECK(wf.has("prev_enc.w"));
  CHECK_FALSE(wf.has("start_token"));
  CHECK_FALSE(wf.has("motion2.w"));
  CHECK(wf.at("motion1.w").cols() == cf.out_dim());
  CHECK(wf.at("prev_enc.w").rows() == cf.out_dim());

  CHECK_THROWS_AS(wi.at("no_such_tensor"), ConfigError);
}

TEST_CASE("init scales: fan-in weights, zero biases, unit norms, small final layer") {
  ModelConfig c;  // default, large enough for stable stats
  const ModelWeights w = ModelWeights::init(c, 3);
  const auto std_of = [](const Matrix& m) {
    const double mu = m.mean();
    return std::sqrt((m.array() - mu).square().sum() / (m.rows() * m.cols()));
  };
  CHECK(std_of(w.at("audio_proj.w")) == doctest::Approx(1.0 / 4.0).epsilon(0.2));
  CHECK(std_of(w.at("dec0.ffn2.w")) == doctest::Approx(1.0 / std::sqrt(128.0)).epsilon(0.2));
  CHECK(std_of(w.at("motion2.w")) == doctest::Approx(0.02).epsilon(0.2));
  CHECK(std_of(w.at("style_table")) == doctest::Approx(0.1).epsilon(0.3));
  CHECK(w.at("audio_proj.b").isZero(0.0));
  CHECK(w.at("dec1.norm2.b").isZero(0.0));
  CHECK(w.at("dec1.norm2.g") == Matrix::Ones(1, c.d_model));
  CHECK(w.at("final_norm.g") == Matrix::Ones(1, c.d_model));
}

TEST_CASE("positional term matches the reference values at t=3, d=8") {
  const RowVector pe = positional_term(3, 8);
  // frozen from an independent evaluation of sin/cos(t / 10000^(2i/d))
  CHECK(pe(0) == doctest::Approx(0.1411200080598672).epsilon(1e-12));
  CHECK(pe(1) == doctest::Approx(-0.9899924966004454).epsilon(1e-12));
  CHECK(pe(2) == doctest::Approx(0.2955202066613396).epsilon(1e-12));
  CHECK(pe(3) == doctest::Approx(0.955336489125606).epsilon(1e-12));
  CHECK(pe(4) == doctest::Approx(0.02999550020249566).epsilon(1e-12));
  CHECK(pe(5) == doctest::Approx(0.9995500337489875).epsilon(1e-12));
  CHECK(pe(6) == doctest::Approx(0.002999995500002025).epsilon(1e-12));
  CHECK(pe(7) == doctest::Approx(0.999995500003375).epsilon(1e-12));
}

TEST_CASE("positional term at t=0 alternates 0,1") {
  const RowVector pe = positional_term(0, 16);
  for (int i = 0; i < 16; i += 2) {
    CHECK(pe(i) == 0.0);
    CHECK(pe(i + 1) == 1.0);
  }
}

TEST_CASE("positional term rows are pairwise distinct over 1000 frames") {
  const int d = 32;
  Matrix table(1000, d);
  for (int t = 0; t < 1000; ++t) table.row(t) = positional_term(t, d);
  for (int i = 0; i < 1000; ++i) {
    for (int j = i + 1; j < 1000; ++j) {
      if ((table.row(i) - table.row(j)).cwiseAbs().maxCoeff() < 1e-9) {
        FAIL("positional rows ", i, " and ", j, " collide");
      }
    }
  }
}

TEST_CASE("resample_linear preserves constants and straight lines") {
  Rng rng(11);
  Matrix c = Matrix::Constant(40, 3, 2.5);
  const Matrix cr = resample_linear(c, 50, 25);
  REQUIRE(cr.rows() == 20);
  CHECK((cr.array() - 2.5).abs().maxCoeff() == 0.0);

  // ramp stays a ramp under upsampling
  Matrix ramp(10, 1);
  for (int t = 0; t < 10; ++t) ramp(t, 0) = 3.0 * t;
  const Matrix up = resample_linear(ramp, 25, 50);
  REQUIRE(up.rows() == 20);
  for (Index t = 0; t + 2 < up.rows(); ++t) {  // tail rows clamp
    CHECK(up(t, 0) == doctest::Approx(1.5 * t).epsilon(1e-12));
  }
}

TEST_CASE("resample_linear 2:1 decimation picks exactly the even rows") {
  Rng rng(12);
  const Matrix x = random_matrix(rng, 100, 4);
  const Matrix y = resample_linear(x, 50, 25);
  REQUIRE(y.rows() == 50);
  for (Index t = 0; t < 50; ++t) CHECK(y.row(t) == x.row(2 * t));  // bitwise
}

TEST_CASE("resample_linear length rounds and equal rates copy bitwise") {
  Rng rng(13);
  const Matrix x = random_matrix(rng, 113, 2);
  CHECK(resample_linear(x, 50, 25).rows() == 57);  // round(113/2) = 57
  const Matrix same = resample_linear(x, 25, 25);
  CHECK(same == x);
  CHECK_THROWS_AS(resample_linear(Matrix::Zero(1, 2), 50, 25), ShapeError);
}

TEST_CASE("attention counters: batch forward and streaming agree with closed form") {
  const ModelConfig c = tiny_config(StyleMode::kImitator);
  const ModelWeights w = ModelWeights::init(c, 5);
  Rng rng(6);
  const Matrix feats = random_matrix(rng, 24, c.d_audio);  // T = 12 after resample
  const RowVector style = w.at("style_table").row(0);

  reset_attention_counters();
  ForwardCache cache;
  model_forward(w, feats, style, nullptr, cache);
  const Index T = cache.pred.rows();
  REQUIRE(T == 12);
  AttentionCounts counts = attention_counters();
  const auto expect_self =
      static_cast<std::uint64_t>(c.n_layers) * c.n_heads * T * (T + 1) / 2;
  const auto expect_cross = static_cast<std::uint64_t>(c.n_layers) * c.n_heads * T * T;
  CHECK(counts.self_scores == expect_self);
  CHECK(counts.cross_scores == expect_cross);

  reset_attention_counters();
  infer_offsets(w, feats, style);
  counts = attention_counters();
  CHECK(counts.self_scores == expect_self);
  CHECK(counts.cross_scores == expect_cross);

  reset_attention_counters();
  counts = attention_counters();
  CHECK(counts.self_scores == 0);
  CHECK(counts.cross_scores == 0);
}

TEST_CASE("forward is pure and deterministic") {
  const ModelConfig c = tiny_config(StyleMode::kImitator);
  const ModelWeights w = ModelWeights::init(c, 8);
  Rng rng(9);
  const Matrix feats = random_matrix(rng, 20, c.d_audio);
  const RowVector style = w.at("style_table").row(1);
  ForwardCache c1, c2;
  const Matrix p1 = model_forward(w, feats, style, nullptr, c1);
  const Matrix p2 = model_forward(w, feats, style, nullptr, c2);
  CHECK(p1 == p2);  // bitwise
  REQUIRE(p1.rows() == 10);
  REQUIRE(p1.cols() == c.out_dim());
  CHECK(p1.allFinite());
}

TEST_CASE("streaming inference matches the batch forward in imitator mode") {
  const ModelConfig c = tiny_config(StyleMode::kImitator);
  const ModelWeights w = ModelWeights::init(c, 10);
  Rng rng(11);
  const Matrix feats = random_matrix(rng, 30, c.d_audio);
  const RowVector style = w.at("style_table").row(2);

  ForwardCache cache;
  const Matrix batch = model_forward(w, feats, style, nullptr, cache);
  const Matrix stream = infer_offsets(w, feats, style);
  REQUIRE(batch.rows() == stream.rows());
  const double rel = (batch - stream).cwiseAbs().maxCoeff() /
                     std::max(1.0, batch.cwiseAbs().maxCoeff());
  CHECK(rel < 1e-9);
}

TEST_CASE("faceformer inference is self-consistent under teacher forcing") {
  const ModelConfig c = tiny_config(StyleMode::kFaceformer);
  const ModelWeights w = ModelWeights::init(c, 12);
  Rng rng(13);
  const Matrix feats = random_matrix(rng, 28, c.d_audio);
  const RowVector style = w.at("style_table").row(0);

  const Matrix ar = infer_offsets(w, feats, style);
  // feeding the model its own outputs as the teacher must reproduce them
  ForwardCache cache;
  const Matrix forced = model_forward(w, feats, style, nullptr, cache, &ar);
  const double rel =
      (ar - forced).cwiseAbs().maxCoeff() / std::max(1.0, ar.cwiseAbs().maxCoeff());
  CHECK(rel < 1e-9);
}

TEST_CASE("token causality: a perturbed teacher frame cannot reach earlier outputs") {
  const ModelConfig c = tiny_config(StyleMode::kFaceformer);
  const ModelWeights w = ModelWeights::init(c, 14);
  Rng rng(15);
  const Matrix feats = random_matrix(rng, 24, c.d_audio);
  const RowVector style = w.at("style_table").row(1);
  Matrix teacher = random_matrix(rng, 12, c.out_dim(), 0.1);

  ForwardCache c1;
  const Matrix base = model_forward(w, feats, style, nullptr, c1, &teacher);
  const Index t0 = 6;
  teacher(t0, 3) += 1.0;
  ForwardCache c2;
  const Matrix pert = model_forward(w, feats, style, nullptr, c2, &teacher);
  // teacher row t0 feeds token t0+1, so rows <= t0 are bitwise unchanged
  CHECK(base.topRows(t0 + 1) == pert.topRows(t0 + 1));
  CHECK((base.bottomRows(12 - t0 - 1) - pert.bottomRows(12 - t0 - 1)).cwiseAbs().maxCoeff() >
        1e-12);
}

TEST_CASE("argument validation") {
  const ModelConfig ci = tiny_config(StyleMode::kImitator);
  const ModelWeights wi = ModelWeights::init(ci, 1);
  const ModelConfig cf = tiny_config(StyleMode::kFaceformer);
  const ModelWeights wf = ModelWeights::init(cf, 1);
  Rng rng(2);
  const Matrix feats = random_matrix(rng, 20, ci.d_audio);
  const RowVector style = wi.at("style_table").row(0);
  const Matrix teacher = Matrix::Zero(10, ci.out_dim());

  ForwardCache cache;
  CHECK_THROWS_AS(model_forward(wf, feats, style, nullptr, cache), ConfigError);
  CHECK_THROWS_AS(model_forward(wi, feats, style, nullptr, cache, &teacher), ConfigError);
  const Matrix bad_teacher = Matrix::Zero(7, ci.out_dim());
  CHECK_THROWS_AS(model_forward(wf, feats, style, nullptr, cache, &bad_teacher), ShapeError);
  const RowVector bad_style = RowVector::Zero(ci.d_model + 1);
  CHECK_THROWS_AS(model_forward(wi, feats, bad_style, nullptr, cache), ShapeError);
  const Matrix bad_feats = Matrix::Zero(20, ci.d_audio + 2);
  CHECK_THROWS_AS(encode_audio(wi, bad_feats), ShapeError);

  ModelConfig bad = ci;
  bad.n_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ci;
  bad.lip_vertex_ids = {99};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config json round-trip") {
  ModelConfig c = tiny_config(StyleMode::kFaceformer);
  c.ln_eps = 3e-6;
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.d_model == c.d_model);
  CHECK(back.style_mode == StyleMode::kFaceformer);
  CHECK(back.lip_vertex_ids == c.lip_vertex_ids);
  CHECK(back.ln_eps == c.ln_eps);
  CHECK_THROWS_AS(style_mode_from_string("salsa"), ConfigError);
}

// ---------------------------------------------------------------------------
// Finite-difference validation of the full analytic backward.

namespace {

struct FdProblem {
  ModelWeights w;
  Matrix feats;
  RowVector style;
  Matrix weighting;  // fixed random weights making the output a scalar loss
  Matrix teacher;
  const Matrix* teacher_ptr = nullptr;
};

FdProblem make_problem(StyleMode mode, std::uint64_t seed) {
  FdProblem p;
  const ModelConfig c = tiny_config(mode);
  p.w = ModelWeights::init(c, seed);
  Rng rng(seed + 1);
  p.feats = random_matrix(rng, 16, c.d_audio);  // T = 8
  p.style = random_matrix(rng, 1, c.d_model, 0.1).row(0);
  p.weighting = random_matrix(rng, 8, c.out_dim());
  if (mode == StyleMode::kFaceformer) {
    p.teacher = random_matrix(rng, 8, c.out_dim(), 0.1);
    p.teacher_ptr = &p.teacher;
  }
  return p;
}

double problem_loss(const FdProblem& p, const ModelWeights& w, const RowVector& style,
                    const LoraSet* lora) {
  ForwardCache cache;
  const Matrix pred = model_forward(w, p.feats, style, lora, cache, p.teacher_ptr);
  return (pred.array() * p.weighting.array()).sum();
}

void check_tensor_grad(const FdProblem& p, const std::string& name) {
  ForwardCache cache;
  model_forward(p.w, p.feats, p.style, nullptr, cache, p.teacher_ptr);
  GradMap grads = zero_grads(p.w);
  model_backward(p.w, cache, p.weighting, nullptr, BackwardOptions{}, &grads, nullptr, nullptr);

  const auto loss = [&](const Matrix& x) {
    ModelWeights w2 = p.w;
    w2.at(name) = x;
    return problem_loss(p, w2, p.style, nullptr);
  };
  const double err = grad_check(loss, p.w.at(name), grads.at(name));
  INFO("tensor ", name);
  CHECK(err < 1e-6);
}

}  // namespace

TEST_CASE("analytic gradients pass finite differences (imitator)") {
  const FdProblem p = make_problem(StyleMode::kImitator, 21);
  for (const char* name :
       {"audio_proj.w", "audio_proj.b", "dec0.self_q.w", "dec0.self_k.w", "dec0.self_v.b",
        "dec0.self_o.w", "dec1.cross_q.w", "dec1.cross_k.w", "dec1.cross_v.w", "dec0.norm1.g",
        "dec1.norm2.b", "dec0.norm3.g", "dec1.ffn1.w", "dec0.ffn2.w", "final_norm.g",
        "final_norm.b", "motion1.w", "motion2.w", "motion2.b", "start_token"}) {
    check_tensor_grad(p, name);
  }
}

TEST_CASE("analytic gradients pass finite differences (faceformer)") {
  const FdProblem p = make_problem(StyleMode::kFaceformer, 22);
  for (const char* name : {"audio_proj.w", "dec0.self_q.w", "dec1.cross_o.w", "dec0.ffn1.b",
                           "motion1.w", "motion1.b", "prev_enc.w", "prev_enc.b"}) {
    check_tensor_grad(p, name);
  }
}

TEST_CASE("style gradient passes finite differences in both modes") {
  for (const StyleMode mode : {StyleMode::kImitator, StyleMode::kFaceformer}) {
    const FdProblem p = make_problem(mode, 23);
    ForwardCache cache;
    model_forward(p.w, p.feats, p.style, nullptr, cache, p.teacher_ptr);
    RowVector dstyle = RowVector::Zero(p.w.config.d_model);
    model_backward(p.w, cache, p.weighting, nullptr, BackwardOptions{}, nullptr, nullptr,
                   &dstyle);

    const auto loss = [&](const Matrix& x) {
      return problem_loss(p, p.w, x.row(0), nullptr);
    };
    Matrix style_m(1, p.w.config.d_model);
    style_m.row(0) = p.style;
    Matrix dstyle_m(1, p.w.config.d_model);
    dstyle_m.row(0) = dstyle;
    CHECK(grad_check(loss, style_m, dstyle_m) < 1e-6);
  }
}
