// Acceptance harness: eight end-to-end criteria, one pass/fail line each.
// Exit code 0 only when every criterion passes.  Heavier criteria drive the
// command layer (writing real artifacts + manifests under the system temp
// directory) so that reproducibility is exercised exactly the way a user run
// would be.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "speechanim/chunking.hpp"
#include "speechanim/commands.hpp"
#include "speechanim/container.hpp"
#include "speechanim/data.hpp"
#include "speechanim/lora.hpp"
#include "speechanim/model.hpp"
#include "speechanim/numerics.hpp"
#include "speechanim/rng.hpp"
#include "speechanim/training.hpp"
#include "speechanim/types.hpp"

using namespace speechanim;
namespace fs = std::filesystem;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

Matrix random_matrix(Rng& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  }
  return m;
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / "speechanim_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string wpath(const std::string& name) { return (work_dir() / name).string(); }

// --- criterion 1: gradient correctness ---------------------------------------

ModelConfig fd_model_config(StyleMode mode) {
  ModelConfig c;
  c.d_audio = 2;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_layers = 1;
  c.n_vertices = 2;
  c.n_styles = 2;
  c.style_mode = mode;
  c.lip_vertex_ids = {0, 1};
  c.ffn_hidden = 6;
  c.motion_hidden = 5;
  return c;
}

Outcome criterion_gradients() {
  Outcome o;
  const double kTol = 1e-4;
  double worst = 0.0;
  auto track = [&](double err, const std::string& what) {
    worst = std::max(worst, err);
    o.check(std::isfinite(err) && err < kTol, what + ": rel err " + fmt(err));
  };

  Rng rng(42);

  {  // matmul
    const Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 5);
    const Matrix g = random_matrix(rng, 3, 5);
    Matrix da = Matrix::Zero(3, 4), db = Matrix::Zero(4, 5);
    matmul_backward(a, b, g, da, db);
    track(grad_check([&](const Matrix& x) { return (matmul(x, b).array() * g.array()).sum(); },
                     a, da),
          "matmul dA");
    track(grad_check([&](const Matrix& x) { return (matmul(a, x).array() * g.array()).sum(); },
                     b, db),
          "matmul dB");
  }
  for (const bool causal : {false, true}) {  // softmax rows
    const Matrix x = random_matrix(rng, 5, 5);
    const Matrix g = random_matrix(rng, 5, 5);
    const Matrix y = softmax_rows(x, causal);
    Matrix dx = Matrix::Zero(5, 5);
    softmax_rows_backward(y, g, causal, dx);
    track(grad_check(
              [&](const Matrix& v) { return (softmax_rows(v, causal).array() * g.array()).sum(); },
              x, dx),
          causal ? "softmax causal dx" : "softmax dx");
  }
  {  // layer norm
    const Matrix x = random_matrix(rng, 4, 6);
    RowVector gain = random_matrix(rng, 1, 6).row(0), bias = random_matrix(rng, 1, 6).row(0);
    const Matrix g = random_matrix(rng, 4, 6);
    Matrix dx = Matrix::Zero(4, 6);
    RowVector dgain = RowVector::Zero(6), dbias = RowVector::Zero(6);
    layer_norm_backward(x, gain, 1e-5, g, dx, dgain, dbias);
    track(grad_check(
              [&](const Matrix& v) { return (layer_norm(v, gain, bias).array() * g.array()).sum(); },
              x, dx),
          "layer_norm dx");
    track(grad_check(
              [&](const Matrix& v) {
                return (layer_norm(x, v.row(0), bias).array() * g.array()).sum();
              },
              Matrix(gain), Matrix(dgain)),
          "layer_norm dgain");
    track(grad_check(
              [&](const Matrix& v) {
                return (layer_norm(x, gain, v.row(0)).array() * g.array()).sum();
              },
              Matrix(bias), Matrix(dbias)),
          "layer_norm dbias");
  }
  {  // sequence loss wrt predictions
    const LossConfig loss;
    const Matrix pred = random_matrix(rng, 7, 6), target = random_matrix(rng, 7, 6);
    Matrix dpred;
    sequence_loss_backward(pred, target, loss, dpred);
    track(grad_check([&](const Matrix& p) { return sequence_loss(p, target, loss); }, pred, dpred),
          "sequence_loss dpred");
  }

  // End-to-end: d(loss)/d(every weight tensor, every LoRA factor, style), both
  // conditioning modes, T <= 10, dims <= 32, inputs <= 1.
  for (const StyleMode mode : {StyleMode::kImitator, StyleMode::kFaceformer}) {
    const ModelConfig mc = fd_model_config(mode);
    const ModelWeights w = ModelWeights::init(mc, 7);
    LoraConfig lc;
    lc.rank = 2;
    lc.alpha = 4.0;
    lc.targets = LoraTarget::kBoth;
    LoraSet lora = lora_attach(w, lc, 11);
    for (auto& [t, ad] : lora.adaptors) {  // move B off zero so its grads matter
      for (Index i = 0; i < ad.b.rows(); ++i) {
        for (Index j = 0; j < ad.b.cols(); ++j) ad.b(i, j) = rng.uniform(-0.1, 0.1);
      }
    }
    const Index T = 6;
    const Matrix features = random_matrix(rng, 2 * T, mc.d_audio);
    const Matrix target = random_matrix(rng, T, mc.out_dim());
    const RowVector style = random_matrix(rng, 1, mc.d_model).row(0);
    const Matrix* teacher = mode == StyleMode::kFaceformer ? &target : nullptr;
    const LossConfig loss;
    const std::string tag = std::string(style_mode_name(mode)) + " ";

    auto loss_of = [&](const ModelWeights& ww, const LoraSet& ll, const RowVector& ss) {
      ForwardCache cache;
      return sequence_loss(model_forward(ww, features, ss, &ll, cache, teacher), target, loss);
    };

    GradMap grads = zero_grads(w);
    LoraGradMap lgrads = lora_zero_grads(lora);
    RowVector dstyle = RowVector::Zero(mc.d_model);
    {
      ForwardCache cache;
      const Matrix pred = model_forward(w, features, style, &lora, cache, teacher);
      Matrix dpred;
      sequence_loss_backward(pred, target, loss, dpred);
      model_backward(w, cache, dpred, &lora, BackwardOptions{}, &grads, &lgrads, &dstyle);
    }
    for (const auto& [name, tensor] : w.tensors) {
      track(grad_check(
                [&](const Matrix& x) {
                  ModelWeights ww = w;
                  ww.tensors.at(name) = x;
                  return loss_of(ww, lora, style);
                },
                tensor, grads.at(name)),
            tag + name);
    }
    for (const auto& [tname, ad] : lora.adaptors) {
      track(grad_check(
                [&](const Matrix& x) {
                  LoraSet ll = lora;
                  ll.adaptors.at(tname).a = x;
                  return loss_of(w, ll, style);
                },
                ad.a, lgrads.at(tname).da),
            tag + "lora." + tname + ".a");
      track(grad_check(
                [&](const Matrix& x) {
                  LoraSet ll = lora;
                  ll.adaptors.at(tname).b = x;
                  return loss_of(w, ll, style);
                },
                ad.b, lgrads.at(tname).db),
            tag + "lora." + tname + ".b");
    }
    track(grad_check(
              [&](const Matrix& x) { return loss_of(w, lora, x.row(0)); }, Matrix(style),
              Matrix(dstyle)),
          tag + "style");
  }

  o.note("max rel err " + fmt(worst) + " (tol 1e-4)");
  return o;
}

// --- criterion 2: LoRA identity & merge --------------------------------------

Outcome criterion_lora() {
  Outcome o;
  ModelConfig mc;  // default-size model
  const ModelWeights base = ModelWeights::init(mc, 3);
  Rng rng(17);
  const Matrix features = random_matrix(rng, 80, mc.d_audio);
  const RowVector style = base.at("style_table").row(0);

  LoraConfig lc;  // defaults: rank 4, alpha 8, both target groups
  const LoraSet fresh = lora_attach(base, lc, 99);
  const Matrix plain = infer_offsets(base, features, style);
  const Matrix attached = infer_offsets(base, features, style, &fresh);
  o.check(plain == attached, "fresh attach changed the output (must be exact)");

  LoraSet trained = fresh;  // nonzero factors stand in for a trained adaptor
  for (auto& [t, ad] : trained.adaptors) {
    for (Index i = 0; i < ad.b.rows(); ++i) {
      for (Index j = 0; j < ad.b.cols(); ++j) ad.b(i, j) = rng.normal(0.0, 0.05);
    }
  }
  const Matrix adapted = infer_offsets(base, features, style, &trained);
  const ModelWeights merged = lora_merge(base, trained);
  const Matrix merged_out = infer_offsets(merged, features, style);
  const double rel = (adapted - merged_out).norm() / std::max(1.0, adapted.norm());
  o.check(rel < 1e-9, "merged vs adapted rel diff " + fmt(rel) + " (tol 1e-9)");
  o.note("merge rel diff " + fmt(rel));

  double worst_sv = 0.0;
  for (const auto& [t, ad] : trained.adaptors) {
    const Matrix delta = ad.delta();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(delta);
    if (svd.singularValues().size() > ad.rank) {
      worst_sv = std::max(worst_sv, svd.singularValues()(ad.rank));
    }
  }
  o.check(worst_sv < 1e-10, "rank-(r+1) singular value " + fmt(worst_sv) + " (tol 1e-10)");
  o.note("largest (r+1)-th singular value " + fmt(worst_sv));
  return o;
}

// --- criterion 3: chunking equivalence & partition ---------------------------

Outcome criterion_chunking() {
  Outcome o;
  ModelConfig mc = fd_model_config(StyleMode::kImitator);
  mc.d_model = 8;
  mc.ffn_hidden = 12;
  const ModelWeights w = ModelWeights::init(mc, 21);
  Rng rng(23);
  const Matrix features = random_matrix(rng, 160, mc.d_audio);  // T = 80
  const RowVector style = w.at("style_table").row(1);

  const Matrix full = infer_offsets(w, features, style);
  const Matrix one_chunk = chunked_infer_offsets(w, features, style, 4096, 7);
  o.check(full == one_chunk, "K >= T did not reproduce full inference exactly");

  // Partition property over randomized triples.
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Rng r = Rng(777).fork("triple", static_cast<std::uint64_t>(trial));
    const Index T = 1 + static_cast<Index>(r.uniform_int(0, 2999));
    const Index K = 1 + static_cast<Index>(r.uniform_int(0, 3199));
    const Index P = static_cast<Index>(r.uniform_int(0, 40));
    const ChunkPlan plan = plan_chunks(T, K, P);
    validate_plan(plan);
    bool tiles = !plan.chunks.empty() && plan.chunks.front().keep_begin == 0 &&
                 plan.chunks.back().keep_end == T;
    for (std::size_t i = 0; i + 1 < plan.chunks.size(); ++i) {
      tiles = tiles && plan.chunks[i].keep_end == plan.chunks[i + 1].keep_begin;
    }
    if (tiles) ++checked;
  }
  o.check(checked == 1000,
          "keep regions failed to tile [0,T) on " + std::to_string(1000 - checked) + " triples");
  o.note("1000 randomized (T,K,P) partitions verified");

  // Evaluation-order independence: reversed manual evaluation and a threaded
  // run must both match the sequential result bit for bit.
  const Index K = 7, P = 3;
  const Matrix seq = chunked_infer_offsets(w, features, style, K, P);
  const Matrix threaded = chunked_infer_offsets(w, features, style, K, P, nullptr, 3);
  o.check(seq == threaded, "threaded chunk evaluation changed the output");
  const Matrix feats_fps = resample_linear(features, mc.feature_rate, mc.fps);
  const ChunkPlan plan = plan_chunks(feats_fps.rows(), K, P);
  Matrix stitched(feats_fps.rows(), mc.out_dim());
  for (auto it = plan.chunks.rbegin(); it != plan.chunks.rend(); ++it) {
    stitched.middleRows(it->keep_begin, it->keep_frames()) =
        infer_chunk_offsets(w, feats_fps, style, *it);
  }
  o.check(seq == stitched, "reversed chunk evaluation changed the output");
  return o;
}

// --- criterion 4: complexity reduction ---------------------------------------

Outcome criterion_complexity() {
  Outcome o;
  const AttentionOpCounts counts = attention_ops(1000, 50, 5);
  o.check(counts.full == 500500,
          "full op count " + std::to_string(counts.full) + " != 500500");
  o.check(counts.chunked == 36020,
          "chunked op count " + std::to_string(counts.chunked) + " != 36020");
  const double ratio =
      static_cast<double>(counts.full) / static_cast<double>(counts.chunked);
  o.check(ratio >= 13.0, "op-count reduction " + fmt(ratio) + "x < 13x");
  o.note("op counts 500500 vs 36020 (" + fmt(ratio) + "x)");

  // Wall clock on the default model at T = 3000.
  ModelConfig mc;
  const ModelWeights w = ModelWeights::init(mc, 15);
  Rng rng(31);
  const Matrix features = random_matrix(rng, 6000, mc.d_audio);
  const RowVector style = w.at("style_table").row(2);

  const double t0 = now_s();
  const Matrix full = infer_offsets(w, features, style);
  const double t1 = now_s();
  const Matrix chunked = chunked_infer_offsets(w, features, style, 50, 5);
  const double t2 = now_s();
  const double speedup = (t1 - t0) / std::max(1e-9, t2 - t1);
  o.check(full.rows() == 3000 && chunked.rows() == 3000, "unexpected output length");
  o.check(speedup >= 3.0, "measured speedup " + fmt(speedup) + "x < 3x");
  o.note("full " + fmt(t1 - t0) + " s vs chunked " + fmt(t2 - t1) + " s (" + fmt(speedup) + "x)");
  return o;
}

// --- criteria 5-8 share one corpus and base model ----------------------------

struct Workbench {
  std::string corpus_dir;
  std::string base_path;
  RunManifest gen_manifest;
  RunManifest train_manifest;
  int subject = -1;
  Corpus corpus;
  ModelWeights base;
  std::vector<RunManifest> adapt_manifests;  // criterion 5 runs
  RunManifest sweep_manifest;                // criterion 6
  RunManifest bench_manifest;                // criterion 7
  bool sweep_ran = false;
  bool bench_ran = false;
};

// Trend criteria run at a reduced desk scale: the default corpus shape (12
// subjects x 40 sentences) with shorter sentences and a lighter mesh so the
// full protocol (200-epoch base, 300-epoch baselines, 30-trial sweep) fits the
// stated runtime budgets.
CorpusConfig bench_corpus_config() {
  CorpusConfig c;
  c.n_vertices = 60;
  c.min_frames = 50;
  c.max_frames = 80;
  return c;
}

nlohmann::json bench_model_config() {
  ModelConfig m;  // defaults: d_model 32, 2 layers, 4 heads, lips 0..23
  m.n_vertices = 60;
  m.motion_hidden = 64;
  m.n_styles = 8;
  m.style_mode = StyleMode::kImitator;
  return m.to_json();
}

Workbench build_workbench() {
  Workbench wb;
  const std::string cfg_path = wpath("bench_corpus_config.json");
  std::ofstream(cfg_path) << bench_corpus_config().to_json().dump(2) << "\n";

  GenDataArgs gen;
  gen.config_path = cfg_path;
  gen.out_dir = wpath("corpus");
  wb.gen_manifest = cmd_gen_data(gen);
  wb.corpus_dir = gen.out_dir;

  TrainBaseArgs train;
  train.corpus_dir = wb.corpus_dir;
  train.model_config_inline = bench_model_config();
  train.out_file = wpath("base.bin");
  wb.train_manifest = cmd_train_base(train);  // 200 epochs (default)
  wb.base_path = train.out_file;

  wb.corpus = load_corpus(wb.corpus_dir);
  wb.base = load_model(wb.base_path);
  wb.subject = wb.corpus.split_ids(Split::kTest).front();
  return wb;
}

Outcome criterion_adaptation(Workbench& wb) {
  Outcome o;
  const StyleChoice choice = best_base_style(wb.base, wb.corpus, wb.subject);
  o.note("best base style " + std::to_string(choice.index) + " lip L2 " +
         fmt(choice.metrics.l2_lip));

  struct Run {
    AdaptResult result;
    double seconds = 0.0;  // training-loop wall time; containers do not store it
  };
  auto run = [&](const std::string& strategy, int n) {
    AdaptArgs a;
    a.base_file = wb.base_path;
    a.corpus_dir = wb.corpus_dir;
    a.subject = wb.subject;
    a.sentences = n;
    a.strategy = strategy;  // epochs -1: strategy defaults (lora 50, others 300)
    a.out_file = wpath("adapt_" + strategy + "_" + std::to_string(n) + ".bin");
    const RunManifest m = cmd_adapt(a);
    wb.adapt_manifests.push_back(m);
    return Run{load_adapt_result(a.out_file, file_content_hash(wb.base_path)),
               m.timings.at("adapt_seconds").get<double>()};
  };

  for (const int n : {1, 30}) {
    const Run lora = run("lora", n);
    const Run style_only = run("style-only", n);
    const Run imitator = run("imitator-style", n);
    const std::string at = "n=" + std::to_string(n) + ": ";

    o.check(lora.result.epochs == 50 && style_only.result.epochs == 300 &&
                imitator.result.epochs == 300,
            at + "unexpected default epochs");
    o.check(lora.result.held_out.l2_lip <= choice.metrics.l2_lip,
            at + "LoRA lip L2 " + fmt(lora.result.held_out.l2_lip) + " > best base style " +
                fmt(choice.metrics.l2_lip));
    o.check(lora.result.held_out.l2_lip <= style_only.result.held_out.l2_lip,
            at + "LoRA lip L2 " + fmt(lora.result.held_out.l2_lip) + " > style-only " +
                fmt(style_only.result.held_out.l2_lip));
    o.check(lora.seconds > 0.0 && imitator.seconds > 0.0,
            at + "missing adaptation wall time");
    const double ratio = imitator.seconds / std::max(1e-9, lora.seconds);
    o.check(lora.seconds <= imitator.seconds / 3.0,
            at + "LoRA time " + fmt(lora.seconds) + " s not <= 1/3 of imitator-style " +
                fmt(imitator.seconds) + " s");
    o.note(at + "lip L2 lora " + fmt(lora.result.held_out.l2_lip) + " | style-only " +
           fmt(style_only.result.held_out.l2_lip) + " | imitator-style " +
           fmt(imitator.result.held_out.l2_lip) + "; time lora " + fmt(lora.seconds) +
           " s vs imitator-style " + fmt(imitator.seconds) + " s (" + fmt(ratio) + "x)");
  }
  return o;
}

Outcome criterion_rank_sweep(Workbench& wb) {
  Outcome o;
  SweepRankArgs args;
  args.base_file = wb.base_path;
  args.corpus_dir = wb.corpus_dir;
  args.out_csv = wpath("rank_sweep.csv");  // 30 trials, ranks 1..32, 50 epochs
  wb.sweep_manifest = cmd_sweep_rank(args);
  wb.sweep_ran = true;

  const std::vector<int> ranks = parse_int_list(args.ranks, "--ranks");
  const auto means = wb.sweep_manifest.outputs.at("mean_lip_l2").get<std::vector<double>>();
  const std::size_t best =
      static_cast<std::size_t>(std::min_element(means.begin(), means.end()) - means.begin());
  const int best_rank = ranks[best];
  o.check(best_rank == 2 || best_rank == 4 || best_rank == 8,
          "minimum mean lip L2 at rank " + std::to_string(best_rank) + ", not in {2,4,8}");

  const std::size_t i4 = static_cast<std::size_t>(std::find(ranks.begin(), ranks.end(), 4) -
                                                  ranks.begin());
  const std::size_t i32 = static_cast<std::size_t>(std::find(ranks.begin(), ranks.end(), 32) -
                                                   ranks.begin());
  o.check(means[i32] >= means[i4], "rank-32 mean " + fmt(means[i32]) +
                                       " < rank-4 mean " + fmt(means[i4]) +
                                       " (no overfitting tail)");
  std::string curve;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    curve += (i ? ", " : "") + std::to_string(ranks[i]) + ": " + fmt(means[i]);
  }
  o.note("mean lip L2 by rank — " + curve);
  return o;
}

Outcome criterion_chunk_sweep(Workbench& wb) {
  Outcome o;
  BenchChunkArgs args;
  args.model_file = wb.base_path;
  args.corpus_dir = wb.corpus_dir;
  args.out_csv = wpath("chunk_sweep.csv");  // K {5,10,25,50,100,200}, P {0,2,5,10}
  wb.bench_manifest = cmd_bench_chunking(args);
  wb.bench_ran = true;

  std::ifstream jf(args.out_csv + ".json");
  const nlohmann::json result = nlohmann::json::parse(jf);
  const double unchunked = result.at("unchunked").at("l2_face").get<double>();

  auto row = [&](int K, int P) -> const nlohmann::json& {
    for (const auto& r : result.at("rows")) {
      if (r.at("chunk_size") == K && r.at("padding") == P) return r;
    }
    throw std::runtime_error("row not found");
  };

  const double at50 = row(50, 5).at("masked").at("l2_face").get<double>();
  const double rel50 = std::abs(at50 - unchunked) / unchunked;
  o.check(rel50 <= 0.05, "K=50 masked L2 " + fmt(at50) + " deviates " + fmt(100 * rel50) +
                             "% from unchunked " + fmt(unchunked));
  o.note("unchunked " + fmt(unchunked) + ", K=50 " + fmt(at50) + " (" + fmt(100 * rel50) +
         "% off)");

  for (const int K : {5, 10}) {
    const double atK = row(K, 5).at("masked").at("l2_face").get<double>();
    const double rel = (atK - unchunked) / unchunked;
    o.check(rel > 0.05, "K=" + std::to_string(K) + " masked L2 " + fmt(atK) +
                            " does not degrade > 5% (" + fmt(100 * rel) + "%)");
    o.note("K=" + std::to_string(K) + " degrades " + fmt(100 * rel) + "%");
  }

  std::string trace;
  double prev = 0.0;
  bool monotone = true;
  const std::vector<int> paddings{0, 2, 5, 10};
  for (std::size_t i = 0; i < paddings.size(); ++i) {
    const double d = row(50, paddings[i]).at("boundary_discrepancy").get<double>();
    if (i > 0 && d > prev) monotone = false;
    prev = d;
    trace += (i ? ", " : "") + ("P=" + std::to_string(paddings[i]) + ": " + fmt(d));
  }
  o.check(monotone, "boundary discrepancy not non-increasing in P (" + trace + ")");
  o.note("boundary discrepancy at K=50 — " + trace);
  return o;
}

Outcome criterion_reproducibility(Workbench& wb) {
  Outcome o;

  {  // corpus generation
    ReplayArgs r;
    r.manifest_path = wb.corpus_dir + ".manifest.json";
    const RunManifest m = cmd_replay(r);
    o.check(m.outputs.at("corpus_dir").at("tree_hash") ==
                wb.gen_manifest.outputs.at("corpus_dir").at("tree_hash"),
            "corpus regeneration changed the directory tree");
  }
  {  // base training
    ReplayArgs r;
    r.manifest_path = wb.base_path + ".manifest.json";
    const RunManifest m = cmd_replay(r);
    o.check(m.outputs.at("model").at("hash") ==
                wb.train_manifest.outputs.at("model").at("hash"),
            "base re-training changed the model file");
  }
  for (const RunManifest& original : wb.adapt_manifests) {  // every adaptation
    ReplayArgs r;
    r.manifest_path = original.config.at("manifest_path").get<std::string>();
    const RunManifest m = cmd_replay(r);
    const std::string which = original.config.at("strategy").get<std::string>() + " n=" +
                              std::to_string(original.config.at("sentences").get<int>());
    o.check(m.outputs.at("metrics") == original.outputs.at("metrics"),
            "adaptation metrics changed on replay (" + which + ")");
    o.check(m.outputs.at("adaptor").at("hash") == original.outputs.at("adaptor").at("hash"),
            "adaptor file changed on replay (" + which + ")");
  }
  if (wb.sweep_ran) {  // rank sweep
    ReplayArgs r;
    r.manifest_path = wb.sweep_manifest.config.at("manifest_path").get<std::string>();
    const RunManifest m = cmd_replay(r);
    o.check(m.outputs.at("mean_lip_l2") == wb.sweep_manifest.outputs.at("mean_lip_l2"),
            "rank-sweep means changed on replay");
  }
  if (wb.bench_ran) {  // chunk sweep: all metric columns, timings excluded
    ReplayArgs r;
    r.manifest_path = wb.bench_manifest.config.at("manifest_path").get<std::string>();
    const RunManifest m = cmd_replay(r);
    const std::string orig_csv = wb.bench_manifest.config.at("out_csv").get<std::string>();
    const std::string replay_csv = m.config.at("out_csv").get<std::string>();
    std::ifstream fa(orig_csv + ".json"), fb(replay_csv + ".json");
    const nlohmann::json a = nlohmann::json::parse(fa), b = nlohmann::json::parse(fb);
    bool same = a.at("unchunked") == b.at("unchunked") &&
                a.at("rows").size() == b.at("rows").size();
    for (std::size_t i = 0; same && i < a.at("rows").size(); ++i) {
      const auto &ra = a.at("rows")[i], &rb = b.at("rows")[i];
      for (const char* key : {"chunk_size", "padding", "masked", "ops_full", "ops_chunked",
                              "boundary_discrepancy", "boundary_trace"}) {
        same = same && ra.at(key) == rb.at(key);
      }
    }
    o.check(same, "chunk-sweep metrics changed on replay");
  }
  o.note("replays: corpus, base model, " + std::to_string(wb.adapt_manifests.size()) +
         " adaptations, rank sweep, chunk sweep");
  return o;
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* label;
    double budget_s;  // stated runtime cap; 0 = uncapped
    Outcome outcome;
    double seconds = 0.0;
  };

  Workbench wb;
  bool workbench_ok = true;
  std::string workbench_error;
  double workbench_seconds = 0.0;

  std::vector<Entry> entries{
      {1, "gradient correctness (finite differences)", 60.0, {}, 0.0},
      {2, "LoRA identity, merge, and rank bound", 60.0, {}, 0.0},
      {3, "chunking equivalence and partition", 60.0, {}, 0.0},
      {4, "attention complexity reduction", 120.0, {}, 0.0},
      {5, "adaptation quality and speed trend", 900.0, {}, 0.0},
      {6, "LoRA rank sweep trend", 1800.0, {}, 0.0},
      {7, "chunked-inference quality trend", 600.0, {}, 0.0},
      {8, "bit-identical reproducibility from manifests", 0.0, {}, 0.0},
  };

  auto run = [&](Entry& e, auto&& fn) {
    const double t0 = now_s();
    try {
      e.outcome = fn();
    } catch (const std::exception& ex) {
      e.outcome.pass = false;
      e.outcome.failures.push_back(std::string("exception: ") + ex.what());
    }
    e.seconds = now_s() - t0;
    if (e.budget_s > 0.0 && e.seconds > e.budget_s) {
      e.outcome.pass = false;
      e.outcome.failures.push_back("runtime " + fmt(e.seconds) + " s exceeds " +
                                   fmt(e.budget_s) + " s budget");
    }
    std::printf("criterion %d [%s]: %s (%.1f s)\n", e.id, e.label,
                e.outcome.pass ? "PASS" : "FAIL", e.seconds);
    for (const std::string& n : e.outcome.notes) std::printf("    %s\n", n.c_str());
    for (const std::string& f : e.outcome.failures) std::printf("    FAILED: %s\n", f.c_str());
    std::fflush(stdout);
  };

  run(entries[0], criterion_gradients);
  run(entries[1], criterion_lora);
  run(entries[2], criterion_chunking);
  run(entries[3], criterion_complexity);

  {
    const double t0 = now_s();
    try {
      wb = build_workbench();
    } catch (const std::exception& ex) {
      workbench_ok = false;
      workbench_error = ex.what();
    }
    workbench_seconds = now_s() - t0;
    std::printf("workbench [synthetic corpus + 200-epoch base model]: %s (%.1f s)\n",
                workbench_ok ? "ready" : "FAILED", workbench_seconds);
    if (!workbench_ok) std::printf("    %s\n", workbench_error.c_str());
    std::fflush(stdout);
  }

  auto blocked = [&](Entry& e) {
    e.outcome.pass = false;
    e.outcome.failures.push_back("workbench setup failed: " + workbench_error);
    std::printf("criterion %d [%s]: FAIL (blocked)\n", e.id, e.label);
    std::printf("    FAILED: %s\n", e.outcome.failures.back().c_str());
  };

  if (workbench_ok) {
    run(entries[4], [&] { return criterion_adaptation(wb); });
    run(entries[5], [&] { return criterion_rank_sweep(wb); });
    run(entries[6], [&] { return criterion_chunk_sweep(wb); });
    run(entries[7], [&] { return criterion_reproducibility(wb); });
  } else {
    for (int i = 4; i < 8; ++i) blocked(entries[i]);
  }

  int failed = 0;
  for (const Entry& e : entries) failed += e.outcome.pass ? 0 : 1;
  std::printf("%d/8 criteria passed\n", 8 - failed);
  return failed == 0 ? 0 : 1;
}
