// speechanim: experiment harness CLI.  Thin argument shell over the command
// layer; every subcommand writes its outputs plus a run manifest and prints a
// machine-readable summary on stdout.  Errors leave as JSON on stderr with a
// nonzero exit code.
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "speechanim/commands.hpp"
#include "speechanim/types.hpp"

namespace {

using speechanim::RunManifest;

void print_summary(const RunManifest& m) {
  const nlohmann::json j{{"command", m.command}, {"outputs", m.outputs}, {"timings", m.timings}};
  std::printf("%s\n", j.dump().c_str());
}

const char* error_type(const std::exception& e) {
  if (dynamic_cast<const speechanim::ConfigError*>(&e)) return "config_error";
  if (dynamic_cast<const speechanim::ShapeError*>(&e)) return "shape_error";
  if (dynamic_cast<const speechanim::IoError*>(&e)) return "io_error";
  if (dynamic_cast<const speechanim::NumericError*>(&e)) return "numeric_error";
  return "error";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-to-animation toolkit: synthetic corpus generation, base "
               "training, low-rank and style adaptation, chunked inference, and "
               "benchmark sweeps"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(speechanim::kToolVersion));

  speechanim::GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic corpus directory");
  c_gen->add_option("--config", gen.config_path, "Corpus config JSON (defaults when omitted)");
  c_gen->add_option("--out", gen.out_dir, "Output corpus directory")->required();
  c_gen->add_option("--seed", gen.seed, "Override the config's RNG seed");
  c_gen->add_option("--manifest", gen.manifest_path, "Manifest path (default <out>.manifest.json)");

  speechanim::TrainBaseArgs train;
  auto* c_train = app.add_subcommand("train-base", "Train a multi-speaker base model");
  c_train->add_option("--corpus", train.corpus_dir, "Corpus directory")->required();
  c_train->add_option("--mode", train.mode, "Decoder conditioning: faceformer | imitator");
  c_train->add_option("--out", train.out_file, "Output model container")->required();
  c_train->add_option("--model-config", train.model_config_path,
                      "Model config JSON (default: derived from the corpus; its style mode wins "
                      "over --mode)");
  c_train->add_option("--epochs", train.epochs, "Training epochs (default 200)");
  c_train->add_option("--seed", train.weights_seed, "Weight initialization seed");
  c_train->add_option("--manifest", train.manifest_path, "Manifest path");

  speechanim::AdaptArgs adapt;
  auto* c_adapt = app.add_subcommand("adapt", "Adapt a base model to one subject");
  c_adapt->add_option("--base", adapt.base_file, "Base model container")->required();
  c_adapt->add_option("--corpus", adapt.corpus_dir, "Corpus directory")->required();
  c_adapt->add_option("--subject", adapt.subject, "Subject id to adapt to")->required();
  c_adapt->add_option("--sentences", adapt.sentences, "Use the first N pool sentences");
  c_adapt->add_option("--sentence-ids", adapt.sentence_ids,
                      "Explicit pool sentence ids (overrides --sentences)");
  c_adapt->add_option("--strategy", adapt.strategy, "lora | imitator-style | style-only");
  c_adapt->add_option("--rank", adapt.rank, "LoRA rank (default 4)");
  c_adapt->add_option("--alpha", adapt.alpha, "LoRA alpha (default 8)");
  c_adapt->add_option("--targets", adapt.targets,
                      "LoRA targets: transformer_decoder | motion_decoder | both");
  c_adapt->add_option("--epochs", adapt.epochs, "Epochs (-1: strategy default 50/300)");
  c_adapt->add_flag("--train-style", adapt.train_style, "Also train the style code (lora only)");
  c_adapt->add_option("--seed", adapt.seed, "Adaptor initialization seed");
  c_adapt->add_option("--out", adapt.out_file, "Output adaptor container")->required();
  c_adapt->add_option("--manifest", adapt.manifest_path, "Manifest path");

  speechanim::InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "Run inference on one sentence file");
  c_infer->add_option("--model", infer.model_file, "Model container")->required();
  c_infer->add_option("--adaptor", infer.adaptor_file, "Adaptor container (optional)");
  c_infer->add_flag("--ignore-base-hash", infer.ignore_base_hash,
                    "Load the adaptor even if it was trained against a different base");
  c_infer->add_option("--input", infer.input_file, "Input sentence container")->required();
  c_infer->add_option("--chunk-K", infer.chunk_k,
                      "Chunk size in frames ('50') or seconds ('2s'); omit for full context");
  c_infer->add_option("--chunk-P", infer.chunk_p, "Chunk padding (default 5 frames)");
  c_infer->add_option("--style", infer.style, "Style-table row when no adaptor is given");
  c_infer->add_option("--threads", infer.threads, "Worker threads for chunked inference");
  c_infer->add_option("--out", infer.out_file, "Output prediction container")->required();
  c_infer->add_option("--manifest", infer.manifest_path, "Manifest path");

  speechanim::EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Score a prediction against ground truth");
  c_eval->add_option("--pred", eval.pred_file, "Prediction container")->required();
  c_eval->add_option("--gt", eval.gt_file, "Ground-truth sentence container")->required();
  c_eval->add_option("--lips", eval.lips,
                     "Lip vertex ids: 'default' (first 24) or a comma list like '0,1,2'");
  c_eval->add_option("--out", eval.out_file, "Optional metrics JSON file");
  c_eval->add_option("--manifest", eval.manifest_path, "Manifest path");

  speechanim::BenchChunkArgs bench;
  auto* c_bench = app.add_subcommand("bench-chunking", "Sweep chunk sizes and paddings");
  c_bench->add_option("--model", bench.model_file, "Model container")->required();
  c_bench->add_option("--corpus", bench.corpus_dir, "Corpus directory")->required();
  c_bench->add_option("--K", bench.chunk_sizes, "Chunk sizes (frames or '2s' entries, comma list)");
  c_bench->add_option("--P", bench.paddings, "Paddings (comma list)");
  c_bench->add_option("--threads", bench.threads, "Worker threads per chunked run");
  c_bench->add_option("--boundary-frames", bench.boundary_frames,
                      "Leading keep frames scored against full inference");
  c_bench->add_option("--out", bench.out_csv, "Output CSV (full JSON lands at <out>.json)")
      ->required();
  c_bench->add_option("--manifest", bench.manifest_path, "Manifest path");

  speechanim::SweepRankArgs sweep;
  auto* c_sweep = app.add_subcommand("sweep-rank", "Sweep LoRA rank over seeded trials");
  c_sweep->add_option("--base", sweep.base_file, "Base model container")->required();
  c_sweep->add_option("--corpus", sweep.corpus_dir, "Corpus directory")->required();
  c_sweep->add_option("--ranks", sweep.ranks, "Ranks to test (comma list)");
  c_sweep->add_option("--trials", sweep.trials, "Seeded trials (default 30)");
  c_sweep->add_option("--alpha", sweep.alpha,
                      "LoRA alpha; 0 tracks rank as 2*rank so alpha/rank stays "
                      "constant across the sweep (default 0)");
  c_sweep->add_option("--targets", sweep.targets,
                      "LoRA targets: transformer_decoder | motion_decoder | both "
                      "(default motion_decoder; measures best on this corpus)");
  c_sweep->add_option("--epochs", sweep.epochs, "Adaptation epochs per trial (default 50)");
  c_sweep->add_option("--seed", sweep.seed, "Sweep seed");
  c_sweep->add_option("--out", sweep.out_csv, "Output CSV (full JSON lands at <out>.json)")
      ->required();
  c_sweep->add_option("--manifest", sweep.manifest_path, "Manifest path");

  speechanim::ReplayArgs replay;
  auto* c_replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  c_replay->add_option("--manifest", replay.manifest_path, "Manifest to replay")->required();
  c_replay->add_option("--out", replay.out,
                       "Where the replayed primary output goes (default <original>.replay)");
  c_replay->add_option("--manifest-out", replay.manifest_out, "Where the new manifest goes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_gen->parsed()) print_summary(speechanim::cmd_gen_data(gen));
    if (c_train->parsed()) print_summary(speechanim::cmd_train_base(train));
    if (c_adapt->parsed()) print_summary(speechanim::cmd_adapt(adapt));
    if (c_infer->parsed()) print_summary(speechanim::cmd_infer(infer));
    if (c_eval->parsed()) {
      const RunManifest m = speechanim::cmd_eval(eval);
      std::printf("%s\n", m.outputs.at("metrics").dump().c_str());
    }
    if (c_bench->parsed()) print_summary(speechanim::cmd_bench_chunking(bench));
    if (c_sweep->parsed()) print_summary(speechanim::cmd_sweep_rank(sweep));
    if (c_replay->parsed()) print_summary(speechanim::cmd_replay(replay));
  } catch (const std::exception& e) {
    const nlohmann::json err{{"error", {{"type", error_type(e)}, {"message", e.what()}}}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
  return 0;
}
