#pragma once

// Command layer: each cmd_* runs one experiment step end to end — load inputs,
// run, write every output plus a RunManifest — and returns the manifest.  The
// CLI binary is a thin argument-parsing shell over these functions.
//
// Before running, each command canonicalizes its arguments (config files are
// inlined, seed overrides applied, seconds converted to frames, "default" lip
// sets expanded), and the manifest stores that canonical form.  cmd_replay
// therefore re-runs any recorded manifest exactly, with only the output
// locations swapped, and a re-run with unchanged inputs reproduces metrics
// bit-identically.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "speechanim/types.hpp"

namespace speechanim {

inline constexpr const char* kToolVersion = "speechanim 0.1.0";

struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  nlohmann::json config = nlohmann::json::object();        // canonical arguments
  nlohmann::json input_hashes = nlohmann::json::object();  // path -> content hash
  nlohmann::json outputs = nlohmann::json::object();       // label -> {path, hash, ...}
  nlohmann::json timings = nlohmann::json::object();       // label -> seconds

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static RunManifest load(const std::string& path);  // IoError on unreadable/invalid
};

// "50" -> 50 frames; "2s" / "0.5s" -> seconds scaled by fps, rounded to the
// nearest frame.  ConfigError (naming `flag`) on anything else or a negative
// result.
Index parse_frames_or_seconds(const std::string& text, int fps, const std::string& flag);
std::vector<Index> parse_frames_list(const std::string& text, int fps, const std::string& flag);
std::vector<int> parse_int_list(const std::string& text, const std::string& flag);

// FNV-1a over the sorted (filename, content hash) pairs of a directory's
// regular files; identical trees hash equal.
std::string dir_tree_hash(const std::string& dir);

// --- commands ----------------------------------------------------------------

struct GenDataArgs {
  std::string config_path;                        // empty: defaults
  nlohmann::json config_inline;                   // set on replay instead of a path
  std::string out_dir;
  std::int64_t seed = -1;                         // >= 0 overrides the config seed
  std::string manifest_path;                      // empty: <out_dir>.manifest.json (sibling)

  nlohmann::json to_json() const;
  static GenDataArgs from_json(const nlohmann::json& j);
};
RunManifest cmd_gen_data(const GenDataArgs& args);

struct TrainBaseArgs {
  std::string corpus_dir;
  std::string mode = "imitator";                  // faceformer | imitator
  std::string out_file;
  std::string model_config_path;                  // empty: derived from the corpus
  nlohmann::json model_config_inline;
  int epochs = 200;
  std::uint64_t weights_seed = 1234;
  std::string manifest_path;                      // empty: <out_file>.manifest.json

  nlohmann::json to_json() const;
  static TrainBaseArgs from_json(const nlohmann::json& j);
};
RunManifest cmd_train_base(const TrainBaseArgs& args);

struct AdaptArgs {
  std::string base_file;
  std::string corpus_dir;
  int subject = -1;
  int sentences = -1;                             // first N pool sentences
  std::vector<int> sentence_ids;                  // explicit list; overrides `sentences`
  std::string strategy = "lora";                  // lora | imitator-style | style-only
  int rank = 4;
  double alpha = 8.0;
  std::string targets = "both";
  int epochs = -1;                                // -1: strategy default
  bool train_style = false;                       // lora only
  std::uint64_t seed = 7;
  std::string out_file;
  std::string manifest_path;

  nlohmann::json to_json() const;
  static AdaptArgs from_json(const nlohmann::json& j);
};
RunManifest cmd_adapt(const AdaptArgs& args);

struct InferArgs {
  std::string model_file;
  std::string adaptor_file;                       // optional
  bool ignore_base_hash = false;
  std::string input_file;                         // sentence container
  std::string chunk_k;                            // empty: full-context inference
  std::string chunk_p;                            // empty: 5 frames when chunking
  int style = 0;                                  // style row when no adaptor is given
  int threads = 1;
  std::string out_file;
  std::string manifest_path;

  nlohmann::json to_json() const;
  static InferArgs from_json(const nlohmann::json& j);
};
RunManifest cmd_infer(const InferArgs& args);

struct EvalArgs {
  std::string pred_file;
  std::string gt_file;                            // sentence or prediction container
  std::string lips = "default";                   // first 24 vertices, or comma ids
  std::string out_file;                           // optional metrics JSON file
  std::string manifest_path;                      // empty: <pred_file>.eval.manifest.json

  nlohmann::json to_json() const;
  static EvalArgs from_json(const nlohmann::json& j);
};
// manifest.outputs["metrics"] carries the triple.
RunManifest cmd_eval(const EvalArgs& args);

struct BenchChunkArgs {
  std::string model_file;
  std::string corpus_dir;
  std::string chunk_sizes = "5,10,25,50,100,200";  // frames or "2s" entries
  std::string paddings = "0,2,5,10";
  int threads = 1;
  int boundary_frames = 5;
  std::string out_csv;
  std::string manifest_path;

  nlohmann::json to_json() const;
  static BenchChunkArgs from_json(const nlohmann::json& j);
};
RunManifest cmd_bench_chunking(const BenchChunkArgs& args);

struct SweepRankArgs {
  std::string base_file;
  std::string corpus_dir;
  std::string ranks = "1,2,4,8,16,32";
  int trials = 30;
  double alpha = 0.0;                             // 0: alpha tracks rank (2*rank)
  std::string targets = "motion_decoder";
  int epochs = 50;
  std::uint64_t seed = 2025;
  std::string out_csv;
  std::string manifest_path;

  nlohmann::json to_json() const;
  static SweepRankArgs from_json(const nlohmann::json& j);
};
RunManifest cmd_sweep_rank(const SweepRankArgs& args);

struct ReplayArgs {
  std::string manifest_path;   // manifest of the run to repeat
  std::string out;             // overrides the recorded primary output path
  std::string manifest_out;    // empty: derived from `out`
};
RunManifest cmd_replay(const ReplayArgs& args);

}  // namespace speechanim
