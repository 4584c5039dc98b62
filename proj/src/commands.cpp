#include "speechanim/commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>
#include <vector>

#include "speechanim/chunking.hpp"
#include "speechanim/container.hpp"
#include "speechanim/data.hpp"
#include "speechanim/model.hpp"
#include "speechanim/rng.hpp"
#include "speechanim/training.hpp"

namespace speechanim {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << content;
  if (!f) throw IoError("short write to '" + path + "'");
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  try {
    nlohmann::json j;
    f >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": malformed JSON: " + e.what());
  }
}

// Strict config parsing; a missing or mistyped field is reported by name.
CorpusConfig corpus_config_from(const nlohmann::json& j, const std::string& context) {
  try {
    return CorpusConfig::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(context + ": " + e.what());
  }
}

ModelConfig model_config_from(const nlohmann::json& j, const std::string& context) {
  try {
    return ModelConfig::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(context + ": " + e.what());
  }
}

nlohmann::json output_entry(const std::string& path) {
  return {{"path", path}, {"hash", file_content_hash(path)}};
}

std::string corpus_json_path(const std::string& dir) { return dir + "/corpus.json"; }

std::string default_manifest_for(const std::string& out_file) {
  return out_file + ".manifest.json";
}

// Fields shared by every argument struct's JSON form.
void get_if_present(const nlohmann::json& j, const char* key, std::string& into) {
  if (j.contains(key)) into = j.at(key).get<std::string>();
}

}  // namespace

// --- manifest ----------------------------------------------------------------

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},     {"tool_version", tool_version}, {"config", config},
          {"input_hashes", input_hashes}, {"outputs", outputs},    {"timings", timings}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config = j.at("config");
    m.input_hashes = j.at("input_hashes");
    m.outputs = j.at("outputs");
    m.timings = j.at("timings");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("run manifest: ") + e.what());
  }
  return m;
}

void RunManifest::save(const std::string& path) const {
  write_text_file(path, to_json().dump(2) + "\n");
}

RunManifest RunManifest::load(const std::string& path) {
  try {
    return from_json(read_json_file(path));
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

// --- shared parsing ----------------------------------------------------------

Index parse_frames_or_seconds(const std::string& text, int fps, const std::string& flag) {
  if (text.empty()) throw ConfigError(flag + ": empty value");
  try {
    std::size_t used = 0;
    if (text.back() == 's') {
      const double seconds = std::stod(text.substr(0, text.size() - 1), &used);
      if (used != text.size() - 1) throw ConfigError("");
      const double frames = seconds * fps;
      if (frames < 0.0) throw ConfigError("");
      return static_cast<Index>(std::llround(frames));
    }
    const long long frames = std::stoll(text, &used);
    if (used != text.size() || frames < 0) throw ConfigError("");
    return static_cast<Index>(frames);
  } catch (const std::exception&) {
    throw ConfigError(flag + ": '" + text +
                      "' is neither a frame count nor a seconds value like '2s'");
  }
}

std::vector<Index> parse_frames_list(const std::string& text, int fps, const std::string& flag) {
  std::vector<Index> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_frames_or_seconds(item, fps, flag));
  if (out.empty()) throw ConfigError(flag + ": empty list");
  return out;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw ConfigError("");
    } catch (const std::exception&) {
      throw ConfigError(flag + ": '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError(flag + ": empty list");
  return out;
}

std::string dir_tree_hash(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, std::string>> files;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file()) {
      files.emplace_back(entry.path().filename().string(),
                         file_content_hash(entry.path().string()));
    }
  }
  if (ec) throw IoError("cannot list '" + dir + "': " + ec.message());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& [name, hash] : files) {
    acc += name;
    acc += '\0';
    acc += hash;
    acc += '\n';
  }
  return bytes_hash_hex(reinterpret_cast<const std::uint8_t*>(acc.data()), acc.size());
}

// --- gen-data ----------------------------------------------------------------

nlohmann::json GenDataArgs::to_json() const {
  return {{"config_path", config_path},
          {"config_inline", config_inline},
          {"out_dir", out_dir},
          {"seed", seed},
          {"manifest_path", manifest_path}};
}

GenDataArgs GenDataArgs::from_json(const nlohmann::json& j) {
  GenDataArgs a;
  get_if_present(j, "config_path", a.config_path);
  if (j.contains("config_inline")) a.config_inline = j.at("config_inline");
  a.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("seed")) a.seed = j.at("seed").get<std::int64_t>();
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

RunManifest cmd_gen_data(const GenDataArgs& args) {
  if (args.out_dir.empty()) throw ConfigError("gen-data: --out is required");
  std::string dir = args.out_dir;
  while (dir.size() > 1 && dir.back() == '/') dir.pop_back();

  RunManifest m;
  m.command = "gen-data";

  CorpusConfig config;  // defaults
  if (!args.config_inline.is_null()) {
    config = corpus_config_from(args.config_inline, "gen-data config");
  } else if (!args.config_path.empty()) {
    config = corpus_config_from(read_json_file(args.config_path), args.config_path);
    m.input_hashes[args.config_path] = file_content_hash(args.config_path);
  }
  if (args.seed >= 0) config.seed = static_cast<std::uint64_t>(args.seed);

  GenDataArgs canonical = args;
  canonical.out_dir = dir;
  canonical.config_path.clear();
  canonical.config_inline = config.to_json();
  canonical.seed = -1;  // folded into the config
  // The manifest defaults to a sibling of the directory, keeping the tree
  // itself a pure function of the config (identical across re-runs).
  canonical.manifest_path =
      args.manifest_path.empty() ? dir + ".manifest.json" : args.manifest_path;
  m.config = canonical.to_json();

  const double t0 = now_seconds();
  const Corpus corpus = generate_corpus(config);
  const double t1 = now_seconds();
  save_corpus(corpus, dir);
  const double t2 = now_seconds();

  m.timings["generate_seconds"] = t1 - t0;
  m.timings["write_seconds"] = t2 - t1;
  m.outputs["corpus_dir"] = {{"path", dir},
                             {"tree_hash", dir_tree_hash(dir)},
                             {"corpus_json_hash", file_content_hash(corpus_json_path(dir))}};
  m.outputs["n_subjects"] = config.n_subjects;
  m.outputs["sentences_per_subject"] = config.sentences_per_subject;
  m.save(canonical.manifest_path);
  return m;
}

// --- train-base --------------------------------------------------------------

nlohmann::json TrainBaseArgs::to_json() const {
  return {{"corpus_dir", corpus_dir},
          {"mode", mode},
          {"out_file", out_file},
          {"model_config_path", model_config_path},
          {"model_config_inline", model_config_inline},
          {"epochs", epochs},
          {"weights_seed", weights_seed},
          {"manifest_path", manifest_path}};
}

TrainBaseArgs TrainBaseArgs::from_json(const nlohmann::json& j) {
  TrainBaseArgs a;
  a.corpus_dir = j.at("corpus_dir").get<std::string>();
  get_if_present(j, "mode", a.mode);
  a.out_file = j.at("out_file").get<std::string>();
  get_if_present(j, "model_config_path", a.model_config_path);
  if (j.contains("model_config_inline")) a.model_config_inline = j.at("model_config_inline");
  if (j.contains("epochs")) a.epochs = j.at("epochs").get<int>();
  if (j.contains("weights_seed")) a.weights_seed = j.at("weights_seed").get<std::uint64_t>();
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

RunManifest cmd_train_base(const TrainBaseArgs& args) {
  if (args.corpus_dir.empty()) throw ConfigError("train-base: --corpus is required");
  if (args.out_file.empty()) throw ConfigError("train-base: --out is required");
  if (args.epochs < 0) throw ConfigError("train-base: epochs must be >= 0");

  RunManifest m;
  m.command = "train-base";
  m.input_hashes[corpus_json_path(args.corpus_dir)] =
      file_content_hash(corpus_json_path(args.corpus_dir));

  const Corpus corpus = load_corpus(args.corpus_dir);
  const CorpusConfig& cc = corpus.config;

  ModelConfig mc;
  if (!args.model_config_inline.is_null()) {
    mc = model_config_from(args.model_config_inline, "train-base model config");
  } else if (!args.model_config_path.empty()) {
    mc = model_config_from(read_json_file(args.model_config_path), args.model_config_path);
    m.input_hashes[args.model_config_path] = file_content_hash(args.model_config_path);
  } else {
    // Derive the model from the corpus: shared timeline and widths, one style
    // per training subject, lip set clamped to the mesh.
    mc.d_audio = cc.d_audio;
    mc.n_vertices = cc.n_vertices;
    mc.fps = cc.fps;
    mc.feature_rate = cc.feature_rate;
    mc.n_styles = cc.n_train;
    mc.style_mode = style_mode_from_string(args.mode);
    mc.lip_vertex_ids.resize(std::min(24, cc.n_vertices));
    for (std::size_t i = 0; i < mc.lip_vertex_ids.size(); ++i) {
      mc.lip_vertex_ids[i] = static_cast<int>(i);
    }
    mc.validate();
  }

  TrainBaseArgs canonical = args;
  canonical.model_config_path.clear();
  canonical.model_config_inline = mc.to_json();
  canonical.mode = style_mode_name(mc.style_mode);  // an explicit config wins
  canonical.manifest_path =
      args.manifest_path.empty() ? default_manifest_for(args.out_file) : args.manifest_path;
  m.config = canonical.to_json();

  ModelWeights weights = ModelWeights::init(mc, args.weights_seed);
  TrainBaseOptions opts;
  opts.epochs = args.epochs;
  const double t0 = now_seconds();
  const TrainLog log = train_base(weights, corpus, opts);
  save_model(weights, args.out_file);
  const std::string loss_csv = args.out_file + ".loss.csv";
  write_text_file(loss_csv, log.to_csv());
  const double t1 = now_seconds();

  m.timings["train_seconds"] = log.seconds;
  m.timings["total_seconds"] = t1 - t0;
  m.outputs["model"] = output_entry(args.out_file);
  m.outputs["loss_csv"] = output_entry(loss_csv);
  m.outputs["train_log"] = {{"steps", log.steps},
                            {"final_loss", log.epoch_losses.empty() ? 0.0 : log.epoch_losses.back()},
                            {"parameters", weights.parameter_count()}};
  m.save(canonical.manifest_path);
  return m;
}

// --- adapt -------------------------------------------------------------------

nlohmann::json AdaptArgs::to_json() const {
  return {{"base_file", base_file},
          {"corpus_dir", corpus_dir},
          {"subject", subject},
          {"sentences", sentences},
          {"sentence_ids", sentence_ids},
          {"strategy", strategy},
          {"rank", rank},
          {"alpha", alpha},
          {"targets", targets},
          {"epochs", epochs},
          {"train_style", train_style},
          {"seed", seed},
          {"out_file", out_file},
          {"manifest_path", manifest_path}};
}

AdaptArgs AdaptArgs::from_json(const nlohmann::json& j) {
  AdaptArgs a;
  a.base_file = j.at("base_file").get<std::string>();
  a.corpus_dir = j.at("corpus_dir").get<std::string>();
  a.subject = j.at("subject").get<int>();
  if (j.contains("sentences")) a.sentences = j.at("sentences").get<int>();
  if (j.contains("sentence_ids")) a.sentence_ids = j.at("sentence_ids").get<std::vector<int>>();
  get_if_present(j, "strategy", a.strategy);
  if (j.contains("rank")) a.rank = j.at("rank").get<int>();
  if (j.contains("alpha")) a.alpha = j.at("alpha").get<double>();
  get_if_present(j, "targets", a.targets);
  if (j.contains("epochs")) a.epochs = j.at("epochs").get<int>();
  if (j.contains("train_style")) a.train_style = j.at("train_style").get<bool>();
  if (j.contains("seed")) a.seed = j.at("seed").get<std::uint64_t>();
  a.out_file = j.at("out_file").get<std::string>();
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

RunManifest cmd_adapt(const AdaptArgs& args) {
  if (args.base_file.empty()) throw ConfigError("adapt: --base is required");
  if (args.corpus_dir.empty()) throw ConfigError("adapt: --corpus is required");
  if (args.out_file.empty()) throw ConfigError("adapt: --out is required");

  std::vector<int> ids = args.sentence_ids;
  if (ids.empty()) {
    if (args.sentences <= 0) {
      throw ConfigError("adapt: --sentences must be positive (or pass --sentence-ids)");
    }
    ids.resize(static_cast<std::size_t>(args.sentences));
    for (int i = 0; i < args.sentences; ++i) ids[static_cast<std::size_t>(i)] = i;
  }

  AdaptOptions opts;
  opts.strategy = adapt_strategy_from_string(args.strategy);
  opts.lora.rank = args.rank;
  opts.lora.alpha = args.alpha;
  opts.lora.targets = lora_target_from_string(args.targets);
  opts.epochs = args.epochs;
  opts.train_style = args.train_style;
  opts.seed = args.seed;

  RunManifest m;
  m.command = "adapt";
  const std::string base_hash = file_content_hash(args.base_file);
  m.input_hashes[args.base_file] = base_hash;
  m.input_hashes[corpus_json_path(args.corpus_dir)] =
      file_content_hash(corpus_json_path(args.corpus_dir));

  AdaptArgs canonical = args;
  canonical.sentence_ids = ids;
  canonical.sentences = static_cast<int>(ids.size());
  canonical.manifest_path =
      args.manifest_path.empty() ? default_manifest_for(args.out_file) : args.manifest_path;
  m.config = canonical.to_json();

  const ModelWeights base = load_model(args.base_file);
  const Corpus corpus = load_corpus(args.corpus_dir);
  const double t0 = now_seconds();
  const AdaptResult result = adapt(base, corpus, args.subject, ids, opts);
  const double t1 = now_seconds();

  save_adapt_result(result, base_hash, args.out_file);
  const std::string result_json = args.out_file + ".json";
  write_text_file(result_json, result.to_json().dump(2) + "\n");

  m.timings["adapt_seconds"] = result.seconds;  // training loop only
  m.timings["total_seconds"] = t1 - t0;
  m.outputs["adaptor"] = output_entry(args.out_file);
  m.outputs["result_json"] = output_entry(result_json);
  m.outputs["metrics"] = result.held_out.to_json();
  m.outputs["trainable_params"] = result.trainable_params;
  m.save(canonical.manifest_path);
  return m;
}

// --- infer -------------------------------------------------------------------

nlohmann::json InferArgs::to_json() const {
  return {{"model_file", model_file},
          {"adaptor_file", adaptor_file},
          {"ignore_base_hash", ignore_base_hash},
          {"input_file", input_file},
          {"chunk_k", chunk_k},
          {"chunk_p", chunk_p},
          {"style", style},
          {"threads", threads},
          {"out_file", out_file},
          {"manifest_path", manifest_path}};
}

InferArgs InferArgs::from_json(const nlohmann::json& j) {
  InferArgs a;
  a.model_file = j.at("model_file").get<std::string>();
  get_if_present(j, "adaptor_file", a.adaptor_file);
  if (j.contains("ignore_base_hash")) a.ignore_base_hash = j.at("ignore_base_hash").get<bool>();
  a.input_file = j.at("input_file").get<std::string>();
  get_if_present(j, "chunk_k", a.chunk_k);
  get_if_present(j, "chunk_p", a.chunk_p);
  if (j.contains("style")) a.style = j.at("style").get<int>();
  if (j.contains("threads")) a.threads = j.at("threads").get<int>();
  a.out_file = j.at("out_file").get<std::string>();
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

RunManifest cmd_infer(const InferArgs& args) {
  if (args.model_file.empty()) throw ConfigError("infer: --model is required");
  if (args.input_file.empty()) throw ConfigError("infer: --input is required");
  if (args.out_file.empty()) throw ConfigError("infer: --out is required");
  if (args.threads < 1) throw ConfigError("infer: --threads must be >= 1");

  RunManifest m;
  m.command = "infer";
  m.input_hashes[args.model_file] = file_content_hash(args.model_file);
  m.input_hashes[args.input_file] = file_content_hash(args.input_file);

  const ModelWeights model = load_model(args.model_file);

  const bool chunked = !args.chunk_k.empty();
  Index K = 0, P = 0;
  if (chunked) {
    K = parse_frames_or_seconds(args.chunk_k, model.config.fps, "--chunk-K");
    P = args.chunk_p.empty()
            ? 5
            : parse_frames_or_seconds(args.chunk_p, model.config.fps, "--chunk-P");
    if (K < 1) throw ConfigError("infer: chunk size must be >= 1 frame");
  } else if (!args.chunk_p.empty()) {
    throw ConfigError("infer: --chunk-P without --chunk-K");
  }

  InferArgs canonical = args;
  canonical.chunk_k = chunked ? std::to_string(K) : "";
  canonical.chunk_p = chunked ? std::to_string(P) : "";
  canonical.manifest_path =
      args.manifest_path.empty() ? default_manifest_for(args.out_file) : args.manifest_path;
  m.config = canonical.to_json();

  // Style and any trained pieces.
  AdaptedInference ai;
  if (!args.adaptor_file.empty()) {
    m.input_hashes[args.adaptor_file] = file_content_hash(args.adaptor_file);
    const AdaptResult r = load_adapt_result(args.adaptor_file,
                                            m.input_hashes[args.model_file].get<std::string>(),
                                            args.ignore_base_hash);
    ai = adapted_inference(model, r);
  } else {
    if (args.style < 0 || args.style >= model.config.n_styles) {
      throw ConfigError("infer: style " + std::to_string(args.style) + " out of range [0, " +
                        std::to_string(model.config.n_styles) + ")");
    }
    ai.weights = model;
    ai.style = model.at("style_table").row(args.style);
  }

  const Sentence input = load_sentence(args.input_file);
  const double t0 = now_seconds();
  const Matrix offsets =
      chunked ? chunked_infer_offsets(ai.weights, input.audio, ai.style, K, P, ai.lora_or_null(),
                                      args.threads)
              : infer_offsets(ai.weights, input.audio, ai.style, ai.lora_or_null());
  const double t1 = now_seconds();

  Matrix vertices = offsets;
  vertices.rowwise() += input.neutral;
  save_prediction(vertices, input.silence_mask, input.neutral, args.out_file);

  m.timings["infer_seconds"] = t1 - t0;
  m.outputs["prediction"] = output_entry(args.out_file);
  m.outputs["frames"] = vertices.rows();
  m.save(canonical.manifest_path);
  return m;
}

// --- eval --------------------------------------------------------------------

nlohmann::json EvalArgs::to_json() const {
  return {{"pred_file", pred_file},
          {"gt_file", gt_file},
          {"lips", lips},
          {"out_file", out_file},
          {"manifest_path", manifest_path}};
}

EvalArgs EvalArgs::from_json(const nlohmann::json& j) {
  EvalArgs a;
  a.pred_file = j.at("pred_file").get<std::string>();
  a.gt_file = j.at("gt_file").get<std::string>();
  get_if_present(j, "lips", a.lips);
  get_if_present(j, "out_file", a.out_file);
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

namespace {

// Either a sentence or a prediction container yields a trajectory to score.
struct Trajectory {
  Matrix vertices;
  std::vector<std::uint8_t> mask;
};

Trajectory load_trajectory(const std::string& path) {
  const WeightContainer c = WeightContainer::load(path);
  const std::string kind = c.meta.value("kind", "");
  if (kind != "sentence" && kind != "prediction") {
    throw IoError(path + ": kind '" + kind + "' is not a trajectory (sentence or prediction)");
  }
  Trajectory t;
  try {
    t.vertices = c.tensors.at("vertices");
    const Matrix& mask = c.tensors.at("mask");
    if (mask.rows() != 1 || mask.cols() != t.vertices.rows()) {
      throw IoError(path + ": mask shape " + shape_str(mask) + " does not cover " +
                    std::to_string(t.vertices.rows()) + " frames");
    }
    t.mask.resize(static_cast<std::size_t>(mask.cols()));
    for (Index i = 0; i < mask.cols(); ++i) {
      t.mask[static_cast<std::size_t>(i)] = mask(0, i) != 0.0 ? 1 : 0;
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(path + ": bad trajectory container: " + e.what());
  }
  return t;
}

}  // namespace

RunManifest cmd_eval(const EvalArgs& args) {
  if (args.pred_file.empty()) throw ConfigError("eval: --pred is required");
  if (args.gt_file.empty()) throw ConfigError("eval: --gt is required");

  RunManifest m;
  m.command = "eval";
  m.input_hashes[args.pred_file] = file_content_hash(args.pred_file);
  m.input_hashes[args.gt_file] = file_content_hash(args.gt_file);

  const Trajectory pred = load_trajectory(args.pred_file);
  const Trajectory gt = load_trajectory(args.gt_file);

  if (pred.vertices.cols() % 3 != 0) {
    throw ShapeError("eval: prediction width " + std::to_string(pred.vertices.cols()) +
                     " is not a multiple of 3");
  }
  const int n_vertices = static_cast<int>(pred.vertices.cols() / 3);
  std::vector<int> lip_ids;
  if (args.lips == "default") {
    lip_ids.resize(static_cast<std::size_t>(std::min(24, n_vertices)));
    for (std::size_t i = 0; i < lip_ids.size(); ++i) lip_ids[i] = static_cast<int>(i);
  } else {
    lip_ids = parse_int_list(args.lips, "--lips");
  }

  EvalArgs canonical = args;
  {
    std::ostringstream os;
    for (std::size_t i = 0; i < lip_ids.size(); ++i) os << (i ? "," : "") << lip_ids[i];
    canonical.lips = os.str();
  }
  canonical.manifest_path = args.manifest_path.empty() ? args.pred_file + ".eval.manifest.json"
                                                       : args.manifest_path;
  m.config = canonical.to_json();

  // Scored on the ground truth's silence mask.
  const MetricTriple metrics = eval_metrics(pred.vertices, gt.vertices, gt.mask, lip_ids);
  m.outputs["metrics"] = metrics.to_json();
  if (!args.out_file.empty()) {
    write_text_file(args.out_file, metrics.to_json().dump(2) + "\n");
    m.outputs["metrics_json"] = output_entry(args.out_file);
  }
  m.save(canonical.manifest_path);
  return m;
}

// --- bench-chunking ----------------------------------------------------------

nlohmann::json BenchChunkArgs::to_json() const {
  return {{"model_file", model_file},
          {"corpus_dir", corpus_dir},
          {"chunk_sizes", chunk_sizes},
          {"paddings", paddings},
          {"threads", threads},
          {"boundary_frames", boundary_frames},
          {"out_csv", out_csv},
          {"manifest_path", manifest_path}};
}

BenchChunkArgs BenchChunkArgs::from_json(const nlohmann::json& j) {
  BenchChunkArgs a;
  a.model_file = j.at("model_file").get<std::string>();
  a.corpus_dir = j.at("corpus_dir").get<std::string>();
  get_if_present(j, "chunk_sizes", a.chunk_sizes);
  get_if_present(j, "paddings", a.paddings);
  if (j.contains("threads")) a.threads = j.at("threads").get<int>();
  if (j.contains("boundary_frames")) a.boundary_frames = j.at("boundary_frames").get<int>();
  a.out_csv = j.at("out_csv").get<std::string>();
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

RunManifest cmd_bench_chunking(const BenchChunkArgs& args) {
  if (args.model_file.empty()) throw ConfigError("bench-chunking: --model is required");
  if (args.corpus_dir.empty()) throw ConfigError("bench-chunking: --corpus is required");
  if (args.out_csv.empty()) throw ConfigError("bench-chunking: --out is required");

  RunManifest m;
  m.command = "bench-chunking";
  m.input_hashes[args.model_file] = file_content_hash(args.model_file);
  m.input_hashes[corpus_json_path(args.corpus_dir)] =
      file_content_hash(corpus_json_path(args.corpus_dir));

  const ModelWeights model = load_model(args.model_file);

  ChunkSweepOptions opts;
  opts.chunk_sizes.clear();
  for (Index k : parse_frames_list(args.chunk_sizes, model.config.fps, "--K")) {
    opts.chunk_sizes.push_back(static_cast<int>(k));
  }
  opts.paddings.clear();
  for (Index p : parse_frames_list(args.paddings, model.config.fps, "--P")) {
    opts.paddings.push_back(static_cast<int>(p));
  }
  opts.n_threads = args.threads;
  opts.boundary_frames = args.boundary_frames;

  auto join = [](const std::vector<int>& xs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
    return os.str();
  };
  BenchChunkArgs canonical = args;
  canonical.chunk_sizes = join(opts.chunk_sizes);
  canonical.paddings = join(opts.paddings);
  canonical.manifest_path =
      args.manifest_path.empty() ? default_manifest_for(args.out_csv) : args.manifest_path;
  m.config = canonical.to_json();

  const Corpus corpus = load_corpus(args.corpus_dir);
  const double t0 = now_seconds();
  const ChunkSweepResult result = sweep_chunking(model, corpus, opts);
  const double t1 = now_seconds();

  write_text_file(args.out_csv, result.to_csv());
  const std::string json_path = args.out_csv + ".json";
  write_text_file(json_path, result.to_json().dump(2) + "\n");

  m.timings["sweep_seconds"] = t1 - t0;
  m.outputs["csv"] = output_entry(args.out_csv);
  m.outputs["json"] = output_entry(json_path);
  m.outputs["unchunked"] = result.unchunked.to_json();
  m.save(canonical.manifest_path);
  return m;
}

// --- sweep-rank --------------------------------------------------------------

nlohmann::json SweepRankArgs::to_json() const {
  return {{"base_file", base_file},
          {"corpus_dir", corpus_dir},
          {"ranks", ranks},
          {"trials", trials},
          {"alpha", alpha},
          {"targets", targets},
          {"epochs", epochs},
          {"seed", seed},
          {"out_csv", out_csv},
          {"manifest_path", manifest_path}};
}

SweepRankArgs SweepRankArgs::from_json(const nlohmann::json& j) {
  SweepRankArgs a;
  a.base_file = j.at("base_file").get<std::string>();
  a.corpus_dir = j.at("corpus_dir").get<std::string>();
  get_if_present(j, "ranks", a.ranks);
  if (j.contains("trials")) a.trials = j.at("trials").get<int>();
  if (j.contains("alpha")) a.alpha = j.at("alpha").get<double>();
  get_if_present(j, "targets", a.targets);
  if (j.contains("epochs")) a.epochs = j.at("epochs").get<int>();
  if (j.contains("seed")) a.seed = j.at("seed").get<std::uint64_t>();
  a.out_csv = j.at("out_csv").get<std::string>();
  get_if_present(j, "manifest_path", a.manifest_path);
  return a;
}

RunManifest cmd_sweep_rank(const SweepRankArgs& args) {
  if (args.base_file.empty()) throw ConfigError("sweep-rank: --base is required");
  if (args.corpus_dir.empty()) throw ConfigError("sweep-rank: --corpus is required");
  if (args.out_csv.empty()) throw ConfigError("sweep-rank: --out is required");

  RunManifest m;
  m.command = "sweep-rank";
  m.input_hashes[args.base_file] = file_content_hash(args.base_file);
  m.input_hashes[corpus_json_path(args.corpus_dir)] =
      file_content_hash(corpus_json_path(args.corpus_dir));

  RankSweepOptions opts;
  opts.ranks = parse_int_list(args.ranks, "--ranks");
  opts.trials = args.trials;
  opts.alpha = args.alpha;
  opts.targets = lora_target_from_string(args.targets);
  opts.epochs = args.epochs;
  opts.seed = args.seed;

  auto join = [](const std::vector<int>& xs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
    return os.str();
  };
  SweepRankArgs canonical = args;
  canonical.ranks = join(opts.ranks);
  canonical.manifest_path =
      args.manifest_path.empty() ? default_manifest_for(args.out_csv) : args.manifest_path;
  m.config = canonical.to_json();

  const ModelWeights base = load_model(args.base_file);
  const Corpus corpus = load_corpus(args.corpus_dir);
  const double t0 = now_seconds();
  const RankSweepResult result = sweep_rank(base, corpus, opts);
  const double t1 = now_seconds();

  write_text_file(args.out_csv, result.to_csv());
  const std::string json_path = args.out_csv + ".json";
  write_text_file(json_path, result.to_json().dump(2) + "\n");

  m.timings["sweep_seconds"] = t1 - t0;
  m.outputs["csv"] = output_entry(args.out_csv);
  m.outputs["json"] = output_entry(json_path);
  m.outputs["mean_lip_l2"] = result.mean_lip_l2;
  m.save(canonical.manifest_path);
  return m;
}

// --- replay ------------------------------------------------------------------

RunManifest cmd_replay(const ReplayArgs& args) {
  if (args.manifest_path.empty()) throw ConfigError("replay: --manifest is required");
  const RunManifest recorded = RunManifest::load(args.manifest_path);
  const nlohmann::json& cfg = recorded.config;

  // Outputs are redirected (default: "<original>.replay") so a replay never
  // clobbers the artifacts it is being checked against.
  auto redirect = [&](const std::string& original) {
    return args.out.empty() ? original + ".replay" : args.out;
  };

  if (recorded.command == "gen-data") {
    GenDataArgs a = GenDataArgs::from_json(cfg);
    a.out_dir = redirect(a.out_dir);
    a.manifest_path = args.manifest_out.empty() ? a.out_dir + ".manifest.json" : args.manifest_out;
    return cmd_gen_data(a);
  }
  if (recorded.command == "train-base") {
    TrainBaseArgs a = TrainBaseArgs::from_json(cfg);
    a.out_file = redirect(a.out_file);
    a.manifest_path =
        args.manifest_out.empty() ? default_manifest_for(a.out_file) : args.manifest_out;
    return cmd_train_base(a);
  }
  if (recorded.command == "adapt") {
    AdaptArgs a = AdaptArgs::from_json(cfg);
    a.out_file = redirect(a.out_file);
    a.manifest_path =
        args.manifest_out.empty() ? default_manifest_for(a.out_file) : args.manifest_out;
    return cmd_adapt(a);
  }
  if (recorded.command == "infer") {
    InferArgs a = InferArgs::from_json(cfg);
    a.out_file = redirect(a.out_file);
    a.manifest_path =
        args.manifest_out.empty() ? default_manifest_for(a.out_file) : args.manifest_out;
    return cmd_infer(a);
  }
  if (recorded.command == "eval") {
    EvalArgs a = EvalArgs::from_json(cfg);
    if (!a.out_file.empty() || !args.out.empty()) a.out_file = redirect(a.out_file);
    a.manifest_path = args.manifest_out.empty() ? args.manifest_path + ".replay.json"
                                                : args.manifest_out;
    return cmd_eval(a);
  }
  if (recorded.command == "bench-chunking") {
    BenchChunkArgs a = BenchChunkArgs::from_json(cfg);
    a.out_csv = redirect(a.out_csv);
    a.manifest_path =
        args.manifest_out.empty() ? default_manifest_for(a.out_csv) : args.manifest_out;
    return cmd_bench_chunking(a);
  }
  if (recorded.command == "sweep-rank") {
    SweepRankArgs a = SweepRankArgs::from_json(cfg);
    a.out_csv = redirect(a.out_csv);
    a.manifest_path =
        args.manifest_out.empty() ? default_manifest_for(a.out_csv) : args.manifest_out;
    return cmd_sweep_rank(a);
  }
  throw ConfigError("replay: manifest records unknown command '" + recorded.command + "'");
}

}  // namespace speechanim
