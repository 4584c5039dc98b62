#pragma once

// Losses, base-model training, person-specific adaptation, and the two
// experiment sweeps (adaptor rank, chunk geometry).
//
// Base training fits the model jointly over all training subjects, one
// optimizer step per sentence in a fixed order, with each subject selecting a
// row of the style table.  Adaptation fits a NEW subject from a few of its
// sentences under one of three strategies:
//   kLora          - low-rank adaptors on the configured targets; the style
//                    code starts from the best-matching base style and stays
//                    frozen unless train_style is set.  50 epochs by default.
//   kImitatorStyle - fine-tunes the final motion-decoder layer plus the style
//                    code, everything else frozen.  300 epochs by default.
//   kStyleOnly     - only the d_model-wide style code trains.  300 epochs.
// Every strategy's complement is bitwise frozen, results carry the held-out
// metrics, wall-clock adaptation time (training loop only), and trainable
// parameter count.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "speechanim/data.hpp"
#include "speechanim/lora.hpp"
#include "speechanim/model.hpp"

namespace speechanim {

// --- loss --------------------------------------------------------------------

struct LossConfig {
  double lambda_rec = 1.0;  // squared vertex-offset error
  double lambda_vel = 10.0; // squared error of consecutive-frame differences

  void validate() const;  // both weights >= 0

  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

// lambda_rec * mean((pred - target)^2) + lambda_vel * mean((dpred - dtarget)^2)
// where d is the first-order frame difference; a single frame has no velocity
// term.  Means run over all entries of the respective matrices.
double sequence_loss(const Matrix& pred, const Matrix& target, const LossConfig& cfg);

// Same value; also accumulates dL/dpred into d_pred (resized and zeroed here).
double sequence_loss_backward(const Matrix& pred, const Matrix& target, const LossConfig& cfg,
                              Matrix& d_pred);

// --- optimizer ---------------------------------------------------------------

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled; applied only where decay is flagged

  void validate() const;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

// One tensor in an optimizer step.  The name keys the optimizer state, so a
// given AdamW instance must see a consistent name -> shape mapping.
struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
  const Matrix* grad = nullptr;
  bool decay = false;
};

// Decay policy shared by every training loop: linear-layer weights ("*.w")
// and low-rank adaptor factors decay; biases, norms, styles and tokens do not.
bool weight_decay_applies(const std::string& name);

class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {});

  // theta -= lr * (mhat / (sqrt(vhat) + eps) + wd * theta), with first/second
  // moment estimates and bias correction shared across all params of the step.
  void step(const std::vector<ParamRef>& params);

  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Matrix m, v;
  };
  OptimizerConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> state_;
};

// --- base training -----------------------------------------------------------

struct TrainBaseOptions {
  int epochs = 200;
  OptimizerConfig optimizer;
  LossConfig loss;
};

struct TrainLog {
  std::vector<double> epoch_losses;  // mean per-sentence loss
  double seconds = 0.0;              // wall clock around the training loop only
  std::int64_t steps = 0;

  nlohmann::json to_json() const;
  std::string to_csv() const;  // epoch,loss
};

// Trains `weights` in place over the training split (each subject's sentence
// pool, held-out sentences untouched).  Subject s uses style-table row s (by
// split position).  Throws ConfigError when model and corpus shapes disagree
// or n_styles differs from the number of training subjects; NumericError on a
// non-finite loss, naming epoch and sentence.
TrainLog train_base(ModelWeights& weights, const Corpus& corpus, const TrainBaseOptions& opts);

// --- style selection ---------------------------------------------------------

struct StyleChoice {
  int index = 0;           // winning style-table row
  MetricTriple metrics;    // winner's held-out metrics
  std::vector<double> lip_l2;  // per-style selection criterion

  nlohmann::json to_json() const;
};

// Runs inference on the subject's held-out sentences under every base style
// and returns the argmin by lip L2 (tie -> lowest index).
StyleChoice best_base_style(const ModelWeights& base, const Corpus& corpus, int subject_id);

// --- adaptation --------------------------------------------------------------

enum class AdaptStrategy { kLora, kImitatorStyle, kStyleOnly };

const char* adapt_strategy_name(AdaptStrategy s);
AdaptStrategy adapt_strategy_from_string(const std::string& s);

struct AdaptOptions {
  AdaptStrategy strategy = AdaptStrategy::kLora;
  LoraConfig lora;           // kLora only
  int epochs = -1;           // -1: strategy default (kLora 50, others 300)
  bool train_style = false;  // kLora only; other strategies always train it
  std::uint64_t seed = 7;    // adaptor initialization
  OptimizerConfig optimizer;
  LossConfig loss;

  int resolved_epochs() const;
};

struct AdaptResult {
  AdaptStrategy strategy = AdaptStrategy::kLora;
  int subject = -1;
  int n_sentences = 0;
  int epochs = 0;
  MetricTriple held_out;  // on the subject's held-out sentences
  double seconds = 0.0;   // training loop only
  std::int64_t trainable_params = 0;
  int style_source = -1;      // style-table row the code was initialized from
  bool style_trained = false;
  RowVector style;            // the style code the adapted model uses
  LoraSet lora;               // kLora: trained adaptors
  std::map<std::string, Matrix> updated;  // kImitatorStyle: fine-tuned tensors
  std::vector<double> epoch_losses;

  nlohmann::json to_json() const;
};

// Adapts the frozen base to one subject using the listed sentence ids from its
// adaptation pool (held-out sentences are never trained on).  Steps follow the
// given id order within each epoch.  Throws ConfigError on an empty or
// out-of-range sentence list.
AdaptResult adapt(const ModelWeights& base, const Corpus& corpus, int subject_id,
                  const std::vector<int>& sentence_ids, const AdaptOptions& opts);

// Table row schema: strategy,n_sentences,l2_face,l2_lip,lip_max,seconds,trainable_params
std::string adapt_results_csv(const std::vector<AdaptResult>& rows);

// The inference-time pieces an adaptation resolves to: base weights with any
// fine-tuned tensors applied, the style code, and the LoRA set (if trained).
struct AdaptedInference {
  ModelWeights weights;
  RowVector style;
  LoraSet lora;
  bool has_lora = false;

  const LoraSet* lora_or_null() const { return has_lora ? &lora : nullptr; }
};
AdaptedInference adapted_inference(const ModelWeights& base, const AdaptResult& result);

// Predicted offsets for the adapted model on raw features (dispatches on the
// strategy the result came from).
Matrix adapted_infer(const ModelWeights& base, const AdaptResult& result, const Matrix& features);

// --- rank sweep --------------------------------------------------------------

struct RankSweepOptions {
  std::vector<int> ranks = {1, 2, 4, 8, 16, 32};
  int trials = 30;
  // 0: alpha tracks rank as 2*rank, holding the update scale alpha/rank at
  // the default-config ratio so the sweep varies capacity, not step size.
  // A positive value fixes alpha across every rank.
  double alpha = 0.0;
  // Motion-decoder adaptors measure best here: attention-layer adaptors test
  // worse at every rank on the synthetic corpus (see the rank-sweep bench).
  LoraTarget targets = LoraTarget::kMotionDecoder;
  int epochs = 50;
  std::uint64_t seed = 2025;
  OptimizerConfig optimizer;
  LossConfig loss;
};

struct RankTrial {
  int trial = 0;
  int subject = 0;
  std::vector<int> sentence_ids;
  std::vector<double> lip_l2;  // parallel to ranks
};

struct RankSweepResult {
  std::vector<int> ranks;
  std::vector<RankTrial> trials;
  std::vector<double> mean_lip_l2;  // parallel to ranks

  nlohmann::json to_json() const;
  std::string to_csv() const;  // rank,mean_lip_l2
};

// Per trial: pick a random test subject and a random subset of its adaptation
// pool (size uniform in [1, min(30, pool)]), then adapt at every rank on that
// SAME subset and record held-out lip L2.  Deterministic in the seed.
RankSweepResult sweep_rank(const ModelWeights& base, const Corpus& corpus,
                           const RankSweepOptions& opts);

// --- chunk sweep -------------------------------------------------------------

struct ChunkSweepOptions {
  std::vector<int> chunk_sizes = {5, 10, 25, 50, 100, 200};
  std::vector<int> paddings = {0, 2, 5, 10};
  int n_threads = 1;
  int boundary_frames = 5;  // leading keep frames scored against full inference
};

struct ChunkSweepRow {
  int chunk_size = 0;
  int padding = 0;
  MetricTriple masked;  // chunked prediction vs ground truth, silence masked
  double seconds = 0.0;
  std::uint64_t ops_full = 0;     // per layer per head, summed over sentences
  std::uint64_t ops_chunked = 0;
  double boundary_discrepancy = 0.0;     // vs full inference, leading keep frames
  std::vector<double> boundary_trace;    // per keep-frame offset, lip vertices
};

struct ChunkSweepResult {
  MetricTriple unchunked;  // full-inference baseline on the same sentences
  double unchunked_seconds = 0.0;
  std::vector<ChunkSweepRow> rows;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Concatenates each test subject's held-out sentences into one long sequence
// (1 s silence gaps), picks that subject's best base style, then measures every
// (chunk size, padding) pair: masked metrics against ground truth, wall time,
// exact attention-op counts, and the discrepancy against unchunked inference
// over each chunk's leading keep frames.
ChunkSweepResult sweep_chunking(const ModelWeights& base, const Corpus& corpus,
                                const ChunkSweepOptions& opts);

}  // namespace speechanim
