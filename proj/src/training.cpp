#include "speechanim/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "speechanim/chunking.hpp"

namespace speechanim {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Adaptation pool = leading sentences; the trailing held_out_per_subject are
// evaluation-only.
int pool_size(const CorpusConfig& cc) {
  return cc.sentences_per_subject - cc.held_out_per_subject;
}

MetricTriple held_out_metrics(const ModelWeights& w, const Corpus& corpus, const Subject& subj,
                              const RowVector& style, const LoraSet* lora) {
  const CorpusConfig& cc = corpus.config;
  MetricAccumulator acc;
  for (int j = pool_size(cc); j < cc.sentences_per_subject; ++j) {
    const Sentence& sent = subj.sentences[static_cast<std::size_t>(j)];
    const Matrix pred = infer_offsets(w, sent.audio, style, lora);
    acc.add(pred, sent.offsets(), sent.silence_mask, w.config.lip_vertex_ids);
  }
  return acc.mean();
}

void check_model_matches_corpus(const ModelConfig& mc, const CorpusConfig& cc, const char* op) {
  if (mc.d_audio != cc.d_audio) {
    throw ConfigError(std::string(op) + ": model d_audio " + std::to_string(mc.d_audio) +
                      " != corpus d_audio " + std::to_string(cc.d_audio));
  }
  if (mc.n_vertices != cc.n_vertices) {
    throw ConfigError(std::string(op) + ": model n_vertices " + std::to_string(mc.n_vertices) +
                      " != corpus n_vertices " + std::to_string(cc.n_vertices));
  }
  if (mc.fps != cc.fps || mc.feature_rate != cc.feature_rate) {
    throw ConfigError(std::string(op) + ": model timeline (fps " + std::to_string(mc.fps) +
                      ", feature_rate " + std::to_string(mc.feature_rate) +
                      ") != corpus timeline (fps " + std::to_string(cc.fps) + ", feature_rate " +
                      std::to_string(cc.feature_rate) + ")");
  }
}

double mean_vertex_distance(const RowVector& a, const RowVector& b, const std::vector<int>& ids) {
  double sum = 0.0;
  for (int v : ids) sum += (a.segment(3 * v, 3) - b.segment(3 * v, 3)).norm();
  return sum / static_cast<double>(ids.size());
}

std::ostringstream csv_stream() {
  std::ostringstream os;
  os << std::setprecision(17);
  return os;
}

}  // namespace

// --- loss --------------------------------------------------------------------

void LossConfig::validate() const {
  if (lambda_rec < 0.0 || lambda_vel < 0.0) {
    throw ConfigError("LossConfig: loss weights must be non-negative");
  }
}

nlohmann::json LossConfig::to_json() const {
  return {{"lambda_rec", lambda_rec}, {"lambda_vel", lambda_vel}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.lambda_rec = j.at("lambda_rec").get<double>();
  c.lambda_vel = j.at("lambda_vel").get<double>();
  c.validate();
  return c;
}

double sequence_loss(const Matrix& pred, const Matrix& target, const LossConfig& cfg) {
  Matrix scratch;
  return sequence_loss_backward(pred, target, cfg, scratch);
}

double sequence_loss_backward(const Matrix& pred, const Matrix& target, const LossConfig& cfg,
                              Matrix& d_pred) {
  cfg.validate();
  require_same_shape(pred, target, "sequence_loss");
  const Index T = pred.rows();
  const Index C = pred.cols();
  if (T < 1 || C < 1) throw ShapeError("sequence_loss: empty sequence");

  const Matrix diff = pred - target;
  const double n = static_cast<double>(T) * static_cast<double>(C);
  double loss = cfg.lambda_rec * diff.squaredNorm() / n;
  d_pred = (2.0 * cfg.lambda_rec / n) * diff;

  if (T > 1) {  // velocity term: first-order frame differences
    const Matrix vd = diff.bottomRows(T - 1) - diff.topRows(T - 1);
    const double nv = static_cast<double>(T - 1) * static_cast<double>(C);
    loss += cfg.lambda_vel * vd.squaredNorm() / nv;
    const Matrix dvd = (2.0 * cfg.lambda_vel / nv) * vd;
    d_pred.bottomRows(T - 1) += dvd;
    d_pred.topRows(T - 1) -= dvd;
  }
  return loss;
}

// --- optimizer ---------------------------------------------------------------

void OptimizerConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("OptimizerConfig: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("OptimizerConfig: betas must lie in [0, 1)");
  }
  if (eps <= 0.0) throw ConfigError("OptimizerConfig: eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("OptimizerConfig: negative weight decay");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.validate();
  return c;
}

bool weight_decay_applies(const std::string& name) {
  return ends_with(name, ".w") || name.rfind("lora.", 0) == 0;
}

AdamW::AdamW(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void AdamW::step(const std::vector<ParamRef>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const ParamRef& p : params) {
    if (p.value == nullptr || p.grad == nullptr) {
      throw ConfigError("AdamW: parameter '" + p.name + "' has no value/grad buffer");
    }
    Matrix& theta = *p.value;
    const Matrix& g = *p.grad;
    require_same_shape(theta, g, "AdamW grad");
    auto it = state_.find(p.name);
    if (it == state_.end()) {
      it = state_
               .emplace(p.name, Slot{Matrix::Zero(theta.rows(), theta.cols()),
                                     Matrix::Zero(theta.rows(), theta.cols())})
               .first;
    }
    Slot& s = it->second;
    require_same_shape(s.m, theta, "AdamW state");
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * g;
    s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Matrix update = ((s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + cfg_.eps)).matrix();
    if (p.decay) update += cfg_.weight_decay * theta;  // decoupled decay
    theta -= cfg_.lr * update;
  }
}

// --- base training -----------------------------------------------------------

nlohmann::json TrainLog::to_json() const {
  return {{"epoch_losses", epoch_losses}, {"seconds", seconds}, {"steps", steps}};
}

std::string TrainLog::to_csv() const {
  std::ostringstream os = csv_stream();
  os << "epoch,loss\n";
  for (std::size_t e = 0; e < epoch_losses.size(); ++e) os << e << ',' << epoch_losses[e] << '\n';
  return os.str();
}

TrainLog train_base(ModelWeights& weights, const Corpus& corpus, const TrainBaseOptions& opts) {
  const ModelConfig& mc = weights.config;
  const CorpusConfig& cc = corpus.config;
  opts.optimizer.validate();
  opts.loss.validate();
  if (opts.epochs < 0) throw ConfigError("train_base: negative epoch count");
  check_model_matches_corpus(mc, cc, "train_base");

  const std::vector<int> train_ids = corpus.split_ids(Split::kTrain);
  if (train_ids.empty()) throw ConfigError("train_base: corpus has no training subjects");
  if (static_cast<int>(train_ids.size()) != mc.n_styles) {
    throw ConfigError("train_base: n_styles " + std::to_string(mc.n_styles) + " != " +
                      std::to_string(train_ids.size()) + " training subjects");
  }
  const int pool = pool_size(cc);

  GradMap grads = zero_grads(weights);
  std::vector<ParamRef> params;
  params.reserve(weights.tensors.size());
  for (auto& [name, tensor] : weights.tensors) {
    params.push_back({name, &tensor, &grads.at(name), weight_decay_applies(name)});
  }

  AdamW opt(opts.optimizer);
  TrainLog log;
  const double t0 = now_seconds();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int n_steps = 0;
    for (std::size_t sp = 0; sp < train_ids.size(); ++sp) {
      const Subject& subj = corpus.subject(train_ids[sp]);
      for (int j = 0; j < pool; ++j) {
        const Sentence& sent = subj.sentences[static_cast<std::size_t>(j)];
        const Matrix gt = sent.offsets();
        for (auto& kv : grads) kv.second.setZero();

        ForwardCache cache;
        const RowVector style = weights.at("style_table").row(static_cast<Index>(sp));
        const Matrix* teacher = mc.style_mode == StyleMode::kFaceformer ? &gt : nullptr;
        const Matrix pred = model_forward(weights, sent.audio, style, nullptr, cache, teacher);

        Matrix d_pred;
        const double loss = sequence_loss_backward(pred, gt, opts.loss, d_pred);
        if (!std::isfinite(loss)) {
          throw NumericError("train_base: non-finite loss at epoch " + std::to_string(epoch) +
                             ", subject " + std::to_string(subj.id) + ", sentence " +
                             std::to_string(j));
        }
        RowVector dstyle = RowVector::Zero(mc.d_model);
        model_backward(weights, cache, d_pred, nullptr, BackwardOptions{true}, &grads, nullptr,
                       &dstyle);
        grads.at("style_table").row(static_cast<Index>(sp)) += dstyle;
        opt.step(params);

        epoch_loss += loss;
        ++n_steps;
      }
    }
    log.epoch_losses.push_back(epoch_loss / std::max(1, n_steps));
  }
  log.seconds = now_seconds() - t0;
  log.steps = opt.steps_taken();
  return log;
}

// --- style selection ---------------------------------------------------------

nlohmann::json StyleChoice::to_json() const {
  return {{"index", index}, {"metrics", metrics.to_json()}, {"lip_l2", lip_l2}};
}

StyleChoice best_base_style(const ModelWeights& base, const Corpus& corpus, int subject_id) {
  check_model_matches_corpus(base.config, corpus.config, "best_base_style");
  const Subject& subj = corpus.subject(subject_id);
  StyleChoice choice;
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s < base.config.n_styles; ++s) {
    const RowVector style = base.at("style_table").row(s);
    const MetricTriple m = held_out_metrics(base, corpus, subj, style, nullptr);
    choice.lip_l2.push_back(m.l2_lip);
    if (m.l2_lip < best) {  // strict: ties resolve to the lowest index
      best = m.l2_lip;
      choice.index = s;
      choice.metrics = m;
    }
  }
  return choice;
}

// --- adaptation --------------------------------------------------------------

const char* adapt_strategy_name(AdaptStrategy s) {
  switch (s) {
    case AdaptStrategy::kLora: return "lora";
    case AdaptStrategy::kImitatorStyle: return "imitator-style";
    case AdaptStrategy::kStyleOnly: return "style-only";
  }
  throw ConfigError("adapt_strategy_name: unknown strategy");
}

AdaptStrategy adapt_strategy_from_string(const std::string& s) {
  if (s == "lora") return AdaptStrategy::kLora;
  if (s == "imitator-style") return AdaptStrategy::kImitatorStyle;
  if (s == "style-only") return AdaptStrategy::kStyleOnly;
  throw ConfigError("unknown adaptation strategy '" + s +
                    "' (expected lora | imitator-style | style-only)");
}

int AdaptOptions::resolved_epochs() const {
  if (epochs >= 0) return epochs;
  return strategy == AdaptStrategy::kLora ? 50 : 300;
}

nlohmann::json AdaptResult::to_json() const {
  nlohmann::json j{{"strategy", adapt_strategy_name(strategy)},
                   {"subject", subject},
                   {"n_sentences", n_sentences},
                   {"epochs", epochs},
                   {"l2_face", held_out.l2_face},
                   {"l2_lip", held_out.l2_lip},
                   {"lip_max", held_out.lip_max},
                   {"seconds", seconds},
                   {"trainable_params", trainable_params},
                   {"style_source", style_source},
                   {"style_trained", style_trained},
                   {"epoch_losses", epoch_losses}};
  j["style"] = std::vector<double>(style.data(), style.data() + style.size());
  return j;
}

AdaptResult adapt(const ModelWeights& base, const Corpus& corpus, int subject_id,
                  const std::vector<int>& sentence_ids, const AdaptOptions& opts) {
  opts.optimizer.validate();
  opts.loss.validate();
  const ModelConfig& mc = base.config;
  const CorpusConfig& cc = corpus.config;
  check_model_matches_corpus(mc, cc, "adapt");
  const Subject& subj = corpus.subject(subject_id);
  const int pool = pool_size(cc);

  if (sentence_ids.empty()) throw ConfigError("adapt: needs at least one sentence");
  for (int id : sentence_ids) {
    if (id < 0 || id >= pool) {
      throw ConfigError("adapt: sentence " + std::to_string(id) +
                        " outside the adaptation pool [0, " + std::to_string(pool) + ")");
    }
  }
  {
    std::vector<int> sorted = sentence_ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("adapt: duplicate sentence id");
    }
  }
  const int epochs = opts.resolved_epochs();

  AdaptResult res;
  res.strategy = opts.strategy;
  res.subject = subject_id;
  res.n_sentences = static_cast<int>(sentence_ids.size());
  res.epochs = epochs;

  // Style code starts from the training style that fits this subject best.
  const StyleChoice choice = best_base_style(base, corpus, subject_id);
  res.style_source = choice.index;
  Matrix style_mat = base.at("style_table").row(choice.index);
  Matrix style_grad = Matrix::Zero(1, mc.d_model);

  ModelWeights work;  // kImitatorStyle trains this copy
  LoraSet lora;
  LoraGradMap lgrads;
  GradMap grads;
  std::vector<ParamRef> params;
  std::string final_layer;
  bool style_trains = false;
  bool base_weight_grads = false;
  const ModelWeights* fwd_weights = &base;
  const LoraSet* fwd_lora = nullptr;

  switch (opts.strategy) {
    case AdaptStrategy::kLora: {
      lora = lora_attach(base, opts.lora, opts.seed);
      lgrads = lora_zero_grads(lora);
      for (auto& [target, adaptor] : lora.adaptors) {
        LoraGrad& g = lgrads.at(target);
        params.push_back({"lora." + target + ".a", &adaptor.a, &g.da, true});
        params.push_back({"lora." + target + ".b", &adaptor.b, &g.db, true});
      }
      res.trainable_params = lora_count_trainable(lora);
      style_trains = opts.train_style;
      fwd_lora = &lora;
      break;
    }
    case AdaptStrategy::kImitatorStyle: {
      work = base;
      grads = zero_grads(work);
      final_layer = mc.style_mode == StyleMode::kImitator ? "motion2" : "motion1";
      for (const char* sfx : {".w", ".b"}) {
        const std::string name = final_layer + sfx;
        params.push_back({name, &work.at(name), &grads.at(name), weight_decay_applies(name)});
        res.trainable_params += work.at(name).size();
      }
      style_trains = true;
      base_weight_grads = true;
      fwd_weights = &work;
      break;
    }
    case AdaptStrategy::kStyleOnly: {
      style_trains = true;
      break;
    }
  }
  if (style_trains) {
    params.push_back({"style", &style_mat, &style_grad, false});
    res.trainable_params += mc.d_model;
  }
  res.style_trained = style_trains;

  AdamW opt(opts.optimizer);
  const double t0 = now_seconds();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int id : sentence_ids) {
      const Sentence& sent = subj.sentences[static_cast<std::size_t>(id)];
      const Matrix gt = sent.offsets();
      for (auto& kv : grads) kv.second.setZero();
      for (auto& kv : lgrads) {
        kv.second.da.setZero();
        kv.second.db.setZero();
      }
      style_grad.setZero();

      ForwardCache cache;
      const RowVector style = style_mat.row(0);
      const Matrix* teacher = mc.style_mode == StyleMode::kFaceformer ? &gt : nullptr;
      const Matrix pred = model_forward(*fwd_weights, sent.audio, style, fwd_lora, cache, teacher);

      Matrix d_pred;
      const double loss = sequence_loss_backward(pred, gt, opts.loss, d_pred);
      if (!std::isfinite(loss)) {
        throw NumericError("adapt: non-finite loss at epoch " + std::to_string(epoch) +
                           ", sentence " + std::to_string(id));
      }
      RowVector dstyle = RowVector::Zero(mc.d_model);
      model_backward(*fwd_weights, cache, d_pred, fwd_lora, BackwardOptions{base_weight_grads},
                     base_weight_grads ? &grads : nullptr, fwd_lora != nullptr ? &lgrads : nullptr,
                     &dstyle);
      style_grad.row(0) = dstyle;
      opt.step(params);
      epoch_loss += loss;
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(sentence_ids.size()));
  }
  res.seconds = now_seconds() - t0;

  res.style = style_mat.row(0);
  if (opts.strategy == AdaptStrategy::kLora) res.lora = lora;
  if (opts.strategy == AdaptStrategy::kImitatorStyle) {
    for (const char* sfx : {".w", ".b"}) {
      res.updated.emplace(final_layer + sfx, work.at(final_layer + sfx));
    }
  }
  res.held_out = held_out_metrics(*fwd_weights, corpus, subj, res.style, fwd_lora);
  return res;
}

std::string adapt_results_csv(const std::vector<AdaptResult>& rows) {
  std::ostringstream os = csv_stream();
  os << "strategy,n_sentences,l2_face,l2_lip,lip_max,seconds,trainable_params\n";
  for (const AdaptResult& r : rows) {
    os << adapt_strategy_name(r.strategy) << ',' << r.n_sentences << ',' << r.held_out.l2_face
       << ',' << r.held_out.l2_lip << ',' << r.held_out.lip_max << ',' << r.seconds << ','
       << r.trainable_params << '\n';
  }
  return os.str();
}

AdaptedInference adapted_inference(const ModelWeights& base, const AdaptResult& result) {
  AdaptedInference ai;
  ai.weights = base;
  ai.style = result.style;
  for (const auto& [name, tensor] : result.updated) {
    Matrix& dst = ai.weights.at(name);
    require_same_shape(dst, tensor, "adapted_inference");
    dst = tensor;
  }
  if (result.strategy == AdaptStrategy::kLora) {
    ai.lora = result.lora;
    ai.has_lora = true;
  }
  return ai;
}

Matrix adapted_infer(const ModelWeights& base, const AdaptResult& result, const Matrix& features) {
  const AdaptedInference ai = adapted_inference(base, result);
  return infer_offsets(ai.weights, features, ai.style, ai.lora_or_null());
}

// --- rank sweep --------------------------------------------------------------

nlohmann::json RankSweepResult::to_json() const {
  nlohmann::json trials_json = nlohmann::json::array();
  for (const RankTrial& t : trials) {
    trials_json.push_back({{"trial", t.trial},
                           {"subject", t.subject},
                           {"sentence_ids", t.sentence_ids},
                           {"lip_l2", t.lip_l2}});
  }
  return {{"ranks", ranks}, {"mean_lip_l2", mean_lip_l2}, {"trials", trials_json}};
}

std::string RankSweepResult::to_csv() const {
  std::ostringstream os = csv_stream();
  os << "rank,mean_lip_l2\n";
  for (std::size_t i = 0; i < ranks.size(); ++i) os << ranks[i] << ',' << mean_lip_l2[i] << '\n';
  return os.str();
}

RankSweepResult sweep_rank(const ModelWeights& base, const Corpus& corpus,
                           const RankSweepOptions& opts) {
  if (opts.ranks.empty()) throw ConfigError("sweep_rank: empty rank list");
  if (opts.trials < 1) throw ConfigError("sweep_rank: trials must be >= 1");
  if (opts.alpha < 0.0) throw ConfigError("sweep_rank: alpha must be >= 0 (0 tracks rank)");
  const std::vector<int> test_ids = corpus.split_ids(Split::kTest);
  if (test_ids.empty()) throw ConfigError("sweep_rank: corpus has no test subjects");
  const int pool = pool_size(corpus.config);
  const int max_n = std::min(30, pool);

  RankSweepResult out;
  out.ranks = opts.ranks;
  out.mean_lip_l2.assign(opts.ranks.size(), 0.0);

  const Rng root(opts.seed);
  for (int t = 0; t < opts.trials; ++t) {
    Rng r = root.fork("trial", static_cast<std::uint64_t>(t));
    RankTrial trial;
    trial.trial = t;
    trial.subject =
        test_ids[static_cast<std::size_t>(r.uniform_int(0, static_cast<int>(test_ids.size()) - 1))];
    const int n = static_cast<int>(r.uniform_int(1, max_n));
    trial.sentence_ids = r.sample_without_replacement(pool, n);

    for (std::size_t ri = 0; ri < opts.ranks.size(); ++ri) {
      AdaptOptions ao;
      ao.strategy = AdaptStrategy::kLora;
      ao.lora.rank = opts.ranks[ri];
      ao.lora.alpha = opts.alpha > 0.0 ? opts.alpha : 2.0 * opts.ranks[ri];
      ao.lora.targets = opts.targets;
      ao.lora.allow_full_rank = true;  // the sweep deliberately includes a full-rank point
      ao.epochs = opts.epochs;
      ao.optimizer = opts.optimizer;
      ao.loss = opts.loss;
      ao.seed = root.fork("attach", static_cast<std::uint64_t>(t))
                    .fork("rank", static_cast<std::uint64_t>(opts.ranks[ri]))
                    .seed();
      const AdaptResult ar = adapt(base, corpus, trial.subject, trial.sentence_ids, ao);
      trial.lip_l2.push_back(ar.held_out.l2_lip);
      out.mean_lip_l2[ri] += ar.held_out.l2_lip;
    }
    out.trials.push_back(std::move(trial));
  }
  for (double& m : out.mean_lip_l2) m /= static_cast<double>(opts.trials);
  return out;
}

// --- chunk sweep -------------------------------------------------------------

nlohmann::json ChunkSweepResult::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const ChunkSweepRow& r : rows) {
    rows_json.push_back({{"chunk_size", r.chunk_size},
                         {"padding", r.padding},
                         {"masked", r.masked.to_json()},
                         {"seconds", r.seconds},
                         {"ops_full", r.ops_full},
                         {"ops_chunked", r.ops_chunked},
                         {"boundary_discrepancy", r.boundary_discrepancy},
                         {"boundary_trace", r.boundary_trace}});
  }
  return {{"unchunked", unchunked.to_json()},
          {"unchunked_seconds", unchunked_seconds},
          {"rows", rows_json}};
}

std::string ChunkSweepResult::to_csv() const {
  std::ostringstream os = csv_stream();
  os << "chunk_size,padding,l2_face,l2_lip,lip_max,seconds,ops_full,ops_chunked,"
        "boundary_discrepancy\n";
  for (const ChunkSweepRow& r : rows) {
    os << r.chunk_size << ',' << r.padding << ',' << r.masked.l2_face << ',' << r.masked.l2_lip
       << ',' << r.masked.lip_max << ',' << r.seconds << ',' << r.ops_full << ',' << r.ops_chunked
       << ',' << r.boundary_discrepancy << '\n';
  }
  return os.str();
}

ChunkSweepResult sweep_chunking(const ModelWeights& base, const Corpus& corpus,
                                const ChunkSweepOptions& opts) {
  if (opts.chunk_sizes.empty() || opts.paddings.empty()) {
    throw ConfigError("sweep_chunking: empty chunk-size or padding list");
  }
  if (opts.boundary_frames < 1) throw ConfigError("sweep_chunking: boundary_frames must be >= 1");
  check_model_matches_corpus(base.config, corpus.config, "sweep_chunking");
  const std::vector<int> test_ids = corpus.split_ids(Split::kTest);
  if (test_ids.empty()) throw ConfigError("sweep_chunking: corpus has no test subjects");
  const CorpusConfig& cc = corpus.config;
  const int pool = pool_size(cc);

  struct Item {
    Sentence long_sentence;
    RowVector style;
    Matrix gt;
    Matrix full_pred;
  };
  std::vector<Item> items;
  ChunkSweepResult out;
  MetricAccumulator base_acc;
  std::vector<int> all_vertices(static_cast<std::size_t>(base.config.n_vertices));
  for (int v = 0; v < base.config.n_vertices; ++v) all_vertices[static_cast<std::size_t>(v)] = v;

  for (int id : test_ids) {
    const Subject& subj = corpus.subject(id);
    const std::vector<Sentence> held(subj.sentences.begin() + pool, subj.sentences.end());
    Item item;
    item.long_sentence = concat_sentences(held, 1.0, cc.fps, cc.feature_rate);
    item.style = base.at("style_table").row(best_base_style(base, corpus, id).index);
    item.gt = item.long_sentence.offsets();
    const double t0 = now_seconds();
    item.full_pred = infer_offsets(base, item.long_sentence.audio, item.style);
    out.unchunked_seconds += now_seconds() - t0;
    base_acc.add(item.full_pred, item.gt, item.long_sentence.silence_mask,
                 base.config.lip_vertex_ids);
    items.push_back(std::move(item));
  }
  out.unchunked = base_acc.mean();

  for (int K : opts.chunk_sizes) {
    for (int P : opts.paddings) {
      ChunkSweepRow row;
      row.chunk_size = K;
      row.padding = P;
      MetricAccumulator acc;
      double disc_sum = 0.0;
      std::int64_t disc_count = 0;
      std::vector<double> trace_sum(static_cast<std::size_t>(opts.boundary_frames), 0.0);
      std::vector<std::int64_t> trace_count(static_cast<std::size_t>(opts.boundary_frames), 0);

      for (const Item& item : items) {
        const Index T = item.gt.rows();
        const AttentionOpCounts ops = attention_ops(T, K, P);
        row.ops_full += ops.full;
        row.ops_chunked += ops.chunked;

        const double t0 = now_seconds();
        const Matrix pred = chunked_infer_offsets(base, item.long_sentence.audio, item.style, K, P,
                                                  nullptr, opts.n_threads);
        row.seconds += now_seconds() - t0;
        acc.add(pred, item.gt, item.long_sentence.silence_mask, base.config.lip_vertex_ids);

        const ChunkPlan plan = plan_chunks(T, K, P);
        for (const Chunk& ch : plan.chunks) {
          const Index lead = std::min<Index>(opts.boundary_frames, ch.keep_frames());
          for (Index o = 0; o < lead; ++o) {
            const Index t = ch.keep_begin + o;
            const RowVector a = pred.row(t);
            const RowVector b = item.full_pred.row(t);
            disc_sum += mean_vertex_distance(a, b, all_vertices);
            ++disc_count;
            trace_sum[static_cast<std::size_t>(o)] +=
                mean_vertex_distance(a, b, base.config.lip_vertex_ids);
            ++trace_count[static_cast<std::size_t>(o)];
          }
        }
      }
      row.masked = acc.mean();
      row.boundary_discrepancy =
          disc_count > 0 ? disc_sum / static_cast<double>(disc_count) : 0.0;
      row.boundary_trace.resize(static_cast<std::size_t>(opts.boundary_frames));
      for (std::size_t o = 0; o < trace_sum.size(); ++o) {
        row.boundary_trace[o] =
            trace_count[o] > 0 ? trace_sum[o] / static_cast<double>(trace_count[o]) : 0.0;
      }
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace speechanim
