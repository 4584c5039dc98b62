#include "speechanim/container.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "speechanim/rng.hpp"

namespace speechanim {

namespace {

constexpr std::size_t kMagicLen = 8;

void put_u64_le(std::uint8_t* dst, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) dst[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint64_t get_u64_le(const std::uint8_t* src) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(src[i]) << (8 * i);
  return v;
}

void put_f64_le(std::uint8_t* dst, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  put_u64_le(dst, bits);
}

double get_f64_le(const std::uint8_t* src) {
  const std::uint64_t bits = get_u64_le(src);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}

std::string sentence_path(const std::string& dir, int subject, int index) {
  return dir + "/sentence_" + std::to_string(subject) + "_" + std::to_string(index) + ".bin";
}

}  // namespace

constexpr char WeightContainer::kMagic[9];

std::string bytes_hash_hex(const std::uint8_t* data, std::size_t n) {
  const std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(data), n));
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << h;
  return os.str();
}

std::string file_content_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for hashing");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read error on '" + path + "'");
  return bytes_hash_hex(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
}

std::vector<std::uint8_t> WeightContainer::serialize() const {
  std::size_t payload_bytes = 0;
  for (const auto& [name, t] : tensors) payload_bytes += 8 * static_cast<std::size_t>(t.size());

  std::vector<std::uint8_t> payload(payload_bytes);
  nlohmann::json entries = nlohmann::json::array();
  std::size_t at = 0;
  for (const auto& [name, t] : tensors) {  // map order: sorted by name
    entries.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", at}});
    for (Index i = 0; i < t.rows(); ++i) {
      for (Index j = 0; j < t.cols(); ++j) {
        put_f64_le(payload.data() + at, t(i, j));
        at += 8;
      }
    }
  }

  const nlohmann::json header{{"dtype", "f64"},
                              {"endianness", "little"},
                              {"entries", entries},
                              {"payload_bytes", payload_bytes},
                              {"payload_hash", bytes_hash_hex(payload.data(), payload.size())},
                              {"meta", meta}};
  const std::string hs = header.dump();

  std::vector<std::uint8_t> out(kMagicLen + 8 + hs.size() + payload.size());
  std::memcpy(out.data(), kMagic, kMagicLen);
  put_u64_le(out.data() + kMagicLen, hs.size());
  std::memcpy(out.data() + kMagicLen + 8, hs.data(), hs.size());
  std::memcpy(out.data() + kMagicLen + 8 + hs.size(), payload.data(), payload.size());
  return out;
}

WeightContainer WeightContainer::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagicLen + 8) throw IoError("container: truncated before the header");
  if (std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    throw IoError("container: bad magic (not a weight container)");
  }
  const std::uint64_t hlen = get_u64_le(bytes.data() + kMagicLen);
  if (hlen > bytes.size() - kMagicLen - 8) throw IoError("container: truncated header");

  nlohmann::json header;
  try {
    const char* hs = reinterpret_cast<const char*>(bytes.data() + kMagicLen + 8);
    header = nlohmann::json::parse(hs, hs + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("container: malformed header JSON: ") + e.what());
  }

  const std::uint8_t* payload = bytes.data() + kMagicLen + 8 + hlen;
  const std::size_t payload_size = bytes.size() - kMagicLen - 8 - hlen;

  WeightContainer c;
  try {
    if (header.at("dtype") != "f64") {
      throw IoError("container: unsupported dtype '" + header.at("dtype").get<std::string>() +
                    "'");
    }
    if (header.at("endianness") != "little") {
      throw IoError("container: unsupported endianness");
    }
    if (header.at("payload_bytes").get<std::size_t>() != payload_size) {
      throw IoError("container: payload is " + std::to_string(payload_size) +
                    " bytes but the header declares " +
                    std::to_string(header.at("payload_bytes").get<std::size_t>()));
    }
    if (header.at("payload_hash").get<std::string>() != bytes_hash_hex(payload, payload_size)) {
      throw IoError("container: payload hash mismatch (corrupt file)");
    }

    struct Span {
      std::size_t off, len;
      std::string name;
    };
    std::vector<Span> spans;
    for (const auto& e : header.at("entries")) {
      const std::string name = e.at("name").get<std::string>();
      const auto rows = e.at("rows").get<std::int64_t>();
      const auto cols = e.at("cols").get<std::int64_t>();
      const auto off = e.at("offset").get<std::size_t>();
      if (rows < 0 || cols < 0) throw IoError("container: negative shape for entry " + name);
      const std::size_t len = 8 * static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
      if (off > payload_size || len > payload_size - off) {
        throw IoError("container: entry " + name + " overruns the payload");
      }
      if (c.tensors.count(name) != 0) throw IoError("container: duplicate entry " + name);

      Matrix t(rows, cols);
      const std::uint8_t* p = payload + off;
      for (Index i = 0; i < t.rows(); ++i) {
        for (Index j = 0; j < t.cols(); ++j) {
          t(i, j) = get_f64_le(p);
          p += 8;
        }
      }
      c.tensors.emplace(name, std::move(t));
      spans.push_back({off, len, name});
    }
    std::sort(spans.begin(), spans.end(),
              [](const Span& a, const Span& b) { return a.off < b.off; });
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i - 1].off + spans[i - 1].len > spans[i].off) {
        throw IoError("container: entries " + spans[i - 1].name + " and " + spans[i].name +
                      " overlap");
      }
    }
    c.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("container: bad header field: ") + e.what());
  }
  return c;
}

void WeightContainer::save(const std::string& path) const {
  const std::vector<std::uint8_t> bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

WeightContainer WeightContainer::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes;
  {
    const std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read error on '" + path + "'");
    bytes.assign(s.begin(), s.end());
  }
  try {
    return deserialize(bytes);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

// --- model -------------------------------------------------------------------

void save_model(const ModelWeights& w, const std::string& path) {
  WeightContainer c;
  c.tensors = w.tensors;
  c.meta = {{"kind", "model"}, {"model_config", w.config.to_json()}};
  c.save(path);
}

ModelWeights load_model(const std::string& path) {
  const WeightContainer c = WeightContainer::load(path);
  if (c.meta.value("kind", "") != "model") {
    throw IoError(path + ": not a model container");
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_json(c.meta.at("model_config"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad model_config: " + e.what());
  }
  // Initialize for the tensor inventory, then overwrite with the stored values.
  ModelWeights w = ModelWeights::init(config, 0);
  for (const auto& [name, t] : w.tensors) {
    const auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw IoError(path + ": missing tensor " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw IoError(path + ": tensor " + name + " has shape " + shape_str(it->second) +
                    ", expected " + shape_str(t));
    }
  }
  for (const auto& [name, t] : c.tensors) {
    if (w.tensors.count(name) == 0) throw IoError(path + ": unexpected tensor " + name);
    w.tensors.at(name) = t;
  }
  return w;
}

// --- adaptation result -------------------------------------------------------

void save_adapt_result(const AdaptResult& r, const std::string& base_hash,
                       const std::string& path) {
  WeightContainer c;
  c.meta = r.to_json();
  c.meta.erase("style");    // stored as a tensor, not as JSON
  c.meta.erase("seconds");  // wall clock stays out: identical runs write identical files
  c.meta["kind"] = "adaptor";
  c.meta["base_hash"] = base_hash;
  c.tensors.emplace("style", Matrix(r.style));
  if (!r.lora.adaptors.empty()) {
    c.meta["lora"] = {{"rank", r.lora.config.rank},
                      {"alpha", r.lora.config.alpha},
                      {"targets", lora_target_name(r.lora.config.targets)},
                      {"allow_full_rank", r.lora.config.allow_full_rank}};
    for (const auto& [target, ad] : r.lora.adaptors) {
      c.tensors.emplace("lora." + target + ".a", ad.a);
      c.tensors.emplace("lora." + target + ".b", ad.b);
    }
  }
  for (const auto& [name, t] : r.updated) c.tensors.emplace("updated." + name, t);
  c.save(path);
}

AdaptResult load_adapt_result(const std::string& path, const std::string& base_hash,
                              bool ignore_base_hash) {
  const WeightContainer c = WeightContainer::load(path);
  if (c.meta.value("kind", "") != "adaptor") throw IoError(path + ": not an adaptor container");
  const std::string stored = c.meta.value("base_hash", "");
  if (!ignore_base_hash && stored != base_hash) {
    throw IoError(path + ": adaptor was trained against base " + stored +
                  " but the provided base hashes to " + base_hash +
                  " (use the override flag to load anyway)");
  }

  AdaptResult r;
  try {
    r.strategy = adapt_strategy_from_string(c.meta.at("strategy").get<std::string>());
    r.subject = c.meta.at("subject").get<int>();
    r.n_sentences = c.meta.at("n_sentences").get<int>();
    r.epochs = c.meta.at("epochs").get<int>();
    r.held_out.l2_face = c.meta.at("l2_face").get<double>();
    r.held_out.l2_lip = c.meta.at("l2_lip").get<double>();
    r.held_out.lip_max = c.meta.at("lip_max").get<double>();
    r.seconds = c.meta.value("seconds", 0.0);  // not stored; see save_adapt_result
    r.trainable_params = c.meta.at("trainable_params").get<std::int64_t>();
    r.style_source = c.meta.at("style_source").get<int>();
    r.style_trained = c.meta.at("style_trained").get<bool>();
    r.epoch_losses = c.meta.value("epoch_losses", std::vector<double>{});

    const Matrix& style = c.tensors.at("style");
    if (style.rows() != 1) throw IoError(path + ": style tensor must have one row");
    r.style = style.row(0);

    if (c.meta.contains("lora")) {
      const nlohmann::json& lj = c.meta.at("lora");
      r.lora.config.rank = lj.at("rank").get<int>();
      r.lora.config.alpha = lj.at("alpha").get<double>();
      r.lora.config.targets = lora_target_from_string(lj.at("targets").get<std::string>());
      r.lora.config.allow_full_rank = lj.at("allow_full_rank").get<bool>();
      for (const auto& [name, t] : c.tensors) {
        if (name.rfind("lora.", 0) != 0 || name.size() < 8) continue;
        if (name.compare(name.size() - 2, 2, ".a") != 0) continue;
        const std::string target = name.substr(5, name.size() - 7);
        const auto bt = c.tensors.find("lora." + target + ".b");
        if (bt == c.tensors.end()) throw IoError(path + ": adaptor " + target + " lacks its B factor");
        LoraAdaptor ad;
        ad.target = target;
        ad.a = t;
        ad.b = bt->second;
        ad.rank = static_cast<int>(t.cols());
        ad.alpha = r.lora.config.alpha;
        if (ad.b.cols() != ad.a.cols()) {
          throw IoError(path + ": adaptor " + target + " has mismatched factor ranks");
        }
        r.lora.adaptors.emplace(target, std::move(ad));
      }
    }
    for (const auto& [name, t] : c.tensors) {
      if (name.rfind("updated.", 0) == 0) r.updated.emplace(name.substr(8), t);
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(path + ": bad adaptor meta: " + e.what());
  }
  return r;
}

// --- sentences, predictions, corpus ------------------------------------------

void save_sentence(const Sentence& s, const std::string& path) {
  WeightContainer c;
  c.meta = {{"kind", "sentence"}, {"subject", s.subject}, {"index", s.index}};
  c.tensors.emplace("audio", s.audio);
  c.tensors.emplace("vertices", s.vertices);
  c.tensors.emplace("neutral", Matrix(s.neutral));
  Matrix mask(1, static_cast<Index>(s.silence_mask.size()));
  for (std::size_t t = 0; t < s.silence_mask.size(); ++t) {
    mask(0, static_cast<Index>(t)) = s.silence_mask[t] != 0 ? 1.0 : 0.0;
  }
  c.tensors.emplace("mask", mask);
  c.save(path);
}

Sentence load_sentence(const std::string& path) {
  const WeightContainer c = WeightContainer::load(path);
  if (c.meta.value("kind", "") != "sentence") throw IoError(path + ": not a sentence container");
  Sentence s;
  try {
    s.subject = c.meta.at("subject").get<int>();
    s.index = c.meta.at("index").get<int>();
    s.audio = c.tensors.at("audio");
    s.vertices = c.tensors.at("vertices");
    const Matrix& neutral = c.tensors.at("neutral");
    if (neutral.rows() != 1) throw IoError(path + ": neutral must have one row");
    s.neutral = neutral.row(0);
    const Matrix& mask = c.tensors.at("mask");
    if (mask.rows() != 1 || mask.cols() != s.vertices.rows()) {
      throw IoError(path + ": mask shape " + shape_str(mask) + " does not cover " +
                    std::to_string(s.vertices.rows()) + " frames");
    }
    s.silence_mask.resize(static_cast<std::size_t>(mask.cols()));
    for (Index t = 0; t < mask.cols(); ++t) {
      s.silence_mask[static_cast<std::size_t>(t)] = mask(0, t) != 0.0 ? 1 : 0;
    }
    if (s.neutral.size() != s.vertices.cols()) {
      throw IoError(path + ": neutral width " + std::to_string(s.neutral.size()) +
                    " != vertex width " + std::to_string(s.vertices.cols()));
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(path + ": bad sentence container: " + e.what());
  }
  return s;
}

void save_prediction(const Matrix& vertices, const std::vector<std::uint8_t>& silence_mask,
                     const RowVector& neutral, const std::string& path) {
  if (static_cast<Index>(silence_mask.size()) != vertices.rows()) {
    throw ShapeError("save_prediction: mask length " + std::to_string(silence_mask.size()) +
                     " != " + std::to_string(vertices.rows()) + " frames");
  }
  WeightContainer c;
  c.meta = {{"kind", "prediction"}};
  c.tensors.emplace("vertices", vertices);
  c.tensors.emplace("neutral", Matrix(neutral));
  Matrix mask(1, static_cast<Index>(silence_mask.size()));
  for (std::size_t t = 0; t < silence_mask.size(); ++t) {
    mask(0, static_cast<Index>(t)) = silence_mask[t] != 0 ? 1.0 : 0.0;
  }
  c.tensors.emplace("mask", mask);
  c.save(path);
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());

  const nlohmann::json manifest{{"kind", "corpus"},
                                {"config", corpus.config.to_json()},
                                {"splits",
                                 {{"train", corpus.split_ids(Split::kTrain)},
                                  {"val", corpus.split_ids(Split::kVal)},
                                  {"test", corpus.split_ids(Split::kTest)}}}};
  {
    std::ofstream f(dir + "/corpus.json", std::ios::trunc);
    if (!f) throw IoError("cannot open '" + dir + "/corpus.json' for writing");
    f << manifest.dump(2) << "\n";
    if (!f) throw IoError("short write to '" + dir + "/corpus.json'");
  }
  for (const Subject& subj : corpus.subjects) {
    for (const Sentence& sent : subj.sentences) {
      save_sentence(sent, sentence_path(dir, subj.id, sent.index));
    }
  }
}

Corpus load_corpus(const std::string& dir) {
  nlohmann::json manifest;
  {
    std::ifstream f(dir + "/corpus.json");
    if (!f) throw IoError("cannot open '" + dir + "/corpus.json'");
    try {
      f >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(dir + "/corpus.json: malformed JSON: " + e.what());
    }
  }
  if (manifest.value("kind", "") != "corpus") {
    throw IoError(dir + "/corpus.json: not a corpus manifest");
  }

  Corpus corpus;
  std::map<int, Split> split_of;
  try {
    corpus.config = CorpusConfig::from_json(manifest.at("config"));
    const nlohmann::json& splits = manifest.at("splits");
    for (const auto& [key, split] : {std::pair<const char*, Split>{"train", Split::kTrain},
                                     {"val", Split::kVal},
                                     {"test", Split::kTest}}) {
      for (const auto& id : splits.at(key)) split_of[id.get<int>()] = split;
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir + "/corpus.json: " + e.what());
  }

  for (int sid = 0; sid < corpus.config.n_subjects; ++sid) {
    Subject subj;
    subj.id = sid;
    const auto it = split_of.find(sid);
    if (it == split_of.end()) {
      throw IoError(dir + "/corpus.json: subject " + std::to_string(sid) +
                    " is missing from the split lists");
    }
    subj.split = it->second;
    for (int j = 0; j < corpus.config.sentences_per_subject; ++j) {
      Sentence s = load_sentence(sentence_path(dir, sid, j));
      if (s.subject != sid || s.index != j) {
        throw IoError(sentence_path(dir, sid, j) + ": labeled as subject " +
                      std::to_string(s.subject) + " sentence " + std::to_string(s.index));
      }
      subj.sentences.push_back(std::move(s));
    }
    subj.neutral = subj.sentences.front().neutral;
    corpus.subjects.push_back(std::move(subj));
  }
  return corpus;
}

}  // namespace speechanim
