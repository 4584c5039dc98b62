#pragma once

// Binary persistence.  One container format carries every artifact: a magic
// string, a little-endian u64 header length, a JSON header (dtype, named entry
// table with byte offsets, payload size and hash, free-form meta), then the
// row-major little-endian f64 payload.  Serialization is canonical — entries
// sorted by name, compact JSON — so save -> load -> save is byte-identical,
// and the payload hash is verified on every load.
//
// Adaptor files additionally record the content hash of the base-model file
// they were trained against and refuse to load over a different base unless
// explicitly overridden.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "speechanim/data.hpp"
#include "speechanim/model.hpp"
#include "speechanim/training.hpp"
#include "speechanim/types.hpp"

namespace speechanim {

struct WeightContainer {
  std::map<std::string, Matrix> tensors;
  nlohmann::json meta = nlohmann::json::object();

  static constexpr char kMagic[9] = "SAWTC01\n";  // 8 bytes on disk

  std::vector<std::uint8_t> serialize() const;
  // Throws IoError on truncation, bad magic, malformed header, out-of-bounds
  // or overlapping entries, or a payload-hash mismatch.
  static WeightContainer deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::string& path) const;
  static WeightContainer load(const std::string& path);
};

// FNV-1a (64-bit) as a hex string.
std::string bytes_hash_hex(const std::uint8_t* data, std::size_t n);
std::string file_content_hash(const std::string& path);  // IoError when unreadable

// --- typed round-trips -------------------------------------------------------

void save_model(const ModelWeights& w, const std::string& path);
ModelWeights load_model(const std::string& path);

// Stores the trained pieces of any adaptation strategy: the style code, LoRA
// factors and/or fine-tuned tensors, the result metadata, and base_hash (the
// content hash of the base-model file the adaptation ran against).
void save_adapt_result(const AdaptResult& r, const std::string& base_hash,
                       const std::string& path);
// base_hash must match the stored one unless ignore_base_hash is set.
AdaptResult load_adapt_result(const std::string& path, const std::string& base_hash,
                              bool ignore_base_hash = false);

void save_sentence(const Sentence& s, const std::string& path);
Sentence load_sentence(const std::string& path);

// A predicted trajectory, evaluable against a sentence file.
void save_prediction(const Matrix& vertices, const std::vector<std::uint8_t>& silence_mask,
                     const RowVector& neutral, const std::string& path);

// Corpus directory: corpus.json (config + split lists) plus one sentence
// container per (subject, index).  Regeneration from the same config writes
// byte-identical trees.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

}  // namespace speechanim
