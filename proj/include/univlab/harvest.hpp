#pragma once

// Activation harvesting: corpora, the refill-and-shuffle buffer, activation
// streams and their on-disk shards, plus the planted-dictionary generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "univlab/hooks.hpp"
#include "univlab/models.hpp"
#include "univlab/numerics.hpp"
#include "univlab/tasks.hpp"

namespace univlab {

struct TokenDocument {
  std::uint64_t id = 0;
  TokenSeq tokens;  // tokens[0] is bos
};

// Prepends bos when missing and truncates to max_len tokens (bos included).
TokenDocument prepare_document(std::uint64_t id, TokenSeq tokens, TokenId bos, std::size_t max_len = 1024);

// One activation vector with its origin.
struct ActivationRow {
  std::uint64_t doc = 0;
  std::uint32_t pos = 0;
  friend bool operator==(const ActivationRow&, const ActivationRow&) = default;
};

// Token-major activations of one site. values holds size() x dim doubles.
struct ActivationStream {
  std::string site;
  std::size_t dim = 0;
  std::vector<ActivationRow> rows;
  std::vector<double> values;

  std::size_t size() const { return rows.size(); }
  std::span<const double> at(std::size_t i) const { return {values.data() + i * dim, dim}; }
  void push(ActivationRow row, std::span<const double> v);
  friend bool operator==(const ActivationStream&, const ActivationStream&) = default;
};

// Fills to capacity, shuffles, then drains everything before refilling.
// A final partial fill is shuffled and drained by flush().
class ShuffleBuffer {
 public:
  using Sink = std::function<void(const ActivationRow&, std::span<const double>)>;

  ShuffleBuffer(std::size_t capacity, std::size_t dim, std::uint64_t seed);

  void push(const ActivationRow& row, std::span<const double> v, const Sink& sink);
  void flush(const Sink& sink);

  std::size_t capacity() const { return capacity_; }
  std::size_t pending() const { return rows_.size(); }

 private:
  void drain(const Sink& sink);

  std::size_t capacity_;
  std::size_t dim_;
  std::mt19937_64 rng_;
  std::vector<ActivationRow> rows_;
  std::vector<double> values_;
};

struct HarvestOptions {
  std::size_t buffer_capacity = 65536;
  std::uint64_t seed = 0;
  std::optional<TokenId> eos_id;
  // Documents run through the model this many at a time (in parallel); rows
  // enter the buffer in document order regardless.
  std::size_t batch_docs = 64;
};

// Forward passes over the corpus, capture `site`, drop bos/eos positions,
// route rows through a shuffle buffer.
ActivationStream collect_activations(const Model& model, const std::vector<TokenDocument>& corpus,
                                     const HookSite& site, const HarvestOptions& options);

// Same capture without shuffling: rows in (document, position) order. Used
// when two sides must stay index-aligned.
ActivationStream collect_aligned(const Model& model, const std::vector<TokenDocument>& corpus,
                                 const HookSite& site, std::optional<TokenId> eos_id = std::nullopt);

// ---- planted dictionaries ----------------------------------------------------

struct SyntheticFeatureModel {
  std::size_t d = 0;
  std::size_t f_true = 0;
  Matrix dictionary;  // d x f_true, unit columns
  double active_per_sample = 5.0;
  double magnitude_lo = 0.5;
  double magnitude_hi = 1.5;

  void validate() const;
};

SyntheticFeatureModel make_synthetic_model(std::size_t d, std::size_t f_true, std::uint64_t seed);
// Same codes, dictionary R * G for a random rotation R.
SyntheticFeatureModel rotate_synthetic_model(const SyntheticFeatureModel& base, std::uint64_t seed);
Matrix random_rotation(std::size_t d, std::uint64_t seed);

// Sparse non-negative codes: per sample, (feature, magnitude) pairs sorted by
// feature index.
struct SparseCodes {
  std::size_t f = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  std::size_t size() const { return offsets.size() - 1; }
  // Dense activation of feature j across all samples.
  std::vector<double> column(std::size_t j) const;
};

// Each feature independently active with probability active_per_sample / f,
// magnitude uniform on [lo, hi].
SparseCodes gen_sparse_codes(const SyntheticFeatureModel& m, std::size_t samples, std::uint64_t seed);

struct SyntheticPair {
  ActivationStream a;
  ActivationStream b;
  // Ground truth: feature j of side A corresponds to feature j of side B.
  std::vector<std::size_t> planted;
};

SyntheticPair gen_synthetic_pair(const SyntheticFeatureModel& a, const SyntheticFeatureModel& b,
                                 const SparseCodes& codes);

// ---- token corpora -----------------------------------------------------------

enum class CorpusKind { induction, ioi, uniform };

const char* to_string(CorpusKind k);
CorpusKind parse_corpus_kind(std::string_view s);

struct CorpusParams {
  CorpusKind kind = CorpusKind::uniform;
  std::size_t docs = 64;
  std::size_t vocab = 32;      // induction / uniform
  std::size_t length = 64;     // uniform: tokens per document including bos
  std::size_t distance = 8;    // induction
  Corruption corruption = Corruption::none;
  std::uint64_t seed = 0;
};

struct TaskCorpus {
  std::vector<TokenDocument> clean;
  std::vector<TokenDocument> corrupted;  // empty for uniform
  std::vector<TaskInstance> tasks;       // empty for uniform
};

TaskCorpus gen_token_corpus(const CorpusParams& params);

// ---- files -------------------------------------------------------------------

// NDJSON, one JSON array of token ids per line; document id = line number.
void write_corpus(const std::vector<TokenDocument>& docs, const std::filesystem::path& path);
std::vector<TokenDocument> read_corpus(const std::filesystem::path& path, TokenId bos = 0,
                                       std::size_t max_len = 1024);

// Fixed records (u64 doc, u32 pos, u32 pad, dim x f64) plus `<path>.json`
// sidecar with site, dim, count, seed and a CRC64 of the record file.
void write_activation_shard(const ActivationStream& s, const std::filesystem::path& path, std::uint64_t seed);
ActivationStream read_activation_shard(const std::filesystem::path& path);

}  // namespace univlab
