#pragma once

// Feature evidence (top activating windows), scoring prompts, an LLM
// chat-completion client with a JSONL cache, and score-vs-MPPC reports.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "univlab/harvest.hpp"
#include "univlab/mppc.hpp"
#include "univlab/sae.hpp"

namespace univlab {

inline constexpr std::size_t kWindowTokens = 17;
inline constexpr std::size_t kEvidenceWindows = 10;

struct EvidenceWindow {
  std::uint64_t doc = 0;
  std::uint32_t peak_pos = 0;
  std::uint32_t start = 0;  // document position of the first token
  double peak = 0.0;
  std::vector<std::string> tokens;  // kWindowTokens entries
  std::vector<double> activations;  // kWindowTokens entries, non-negative

  friend bool operator==(const EvidenceWindow&, const EvidenceWindow&) = default;
};

struct FeatureEvidence {
  std::size_t feature = 0;
  int layer = 0;
  std::vector<EvidenceWindow> windows;
  std::size_t firing_locations = 0;
  bool padded = false;  // fewer than 10 distinct windows; filled from the best available
  bool empty() const { return windows.empty(); }
  void validate() const;  // exactly 10 x 17, finite non-negative activations
};

using TokenText = std::function<std::string(TokenId)>;

// Windows of 17 tokens around each peak (8 left, 8 right, shifted to stay in
// the document), best peak first with ties broken by (doc, position). Windows
// overlapping an already chosen one by 50% or more are skipped. Documents
// shorter than 17 tokens are right-padded with "" at activation 0. When fewer
// than 10 windows survive, the skipped overlapping windows and then repeats of
// the best ones are appended after them and `padded` is set.
FeatureEvidence top_activating_samples(std::size_t feature, const FeatureMatrix& features,
                                       const std::vector<TokenDocument>& corpus, const TokenText& text,
                                       int layer = 0);

enum class ScoreKind { complexity, consistency };
const char* to_string(ScoreKind k);
ScoreKind parse_score_kind(std::string_view s);

// Instruction text, a blank line, then one block per window.
std::string format_prompt(ScoreKind kind, const FeatureEvidence& evidence);
std::string prompt_preamble(ScoreKind kind);

struct ParsedScore {
  std::optional<int> score;
  bool clamped = false;
};

// First integer in [1, 5]; otherwise the first integer clamped into range and
// flagged; otherwise missing.
ParsedScore parse_score(std::string_view response);

struct ScoreRecord {
  std::size_t feature = 0;
  int layer = 0;
  ScoreKind kind = ScoreKind::complexity;
  std::optional<int> score;
  bool clamped = false;
  std::string status;  // "ok", "score-missing", "empty-evidence"
  std::string raw;
  std::string model;
  std::string timestamp;
  std::string prompt_hash;

  nlohmann::json to_json() const;
  static ScoreRecord from_json(const nlohmann::json& j);
};

struct ChatClientConfig {
  std::string base_url = "http://127.0.0.1:8080";  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  int max_retries = 3;
  int backoff_ms = 250;  // doubled after each failed attempt
  int timeout_s = 60;
  std::size_t concurrency = 4;
  double temperature = 0.0;

  static ChatClientConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Sends one user message, returns the assistant text. Transport failures,
// 429 and 5xx are retried; anything else, or exhausted retries, throws a
// service error.
std::string chat_completion(const ChatClientConfig& cfg, const std::string& prompt);

// Append-only JSONL cache keyed by (layer, feature, kind, prompt hash).
class ScoreCache {
 public:
  explicit ScoreCache(std::filesystem::path path);
  std::optional<ScoreRecord> find(int layer, std::size_t feature, ScoreKind kind, const std::string& prompt_hash) const;
  void put(const ScoreRecord& r);
  std::size_t size() const;

 private:
  static std::string key(int layer, std::size_t feature, ScoreKind kind, const std::string& prompt_hash);
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, ScoreRecord> entries_;
};

std::string prompt_hash(const std::string& prompt);

ScoreRecord score_feature(const ChatClientConfig& cfg, ScoreCache* cache, const FeatureEvidence& evidence,
                          ScoreKind kind);

// Up to cfg.concurrency requests in flight; results in input order.
std::vector<ScoreRecord> score_features(const ChatClientConfig& cfg, ScoreCache* cache,
                                        const std::vector<FeatureEvidence>& evidence, ScoreKind kind);

struct BinSummary {
  int score = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
  std::size_t below_threshold = 0;
};

struct ScoreReport {
  ScoreKind kind = ScoreKind::complexity;
  double threshold = 0.2;
  std::vector<BinSummary> bins;  // ascending score, only bins with data
  std::size_t joined = 0;
  std::size_t missing_scores = 0;
  std::size_t undefined_mppc = 0;
  std::size_t below_threshold = 0;
  std::size_t above_threshold = 0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Joins on (layer, feature) against side A of the table; throws value error
// on an empty join.
ScoreReport score_vs_mppc_report(const std::vector<ScoreRecord>& scores, const MatchTable& table,
                                 double threshold = 0.2);

}  // namespace univlab
