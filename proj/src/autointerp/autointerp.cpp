#include "univlab/autointerp.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <httplib.h>

#include "univlab/error.hpp"
#include "univlab/tensor_io.hpp"

namespace univlab {

// ---- evidence -------------------------------------------------------------

void FeatureEvidence::validate() const {
  UNIV_CHECK(windows.size() == kEvidenceWindows, contract,
             "evidence: expected " + std::to_string(kEvidenceWindows) + " windows, got " +
                 std::to_string(windows.size()));
  for (const auto& w : windows) {
    UNIV_CHECK(w.tokens.size() == kWindowTokens && w.activations.size() == kWindowTokens, contract,
               "evidence: window is not 17 tokens");
    for (double a : w.activations)
      UNIV_CHECK(std::isfinite(a) && a >= 0.0, value, "evidence: negative or non-finite activation");
  }
}

namespace {

double feature_value(const FeatureMatrix& m, std::size_t t, std::uint32_t f) {
  const auto b = m.index.begin() + static_cast<std::ptrdiff_t>(m.offsets[t]);
  const auto e = m.index.begin() + static_cast<std::ptrdiff_t>(m.offsets[t + 1]);
  const auto it = std::lower_bound(b, e, f);
  return it != e && *it == f ? m.value[static_cast<std::size_t>(it - m.index.begin())] : 0.0;
}

struct Candidate {
  double value;
  std::uint64_t doc;
  std::uint32_t pos;
};

}  // namespace

FeatureEvidence top_activating_samples(std::size_t feature, const FeatureMatrix& features,
                                       const std::vector<TokenDocument>& corpus, const TokenText& text, int layer) {
  UNIV_CHECK(feature < features.n_features, value,
             "evidence: feature " + std::to_string(feature) + " out of range");
  std::unordered_map<std::uint64_t, const TokenDocument*> docs;
  for (const auto& d : corpus) docs[d.id] = &d;

  const auto f = static_cast<std::uint32_t>(feature);
  std::vector<Candidate> cands;
  std::unordered_map<std::uint64_t, std::vector<double>> acts;
  for (std::size_t t = 0; t < features.size(); ++t) {
    const double v = feature_value(features, t, f);
    if (!(v > 0.0)) continue;
    const ActivationRow& row = features.rows[t];
    auto it = docs.find(row.doc);
    UNIV_CHECK(it != docs.end() && row.pos < it->second->tokens.size(), contract,
               "evidence: feature row points outside the corpus (doc " + std::to_string(row.doc) + ")");
    auto& a = acts[row.doc];
    if (a.empty()) a.assign(it->second->tokens.size(), 0.0);
    a[row.pos] = v;
    cands.push_back({v, row.doc, row.pos});
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
    if (x.value != y.value) return x.value > y.value;
    if (x.doc != y.doc) return x.doc < y.doc;
    return x.pos < y.pos;
  });

  FeatureEvidence ev;
  ev.feature = feature;
  ev.layer = layer;
  ev.firing_locations = cands.size();
  if (cands.empty()) return ev;

  auto make_window = [&](const Candidate& c) {
    const TokenDocument& d = *docs.at(c.doc);
    const std::size_t len = d.tokens.size();
    std::size_t start = 0;
    if (len >= kWindowTokens)
      start = std::min<std::size_t>(c.pos > kWindowTokens / 2 ? c.pos - kWindowTokens / 2 : 0, len - kWindowTokens);
    EvidenceWindow w;
    w.doc = c.doc;
    w.peak_pos = c.pos;
    w.start = static_cast<std::uint32_t>(start);
    w.peak = c.value;
    const auto& a = acts.at(c.doc);
    for (std::size_t k = 0; k < kWindowTokens; ++k) {
      const std::size_t p = start + k;
      w.tokens.push_back(p < len ? text(d.tokens[p]) : std::string());
      w.activations.push_back(p < len ? a[p] : 0.0);
    }
    return w;
  };
  auto overlap = [](const EvidenceWindow& x, const EvidenceWindow& y) -> std::size_t {
    if (x.doc != y.doc) return 0;
    const std::size_t lo = std::max(x.start, y.start);
    const std::size_t hi = std::min(x.start, y.start) + kWindowTokens;
    return hi > lo ? hi - lo : 0;
  };

  std::vector<EvidenceWindow> all;
  for (const auto& c : cands) all.push_back(make_window(c));
  std::vector<char> used(all.size(), 0);
  for (std::size_t i = 0; i < all.size() && ev.windows.size() < kEvidenceWindows; ++i) {
    const bool clash = std::any_of(ev.windows.begin(), ev.windows.end(),
                                   [&](const EvidenceWindow& w) { return 2 * overlap(w, all[i]) >= kWindowTokens; });
    if (!clash) {
      ev.windows.push_back(all[i]);
      used[i] = 1;
    }
  }
  // Short supply: overlapping but distinct windows first, then repeats.
  for (std::size_t i = 0; i < all.size() && ev.windows.size() < kEvidenceWindows; ++i) {
    if (used[i]) continue;
    const bool same = std::any_of(ev.windows.begin(), ev.windows.end(), [&](const EvidenceWindow& w) {
      return w.doc == all[i].doc && w.start == all[i].start;
    });
    if (same) continue;
    ev.windows.push_back(all[i]);
    ev.padded = true;
  }
  for (std::size_t k = 0; ev.windows.size() < kEvidenceWindows; ++k) {
    ev.windows.push_back(ev.windows[k]);
    ev.padded = true;
  }
  return ev;
}

// ---- prompts ----------------------------------------------------------------

const char* to_string(ScoreKind k) { return k == ScoreKind::complexity ? "complexity" : "consistency"; }

ScoreKind parse_score_kind(std::string_view s) {
  if (s == "complexity") return ScoreKind::complexity;
  if (s == "consistency") return ScoreKind::consistency;
  throw Error(ErrorKind::usage, "unknown score kind '" + std::string(s) + "'");
}

namespace {

constexpr const char* kIntro =
    "We are analyzing the activation levels of features in a neural network, where each feature activates "
    "certain tokens in a text. Each token's activation value indicates its relevance to the feature, with higher "
    "values showing stronger association. ";

constexpr const char* kConsider =
    "Consider the following activations for a feature in the neural network. Activation values are non-negative, "
    "with higher values indicating a stronger connection between the token and the feature. ";

constexpr const char* kComplexity =
    "Your task is to infer the common characteristic that these tokens collectively suggest based on their "
    "activation values and give this feature a complexity score based on the following scoring criteria:\n"
    "\n"
    "Complexity\n"
    "- 5: Rich feature firing on diverse contexts with an interesting unifying theme, e.g. “feelings of "
    "togetherness”\n"
    "- 4: Feature relating to high-level semantic structure, e.g. “return statements in code”\n"
    "- 3: Moderate complexity, such as a phrase, category, or tracking sentence structure e.g. “website "
    "URLs”\n"
    "- 2: Single word or token feature but including multiple languages or spelling, e.g. “mentions of "
    "dog”\n"
    "- 1: Single token feature, e.g. “the token ‘(’”\n"
    "\n";

constexpr const char* kComplexityAsk =
    "Don't list examples of words. You only need to give me a number! Just a number! It represents your score for "
    "feature complexity.";

constexpr const char* kConsistency =
    "Your task is to give this feature a monosemanticity score based on the following scoring criteria:\n"
    "\n"
    "Activation Consistency\n"
    "- 5: Clear pattern with no deviating examples\n"
    "- 4: Clear pattern with one or two deviating examples\n"
    "- 3: Clear overall pattern but quite a few examples not fitting that pattern\n"
    "- 2: Broad consistent theme but lacking structure\n"
    "- 1: No discernible pattern\n"
    "\n";

constexpr const char* kConsistencyAsk =
    "You only need to give me a number! Just a number! It represents your score for feature monosemanticity.";

std::string escape_token(const std::string& t) {
  std::string out;
  for (char ch : t) {
    switch (ch) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string prompt_preamble(ScoreKind kind) {
  std::string s = kIntro;
  s += kind == ScoreKind::complexity ? kComplexity : kConsistency;
  s += kConsider;
  s += kind == ScoreKind::complexity ? kComplexityAsk : kConsistencyAsk;
  return s;
}

std::string format_prompt(ScoreKind kind, const FeatureEvidence& evidence) {
  evidence.validate();
  std::string s = prompt_preamble(kind);
  s += "\n";
  char buf[64];
  for (std::size_t i = 0; i < evidence.windows.size(); ++i) {
    const auto& w = evidence.windows[i];
    s += "\nSample " + std::to_string(i + 1) + ":\n";
    for (std::size_t k = 0; k < kWindowTokens; ++k) {
      std::snprintf(buf, sizeof buf, "\t%.3f\n", w.activations[k]);
      s += escape_token(w.tokens[k]);
      s += buf;
    }
  }
  return s;
}

// ---- scores ---------------------------------------------------------------

ParsedScore parse_score(std::string_view r) {
  std::optional<long> first;
  for (std::size_t i = 0; i < r.size();) {
    if (!std::isdigit(static_cast<unsigned char>(r[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < r.size() && std::isdigit(static_cast<unsigned char>(r[j]))) ++j;
    const bool negative = i > 0 && r[i - 1] == '-';
    const std::string_view digits = r.substr(i, j - i);
    const long v = digits.size() > 6 ? 1000000 : std::stol(std::string(digits));
    const long signed_v = negative ? -v : v;
    if (signed_v >= 1 && signed_v <= 5) return {static_cast<int>(signed_v), false};
    if (!first) first = signed_v;
    i = j;
  }
  if (first) return {static_cast<int>(std::clamp(*first, 1L, 5L)), true};
  return {};
}

nlohmann::json ScoreRecord::to_json() const {
  nlohmann::json j = {{"feature", feature}, {"layer", layer},         {"kind", to_string(kind)},
                      {"clamped", clamped}, {"status", status},       {"raw", raw},
                      {"model", model},     {"timestamp", timestamp}, {"prompt_hash", prompt_hash}};
  j["score"] = score ? nlohmann::json(*score) : nlohmann::json(nullptr);
  return j;
}

ScoreRecord ScoreRecord::from_json(const nlohmann::json& j) {
  ScoreRecord r;
  r.feature = j.at("feature").get<std::size_t>();
  r.layer = j.at("layer").get<int>();
  r.kind = parse_score_kind(j.at("kind").get<std::string>());
  if (!j.at("score").is_null()) r.score = j.at("score").get<int>();
  r.clamped = j.at("clamped").get<bool>();
  r.status = j.at("status").get<std::string>();
  r.raw = j.at("raw").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.timestamp = j.at("timestamp").get<std::string>();
  r.prompt_hash = j.at("prompt_hash").get<std::string>();
  return r;
}

// ---- client ---------------------------------------------------------------

ChatClientConfig ChatClientConfig::from_json(const nlohmann::json& j) {
  ChatClientConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "base_url") c.base_url = v.get<std::string>();
    else if (k == "path") c.path = v.get<std::string>();
    else if (k == "model") c.model = v.get<std::string>();
    else if (k == "api_key_env") c.api_key_env = v.get<std::string>();
    else if (k == "max_retries") c.max_retries = v.get<int>();
    else if (k == "backoff_ms") c.backoff_ms = v.get<int>();
    else if (k == "timeout_s") c.timeout_s = v.get<int>();
    else if (k == "concurrency") c.concurrency = v.get<std::size_t>();
    else if (k == "temperature") c.temperature = v.get<double>();
    else throw Error(ErrorKind::config, "autointerp client: unknown key '" + k + "'");
  }
  UNIV_CHECK(c.max_retries >= 0 && c.backoff_ms >= 0 && c.timeout_s > 0 && c.concurrency > 0, config,
             "autointerp client: retries/backoff must be >= 0, timeout and concurrency > 0");
  return c;
}

nlohmann::json ChatClientConfig::to_json() const {
  return {{"base_url", base_url}, {"path", path},         {"model", model},
          {"api_key_env", api_key_env}, {"max_retries", max_retries}, {"backoff_ms", backoff_ms},
          {"timeout_s", timeout_s}, {"concurrency", concurrency}, {"temperature", temperature}};
}

std::string chat_completion(const ChatClientConfig& cfg, const std::string& prompt) {
  httplib::Client cli(cfg.base_url);
  cli.set_connection_timeout(cfg.timeout_s, 0);
  cli.set_read_timeout(cfg.timeout_s, 0);
  httplib::Headers headers;
  if (const char* key = std::getenv(cfg.api_key_env.c_str()); key != nullptr && *key != '\0')
    headers.emplace("Authorization", std::string("Bearer ") + key);
  const nlohmann::json body = {{"model", cfg.model},
                               {"temperature", cfg.temperature},
                               {"messages", {{{"role", "user"}, {"content", prompt}}}}};
  const std::string payload = body.dump();

  std::string last_error;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg.backoff_ms << (attempt - 1)));
    auto res = cli.Post(cfg.path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    UNIV_CHECK(res->status == 200, service, "chat endpoint returned HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::service, std::string("chat endpoint: malformed response: ") + e.what());
    }
  }
  throw Error(ErrorKind::service, "chat endpoint unreachable after " + std::to_string(cfg.max_retries) +
                                      " retries (" + last_error + ")");
}

// ---- cache ----------------------------------------------------------------

ScoreCache::ScoreCache(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(path_);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const ScoreRecord r = ScoreRecord::from_json(nlohmann::json::parse(line));
      entries_[key(r.layer, r.feature, r.kind, r.prompt_hash)] = r;
    } catch (const std::exception& e) {
      throw Error(ErrorKind::value, path_.string() + ":" + std::to_string(n) + ": bad cache line: " + e.what());
    }
  }
}

std::string ScoreCache::key(int layer, std::size_t feature, ScoreKind kind, const std::string& hash) {
  return std::to_string(layer) + "/" + std::to_string(feature) + "/" + to_string(kind) + "/" + hash;
}

std::optional<ScoreRecord> ScoreCache::find(int layer, std::size_t feature, ScoreKind kind,
                                            const std::string& hash) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key(layer, feature, kind, hash));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ScoreCache::put(const ScoreRecord& r) {
  std::lock_guard lock(mu_);
  entries_[key(r.layer, r.feature, r.kind, r.prompt_hash)] = r;
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  out << r.to_json().dump() << '\n';
  UNIV_CHECK(static_cast<bool>(out), io, "cannot append to score cache " + path_.string());
}

std::size_t ScoreCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::string prompt_hash(const std::string& prompt) { return crc64_hex(prompt); }

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

ScoreRecord score_feature(const ChatClientConfig& cfg, ScoreCache* cache, const FeatureEvidence& evidence,
                          ScoreKind kind) {
  ScoreRecord r;
  r.feature = evidence.feature;
  r.layer = evidence.layer;
  r.kind = kind;
  r.model = cfg.model;
  if (evidence.empty()) {
    r.status = "empty-evidence";
    r.timestamp = utc_now();
    return r;
  }
  const std::string prompt = format_prompt(kind, evidence);
  r.prompt_hash = prompt_hash(prompt);
  if (cache) {
    if (auto hit = cache->find(r.layer, r.feature, kind, r.prompt_hash)) return *hit;
  }
  r.raw = chat_completion(cfg, prompt);
  const ParsedScore p = parse_score(r.raw);
  r.score = p.score;
  r.clamped = p.clamped;
  r.status = p.score ? "ok" : "score-missing";
  r.timestamp = utc_now();
  if (cache) cache->put(r);
  return r;
}

std::vector<ScoreRecord> score_features(const ChatClientConfig& cfg, ScoreCache* cache,
                                        const std::vector<FeatureEvidence>& evidence, ScoreKind kind) {
  std::vector<ScoreRecord> out(evidence.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(evidence.size());
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < evidence.size();) {
      try {
        out[i] = score_feature(cfg, cache, evidence[i], kind);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::min(cfg.concurrency, evidence.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---- report ---------------------------------------------------------------

nlohmann::json ScoreReport::to_json() const {
  nlohmann::json bj = nlohmann::json::array();
  for (const auto& b : bins) {
    bj.push_back({{"score", b.score},   {"count", b.count}, {"mean", b.mean},     {"min", b.min},
                  {"q1", b.q1},         {"median", b.median}, {"q3", b.q3},       {"max", b.max},
                  {"below_threshold", b.below_threshold}});
  }
  return {{"kind", to_string(kind)},
          {"threshold", threshold},
          {"bins", bj},
          {"joined", joined},
          {"missing_scores", missing_scores},
          {"undefined_mppc", undefined_mppc},
          {"below_threshold", below_threshold},
          {"above_threshold", above_threshold}};
}

std::string ScoreReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "score,count,mean,min,q1,median,q3,max,below_threshold\n";
  for (const auto& b : bins) {
    out << b.score << ',' << b.count << ',' << b.mean << ',' << b.min << ',' << b.q1 << ',' << b.median << ','
        << b.q3 << ',' << b.max << ',' << b.below_threshold << '\n';
  }
  return out.str();
}

ScoreReport score_vs_mppc_report(const std::vector<ScoreRecord>& scores, const MatchTable& table, double threshold) {
  std::map<std::pair<int, std::size_t>, const MatchEntry*> by_id;
  for (const auto& e : table.entries) by_id[{e.layer_a, e.feature_a}] = &e;

  ScoreReport rep;
  rep.threshold = threshold;
  if (!scores.empty()) rep.kind = scores.front().kind;
  std::map<int, std::vector<double>> bins;
  for (const auto& s : scores) {
    UNIV_CHECK(s.kind == rep.kind, config, "score report: mixed score kinds");
    auto it = by_id.find({s.layer, s.feature});
    if (it == by_id.end()) continue;
    ++rep.joined;
    if (!s.score) {
      ++rep.missing_scores;
      continue;
    }
    if (!it->second->defined) {
      ++rep.undefined_mppc;
      continue;
    }
    bins[*s.score].push_back(it->second->rho);
  }
  UNIV_CHECK(rep.joined > 0, value, "score report: no scored feature joins the match table");
  for (auto& [score, v] : bins) {
    std::sort(v.begin(), v.end());
    BinSummary b;
    b.score = score;
    b.count = v.size();
    double sum = 0.0;
    for (double x : v) {
      sum += x;
      b.below_threshold += x < threshold;
    }
    b.mean = sum / double(v.size());
    b.min = v.front();
    b.max = v.back();
    b.q1 = quantile_sorted(v, 0.25);
    b.median = quantile_sorted(v, 0.5);
    b.q3 = quantile_sorted(v, 0.75);
    rep.below_threshold += b.below_threshold;
    rep.above_threshold += b.count - b.below_threshold;
    rep.bins.push_back(b);
  }
  return rep;
}

}  // namespace univlab
