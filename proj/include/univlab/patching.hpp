#pragma once

// Three-pass path patching and the induction / IOI sweeps built on it.
//
//   pass 1: clean input, every activation captured
//   pass 2: corrupted input, patched node captured
//   pass 3: clean input, patched node overwritten with its corrupted value,
//           the policy's freeze set pinned to pass-1 values
//   delta = metric(pass 3) - metric(pass 1)

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "univlab/models.hpp"
#include "univlab/tasks.hpp"

namespace univlab {

enum class FreezePolicy {
  other_states,  // every other layer's SSM state reads its clean values
  direct,        // every other layer's block output is clean: node -> logits only
  none,          // full downstream recomputation
};

const char* to_string(FreezePolicy p);
FreezePolicy parse_freeze_policy(std::string_view s);

struct PatchNode {
  HookSite site;
  std::vector<std::size_t> positions;  // empty: every position
};

struct LogitMetric {
  std::size_t position = 0;
  TokenId positive = 0;
  std::optional<TokenId> negative;
};

struct PatchSpec {
  PatchNode node;
  FreezePolicy policy = FreezePolicy::other_states;
  LogitMetric metric;
  std::vector<HookSite> extra_frozen;
};

// Sites pinned to clean values, and sites that must be recomputed for the
// patched value to reach the metric.
struct FreezePlan {
  std::set<HookSite> frozen;
  std::set<HookSite> recomputed;
};

// Throws contract error when a site would be both frozen and recomputed, or
// when the node does not exist in the model.
FreezePlan plan_freeze(const Model& model, const PatchSpec& spec);

// logit(positive) - logit(negative), or logit(positive) alone.
double logit_diff(std::span<const double> logits, TokenId positive, std::optional<TokenId> negative = std::nullopt);

// Logit of B at A2 for induction tasks, logit(IO) - logit(S) at the last
// token for IOI tasks.
LogitMetric task_metric(const TaskInstance& task);

double path_patch(const Model& model, const TaskInstance& task, const PatchSpec& spec);

// Passes 1 and 2 supplied by the caller, so one pair serves many nodes.
double path_patch(const Model& model, const PatchSpec& spec, const TaskInstance& task, const ForwardTrace& clean,
                  const ForwardTrace& corrupted);

struct SweepResult {
  std::string name;
  std::string row_key;  // "distance" or "layer"
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Matrix mean;  // rows x cols, arithmetic mean of per-task deltas
  std::size_t samples = 0;  // tasks per cell
  FreezePolicy policy = FreezePolicy::other_states;
  std::string model_hash;
  std::string corruption;

  double at(std::string_view row, std::string_view col) const;
  std::size_t col_index(std::string_view col) const;
  nlohmann::json metadata() const;
  std::string to_csv() const;
};

void write_sweep(const SweepResult& r, const std::filesystem::path& csv_path);  // plus <csv>.json

// Tasks at each distance, corrupted by `corruption`, all from one seed.
std::vector<TaskInstance> make_induction_suite(std::size_t vocab, std::span<const std::size_t> distances,
                                               std::size_t per_distance, Corruption corruption,
                                               std::uint64_t seed, TokenId bos = 0);
std::vector<TaskInstance> make_ioi_suite(std::size_t count, Corruption corruption, std::uint64_t seed);

// h at A2 - 1 for each layer; rows are distances, columns layers.
SweepResult sweep_states(const Model& model, std::span<const TaskInstance> tasks, std::span<const int> layers,
                         FreezePolicy policy = FreezePolicy::other_states);

// c at A1, B1, B1+1, B1+2, B1+3 of one layer; rows are distances.
SweepResult sweep_ssm_inputs(const Model& model, std::span<const TaskInstance> tasks, int layer,
                             FreezePolicy policy = FreezePolicy::other_states);

// x at A1, B1, B1+1 of one layer with the tasks re-corrupted by `corruption`.
SweepResult sweep_conv_inputs(const Model& model, std::span<const TaskInstance> tasks, int layer,
                              Corruption corruption, FreezePolicy policy = FreezePolicy::other_states,
                              std::uint64_t seed = 0);

// Any site kind at positions given as label offsets ("B1", "B1+1", ...).
SweepResult sweep_positions(const Model& model, std::span<const TaskInstance> tasks, HookSite site,
                            std::span<const std::string> positions, FreezePolicy policy = FreezePolicy::other_states);

// c over every layer at IO, IO+1, S1, S1+1, S2, S2+1; rows are layers.
SweepResult ioi_sweep(const Model& model, std::span<const TaskInstance> tasks,
                      FreezePolicy policy = FreezePolicy::other_states);

enum class OffByOne { off_by_one, same_position, inconclusive };
const char* to_string(OffByOne v);

struct OffByOneReport {
  std::string source;
  double same = 0.0;  // max over rows of |delta| at t
  double next = 0.0;  // max over rows of |delta| at t+1
  OffByOne verdict = OffByOne::inconclusive;
};

// Needs columns "<label>" and "<label>+1" for each source label.
std::vector<OffByOneReport> off_by_one_detect(const SweepResult& sweep, std::span<const std::string> labels,
                                              double factor = 5.0);

}  // namespace univlab
