#pragma once

// Max pairwise Pearson correlation between two index-aligned feature sets,
// computed from streamed sufficient statistics in memory-bounded tiles.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "univlab/harvest.hpp"
#include "univlab/models.hpp"
#include "univlab/sae.hpp"

namespace univlab {

// Sufficient statistics for one (A block x B block) tile over global feature
// ranges [a_lo, a_hi) x [b_lo, b_hi).
class PearsonAccumulator {
 public:
  PearsonAccumulator() = default;
  PearsonAccumulator(std::size_t a_lo, std::size_t a_hi, std::size_t b_lo, std::size_t b_hi);

  // Adds tokens [t0, t1) of both sides. Sparse co-active updates when both
  // sides are at most 5% dense, outer-product updates over a densified B row
  // otherwise.
  void accumulate(const FeatureMatrix& a, const FeatureMatrix& b, std::size_t t0, std::size_t t1);
  void accumulate(const FeatureMatrix& a, const FeatureMatrix& b) { accumulate(a, b, 0, a.size()); }
  void merge(const PearsonAccumulator& other);

  std::size_t fa() const { return a_hi_ - a_lo_; }
  std::size_t fb() const { return b_hi_ - b_lo_; }
  std::size_t a_lo() const { return a_lo_; }
  std::size_t b_lo() const { return b_lo_; }
  std::uint64_t n() const { return n_; }

  // Local indices. Undefined (zero variance on either side) gives NaN.
  double rho(std::size_t i, std::size_t j) const;
  bool defined_a(std::size_t i) const;
  bool defined_b(std::size_t j) const;

  const std::vector<double>& sum_x() const { return sx_; }
  const std::vector<double>& sum_x2() const { return sxx_; }
  const std::vector<double>& sum_y() const { return sy_; }
  const std::vector<double>& sum_y2() const { return syy_; }
  const std::vector<double>& sum_xy() const { return sxy_; }

 private:
  std::size_t a_lo_ = 0, a_hi_ = 0, b_lo_ = 0, b_hi_ = 0;
  std::uint64_t n_ = 0;
  std::vector<double> sx_, sxx_, sy_, syy_, sxy_;
};

struct MatchEntry {
  std::size_t feature_a = 0;  // index within its layer
  int layer_a = 0;
  std::size_t best_feature_b = 0;
  int layer_b = 0;
  double rho = 0.0;
  bool defined = false;
};

struct MatchTable {
  std::string direction = "a->b";
  std::string mode = "sae";
  std::uint64_t n_tokens = 0;
  std::vector<MatchEntry> entries;

  std::size_t defined_count() const;
  std::size_t undefined_count() const { return entries.size() - defined_count(); }
  double mean_rho() const;  // over defined entries
  std::size_t count_above(double threshold) const;
  nlohmann::json summary() const;

  friend bool operator==(const MatchTable&, const MatchTable&) = default;
};

// Single-accumulator table: the max runs over every B feature in the tile.
// All features are reported as layer 0.
MatchTable finalize_mppc(const PearsonAccumulator& acc);

struct FeatureSource {
  int layer = 0;
  FeatureMatrix features;
};

enum class MppcMode { sae, neuron };
const char* to_string(MppcMode m);

struct CorrelationJobSpec {
  std::vector<FeatureSource> a;
  std::vector<FeatureSource> b;
  std::string direction = "a->b";
  MppcMode mode = MppcMode::sae;
  bool same_layer_only = false;            // restrict the max to the same layer index
  std::size_t memory_budget = 1ULL << 30;  // bytes for cross-product tiles in flight
  std::size_t tile_a = 0;                  // 0 derives tile sizes from the budget
  std::size_t tile_b = 0;
  std::size_t token_chunk = 8192;
};

// Swaps sides and flips the direction tag ("x->y" becomes "y->x").
CorrelationJobSpec reverse(const CorrelationJobSpec& spec);

// Tiles run in parallel; the per-feature max merges tiles in ascending B order
// and keeps the lowest index on ties.
MatchTable run_mppc(const CorrelationJobSpec& spec);

void write_match_csv(const MatchTable& t, const std::filesystem::path& path);
MatchTable read_match_csv(const std::filesystem::path& path);
// Binary summary: rho / best index / layer tensors plus summary() as meta.
void save_match_summary(const MatchTable& t, const std::filesystem::path& path);

struct DifferenceReport {
  std::vector<double> deltas;  // NaN where either side is undefined
  std::size_t n_defined = 0;
  std::array<double, 5> quantiles{};  // 5th, 25th, 50th, 75th, 95th percentiles
  double share_small = 0.0;           // |delta| < 0.05
  std::vector<double> bin_edges;
  std::vector<std::size_t> histogram;

  nlohmann::json to_json() const;
};

// delta_i = rho_i(main) - rho_i(skyline); histogram over [-2, 2] in `bins` bins.
DifferenceReport mppc_difference(const MatchTable& main, const MatchTable& skyline, std::size_t bins = 40);

// counts(la, lb): side-A features of layer la whose best match is in layer lb.
Matrix depth_histogram(const MatchTable& t, std::size_t layers_a, std::size_t layers_b);

// Raw neuron activations of every layer (MLP neurons or post-SiLU channels),
// harvested in document order on both models.
CorrelationJobSpec neuron_mode_sources(const Model& a, const Model& b, const std::vector<TokenDocument>& corpus,
                                       std::optional<TokenId> eos_id = std::nullopt);

enum class SkylineKind { model_seed_variant, sae_seed_variant };
const char* to_string(SkylineKind k);
SkylineKind parse_skyline_kind(std::string_view s);

struct SkylineAssets {
  std::vector<FeatureSource> main;     // features of the reference model
  std::vector<FeatureSource> variant;  // seed-variant model features or second SAE set
};

CorrelationJobSpec skyline_protocols(SkylineKind kind, const SkylineAssets& assets, bool reversed = false);

// Planted codes as a feature matrix aligned with `rows`.
FeatureMatrix codes_as_features(const SparseCodes& codes, const std::vector<ActivationRow>& rows);

// Planted code j is recovered by the side-A feature most correlated with it;
// its MPPC is that feature's entry in the A->B table.
struct PlantedRecovery {
  std::vector<std::size_t> recovered;
  std::vector<double> recovery_rho;  // code j vs its recovering feature
  std::vector<double> mppc;          // NaN when undefined
  double mean_recovery = 0.0;
  double mean_mppc = 0.0;            // over defined entries
  double frac_above = 0.0;           // share of planted features with mppc > threshold
  double threshold = 0.8;

  nlohmann::json to_json() const;
};

PlantedRecovery planted_recovery(const FeatureMatrix& codes, const FeatureMatrix& features_a,
                                 const MatchTable& a_to_b, double threshold = 0.8);

}  // namespace univlab
