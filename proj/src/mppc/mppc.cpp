#include "univlab/mppc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "univlab/error.hpp"
#include "univlab/parallel.hpp"
#include "univlab/simd.hpp"
#include "univlab/tensor_io.hpp"

namespace univlab {

namespace {

constexpr double kSparseDensity = 0.05;
constexpr double kVarianceFloor = 1e-12;

// Centered sum of squares with a relative floor: anything at or below
// 1e-12 * sum(x^2) counts as constant.
double centered_ss(double s, double s2, double n) {
  const double v = s2 - s * s / n;
  return v <= kVarianceFloor * s2 ? 0.0 : v;
}

// [first, last) of the CSR entries of row t whose index lies in [lo, hi).
std::pair<std::size_t, std::size_t> row_range(const FeatureMatrix& m, std::size_t t, std::size_t lo, std::size_t hi) {
  const auto b = m.index.begin() + static_cast<std::ptrdiff_t>(m.offsets[t]);
  const auto e = m.index.begin() + static_cast<std::ptrdiff_t>(m.offsets[t + 1]);
  const auto first = std::lower_bound(b, e, static_cast<std::uint32_t>(lo));
  const auto last = std::lower_bound(first, e, static_cast<std::uint32_t>(std::min<std::size_t>(hi, UINT32_MAX)));
  return {static_cast<std::size_t>(first - m.index.begin()), static_cast<std::size_t>(last - m.index.begin())};
}

}  // namespace

PearsonAccumulator::PearsonAccumulator(std::size_t a_lo, std::size_t a_hi, std::size_t b_lo, std::size_t b_hi)
    : a_lo_(a_lo), a_hi_(a_hi), b_lo_(b_lo), b_hi_(b_hi) {
  UNIV_CHECK(a_lo <= a_hi && b_lo <= b_hi, contract, "pearson accumulator: inverted block range");
  sx_.assign(fa(), 0.0);
  sxx_.assign(fa(), 0.0);
  sy_.assign(fb(), 0.0);
  syy_.assign(fb(), 0.0);
  sxy_.assign(fa() * fb(), 0.0);
}

void PearsonAccumulator::accumulate(const FeatureMatrix& a, const FeatureMatrix& b, std::size_t t0, std::size_t t1) {
  UNIV_CHECK(a.size() == b.size(), shape,
             "mppc: misaligned sides (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " tokens)");
  UNIV_CHECK(t0 <= t1 && t1 <= a.size(), contract, "mppc: token range outside the stream");
  UNIV_CHECK(a_hi_ <= a.n_features && b_hi_ <= b.n_features, contract, "mppc: block exceeds feature count");
  const std::size_t nb = fb();
  const bool sparse = a.density() <= kSparseDensity && b.density() <= kSparseDensity;
  std::vector<double> ydense(sparse ? 0 : nb, 0.0);
  for (std::size_t t = t0; t < t1; ++t) {
    const auto [ab, ae] = row_range(a, t, a_lo_, a_hi_);
    const auto [bb, be] = row_range(b, t, b_lo_, b_hi_);
    for (std::size_t k = ab; k < ae; ++k) {
      sx_[a.index[k] - a_lo_] += a.value[k];
      sxx_[a.index[k] - a_lo_] += a.value[k] * a.value[k];
    }
    for (std::size_t k = bb; k < be; ++k) {
      sy_[b.index[k] - b_lo_] += b.value[k];
      syy_[b.index[k] - b_lo_] += b.value[k] * b.value[k];
    }
    if (sparse) {
      for (std::size_t k = ab; k < ae; ++k) {
        double* row = sxy_.data() + (a.index[k] - a_lo_) * nb;
        const double x = a.value[k];
        for (std::size_t q = bb; q < be; ++q) row[b.index[q] - b_lo_] += x * b.value[q];
      }
    } else if (ae > ab && be > bb) {
      for (std::size_t q = bb; q < be; ++q) ydense[b.index[q] - b_lo_] = b.value[q];
      for (std::size_t k = ab; k < ae; ++k)
        simd::axpy(a.value[k], ydense.data(), sxy_.data() + (a.index[k] - a_lo_) * nb, nb);
      for (std::size_t q = bb; q < be; ++q) ydense[b.index[q] - b_lo_] = 0.0;
    }
  }
  n_ += t1 - t0;
}

void PearsonAccumulator::merge(const PearsonAccumulator& o) {
  UNIV_CHECK(o.a_lo_ == a_lo_ && o.a_hi_ == a_hi_ && o.b_lo_ == b_lo_ && o.b_hi_ == b_hi_, contract,
             "pearson accumulator: merging different blocks");
  n_ += o.n_;
  auto add = [](std::vector<double>& d, const std::vector<double>& s) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  };
  add(sx_, o.sx_);
  add(sxx_, o.sxx_);
  add(sy_, o.sy_);
  add(syy_, o.syy_);
  add(sxy_, o.sxy_);
}

bool PearsonAccumulator::defined_a(std::size_t i) const {
  return n_ >= 2 && centered_ss(sx_[i], sxx_[i], double(n_)) > 0.0;
}

bool PearsonAccumulator::defined_b(std::size_t j) const {
  return n_ >= 2 && centered_ss(sy_[j], syy_[j], double(n_)) > 0.0;
}

double PearsonAccumulator::rho(std::size_t i, std::size_t j) const {
  const double n = double(n_);
  const double va = centered_ss(sx_[i], sxx_[i], n);
  const double vb = centered_ss(sy_[j], syy_[j], n);
  if (n_ < 2 || va <= 0.0 || vb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double cov = sxy_[i * fb() + j] - sx_[i] * sy_[j] / n;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

// ---- match tables --------------------------------------------------------------

std::size_t MatchTable::defined_count() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.defined; }));
}

double MatchTable::mean_rho() const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.defined) s += e.rho, ++n;
  return n ? s / double(n) : std::numeric_limits<double>::quiet_NaN();
}

std::size_t MatchTable::count_above(double threshold) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.defined && e.rho > threshold; }));
}

nlohmann::json MatchTable::summary() const {
  const double m = mean_rho();
  return {{"direction", direction},
          {"mode", mode},
          {"n_tokens", n_tokens},
          {"features", entries.size()},
          {"defined", defined_count()},
          {"undefined", undefined_count()},
          {"mean_rho", std::isnan(m) ? nlohmann::json(nullptr) : nlohmann::json(m)},
          {"above_0.8", count_above(0.8)}};
}

namespace {

struct Best {
  std::size_t j = 0;  // global B index
  double rho = 0.0;
  bool defined = false;
};

// Per-A-feature best over the tile; ascending j with strict improvement keeps
// the lowest index on ties.
std::vector<Best> tile_best(const PearsonAccumulator& acc) {
  std::vector<Best> out(acc.fa());
  std::vector<char> ok_b(acc.fb());
  for (std::size_t j = 0; j < acc.fb(); ++j) ok_b[j] = acc.defined_b(j);
  for (std::size_t i = 0; i < acc.fa(); ++i) {
    if (!acc.defined_a(i)) continue;
    for (std::size_t j = 0; j < acc.fb(); ++j) {
      if (!ok_b[j]) continue;
      const double r = acc.rho(i, j);
      if (!out[i].defined || r > out[i].rho) out[i] = {acc.b_lo() + j, r, true};
    }
  }
  return out;
}

struct Side {
  FeatureMatrix merged;
  std::vector<int> layer;         // per global feature
  std::vector<std::size_t> local; // per global feature
};

Side merge_side(const std::vector<FeatureSource>& sources, const char* which) {
  UNIV_CHECK(!sources.empty(), config, std::string("mppc: side ") + which + " has no feature sources");
  Side s;
  const std::size_t n = sources.front().features.size();
  for (const auto& src : sources) {
    src.features.validate();
    UNIV_CHECK(src.features.size() == n && src.features.rows == sources.front().features.rows, config,
               std::string("mppc: side ") + which + " sources are not index-aligned");
    for (std::size_t j = 0; j < src.features.n_features; ++j) {
      s.layer.push_back(src.layer);
      s.local.push_back(j);
    }
  }
  s.merged.source = which;
  s.merged.n_features = s.layer.size();
  s.merged.rows = sources.front().features.rows;
  for (std::size_t t = 0; t < n; ++t) {
    std::size_t base = 0;
    for (const auto& src : sources) {
      const auto& m = src.features;
      for (std::size_t k = m.offsets[t]; k < m.offsets[t + 1]; ++k) {
        s.merged.index.push_back(static_cast<std::uint32_t>(base + m.index[k]));
        s.merged.value.push_back(m.value[k]);
      }
      base += m.n_features;
    }
    s.merged.offsets.push_back(s.merged.index.size());
  }
  return s;
}

MatchTable run_cross(const CorrelationJobSpec& spec) {
  const Side a = merge_side(spec.a, "A");
  const Side b = merge_side(spec.b, "B");
  UNIV_CHECK(a.merged.size() == b.merged.size() && a.merged.rows == b.merged.rows, config,
             "mppc: sides are not index-aligned (" + std::to_string(a.merged.size()) + " vs " +
                 std::to_string(b.merged.size()) + " tokens)");
  const std::size_t n = a.merged.size();
  UNIV_CHECK(n >= 2, value, "mppc: need at least two aligned tokens");
  const std::size_t fa = a.merged.n_features, fb = b.merged.n_features;
  UNIV_CHECK(fa > 0 && fb > 0, config, "mppc: empty feature set");

  std::size_t ta = spec.tile_a, tb = spec.tile_b;
  if (!ta || !tb) {
    const std::size_t per_tile = std::max<std::size_t>(8, spec.memory_budget / std::max<std::size_t>(1, num_threads()));
    const std::size_t cells = per_tile / sizeof(double);
    tb = tb ? tb : std::min(fb, std::max<std::size_t>(1, cells));
    ta = ta ? ta : std::min(fa, std::max<std::size_t>(1, cells / tb));
  }
  const std::size_t na = (fa + ta - 1) / ta, nbt = (fb + tb - 1) / tb;
  std::vector<std::vector<Best>> results(na * nbt);
  const std::size_t chunk = std::max<std::size_t>(1, spec.token_chunk);
  parallel_for(na * nbt, [&](std::size_t tile) {
    const std::size_t ia = tile / nbt, ib = tile % nbt;
    PearsonAccumulator acc(ia * ta, std::min(fa, ia * ta + ta), ib * tb, std::min(fb, ib * tb + tb));
    for (std::size_t t0 = 0; t0 < n; t0 += chunk) acc.accumulate(a.merged, b.merged, t0, std::min(n, t0 + chunk));
    results[tile] = tile_best(acc);
  });

  MatchTable table;
  table.direction = spec.direction;
  table.mode = to_string(spec.mode);
  table.n_tokens = n;
  table.entries.resize(fa);
  for (std::size_t ia = 0; ia < na; ++ia) {
    for (std::size_t ib = 0; ib < nbt; ++ib) {
      const auto& r = results[ia * nbt + ib];
      for (std::size_t i = 0; i < r.size(); ++i) {
        MatchEntry& e = table.entries[ia * ta + i];
        if (r[i].defined && (!e.defined || r[i].rho > e.rho)) {
          e.defined = true;
          e.rho = r[i].rho;
          e.best_feature_b = r[i].j;
        }
      }
    }
  }
  for (std::size_t i = 0; i < fa; ++i) {
    MatchEntry& e = table.entries[i];
    e.feature_a = a.local[i];
    e.layer_a = a.layer[i];
    if (e.defined) {
      e.layer_b = b.layer[e.best_feature_b];
      e.best_feature_b = b.local[e.best_feature_b];
    } else {
      e.best_feature_b = 0;
      e.layer_b = 0;
      e.rho = 0.0;
    }
  }
  return table;
}

}  // namespace

MatchTable finalize_mppc(const PearsonAccumulator& acc) {
  UNIV_CHECK(acc.n() >= 2, value, "finalize_mppc: need n >= 2 tokens, have " + std::to_string(acc.n()));
  MatchTable t;
  t.n_tokens = acc.n();
  const auto best = tile_best(acc);
  for (std::size_t i = 0; i < best.size(); ++i) {
    MatchEntry e;
    e.feature_a = acc.a_lo() + i;
    e.defined = best[i].defined;
    if (e.defined) {
      e.best_feature_b = best[i].j;
      e.rho = best[i].rho;
    }
    t.entries.push_back(e);
  }
  return t;
}

const char* to_string(MppcMode m) { return m == MppcMode::sae ? "sae" : "neuron"; }

CorrelationJobSpec reverse(const CorrelationJobSpec& spec) {
  CorrelationJobSpec r = spec;
  std::swap(r.a, r.b);
  const auto arrow = spec.direction.find("->");
  r.direction = arrow == std::string::npos
                    ? spec.direction + " (reverse)"
                    : spec.direction.substr(arrow + 2) + "->" + spec.direction.substr(0, arrow);
  return r;
}

MatchTable run_mppc(const CorrelationJobSpec& spec) {
  if (!spec.same_layer_only) return run_cross(spec);
  MatchTable out;
  out.direction = spec.direction;
  out.mode = to_string(spec.mode);
  for (const auto& src : spec.a) {
    const auto it = std::find_if(spec.b.begin(), spec.b.end(), [&](const auto& s) { return s.layer == src.layer; });
    UNIV_CHECK(it != spec.b.end(), config,
               "mppc: same-layer mode but side B has no layer " + std::to_string(src.layer));
    CorrelationJobSpec sub = spec;
    sub.same_layer_only = false;
    sub.a = {src};
    sub.b = {*it};
    MatchTable part = run_cross(sub);
    out.n_tokens = part.n_tokens;
    out.entries.insert(out.entries.end(), part.entries.begin(), part.entries.end());
  }
  return out;
}

// ---- files ---------------------------------------------------------------------

void write_match_csv(const MatchTable& t, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(17);
  os << "feature_a,layer_a,best_feature_b,layer_b,rho\n";
  for (const auto& e : t.entries) {
    os << e.feature_a << ',' << e.layer_a << ',';
    if (e.defined)
      os << e.best_feature_b << ',' << e.layer_b << ',' << e.rho << '\n';
    else
      os << ",,undefined\n";
  }
  write_file_atomic(path, os.str());
}

MatchTable read_match_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  UNIV_CHECK(in.good(), io, "cannot open match table " + path.string());
  std::string line;
  std::getline(in, line);
  UNIV_CHECK(line == "feature_a,layer_a,best_feature_b,layer_b,rho", value,
             path.string() + ": unexpected match table header");
  MatchTable t;
  for (std::size_t ln = 2; std::getline(in, line); ++ln) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    UNIV_CHECK(f.size() == 5, value, path.string() + ":" + std::to_string(ln) + ": expected 5 columns");
    try {
      MatchEntry e;
      e.feature_a = std::stoul(f[0]);
      e.layer_a = std::stoi(f[1]);
      e.defined = f[4] != "undefined";
      if (e.defined) {
        e.best_feature_b = std::stoul(f[2]);
        e.layer_b = std::stoi(f[3]);
        e.rho = std::stod(f[4]);
      }
      t.entries.push_back(e);
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::value, path.string() + ":" + std::to_string(ln) + ": malformed number");
    }
  }
  return t;
}

void save_match_summary(const MatchTable& t, const std::filesystem::path& path) {
  TensorFile tf;
  tf.meta = t.summary();
  tf.meta["format"] = "univlab-match-summary";
  const std::size_t n = t.entries.size();
  std::vector<double> rho(n), best(n), la(n), lb(n), fa(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = t.entries[i];
    fa[i] = double(e.feature_a);
    la[i] = e.layer_a;
    rho[i] = e.defined ? e.rho : std::numeric_limits<double>::quiet_NaN();
    best[i] = e.defined ? double(e.best_feature_b) : -1.0;
    lb[i] = e.defined ? e.layer_b : -1.0;
  }
  tf.tensors = {{"feature_a", {n}, fa}, {"layer_a", {n}, la}, {"best_feature_b", {n}, best},
                {"layer_b", {n}, lb},   {"rho", {n}, rho}};
  save_tensor_file(tf, path);
}

// ---- reports -------------------------------------------------------------------

nlohmann::json DifferenceReport::to_json() const {
  return {{"n_defined", n_defined},
          {"quantiles", {{"p05", quantiles[0]}, {"p25", quantiles[1]}, {"p50", quantiles[2]},
                         {"p75", quantiles[3]}, {"p95", quantiles[4]}}},
          {"share_abs_delta_below_0.05", share_small},
          {"bin_edges", bin_edges},
          {"histogram", histogram}};
}

DifferenceReport mppc_difference(const MatchTable& main, const MatchTable& skyline, std::size_t bins) {
  UNIV_CHECK(main.entries.size() == skyline.entries.size(), config,
             "mppc_difference: tables cover different feature sets (" + std::to_string(main.entries.size()) + " vs " +
                 std::to_string(skyline.entries.size()) + ")");
  UNIV_CHECK(bins > 0, config, "mppc_difference: need at least one histogram bin");
  DifferenceReport r;
  std::vector<double> defined;
  for (std::size_t i = 0; i < main.entries.size(); ++i) {
    const auto& m = main.entries[i];
    const auto& s = skyline.entries[i];
    UNIV_CHECK(m.feature_a == s.feature_a && m.layer_a == s.layer_a, config,
               "mppc_difference: feature " + std::to_string(i) + " differs between tables");
    if (m.defined && s.defined) {
      r.deltas.push_back(m.rho - s.rho);
      defined.push_back(r.deltas.back());
    } else {
      r.deltas.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  }
  r.n_defined = defined.size();
  for (std::size_t k = 0; k <= bins; ++k) r.bin_edges.push_back(-2.0 + 4.0 * double(k) / double(bins));
  r.histogram.assign(bins, 0);
  if (defined.empty()) {
    r.quantiles.fill(std::numeric_limits<double>::quiet_NaN());
    return r;
  }
  std::size_t small = 0;
  for (double d : defined) {
    small += std::abs(d) < 0.05;
    const auto k = static_cast<std::size_t>(std::clamp((d + 2.0) / 4.0 * double(bins), 0.0, double(bins - 1)));
    ++r.histogram[k];
  }
  r.share_small = double(small) / double(defined.size());
  std::sort(defined.begin(), defined.end());
  const double qs[5] = {0.05, 0.25, 0.5, 0.75, 0.95};
  for (int k = 0; k < 5; ++k) r.quantiles[k] = quantile_sorted(defined, qs[k]);
  return r;
}

Matrix depth_histogram(const MatchTable& t, std::size_t layers_a, std::size_t layers_b) {
  Matrix h(layers_a, layers_b);
  for (const auto& e : t.entries) {
    if (!e.defined) continue;
    UNIV_CHECK(e.layer_a >= 0 && std::size_t(e.layer_a) < layers_a && e.layer_b >= 0 &&
                   std::size_t(e.layer_b) < layers_b,
               value, "depth_histogram: layer label outside the requested grid");
    h(e.layer_a, e.layer_b) += 1.0;
  }
  return h;
}

// ---- job builders ----------------------------------------------------------------

namespace {

std::vector<FeatureSource> neuron_sources(const Model& m, const std::vector<TokenDocument>& corpus,
                                          std::optional<TokenId> eos_id) {
  const HookKind kind =
      m.config.arch == Architecture::transformer ? HookKind::mlp_neuron_post_activation : HookKind::mamba_post_silu;
  std::vector<FeatureSource> out;
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    const HookSite site{static_cast<int>(l), kind};
    UNIV_CHECK(m.has_site(site), config, "neuron mode: site " + to_string(site) + " unavailable");
    out.push_back({static_cast<int>(l), stream_as_features(collect_aligned(m, corpus, site, eos_id))});
  }
  return out;
}

}  // namespace

CorrelationJobSpec neuron_mode_sources(const Model& a, const Model& b, const std::vector<TokenDocument>& corpus,
                                       std::optional<TokenId> eos_id) {
  CorrelationJobSpec spec;
  spec.mode = MppcMode::neuron;
  spec.direction = std::string(to_string(a.config.arch)) + "->" + to_string(b.config.arch);
  spec.a = neuron_sources(a, corpus, eos_id);
  spec.b = neuron_sources(b, corpus, eos_id);
  UNIV_CHECK(spec.a.front().features.size() == spec.b.front().features.size(), config,
             "neuron mode: the two models yield different token counts (" +
                 std::to_string(spec.a.front().features.size()) + " vs " +
                 std::to_string(spec.b.front().features.size()) + "); check vocab, max_len and eos handling");
  return spec;
}

const char* to_string(SkylineKind k) {
  return k == SkylineKind::model_seed_variant ? "model_seed_variant" : "sae_seed_variant";
}

SkylineKind parse_skyline_kind(std::string_view s) {
  for (SkylineKind k : {SkylineKind::model_seed_variant, SkylineKind::sae_seed_variant})
    if (s == to_string(k)) return k;
  throw Error(ErrorKind::config, "unknown skyline kind '" + std::string(s) + "'");
}

CorrelationJobSpec skyline_protocols(SkylineKind kind, const SkylineAssets& assets, bool reversed) {
  UNIV_CHECK(!assets.main.empty(), config, std::string(to_string(kind)) + ": missing main feature set");
  UNIV_CHECK(!assets.variant.empty(), config,
             std::string(to_string(kind)) + ": missing " +
                 (kind == SkylineKind::model_seed_variant ? "seed-variant model features" : "second SAE feature set"));
  CorrelationJobSpec spec;
  spec.a = assets.main;
  spec.b = assets.variant;
  spec.direction = kind == SkylineKind::model_seed_variant ? "p->p'" : "p->p(sae')";
  return reversed ? reverse(spec) : spec;
}

FeatureMatrix codes_as_features(const SparseCodes& codes, const std::vector<ActivationRow>& rows) {
  UNIV_CHECK(codes.size() == rows.size(), shape, "codes and rows differ in length");
  FeatureMatrix m;
  m.source = "planted";
  m.n_features = codes.f;
  m.rows = rows;
  m.offsets = codes.offsets;
  m.index = codes.index;
  m.value = codes.value;
  m.validate();
  return m;
}

nlohmann::json PlantedRecovery::to_json() const {
  std::size_t defined = 0;
  for (double v : mppc) defined += std::isfinite(v);
  return {{"planted", recovered.size()},   {"defined", defined},       {"mean_recovery", mean_recovery},
          {"mean_mppc", mean_mppc},        {"frac_above", frac_above}, {"threshold", threshold}};
}

PlantedRecovery planted_recovery(const FeatureMatrix& codes, const FeatureMatrix& features_a,
                                 const MatchTable& a_to_b, double threshold) {
  UNIV_CHECK(a_to_b.entries.size() == features_a.n_features, shape,
             "planted recovery: table does not cover side A");
  CorrelationJobSpec spec;
  spec.a.push_back({0, codes});
  spec.b.push_back({0, features_a});
  spec.direction = "planted->a";
  const MatchTable rec = run_mppc(spec);

  PlantedRecovery r;
  r.threshold = threshold;
  double sum_rec = 0.0, sum_mppc = 0.0;
  std::size_t defined = 0, above = 0;
  for (const MatchEntry& e : rec.entries) {
    if (!e.defined) {
      r.recovered.push_back(0);
      r.recovery_rho.push_back(std::numeric_limits<double>::quiet_NaN());
      r.mppc.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.recovered.push_back(e.best_feature_b);
    r.recovery_rho.push_back(e.rho);
    sum_rec += e.rho;
    const MatchEntry& m = a_to_b.entries[e.best_feature_b];
    r.mppc.push_back(m.defined ? m.rho : std::numeric_limits<double>::quiet_NaN());
    if (m.defined) {
      sum_mppc += m.rho;
      ++defined;
      above += m.rho > threshold;
    }
  }
  const double n = double(rec.entries.size());
  r.mean_recovery = n > 0 ? sum_rec / n : 0.0;
  r.mean_mppc = defined > 0 ? sum_mppc / double(defined) : 0.0;
  r.frac_above = n > 0 ? double(above) / n : 0.0;
  return r;
}

}  // namespace univlab
