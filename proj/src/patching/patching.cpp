#include "univlab/patching.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "univlab/error.hpp"
#include "univlab/parallel.hpp"

namespace univlab {

const char* to_string(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::other_states: return "other-states";
    case FreezePolicy::direct: return "direct";
    case FreezePolicy::none: return "none";
  }
  return "?";
}

FreezePolicy parse_freeze_policy(std::string_view s) {
  for (FreezePolicy p : {FreezePolicy::other_states, FreezePolicy::direct, FreezePolicy::none})
    if (s == to_string(p)) return p;
  throw Error(ErrorKind::usage, "unknown freeze policy '" + std::string(s) + "'");
}

const char* to_string(OffByOne v) {
  switch (v) {
    case OffByOne::off_by_one: return "off-by-one";
    case OffByOne::same_position: return "same-position";
    case OffByOne::inconclusive: return "inconclusive";
  }
  return "?";
}

namespace {

// Order of sites inside one block; the residual closes the block.
int block_rank(HookKind k) {
  switch (k) {
    case HookKind::conv_input_x: return 0;
    case HookKind::ssm_input_c:
    case HookKind::mamba_post_silu:
    case HookKind::mlp_neuron_post_activation: return 1;
    case HookKind::ssm_state_h: return 2;
    case HookKind::block_delta: return 3;
    case HookKind::residual_post_block: return 4;
    case HookKind::logits: return 5;
  }
  return 5;
}

HookSite canonical(HookSite s) {
  if (s.kind == HookKind::mamba_post_silu) s.kind = HookKind::ssm_input_c;
  if (s.kind == HookKind::logits) s.layer = 0;
  return s;
}

bool block_has(const Model& m, int layer, HookKind k) { return m.has_site(HookSite{layer, k}); }

}  // namespace

FreezePlan plan_freeze(const Model& model, const PatchSpec& spec) {
  const HookSite node = canonical(spec.node.site);
  UNIV_CHECK(model.has_site(spec.node.site), contract, "patch node " + to_string(spec.node.site) + " not in model");
  const int n_layers = static_cast<int>(model.config.n_layers);
  const bool at_logits = node.kind == HookKind::logits;
  const int node_layer = at_logits ? n_layers : node.layer;

  FreezePlan plan;
  plan.recomputed.insert(node);
  plan.recomputed.insert(HookSite::logits_site());
  if (!at_logits) {
    for (HookKind k : {HookKind::ssm_input_c, HookKind::ssm_state_h, HookKind::block_delta,
                       HookKind::residual_post_block, HookKind::mlp_neuron_post_activation}) {
      if (block_rank(k) > block_rank(node.kind) && block_has(model, node.layer, k))
        plan.recomputed.insert(HookSite{node.layer, k});
    }
    for (int l = node.layer + 1; l < n_layers; ++l) plan.recomputed.insert(HookSite{l, HookKind::residual_post_block});
  }

  for (int l = 0; l < n_layers; ++l) {
    if (l == node_layer) continue;
    if (spec.policy == FreezePolicy::other_states && block_has(model, l, HookKind::ssm_state_h))
      plan.frozen.insert(HookSite{l, HookKind::ssm_state_h});
    if (spec.policy == FreezePolicy::direct) plan.frozen.insert(HookSite{l, HookKind::block_delta});
  }
  for (const HookSite& s : spec.extra_frozen) {
    UNIV_CHECK(model.has_site(s), contract, "frozen site " + to_string(s) + " not in model");
    plan.frozen.insert(canonical(s));
  }

  for (const HookSite& s : plan.frozen) {
    UNIV_CHECK(!plan.recomputed.count(s), contract,
               "freeze set inconsistent: " + to_string(s) + " is both frozen and recomputed");
  }
  return plan;
}

double logit_diff(std::span<const double> logits, TokenId positive, std::optional<TokenId> negative) {
  UNIV_CHECK(positive < logits.size() && (!negative || *negative < logits.size()), value,
             "logit_diff: token outside vocabulary");
  return negative ? logits[positive] - logits[*negative] : logits[positive];
}

LogitMetric task_metric(const TaskInstance& task) {
  if (task.kind == TaskKind::induction) return {task.label("A2"), task.answer, std::nullopt};
  UNIV_CHECK(!task.clean.empty(), value, "ioi task: empty sequence");
  return {task.clean.size() - 1, task.answer, task.distractor};
}

namespace {

double metric_of(const SequenceTensor& logits, const LogitMetric& m) {
  UNIV_CHECK(m.position < logits.length(), value, "metric position outside sequence");
  return logit_diff(logits.at(m.position), m.positive, m.negative);
}

std::vector<std::size_t> node_positions(const PatchNode& node, std::size_t len) {
  std::vector<std::size_t> pos = node.positions;
  if (pos.empty()) {
    pos.resize(len);
    for (std::size_t i = 0; i < len; ++i) pos[i] = i;
  }
  for (std::size_t p : pos)
    UNIV_CHECK(p < len, value, "patch position " + std::to_string(p) + " outside sequence of length " +
                                   std::to_string(len));
  return pos;
}

}  // namespace

double path_patch(const Model& model, const PatchSpec& spec, const TaskInstance& task, const ForwardTrace& clean,
                  const ForwardTrace& corrupted) {
  const FreezePlan plan = plan_freeze(model, spec);
  UNIV_CHECK(task.clean.size() == task.corrupted.size(), contract, "clean and corrupted lengths differ");

  Interventions iv;
  for (const HookSite& s : plan.frozen) iv.freeze(s, clean.at(s));
  const SequenceTensor& patched = corrupted.at(spec.node.site);
  for (std::size_t p : node_positions(spec.node, task.clean.size()))
    iv.set(spec.node.site, p, Vector(patched.at(p).begin(), patched.at(p).end()));

  const ForwardTrace pass3 = run_model(model, task.clean, Capture{}, &iv);
  return metric_of(pass3.logits, spec.metric) - metric_of(clean.logits, spec.metric);
}

double path_patch(const Model& model, const TaskInstance& task, const PatchSpec& spec) {
  plan_freeze(model, spec);
  const ForwardTrace clean = run_model(model, task.clean, Capture::everything());
  const ForwardTrace corrupted = run_model(model, task.corrupted, Capture{spec.node.site});
  return path_patch(model, spec, task, clean, corrupted);
}

// ---- sweeps --------------------------------------------------------------

double SweepResult::at(std::string_view row, std::string_view col) const {
  auto r = std::find(row_labels.begin(), row_labels.end(), row);
  UNIV_CHECK(r != row_labels.end(), value, "sweep: no row '" + std::string(row) + "'");
  return mean(static_cast<std::size_t>(r - row_labels.begin()), col_index(col));
}

std::size_t SweepResult::col_index(std::string_view col) const {
  auto c = std::find(col_labels.begin(), col_labels.end(), col);
  UNIV_CHECK(c != col_labels.end(), value, "sweep: no column '" + std::string(col) + "'");
  return static_cast<std::size_t>(c - col_labels.begin());
}

nlohmann::json SweepResult::metadata() const {
  return {{"name", name},
          {"row_key", row_key},
          {"rows", row_labels},
          {"cols", col_labels},
          {"samples", samples},
          {"policy", to_string(policy)},
          {"model_hash", model_hash},
          {"corruption", corruption}};
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << row_key;
  for (const auto& c : col_labels) out << ',' << c;
  out << '\n';
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    out << row_labels[r];
    for (std::size_t c = 0; c < col_labels.size(); ++c) out << ',' << mean(r, c);
    out << '\n';
  }
  return out.str();
}

void write_sweep(const SweepResult& r, const std::filesystem::path& csv_path) {
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  std::ofstream csv(csv_path, std::ios::binary);
  csv << r.to_csv();
  std::ofstream meta(csv_path.string() + ".json", std::ios::binary);
  meta << r.metadata().dump(2) << '\n';
  UNIV_CHECK(csv && meta, io, "cannot write sweep " + csv_path.string());
}

std::vector<TaskInstance> make_induction_suite(std::size_t vocab, std::span<const std::size_t> distances,
                                               std::size_t per_distance, Corruption corruption,
                                               std::uint64_t seed, TokenId bos) {
  std::mt19937_64 rng(seed);
  std::vector<TaskInstance> tasks;
  for (std::size_t d : distances)
    for (std::size_t k = 0; k < per_distance; ++k) tasks.push_back(make_induction_task(vocab, d, corruption, rng, bos));
  return tasks;
}

std::vector<TaskInstance> make_ioi_suite(std::size_t count, Corruption corruption, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TaskInstance> tasks;
  for (std::size_t k = 0; k < count; ++k) tasks.push_back(make_ioi_task(rng, corruption));
  return tasks;
}

namespace {

struct Cell {
  std::size_t row = 0, col = 0;
  PatchNode node;
};

// "B1", "B1+1", "IO+2"
std::size_t resolve_position(const TaskInstance& t, const std::string& label) {
  const auto plus = label.find('+');
  const std::size_t base = t.label(label.substr(0, plus));
  const std::size_t off = plus == std::string::npos ? 0 : std::stoul(label.substr(plus + 1));
  const std::size_t pos = base + off;
  UNIV_CHECK(pos < t.clean.size(), value,
             "position " + label + " outside sequence of length " + std::to_string(t.clean.size()));
  return pos;
}

std::vector<std::size_t> distance_rows(std::span<const TaskInstance> tasks, SweepResult& r) {
  std::vector<std::size_t> ds;
  for (const auto& t : tasks) ds.push_back(t.distance);
  std::sort(ds.begin(), ds.end());
  ds.erase(std::unique(ds.begin(), ds.end()), ds.end());
  r.row_key = "distance";
  for (std::size_t d : ds) r.row_labels.push_back(std::to_string(d));
  std::vector<std::size_t> row_of(tasks.size());
  for (std::size_t k = 0; k < tasks.size(); ++k)
    row_of[k] = static_cast<std::size_t>(std::lower_bound(ds.begin(), ds.end(), tasks[k].distance) - ds.begin());
  return row_of;
}

// Runs every cell of every task; per-task deltas are summed in task order.
template <class CellsOf>
void run_sweep(const Model& model, std::span<const TaskInstance> tasks, SweepResult& r, CellsOf cells_of) {
  UNIV_CHECK(!tasks.empty(), value, "sweep: no tasks");
  std::vector<std::vector<Cell>> cells(tasks.size());
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    cells[k] = cells_of(k);
    for (const Cell& c : cells[k]) {
      PatchSpec spec{c.node, r.policy, task_metric(tasks[k]), {}};
      plan_freeze(model, spec);
    }
  }
  std::vector<std::vector<double>> deltas(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t k) {
    const TaskInstance& t = tasks[k];
    const ForwardTrace clean = run_model(model, t.clean, Capture::everything());
    std::set<HookSite> wanted;
    for (const Cell& c : cells[k]) wanted.insert(c.node.site);
    const ForwardTrace corrupted = run_model(model, t.corrupted, Capture(wanted));
    const LogitMetric metric = task_metric(t);
    for (const Cell& c : cells[k])
      deltas[k].push_back(path_patch(model, PatchSpec{c.node, r.policy, metric, {}}, t, clean, corrupted));
  });

  const std::size_t rows = r.row_labels.size(), cols = r.col_labels.size();
  Matrix sum(rows, cols);
  std::vector<std::size_t> count(rows * cols, 0);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    for (std::size_t i = 0; i < cells[k].size(); ++i) {
      const Cell& c = cells[k][i];
      sum(c.row, c.col) += deltas[k][i];
      ++count[c.row * cols + c.col];
    }
  }
  r.mean = Matrix(rows, cols);
  r.samples = tasks.size();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t n = count[i * cols + j];
      UNIV_CHECK(n > 0, value, "sweep: empty cell " + r.row_labels[i] + "/" + r.col_labels[j]);
      r.mean(i, j) = sum(i, j) / static_cast<double>(n);
      r.samples = std::min(r.samples, n);
      UNIV_CHECK(std::isfinite(r.mean(i, j)), value, "sweep: non-finite mean");
    }
  }
  r.model_hash = model_hash(model);
}

std::string corruption_of(std::span<const TaskInstance> tasks) {
  const TaskInstance& t = tasks.front();
  if (t.clean == t.corrupted) return to_string(Corruption::none);
  if (t.kind == TaskKind::ioi) return to_string(Corruption::ioi_names);
  return t.clean[t.label("B1")] != t.corrupted[t.label("B1")] ? to_string(Corruption::b_corrupt)
                                                               : to_string(Corruption::a_corrupt);
}

void require_induction(std::span<const TaskInstance> tasks, std::size_t vocab) {
  for (const auto& t : tasks) {
    UNIV_CHECK(t.kind == TaskKind::induction, config, "induction sweep given a non-induction task");
    for (TokenId id : t.clean) UNIV_CHECK(id < vocab, config, "task token outside model vocabulary");
    for (TokenId id : t.corrupted) UNIV_CHECK(id < vocab, config, "task token outside model vocabulary");
  }
}

}  // namespace

SweepResult sweep_states(const Model& model, std::span<const TaskInstance> tasks, std::span<const int> layers,
                         FreezePolicy policy) {
  require_induction(tasks, model.config.vocab);
  SweepResult r;
  r.name = "states";
  r.policy = policy;
  const auto row_of = distance_rows(tasks, r);
  for (int l : layers) r.col_labels.push_back("layer" + std::to_string(l));
  run_sweep(model, tasks, r, [&](std::size_t k) {
    std::vector<Cell> cells;
    const std::size_t pos = tasks[k].label("A2") - 1;
    for (std::size_t j = 0; j < layers.size(); ++j)
      cells.push_back({row_of[k], j, {HookSite{layers[j], HookKind::ssm_state_h}, {pos}}});
    return cells;
  });
  r.corruption = corruption_of(tasks);
  return r;
}

SweepResult sweep_positions(const Model& model, std::span<const TaskInstance> tasks, HookSite site,
                            std::span<const std::string> positions, FreezePolicy policy) {
  require_induction(tasks, model.config.vocab);
  SweepResult r;
  r.name = std::string(to_string(site.kind)) + "@layer" + std::to_string(site.layer);
  r.policy = policy;
  const auto row_of = distance_rows(tasks, r);
  r.col_labels.assign(positions.begin(), positions.end());
  run_sweep(model, tasks, r, [&](std::size_t k) {
    std::vector<Cell> cells;
    for (std::size_t j = 0; j < positions.size(); ++j)
      cells.push_back({row_of[k], j, {site, {resolve_position(tasks[k], positions[j])}}});
    return cells;
  });
  r.corruption = corruption_of(tasks);
  return r;
}

SweepResult sweep_ssm_inputs(const Model& model, std::span<const TaskInstance> tasks, int layer,
                             FreezePolicy policy) {
  const std::vector<std::string> cols = {"A1", "B1", "B1+1", "B1+2", "B1+3"};
  SweepResult r = sweep_positions(model, tasks, {layer, HookKind::ssm_input_c}, cols, policy);
  r.name = "ssm-inputs";
  return r;
}

SweepResult sweep_conv_inputs(const Model& model, std::span<const TaskInstance> tasks, int layer,
                              Corruption corruption, FreezePolicy policy, std::uint64_t seed) {
  UNIV_CHECK(corruption == Corruption::b_corrupt || corruption == Corruption::a_corrupt ||
                 corruption == Corruption::none,
             config, "conv sweep: corruption must be b-corrupt, a-corrupt or none");
  std::mt19937_64 rng(seed);
  std::vector<TaskInstance> recorrupted(tasks.begin(), tasks.end());
  for (auto& t : recorrupted) t.corrupted = corrupt_induction(t, corruption, rng, model.config.vocab);
  const std::vector<std::string> cols = {"A1", "B1", "B1+1"};
  SweepResult r = sweep_positions(model, recorrupted, {layer, HookKind::conv_input_x}, cols, policy);
  r.name = "conv-inputs";
  r.corruption = to_string(corruption);
  return r;
}

SweepResult ioi_sweep(const Model& model, std::span<const TaskInstance> tasks, FreezePolicy policy) {
  UNIV_CHECK(model.config.arch == Architecture::mamba, config, "ioi sweep patches SSM inputs; needs a Mamba model");
  UNIV_CHECK(model.config.vocab == IoiVocab::get().size(), config, "ioi sweep: model vocabulary is not the IOI vocabulary");
  for (const auto& t : tasks) UNIV_CHECK(t.kind == TaskKind::ioi, config, "ioi sweep given a non-IOI task");
  const std::vector<std::string> cols = {"IO", "IO+1", "S1", "S1+1", "S2", "S2+1"};
  SweepResult r;
  r.name = "ioi";
  r.policy = policy;
  r.row_key = "layer";
  const int n_layers = static_cast<int>(model.config.n_layers);
  for (int l = 0; l < n_layers; ++l) r.row_labels.push_back(std::to_string(l));
  r.col_labels = cols;
  run_sweep(model, tasks, r, [&](std::size_t k) {
    std::vector<Cell> cells;
    for (int l = 0; l < n_layers; ++l)
      for (std::size_t j = 0; j < cols.size(); ++j)
        cells.push_back({static_cast<std::size_t>(l), j,
                         {HookSite{l, HookKind::ssm_input_c}, {resolve_position(tasks[k], cols[j])}}});
    return cells;
  });
  r.corruption = corruption_of(tasks);
  return r;
}

std::vector<OffByOneReport> off_by_one_detect(const SweepResult& sweep, std::span<const std::string> labels,
                                              double factor) {
  UNIV_CHECK(factor > 1.0, config, "off-by-one factor must exceed 1");
  std::vector<OffByOneReport> out;
  for (const auto& label : labels) {
    const std::size_t ct = sweep.col_index(label);
    const std::size_t cn = sweep.col_index(label + "+1");
    OffByOneReport rep;
    rep.source = label;
    for (std::size_t r = 0; r < sweep.mean.rows(); ++r) {
      rep.same = std::max(rep.same, std::abs(sweep.mean(r, ct)));
      rep.next = std::max(rep.next, std::abs(sweep.mean(r, cn)));
    }
    const double floor = 1e-9;
    if (std::max(rep.same, rep.next) <= floor) rep.verdict = OffByOne::inconclusive;
    else if (rep.next >= factor * rep.same) rep.verdict = OffByOne::off_by_one;
    else if (rep.same >= factor * rep.next) rep.verdict = OffByOne::same_position;
    out.push_back(rep);
  }
  return out;
}

}  // namespace univlab
