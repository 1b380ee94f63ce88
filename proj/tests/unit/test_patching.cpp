#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "univlab/error.hpp"
#include "univlab/parallel.hpp"
#include "univlab/patching.hpp"

using namespace univlab;

namespace {

const Model& mamba() {
  static const Model m = build_induction_mamba(32, 7);
  return m;
}

const Model& transformer() {
  static const Model m = build_induction_transformer(32, 7);
  return m;
}

const Model& ioi_model() {
  static const Model m = build_ioi_mamba(5);
  return m;
}

int designated(const Model& m) { return std::stoi(m.tags.at("designated_layer")); }

const std::size_t kDistances[] = {8, 16, 32};
const int kLayers[] = {0, 1, 2, 3};

double max_abs_except(const SweepResult& r, std::size_t keep_col) {
  double m = 0.0;
  for (std::size_t i = 0; i < r.mean.rows(); ++i)
    for (std::size_t j = 0; j < r.mean.cols(); ++j)
      if (j != keep_col) m = std::max(m, std::abs(r.mean(i, j)));
  return m;
}

double min_abs_col(const SweepResult& r, std::size_t col) {
  double m = INFINITY;
  for (std::size_t i = 0; i < r.mean.rows(); ++i) m = std::min(m, std::abs(r.mean(i, col)));
  return m;
}

bool throws_kind(ErrorKind kind, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind() == kind;
  }
  return false;
}

}  // namespace

TEST_CASE("logit_diff arithmetic") {
  const std::vector<double> logits = {0.5, -1.25, 3.0, 2.0};
  CHECK(logit_diff(logits, 2) == 3.0);
  CHECK(logit_diff(logits, 2, 1) == 4.25);
  CHECK(logit_diff(logits, 1, 2) == -4.25);
  CHECK(logit_diff(logits, 3, 3) == 0.0);
  CHECK(throws_kind(ErrorKind::value, [&] { logit_diff(logits, 4); }));
}

TEST_CASE("freeze plans per policy") {
  const Model& m = mamba();
  PatchSpec spec{{HookSite{2, HookKind::ssm_input_c}, {5}}, FreezePolicy::other_states, {}, {}};

  FreezePlan p = plan_freeze(m, spec);
  CHECK(p.frozen == std::set<HookSite>{{0, HookKind::ssm_state_h}, {1, HookKind::ssm_state_h},
                                       {3, HookKind::ssm_state_h}});
  CHECK(p.recomputed.count(HookSite{2, HookKind::ssm_state_h}));
  CHECK(p.recomputed.count(HookSite{3, HookKind::residual_post_block}));
  CHECK(p.recomputed.count(HookSite::logits_site()));

  spec.policy = FreezePolicy::direct;
  p = plan_freeze(m, spec);
  CHECK(p.frozen == std::set<HookSite>{{0, HookKind::block_delta}, {1, HookKind::block_delta},
                                       {3, HookKind::block_delta}});

  spec.policy = FreezePolicy::none;
  CHECK(plan_freeze(m, spec).frozen.empty());

  SUBCASE("inconsistent freeze sets abort") {
    spec.extra_frozen = {HookSite{3, HookKind::residual_post_block}};
    CHECK(throws_kind(ErrorKind::contract, [&] { plan_freeze(m, spec); }));
    spec.extra_frozen = {HookSite{2, HookKind::mamba_post_silu}};  // alias of the node
    CHECK(throws_kind(ErrorKind::contract, [&] { plan_freeze(m, spec); }));
    spec.extra_frozen = {HookSite{2, HookKind::block_delta}};
    CHECK(throws_kind(ErrorKind::contract, [&] { plan_freeze(m, spec); }));
    spec.extra_frozen = {HookSite{2, HookKind::conv_input_x}};  // upstream, fine
    CHECK_NOTHROW(plan_freeze(m, spec));
  }

  SUBCASE("unknown nodes") {
    spec.node.site = {9, HookKind::ssm_input_c};
    CHECK(throws_kind(ErrorKind::contract, [&] { plan_freeze(m, spec); }));
    spec.node.site = {0, HookKind::ssm_state_h};
    CHECK(throws_kind(ErrorKind::contract, [&] { plan_freeze(transformer(), spec); }));
  }

  SUBCASE("transformer has no states to freeze") {
    PatchSpec t{{HookSite{0, HookKind::residual_post_block}, {}}, FreezePolicy::other_states, {}, {}};
    CHECK(plan_freeze(transformer(), t).frozen.empty());
  }
}

TEST_CASE("clean-as-corrupted is a no-op for every node and policy") {
  std::mt19937_64 rng(3);
  const TaskInstance mt = make_induction_task(32, 12, Corruption::none, rng);
  const Model& m = mamba();
  for (FreezePolicy pol : {FreezePolicy::other_states, FreezePolicy::direct, FreezePolicy::none}) {
    for (int l = 0; l < 4; ++l) {
      for (HookKind k : {HookKind::conv_input_x, HookKind::ssm_input_c, HookKind::ssm_state_h,
                         HookKind::block_delta, HookKind::residual_post_block}) {
        const PatchSpec spec{{HookSite{l, k}, {}}, pol, task_metric(mt), {}};
        CHECK(std::abs(path_patch(m, mt, spec)) <= 1e-9);
      }
    }
    const PatchSpec logit_spec{{HookSite::logits_site(), {}}, pol, task_metric(mt), {}};
    CHECK(std::abs(path_patch(m, mt, logit_spec)) <= 1e-9);
  }
  for (int l = 0; l < 2; ++l) {
    for (HookKind k : {HookKind::block_delta, HookKind::residual_post_block, HookKind::mlp_neuron_post_activation}) {
      const PatchSpec spec{{HookSite{l, k}, {}}, FreezePolicy::direct, task_metric(mt), {}};
      CHECK(std::abs(path_patch(transformer(), mt, spec)) <= 1e-9);
    }
  }
}

TEST_CASE("patching the logits node equals direct substitution") {
  std::mt19937_64 rng(4);
  const TaskInstance t = make_induction_task(32, 10, Corruption::b_corrupt, rng);
  const Model& m = mamba();
  const std::size_t a2 = t.label("A2");
  const double clean = run_model(m, t.clean, Capture{}).logits.at(a2)[t.answer];
  const double corrupt = run_model(m, t.corrupted, Capture{}).logits.at(a2)[t.answer];
  for (FreezePolicy pol : {FreezePolicy::other_states, FreezePolicy::direct, FreezePolicy::none}) {
    const PatchSpec spec{{HookSite::logits_site(), {a2}}, pol, task_metric(t), {}};
    CHECK(path_patch(m, t, spec) == doctest::Approx(corrupt - clean).epsilon(1e-12));
  }
}

TEST_CASE("patching the designated state collapses the answer logit") {
  std::mt19937_64 rng(5);
  const TaskInstance t = make_induction_task(32, 16, Corruption::b_corrupt, rng);
  const Model& m = mamba();
  const PatchSpec spec{{HookSite{designated(m), HookKind::ssm_state_h}, {t.label("A2") - 1}},
                       FreezePolicy::other_states, task_metric(t), {}};
  CHECK(path_patch(m, t, spec) < -3.0);
}

TEST_CASE("induction sweeps localize on the constructed Mamba") {
  const Model& m = mamba();
  const int dl = designated(m);
  const auto tasks = make_induction_suite(32, kDistances, 32, Corruption::b_corrupt, 11);

  SUBCASE("states") {
    for (FreezePolicy pol : {FreezePolicy::other_states, FreezePolicy::direct}) {
      const SweepResult r = sweep_states(m, tasks, kLayers, pol);
      CHECK(r.samples == 32);
      CHECK(r.row_labels == std::vector<std::string>{"8", "16", "32"});
      const std::size_t c = r.col_index("layer" + std::to_string(dl));
      CHECK(min_abs_col(r, c) >= 10.0 * max_abs_except(r, c));
      for (std::size_t i = 0; i < r.mean.rows(); ++i) CHECK(r.mean(i, c) < 0.0);
    }
  }
  SUBCASE("ssm inputs") {
    const SweepResult r = sweep_ssm_inputs(m, tasks, dl);
    CHECK(r.col_labels == std::vector<std::string>{"A1", "B1", "B1+1", "B1+2", "B1+3"});
    const std::size_t c = r.col_index("B1+1");
    CHECK(min_abs_col(r, c) >= 10.0 * max_abs_except(r, c));
    for (std::size_t i = 0; i < r.mean.rows(); ++i) CHECK(std::abs(r.mean(i, 0)) <= 1e-9);

    const std::string src[] = {"B1"};
    const auto verdict = off_by_one_detect(r, src);
    REQUIRE(verdict.size() == 1);
    CHECK(verdict[0].verdict == OffByOne::off_by_one);
  }
  SUBCASE("conv inputs") {
    const SweepResult b = sweep_conv_inputs(m, tasks, dl, Corruption::b_corrupt);
    CHECK(b.corruption == "b-corrupt");
    CHECK(min_abs_col(b, 1) >= 10.0 * max_abs_except(b, 1));
    const SweepResult a = sweep_conv_inputs(m, tasks, dl, Corruption::a_corrupt);
    CHECK(min_abs_col(a, 0) >= 10.0 * max_abs_except(a, 0));
    for (std::size_t i = 0; i < a.mean.rows(); ++i) {
      CHECK(std::abs(a.mean(i, 2)) <= 1e-6);
      CHECK(std::abs(b.mean(i, 2)) <= 1e-6);
    }
  }
  SUBCASE("clean-as-corrupted grids are zero") {
    const auto clean = make_induction_suite(32, kDistances, 4, Corruption::none, 12);
    for (const SweepResult& r : {sweep_states(m, clean, kLayers), sweep_ssm_inputs(m, clean, dl),
                                 sweep_conv_inputs(m, clean, dl, Corruption::none)}) {
      CHECK(r.corruption == "none");
      for (double v : r.mean.data()) CHECK(std::abs(v) <= 1e-9);
    }
  }
}

TEST_CASE("transformer probe is not off-by-one") {
  const auto tasks = make_induction_suite(32, kDistances, 16, Corruption::b_corrupt, 13);
  const std::string pos[] = {"A1", "B1", "B1+1"};
  const SweepResult r = sweep_positions(transformer(), tasks, {0, HookKind::residual_post_block}, pos);
  const std::string src[] = {"B1"};
  const auto verdict = off_by_one_detect(r, src);
  CHECK(verdict[0].verdict != OffByOne::off_by_one);
  CHECK(verdict[0].verdict == OffByOne::same_position);
}

TEST_CASE("off-by-one detector edge cases") {
  SweepResult r;
  r.row_labels = {"8"};
  r.col_labels = {"B1", "B1+1"};
  r.mean = Matrix(1, 2);
  const std::string src[] = {"B1"};
  CHECK(off_by_one_detect(r, src)[0].verdict == OffByOne::inconclusive);
  r.mean(0, 0) = 1.0;
  r.mean(0, 1) = -2.0;
  CHECK(off_by_one_detect(r, src)[0].verdict == OffByOne::inconclusive);
  r.mean(0, 1) = -5.0;
  CHECK(off_by_one_detect(r, src)[0].verdict == OffByOne::off_by_one);
  CHECK(off_by_one_detect(r, src, 6.0)[0].verdict == OffByOne::inconclusive);
  r.mean(0, 1) = 0.1;
  CHECK(off_by_one_detect(r, src)[0].verdict == OffByOne::same_position);
  const std::string missing[] = {"A1"};
  CHECK(throws_kind(ErrorKind::value, [&] { off_by_one_detect(r, missing); }));
}

TEST_CASE("ioi sweep localizes after the names") {
  const Model& m = ioi_model();
  const int counting = std::stoi(m.tags.at("counting_layer"));
  const auto tasks = make_ioi_suite(32, Corruption::ioi_names, 3);
  for (const auto& t : tasks) {
    CHECK(t.clean[t.label("IO")] == t.answer);
    CHECK(t.clean[t.label("S1")] == t.distractor);
    CHECK(t.clean[t.label("S2")] == t.distractor);
    CHECK(t.corrupted[t.label("S1")] == t.corrupted[t.label("S2")]);
  }
  const SweepResult r = ioi_sweep(m, tasks);
  CHECK(r.row_key == "layer");
  CHECK(r.row_labels.size() == m.config.n_layers);
  double peak_same = 0.0, min_next = INFINITY;
  for (const char* name : {"IO", "S1", "S2"}) {
    const std::string next = std::string(name) + "+1";
    min_next = std::min(min_next, std::abs(r.mean(counting, r.col_index(next))));
    for (std::size_t l = 0; l < r.mean.rows(); ++l) peak_same = std::max(peak_same, std::abs(r.mean(l, r.col_index(name))));
  }
  CHECK(min_next >= 10.0 * peak_same);
  const std::string src[] = {"IO", "S1", "S2"};
  for (const auto& v : off_by_one_detect(r, src)) CHECK(v.verdict == OffByOne::off_by_one);

  const SweepResult zero = ioi_sweep(m, make_ioi_suite(8, Corruption::none, 3));
  for (double v : zero.mean.data()) CHECK(std::abs(v) <= 1e-9);

  CHECK(throws_kind(ErrorKind::config, [&] { ioi_sweep(mamba(), tasks); }));
}

TEST_CASE("random-weight control shows no localization") {
  RandomModelOptions o;
  const Model m = build_random_model(o, 9);
  const auto tasks = make_induction_suite(32, kDistances, 16, Corruption::b_corrupt, 11);
  const SweepResult r = sweep_states(m, tasks, kLayers);
  std::vector<double> per_layer(r.mean.cols(), 0.0);
  for (std::size_t j = 0; j < r.mean.cols(); ++j)
    for (std::size_t i = 0; i < r.mean.rows(); ++i) per_layer[j] += std::abs(r.mean(i, j));
  std::sort(per_layer.rbegin(), per_layer.rend());
  CHECK(per_layer[0] < 10.0 * per_layer[1]);
}

TEST_CASE("sweeps are deterministic across thread counts and persist") {
  const auto tasks = make_induction_suite(32, kDistances, 6, Corruption::b_corrupt, 21);
  set_num_threads(1);
  const SweepResult one = sweep_ssm_inputs(mamba(), tasks, 2);
  set_num_threads(3);
  const SweepResult three = sweep_ssm_inputs(mamba(), tasks, 2);
  set_num_threads(0);
  CHECK(one.to_csv() == three.to_csv());
  CHECK(make_induction_suite(32, kDistances, 6, Corruption::b_corrupt, 21)[7].clean == tasks[7].clean);

  const auto dir = std::filesystem::temp_directory_path() / "univlab_patch_test";
  std::filesystem::remove_all(dir);
  write_sweep(one, dir / "ssm.csv");
  std::ifstream csv(dir / "ssm.csv");
  std::stringstream body;
  body << csv.rdbuf();
  CHECK(body.str() == one.to_csv());
  CHECK(body.str().rfind("distance,A1,B1,B1+1,B1+2,B1+3\n", 0) == 0);
  std::ifstream meta_in(dir / "ssm.csv.json");
  const auto meta = nlohmann::json::parse(meta_in);
  CHECK(meta.at("samples") == 6);
  CHECK(meta.at("policy") == "other-states");
  CHECK(meta.at("model_hash") == model_hash(mamba()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("positions outside the sequence are rejected") {
  const auto tasks = make_induction_suite(32, std::vector<std::size_t>{8}, 2, Corruption::b_corrupt, 1);
  const std::string pos[] = {"A2+1"};
  CHECK(throws_kind(ErrorKind::value, [&] { sweep_positions(mamba(), tasks, {2, HookKind::ssm_input_c}, pos); }));
  PatchSpec spec{{HookSite{2, HookKind::ssm_input_c}, {99}}, FreezePolicy::other_states, task_metric(tasks[0]), {}};
  CHECK(throws_kind(ErrorKind::value, [&] { path_patch(mamba(), tasks[0], spec); }));
}
