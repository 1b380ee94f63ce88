#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "univlab/error.hpp"
#include "univlab/mppc.hpp"
#include "univlab/parallel.hpp"
#include "univlab/tensor_io.hpp"

using namespace univlab;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "univlab_test_mppc";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// cols[f][t] -> token-major feature matrix.
FeatureMatrix from_cols(const oracle::Rows& cols) {
  FeatureMatrix m;
  m.n_features = cols.size();
  const std::size_t n = cols.empty() ? 0 : cols[0].size();
  for (std::size_t t = 0; t < n; ++t) {
    Vector row(cols.size());
    for (std::size_t f = 0; f < cols.size(); ++f) row[f] = cols[f][t];
    m.push_dense({t, 1}, row);
  }
  return m;
}

oracle::Rows random_cols(std::size_t f, std::size_t n, std::mt19937_64& rng, double density) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  oracle::Rows c(f, std::vector<double>(n, 0.0));
  for (auto& col : c)
    for (double& v : col)
      if (u(rng) < density) v = density < 1.0 ? u(rng) + 0.1 : g(rng);
  return c;
}

CorrelationJobSpec job(const FeatureMatrix& a, const FeatureMatrix& b) {
  CorrelationJobSpec s;
  s.a = {{0, a}};
  s.b = {{0, b}};
  return s;
}

void check_against_oracle(const MatchTable& t, const oracle::Rows& a, const oracle::Rows& b, double tol) {
  const auto ref = oracle::all_pairs_max(a, b);
  REQUIRE(t.entries.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(t.entries[i].defined == ref[i].defined);
    if (!ref[i].defined) continue;
    CHECK(std::abs(t.entries[i].rho - ref[i].rho) <= tol);
    CHECK(t.entries[i].best_feature_b == ref[i].index);
  }
}

}  // namespace

TEST_CASE("hand-computed statistics on a 3-token 2x2 example") {
  // A: x0 = (1, 2, 3), x1 = (0, 1, 0); B: y0 = (2, 0, 1), y1 = (1, 1, 4).
  const auto a = from_cols({{1, 2, 3}, {0, 1, 0}});
  const auto b = from_cols({{2, 0, 1}, {1, 1, 4}});
  PearsonAccumulator acc(0, 2, 0, 2);
  acc.accumulate(a, b);
  CHECK(acc.n() == 3);
  CHECK(acc.sum_x() == std::vector<double>{6, 1});
  CHECK(acc.sum_x2() == std::vector<double>{14, 1});
  CHECK(acc.sum_y() == std::vector<double>{3, 6});
  CHECK(acc.sum_y2() == std::vector<double>{5, 18});
  // xy: (x0,y0) = 2+0+3, (x0,y1) = 1+2+12, (x1,y0) = 0, (x1,y1) = 1.
  CHECK(acc.sum_xy() == std::vector<double>{5, 15, 0, 1});
  // rho(x0, y1) = (15 - 6*6/3) / sqrt((14 - 12) * (18 - 12)) = 3 / sqrt(12).
  CHECK(acc.rho(0, 1) == doctest::Approx(3.0 / std::sqrt(12.0)));

  SUBCASE("empty chunk leaves the accumulator unchanged") {
    PearsonAccumulator before = acc;
    acc.accumulate(a, b, 1, 1);
    CHECK(acc.sum_xy() == before.sum_xy());
    CHECK(acc.n() == before.n());
  }
}

TEST_CASE("merging half-chunks equals one pass") {
  std::mt19937_64 rng(3);
  for (double density : {0.03, 1.0}) {
    const auto ca = random_cols(7, 200, rng, density), cb = random_cols(9, 200, rng, density);
    const auto a = from_cols(ca), b = from_cols(cb);
    PearsonAccumulator whole(0, 7, 0, 9), h1(0, 7, 0, 9), h2(0, 7, 0, 9);
    whole.accumulate(a, b);
    h1.accumulate(a, b, 0, 77);
    h2.accumulate(a, b, 77, 200);
    h1.merge(h2);
    CHECK(h1.n() == whole.n());
    for (std::size_t k = 0; k < whole.sum_xy().size(); ++k)
      CHECK(std::abs(h1.sum_xy()[k] - whole.sum_xy()[k]) <= 1e-9);
    for (std::size_t k = 0; k < 7; ++k) CHECK(std::abs(h1.sum_x2()[k] - whole.sum_x2()[k]) <= 1e-9);
  }
  PearsonAccumulator other(0, 1, 0, 1);
  PearsonAccumulator mine(0, 2, 0, 2);
  CHECK_THROWS_AS(mine.merge(other), Error);
}

TEST_CASE("streaming MPPC matches the naive two-pass oracle") {
  std::mt19937_64 rng(5);
  SUBCASE("dense 100 x 8 x 12") {
    const auto ca = random_cols(8, 100, rng, 1.0), cb = random_cols(12, 100, rng, 1.0);
    check_against_oracle(run_mppc(job(from_cols(ca), from_cols(cb))), ca, cb, 1e-6);
  }
  SUBCASE("sparse 10^4 x 256 features per side, small tiles") {
    const auto ca = random_cols(256, 10000, rng, 0.02), cb = random_cols(256, 10000, rng, 0.02);
    auto spec = job(from_cols(ca), from_cols(cb));
    spec.tile_a = 37;
    spec.tile_b = 50;
    spec.token_chunk = 999;
    check_against_oracle(run_mppc(spec), ca, cb, 1e-6);
  }
  SUBCASE("mixed density uses the dense path") {
    const auto ca = random_cols(16, 500, rng, 0.3), cb = random_cols(10, 500, rng, 0.02);
    check_against_oracle(run_mppc(job(from_cols(ca), from_cols(cb))), ca, cb, 1e-6);
  }
}

TEST_CASE("self-match, negation and zero variance") {
  std::mt19937_64 rng(8);
  const auto ca = random_cols(6, 300, rng, 1.0);
  const auto a = from_cols(ca);
  const auto t = run_mppc(job(a, a));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(t.entries[i].rho == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.entries[i].best_feature_b == i);
  }

  // B = {-A0, B'}: the max picks B' whenever rho(A0, B') > -1.
  oracle::Rows cb{ca[0], random_cols(1, 300, rng, 1.0)[0]};
  for (double& v : cb[0]) v = -v;
  const auto tb = run_mppc(job(from_cols({ca[0]}), from_cols(cb)));
  CHECK(tb.entries[0].best_feature_b == 1);
  CHECK(tb.entries[0].rho == doctest::Approx(oracle::pearson(ca[0], cb[1])));

  oracle::Rows with_const = ca;
  with_const.push_back(std::vector<double>(300, 0.0));
  with_const.push_back(std::vector<double>(300, 2.5));
  const auto tc = run_mppc(job(from_cols(with_const), a));
  CHECK(tc.undefined_count() == 2);
  CHECK_FALSE(tc.entries[6].defined);
  CHECK_FALSE(tc.entries[7].defined);
  CHECK(tc.mean_rho() == doctest::Approx(1.0));
}

TEST_CASE("positive affine invariance") {
  std::mt19937_64 rng(9);
  const auto ca = random_cols(5, 400, rng, 1.0), cb = random_cols(7, 400, rng, 1.0);
  auto cb2 = cb;
  for (std::size_t f = 0; f < cb2.size(); ++f)
    for (double& v : cb2[f]) v = (1.5 + double(f)) * v + 0.25 * double(f) - 1.0;
  const auto t1 = run_mppc(job(from_cols(ca), from_cols(cb)));
  const auto t2 = run_mppc(job(from_cols(ca), from_cols(cb2)));
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(t1.entries[i].best_feature_b == t2.entries[i].best_feature_b);
    CHECK(std::abs(t1.entries[i].rho - t2.entries[i].rho) <= 1e-12);
  }
}

TEST_CASE("max dominates sampled pairs and ties go to the lowest index") {
  std::mt19937_64 rng(10);
  const auto ca = random_cols(20, 600, rng, 0.2), cb = random_cols(30, 600, rng, 0.2);
  const auto a = from_cols(ca), b = from_cols(cb);
  const auto t = run_mppc(job(a, b));
  PearsonAccumulator acc(0, 20, 0, 30);
  acc.accumulate(a, b);
  std::uniform_int_distribution<std::size_t> pick(0, 29);
  for (std::size_t i = 0; i < 20; ++i) {
    for (int k = 0; k < 100; ++k) {
      const double r = acc.rho(i, pick(rng));
      if (!std::isnan(r) && t.entries[i].defined) CHECK(t.entries[i].rho >= r);
    }
  }

  // Duplicate columns: every tiling and thread count must report the first copy.
  oracle::Rows dup{cb[3], cb[3], cb[3]};
  for (std::size_t threads : {1, 3}) {
    set_num_threads(threads);
    for (std::size_t tile : {1, 2, 3}) {
      auto spec = job(from_cols({cb[3]}), from_cols(dup));
      spec.tile_b = tile;
      spec.tile_a = 1;
      CHECK(run_mppc(spec).entries[0].best_feature_b == 0);
    }
  }
  set_num_threads(0);
}

TEST_CASE("tiled parallel runs are deterministic") {
  std::mt19937_64 rng(12);
  const auto a = from_cols(random_cols(64, 2000, rng, 0.04)), b = from_cols(random_cols(48, 2000, rng, 0.04));
  auto spec = job(a, b);
  set_num_threads(1);
  const auto one = run_mppc(spec);
  set_num_threads(4);
  spec.tile_a = 5;
  spec.tile_b = 7;
  const auto four = run_mppc(spec);
  set_num_threads(0);
  write_match_csv(one, scratch("one.csv"));
  write_match_csv(four, scratch("four.csv"));
  CHECK(read_file(scratch("one.csv")) == read_file(scratch("four.csv")));
}

TEST_CASE("cross-layer max, layer metadata and depth histogram") {
  std::mt19937_64 rng(14);
  const auto l0 = random_cols(4, 500, rng, 1.0), l1 = random_cols(3, 500, rng, 1.0);
  CorrelationJobSpec spec;
  spec.a = {{0, from_cols(l0)}, {1, from_cols(l1)}};
  spec.b = spec.a;
  const auto t = run_mppc(spec);
  REQUIRE(t.entries.size() == 7);
  for (const auto& e : t.entries) {
    CHECK(e.layer_a == e.layer_b);
    CHECK(e.feature_a == e.best_feature_b);
  }
  const Matrix h = depth_histogram(t, 2, 2);
  CHECK(h(0, 0) == 4);
  CHECK(h(1, 1) == 3);
  CHECK(h(0, 1) == 0);
  CHECK(h(1, 0) == 0);

  // Planted layer swap: side B layer 1 holds side A layer 0's features.
  CorrelationJobSpec swapped;
  swapped.a = {{0, from_cols(l0)}, {1, from_cols(l1)}};
  swapped.b = {{0, from_cols(l1)}, {1, from_cols(l0)}};
  const Matrix hs = depth_histogram(run_mppc(swapped), 2, 2);
  CHECK(hs(0, 1) == 4);
  CHECK(hs(1, 0) == 3);

  SUBCASE("same-layer restriction") {
    swapped.same_layer_only = true;
    const auto r = run_mppc(swapped);
    for (const auto& e : r.entries) CHECK(e.layer_a == e.layer_b);
    CHECK(r.mean_rho() < 0.5);
  }
  SUBCASE("misaligned sides are rejected") {
    CorrelationJobSpec bad;
    bad.a = {{0, from_cols(l0)}};
    bad.b = {{0, from_cols(random_cols(2, 499, rng, 1.0))}};
    CHECK_THROWS_AS(run_mppc(bad), Error);
  }
}

TEST_CASE("mppc_difference") {
  MatchTable m, s;
  for (std::size_t i = 0; i < 3; ++i) {
    m.entries.push_back({i, 0, 0, 0, 0.9 - 0.1 * double(i), true});
    s.entries.push_back({i, 0, 0, 0, 0.8, true});
  }
  const auto self = mppc_difference(m, m);
  for (double d : self.deltas) CHECK(d == 0.0);
  CHECK(self.share_small == 1.0);

  const auto r = mppc_difference(m, s);
  CHECK(r.deltas[0] == doctest::Approx(0.1));
  CHECK(r.deltas[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.deltas[2] == doctest::Approx(-0.1));
  CHECK(r.share_small == doctest::Approx(1.0 / 3.0));

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  MatchTable big_m, big_s;
  for (std::size_t i = 0; i < 97; ++i) {
    big_m.entries.push_back({i, 0, 0, 0, u(rng), true});
    big_s.entries.push_back({i, 0, 0, 0, u(rng), true});
  }
  const auto q = mppc_difference(big_m, big_s);
  const double qs[5] = {0.05, 0.25, 0.5, 0.75, 0.95};
  for (int k = 0; k < 5; ++k) CHECK(q.quantiles[k] == doctest::Approx(oracle::quantile(q.deltas, qs[k])));
  std::size_t total = 0;
  for (auto c : q.histogram) total += c;
  CHECK(total == 97);

  MatchTable short_table = s;
  short_table.entries.pop_back();
  CHECK_THROWS_AS(mppc_difference(m, short_table), Error);
}

TEST_CASE("skyline protocols and reverse direction") {
  std::mt19937_64 rng(20);
  const auto base = from_cols(random_cols(6, 400, rng, 1.0));
  SkylineAssets same{{{0, base}}, {{0, base}}};
  const auto t = run_mppc(skyline_protocols(SkylineKind::sae_seed_variant, same));
  for (const auto& e : t.entries) CHECK(e.rho == doctest::Approx(1.0));
  CHECK_THROWS_AS(skyline_protocols(SkylineKind::model_seed_variant, {{{0, base}}, {}}), Error);

  // Side B = A's features plus nuisance features: A->B is perfect, B->A is not.
  auto cols = random_cols(4, 400, rng, 1.0);
  auto wider = cols;
  for (auto& c : random_cols(4, 400, rng, 1.0)) wider.push_back(c);
  SkylineAssets asym{{{0, from_cols(cols)}}, {{0, from_cols(wider)}}};
  const auto fwd = skyline_protocols(SkylineKind::model_seed_variant, asym);
  const auto rev = skyline_protocols(SkylineKind::model_seed_variant, asym, true);
  CHECK(fwd.direction == "p->p'");
  CHECK(rev.direction == "p'->p");
  CHECK(run_mppc(fwd).mean_rho() > run_mppc(rev).mean_rho() + 0.2);
}

TEST_CASE("neuron mode on real models") {
  RandomModelOptions o;
  o.arch = Architecture::mamba;
  o.n_layers = 2;
  o.d_model = 8;
  o.vocab = 16;
  o.d_state = 4;
  const Model m = build_random_model(o, 3);
  CorpusParams cp;
  cp.vocab = 16;
  cp.docs = 8;
  cp.length = 20;
  const auto corpus = gen_token_corpus(cp).clean;
  const auto spec = neuron_mode_sources(m, m, corpus);
  CHECK(spec.mode == MppcMode::neuron);
  REQUIRE(spec.a.size() == 2);
  CHECK(spec.a[0].features.n_features == 16);
  const auto t = run_mppc(spec);
  for (const auto& e : t.entries)
    if (e.defined) CHECK(e.rho == doctest::Approx(1.0));

  RandomModelOptions small = o;
  small.max_len = 10;
  const Model short_ctx = build_random_model(small, 4);
  CHECK_THROWS_AS(neuron_mode_sources(m, short_ctx, corpus), Error);
}

TEST_CASE("match table CSV round trip") {
  MatchTable t;
  t.entries.push_back({0, 1, 5, 2, 0.123456789012345, true});
  t.entries.push_back({1, 1, 0, 0, 0.0, false});
  write_match_csv(t, scratch("t.csv"));
  const auto back = read_match_csv(scratch("t.csv"));
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].rho == t.entries[0].rho);
  CHECK(back.entries[0].best_feature_b == 5);
  CHECK_FALSE(back.entries[1].defined);
  save_match_summary(t, scratch("t.bin"));
  CHECK(load_tensor_file(scratch("t.bin")).meta["undefined"] == 1);
}

TEST_CASE("planted recovery bookkeeping") {
  std::mt19937_64 rng(17);
  const std::size_t f = 12, n = 400;
  const auto planted = random_cols(f, n, rng, 0.2);

  // Side A: permuted, positively rescaled copies plus one dead feature.
  oracle::Rows a(f + 1, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < f; ++j)
    for (std::size_t t = 0; t < n; ++t) a[(j * 5) % f][t] = 2.0 * planted[j][t];
  // Side B: only the first half of the planted features survive.
  oracle::Rows b(f / 2, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < f / 2; ++j) b[j] = planted[j];
  for (std::size_t t = 0; t < n; ++t) b[0][t] += 1e-3 * double(t % 7);  // still clearly best, not exact

  SparseCodes codes;
  codes.f = f;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < f; ++j)
      if (planted[j][t] != 0.0) {
        codes.index.push_back(std::uint32_t(j));
        codes.value.push_back(planted[j][t]);
      }
    codes.offsets.push_back(codes.index.size());
  }
  const FeatureMatrix fa = from_cols(a);
  const FeatureMatrix cf = codes_as_features(codes, fa.rows);
  CHECK(cf.n_features == f);

  const MatchTable t = run_mppc(job(fa, from_cols(b)));
  const PlantedRecovery r = planted_recovery(cf, fa, t, 0.8);
  REQUIRE(r.recovered.size() == f);
  double sum = 0.0;
  std::size_t defined = 0, above = 0;
  for (std::size_t j = 0; j < f; ++j) {
    CHECK(r.recovered[j] == (j * 5) % f);
    CHECK(r.recovery_rho[j] == doctest::Approx(1.0).epsilon(1e-9));
    // independent recomputation of the joined MPPC
    const auto ref = oracle::all_pairs_max({a[r.recovered[j]]}, b)[0];
    CHECK(r.mppc[j] == doctest::Approx(ref.rho).epsilon(1e-9));
    sum += ref.rho;
    ++defined;
    above += ref.rho > 0.8;
  }
  CHECK(r.mean_recovery == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.mean_mppc == doctest::Approx(sum / double(defined)).epsilon(1e-12));
  CHECK(r.frac_above == doctest::Approx(double(above) / double(f)));
  CHECK(above >= f / 2);
  const auto j = r.to_json();
  CHECK(j.at("planted") == f);
  CHECK(j.at("defined") == f);

  CHECK_THROWS_AS(planted_recovery(cf, fa, run_mppc(job(from_cols(b), fa)), 0.8), Error);
}
