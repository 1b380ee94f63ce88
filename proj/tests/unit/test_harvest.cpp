#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "univlab/error.hpp"
#include "univlab/harvest.hpp"

using namespace univlab;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "univlab_test_harvest";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<std::pair<ActivationRow, double>> drain_all(std::size_t capacity, std::size_t n, std::uint64_t seed) {
  ShuffleBuffer buf(capacity, 1, seed);
  std::vector<std::pair<ActivationRow, double>> out;
  const ShuffleBuffer::Sink sink = [&](const ActivationRow& r, std::span<const double> v) {
    out.emplace_back(r, v[0]);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const double v = double(i);
    buf.push({i, 0}, {&v, 1}, sink);
  }
  buf.flush(sink);
  return out;
}

}  // namespace

TEST_CASE("prepare_document prepends bos and truncates including bos") {
  auto d = prepare_document(3, {5, 6, 7}, 0, 3);
  CHECK(d.tokens == TokenSeq{0, 5, 6});
  d = prepare_document(3, {0, 5}, 0, 1024);
  CHECK(d.tokens == TokenSeq{0, 5});
  CHECK_THROWS_AS(prepare_document(0, {1}, 0, 1), Error);
}

TEST_CASE("shuffle buffer with capacity one preserves order") {
  const auto out = drain_all(1, 50, 7);
  REQUIRE(out.size() == 50);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i].second == double(i));
}

TEST_CASE("shuffle buffer drains a permutation of each fill") {
  const auto out = drain_all(16, 40, 3);
  REQUIRE(out.size() == 40);
  // Full drain then refill: each block of 16 is a permutation of its inputs.
  for (std::size_t block = 0; block < 3; ++block) {
    std::set<double> seen;
    for (std::size_t i = block * 16; i < std::min<std::size_t>(40, block * 16 + 16); ++i) seen.insert(out[i].second);
    const std::size_t want = std::min<std::size_t>(16, 40 - block * 16);
    CHECK(seen.size() == want);
    CHECK(*seen.begin() == double(block * 16));
    CHECK(*seen.rbegin() == double(block * 16 + want - 1));
  }
  bool moved = false;
  for (std::size_t i = 0; i < out.size(); ++i) moved |= out[i].second != double(i);
  CHECK(moved);
  for (const auto& [row, v] : out) CHECK(double(row.doc) == v);
}

TEST_CASE("shuffle buffer is deterministic in its seed") {
  CHECK(drain_all(8, 30, 11) == drain_all(8, 30, 11));
  CHECK(drain_all(8, 30, 11) != drain_all(8, 30, 12));
}

TEST_CASE("collect_activations drops bos and eos rows and is a permutation of aligned rows") {
  RandomModelOptions o;
  o.arch = Architecture::mamba;
  o.n_layers = 2;
  o.d_model = 8;
  o.vocab = 16;
  o.d_state = 4;
  const Model m = build_random_model(o, 5);
  std::vector<TokenDocument> corpus;
  corpus.push_back(prepare_document(0, {3, 4, 15, 5}, 0));
  corpus.push_back(prepare_document(1, {7, 7, 7}, 0));
  const HookSite site = parse_hook_site("layer1.residual_post_block");

  const ActivationStream aligned = collect_aligned(m, corpus, site, TokenId{15});
  REQUIRE(aligned.size() == 6);
  CHECK(aligned.dim == 8);
  for (const auto& r : aligned.rows) {
    CHECK(r.pos != 0);
    CHECK(corpus[r.doc].tokens[r.pos] != 15);
  }

  HarvestOptions h;
  h.buffer_capacity = 4;
  h.seed = 9;
  h.eos_id = 15;
  const ActivationStream shuffled = collect_activations(m, corpus, site, h);
  REQUIRE(shuffled.size() == aligned.size());
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    bool found = false;
    for (std::size_t k = 0; k < shuffled.size(); ++k) {
      if (shuffled.rows[k].doc == aligned.rows[i].doc && shuffled.rows[k].pos == aligned.rows[i].pos) {
        found = true;
        CHECK(std::equal(aligned.at(i).begin(), aligned.at(i).end(), shuffled.at(k).begin()));
      }
    }
    CHECK(found);
  }

  SUBCASE("site must exist on the architecture") {
    CHECK_THROWS_AS(collect_aligned(m, corpus, parse_hook_site("layer0.mlp_neuron_post_activation")), Error);
  }
}

TEST_CASE("planted dictionaries: shared G gives identical streams") {
  const auto g = make_synthetic_model(8, 24, 1);
  g.validate();
  const auto codes = gen_sparse_codes(g, 500, 2);
  const auto pair = gen_synthetic_pair(g, g, codes);
  CHECK(pair.a.values == pair.b.values);
}

TEST_CASE("planted dictionaries: one-hot code reproduces its column") {
  const auto g = make_synthetic_model(6, 12, 4);
  SparseCodes c;
  c.f = 12;
  c.index = {5};
  c.value = {1.0};
  c.offsets = {0, 1};
  const auto pair = gen_synthetic_pair(g, g, c);
  for (std::size_t i = 0; i < 6; ++i) CHECK(pair.a.at(0)[i] == doctest::Approx(g.dictionary(i, 5)).epsilon(1e-15));
}

TEST_CASE("planted dictionaries: code statistics and rotation") {
  const auto g = make_synthetic_model(16, 64, 5);
  const auto codes = gen_sparse_codes(g, 4000, 6);
  const double mean_active = double(codes.index.size()) / double(codes.size());
  CHECK(mean_active == doctest::Approx(5.0).epsilon(0.05));
  for (double v : codes.value) CHECK((v >= 0.5 && v <= 1.5));

  const Matrix r = random_rotation(16, 8);
  const Matrix rrt = matmul(r, r.transposed());
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) CHECK(rrt(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));

  const auto gr = rotate_synthetic_model(g, 8);
  gr.validate();
  const auto pair = gen_synthetic_pair(g, gr, codes);
  // The code columns are the planted ground truth on both sides.
  const auto z3 = codes.column(3);
  CHECK(oracle::pearson(z3, z3) == doctest::Approx(1.0));
  // Inner products survive the rotation.
  for (std::size_t t = 0; t < 20; ++t) {
    CHECK(dot(pair.a.at(t), pair.a.at(t)) == doctest::Approx(dot(pair.b.at(t), pair.b.at(t))).epsilon(1e-10));
  }
}

TEST_CASE("token corpora") {
  SUBCASE("induction corpus honours distance and corruption") {
    CorpusParams p;
    p.kind = CorpusKind::induction;
    p.docs = 20;
    p.distance = 12;
    p.corruption = Corruption::b_corrupt;
    p.seed = 3;
    const auto c = gen_token_corpus(p);
    REQUIRE(c.tasks.size() == 20);
    for (const auto& t : c.tasks) {
      CHECK(t.label("A2") - t.label("A1") == 12);
      CHECK(t.clean[t.label("A1")] == t.clean[t.label("A2")]);
      CHECK(t.corrupted[t.label("B1")] != t.clean[t.label("B1")]);
      CHECK(t.clean.front() == 0);
    }
  }
  SUBCASE("ioi corpus labels") {
    CorpusParams p;
    p.kind = CorpusKind::ioi;
    p.docs = 30;
    p.corruption = Corruption::ioi_names;
    const auto c = gen_token_corpus(p);
    for (const auto& t : c.tasks) {
      CHECK(t.clean[t.label("IO")] == t.answer);
      CHECK(t.clean[t.label("S1")] == t.distractor);
      CHECK(t.clean[t.label("S2")] == t.distractor);
      CHECK(t.label("S2") > std::max(t.label("IO"), t.label("S1")));
    }
  }
  SUBCASE("kind names round trip") {
    for (auto k : {CorpusKind::induction, CorpusKind::ioi, CorpusKind::uniform})
      CHECK(parse_corpus_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_corpus_kind("wiki"), Error);
  }
}

TEST_CASE("corpus and shard files round trip") {
  CorpusParams p;
  p.docs = 5;
  p.length = 9;
  const auto c = gen_token_corpus(p);
  write_corpus(c.clean, scratch("c.ndjson"));
  const auto back = read_corpus(scratch("c.ndjson"));
  REQUIRE(back.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(back[i].tokens == c.clean[i].tokens);

  const auto g = make_synthetic_model(4, 8, 1);
  const auto pair = gen_synthetic_pair(g, g, gen_sparse_codes(g, 50, 2));
  write_activation_shard(pair.a, scratch("a.bin"), 2);
  CHECK(read_activation_shard(scratch("a.bin")) == pair.a);

  {
    std::fstream f(scratch("a.bin"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(20);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(read_activation_shard(scratch("a.bin")), Error);

  std::ofstream(scratch("bad.ndjson")) << "[1,2]\nnot json\n";
  CHECK_THROWS_AS(read_corpus(scratch("bad.ndjson")), Error);
}
