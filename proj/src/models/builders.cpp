#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "univlab/error.hpp"
#include "univlab/models.hpp"
#include "univlab/parallel.hpp"
#include "univlab/tasks.hpp"

namespace univlab {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = n(rng);
  return m;
}

RmsNorm unit_norm(std::size_t d) { return RmsNorm{true, Vector(d, 1.0), Vector(d, 0.0), 1e-6}; }

RmsNorm no_norm() { return RmsNorm{false, {}, {}, 1e-6}; }

// softplus^{-1}(1)
const double kUnitDeltaBias = std::log(std::exp(1.0) - 1.0);

MambaBlockParams random_mamba_block(std::size_t d, std::size_t e, std::size_t n, std::size_t d_conv,
                                    std::mt19937_64& rng) {
  MambaBlockParams b;
  b.d_model = d;
  b.d_inner = e;
  b.d_state = n;
  b.d_conv = d_conv;
  b.norm = unit_norm(d);
  b.w_in = gaussian(e, d, 1.0 / std::sqrt(double(d)), rng);
  b.w_gate = gaussian(e, d, 1.0 / std::sqrt(double(d)), rng);
  b.w_out = gaussian(d, e, 1.0 / std::sqrt(double(e)), rng);
  b.conv_kernel = gaussian(e, d_conv, 1.0 / std::sqrt(double(d_conv)), rng);
  b.conv_bias = Vector(e, 0.0);
  std::normal_distribution<double> small(0.0, 0.02);
  for (double& v : b.conv_bias) v = small(rng);

  auto& s = b.ssm;
  s.a = Matrix(e, n);
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t k = 0; k < n; ++k) s.a(i, k) = -static_cast<double>(k + 1);
  s.w_delta = gaussian(e, e, 0.1 / std::sqrt(double(e)), rng);
  s.b_delta = Vector(e);
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  for (double& v : s.b_delta) v = std::log(std::expm1(std::exp(log_dt(rng))));
  s.w_b = gaussian(n, e, 1.0 / std::sqrt(double(e)), rng);
  s.w_c = gaussian(n, e, 1.0 / std::sqrt(double(e)), rng);
  s.w_skip = Vector(e, 1.0);
  return b;
}

TransformerBlockParams random_transformer_block(std::size_t d, std::size_t heads, std::size_t d_mlp,
                                                std::mt19937_64& rng) {
  TransformerBlockParams b;
  b.d_model = d;
  b.n_heads = heads;
  b.d_head = d / heads;
  b.d_mlp = d_mlp;
  b.norm_attn = unit_norm(d);
  b.norm_mlp = unit_norm(d);
  for (std::size_t h = 0; h < heads; ++h) {
    b.w_q.push_back(gaussian(b.d_head, d, 1.0 / std::sqrt(double(d)), rng));
    b.w_k.push_back(gaussian(b.d_head, d, 1.0 / std::sqrt(double(d)), rng));
    b.w_v.push_back(gaussian(b.d_head, d, 1.0 / std::sqrt(double(d)), rng));
    b.w_o.push_back(gaussian(d, b.d_head, 1.0 / std::sqrt(double(d)), rng));
  }
  b.w_up = gaussian(d_mlp, d, 1.0 / std::sqrt(double(d)), rng);
  b.b_up = Vector(d_mlp, 0.0);
  b.w_down = gaussian(d, d_mlp, 1.0 / std::sqrt(double(d_mlp)), rng);
  b.b_down = Vector(d, 0.0);
  return b;
}

// Tiny perturbation layer: random mixing, no norm, output scaled to ~1e-3.
MambaBlockParams noise_mamba_block(std::size_t d, std::size_t e, std::size_t n, std::mt19937_64& rng) {
  MambaBlockParams b = random_mamba_block(d, e, n, 4, rng);
  b.norm = no_norm();
  for (double& v : b.w_out.data()) v *= 1e-3;
  return b;
}

MambaBlockParams zero_mamba_block(std::size_t d, std::size_t e, std::size_t n) {
  MambaBlockParams b;
  b.d_model = d;
  b.d_inner = e;
  b.d_state = n;
  b.d_conv = 4;
  b.norm = no_norm();
  b.w_in = Matrix(e, d);
  b.w_gate = Matrix(e, d);
  b.w_out = Matrix(d, e);
  b.conv_kernel = Matrix(e, 4);
  b.conv_bias = Vector(e, 0.0);
  b.ssm.a = Matrix(e, n, -1e-3);
  b.ssm.w_delta = Matrix(e, e);
  b.ssm.b_delta = Vector(e, kUnitDeltaBias);
  b.ssm.w_b = Matrix(n, e);
  b.ssm.w_c = Matrix(n, e);
  b.ssm.w_skip = Vector(e, 0.0);
  return b;
}

TransformerBlockParams zero_attention_block(std::size_t d, std::size_t d_mlp) {
  TransformerBlockParams b;
  b.d_model = d;
  b.n_heads = 1;
  b.d_head = d;
  b.d_mlp = d_mlp;
  b.attn_scale = 1.0;
  b.norm_attn = no_norm();
  b.norm_mlp = no_norm();
  b.w_q = {Matrix(d, d)};
  b.w_k = {Matrix(d, d)};
  b.w_v = {Matrix(d, d)};
  b.w_o = {Matrix::identity(d)};
  b.w_up = Matrix(d_mlp, d);
  b.b_up = Vector(d_mlp, 0.0);
  b.w_down = Matrix(d, d_mlp);
  b.b_down = Vector(d, 0.0);
  return b;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void require_probe(const Model& m, const char* what, std::uint64_t seed) {
  const std::size_t distances[] = {8, 16, 32};
  const ProbeReport rep = probe_induction(m, distances, 100, seed ^ 0x9e3779b97f4a7c15ULL);
  for (const auto& [dist, acc] : rep.accuracy_by_distance)
    UNIV_CHECK(acc >= 0.99, contract,
               std::string(what) + ": construction sanity probe failed at distance " + std::to_string(dist) +
                   " (accuracy " + std::to_string(acc) + ")");
}

}  // namespace

Model build_random_model(const RandomModelOptions& o, std::uint64_t seed) {
  UNIV_CHECK(o.n_layers > 0 && o.d_model > 0 && o.vocab > 1, config, "random model: zero dimension");
  std::mt19937_64 rng(seed);
  Model m;
  auto& c = m.config;
  c.arch = o.arch;
  c.n_layers = o.n_layers;
  c.d_model = o.d_model;
  c.vocab = o.vocab;
  c.max_len = o.max_len;
  m.embed = gaussian(o.vocab, o.d_model, 1.0, rng);
  if (o.arch == Architecture::mamba) {
    c.d_state = o.d_state;
    c.d_conv = 4;
    c.expand = 2;
    for (std::size_t l = 0; l < o.n_layers; ++l)
      m.blocks.emplace_back(random_mamba_block(o.d_model, 2 * o.d_model, o.d_state, 4, rng));
  } else {
    UNIV_CHECK(o.n_heads > 0 && o.d_model % o.n_heads == 0, config,
               "random model: d_model must be divisible by n_heads");
    c.n_heads = o.n_heads;
    c.d_mlp = o.d_mlp;
    m.pos_embed = gaussian(o.max_len, o.d_model, 0.1, rng);
    for (std::size_t l = 0; l < o.n_layers; ++l)
      m.blocks.emplace_back(random_transformer_block(o.d_model, o.n_heads, o.d_mlp, rng));
  }
  m.unembed = gaussian(o.vocab, o.d_model, 1.0 / std::sqrt(double(o.d_model)), rng);
  m.final_norm = unit_norm(o.d_model);
  m.tags["kind"] = "random";
  m.validate();
  return m;
}

Model build_induction_transformer(std::size_t vocab, std::uint64_t seed, std::size_t max_len) {
  UNIV_CHECK(vocab >= 8, usage, "induction transformer: vocab must be >= 8");
  UNIV_CHECK(max_len >= 40, usage, "induction transformer: max_len must cover distance-32 probes");
  const std::size_t v = vocab, p = max_len;
  const std::size_t d = 3 * v + p;
  auto tok = [](std::size_t t) { return t; };
  auto prev = [v](std::size_t t) { return v + t; };
  auto out = [v](std::size_t t) { return 2 * v + t; };
  auto pos = [v](std::size_t i) { return 3 * v + i; };
  const double beta = 30.0, gamma = 10.0;

  Model m;
  auto& c = m.config;
  c.arch = Architecture::transformer;
  c.n_layers = 2;
  c.d_model = d;
  c.vocab = v;
  c.max_len = p;
  c.n_heads = 1;
  c.d_mlp = 4;
  m.embed = Matrix(v, d);
  for (std::size_t t = 0; t < v; ++t) m.embed(t, tok(t)) = 1.0;
  m.pos_embed = Matrix(p, d);
  for (std::size_t i = 0; i < p; ++i) m.pos_embed(i, pos(i)) = 1.0;
  m.unembed = Matrix(v, d);
  for (std::size_t t = 0; t < v; ++t) m.unembed(t, out(t)) = 1.0;
  m.final_norm = no_norm();

  // Layer 0: position i attends to i-1 and copies its token into `prev`.
  TransformerBlockParams l0 = zero_attention_block(d, c.d_mlp);
  for (std::size_t i = 1; i < p; ++i) l0.w_q[0](pos(i - 1), pos(i)) = beta;
  for (std::size_t i = 0; i < p; ++i) l0.w_k[0](pos(i), pos(i)) = 1.0;
  for (std::size_t t = 0; t < v; ++t) l0.w_v[0](prev(t), tok(t)) = 1.0;

  // Layer 1: the current token queries `prev`; the matched position's token
  // is copied into the output subspace.
  TransformerBlockParams l1 = zero_attention_block(d, c.d_mlp);
  for (std::size_t t = 0; t < v; ++t) {
    l1.w_q[0](prev(t), tok(t)) = beta;
    l1.w_k[0](prev(t), prev(t)) = 1.0;
    l1.w_v[0](out(t), tok(t)) = gamma;
  }
  m.blocks.emplace_back(std::move(l0));
  m.blocks.emplace_back(std::move(l1));
  m.tags = {{"kind", "induction_transformer"}, {"prev_token_layer", "0"}, {"induction_layer", "1"}};
  m.validate();
  require_probe(m, "induction transformer", seed);
  return m;
}

Model build_induction_mamba(std::size_t vocab, std::uint64_t seed) {
  UNIV_CHECK(vocab >= 8, usage, "induction mamba: vocab must be >= 8");
  const std::size_t v = vocab;
  const std::size_t d = 2 * v + 1;
  const std::size_t e = 2 * d;
  const std::size_t n = v;
  const std::size_t konst = v;
  auto out = [v](std::size_t t) { return v + 1 + t; };
  auto value_ch = [](std::size_t t) { return t; };
  auto key_ch = [v](std::size_t t) { return v + t; };
  auto query_ch = [v](std::size_t t) { return 2 * v + t; };
  const double k_in = 4.0;
  const double s4 = silu(k_in);

  std::mt19937_64 rng(seed);
  Model m;
  auto& c = m.config;
  c.arch = Architecture::mamba;
  c.n_layers = 4;
  c.d_model = d;
  c.vocab = v;
  c.max_len = 1024;
  c.d_state = n;
  c.d_conv = 4;
  c.expand = 2;
  m.embed = Matrix(v, d);
  for (std::size_t t = 0; t < v; ++t) {
    m.embed(t, t) = 1.0;
    m.embed(t, konst) = 1.0;
  }
  m.unembed = Matrix(v, d);
  for (std::size_t t = 0; t < v; ++t) m.unembed(t, out(t)) = 1.0;
  m.final_norm = no_norm();

  // Circuit layer. Value channels see token i-1 (conv lag 1), key channels
  // token i-2 (lag 2), query channels token i (lag 0). The state stores the
  // (key, value) outer product; the query selects the key row on readout.
  // Because the value arrives through lag 1, B's identity is written at B1+1.
  MambaBlockParams circuit = zero_mamba_block(d, e, n);
  for (std::size_t t = 0; t < v; ++t) {
    circuit.w_in(value_ch(t), t) = k_in;
    circuit.w_in(key_ch(t), t) = k_in;
    circuit.w_in(query_ch(t), t) = k_in;
    circuit.conv_kernel(value_ch(t), 1) = 1.0;
    circuit.conv_kernel(key_ch(t), 2) = 1.0;
    circuit.conv_kernel(query_ch(t), 0) = 1.0;
    circuit.ssm.w_b(t, key_ch(t)) = 1.0 / s4;
    circuit.ssm.w_c(t, query_ch(t)) = 1.0 / s4;
    circuit.w_gate(value_ch(t), konst) = k_in;
    circuit.w_out(out(t), value_ch(t)) = 0.5;
  }

  const std::size_t designated = 2;
  for (std::size_t l = 0; l < 4; ++l) {
    if (l == designated) m.blocks.emplace_back(circuit);
    else m.blocks.emplace_back(noise_mamba_block(d, e, n, rng));
  }
  m.tags = {{"kind", "induction_mamba"}, {"designated_layer", std::to_string(designated)}};
  m.validate();
  require_probe(m, "induction mamba", seed);
  return m;
}

Model build_ioi_mamba(std::uint64_t seed) {
  const IoiVocab& iv = IoiVocab::get();
  const std::size_t v = iv.size();
  const std::size_t names = IoiVocab::kNames;
  const std::size_t konst = v;
  auto count = [v](std::size_t k) { return v + 1 + k; };
  auto out = [v, names](std::size_t k) { return v + 1 + names + k; };
  const std::size_t d = v + 1 + 2 * names;
  const std::size_t e = 2 * d;
  const std::size_t n = 1;
  const double s4 = silu(4.0);

  std::mt19937_64 rng(seed);
  Model m;
  auto& c = m.config;
  c.arch = Architecture::mamba;
  c.n_layers = 4;
  c.d_model = d;
  c.vocab = v;
  c.max_len = 1024;
  c.d_state = n;
  c.d_conv = 4;
  c.expand = 2;
  m.embed = Matrix(v, d);
  for (std::size_t t = 0; t < v; ++t) {
    m.embed(t, t) = 1.0;
    m.embed(t, konst) = 1.0;
  }
  m.unembed = Matrix(v, d);
  for (std::size_t k = 0; k < names; ++k) m.unembed(IoiVocab::kFirstName + k, out(k)) = 1.0;
  m.final_norm = no_norm();

  // Counting layer: each name reaches the state one token after it appears
  // (conv lag 1) and the state accumulates per-name occurrence counts, which
  // are written into the `count` subspace.
  MambaBlockParams counting = zero_mamba_block(d, e, n);
  const std::size_t const_ch = names;
  counting.w_in(const_ch, konst) = 4.0;
  counting.conv_kernel(const_ch, 0) = 1.0;
  counting.ssm.w_b(0, const_ch) = 1.0 / s4;
  counting.ssm.w_c(0, const_ch) = 1.0 / s4;
  for (std::size_t k = 0; k < names; ++k) {
    counting.w_in(k, IoiVocab::kFirstName + k) = 4.0;
    counting.conv_kernel(k, 1) = 1.0;
    counting.w_gate(k, konst) = 4.0;
    counting.w_out(count(k), k) = 1.0 / (s4 * s4);
  }

  // Decision layer: SiLU(4 n) * SiLU(6 - 4 n) is large for n = 1, negative
  // for n = 2 and zero for n = 0, so names seen once win.
  MambaBlockParams decision = zero_mamba_block(d, e, n);
  for (double& a : decision.ssm.a.data()) a = -1.0;
  for (std::size_t k = 0; k < names; ++k) {
    decision.w_in(k, count(k)) = 4.0;
    decision.conv_kernel(k, 0) = 1.0;
    decision.w_gate(k, count(k)) = -4.0;
    decision.w_gate(k, konst) = 6.0;
    decision.ssm.w_skip[k] = 1.0;
    decision.w_out(out(k), k) = 1.0;
  }

  m.blocks.emplace_back(noise_mamba_block(d, e, n, rng));
  m.blocks.emplace_back(std::move(counting));
  m.blocks.emplace_back(std::move(decision));
  m.blocks.emplace_back(noise_mamba_block(d, e, n, rng));
  m.tags = {{"kind", "ioi_mamba"}, {"counting_layer", "1"}, {"decision_layer", "2"}};
  m.validate();

  std::mt19937_64 probe_rng(seed ^ 0x51ed270b27a7f1c3ULL);
  std::size_t correct = 0;
  const std::size_t trials = 100;
  for (std::size_t k = 0; k < trials; ++k) {
    const TaskInstance t = make_ioi_task(probe_rng, Corruption::none);
    const ForwardTrace tr = run_model(m, t.clean, Capture{});
    const auto last = tr.logits.at(t.clean.size() - 1);
    if (last[t.answer] > last[t.distractor]) ++correct;
  }
  UNIV_CHECK(correct == trials, contract, "ioi mamba: construction sanity probe failed");
  return m;
}

ProbeReport probe_induction(const Model& model, std::span<const std::size_t> distances,
                            std::size_t probes_per_distance, std::uint64_t seed) {
  ProbeReport rep;
  rep.probes_per_distance = probes_per_distance;
  std::mt19937_64 rng(seed);
  for (std::size_t dist : distances) {
    UNIV_CHECK(dist + 2 <= model.config.max_len, config,
               "probe distance " + std::to_string(dist) + " exceeds the model context");
    std::vector<TaskInstance> tasks;
    for (std::size_t k = 0; k < probes_per_distance; ++k)
      tasks.push_back(make_induction_task(model.config.vocab, dist, Corruption::none, rng, model.config.bos_id));
    std::vector<char> hit(tasks.size(), 0);
    parallel_for(tasks.size(), [&](std::size_t k) {
      const ForwardTrace tr = run_model(model, tasks[k].clean, Capture{});
      hit[k] = argmax(tr.logits.at(tasks[k].label("A2"))) == tasks[k].answer;
    });
    const auto hits = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), 1));
    rep.accuracy_by_distance[dist] =
        probes_per_distance == 0 ? 0.0 : double(hits) / double(probes_per_distance);
  }
  return rep;
}

}  // namespace univlab
