#include "univlab/harvest.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "univlab/error.hpp"
#include "univlab/parallel.hpp"
#include "univlab/tensor_io.hpp"

namespace univlab {

TokenDocument prepare_document(std::uint64_t id, TokenSeq tokens, TokenId bos, std::size_t max_len) {
  UNIV_CHECK(max_len >= 2, config, "truncation length must leave room for bos and one token");
  if (tokens.empty() || tokens.front() != bos) tokens.insert(tokens.begin(), bos);
  if (tokens.size() > max_len) tokens.resize(max_len);
  return {id, std::move(tokens)};
}

void ActivationStream::push(ActivationRow row, std::span<const double> v) {
  UNIV_CHECK(v.size() == dim, shape, "activation stream: vector width mismatch");
  rows.push_back(row);
  values.insert(values.end(), v.begin(), v.end());
}

ShuffleBuffer::ShuffleBuffer(std::size_t capacity, std::size_t dim, std::uint64_t seed)
    : capacity_(capacity), dim_(dim), rng_(seed) {
  UNIV_CHECK(capacity > 0, config, "shuffle buffer capacity must be positive");
}

void ShuffleBuffer::push(const ActivationRow& row, std::span<const double> v, const Sink& sink) {
  UNIV_CHECK(v.size() == dim_, shape, "shuffle buffer: vector width mismatch");
  rows_.push_back(row);
  values_.insert(values_.end(), v.begin(), v.end());
  if (rows_.size() == capacity_) drain(sink);
}

void ShuffleBuffer::flush(const Sink& sink) {
  if (!rows_.empty()) drain(sink);
}

void ShuffleBuffer::drain(const Sink& sink) {
  std::vector<std::size_t> order(rows_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_() % i);
    std::swap(order[i - 1], order[j]);
  }
  for (std::size_t k : order) sink(rows_[k], {values_.data() + k * dim_, dim_});
  rows_.clear();
  values_.clear();
}

namespace {

template <class Emit>
void harvest_docs(const Model& model, const std::vector<TokenDocument>& corpus, const HookSite& site,
                  std::optional<TokenId> eos_id, std::size_t batch_docs, Emit&& emit) {
  UNIV_CHECK(!corpus.empty(), value, "harvest: empty corpus");
  UNIV_CHECK(model.has_site(site), contract,
             "harvest: site " + to_string(site) + " does not exist on this " + to_string(model.config.arch) +
                 " model");
  const Capture cap{site};
  batch_docs = std::max<std::size_t>(1, batch_docs);
  for (std::size_t start = 0; start < corpus.size(); start += batch_docs) {
    const std::size_t end = std::min(corpus.size(), start + batch_docs);
    std::vector<SequenceTensor> captured(end - start);
    parallel_for(end - start, [&](std::size_t k) {
      const ForwardTrace tr = run_model(model, corpus[start + k].tokens, cap);
      captured[k] = site.kind == HookKind::logits ? tr.logits : tr.at(site);
    });
    for (std::size_t k = 0; k < captured.size(); ++k) {
      const TokenDocument& doc = corpus[start + k];
      for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
        if (i == 0 || doc.tokens[i] == model.config.bos_id) continue;
        if (eos_id && doc.tokens[i] == *eos_id) continue;
        emit(ActivationRow{doc.id, static_cast<std::uint32_t>(i)}, captured[k].at(i));
      }
    }
  }
}

}  // namespace

ActivationStream collect_activations(const Model& model, const std::vector<TokenDocument>& corpus,
                                     const HookSite& site, const HarvestOptions& options) {
  ActivationStream out;
  out.site = to_string(site);
  out.dim = model.site_width(site);
  ShuffleBuffer buffer(options.buffer_capacity, out.dim, options.seed);
  const ShuffleBuffer::Sink sink = [&](const ActivationRow& r, std::span<const double> v) { out.push(r, v); };
  harvest_docs(model, corpus, site, options.eos_id, options.batch_docs,
               [&](const ActivationRow& r, std::span<const double> v) { buffer.push(r, v, sink); });
  buffer.flush(sink);
  return out;
}

ActivationStream collect_aligned(const Model& model, const std::vector<TokenDocument>& corpus,
                                 const HookSite& site, std::optional<TokenId> eos_id) {
  ActivationStream out;
  out.site = to_string(site);
  out.dim = model.site_width(site);
  harvest_docs(model, corpus, site, eos_id, 64,
               [&](const ActivationRow& r, std::span<const double> v) { out.push(r, v); });
  return out;
}

// ---- planted dictionaries ----------------------------------------------------

void SyntheticFeatureModel::validate() const {
  UNIV_CHECK(dictionary.rows() == d && dictionary.cols() == f_true, shape, "synthetic model: dictionary shape");
  UNIV_CHECK(f_true > d, config, "synthetic model: F_true must exceed D (superposition regime)");
  UNIV_CHECK(active_per_sample > 0.0 && active_per_sample <= double(f_true), config,
             "synthetic model: active_per_sample outside (0, F_true]");
  UNIV_CHECK(magnitude_lo >= 0.0 && magnitude_hi >= magnitude_lo, config, "synthetic model: magnitude range");
  for (std::size_t j = 0; j < f_true; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += dictionary(i, j) * dictionary(i, j);
    UNIV_CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9, value, "synthetic model: dictionary column not unit norm");
  }
}

SyntheticFeatureModel make_synthetic_model(std::size_t d, std::size_t f_true, std::uint64_t seed) {
  UNIV_CHECK(f_true > d, config, "synthetic model: F_true must exceed D");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  SyntheticFeatureModel m;
  m.d = d;
  m.f_true = f_true;
  m.dictionary = Matrix(d, f_true);
  for (std::size_t j = 0; j < f_true; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      m.dictionary(i, j) = g(rng);
      n += m.dictionary(i, j) * m.dictionary(i, j);
    }
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) m.dictionary(i, j) /= n;
  }
  return m;
}

Matrix random_rotation(std::size_t d, std::uint64_t seed) {
  // Modified Gram-Schmidt on a Gaussian matrix gives a Haar-distributed
  // orthogonal matrix; rows are the basis vectors.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix q(d, d);
  for (double& v : q.data()) v = g(rng);
  for (std::size_t i = 0; i < d; ++i) {
    auto qi = q.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      const auto qk = q.row(k);
      const double proj = dot(qi, qk);
      for (std::size_t c = 0; c < d; ++c) qi[c] -= proj * qk[c];
    }
    const double n = norm2(qi);
    UNIV_CHECK(n > 1e-12, value, "random rotation: degenerate draw");
    for (double& v : qi) v /= n;
  }
  return q;
}

SyntheticFeatureModel rotate_synthetic_model(const SyntheticFeatureModel& base, std::uint64_t seed) {
  SyntheticFeatureModel m = base;
  m.dictionary = matmul(random_rotation(base.d, seed), base.dictionary);
  return m;
}

std::vector<double> SparseCodes::column(std::size_t j) const {
  std::vector<double> out(size(), 0.0);
  for (std::size_t t = 0; t < size(); ++t)
    for (std::size_t k = offsets[t]; k < offsets[t + 1]; ++k)
      if (index[k] == j) out[t] = value[k];
  return out;
}

SparseCodes gen_sparse_codes(const SyntheticFeatureModel& m, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double p = m.active_per_sample / double(m.f_true);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> mag(m.magnitude_lo, m.magnitude_hi);
  SparseCodes c;
  c.f = m.f_true;
  c.offsets.reserve(samples + 1);
  for (std::size_t t = 0; t < samples; ++t) {
    for (std::size_t j = 0; j < m.f_true; ++j) {
      if (u(rng) < p) {
        c.index.push_back(static_cast<std::uint32_t>(j));
        c.value.push_back(mag(rng));
      }
    }
    c.offsets.push_back(c.index.size());
  }
  return c;
}

SyntheticPair gen_synthetic_pair(const SyntheticFeatureModel& a, const SyntheticFeatureModel& b,
                                 const SparseCodes& codes) {
  UNIV_CHECK(a.f_true == b.f_true && codes.f == a.f_true, shape,
             "synthetic pair: dictionaries and codes must share F_true");
  SyntheticPair out;
  out.a.site = "synthetic.a";
  out.b.site = "synthetic.b";
  out.a.dim = a.d;
  out.b.dim = b.d;
  const std::size_t n = codes.size();
  out.a.rows.resize(n);
  out.b.rows.resize(n);
  out.a.values.assign(n * a.d, 0.0);
  out.b.values.assign(n * b.d, 0.0);
  // Dictionary columns as contiguous rows for the accumulation below.
  const Matrix ga = a.dictionary.transposed(), gb = b.dictionary.transposed();
  for (std::size_t t = 0; t < n; ++t) {
    out.a.rows[t] = out.b.rows[t] = ActivationRow{t, 1};
    double* xa = out.a.values.data() + t * a.d;
    double* xb = out.b.values.data() + t * b.d;
    for (std::size_t k = codes.offsets[t]; k < codes.offsets[t + 1]; ++k) {
      const std::size_t j = codes.index[k];
      const double z = codes.value[k];
      const auto ca = ga.row(j), cb = gb.row(j);
      for (std::size_t i = 0; i < a.d; ++i) xa[i] += z * ca[i];
      for (std::size_t i = 0; i < b.d; ++i) xb[i] += z * cb[i];
    }
  }
  out.planted.resize(a.f_true);
  for (std::size_t j = 0; j < a.f_true; ++j) out.planted[j] = j;
  return out;
}

// ---- token corpora -----------------------------------------------------------

const char* to_string(CorpusKind k) {
  switch (k) {
    case CorpusKind::induction: return "induction";
    case CorpusKind::ioi: return "ioi";
    case CorpusKind::uniform: return "uniform";
  }
  return "unknown";
}

CorpusKind parse_corpus_kind(std::string_view s) {
  for (CorpusKind k : {CorpusKind::induction, CorpusKind::ioi, CorpusKind::uniform})
    if (s == to_string(k)) return k;
  throw Error(ErrorKind::config, "unknown corpus kind '" + std::string(s) + "'");
}

TaskCorpus gen_token_corpus(const CorpusParams& p) {
  std::mt19937_64 rng(p.seed);
  TaskCorpus out;
  for (std::size_t d = 0; d < p.docs; ++d) {
    switch (p.kind) {
      case CorpusKind::uniform: {
        UNIV_CHECK(p.vocab >= 2 && p.length >= 2, config, "uniform corpus: vocab and length must be >= 2");
        std::uniform_int_distribution<TokenId> u(1, static_cast<TokenId>(p.vocab - 1));
        TokenSeq t{0};
        while (t.size() < p.length) t.push_back(u(rng));
        out.clean.push_back({d, std::move(t)});
        break;
      }
      case CorpusKind::induction: {
        TaskInstance t = make_induction_task(p.vocab, p.distance, p.corruption, rng);
        out.clean.push_back({d, t.clean});
        out.corrupted.push_back({d, t.corrupted});
        out.tasks.push_back(std::move(t));
        break;
      }
      case CorpusKind::ioi: {
        TaskInstance t = make_ioi_task(rng, p.corruption == Corruption::none ? Corruption::none
                                                                             : Corruption::ioi_names);
        out.clean.push_back({d, t.clean});
        out.corrupted.push_back({d, t.corrupted});
        out.tasks.push_back(std::move(t));
        break;
      }
    }
  }
  return out;
}

// ---- files -------------------------------------------------------------------

void write_corpus(const std::vector<TokenDocument>& docs, const std::filesystem::path& path) {
  std::string text;
  for (const auto& d : docs) {
    text += nlohmann::json(d.tokens).dump();
    text += '\n';
  }
  write_file_atomic(path, text);
}

std::vector<TokenDocument> read_corpus(const std::filesystem::path& path, TokenId bos, std::size_t max_len) {
  std::ifstream in(path);
  UNIV_CHECK(in.good(), io, "cannot open corpus " + path.string());
  std::vector<TokenDocument> docs;
  std::string line;
  for (std::uint64_t id = 0; std::getline(in, line); ++id) {
    if (line.empty()) continue;
    TokenSeq toks;
    try {
      toks = nlohmann::json::parse(line).get<TokenSeq>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::value, path.string() + ":" + std::to_string(id + 1) + ": not a token array");
    }
    docs.push_back(prepare_document(id, std::move(toks), bos, max_len));
  }
  return docs;
}

namespace {

std::filesystem::path sidecar(const std::filesystem::path& p) {
  auto s = p;
  s += ".json";
  return s;
}

}  // namespace

void write_activation_shard(const ActivationStream& s, const std::filesystem::path& path, std::uint64_t seed) {
  const std::size_t rec = 16 + 8 * s.dim;
  std::string bytes(rec * s.size(), '\0');
  for (std::size_t i = 0; i < s.size(); ++i) {
    char* r = bytes.data() + i * rec;
    const std::uint32_t pad = 0;
    std::memcpy(r, &s.rows[i].doc, 8);
    std::memcpy(r + 8, &s.rows[i].pos, 4);
    std::memcpy(r + 12, &pad, 4);
    std::memcpy(r + 16, s.values.data() + i * s.dim, 8 * s.dim);
  }
  write_file_atomic(path, bytes);
  const nlohmann::json meta = {{"site", s.site}, {"dim", s.dim},   {"count", s.size()},
                               {"seed", seed},   {"crc64", crc64_hex(bytes)}, {"record_bytes", rec}};
  write_file_atomic(sidecar(path), meta.dump(2) + "\n");
}

ActivationStream read_activation_shard(const std::filesystem::path& path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(sidecar(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, "shard sidecar " + sidecar(path).string() + ": " + e.what());
  }
  const std::string bytes = read_file(path);
  UNIV_CHECK(crc64_hex(bytes) == meta.at("crc64").get<std::string>(), checksum,
             "shard " + path.string() + ": CRC64 mismatch");
  ActivationStream s;
  s.site = meta.at("site");
  s.dim = meta.at("dim");
  const std::size_t count = meta.at("count");
  const std::size_t rec = 16 + 8 * s.dim;
  UNIV_CHECK(bytes.size() == rec * count, shape, "shard " + path.string() + ": size disagrees with sidecar");
  s.rows.resize(count);
  s.values.resize(count * s.dim);
  for (std::size_t i = 0; i < count; ++i) {
    const char* r = bytes.data() + i * rec;
    std::memcpy(&s.rows[i].doc, r, 8);
    std::memcpy(&s.rows[i].pos, r + 8, 4);
    std::memcpy(s.values.data() + i * s.dim, r + 16, 8 * s.dim);
  }
  return s;
}

}  // namespace univlab
