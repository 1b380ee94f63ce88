#include "univlab/sae.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "univlab/error.hpp"
#include "univlab/parallel.hpp"
#include "univlab/simd.hpp"
#include "univlab/tensor_io.hpp"

namespace univlab {

void SaeParams::validate() const {
  UNIV_CHECK(f > d, config, "sae: dictionary size F=" + std::to_string(f) + " must exceed D=" + std::to_string(d));
  UNIV_CHECK(w_enc.rows() == f && w_enc.cols() == d && dec_rows.rows() == f && dec_rows.cols() == d &&
                 b_enc.size() == f && b_dec.size() == d,
             shape, "sae: parameter shapes disagree with (D, F)");
  UNIV_CHECK(w_enc.all_finite() && dec_rows.all_finite(), value, "sae: non-finite weights");
  for (const Vector* v : {&b_enc, &b_dec})
    for (double x : *v) UNIV_CHECK(std::isfinite(x), value, "sae: non-finite bias");
}

SaeTensors zeros_like(const SaeParams& p) {
  SaeTensors z;
  z.d = p.d;
  z.f = p.f;
  z.w_enc = Matrix(p.f, p.d);
  z.b_enc.assign(p.f, 0.0);
  z.dec_rows = Matrix(p.f, p.d);
  z.b_dec.assign(p.d, 0.0);
  return z;
}

SaeParams sae_init(std::size_t d, std::size_t f, std::uint64_t seed) {
  UNIV_CHECK(d > 0 && f > d, config, "sae_init: need F > D > 0 (got D=" + std::to_string(d) + ", F=" +
                                         std::to_string(f) + ")");
  SaeParams p = zeros_like(SaeParams{d, f, {}, {}, {}, {}});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double target = std::sqrt(2.0 * double(d) / double(f));
  for (std::size_t j = 0; j < f; ++j) {
    auto col = p.dec_rows.row(j);
    for (double& v : col) v = u(rng);
    const double s = target / norm2(col);
    for (double& v : col) v *= s;
  }
  p.w_enc = p.dec_rows;
  return p;
}

namespace {

void check_dim(const SaeParams& p, std::size_t n, const char* what) {
  UNIV_CHECK(n == p.d, shape, std::string(what) + ": input width " + std::to_string(n) + " != D=" + std::to_string(p.d));
}

// Pre-activations into `pre`; returns nothing, caller applies ReLU.
void preactivate(const SaeParams& p, std::span<const double> x, std::span<double> pre) {
  matvec_into(p.w_enc, x, pre);
  for (std::size_t j = 0; j < p.f; ++j) pre[j] += p.b_enc[j];
}

}  // namespace

Vector sae_encode(const SaeParams& p, std::span<const double> x) {
  check_dim(p, x.size(), "sae_encode");
  for (double v : x) UNIV_CHECK(std::isfinite(v), value, "sae_encode: non-finite input");
  Vector f(p.f);
  preactivate(p, x, f);
  for (double& v : f) v = v > 0.0 ? v : 0.0;
  return f;
}

Vector sae_decode(const SaeParams& p, std::span<const double> f) {
  UNIV_CHECK(f.size() == p.f, shape, "sae_decode: code width " + std::to_string(f.size()) + " != F=" +
                                         std::to_string(p.f));
  Vector x = p.b_dec;
  for (std::size_t j = 0; j < p.f; ++j)
    if (f[j] != 0.0) simd::axpy(f[j], p.dec_rows.row(j).data(), x.data(), p.d);
  return x;
}

SaeLoss sae_loss(const SaeParams& p, std::span<const double> x, double lambda_l1) {
  UNIV_CHECK(lambda_l1 >= 0.0, config, "sae_loss: negative lambda");
  const Vector f = sae_encode(p, x);
  const Vector xh = sae_decode(p, f);
  SaeLoss l;
  for (std::size_t i = 0; i < p.d; ++i) l.mse += (x[i] - xh[i]) * (x[i] - xh[i]);
  double s = 0.0;
  for (double v : f) s += v;
  l.l1 = lambda_l1 * s;
  l.total = l.mse + l.l1;
  return l;
}

SaeGradResult sae_grad(const SaeParams& p, std::span<const double> batch, double lambda_l1) {
  UNIV_CHECK(lambda_l1 >= 0.0, config, "sae_grad: negative lambda");
  UNIV_CHECK(!batch.empty() && batch.size() % p.d == 0, shape, "sae_grad: batch is not a whole number of rows");
  const std::size_t n = batch.size() / p.d;
  const double inv_n = 1.0 / double(n);

  struct Sample {
    std::vector<std::uint32_t> active;
    Vector f;   // values of active features
    Vector df;  // dL/dpre for active features
    Vector g;   // dL/dx_hat
    double mse = 0.0;
  };
  std::vector<Sample> samples(n);
  parallel_for(n, [&](std::size_t t) {
    const std::span<const double> x = batch.subspan(t * p.d, p.d);
    Sample& s = samples[t];
    Vector pre(p.f);
    preactivate(p, x, pre);
    Vector xh = p.b_dec;
    for (std::size_t j = 0; j < p.f; ++j) {
      if (pre[j] > 0.0) {
        s.active.push_back(static_cast<std::uint32_t>(j));
        s.f.push_back(pre[j]);
        simd::axpy(pre[j], p.dec_rows.row(j).data(), xh.data(), p.d);
      }
    }
    s.g.resize(p.d);
    for (std::size_t i = 0; i < p.d; ++i) {
      const double e = xh[i] - x[i];
      s.mse += e * e;
      s.g[i] = 2.0 * e * inv_n;
    }
    s.df.resize(s.active.size());
    for (std::size_t k = 0; k < s.active.size(); ++k)
      s.df[k] = simd::dot(p.dec_rows.row(s.active[k]).data(), s.g.data(), p.d) + lambda_l1 * inv_n;
  });

  SaeGradResult r;
  r.grad = zeros_like(p);
  for (std::size_t t = 0; t < n; ++t) {
    const Sample& s = samples[t];
    const double* x = batch.data() + t * p.d;
    for (std::size_t i = 0; i < p.d; ++i) r.grad.b_dec[i] += s.g[i];
    double sum_f = 0.0;
    for (std::size_t k = 0; k < s.active.size(); ++k) {
      const std::size_t j = s.active[k];
      simd::axpy(s.f[k], s.g.data(), r.grad.dec_rows.row(j).data(), p.d);
      simd::axpy(s.df[k], x, r.grad.w_enc.row(j).data(), p.d);
      r.grad.b_enc[j] += s.df[k];
      sum_f += s.f[k];
    }
    r.loss.mse += s.mse * inv_n;
    r.mean_sum_f += sum_f * inv_n;
    r.mean_l0 += double(s.active.size()) * inv_n;
  }
  r.loss.l1 = lambda_l1 * r.mean_sum_f;
  r.loss.total = r.loss.mse + r.loss.l1;
  return r;
}

AdamState adam_init(const SaeParams& p) { return {zeros_like(p), zeros_like(p), 0}; }

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t step, const AdamConfig& cfg) {
  UNIV_CHECK(grad.size() == param.size() && m.size() == param.size() && v.size() == param.size(), shape,
             "adam: tensor size mismatch");
  UNIV_CHECK(step >= 1, contract, "adam: step numbers start at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    param[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
  }
}

void adam_step(SaeParams& p, const SaeTensors& grad, AdamState& state, const AdamConfig& cfg) {
  UNIV_CHECK(grad.d == p.d && grad.f == p.f && state.m.d == p.d && state.m.f == p.f, shape,
             "adam: gradient or state shape disagrees with parameters");
  const std::uint64_t step = ++state.step;
  adam_update(p.w_enc.data(), grad.w_enc.data(), state.m.w_enc.data(), state.v.w_enc.data(), step, cfg);
  adam_update(p.b_enc, grad.b_enc, state.m.b_enc, state.v.b_enc, step, cfg);
  adam_update(p.dec_rows.data(), grad.dec_rows.data(), state.m.dec_rows.data(), state.v.dec_rows.data(), step, cfg);
  adam_update(p.b_dec, grad.b_dec, state.m.b_dec, state.v.b_dec, step, cfg);
}

// ---- training ----------------------------------------------------------------

void SaeTrainConfig::validate() const {
  UNIV_CHECK(lambda_l1 >= 0.0, config, "sae config: lambda_l1 must be >= 0");
  UNIV_CHECK(adam.lr > 0.0, config, "sae config: lr must be > 0");
  UNIV_CHECK(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0,
             config, "sae config: Adam hyperparameters out of range");
  UNIV_CHECK(batch_size > 0, config, "sae config: batch_size must be > 0");
  UNIV_CHECK(epochs > 0, config, "sae config: epochs must be > 0");
  UNIV_CHECK(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, config, "sae config: warmup_fraction outside [0, 1]");
  UNIV_CHECK(f > 0 || expansion > 1, config, "sae config: need f or an expansion > 1");
}

nlohmann::json SaeTrainConfig::to_json() const {
  return {{"f", f},
          {"expansion", expansion},
          {"lambda_l1", lambda_l1},
          {"warmup_fraction", warmup_fraction},
          {"lr", adam.lr},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"eps", adam.eps},
          {"batch_size", batch_size},
          {"total_steps", total_steps},
          {"epochs", epochs},
          {"seed", seed},
          {"log_every", log_every},
          {"renormalize_decoder", renormalize_decoder},
          {"dead_window", dead_window}};
}

SaeTrainConfig SaeTrainConfig::from_json(const nlohmann::json& j) {
  SaeTrainConfig c;
  try {
    static const std::set<std::string> known = {"f",          "expansion",   "lambda_l1", "warmup_fraction",
                                                 "lr",         "beta1",       "beta2",     "eps",
                                                 "batch_size", "total_steps", "epochs",    "seed",
                                                 "log_every",  "renormalize_decoder", "dead_window"};
    for (const auto& [k, v] : j.items())
      UNIV_CHECK(known.count(k), config, "sae config: unknown key '" + k + "'");
    c.f = j.value("f", c.f);
    c.expansion = j.value("expansion", c.expansion);
    c.lambda_l1 = j.value("lambda_l1", c.lambda_l1);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.renormalize_decoder = j.value("renormalize_decoder", c.renormalize_decoder);
    c.dead_window = j.value("dead_window", c.dead_window);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("sae config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string SaeTrainConfig::hash() const { return crc64_hex(to_json().dump()); }

SaeTrainResult train_sae(const ActivationStream& stream, const SaeTrainConfig& cfg) {
  cfg.validate();
  const std::size_t d = stream.dim;
  const std::size_t f = cfg.f ? cfg.f : cfg.expansion * d;
  const std::size_t n = stream.size();
  UNIV_CHECK(d > 0 && stream.values.size() == n * d, shape, "train_sae: malformed activation stream");
  UNIV_CHECK(n >= cfg.batch_size, value,
             "train_sae: stream has " + std::to_string(n) + " rows, fewer than one batch of " +
                 std::to_string(cfg.batch_size));

  SaeTrainResult res;
  res.params = sae_init(d, f, cfg.seed);
  SaeParams& p = res.params;
  AdamState adam = adam_init(p);

  const std::size_t per_epoch = n / cfg.batch_size;
  const std::size_t available = per_epoch * cfg.epochs;
  std::size_t steps = cfg.total_steps ? cfg.total_steps : available;
  if (steps > available) {
    res.stream_exhausted = true;
    res.warnings.push_back("stream exhausted after " + std::to_string(available) + " of " + std::to_string(steps) +
                           " requested steps");
    steps = available;
  }
  const std::size_t warm = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * double(steps)));

  // Epoch 0 follows stream order (already buffer-shuffled); later epochs use a
  // seeded permutation.
  std::mt19937_64 order_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::vector<std::size_t> last_fire(f, 0);
  Vector batch(cfg.batch_size * d);
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t epoch = step / per_epoch;
    const std::size_t slot = step % per_epoch;
    if (slot == 0 && epoch > 0) std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto row = stream.at(order[slot * cfg.batch_size + b]);
      std::copy(row.begin(), row.end(), batch.begin() + b * d);
    }
    const double ramp = warm == 0 ? 1.0 : std::min(1.0, double(step + 1) / double(warm));
    const double lambda = cfg.lambda_l1 * ramp;
    SaeGradResult g = sae_grad(p, batch, lambda);
    UNIV_CHECK(std::isfinite(g.loss.total), value, "train_sae: loss diverged at step " + std::to_string(step));

    // A feature's b_enc gradient is nonzero iff it fired somewhere in the batch.
    for (std::size_t j = 0; j < f; ++j)
      if (g.grad.b_enc[j] != 0.0) last_fire[j] = res.samples_seen + cfg.batch_size;
    res.samples_seen += cfg.batch_size;

    adam_step(p, g.grad, adam, cfg.adam);
    if (cfg.renormalize_decoder) {
      for (std::size_t j = 0; j < f; ++j) {
        auto col = p.dec_rows.row(j);
        const double nn = norm2(col);
        if (nn > 0.0)
          for (double& v : col) v /= nn;
      }
    }
    const std::size_t done = step + 1;
    if ((cfg.log_every && done % cfg.log_every == 0) || done == steps)
      res.timeline.push_back({done, g.loss.mse, g.mean_l0, g.mean_sum_f});
  }
  res.steps = steps;
  for (std::size_t j = 0; j < f; ++j)
    if (last_fire[j] == 0 || res.samples_seen - last_fire[j] >= cfg.dead_window) ++res.dead_features;
  return res;
}

// ---- files -------------------------------------------------------------------

void save_sae(const SaeParams& p, const std::filesystem::path& path, const nlohmann::json& meta) {
  p.validate();
  TensorFile tf;
  tf.meta = meta.is_object() ? meta : nlohmann::json::object();
  tf.meta["format"] = "univlab-sae";
  tf.meta["version"] = 1;
  tf.meta["d"] = p.d;
  tf.meta["f"] = p.f;
  tf.tensors.push_back({"w_enc", {p.f, p.d}, p.w_enc.data()});
  tf.tensors.push_back({"b_enc", {p.f}, p.b_enc});
  tf.tensors.push_back({"w_dec", {p.d, p.f}, p.w_dec().data()});
  tf.tensors.push_back({"b_dec", {p.d}, p.b_dec});
  save_tensor_file(tf, path);
}

SaeParams load_sae(const std::filesystem::path& path, nlohmann::json* meta) {
  const TensorFile tf = load_tensor_file(path);
  UNIV_CHECK(tf.meta.value("format", "") == "univlab-sae", io, path.string() + " is not an SAE checkpoint");
  SaeParams p;
  try {
    p.d = tf.meta.at("d");
    p.f = tf.meta.at("f");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::shape, path.string() + ": SAE header lacks d/f");
  }
  auto take = [&](const char* name, std::vector<std::size_t> shape) {
    const NamedTensor& t = tf.get(name);
    UNIV_CHECK(t.shape == shape, shape, path.string() + ": tensor " + name + " has the wrong shape");
    return t.data;
  };
  p.w_enc = Matrix(p.f, p.d);
  p.w_enc.data() = take("w_enc", {p.f, p.d});
  p.b_enc = take("b_enc", {p.f});
  Matrix wd(p.d, p.f);
  wd.data() = take("w_dec", {p.d, p.f});
  p.dec_rows = wd.transposed();
  p.b_dec = take("b_dec", {p.d});
  p.validate();
  if (meta) *meta = tf.meta;
  return p;
}

void write_metrics_csv(const std::vector<SaeMetricRow>& rows, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(17);
  os << "step,mse,l0,l1\n";
  for (const auto& r : rows) os << r.step << ',' << r.mse << ',' << r.l0 << ',' << r.l1 << '\n';
  write_file_atomic(path, os.str());
}

// ---- feature records ---------------------------------------------------------

Vector FeatureMatrix::dense_row(std::size_t t) const {
  Vector v(n_features, 0.0);
  for (std::size_t k = offsets[t]; k < offsets[t + 1]; ++k) v[index[k]] = value[k];
  return v;
}

double FeatureMatrix::density() const {
  if (size() == 0 || n_features == 0) return 0.0;
  return double(index.size()) / (double(size()) * double(n_features));
}

void FeatureMatrix::push_dense(const ActivationRow& row, std::span<const double> v) {
  UNIV_CHECK(v.size() == n_features, shape, "feature matrix: row width mismatch");
  rows.push_back(row);
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j] != 0.0) {
      index.push_back(static_cast<std::uint32_t>(j));
      value.push_back(v[j]);
    }
  }
  offsets.push_back(index.size());
}

void FeatureMatrix::validate() const {
  UNIV_CHECK(!offsets.empty() && offsets.front() == 0 && offsets.back() == index.size() &&
                 index.size() == value.size() && rows.size() == size(),
             shape, "feature matrix: inconsistent CSR arrays");
  for (std::size_t t = 0; t < size(); ++t) {
    UNIV_CHECK(offsets[t] <= offsets[t + 1], shape, "feature matrix: offsets not monotone");
    for (std::size_t k = offsets[t]; k < offsets[t + 1]; ++k) {
      UNIV_CHECK(index[k] < n_features, shape, "feature matrix: feature index out of range");
      UNIV_CHECK(k == offsets[t] || index[k - 1] < index[k], shape, "feature matrix: indices not strictly sorted");
      UNIV_CHECK(value[k] != 0.0 && std::isfinite(value[k]), value, "feature matrix: stored zero or non-finite value");
    }
  }
}

FeatureMatrix encode_stream(const SaeParams& p, const ActivationStream& stream) {
  check_dim(p, stream.dim, "encode_stream");
  const std::size_t n = stream.size();
  const std::size_t chunks = std::max<std::size_t>(1, std::min(n, num_threads()));
  std::vector<FeatureMatrix> parts(chunks);
  parallel_chunks(n, chunks, [&](std::size_t b, std::size_t e, std::size_t c) {
    FeatureMatrix& m = parts[c];
    m.n_features = p.f;
    for (std::size_t t = b; t < e; ++t) m.push_dense(stream.rows[t], sae_encode(p, stream.at(t)));
  });
  FeatureMatrix out;
  out.source = stream.site;
  out.n_features = p.f;
  for (const auto& m : parts) {
    const std::size_t base = out.index.size();
    out.rows.insert(out.rows.end(), m.rows.begin(), m.rows.end());
    out.index.insert(out.index.end(), m.index.begin(), m.index.end());
    out.value.insert(out.value.end(), m.value.begin(), m.value.end());
    for (std::size_t t = 1; t < m.offsets.size(); ++t) out.offsets.push_back(base + m.offsets[t]);
  }
  return out;
}

FeatureMatrix stream_as_features(const ActivationStream& stream) {
  FeatureMatrix out;
  out.source = stream.site;
  out.n_features = stream.dim;
  for (std::size_t t = 0; t < stream.size(); ++t) out.push_dense(stream.rows[t], stream.at(t));
  return out;
}

void save_features(const FeatureMatrix& m, const std::filesystem::path& path) {
  m.validate();
  TensorFile tf;
  tf.meta = {{"format", "univlab-features"}, {"version", 1}, {"source", m.source},
             {"n_features", m.n_features},   {"count", m.size()}};
  auto as_f64 = [](const auto& v) { return std::vector<double>(v.begin(), v.end()); };
  std::vector<double> doc(m.size()), pos(m.size());
  for (std::size_t t = 0; t < m.size(); ++t) {
    UNIV_CHECK(m.rows[t].doc < (1ULL << 53), value, "feature records: document id too large to store");
    doc[t] = double(m.rows[t].doc);
    pos[t] = double(m.rows[t].pos);
  }
  tf.tensors.push_back({"offsets", {m.offsets.size()}, as_f64(m.offsets)});
  tf.tensors.push_back({"index", {m.index.size()}, as_f64(m.index)});
  tf.tensors.push_back({"value", {m.value.size()}, m.value});
  tf.tensors.push_back({"doc", {m.size()}, doc});
  tf.tensors.push_back({"pos", {m.size()}, pos});
  save_tensor_file(tf, path);
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  const TensorFile tf = load_tensor_file(path);
  UNIV_CHECK(tf.meta.value("format", "") == "univlab-features", io, path.string() + " is not a feature record file");
  FeatureMatrix m;
  m.source = tf.meta.value("source", "");
  m.n_features = tf.meta.value("n_features", std::size_t{0});
  const auto& off = tf.get("offsets").data;
  const auto& idx = tf.get("index").data;
  m.offsets.assign(off.begin(), off.end());
  m.index.assign(idx.begin(), idx.end());
  m.value = tf.get("value").data;
  const auto& doc = tf.get("doc").data;
  const auto& pos = tf.get("pos").data;
  UNIV_CHECK(doc.size() == pos.size(), shape, path.string() + ": row metadata length mismatch");
  m.rows.resize(doc.size());
  for (std::size_t t = 0; t < doc.size(); ++t)
    m.rows[t] = {static_cast<std::uint64_t>(doc[t]), static_cast<std::uint32_t>(pos[t])};
  m.validate();
  return m;
}

}  // namespace univlab
