#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "univlab/error.hpp"
#include "univlab/harvest.hpp"
#include "univlab/sae.hpp"

using namespace univlab;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "univlab_test_sae";
  std::filesystem::create_directories(dir);
  return dir / name;
}

SaeParams random_params(std::size_t d, std::size_t f, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 0.5);
  SaeParams p = sae_init(d, f, 1);
  for (double& v : p.w_enc.data()) v = g(rng);
  for (double& v : p.dec_rows.data()) v = g(rng);
  for (double& v : p.b_enc) v = g(rng);
  for (double& v : p.b_dec) v = g(rng);
  return p;
}

double mean_loss(const SaeParams& p, const std::vector<double>& batch, double lambda) {
  const std::size_t n = batch.size() / p.d;
  double s = 0.0;
  for (std::size_t t = 0; t < n; ++t) s += sae_loss(p, {batch.data() + t * p.d, p.d}, lambda).total;
  return s / double(n);
}

ActivationStream gaussian_stream(std::size_t n, std::size_t d, std::uint64_t seed, std::size_t rank = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  ActivationStream s;
  s.site = "gauss";
  s.dim = d;
  Matrix basis(rank ? rank : d, d);
  for (double& v : basis.data()) v = g(rng);
  for (std::size_t t = 0; t < n; ++t) {
    Vector x(d, 0.0);
    if (rank) {
      for (std::size_t r = 0; r < rank; ++r) {
        const double z = g(rng);
        for (std::size_t i = 0; i < d; ++i) x[i] += z * basis(r, i);
      }
    } else {
      for (double& v : x) v = g(rng);
    }
    s.push({t, 1}, x);
  }
  return s;
}

}  // namespace

TEST_CASE("init contract") {
  const SaeParams p = sae_init(64, 2048, 3);
  p.validate();
  const double target = std::sqrt(2.0 * 64.0 / 2048.0);
  const Matrix wd = p.w_dec();
  for (std::size_t j = 0; j < p.f; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < p.d; ++i) n += wd(i, j) * wd(i, j);
    CHECK(std::abs(std::sqrt(n) - target) <= 1e-12);
  }
  for (std::size_t j = 0; j < p.f; ++j)
    for (std::size_t i = 0; i < p.d; ++i) REQUIRE(p.w_enc(j, i) == wd(i, j));
  for (double v : p.b_enc) CHECK(v == 0.0);
  for (double v : p.b_dec) CHECK(v == 0.0);

  const auto s = gaussian_stream(1000, 64, 9);
  double err = 0.0, norm = 0.0;
  for (std::size_t t = 0; t < s.size(); ++t) {
    const Vector xh = sae_decode(p, sae_encode(p, s.at(t)));
    for (std::size_t i = 0; i < 64; ++i) {
      err += (xh[i] - s.at(t)[i]) * (xh[i] - s.at(t)[i]);
      norm += s.at(t)[i] * s.at(t)[i];
    }
  }
  // Each of F columns contributes an independent ReLU(w.x) w term; summing
  // their second moments gives E||x - x_hat||^2 / ||x||^2 ~= 2D/F.
  CHECK(std::sqrt(err / norm) == doctest::Approx(std::sqrt(2.0 * 64.0 / 2048.0)).epsilon(0.06));

  CHECK_THROWS_AS(sae_init(16, 16, 0), Error);
}

TEST_CASE("encode and decode") {
  const SaeParams p = sae_init(8, 32, 5);
  CHECK(sae_encode(p, Vector(8, 0.0)) == Vector(32, 0.0));
  CHECK(sae_decode(p, Vector(32, 0.0)) == p.b_dec);

  const auto col = p.decoder_column(7);
  const Vector f = sae_encode(p, Vector(col.begin(), col.end()));
  CHECK(f[7] == doctest::Approx(2.0 * 8.0 / 32.0).epsilon(1e-12));

  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Vector x(8);
  for (double& v : x) v = g(rng);
  for (double v : sae_encode(p, x)) CHECK(v >= 0.0);

  Vector one_hot(32, 0.0);
  one_hot[4] = 2.5;
  const Vector xh = sae_decode(p, one_hot);
  for (std::size_t i = 0; i < 8; ++i) CHECK(xh[i] == doctest::Approx(2.5 * p.decoder_column(4)[i]));

  CHECK_THROWS_AS(sae_encode(p, Vector(7, 0.0)), Error);
  CHECK_THROWS_AS(sae_decode(p, Vector(31, 0.0)), Error);
}

TEST_CASE("loss composes from encode and decode") {
  std::mt19937_64 rng(4);
  const SaeParams p = random_params(6, 12, rng);
  Vector x{0.3, -1.0, 0.2, 0.9, -0.4, 0.05};
  const Vector f = sae_encode(p, x);
  const Vector xh = sae_decode(p, f);
  double mse = 0.0, s = 0.0;
  for (std::size_t i = 0; i < 6; ++i) mse += (x[i] - xh[i]) * (x[i] - xh[i]);
  for (double v : f) s += v;
  const SaeLoss l = sae_loss(p, x, 0.25);
  CHECK(l.mse == doctest::Approx(mse));
  CHECK(l.l1 == doctest::Approx(0.25 * s));
  CHECK(l.total == doctest::Approx(mse + 0.25 * s));

  const SaeParams z = sae_init(6, 12, 0);
  CHECK(sae_loss(z, Vector(6, 0.0), 1.0).total == 0.0);
  CHECK_THROWS_AS(sae_loss(z, x, -1.0), Error);
}

TEST_CASE("gradients match central finite differences") {
  std::mt19937_64 rng(11);
  const std::size_t d = 8, f = 16, n = 5;
  const double lambda = 0.1, h = 1e-5;
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> batch(n * d);
  for (double& v : batch) v = g(rng);
  SaeParams p = random_params(d, f, rng);
  const SaeGradResult r = sae_grad(p, batch, lambda);
  CHECK(r.loss.total == doctest::Approx(mean_loss(p, batch, lambda)).epsilon(1e-12));

  auto fd = [&](std::vector<double>& tensor, std::size_t i) {
    const double keep = tensor[i];
    tensor[i] = keep + h;
    const double up = mean_loss(p, batch, lambda);
    tensor[i] = keep - h;
    const double down = mean_loss(p, batch, lambda);
    tensor[i] = keep;
    return (up - down) / (2.0 * h);
  };
  int checked = 0;
  for (int probe = 0; probe < 200 && checked < 50 * 4; ++probe) {
    for (int t = 0; t < 4; ++t) {
      std::vector<double>* tensor = nullptr;
      const std::vector<double>* grad = nullptr;
      switch (t) {
        case 0: tensor = &p.w_enc.data(), grad = &r.grad.w_enc.data(); break;
        case 1: tensor = &p.b_enc, grad = &r.grad.b_enc; break;
        case 2: tensor = &p.dec_rows.data(), grad = &r.grad.dec_rows.data(); break;
        default: tensor = &p.b_dec, grad = &r.grad.b_dec; break;
      }
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, tensor->size() - 1)(rng);
      const double num = fd(*tensor, i);
      const double ana = (*grad)[i];
      const double scale = std::max({std::abs(num), std::abs(ana), 1e-6});
      CHECK(std::abs(num - ana) / scale <= 1e-4);
      ++checked;
    }
  }

  SUBCASE("zero batch with zero biases gives zero gradients") {
    const SaeParams z = sae_init(d, f, 2);
    const SaeGradResult zr = sae_grad(z, std::vector<double>(3 * d, 0.0), lambda);
    for (const auto* v : {&zr.grad.w_enc.data(), &zr.grad.b_enc, &zr.grad.dec_rows.data(), &zr.grad.b_dec})
      for (double x : *v) CHECK(x == 0.0);
  }
  SUBCASE("inactive features get no encoder gradient") {
    for (std::size_t j = 0; j < f; ++j) {
      bool active = false;
      for (std::size_t t = 0; t < n; ++t) active |= sae_encode(p, {batch.data() + t * d, d})[j] > 0.0;
      if (!active) {
        for (double v : r.grad.w_enc.row(j)) CHECK(v == 0.0);
        CHECK(r.grad.b_enc[j] == 0.0);
      }
    }
  }
}

TEST_CASE("adam matches a scalar hand trace") {
  AdamConfig cfg;
  cfg.lr = 1e-2;
  std::vector<double> p{1.0}, m{0.0}, v{0.0};
  adam_update(p, std::vector<double>{1.0}, m, v, 1, cfg);
  // Step one: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  CHECK(p[0] == doctest::Approx(1.0 - 1e-2 / (1.0 + 1e-8)).epsilon(1e-14));

  // Two steps, reference recurrence written out.
  double rp = 0.5, rm = 0.0, rv = 0.0;
  std::vector<double> q{0.5}, qm{0.0}, qv{0.0};
  const double grads[2] = {0.3, -0.7};
  for (int s = 1; s <= 2; ++s) {
    const double gg = grads[s - 1];
    rm = 0.9 * rm + 0.1 * gg;
    rv = 0.999 * rv + 0.001 * gg * gg;
    const double mh = rm / (1.0 - std::pow(0.9, s));
    const double vh = rv / (1.0 - std::pow(0.999, s));
    rp -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    adam_update(q, std::vector<double>{gg}, qm, qv, s, cfg);
    CHECK(q[0] == doctest::Approx(rp).epsilon(1e-15));
  }

  std::vector<double> z{2.0}, zm{0.0}, zv{0.0};
  adam_update(z, std::vector<double>{0.0}, zm, zv, 1, cfg);
  CHECK(z[0] == 2.0);
}

TEST_CASE("training reduces reconstruction error on low-rank data") {
  const auto s = gaussian_stream(8192, 16, 3, 4);
  SaeTrainConfig cfg;
  cfg.f = 64;
  cfg.lambda_l1 = 0.0;
  cfg.batch_size = 256;
  cfg.epochs = 12;
  cfg.adam.lr = 3e-3;
  cfg.log_every = 32;
  const auto r = train_sae(s, cfg);
  REQUIRE(r.timeline.size() >= 2);
  CHECK(r.timeline.back().mse < 0.05 * r.timeline.front().mse);
  CHECK(r.steps == 12 * 32);
  CHECK_FALSE(r.stream_exhausted);
}

TEST_CASE("l1 weight trades sparsity against reconstruction on planted codes") {
  auto m = make_synthetic_model(32, 64, 1);
  m.active_per_sample = 3.0;
  const auto codes = gen_sparse_codes(m, 40000, 2);
  const auto pair = gen_synthetic_pair(m, m, codes);
  SaeTrainConfig cfg;
  cfg.f = 128;
  cfg.batch_size = 128;
  cfg.epochs = 4;
  cfg.adam.lr = 3e-3;
  cfg.renormalize_decoder = true;
  cfg.lambda_l1 = 0.1;
  const auto loose = train_sae(pair.a, cfg);
  cfg.lambda_l1 = 0.5;
  const auto tight = train_sae(pair.a, cfg);
  const double l0 = tight.timeline.back().l0;
  CHECK(l0 < loose.timeline.back().l0);
  CHECK(tight.timeline.back().mse > loose.timeline.back().mse);
  CHECK(l0 < 0.5 * tight.timeline.front().l0);
  CHECK(l0 >= 0.5 * m.active_per_sample);
  CHECK(l0 <= 3.0 * m.active_per_sample);
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  const auto s = gaussian_stream(2048, 8, 5);
  SaeTrainConfig cfg;
  cfg.f = 24;
  cfg.batch_size = 128;
  cfg.total_steps = 20;
  cfg.epochs = 2;
  cfg.seed = 4;
  cfg.log_every = 5;
  const auto a = train_sae(s, cfg);
  const auto b = train_sae(s, cfg);
  save_sae(a.params, scratch("a.sae"), {{"step", a.steps}, {"config_hash", cfg.hash()}});
  save_sae(b.params, scratch("b.sae"), {{"step", b.steps}, {"config_hash", cfg.hash()}});
  const std::string bytes_a = [&] {
    std::ifstream in(scratch("a.sae"), std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  }();
  const std::string bytes_b = [&] {
    std::ifstream in(scratch("b.sae"), std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  }();
  CHECK(bytes_a == bytes_b);
  nlohmann::json meta;
  CHECK(load_sae(scratch("a.sae"), &meta) == a.params);
  CHECK(meta["step"] == 20);
  CHECK(a.timeline.size() == 4);

  write_metrics_csv(a.timeline, scratch("m.csv"));
  std::ifstream in(scratch("m.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,mse,l0,l1");

  cfg.total_steps = 100;
  const auto short_run = train_sae(s, cfg);
  CHECK(short_run.stream_exhausted);
  CHECK(short_run.steps == 32);
  CHECK_FALSE(short_run.warnings.empty());
}

TEST_CASE("config json round trip and validation") {
  SaeTrainConfig c;
  c.lambda_l1 = 0.3;
  c.total_steps = 7;
  const auto back = SaeTrainConfig::from_json(c.to_json());
  CHECK(back.hash() == c.hash());
  CHECK_THROWS_AS(SaeTrainConfig::from_json({{"lambda_l1", -1.0}}), Error);
  CHECK_THROWS_AS(SaeTrainConfig::from_json({{"lambda", 1.0}}), Error);
}

TEST_CASE("encode_stream sparse records") {
  const SaeParams p = sae_init(8, 32, 1);
  ActivationStream zero;
  zero.dim = 8;
  for (std::size_t t = 0; t < 10; ++t) zero.push({t, 1}, Vector(8, 0.0));
  const FeatureMatrix z = encode_stream(p, zero);
  CHECK(z.size() == 10);
  CHECK(z.index.empty());

  const auto s = gaussian_stream(300, 8, 2);
  const FeatureMatrix fm = encode_stream(p, s);
  fm.validate();
  REQUIRE(fm.size() == s.size());
  for (std::size_t t = 0; t < s.size(); ++t) {
    CHECK(fm.rows[t] == s.rows[t]);
    CHECK(fm.dense_row(t) == sae_encode(p, s.at(t)));
  }
  for (double v : fm.value) CHECK(v > 0.0);

  save_features(fm, scratch("f.bin"));
  CHECK(load_features(scratch("f.bin")) == fm);
}
