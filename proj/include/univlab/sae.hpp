#pragma once

// Sparse autoencoder: f = ReLU(W_enc x + b_enc), x_hat = W_dec f + b_dec,
// trained on ||x - x_hat||^2 + lambda * sum(f) with Adam.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "univlab/harvest.hpp"
#include "univlab/numerics.hpp"

namespace univlab {

// The decoder is kept as F x D (row j is decoder column j) so that per-feature
// work touches contiguous memory; w_dec() materializes the D x F view.
struct SaeParams {
  std::size_t d = 0;
  std::size_t f = 0;
  Matrix w_enc;    // F x D
  Vector b_enc;    // F
  Matrix dec_rows; // F x D
  Vector b_dec;    // D

  Matrix w_dec() const { return dec_rows.transposed(); }
  std::span<const double> decoder_column(std::size_t j) const { return dec_rows.row(j); }
  void validate() const;

  friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

// Same shapes as SaeParams; reused for gradients and Adam moments.
using SaeTensors = SaeParams;
SaeTensors zeros_like(const SaeParams& p);

// Decoder columns uniform on [-1, 1] then scaled to norm sqrt(2D/F);
// W_enc = W_dec^T; biases zero.
SaeParams sae_init(std::size_t d, std::size_t f, std::uint64_t seed);

Vector sae_encode(const SaeParams& p, std::span<const double> x);
Vector sae_decode(const SaeParams& p, std::span<const double> f);

struct SaeLoss {
  double total = 0.0;
  double mse = 0.0;
  double l1 = 0.0;  // lambda-weighted
};

SaeLoss sae_loss(const SaeParams& p, std::span<const double> x, double lambda_l1);

struct SaeGradResult {
  SaeTensors grad;
  SaeLoss loss;         // batch mean
  double mean_l0 = 0.0;
  double mean_sum_f = 0.0;
};

// Gradients of the batch-mean loss. batch is row-major, count x D. Encoding
// runs in parallel; accumulation is serial in sample order, so results do not
// depend on the thread count.
SaeGradResult sae_grad(const SaeParams& p, std::span<const double> batch, double lambda_l1);

struct AdamConfig {
  double lr = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  SaeTensors m;
  SaeTensors v;
  std::uint64_t step = 0;
};

AdamState adam_init(const SaeParams& p);
// One bias-corrected update of a flat parameter block; `step` is the 1-based
// step number.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::uint64_t step, const AdamConfig& cfg);
void adam_step(SaeParams& p, const SaeTensors& grad, AdamState& state, const AdamConfig& cfg);

struct SaeTrainConfig {
  std::size_t f = 0;  // dictionary size; 0 means expansion * D
  std::size_t expansion = 8;
  double lambda_l1 = 1e-3;
  double warmup_fraction = 0.05;  // linear lambda ramp over this share of steps
  AdamConfig adam;
  std::size_t batch_size = 1024;
  std::size_t total_steps = 0;  // 0 means epochs * floor(N / batch)
  std::size_t epochs = 1;       // passes allowed over the stream
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  bool renormalize_decoder = false;
  std::size_t dead_window = 100000;  // samples without firing before a feature counts as dead

  void validate() const;
  nlohmann::json to_json() const;
  static SaeTrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct SaeMetricRow {
  std::size_t step = 0;
  double mse = 0.0;
  double l0 = 0.0;
  double l1 = 0.0;  // mean sum of feature activations
};

struct SaeTrainResult {
  SaeParams params;
  std::vector<SaeMetricRow> timeline;
  std::size_t steps = 0;
  std::size_t samples_seen = 0;
  std::size_t dead_features = 0;
  bool stream_exhausted = false;
  std::vector<std::string> warnings;
};

SaeTrainResult train_sae(const ActivationStream& stream, const SaeTrainConfig& cfg);

// Checkpoint: tensors w_enc (F x D), b_enc, w_dec (D x F), b_dec with meta
// {d, f, step, config_hash}.
void save_sae(const SaeParams& p, const std::filesystem::path& path, const nlohmann::json& meta = {});
SaeParams load_sae(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

void write_metrics_csv(const std::vector<SaeMetricRow>& rows, const std::filesystem::path& path);

// Per-token sparse feature activations (CSR). Stored values are nonzero;
// SAE encodings only ever store positive values.
struct FeatureMatrix {
  std::string source;  // site name or label
  std::size_t n_features = 0;
  std::vector<ActivationRow> rows;
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  std::size_t size() const { return offsets.size() - 1; }
  Vector dense_row(std::size_t t) const;
  double density() const;
  void push_dense(const ActivationRow& row, std::span<const double> v);
  void validate() const;

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

FeatureMatrix encode_stream(const SaeParams& p, const ActivationStream& stream);
// Raw activations as features (neuron baseline). Non-positive entries are
// kept, so this is sparse only where the activation is exactly zero.
FeatureMatrix stream_as_features(const ActivationStream& stream);

void save_features(const FeatureMatrix& m, const std::filesystem::path& path);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace univlab
