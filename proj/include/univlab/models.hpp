#pragma once

// Forward-only Transformer and Mamba engines with hook sites.
//
// Mamba block, per token i:
//   x_i = W_in r_i                          (conv_input_x)
//   g_i = SiLU(W_g r_i)
//   c_i = SiLU(Conv1D(x_i .. x_{i-d_conv+1}) + conv_bias)   (ssm_input_c)
//   h_i = F_a(c_i) o h_{i-1} + F_b(c_i)     (ssm_state_h)
//   s_i = <h_i, C(c_i)> + W_d o c_i
//   r'_i = r_i + W_o (s_i o g_i)
// with the selective parametrization
//   delta_i = softplus(W_delta c_i + b_delta)        (per channel)
//   F_a(c_i)[e][n] = exp(delta_i[e] * A[e][n])
//   F_b(c_i)[e][n] = delta_i[e] * (W_B c_i)[n] * c_i[e]
//   C(c_i) = W_C c_i

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "univlab/hooks.hpp"
#include "univlab/numerics.hpp"

namespace univlab {

enum class Architecture { transformer, mamba };

const char* to_string(Architecture arch);

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// Pre-block RMS normalization: y = x / rms(x) * scale + shift.
struct RmsNorm {
  bool enabled = true;
  Vector scale;
  Vector shift;
  double eps = 1e-6;

  Vector apply(std::span<const double> x) const;
};

struct SsmParams {
  Matrix a;        // d_inner x d_state, strictly negative
  Matrix w_delta;  // d_inner x d_inner
  Vector b_delta;  // d_inner
  Matrix w_b;      // d_state x d_inner
  Matrix w_c;      // d_state x d_inner
  Vector w_skip;   // d_inner (W_d)

  std::size_t d_inner() const { return a.rows(); }
  std::size_t d_state() const { return a.cols(); }
  void validate() const;
};

struct MambaBlockParams {
  std::size_t d_model = 0;
  std::size_t d_inner = 0;
  std::size_t d_state = 0;
  std::size_t d_conv = 4;

  RmsNorm norm;
  Matrix w_in;         // d_inner x d_model
  Matrix w_gate;       // d_inner x d_model
  Matrix w_out;        // d_model x d_inner
  Matrix conv_kernel;  // d_inner x d_conv; column k reads k tokens back
  Vector conv_bias;    // d_inner
  SsmParams ssm;

  void validate() const;
};

struct TransformerBlockParams {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t d_head = 0;
  std::size_t d_mlp = 0;
  double attn_scale = 0.0;  // 0 means 1/sqrt(d_head)

  RmsNorm norm_attn;
  RmsNorm norm_mlp;
  std::vector<Matrix> w_q;  // per head, d_head x d_model
  std::vector<Matrix> w_k;
  std::vector<Matrix> w_v;
  std::vector<Matrix> w_o;  // per head, d_model x d_head
  Matrix w_up;              // d_mlp x d_model
  Vector b_up;
  Matrix w_down;            // d_model x d_mlp
  Vector b_down;

  void validate() const;
};

using Block = std::variant<MambaBlockParams, TransformerBlockParams>;

struct ModelConfig {
  Architecture arch = Architecture::mamba;
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t vocab = 0;
  std::size_t max_len = 1024;
  // mamba
  std::size_t d_state = 0;
  std::size_t d_conv = 4;
  std::size_t expand = 2;
  // transformer
  std::size_t n_heads = 0;
  std::size_t d_mlp = 0;

  TokenId bos_id = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Model {
  ModelConfig config;
  Matrix embed;      // vocab x d_model
  Matrix pos_embed;  // max_len x d_model, may be empty
  Matrix unembed;    // vocab x d_model
  RmsNorm final_norm;
  std::vector<Block> blocks;
  std::map<std::string, std::string> tags;

  void validate() const;
  // Site exists in this architecture; position checks happen at run time.
  bool has_site(const HookSite& site) const;
  std::size_t site_width(const HookSite& site) const;
};

struct ScanResult {
  SequenceTensor s;        // length x d_inner
  SequenceTensor h_trace;  // length x (d_inner * d_state), h after each token
};

// Sequential selective scan from h_{-1} = 0. When `overrides` is given, the
// state at any overridden (site, position) is replaced before it is read by
// the readout and the next step. h_trace stays empty unless record_states.
ScanResult selective_ssm_scan(const SequenceTensor& c, const SsmParams& params,
                              const Interventions* overrides = nullptr, int layer = 0,
                              bool record_states = true);

struct BlockResult {
  SequenceTensor residual_out;
  ForwardTrace trace;
};

BlockResult mamba_block_forward(const MambaBlockParams& params, int layer,
                                const SequenceTensor& residual_in, const Capture& capture,
                                const Interventions* interventions = nullptr);

BlockResult transformer_block_forward(const TransformerBlockParams& params, int layer,
                                      const SequenceTensor& residual_in, const Capture& capture,
                                      const Interventions* interventions = nullptr);

// Embeds, runs every block, unembeds. Logits are always present in the trace.
ForwardTrace run_model(const Model& model, std::span<const TokenId> tokens, const Capture& capture,
                       const Interventions* interventions = nullptr);

// ---- constructed and random models -----------------------------------------

struct RandomModelOptions {
  Architecture arch = Architecture::mamba;
  std::size_t n_layers = 4;
  std::size_t d_model = 32;
  std::size_t vocab = 32;
  std::size_t max_len = 128;
  std::size_t d_state = 8;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 128;
};

Model build_random_model(const RandomModelOptions& opts, std::uint64_t seed);

// Two-layer attention-only model: a previous-token head in layer 0 and an
// induction head in layer 1. Throws contract error when its built-in probe
// accuracy is below 99%.
Model build_induction_transformer(std::size_t vocab, std::uint64_t seed, std::size_t max_len = 80);

// Four Mamba layers; layer 2 implements induction through its local
// convolution (value = token i-1, key = token i-2) and an associative SSM
// state queried with the current token. Layers 0, 1 and 3 are small random
// perturbation layers. Tag "designated_layer" names the circuit layer.
Model build_induction_mamba(std::size_t vocab, std::uint64_t seed);

// IOI name-binding Mamba over the fixed IOI vocabulary: a counting layer that
// writes each name into its state one token after the name appears, and a
// decision layer that prefers names seen exactly once.
Model build_ioi_mamba(std::uint64_t seed);

struct ProbeReport {
  std::map<std::size_t, double> accuracy_by_distance;
  std::size_t probes_per_distance = 0;
};

// Top-1 accuracy predicting B at A2 on clean [A][B]...[A] probes.
ProbeReport probe_induction(const Model& model, std::span<const std::size_t> distances,
                            std::size_t probes_per_distance, std::uint64_t seed);

// ---- weight files -------------------------------------------------------------

void save_weights(const Model& model, const std::filesystem::path& path);
Model load_weights(const std::filesystem::path& path);
// Expected architecture check; throws architecture error on mismatch.
Model load_weights(const std::filesystem::path& path, Architecture expected);

// CRC64 of the serialized weights; used as a model hash in reports.
std::string model_hash(const Model& model);

}  // namespace univlab
