#include <string>

#include "univlab/error.hpp"
#include "univlab/models.hpp"

namespace univlab {

const char* to_string(Architecture arch) {
  return arch == Architecture::transformer ? "transformer" : "mamba";
}

void Model::validate() const {
  const auto& c = config;
  UNIV_CHECK(c.n_layers == blocks.size(), shape, "model: n_layers does not match block count");
  UNIV_CHECK(c.d_model > 0 && c.vocab > 0 && c.max_len > 0, shape, "model: zero dimension");
  UNIV_CHECK(c.bos_id < c.vocab, config, "model: bos id outside vocab");
  UNIV_CHECK(embed.rows() == c.vocab && embed.cols() == c.d_model, shape, "model: embedding shape");
  UNIV_CHECK(unembed.rows() == c.vocab && unembed.cols() == c.d_model, shape, "model: unembedding shape");
  UNIV_CHECK(pos_embed.empty() || (pos_embed.rows() == c.max_len && pos_embed.cols() == c.d_model), shape,
             "model: positional embedding shape");
  if (final_norm.enabled)
    UNIV_CHECK(final_norm.scale.size() == c.d_model && final_norm.shift.size() == c.d_model, shape,
               "model: final norm shape");
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    if (c.arch == Architecture::mamba) {
      const auto* b = std::get_if<MambaBlockParams>(&blocks[l]);
      UNIV_CHECK(b != nullptr, architecture, "model: non-mamba block in a mamba model");
      UNIV_CHECK(b->d_model == c.d_model && b->d_state == c.d_state && b->d_conv == c.d_conv &&
                     b->d_inner == c.expand * c.d_model,
                 shape, "model: block " + std::to_string(l) + " disagrees with the model config");
      b->validate();
    } else {
      const auto* b = std::get_if<TransformerBlockParams>(&blocks[l]);
      UNIV_CHECK(b != nullptr, architecture, "model: non-transformer block in a transformer model");
      UNIV_CHECK(b->d_model == c.d_model && b->n_heads == c.n_heads && b->d_mlp == c.d_mlp, shape,
                 "model: block " + std::to_string(l) + " disagrees with the model config");
      b->validate();
    }
  }
  for (const Matrix* m : {&embed, &unembed, &pos_embed})
    UNIV_CHECK(m->all_finite(), value, "model: non-finite weights");
}

bool Model::has_site(const HookSite& site) const {
  if (site.kind == HookKind::logits) return true;
  if (site.layer < 0 || static_cast<std::size_t>(site.layer) >= config.n_layers) return false;
  switch (site.kind) {
    case HookKind::residual_post_block:
    case HookKind::block_delta: return true;
    case HookKind::mlp_neuron_post_activation: return config.arch == Architecture::transformer;
    case HookKind::mamba_post_silu:
    case HookKind::ssm_input_c:
    case HookKind::ssm_state_h:
    case HookKind::conv_input_x: return config.arch == Architecture::mamba;
    case HookKind::logits: return true;
  }
  return false;
}

std::size_t Model::site_width(const HookSite& site) const {
  UNIV_CHECK(has_site(site), contract, "site " + to_string(site) + " does not exist on this " +
                                           to_string(config.arch) + " model");
  const std::size_t inner = config.expand * config.d_model;
  switch (site.kind) {
    case HookKind::residual_post_block:
    case HookKind::block_delta: return config.d_model;
    case HookKind::mlp_neuron_post_activation: return config.d_mlp;
    case HookKind::mamba_post_silu:
    case HookKind::ssm_input_c:
    case HookKind::conv_input_x: return inner;
    case HookKind::ssm_state_h: return inner * config.d_state;
    case HookKind::logits: return config.vocab;
  }
  return 0;
}

ForwardTrace run_model(const Model& model, std::span<const TokenId> tokens, const Capture& capture,
                       const Interventions* iv) {
  const auto& cfg = model.config;
  UNIV_CHECK(!tokens.empty(), value, "run_model: empty token sequence");
  UNIV_CHECK(tokens.size() <= cfg.max_len, value,
             "run_model: sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                 std::to_string(cfg.max_len));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    UNIV_CHECK(tokens[i] < cfg.vocab, value,
               "run_model: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                   " is out of vocab (" + std::to_string(cfg.vocab) + ")");
  if (iv) {
    for (const auto& s : iv->sites()) {
      UNIV_CHECK(model.has_site(s), contract, "intervention site " + to_string(s) + " does not exist on this " +
                                                  to_string(cfg.arch) + " model");
      for (std::size_t p : iv->positions(s))
        UNIV_CHECK(p < tokens.size(), contract,
                   "intervention position " + std::to_string(p) + " outside sequence at " + to_string(s));
    }
  }

  SequenceTensor r(tokens.size(), cfg.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto dst = r.at(i);
    const auto e = model.embed.row(tokens[i]);
    std::copy(e.begin(), e.end(), dst.begin());
    if (!model.pos_embed.empty()) {
      const auto p = model.pos_embed.row(i);
      for (std::size_t d = 0; d < cfg.d_model; ++d) dst[d] += p[d];
    }
  }

  ForwardTrace trace;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const int layer = static_cast<int>(l);
    BlockResult br = std::visit(
        [&](const auto& b) {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, MambaBlockParams>)
            return mamba_block_forward(b, layer, r, capture, iv);
          else
            return transformer_block_forward(b, layer, r, capture, iv);
        },
        model.blocks[l]);
    r = std::move(br.residual_out);
    trace.sites.merge(br.trace.sites);
  }

  trace.logits = SequenceTensor(tokens.size(), cfg.vocab);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Vector h = model.final_norm.apply(r.at(i));
    matvec_into(model.unembed, h, trace.logits.at(i));
  }
  if (iv) iv->apply(HookSite::logits_site(), trace.logits);
  return trace;
}

}  // namespace univlab
