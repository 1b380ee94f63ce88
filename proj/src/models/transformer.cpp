#include <algorithm>
#include <cmath>
#include <string>

#include "univlab/error.hpp"
#include "univlab/models.hpp"
#include "univlab/simd.hpp"

namespace univlab {

Vector RmsNorm::apply(std::span<const double> x) const {
  if (!enabled) return Vector(x.begin(), x.end());
  double ms = 0.0;
  for (double v : x) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + eps);
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * scale[i] + shift[i];
  return y;
}

void TransformerBlockParams::validate() const {
  UNIV_CHECK(d_model > 0 && n_heads > 0 && d_head > 0, shape, "transformer: zero dimension");
  UNIV_CHECK(n_heads * d_head == d_model, shape, "transformer: n_heads * d_head must equal d_model");
  UNIV_CHECK(w_q.size() == n_heads && w_k.size() == n_heads && w_v.size() == n_heads && w_o.size() == n_heads,
             shape, "transformer: per-head weight count");
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (const Matrix* m : {&w_q[h], &w_k[h], &w_v[h]})
      UNIV_CHECK(m->rows() == d_head && m->cols() == d_model, shape, "transformer: Q/K/V shape");
    UNIV_CHECK(w_o[h].rows() == d_model && w_o[h].cols() == d_head, shape, "transformer: W_O shape");
  }
  UNIV_CHECK(w_up.rows() == d_mlp && w_up.cols() == d_model && b_up.size() == d_mlp, shape, "transformer: W_up");
  UNIV_CHECK(w_down.rows() == d_model && w_down.cols() == d_mlp && b_down.size() == d_model, shape,
             "transformer: W_down");
  for (const RmsNorm* n : {&norm_attn, &norm_mlp})
    if (n->enabled)
      UNIV_CHECK(n->scale.size() == d_model && n->shift.size() == d_model, shape, "transformer: norm shape");
}

BlockResult transformer_block_forward(const TransformerBlockParams& p, int layer, const SequenceTensor& residual_in,
                                      const Capture& capture, const Interventions* iv) {
  UNIV_CHECK(residual_in.dim() == p.d_model, shape,
             "transformer block " + std::to_string(layer) + ": residual width mismatch");
  if (iv) {
    for (const auto& s : iv->sites()) {
      if (s.layer != layer || s.kind == HookKind::logits) continue;
      UNIV_CHECK(s.kind == HookKind::residual_post_block || s.kind == HookKind::mlp_neuron_post_activation ||
                     s.kind == HookKind::block_delta,
                 contract, "intervention site " + to_string(s) + " does not exist on a transformer layer");
    }
  }
  const std::size_t len = residual_in.length();
  const auto& k = simd::active();
  const double scale = p.attn_scale > 0.0 ? p.attn_scale : 1.0 / std::sqrt(static_cast<double>(p.d_head));
  BlockResult res;

  std::vector<Vector> normed(len);
  for (std::size_t i = 0; i < len; ++i) normed[i] = p.norm_attn.apply(residual_in.at(i));

  SequenceTensor attn(len, p.d_model);
  SequenceTensor q(len, p.d_head), kk(len, p.d_head), v(len, p.d_head);
  Vector scores(len), mixed(p.d_head);
  for (std::size_t h = 0; h < p.n_heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      matvec_into(p.w_q[h], normed[i], q.at(i));
      matvec_into(p.w_k[h], normed[i], kk.at(i));
      matvec_into(p.w_v[h], normed[i], v.at(i));
    }
    for (std::size_t i = 0; i < len; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = scale * k.dot(q.at(i).data(), kk.at(j).data(), p.d_head);
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      std::fill(mixed.begin(), mixed.end(), 0.0);
      for (std::size_t j = 0; j <= i; ++j) k.axpy(scores[j] / z, v.at(j).data(), mixed.data(), p.d_head);
      const Vector o = matvec(p.w_o[h], mixed);
      k.axpy(1.0, o.data(), attn.at(i).data(), p.d_model);
    }
  }

  SequenceTensor act(len, p.d_mlp);
  SequenceTensor delta(len, p.d_model);
  Vector mid(p.d_model);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t d = 0; d < p.d_model; ++d) mid[d] = residual_in.at(i)[d] + attn.at(i)[d];
    const Vector h2 = p.norm_mlp.apply(mid);
    auto a = act.at(i);
    matvec_into(p.w_up, h2, a);
    for (std::size_t m = 0; m < p.d_mlp; ++m) a[m] = gelu(a[m] + p.b_up[m]);
  }
  const HookSite act_site{layer, HookKind::mlp_neuron_post_activation};
  if (iv) iv->apply(act_site, act);
  if (capture.wants(act_site)) res.trace.sites[act_site] = act;

  for (std::size_t i = 0; i < len; ++i) {
    auto d = delta.at(i);
    matvec_into(p.w_down, act.at(i), d);
    for (std::size_t j = 0; j < p.d_model; ++j) d[j] += p.b_down[j] + attn.at(i)[j];
  }
  const HookSite delta_site{layer, HookKind::block_delta};
  if (iv) iv->apply(delta_site, delta);
  if (capture.wants(delta_site)) res.trace.sites[delta_site] = delta;

  res.residual_out = residual_in;
  for (std::size_t j = 0; j < res.residual_out.data().size(); ++j) res.residual_out.data()[j] += delta.data()[j];
  const HookSite r_site{layer, HookKind::residual_post_block};
  if (iv) iv->apply(r_site, res.residual_out);
  if (capture.wants(r_site)) res.trace.sites[r_site] = res.residual_out;
  return res;
}

}  // namespace univlab
