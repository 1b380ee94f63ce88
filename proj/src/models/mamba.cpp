#include <algorithm>
#include <cmath>
#include <string>

#include "univlab/error.hpp"
#include "univlab/models.hpp"
#include "univlab/simd.hpp"

namespace univlab {

void SsmParams::validate() const {
  const std::size_t e = a.rows(), n = a.cols();
  UNIV_CHECK(e > 0 && n > 0, shape, "ssm: empty A");
  UNIV_CHECK(w_delta.rows() == e && w_delta.cols() == e, shape, "ssm: W_delta must be d_inner x d_inner");
  UNIV_CHECK(b_delta.size() == e, shape, "ssm: b_delta length");
  UNIV_CHECK(w_b.rows() == n && w_b.cols() == e, shape, "ssm: W_B must be d_state x d_inner");
  UNIV_CHECK(w_c.rows() == n && w_c.cols() == e, shape, "ssm: W_C must be d_state x d_inner");
  UNIV_CHECK(w_skip.size() == e, shape, "ssm: W_d length");
  for (double v : a.data()) UNIV_CHECK(v < 0.0 && std::isfinite(v), value, "ssm: A entries must be finite and < 0");
}

void MambaBlockParams::validate() const {
  UNIV_CHECK(d_model > 0 && d_inner > 0 && d_state > 0 && d_conv > 0, shape, "mamba: zero dimension");
  UNIV_CHECK(w_in.rows() == d_inner && w_in.cols() == d_model, shape, "mamba: W_in shape");
  UNIV_CHECK(w_gate.rows() == d_inner && w_gate.cols() == d_model, shape, "mamba: W_g shape");
  UNIV_CHECK(w_out.rows() == d_model && w_out.cols() == d_inner, shape, "mamba: W_o shape");
  UNIV_CHECK(conv_kernel.rows() == d_inner, shape, "mamba: conv kernel channels");
  UNIV_CHECK(conv_kernel.cols() <= d_conv, config, "mamba: conv kernel wider than d_conv");
  UNIV_CHECK(conv_bias.size() == d_inner, shape, "mamba: conv bias length");
  UNIV_CHECK(ssm.d_inner() == d_inner && ssm.d_state() == d_state, shape, "mamba: ssm shape");
  if (norm.enabled) {
    UNIV_CHECK(norm.scale.size() == d_model && norm.shift.size() == d_model, shape, "mamba: norm shape");
  }
  ssm.validate();
}

ScanResult selective_ssm_scan(const SequenceTensor& c, const SsmParams& params,
                              const Interventions* overrides, int layer, bool record_states) {
  const std::size_t len = c.length();
  const std::size_t e_dim = params.d_inner();
  const std::size_t n_dim = params.d_state();
  UNIV_CHECK(c.dim() == e_dim, shape, "scan: c width != d_inner");

  const auto& k = simd::active();
  const HookSite h_site{layer, HookKind::ssm_state_h};
  const bool may_override = overrides != nullptr && overrides->touches(h_site);

  ScanResult out{SequenceTensor(len, e_dim), record_states ? SequenceTensor(len, e_dim * n_dim) : SequenceTensor()};
  Vector h(e_dim * n_dim, 0.0);
  Vector delta(e_dim), bvec(n_dim), cvec(n_dim);
  // Decay rows that are constant, or S4D-style multiples (n+1)*A[e][0], need
  // one exp per token instead of n.
  enum RowShape : char { general, uniform, geometric };
  std::vector<char> row_shape(e_dim, general);
  for (std::size_t e = 0; e < e_dim; ++e) {
    const auto ae = params.a.row(e);
    bool uni = true, geo = true;
    for (std::size_t n = 1; n < n_dim; ++n) {
      uni &= ae[n] == ae[0];
      geo &= ae[n] == static_cast<double>(n + 1) * ae[0];
    }
    row_shape[e] = uni ? uniform : geo ? geometric : general;
  }

  const bool delta_const =
      std::all_of(params.w_delta.data().begin(), params.w_delta.data().end(), [](double v) { return v == 0.0; });

  for (std::size_t i = 0; i < len; ++i) {
    auto ci = c.at(i);
    if (delta_const) std::fill(delta.begin(), delta.end(), 0.0);
    else matvec_into(params.w_delta, ci, delta);
    for (std::size_t e = 0; e < e_dim; ++e) delta[e] = softplus(delta[e] + params.b_delta[e]);
    matvec_into(params.w_b, ci, bvec);
    matvec_into(params.w_c, ci, cvec);

    for (std::size_t e = 0; e < e_dim; ++e) {
      double* he = h.data() + e * n_dim;
      const double* ae = params.a.row(e).data();
      const double drive = delta[e] * ci[e];
      switch (row_shape[e]) {
        case uniform: {
          const double decay = std::exp(delta[e] * ae[0]);
          for (std::size_t n = 0; n < n_dim; ++n) he[n] = decay * he[n] + drive * bvec[n];
          break;
        }
        case geometric: {
          const double base = std::exp(delta[e] * ae[0]);
          double decay = base;
          for (std::size_t n = 0; n < n_dim; ++n, decay *= base) he[n] = decay * he[n] + drive * bvec[n];
          break;
        }
        default:
          for (std::size_t n = 0; n < n_dim; ++n) he[n] = std::exp(delta[e] * ae[n]) * he[n] + drive * bvec[n];
      }
    }
    if (may_override) {
      if (const double* repl = overrides->row_ptr(h_site, i)) std::copy(repl, repl + h.size(), h.begin());
    }
    // inf * 0 and nan * 0 are both nan
    double probe = 0.0;
    for (double v : h) probe += v * 0.0;
    if (!std::isfinite(probe)) {
      UNIV_CHECK(false, value, "scan: non-finite state at position " + std::to_string(i) + " (decay > 1 or overflow)");
    }
    if (record_states) std::copy(h.begin(), h.end(), out.h_trace.at(i).begin());

    auto si = out.s.at(i);
    for (std::size_t e = 0; e < e_dim; ++e)
      si[e] = k.dot(h.data() + e * n_dim, cvec.data(), n_dim) + params.w_skip[e] * ci[e];
  }
  return out;
}

namespace {

void check_layer_sites(const Interventions* iv, int layer, Architecture arch) {
  if (iv == nullptr) return;
  for (const auto& s : iv->sites()) {
    if (s.layer != layer || s.kind == HookKind::logits) continue;
    const bool mamba_only = s.kind == HookKind::mamba_post_silu || s.kind == HookKind::ssm_input_c ||
                            s.kind == HookKind::ssm_state_h || s.kind == HookKind::conv_input_x;
    const bool tf_only = s.kind == HookKind::mlp_neuron_post_activation;
    UNIV_CHECK(!(arch == Architecture::transformer && mamba_only) && !(arch == Architecture::mamba && tf_only),
               contract, "intervention site " + to_string(s) + " does not exist on a " + to_string(arch) + " layer");
  }
}

void capture_if(const Capture& cap, BlockResult& res, const HookSite& site, const SequenceTensor& t) {
  if (cap.wants(site)) res.trace.sites[site] = t;
}

}  // namespace

BlockResult mamba_block_forward(const MambaBlockParams& p, int layer, const SequenceTensor& residual_in,
                                const Capture& capture, const Interventions* iv) {
  UNIV_CHECK(residual_in.dim() == p.d_model, shape,
             "mamba block " + std::to_string(layer) + ": residual width " + std::to_string(residual_in.dim()) +
                 " != d_model " + std::to_string(p.d_model));
  check_layer_sites(iv, layer, Architecture::mamba);
  const std::size_t len = residual_in.length();
  BlockResult res;

  SequenceTensor x(len, p.d_inner), g(len, p.d_inner);
  for (std::size_t i = 0; i < len; ++i) {
    const Vector normed = p.norm.apply(residual_in.at(i));
    matvec_into(p.w_in, normed, x.at(i));
    matvec_into(p.w_gate, normed, g.at(i));
    for (double& v : g.at(i)) v = silu(v);
  }
  const HookSite x_site{layer, HookKind::conv_input_x};
  if (iv) iv->apply(x_site, x);
  capture_if(capture, res, x_site, x);

  SequenceTensor c = conv1d_causal(x, p.conv_kernel, p.conv_bias, p.d_conv);
  for (double& v : c.data()) v = silu(v);
  const HookSite c_site{layer, HookKind::ssm_input_c};
  const HookSite post_silu_site{layer, HookKind::mamba_post_silu};
  if (iv) {
    iv->apply(post_silu_site, c);
    iv->apply(c_site, c);
  }
  capture_if(capture, res, c_site, c);
  capture_if(capture, res, post_silu_site, c);

  const HookSite h_site{layer, HookKind::ssm_state_h};
  ScanResult scan = selective_ssm_scan(c, p.ssm, iv, layer, capture.wants(h_site));
  capture_if(capture, res, h_site, scan.h_trace);

  SequenceTensor delta(len, p.d_model);
  Vector gated(p.d_inner);
  for (std::size_t i = 0; i < len; ++i) {
    simd::mul(scan.s.at(i).data(), g.at(i).data(), gated.data(), p.d_inner);
    matvec_into(p.w_out, gated, delta.at(i));
  }
  const HookSite delta_site{layer, HookKind::block_delta};
  if (iv) iv->apply(delta_site, delta);
  capture_if(capture, res, delta_site, delta);

  res.residual_out = residual_in;
  for (std::size_t j = 0; j < res.residual_out.data().size(); ++j) res.residual_out.data()[j] += delta.data()[j];
  const HookSite r_site{layer, HookKind::residual_post_block};
  if (iv) iv->apply(r_site, res.residual_out);
  capture_if(capture, res, r_site, res.residual_out);
  return res;
}

}  // namespace univlab
