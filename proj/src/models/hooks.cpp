#include "univlab/hooks.hpp"

#include <charconv>

#include "univlab/error.hpp"

namespace univlab {

namespace {

constexpr HookKind kAllKinds[] = {
    HookKind::residual_post_block, HookKind::mlp_neuron_post_activation, HookKind::mamba_post_silu,
    HookKind::ssm_input_c,         HookKind::ssm_state_h,                HookKind::conv_input_x,
    HookKind::block_delta,         HookKind::logits,
};

}  // namespace

const char* to_string(HookKind kind) {
  switch (kind) {
    case HookKind::residual_post_block: return "residual_post_block";
    case HookKind::mlp_neuron_post_activation: return "mlp_neuron_post_activation";
    case HookKind::mamba_post_silu: return "mamba_post_silu";
    case HookKind::ssm_input_c: return "ssm_input_c";
    case HookKind::ssm_state_h: return "ssm_state_h";
    case HookKind::conv_input_x: return "conv_input_x";
    case HookKind::block_delta: return "block_delta";
    case HookKind::logits: return "logits";
  }
  return "unknown";
}

std::optional<HookKind> parse_hook_kind(std::string_view s) {
  for (HookKind k : kAllKinds)
    if (s == to_string(k)) return k;
  return std::nullopt;
}

std::string to_string(const HookSite& site) {
  if (site.kind == HookKind::logits) return "logits";
  return "layer" + std::to_string(site.layer) + "." + to_string(site.kind);
}

HookSite parse_hook_site(std::string_view name) {
  if (name == "logits") return HookSite::logits_site();
  const std::string bad = "malformed hook site '" + std::string(name) + "' (expected layer{n}.{kind})";
  UNIV_CHECK(name.substr(0, 5) == "layer", usage, bad);
  const auto dot = name.find('.');
  UNIV_CHECK(dot != std::string_view::npos && dot > 5, usage, bad);
  int layer = -1;
  const auto digits = name.substr(5, dot - 5);
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), layer);
  UNIV_CHECK(ec == std::errc() && ptr == digits.data() + digits.size() && layer >= 0, usage, bad);
  const auto kind = parse_hook_kind(name.substr(dot + 1));
  UNIV_CHECK(kind.has_value() && *kind != HookKind::logits, usage, bad);
  return {layer, *kind};
}

void Interventions::set(const HookSite& site, std::size_t position, Vector value) {
  rows_[site][position] = std::move(value);
}

void Interventions::freeze(const HookSite& site, SequenceTensor value) {
  frozen_[site] = std::move(value);
}

bool Interventions::touches(const HookSite& site) const {
  return rows_.count(site) > 0 || frozen_.count(site) > 0;
}

const Vector* Interventions::row(const HookSite& site, std::size_t position) const {
  auto it = rows_.find(site);
  if (it == rows_.end()) return nullptr;
  auto jt = it->second.find(position);
  return jt == it->second.end() ? nullptr : &jt->second;
}

const double* Interventions::row_ptr(const HookSite& site, std::size_t position) const {
  if (const Vector* v = row(site, position)) return v->data();
  auto it = frozen_.find(site);
  if (it == frozen_.end()) return nullptr;
  UNIV_CHECK(position < it->second.length(), shape,
             "frozen site " + to_string(site) + " shorter than the sequence");
  return it->second.at(position).data();
}

void Interventions::apply(const HookSite& site, SequenceTensor& t) const {
  if (auto it = frozen_.find(site); it != frozen_.end()) {
    UNIV_CHECK(it->second.length() == t.length() && it->second.dim() == t.dim(), shape,
               "frozen value for " + to_string(site) + " has the wrong shape");
    t = it->second;
  }
  if (auto it = rows_.find(site); it != rows_.end()) {
    for (const auto& [pos, value] : it->second) {
      UNIV_CHECK(pos < t.length(), shape,
                 "intervention position " + std::to_string(pos) + " outside sequence at " + to_string(site));
      UNIV_CHECK(value.size() == t.dim(), shape, "intervention width mismatch at " + to_string(site));
      std::copy(value.begin(), value.end(), t.at(pos).begin());
    }
  }
}

std::set<HookSite> Interventions::sites() const {
  std::set<HookSite> out;
  for (const auto& [s, _] : rows_) out.insert(s);
  for (const auto& [s, _] : frozen_) out.insert(s);
  return out;
}

std::set<std::size_t> Interventions::positions(const HookSite& site) const {
  std::set<std::size_t> out;
  if (auto it = rows_.find(site); it != rows_.end())
    for (const auto& [p, _] : it->second) out.insert(p);
  return out;
}

const SequenceTensor& ForwardTrace::at(const HookSite& site) const {
  if (site.kind == HookKind::logits) return logits;
  auto it = sites.find(site);
  UNIV_CHECK(it != sites.end(), contract, "site " + to_string(site) + " was not captured");
  return it->second;
}

}  // namespace univlab
