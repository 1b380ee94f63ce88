#pragma once

// Addressable activation sites, capture requests and activation overrides.
// Site names follow the grammar `layer{n}.{kind}`; the logits site is named
// plain `logits`.

#include <cstddef>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "univlab/numerics.hpp"

namespace univlab {

enum class HookKind {
  residual_post_block,
  mlp_neuron_post_activation,
  mamba_post_silu,  // c = SiLU(Conv1D(x)); same tensor as ssm_input_c
  ssm_input_c,
  ssm_state_h,      // flattened d_inner x d_state state after each token
  conv_input_x,
  block_delta,      // what a block adds to the residual stream
  logits,
};

const char* to_string(HookKind kind);
std::optional<HookKind> parse_hook_kind(std::string_view s);

struct HookSite {
  int layer = 0;
  HookKind kind = HookKind::residual_post_block;

  static HookSite logits_site() { return {0, HookKind::logits}; }

  auto operator<=>(const HookSite&) const = default;
};

std::string to_string(const HookSite& site);
// Throws usage error on malformed names.
HookSite parse_hook_site(std::string_view name);

class Capture {
 public:
  Capture() = default;
  Capture(std::initializer_list<HookSite> sites) : sites_(sites) {}
  explicit Capture(std::set<HookSite> sites) : sites_(std::move(sites)) {}

  static Capture everything() {
    Capture c;
    c.all_ = true;
    return c;
  }

  void add(const HookSite& s) { sites_.insert(s); }
  bool wants(const HookSite& s) const { return all_ || sites_.count(s) > 0; }
  bool all() const { return all_; }
  const std::set<HookSite>& sites() const { return sites_; }

 private:
  std::set<HookSite> sites_;
  bool all_ = false;
};

// Activation overrides applied during a forward pass. A row override replaces
// one position of a site; a frozen site replaces every position.
class Interventions {
 public:
  void set(const HookSite& site, std::size_t position, Vector value);
  void freeze(const HookSite& site, SequenceTensor value);

  bool empty() const { return rows_.empty() && frozen_.empty(); }
  bool touches(const HookSite& site) const;
  bool is_frozen(const HookSite& site) const { return frozen_.count(site) > 0; }

  // Replacement for (site, position), or nullptr when untouched.
  const Vector* row(const HookSite& site, std::size_t position) const;
  const double* row_ptr(const HookSite& site, std::size_t position) const;

  // Overwrites the touched rows of t in place.
  void apply(const HookSite& site, SequenceTensor& t) const;

  std::set<HookSite> sites() const;
  std::set<std::size_t> positions(const HookSite& site) const;

 private:
  std::map<HookSite, std::map<std::size_t, Vector>> rows_;
  std::map<HookSite, SequenceTensor> frozen_;
};

struct ForwardTrace {
  std::map<HookSite, SequenceTensor> sites;
  SequenceTensor logits;

  const SequenceTensor& at(const HookSite& site) const;
  bool has(const HookSite& site) const { return sites.count(site) > 0; }
};

}  // namespace univlab
