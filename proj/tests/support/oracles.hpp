#pragma once

// Brute-force reference computations used only by tests. Nothing here may
// call into the library code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows random_rows(std::size_t n, std::size_t m, std::mt19937_64& rng, double lo = -1.0,
                        double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Rows r(n, std::vector<double>(m));
  for (auto& row : r)
    for (auto& v : row) v = u(rng);
  return r;
}

inline Rows matmul(const Rows& a, const Rows& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Rows c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i][p] * b[p][j];
      c[i][j] = s;
    }
  return c;
}

// out[i][ch] = bias[ch] + sum_k w[ch][k] * x[i-k][ch]
inline Rows causal_conv(const Rows& x, const Rows& w, const std::vector<double>& bias) {
  Rows out(x.size(), std::vector<double>(x.empty() ? 0 : x[0].size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t ch = 0; ch < x[i].size(); ++ch) {
      double s = bias.empty() ? 0.0 : bias[ch];
      for (std::size_t k = 0; k < w[ch].size(); ++k)
        if (i >= k) s += w[ch][k] * x[i - k][ch];
      out[i][ch] = s;
    }
  return out;
}

// Two-pass Pearson correlation between columns a and b.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    ma += a[t];
    mb += b[t];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    sab += (a[t] - ma) * (b[t] - mb);
    saa += (a[t] - ma) * (a[t] - ma);
    sbb += (b[t] - mb) * (b[t] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

struct BestMatch {
  std::size_t index = 0;
  double rho = -2.0;
  bool defined = false;
};

// All-pairs max over columns of `b` for every column of `a`; columns given
// as token-major vectors (cols[f][t]). Lowest index wins ties.
inline std::vector<BestMatch> all_pairs_max(const Rows& a_cols, const Rows& b_cols) {
  std::vector<BestMatch> out(a_cols.size());
  for (std::size_t i = 0; i < a_cols.size(); ++i) {
    for (std::size_t j = 0; j < b_cols.size(); ++j) {
      const double r = pearson(a_cols[i], b_cols[j]);
      if (std::isnan(r)) continue;
      if (!out[i].defined || r > out[i].rho) {
        out[i] = {j, r, true};
      }
    }
  }
  return out;
}

// Linear-interpolation quantile on a sorted copy (R type 7).
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Naive selective-scan recurrence, position by position.
//   delta = softplus(Wd c + bd); h[e][n] = exp(delta[e] A[e][n]) h[e][n] + delta[e] (WB c)[n] c[e]
//   s[e] = sum_n h[e][n] (WC c)[n] + skip[e] c[e]
struct ScanParams {
  Rows a, w_delta, w_b, w_c;
  std::vector<double> b_delta, skip;
};

struct ScanOut {
  Rows s;
  Rows h;  // flattened e-major
};

inline ScanOut naive_scan(const Rows& c, const ScanParams& p) {
  const std::size_t e_dim = p.a.size(), n_dim = p.a[0].size();
  std::vector<double> h(e_dim * n_dim, 0.0);
  ScanOut out;
  for (const auto& ci : c) {
    std::vector<double> delta(e_dim), bv(n_dim, 0.0), cv(n_dim, 0.0);
    for (std::size_t e = 0; e < e_dim; ++e) {
      double z = p.b_delta[e];
      for (std::size_t k = 0; k < e_dim; ++k) z += p.w_delta[e][k] * ci[k];
      delta[e] = std::log1p(std::exp(z));
    }
    for (std::size_t n = 0; n < n_dim; ++n)
      for (std::size_t k = 0; k < e_dim; ++k) {
        bv[n] += p.w_b[n][k] * ci[k];
        cv[n] += p.w_c[n][k] * ci[k];
      }
    std::vector<double> s(e_dim, 0.0);
    for (std::size_t e = 0; e < e_dim; ++e) {
      for (std::size_t n = 0; n < n_dim; ++n) {
        double& he = h[e * n_dim + n];
        he = std::exp(delta[e] * p.a[e][n]) * he + delta[e] * bv[n] * ci[e];
        s[e] += he * cv[n];
      }
      s[e] += p.skip[e] * ci[e];
    }
    out.s.push_back(s);
    out.h.push_back(h);
  }
  return out;
}

}  // namespace oracle
