#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mofme/ops.hpp"
#include "mofme/rng.hpp"
#include "mofme/tensor.hpp"

namespace mofme {

enum class RouterMode { Linear, UaRCalibrated, UaRUniformMixture };

struct RouterConfig {
  int experts = 8;
  int top_k = 2;
  RouterMode mode = RouterMode::Linear;
  int mc_passes = 4;
  double dropout_rate = 0.1;
  double variance_floor = 1e-6;
  bool inference_deterministic = false;

  bool is_uar() const {
    return mode == RouterMode::UaRCalibrated || mode == RouterMode::UaRUniformMixture;
  }

  void validate() const {
    if (experts < 1) throw ConfigError(msg("router: experts must be >= 1, got ", experts));
    if (top_k < 1 || top_k > experts)
      throw ConfigError(msg("router: top_k must be in [1, ", experts, "], got ", top_k));
    if (is_uar() && mc_passes < 2)
      throw ConfigError(msg("router: mc_passes must be >= 2 for UaR modes, got ", mc_passes));
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError(msg("router: dropout_rate must be in [0, 1), got ", dropout_rate));
    if (variance_floor <= 0.0)
      throw ConfigError(msg("router: variance_floor must be > 0, got ", variance_floor));
  }
};

// Per-token routing outcome. `weights` keeps the surviving probabilities at
// their original values (no renormalization over the kept set), `mask` is the
// binary selection, `selected` lists kept expert indices per token.
template <class T>
struct RouterDecision {
  Tensor<T> weights;  // [N x E]
  Tensor<T> mask;     // [N x E], constant
  std::vector<std::vector<std::uint32_t>> selected;
};

template <class T>
struct UncertaintyStats {
  Tensor<T> mean;      // [N x E]
  Tensor<T> diag_cov;  // [N x E], population variance across the M passes
};

template <class T>
struct McEnsemble {
  std::vector<Tensor<T>> members;  // M tensors [N x E]
  UncertaintyStats<T> stats;
};

// Zeroes everything but the K largest entries per row. Ties at the K-th
// position are broken toward the lower expert index; entries whose
// probability is exactly zero are never marked selected.
template <class T>
RouterDecision<T> apply_top_k(const Tensor<T>& scores, int top_k) {
  const std::size_t n = scores.size(0), e = scores.size(1);
  Tensor<T> mask = Tensor<T>::zeros(scores.shape());
  std::vector<std::vector<std::uint32_t>> selected(n);
  std::vector<std::uint32_t> order(e);
  const auto& sv = scores.value();
  auto& mv = mask.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = sv.data() + i * e;
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b]; });
    for (int k = 0; k < top_k; ++k) {
      std::uint32_t j = order[static_cast<std::size_t>(k)];
      if (!(row[j] > T(0))) continue;
      mv[i * e + j] = T(1);
      selected[i].push_back(j);
    }
    std::sort(selected[i].begin(), selected[i].end());
  }
  RouterDecision<T> d;
  d.weights = mul(scores, mask);  // straight-through: grads flow through kept entries
  d.mask = std::move(mask);
  d.selected = std::move(selected);
  return d;
}

// r = TopK(softmax(x W_r^T)).
template <class T>
RouterDecision<T> linear_route(const Tensor<T>& x, const Tensor<T>& w_r,
                               const RouterConfig& cfg) {
  cfg.validate();
  if (x.size(1) != w_r.size(1))
    throw ShapeError(msg("linear_route: token dim ", shape_str(x.shape()),
                         " vs router ", shape_str(w_r.shape())));
  Tensor<T> probs = softmax_lastdim(matmul_nt(x, w_r));
  return apply_top_k(probs, cfg.top_k);
}

// M stochastic router passes with a fresh dropout mask on the router input
// each time, plus the per-expert mean / population variance across them.
template <class T>
McEnsemble<T> mc_ensemble(const Tensor<T>& x, const Tensor<T>& w_r,
                          const RouterConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (!cfg.is_uar())
    throw ConfigError("mc_ensemble: router mode is not an uncertainty-aware mode");
  const int m = cfg.mc_passes;
  McEnsemble<T> out;
  out.members.reserve(m);
  for (int i = 0; i < m; ++i) {
    Tensor<T> xm = dropout(x, cfg.dropout_rate, rng, /*training=*/true);
    out.members.push_back(softmax_lastdim(matmul_nt(xm, w_r)));
  }
  const T inv_m = T(1) / T(m);
  Tensor<T> acc = out.members[0];
  for (int i = 1; i < m; ++i) acc = add(acc, out.members[i]);
  out.stats.mean = mul_scalar(acc, inv_m);
  Tensor<T> vacc;
  for (int i = 0; i < m; ++i) {
    Tensor<T> d = sub(out.members[i], out.stats.mean);
    Tensor<T> d2 = mul(d, d);
    vacc = (i == 0) ? d2 : add(vacc, d2);
  }
  out.stats.diag_cov = mul_scalar(vacc, inv_m);
  return out;
}

template <class T>
struct CalibrationResult {
  Tensor<T> scores;           // [N x E]; unit L2 rows except fallbacks
  std::size_t fallback_count = 0;
};

// Whitens the clean-pass router output against the ensemble statistics and
// L2-normalizes each token's score vector. Tokens whose whitened deviation is
// numerically zero keep their uncalibrated probabilities.
template <class T>
CalibrationResult<T> uar_calibrate(const Tensor<T>& r, const UncertaintyStats<T>& stats,
                                   const RouterConfig& cfg) {
  detail::check_same_shape("uar_calibrate", r, stats.mean);
  const std::size_t n = r.size(0);
  Tensor<T> inv_cov = reciprocal(clamp_min(stats.diag_cov, T(cfg.variance_floor)));
  Tensor<T> z = mul(sub(r, stats.mean), inv_cov);
  Tensor<T> norm = sqrt_el(sum_rows(mul(z, z)));

  Tensor<T> keep = Tensor<T>::zeros({n});
  Tensor<T> fall = Tensor<T>::zeros({n});
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (norm.value()[i] < T(1e-12)) {
      fall.raw()[i] = T(1);
      ++fallbacks;
    } else {
      keep.raw()[i] = T(1);
    }
  }
  // Fallback rows divide by 1 instead of the degenerate norm, then get
  // replaced by the uncalibrated row; their z-path receives zero gradient.
  Tensor<T> safe_norm = add(mul(norm, keep), fall);
  Tensor<T> calibrated = div_rows(z, safe_norm);
  Tensor<T> scores = add(mul_rows(calibrated, keep), mul_rows(r, fall));
  return {scores, fallbacks};
}

// Supplementary variant: uniformly weighted mixture of the ensemble members.
template <class T>
Tensor<T> uar_uniform_mixture(const std::vector<Tensor<T>>& members) {
  if (members.empty())
    throw ConfigError("uar_uniform_mixture: empty ensemble");
  Tensor<T> acc = members[0];
  for (std::size_t i = 1; i < members.size(); ++i) acc = add(acc, members[i]);
  return mul_scalar(acc, T(1) / T(members.size()));
}

// Everything an expert layer needs from its router.
template <class T>
struct RouteResult {
  RouterDecision<T> decision;
  UncertaintyStats<T> stats;  // tensors undefined() for Linear routing
  std::size_t fallback_count = 0;
  bool has_stats = false;
};

// Mode dispatcher. UaR modes run their MC passes at inference as well
// (reproducibly, via the caller's RNG stream) unless the config opts into a
// deterministic single-pass inference router.
template <class T>
RouteResult<T> route(const Tensor<T>& x, const Tensor<T>& w_r, const RouterConfig& cfg,
                     RngStream& rng, bool training) {
  RouteResult<T> out;
  RouterMode mode = cfg.mode;
  if (!training && cfg.inference_deterministic) mode = RouterMode::Linear;
  switch (mode) {
    case RouterMode::Linear: {
      RouterConfig linear_cfg = cfg;
      linear_cfg.mode = RouterMode::Linear;
      out.decision = linear_route(x, w_r, linear_cfg);
      break;
    }
    case RouterMode::UaRCalibrated: {
      Tensor<T> r = softmax_lastdim(matmul_nt(x, w_r));  // clean pass, no dropout
      McEnsemble<T> ens = mc_ensemble(x, w_r, cfg, rng);
      CalibrationResult<T> cal = uar_calibrate(r, ens.stats, cfg);
      // Calibrated scores are signed unit vectors; one more softmax restores
      // probability semantics before the top-K cut.
      out.decision = apply_top_k(softmax_lastdim(cal.scores), cfg.top_k);
      out.stats = ens.stats;
      out.has_stats = true;
      out.fallback_count = cal.fallback_count;
      break;
    }
    case RouterMode::UaRUniformMixture: {
      McEnsemble<T> ens = mc_ensemble(x, w_r, cfg, rng);
      out.decision = apply_top_k(uar_uniform_mixture(ens.members), cfg.top_k);
      out.stats = ens.stats;
      out.has_stats = true;
      break;
    }
  }
  return out;
}

}  // namespace mofme
