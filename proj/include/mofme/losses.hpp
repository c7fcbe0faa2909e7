#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mofme/experts.hpp"
#include "mofme/ops.hpp"
#include "mofme/routing.hpp"

namespace mofme {

struct LossWeights {
  double lambda_lb = 1e-2;
  double lambda_uc = 5e-3;

  void validate() const {
    if (lambda_lb < 0 || lambda_uc < 0)
      throw ConfigError("loss weights must be non-negative");
  }
};

enum class LossMode { MoE, MoFME };

// (E/N) * sum_n sum_i v_i(x_n) r_i(x_n) for one layer; the decision's
// weights are already the top-K-masked probabilities, so the masked sum is
// just their total. Multiple layers contribute their arithmetic mean.
template <class T>
Tensor<T> load_balance_loss(const std::vector<RouterDecision<T>>& decisions) {
  if (decisions.empty()) throw ConfigError("load_balance_loss: no router decisions");
  Tensor<T> acc;
  for (const auto& d : decisions) {
    const std::size_t n = d.weights.size(0);
    const std::size_t e = d.weights.size(1);
    if (n == 0) throw ConfigError("load_balance_loss: zero tokens");
    Tensor<T> layer = mul_scalar(sum(d.weights), T(e) / T(n));
    acc = acc.defined() ? add(acc, layer) : layer;
  }
  return mul_scalar(acc, T(1) / T(decisions.size()));
}

// (E/N) * sum_n sum_i cov_i(x_n) v_i(x_n), averaged over layers. The mask is
// the same selection indicator as in the load-balance term.
template <class T>
Tensor<T> uncertainty_loss(const std::vector<UncertaintyStats<T>>& stats,
                           const std::vector<Tensor<T>>& masks) {
  if (stats.empty() || stats.size() != masks.size())
    throw ConfigError("uncertainty_loss: stats/mask lists empty or mismatched");
  Tensor<T> acc;
  for (std::size_t l = 0; l < stats.size(); ++l) {
    const std::size_t n = masks[l].size(0);
    const std::size_t e = masks[l].size(1);
    if (n == 0) throw ConfigError("uncertainty_loss: zero tokens");
    Tensor<T> layer = mul_scalar(sum(mul(stats[l].diag_cov, masks[l])), T(e) / T(n));
    acc = acc.defined() ? add(acc, layer) : layer;
  }
  return mul_scalar(acc, T(1) / T(stats.size()));
}

// Mean squared error over all elements.
template <class T>
Tensor<T> task_loss_mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_same_shape("task_loss_mse", pred, target);
  Tensor<T> d = sub(pred, target);
  return mean(mul(d, d));
}

template <class T>
struct LossReport {
  double task = 0, lb = 0, uc = 0, total = 0;
  std::vector<double> per_layer_lb, per_layer_uc;
  Tensor<T> total_tensor;  // graph node for backward()
};

// total = task + lambda1 * lb (+ lambda2 * uc in MoFME mode). Undefined
// component tensors count as zero (e.g. a dense model has no lb term).
template <class T>
LossReport<T> combine(const Tensor<T>& task, const Tensor<T>& lb, const Tensor<T>& uc,
                      const LossWeights& w, LossMode mode) {
  LossReport<T> r;
  r.task = task.item();
  r.total_tensor = task;
  if (lb.defined()) {
    r.lb = lb.item();
    r.total_tensor = add(r.total_tensor, mul_scalar(lb, T(w.lambda_lb)));
  }
  if (mode == LossMode::MoFME && uc.defined()) {
    r.uc = uc.item();
    r.total_tensor = add(r.total_tensor, mul_scalar(uc, T(w.lambda_uc)));
  }
  r.total = r.total_tensor.item();
  return r;
}

// Builds the full training objective from one forward pass's diagnostics.
template <class T>
LossReport<T> training_loss(const Tensor<T>& pred, const Tensor<T>& target,
                            const std::vector<ExpertLayerAux<T>>& aux,
                            const LossWeights& w, LossMode mode) {
  Tensor<T> task = task_loss_mse(pred, target);
  std::vector<RouterDecision<T>> decisions;
  std::vector<UncertaintyStats<T>> stats;
  std::vector<Tensor<T>> masks;
  std::vector<double> layer_lb, layer_uc;
  for (const auto& a : aux) {
    if (!a.routed) continue;
    decisions.push_back(a.decision);
    std::size_t n = a.decision.weights.size(0), e = a.decision.weights.size(1);
    double s = 0;
    for (double v : a.decision.weights.value()) s += v;
    layer_lb.push_back(double(e) / double(n) * s);
    if (a.has_stats) {
      stats.push_back(a.stats);
      masks.push_back(a.decision.mask);
      double su = 0;
      const auto& cv = a.stats.diag_cov.value();
      const auto& mv = a.decision.mask.value();
      for (std::size_t i = 0; i < cv.size(); ++i) su += double(cv[i]) * double(mv[i]);
      layer_uc.push_back(double(e) / double(n) * su);
    }
  }
  Tensor<T> lb, uc;
  if (!decisions.empty()) lb = load_balance_loss(decisions);
  if (!stats.empty() && mode == LossMode::MoFME) uc = uncertainty_loss(stats, masks);
  LossReport<T> r = combine(task, lb, uc, w, mode);
  r.per_layer_lb = std::move(layer_lb);
  r.per_layer_uc = std::move(layer_uc);
  return r;
}

// ---------------------------------------------------------------------------
// Image quality metrics (plain functions, evaluation path)

// 10 log10(max^2 / MSE), capped at 100 dB when MSE is zero.
inline double psnr(const double* pred, const double* target, std::size_t n,
                   double max_val) {
  double mse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = pred[i] - target[i];
    mse += d * d;
  }
  mse /= double(n);
  if (mse <= 0.0) return 100.0;
  double v = 10.0 * std::log10(max_val * max_val / mse);
  return v > 100.0 ? 100.0 : v;
}

inline double psnr(const std::vector<double>& pred, const std::vector<double>& target,
                   double max_val) {
  return psnr(pred.data(), target.data(), pred.size(), max_val);
}

// Mean local SSIM over non-overlapping window x window tiles (mean pooling,
// population statistics), averaged across channels. Images smaller than the
// window fall back to one global window.
inline double ssim(const double* pred, const double* target, std::size_t channels,
                   std::size_t h, std::size_t w, double max_val,
                   std::size_t window = 8) {
  const double c1 = (0.01 * max_val) * (0.01 * max_val);
  const double c2 = (0.03 * max_val) * (0.03 * max_val);
  std::size_t wy = window, wx = window;
  if (h < window || w < window) {
    wy = h;
    wx = w;
  }
  double total = 0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* pc = pred + c * h * w;
    const double* tc = target + c * h * w;
    for (std::size_t y0 = 0; y0 + wy <= h; y0 += wy)
      for (std::size_t x0 = 0; x0 + wx <= w; x0 += wx) {
        double mx = 0, my = 0;
        for (std::size_t y = y0; y < y0 + wy; ++y)
          for (std::size_t x = x0; x < x0 + wx; ++x) {
            mx += pc[y * w + x];
            my += tc[y * w + x];
          }
        double n = double(wy * wx);
        mx /= n;
        my /= n;
        double vx = 0, vy = 0, cov = 0;
        for (std::size_t y = y0; y < y0 + wy; ++y)
          for (std::size_t x = x0; x < x0 + wx; ++x) {
            double dx = pc[y * w + x] - mx;
            double dy = tc[y * w + x] - my;
            vx += dx * dx;
            vy += dy * dy;
            cov += dx * dy;
          }
        vx /= n;
        vy /= n;
        cov /= n;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  }
  return count ? total / double(count) : 1.0;
}

inline double ssim(const std::vector<double>& pred, const std::vector<double>& target,
                   std::size_t channels, std::size_t h, std::size_t w, double max_val,
                   std::size_t window = 8) {
  return ssim(pred.data(), target.data(), channels, h, w, max_val, window);
}

}  // namespace mofme
