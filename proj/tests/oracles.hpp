#pragma once

// Independent reference implementations used as test oracles. Everything here
// must stay decoupled from the library's compute paths: naive loops, full
// sorts, finite differences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "mofme/tensor.hpp"

namespace oracle {

// Plain triple-loop matrix product.
inline std::vector<double> matmul(const std::vector<double>& a,
                                  const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Indices of the top-k values of a row, ties broken toward lower index,
// via a full sort.
inline std::vector<std::size_t> top_k_full_sort(const std::vector<double>& row,
                                                std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

struct MeanVar {
  std::vector<double> mean, var;
};

// Naive per-element mean and population variance across samples.
inline MeanVar mean_var(const std::vector<std::vector<double>>& samples) {
  MeanVar mv;
  std::size_t n = samples[0].size();
  mv.mean.assign(n, 0.0);
  mv.var.assign(n, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < n; ++i) mv.mean[i] += s[i];
  for (auto& m : mv.mean) m /= double(samples.size());
  for (const auto& s : samples)
    for (std::size_t i = 0; i < n; ++i) {
      double d = s[i] - mv.mean[i];
      mv.var[i] += d * d;
    }
  for (auto& v : mv.var) v /= double(samples.size());
  return mv;
}

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Central finite differences on every entry of `leaf` against its analytic
// gradient. `eval` must recompute the scalar objective from current leaf
// values without recording a tape.
inline FdReport fd_check(mofme::Tensor<double>& leaf,
                         const std::vector<double>& analytic,
                         const std::function<double()>& eval, double h = 1e-5,
                         std::size_t max_entries = 0) {
  FdReport rep;
  std::size_t n = leaf.numel();
  std::size_t step = 1;
  if (max_entries && n > max_entries) step = n / max_entries;
  for (std::size_t i = 0; i < n; i += step) {
    double orig = leaf.raw()[i];
    leaf.raw()[i] = orig + h;
    double fp = eval();
    leaf.raw()[i] = orig - h;
    double fm = eval();
    leaf.raw()[i] = orig;
    double fd = (fp - fm) / (2.0 * h);
    double an = analytic[i];
    double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
    rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(fd - an) / denom);
    ++rep.checked;
  }
  return rep;
}

// Direct per-window SSIM evaluation (population statistics).
inline double ssim_window(const std::vector<double>& a, const std::vector<double>& b) {
  double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double va = 0, vb = 0, cov = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    cov += (a[i] - ma) * (b[i] - mb);
  }
  va /= n;
  vb /= n;
  cov /= n;
  return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

inline std::vector<double> random_vec(std::size_t n, mofme::RngStream& rng, double lo = -1.0,
                                      double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace oracle
