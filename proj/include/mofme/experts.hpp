#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mofme/ops.hpp"
#include "mofme/routing.hpp"

namespace mofme {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

namespace init {

// Scaled uniform fan-in init, bound = 1/sqrt(fan_in). Every parameter draws
// from its own stream keyed by name, so sibling parameters never shift each
// other's values.
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed,
                         const std::string& name) {
  RngStream rng(seed ^ fnv1a64(name), streams::kInit);
  double bound = 1.0 / std::sqrt(double(fan_in));
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.raw()) v = T(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> normal(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
  RngStream rng(seed ^ fnv1a64(name), streams::kInit);
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.raw()) v = T(rng.normal() * stddev);
  return t;
}

}  // namespace init

// Two-layer FFN with GELU, hidden width = scaling * dim unless overridden.
template <class T>
struct FfnExpert {
  Tensor<T> w1, b1, w2, b2;  // [D x H], [H], [H x D], [D]

  static FfnExpert make(std::size_t dim, std::size_t hidden, std::uint64_t seed,
                        const std::string& prefix) {
    FfnExpert e;
    e.w1 = init::fan_in_uniform<T>({dim, hidden}, dim, seed, prefix + ".w1");
    e.b1 = Tensor<T>::zeros({hidden});
    e.w2 = init::fan_in_uniform<T>({hidden, dim}, hidden, seed, prefix + ".w2");
    e.b2 = Tensor<T>::zeros({dim});
    return e;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w1), b1)), w2), b2);
  }

  std::int64_t param_count() const {
    return std::int64_t(w1.numel() + b1.numel() + w2.numel() + b2.numel());
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
  }
};

// Closed-form parameter count of one FFN expert.
inline std::int64_t ffn_expert_params(std::int64_t dim, std::int64_t hidden) {
  return dim * hidden + hidden + hidden * dim + dim;
}

// Per-token affine modulation gamma(x) * x + beta(x); the generators are
// linear maps D -> D (the 1x1-convolution over tokens). Initialized to the
// identity modulation: gamma == 1, beta == 0 for every input.
template <class T>
struct FmGenerator {
  Tensor<T> wg, bg, wb, bb;  // [D x D], [D], [D x D], [D]

  static FmGenerator make(std::size_t dim) {
    FmGenerator g;
    g.wg = Tensor<T>::zeros({dim, dim});
    g.bg = Tensor<T>::full({dim}, T(1));
    g.wb = Tensor<T>::zeros({dim, dim});
    g.bb = Tensor<T>::zeros({dim});
    return g;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> gamma = add_rowvec(matmul(x, wg), bg);
    Tensor<T> beta = add_rowvec(matmul(x, wb), bb);
    return add(mul(gamma, x), beta);
  }

  std::int64_t param_count() const {
    return std::int64_t(wg.numel() + bg.numel() + wb.numel() + bb.numel());
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".wg", wg});
    out.push_back({prefix + ".bg", bg});
    out.push_back({prefix + ".wb", wb});
    out.push_back({prefix + ".bb", bb});
  }
};

inline std::int64_t fm_generator_params(std::int64_t dim) {
  return 2 * (dim * dim + dim);
}

enum class ExpertKind { Dense, MoE, FME };

// Diagnostics recorded during one expert-layer forward pass.
template <class T>
struct ExpertLayerAux {
  RouterDecision<T> decision;
  UncertaintyStats<T> stats;
  bool has_stats = false;
  bool routed = false;
  std::size_t fallback_count = 0;
  std::vector<std::size_t> eval_counts;  // tokens evaluated per expert/modulator
};

// One FFN-position layer of the encoder: a dense FFN, a classic
// parallel-expert MoE, or the feature-modulation variant with one shared FFN.
// MoE/FME dispatch group-by-expert: tokens assigned to an expert are gathered
// into one batch, so non-selected experts are never evaluated.
template <class T>
struct ExpertLayer {
  ExpertKind kind = ExpertKind::Dense;
  RouterConfig router;
  std::size_t dim = 0;

  Tensor<T> w_r;                       // [E x D], MoE/FME only
  std::vector<FfnExpert<T>> experts;   // E entries for MoE, 1 for Dense
  std::vector<FmGenerator<T>> mods;    // E entries for FME
  FfnExpert<T> shared_ffn;             // FME only

  static ExpertLayer make(ExpertKind kind, std::size_t dim, std::size_t hidden,
                          const RouterConfig& rc, std::uint64_t seed,
                          const std::string& prefix) {
    ExpertLayer l;
    l.kind = kind;
    l.router = rc;
    l.dim = dim;
    switch (kind) {
      case ExpertKind::Dense:
        l.experts.push_back(FfnExpert<T>::make(dim, hidden, seed, prefix + ".ffn"));
        break;
      case ExpertKind::MoE:
        rc.validate();
        l.w_r = init::fan_in_uniform<T>({std::size_t(rc.experts), dim}, dim, seed,
                                        prefix + ".router.w");
        for (int e = 0; e < rc.experts; ++e)
          l.experts.push_back(
              FfnExpert<T>::make(dim, hidden, seed, prefix + ".ffn" + std::to_string(e)));
        break;
      case ExpertKind::FME:
        rc.validate();
        l.w_r = init::fan_in_uniform<T>({std::size_t(rc.experts), dim}, dim, seed,
                                        prefix + ".router.w");
        for (int e = 0; e < rc.experts; ++e)
          l.mods.push_back(FmGenerator<T>::make(dim));
        l.shared_ffn = FfnExpert<T>::make(dim, hidden, seed, prefix + ".shared_ffn");
        break;
    }
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x, RngStream& rng, bool training,
                    ExpertLayerAux<T>* aux) const {
    if (kind == ExpertKind::Dense) return experts[0].forward(x);

    const std::size_t n_tokens = x.size(0);
    const std::size_t n_experts = std::size_t(router.experts);
    RouteResult<T> rr = route(x, w_r, router, rng, training);

    // Group tokens by selected expert.
    std::vector<std::vector<std::size_t>> groups(n_experts);
    for (std::size_t t = 0; t < n_tokens; ++t)
      for (std::uint32_t e : rr.decision.selected[t]) groups[e].push_back(t);

    if (aux) {
      aux->routed = true;
      aux->stats = rr.stats;
      aux->has_stats = rr.has_stats;
      aux->fallback_count = rr.fallback_count;
      aux->eval_counts.assign(n_experts, 0);
      for (std::size_t e = 0; e < n_experts; ++e) aux->eval_counts[e] = groups[e].size();
    }

    std::vector<Tensor<T>> pieces;
    std::vector<std::vector<std::size_t>> piece_idx;
    for (std::size_t e = 0; e < n_experts; ++e) {
      if (groups[e].empty()) continue;
      Tensor<T> xe = gather_rows(x, groups[e]);
      Tensor<T> we = gather_rows(column(rr.decision.weights, e), groups[e]);
      Tensor<T> ye = kind == ExpertKind::MoE ? experts[e].forward(xe) : mods[e].forward(xe);
      pieces.push_back(mul_rows(ye, we));
      piece_idx.push_back(groups[e]);
    }
    Tensor<T> mixed = scatter_rows_sum(pieces, piece_idx, n_tokens);
    Tensor<T> out = kind == ExpertKind::MoE ? mixed : shared_ffn.forward(mixed);
    if (aux) aux->decision = std::move(rr.decision);
    return out;
  }

  // Expert-subsystem parameters: experts / modulators / shared FFN. The
  // router's E*D weights are accounted separately.
  std::int64_t expert_param_count() const {
    std::int64_t total = 0;
    for (const auto& e : experts) total += e.param_count();
    for (const auto& m : mods) total += m.param_count();
    if (kind == ExpertKind::FME) total += shared_ffn.param_count();
    return total;
  }

  std::int64_t router_param_count() const {
    return kind == ExpertKind::Dense ? 0 : std::int64_t(w_r.numel());
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    switch (kind) {
      case ExpertKind::Dense:
        experts[0].collect(out, prefix + ".ffn");
        break;
      case ExpertKind::MoE:
        out.push_back({prefix + ".router.w", w_r});
        for (std::size_t e = 0; e < experts.size(); ++e)
          experts[e].collect(out, prefix + ".ffn" + std::to_string(e));
        break;
      case ExpertKind::FME:
        out.push_back({prefix + ".router.w", w_r});
        for (std::size_t e = 0; e < mods.size(); ++e)
          mods[e].collect(out, prefix + ".mod" + std::to_string(e));
        shared_ffn.collect(out, prefix + ".shared_ffn");
        break;
    }
  }
};

}  // namespace mofme
