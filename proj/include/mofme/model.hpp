#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mofme/experts.hpp"
#include "mofme/losses.hpp"
#include "mofme/ops.hpp"

namespace mofme {

// Desk-scale defaults; the full-scale architecture uses the same wiring with
// larger channel counts.
struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t in_channels = 3;
  std::size_t head_channels = 8;  // C
  std::size_t patch = 8;          // P
  std::size_t dim = 64;           // D
  std::size_t depth = 2;          // L
  std::size_t heads = 4;
  ExpertKind expert_kind = ExpertKind::Dense;
  RouterConfig router;
  std::size_t scaling = 4;             // FFN hidden = scaling * dim
  std::size_t ffn_hidden_override = 0;  // nonzero: explicit hidden width

  std::size_t hidden() const {
    return ffn_hidden_override ? ffn_hidden_override : scaling * dim;
  }
  std::size_t tokens() const { return (image_h / patch) * (image_w / patch); }
  std::size_t patch_dim() const { return head_channels * patch * patch; }

  void validate() const {
    if (image_h == 0 || image_w == 0 || patch == 0)
      throw ConfigError("model: image and patch sizes must be positive");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError(msg("model: image ", image_h, "x", image_w,
                            " not divisible by patch ", patch));
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError(msg("model: dim ", dim, " not divisible by heads ", heads));
    if (depth == 0) throw ConfigError("model: depth must be >= 1");
    if (head_channels < 2 || head_channels % 2 != 0)
      throw ConfigError(msg("model: head_channels must be even and >= 2, got ",
                            head_channels));
    if (scaling == 0) throw ConfigError("model: scaling must be >= 1");
    if (expert_kind != ExpertKind::Dense) router.validate();
  }
};

template <class T>
struct ConvLayer {
  Tensor<T> w, b;  // [Co x Ci x 3 x 3], [Co]

  static ConvLayer make(std::size_t cin, std::size_t cout, std::uint64_t seed,
                        const std::string& name) {
    ConvLayer l;
    l.w = init::fan_in_uniform<T>({cout, cin, 3, 3}, cin * 9, seed, name + ".w");
    l.b = Tensor<T>::zeros({cout});
    return l;
  }
  Tensor<T> forward(const Tensor<T>& x) const { return conv2d_3x3(x, w, b); }
  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
  }
};

// conv-ReLU-conv with identity shortcut.
template <class T>
struct ResBlock {
  ConvLayer<T> a, b;

  static ResBlock make(std::size_t ch, std::uint64_t seed, const std::string& name) {
    ResBlock r;
    r.a = ConvLayer<T>::make(ch, ch, seed, name + ".conv0");
    r.b = ConvLayer<T>::make(ch, ch, seed, name + ".conv1");
    return r;
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    return add(x, b.forward(relu(a.forward(x))));
  }
  void collect(ParamList<T>& out, const std::string& prefix) {
    a.collect(out, prefix + ".conv0");
    b.collect(out, prefix + ".conv1");
  }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  static LayerNormParams make(std::size_t dim) {
    return {Tensor<T>::full({dim}, T(1)), Tensor<T>::zeros({dim})};
  }
  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

// Scaled dot-product multi-head self-attention over per-image token groups.
// The residual connection is applied by the caller.
template <class T>
struct AttentionBlock {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  std::size_t heads = 1;

  static AttentionBlock make(std::size_t dim, std::size_t heads, std::uint64_t seed,
                             const std::string& name) {
    if (dim % heads != 0)
      throw ConfigError(msg("attention: dim ", dim, " not divisible by heads ", heads));
    AttentionBlock a;
    a.heads = heads;
    a.wq = init::fan_in_uniform<T>({dim, dim}, dim, seed, name + ".wq");
    a.wk = init::fan_in_uniform<T>({dim, dim}, dim, seed, name + ".wk");
    a.wv = init::fan_in_uniform<T>({dim, dim}, dim, seed, name + ".wv");
    a.wo = init::fan_in_uniform<T>({dim, dim}, dim, seed, name + ".wo");
    a.bq = Tensor<T>::zeros({dim});
    a.bk = Tensor<T>::zeros({dim});
    a.bv = Tensor<T>::zeros({dim});
    a.bo = Tensor<T>::zeros({dim});
    return a;
  }

  // x: [B*N x D]; tokens attend within their own image. `probs_out`, when
  // given, receives the [B*heads x N x N] attention matrix values.
  Tensor<T> forward(const Tensor<T>& x, std::size_t batch,
                    std::vector<T>* probs_out = nullptr) const {
    const std::size_t d = wq.size(0);
    const std::size_t n = x.size(0) / batch;
    const std::size_t dh = d / heads;
    auto split = [&](const Tensor<T>& m) {
      // [B*N x D] -> [B*heads x N x dh]
      Tensor<T> r = reshape(m, {batch, n, heads, dh});
      return reshape(permute(r, {0, 2, 1, 3}), {batch * heads, n, dh});
    };
    Tensor<T> q = split(add_rowvec(matmul(x, wq), bq));
    Tensor<T> k = split(add_rowvec(matmul(x, wk), bk));
    Tensor<T> v = split(add_rowvec(matmul(x, wv), bv));
    Tensor<T> scores = mul_scalar(bmm_nt(q, k), T(1.0 / std::sqrt(double(dh))));
    Tensor<T> probs = softmax_lastdim(scores);
    if (probs_out) *probs_out = probs.value();
    Tensor<T> ctx = bmm(probs, v);  // [B*heads x N x dh]
    Tensor<T> merged = reshape(
        permute(reshape(ctx, {batch, heads, n, dh}), {0, 2, 1, 3}), {batch * n, d});
    return add_rowvec(matmul(merged, wo), bo);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".bq", bq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".bk", bk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".bv", bv});
    out.push_back({prefix + ".wo", wo});
    out.push_back({prefix + ".bo", bo});
  }
};

template <class T>
struct EncoderBlock {
  LayerNormParams<T> ln1, ln2;
  AttentionBlock<T> attn;
  ExpertLayer<T> expert;

  void collect(ParamList<T>& out, const std::string& prefix) {
    ln1.collect(out, prefix + ".ln1");
    attn.collect(out, prefix + ".attn");
    ln2.collect(out, prefix + ".ln2");
    expert.collect(out, prefix + ".expert");
  }
};

template <class T>
struct ModelAux {
  std::vector<ExpertLayerAux<T>> layers;
};

// Shared conv head -> patch embedding (+ learnable position embedding) ->
// L encoder blocks (pre-LN attention and expert layer, both residual) ->
// inverted bottleneck back to the image grid -> shared conv tail.
template <class T>
struct RestorationModel {
  ModelConfig cfg;

  ConvLayer<T> head0;
  ResBlock<T> head1, head2;
  Tensor<T> patch_w, patch_b;   // [C*P*P x D], [D]
  Tensor<T> pos_embed;          // [N x D]
  std::vector<EncoderBlock<T>> blocks;
  Tensor<T> bottleneck_w, bottleneck_b;  // [D x C*P*P], [C*P*P]
  ResBlock<T> tail_res1;
  ConvLayer<T> tail_conv1;  // C -> C/2
  ResBlock<T> tail_res2;
  ConvLayer<T> tail_conv2;  // C/2 -> 3

  std::vector<std::size_t> patch_map;    // single-image [N x C*P*P] <- [C x H x W]
  std::vector<std::size_t> unpatch_map;  // single-image [C x H x W] <- [N x C*P*P]

  static RestorationModel build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RestorationModel m;
    m.cfg = cfg;
    const std::size_t c = cfg.head_channels;
    m.head0 = ConvLayer<T>::make(cfg.in_channels, c, seed, "head.conv0");
    m.head1 = ResBlock<T>::make(c, seed, "head.res0");
    m.head2 = ResBlock<T>::make(c, seed, "head.res1");
    m.patch_w = init::fan_in_uniform<T>({cfg.patch_dim(), cfg.dim}, cfg.patch_dim(),
                                        seed, "embed.w");
    m.patch_b = Tensor<T>::zeros({cfg.dim});
    m.pos_embed = init::normal<T>({cfg.tokens(), cfg.dim}, 0.02, seed, "embed.pos");
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      std::string prefix = "enc" + std::to_string(l);
      EncoderBlock<T> b;
      b.ln1 = LayerNormParams<T>::make(cfg.dim);
      b.attn = AttentionBlock<T>::make(cfg.dim, cfg.heads, seed, prefix + ".attn");
      b.ln2 = LayerNormParams<T>::make(cfg.dim);
      b.expert = ExpertLayer<T>::make(cfg.expert_kind, cfg.dim, cfg.hidden(),
                                      cfg.router, seed, prefix + ".expert");
      m.blocks.push_back(std::move(b));
    }
    m.bottleneck_w = init::fan_in_uniform<T>({cfg.dim, cfg.patch_dim()}, cfg.dim, seed,
                                             "bottleneck.w");
    m.bottleneck_b = Tensor<T>::zeros({cfg.patch_dim()});
    m.tail_res1 = ResBlock<T>::make(c, seed, "tail.res0");
    m.tail_conv1 = ConvLayer<T>::make(c, c / 2, seed, "tail.conv0");
    m.tail_res2 = ResBlock<T>::make(c / 2, seed, "tail.res1");
    m.tail_conv2 = ConvLayer<T>::make(c / 2, 3, seed, "tail.conv1");
    m.build_patch_maps();
    return m;
  }

  void build_patch_maps() {
    const std::size_t c = cfg.head_channels, h = cfg.image_h, w = cfg.image_w,
                      p = cfg.patch;
    const std::size_t gx = w / p;
    patch_map.assign(cfg.tokens() * cfg.patch_dim(), 0);
    unpatch_map.assign(c * h * w, 0);
    for (std::size_t n = 0; n < cfg.tokens(); ++n) {
      std::size_t py = n / gx, px = n % gx;
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) {
            std::size_t col = ci * p * p + dy * p + dx;
            std::size_t src = ci * h * w + (py * p + dy) * w + (px * p + dx);
            patch_map[n * cfg.patch_dim() + col] = src;
            unpatch_map[src] = n * cfg.patch_dim() + col;
          }
    }
  }

  // images: [B x 3 x H x W] -> restored [B x 3 x H x W].
  Tensor<T> forward(const Tensor<T>& images, RngStream& rng, bool training,
                    ModelAux<T>* aux = nullptr) const {
    if (images.rank() != 4 || images.size(1) != cfg.in_channels ||
        images.size(2) != cfg.image_h || images.size(3) != cfg.image_w)
      throw ShapeError(msg("forward: expected [Bx", cfg.in_channels, "x", cfg.image_h,
                           "x", cfg.image_w, "], got ", shape_str(images.shape())));
    const std::size_t batch = images.size(0);
    const std::size_t n = cfg.tokens(), pd = cfg.patch_dim();
    const std::size_t plane = cfg.head_channels * cfg.image_h * cfg.image_w;

    Tensor<T> f = head2.forward(head1.forward(head0.forward(images)));

    std::vector<std::size_t> map(batch * n * pd);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n * pd; ++i)
        map[b * n * pd + i] = b * plane + patch_map[i];
    Tensor<T> patches = gather_flat(f, std::move(map), {batch * n, pd});

    Tensor<T> t = add_tiled(add_rowvec(matmul(patches, patch_w), patch_b), pos_embed);

    if (aux) aux->layers.assign(blocks.size(), {});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const EncoderBlock<T>& blk = blocks[l];
      Tensor<T> y = add(t, blk.attn.forward(blk.ln1.forward(t), batch));
      ExpertLayerAux<T>* la = aux ? &aux->layers[l] : nullptr;
      t = add(y, blk.expert.forward(blk.ln2.forward(y), rng, training, la));
    }

    Tensor<T> feats = add_rowvec(matmul(t, bottleneck_w), bottleneck_b);
    std::vector<std::size_t> unmap(batch * plane);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i)
        unmap[b * plane + i] = b * n * pd + unpatch_map[i];
    Tensor<T> grid = gather_flat(feats, std::move(unmap),
                                 {batch, cfg.head_channels, cfg.image_h, cfg.image_w});

    Tensor<T> g = relu(tail_conv1.forward(tail_res1.forward(grid)));
    return tail_conv2.forward(tail_res2.forward(g));
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    head0.collect(out, "head.conv0");
    head1.collect(out, "head.res0");
    head2.collect(out, "head.res1");
    out.push_back({"embed.w", patch_w});
    out.push_back({"embed.b", patch_b});
    out.push_back({"embed.pos", pos_embed});
    for (std::size_t l = 0; l < blocks.size(); ++l)
      blocks[l].collect(out, "enc" + std::to_string(l));
    out.push_back({"bottleneck.w", bottleneck_w});
    out.push_back({"bottleneck.b", bottleneck_b});
    tail_res1.collect(out, "tail.res0");
    tail_conv1.collect(out, "tail.conv0");
    tail_res2.collect(out, "tail.res1");
    tail_conv2.collect(out, "tail.conv1");
    return out;
  }

  void set_requires_grad(bool rg = true) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(rg);
  }

  std::int64_t param_count_total() {
    std::int64_t total = 0;
    for (auto& p : parameters()) total += std::int64_t(p.tensor.numel());
    return total;
  }

  // Experts / modulators / shared FFN only; the routers' E*D weights are
  // reported separately.
  std::int64_t param_count_experts() const {
    std::int64_t total = 0;
    for (const auto& b : blocks) total += b.expert.expert_param_count();
    return total;
  }

  std::int64_t param_count_routers() const {
    std::int64_t total = 0;
    for (const auto& b : blocks) total += b.expert.router_param_count();
    return total;
  }
};

}  // namespace mofme
