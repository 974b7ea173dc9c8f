#pragma once

// Decoder-only transformer forward pass: pre-norm RMSNorm blocks, rotary
// positions applied from explicit position lists, causal self-attention with
// grouped key/value heads and an optional external per-layer KV prefix, gated
// SiLU MLP, and a logit head tied to the token embedding.
//
// The forward can capture per-layer residual-stream inputs (for compressors
// reading source representations) and its own rotated K/V (for prefix reuse),
// and reports per-layer attention-span counters so evaluations can prove how
// many context entries were actually attended.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <type_traits>

#include "memcom/model.hpp"
#include "memcom/ops.hpp"

namespace memcom {

// Per-layer rotated key/value prefix.  k/v hold one [P, n_kv_heads, head_dim]
// tensor per layer; positions are the rotary positions baked into k.
template <typename T>
struct LayerKV {
  std::vector<Tensor<T>> k;
  std::vector<Tensor<T>> v;
  std::vector<int64_t> positions;

  int64_t len() const { return static_cast<int64_t>(positions.size()); }
  bool empty() const { return positions.empty(); }
};

// Low-rank adapters keyed by the path of the weight they shadow.
// Effective weight: W + (alpha / rank) * A B.
template <typename T>
struct LoraSet {
  std::unordered_map<std::string, std::pair<Tensor<T>, Tensor<T>>> adapters;
  double alpha = 32.0;
  int64_t rank = 32;

  const std::pair<Tensor<T>, Tensor<T>>* find(const std::string& path) const {
    auto it = adapters.find(path);
    return it == adapters.end() ? nullptr : &it->second;
  }
};

// Collect "<path>.lora_a"/"<path>.lora_b" pairs from a registry into a view.
template <typename T>
LoraSet<T> collect_lora(const ParamTree<T>& tree, double alpha, int64_t rank) {
  LoraSet<T> set;
  set.alpha = alpha;
  set.rank = rank;
  for (const auto& [path, t] : tree.items()) {
    if (path.size() > 7 && path.compare(path.size() - 7, 7, ".lora_a") == 0) {
      std::string base = path.substr(0, path.size() - 7);
      set.adapters.emplace(base, std::make_pair(t, tree.at(base + ".lora_b")));
    }
  }
  return set;
}

struct ForwardOptions {
  bool capture_hidden = false;
  bool capture_kv = false;
  bool compute_logits = true;
};

// attended(layer, j) = prefix_entries[layer] + j + 1 for query j.
struct SpanReport {
  std::vector<int64_t> prefix_entries;  // per layer: external KV entries visible
  int64_t queries = 0;

  int64_t attended(size_t layer, int64_t j) const { return prefix_entries.at(layer) + j + 1; }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                 // [T, vocab] when compute_logits
  std::vector<Tensor<T>> hiddens;   // L+1 residual-stream tensors when capture_hidden
  LayerKV<T> kv;                    // own rotated K/V when capture_kv
  SpanReport span;
};

template <typename T>
struct AttentionOut {
  Tensor<T> out;  // [T, d_model]
  Tensor<T> k;    // [T, n_kv_heads, head_dim], rotated
  Tensor<T> v;    // [T, n_kv_heads, head_dim]
};

namespace detail {

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const LoraSet<T>* lora,
                  const std::string& path) {
  Tensor<T> y = matmul(x, w);
  if (lora != nullptr) {
    if (const auto* ab = lora->find(path)) {
      Tensor<T> delta = matmul(matmul(x, ab->first), ab->second);
      y = add(y, scale(delta, lora->alpha / static_cast<double>(lora->rank)));
    }
  }
  return y;
}

}  // namespace detail

// One causal self-attention block over pre-normalized input.  `prefix_k` /
// `prefix_v` (may be undefined) are rotated per-layer KV entries prepended to
// this pass's own keys and values.
template <typename T>
AttentionOut<T> self_attention(const Tensor<T>& xn, const ParamTree<T>& params,
                               const std::string& layer_base, const ModelConfig& cfg,
                               const Tensor<std::type_identity_t<T>>* prefix_k,
                               const Tensor<std::type_identity_t<T>>* prefix_v,
                               const std::vector<int64_t>& positions,
                               const LoraSet<std::type_identity_t<T>>* lora = nullptr) {
  int64_t t = xn.shape()[0];
  int64_t h = cfg.n_heads, kvh = cfg.n_kv_heads, hd = cfg.head_dim;
  Tensor<T> q = reshape(detail::project(xn, params.at(layer_base + "attn.wq"), lora,
                                        layer_base + "attn.wq"),
                        {t, h, hd});
  Tensor<T> k = reshape(detail::project(xn, params.at(layer_base + "attn.wk"), lora,
                                        layer_base + "attn.wk"),
                        {t, kvh, hd});
  Tensor<T> v = reshape(detail::project(xn, params.at(layer_base + "attn.wv"), lora,
                                        layer_base + "attn.wv"),
                        {t, kvh, hd});
  q = rope_apply(q, positions, cfg.rope_base);
  k = rope_apply(k, positions, cfg.rope_base);

  int64_t p = 0;
  Tensor<T> k_all = k, v_all = v;
  if (prefix_k != nullptr && prefix_k->defined() && prefix_k->shape()[0] > 0) {
    p = prefix_k->shape()[0];
    k_all = concat(0, std::vector<Tensor<T>>{*prefix_k, k});
    v_all = concat(0, std::vector<Tensor<T>>{*prefix_v, v});
  }

  Tensor<T> qh = permute3(q, {1, 0, 2});          // [h, t, hd]
  Tensor<T> kh = permute3(k_all, {1, 0, 2});      // [kvh, p+t, hd]
  Tensor<T> vh = permute3(v_all, {1, 0, 2});
  if (kvh != h) {
    kh = repeat_heads(kh, h / kvh);
    vh = repeat_heads(vh, h / kvh);
  }
  Tensor<T> scores = scale(matmul(qh, transpose_last2(kh)),
                           1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor<T> probs = causal_softmax(scores, p);
  Tensor<T> ctx = matmul(probs, vh);              // [h, t, hd]
  Tensor<T> merged = reshape(permute3(ctx, {1, 0, 2}), {t, h * hd});
  Tensor<T> out = matmul(merged, params.at(layer_base + "attn.wo"));
  return {out, k, v};
}

// Forward over pre-computed input embeddings [T, d_model].
template <typename T>
ForwardResult<T> forward_embeddings(const ParamTree<T>& params, const ModelConfig& cfg,
                                    Tensor<T> x, const LayerKV<std::type_identity_t<T>>* prefix,
                                    const std::vector<int64_t>& positions,
                                    const ForwardOptions& opts = {},
                                    const LoraSet<std::type_identity_t<T>>* lora = nullptr) {
  cfg.validate();
  int64_t t = x.shape()[0];
  MEMCOM_CHECK(t >= 1, "forward: empty input");
  MEMCOM_CHECK(x.rank() == 2 && x.shape()[1] == cfg.d_model, "forward: bad embedding shape");
  MEMCOM_CHECK(static_cast<int64_t>(positions.size()) == t, "forward: positions length mismatch");
  for (size_t i = 0; i + 1 < positions.size(); ++i)
    MEMCOM_CHECK(positions[i] < positions[i + 1], "forward: positions must strictly increase");
  MEMCOM_CHECK(positions.front() >= 0 && positions.back() < cfg.max_seq,
               "forward: sequence exceeds max_seq");
  int64_t p = 0;
  if (prefix != nullptr && !prefix->empty()) {
    p = prefix->len();
    MEMCOM_CHECK(static_cast<int64_t>(prefix->k.size()) == cfg.n_layers &&
                     static_cast<int64_t>(prefix->v.size()) == cfg.n_layers,
                 "forward: prefix layer count does not match model depth");
    MEMCOM_CHECK(p + t <= cfg.max_seq, "forward: prefix plus input exceeds max_seq");
    int64_t max_pref = prefix->positions.empty() ? -1 : prefix->positions.back();
    MEMCOM_CHECK(max_pref < positions.front(),
                 "forward: prefix positions must lie strictly before input positions");
    for (int64_t li = 0; li < cfg.n_layers; ++li) {
      const Shape& ks = prefix->k[static_cast<size_t>(li)].shape();
      MEMCOM_CHECK(ks == (Shape{p, cfg.n_kv_heads, cfg.head_dim}),
                   "forward: prefix KV shape mismatch at layer " + std::to_string(li));
    }
  }

  ForwardResult<T> res;
  res.span.queries = t;
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string base = "layers." + std::to_string(i) + ".";
    if (opts.capture_hidden) res.hiddens.push_back(x);
    Tensor<T> xn = rmsnorm(x, params.at(base + "norm1"), cfg.norm_eps);
    const Tensor<T>* pk = nullptr;
    const Tensor<T>* pv = nullptr;
    if (p > 0) {
      pk = &prefix->k[static_cast<size_t>(i)];
      pv = &prefix->v[static_cast<size_t>(i)];
    }
    AttentionOut<T> att = self_attention(xn, params, base, cfg, pk, pv, positions, lora);
    res.span.prefix_entries.push_back(p);
    if (opts.capture_kv) {
      res.kv.k.push_back(att.k);
      res.kv.v.push_back(att.v);
    }
    x = add(x, att.out);
    Tensor<T> hn = rmsnorm(x, params.at(base + "norm2"), cfg.norm_eps);
    Tensor<T> gated = mul(silu(matmul(hn, params.at(base + "mlp.gate"))),
                          matmul(hn, params.at(base + "mlp.up")));
    x = add(x, matmul(gated, params.at(base + "mlp.down")));
  }
  if (opts.capture_hidden) res.hiddens.push_back(x);
  if (opts.capture_kv) res.kv.positions = positions;
  if (opts.compute_logits) {
    Tensor<T> xf = rmsnorm(x, params.at("final_norm"), cfg.norm_eps);
    res.logits = matmul(xf, transpose_last2(params.at("embed.tok")));
  }
  return res;
}

// Forward over token ids.
template <typename T>
ForwardResult<T> forward(const ParamTree<T>& params, const ModelConfig& cfg,
                         const std::vector<int32_t>& tokens,
                         const LayerKV<std::type_identity_t<T>>* prefix,
                         const std::vector<int64_t>& positions, const ForwardOptions& opts = {},
                         const LoraSet<std::type_identity_t<T>>* lora = nullptr) {
  Tensor<T> x = embedding_lookup(params.at("embed.tok"), tokens);
  return forward_embeddings(params, cfg, std::move(x), prefix, positions, opts, lora);
}

inline std::vector<int64_t> iota_positions(int64_t start, int64_t count) {
  std::vector<int64_t> out(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) out[static_cast<size_t>(i)] = start + i;
  return out;
}

}  // namespace memcom
