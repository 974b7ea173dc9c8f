#pragma once

// Context compression against a frozen target model.
//
// Two families produce a CompressedContext the target consumes instead of the
// raw prompt:
//   * MemCom: a two-stack compressor (Source + Memory clones of the target)
//     where m memory tokens query the source residual stream through one
//     cross-attention block per layer, yielding one m x d array per layer
//     (PER_LAYER).  The target turns each array into that layer's KV prefix.
//   * ICAE ladder: a single compressor clone reads [source; memory tokens]
//     and hands the final-layer memory-slot states to the target as m input
//     embeddings (EMBEDDING_PREFIX).  Capacity is graded by what may train:
//     LoRA on {q,k}, LoRA on {q,k,v,o}, or the full attention weights.
//
// Either way the target attends to exactly m context entries per layer; the
// fewer-shots path (pack fewer full shots into m raw tokens) lives with the
// prompt builder.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "memcom/transformer.hpp"

namespace memcom {

enum class ContextKind : uint8_t { kPerLayer = 0, kEmbeddingPrefix = 1 };

enum class CrossAttnVariant : uint8_t { kOneHead = 0, kMha = 1, kMqa = 2, kMqaSelfInit = 3 };

enum class IcaeCapacity : uint8_t { kIcae = 0, kIcaePlus = 1, kIcaePp = 2 };

inline const char* to_string(CrossAttnVariant v) {
  switch (v) {
    case CrossAttnVariant::kOneHead: return "one_head";
    case CrossAttnVariant::kMha: return "mha";
    case CrossAttnVariant::kMqa: return "mqa";
    case CrossAttnVariant::kMqaSelfInit: return "mqa_self_init";
  }
  return "?";
}

inline const char* to_string(IcaeCapacity c) {
  switch (c) {
    case IcaeCapacity::kIcae: return "icae";
    case IcaeCapacity::kIcaePlus: return "icae_plus";
    case IcaeCapacity::kIcaePp: return "icae_pp";
  }
  return "?";
}

// What a compressor hands the target.  PER_LAYER carries one [m, d] array per
// target layer; EMBEDDING_PREFIX carries a single [m, d] array consumed as
// input embeddings.  Payload tensors stay graph-connected so a downstream
// loss trains the compressor.
template <typename T>
struct CompressedContext {
  ContextKind kind = ContextKind::kPerLayer;
  std::vector<Tensor<T>> payload;
  int64_t source_t = 0;
  std::string config_hash;
  std::string compressor_id;

  int64_t m() const { return payload.empty() ? 0 : payload.front().shape()[0]; }
  double ratio() const { return m() > 0 ? static_cast<double>(source_t) / m() : 0.0; }
};

template <typename T>
void validate_context(const CompressedContext<T>& ctx, const ModelConfig& cfg) {
  MEMCOM_CHECK(!ctx.payload.empty(), "context: empty payload");
  if (ctx.kind == ContextKind::kPerLayer) {
    MEMCOM_CHECK(static_cast<int64_t>(ctx.payload.size()) == cfg.n_layers,
                 "context: per-layer payload count does not match model depth");
  } else {
    MEMCOM_CHECK(ctx.payload.size() == 1, "context: embedding payload must be a single array");
  }
  int64_t m = ctx.m();
  for (const auto& p : ctx.payload)
    MEMCOM_CHECK(p.rank() == 2 && p.shape()[0] == m && p.shape()[1] == cfg.d_model,
                 "context: payload shape mismatch");
  MEMCOM_CHECK(ctx.source_t >= m, "context: source shorter than payload, not a compression");
}

// Head layout of the per-layer cross-attention block.
struct CrossAttnShape {
  int64_t n_heads = 1;
  int64_t n_kv_heads = 1;
  int64_t head_dim = 0;
};

inline CrossAttnShape xattn_shape(const ModelConfig& cfg, CrossAttnVariant v) {
  switch (v) {
    case CrossAttnVariant::kOneHead:
      return {1, 1, cfg.d_model};
    case CrossAttnVariant::kMha:
      return {cfg.n_heads, cfg.n_heads, cfg.head_dim};
    case CrossAttnVariant::kMqa:
    case CrossAttnVariant::kMqaSelfInit:
      MEMCOM_CHECK(cfg.n_heads % cfg.n_kv_heads == 0,
                   "cross-attention: n_kv_heads must divide n_heads");
      return {cfg.n_heads, cfg.n_kv_heads, cfg.head_dim};
  }
  throw ConfigError("cross-attention: unknown variant");
}

// Install one cross-attention block under "<layer_base>xattn." in `tree`.
// Random variants draw from per-path streams; kMqaSelfInit copies the host
// layer's self-attention weights bit for bit.
template <typename T>
void build_cross_attention(ParamTree<T>& tree, const ModelConfig& cfg, CrossAttnVariant variant,
                           const std::string& layer_base, Rng& rng) {
  CrossAttnShape hs = xattn_shape(cfg, variant);
  int64_t d = cfg.d_model;
  int64_t qo = hs.n_heads * hs.head_dim;
  int64_t ko = hs.n_kv_heads * hs.head_dim;
  auto mk = [&](const std::string& name, Shape shape, double stddev) {
    Rng s = rng.split(layer_base + "xattn." + name);
    tree.add(layer_base + "xattn." + name, randn<T>(s, std::move(shape), stddev));
  };
  if (variant == CrossAttnVariant::kMqaSelfInit) {
    for (const char* name : {"wq", "wk", "wv", "wo"})
      tree.add(layer_base + "xattn." + name,
               tree.at(layer_base + std::string("attn.") + name).clone());
    return;
  }
  mk("wq", {d, qo}, 0.02);
  mk("wk", {d, ko}, 0.02);
  mk("wv", {d, ko}, 0.02);
  mk("wo", {qo, d}, 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers)));
}

// Bidirectional (no causal mask, no rotation) attention of q_in rows over
// kv_in rows through the block at "<base>": softmax(q K^T / sqrt(hd)) V Wo.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                          const ParamTree<T>& params, const std::string& base,
                          const CrossAttnShape& hs) {
  MEMCOM_CHECK(q_in.rank() == 2 && kv_in.rank() == 2 && q_in.shape()[1] == kv_in.shape()[1],
               "cross-attention: rank-2 inputs with equal width required");
  int64_t mq = q_in.shape()[0], tk = kv_in.shape()[0];
  Tensor<T> q = reshape(matmul(q_in, params.at(base + "wq")), {mq, hs.n_heads, hs.head_dim});
  Tensor<T> k = reshape(matmul(kv_in, params.at(base + "wk")), {tk, hs.n_kv_heads, hs.head_dim});
  Tensor<T> v = reshape(matmul(kv_in, params.at(base + "wv")), {tk, hs.n_kv_heads, hs.head_dim});
  Tensor<T> qh = permute3(q, {1, 0, 2});
  Tensor<T> kh = permute3(k, {1, 0, 2});
  Tensor<T> vh = permute3(v, {1, 0, 2});
  if (hs.n_kv_heads != hs.n_heads) {
    kh = repeat_heads(kh, hs.n_heads / hs.n_kv_heads);
    vh = repeat_heads(vh, hs.n_heads / hs.n_kv_heads);
  }
  Tensor<T> scores = scale(matmul(qh, transpose_last2(kh)),
                           1.0 / std::sqrt(static_cast<double>(hs.head_dim)));
  Tensor<T> probs = softmax_lastdim(scores);
  Tensor<T> ctx = matmul(probs, vh);
  Tensor<T> merged = reshape(permute3(ctx, {1, 0, 2}), {mq, hs.n_heads * hs.head_dim});
  return matmul(merged, params.at(base + "wo"));
}

// ---------------------------------------------------------------------------
// MemCom

template <typename T>
struct MemComSystem {
  ModelConfig cfg;
  CrossAttnVariant variant = CrossAttnVariant::kOneHead;
  int64_t m = 0;
  // Context payload: post-residual memory stream (default) or the raw
  // cross-attention output.
  bool payload_raw_xattn = false;
  int64_t memory_pos_start = 0;  // positions of the memory stream's own pass
  int phase_stamp = 0;           // highest completed training phase

  ParamTree<T> target;  // permanently frozen
  ParamTree<T> source;  // clone of target
  ParamTree<T> memory;  // clone of target + per-layer xattn.* + memory_tokens

  MemComSystem clone() const {
    MemComSystem out;
    out.cfg = cfg;
    out.variant = variant;
    out.m = m;
    out.payload_raw_xattn = payload_raw_xattn;
    out.memory_pos_start = memory_pos_start;
    out.phase_stamp = phase_stamp;
    out.target = target.clone();
    out.memory = memory.clone();
    out.source = source.clone();
    freeze_all(out.target);
    return out;
  }
};

template <typename T>
MemComSystem<T> make_memcom(const ModelConfig& cfg, const ParamTree<T>& target_params, int64_t m,
                            CrossAttnVariant variant, Rng rng) {
  cfg.validate();
  MEMCOM_CHECK(m >= 1 && m <= cfg.max_seq, "memcom: bad memory token count");
  MemComSystem<T> sys;
  sys.cfg = cfg;
  sys.variant = variant;
  sys.m = m;
  sys.target = target_params.clone();
  freeze_all(sys.target);
  sys.source = target_params.clone();
  sys.memory = target_params.clone();
  for (int64_t i = 0; i < cfg.n_layers; ++i)
    build_cross_attention(sys.memory, cfg, variant, "layers." + std::to_string(i) + ".", rng);
  Rng mt = rng.split("memory_tokens");
  sys.memory.add("memory_tokens", randn<T>(mt, {m, cfg.d_model}, 0.02));
  return sys;
}

// Phase 1: only the new pieces adapt (cross-attention blocks + memory
// tokens); Source stays a frozen clone.  Phase 2: Source and Memory stacks
// train end to end.  The target is untouchable in both.
template <typename T>
void apply_phase1_freeze(MemComSystem<T>& sys) {
  freeze_all(sys.source);
  apply_freeze(sys.memory, FreezeMask{{"layers.*.xattn.*", "memory_tokens"}});
}

template <typename T>
void apply_phase2_freeze(MemComSystem<T>& sys) {
  apply_freeze(sys.source, FreezeMask{{"*"}});
  apply_freeze(sys.memory, FreezeMask{{"*"}});
}

// Compress t source tokens into one [m, d] array per layer.
//
// Source pass: full forward with residual-stream capture; H_src[i] is the
// input to layer i.  Memory pass: the memory tokens run the same decoder
// layers, but between the self-attention residual add and the MLP each layer
// inserts O_i = CrossAttn(Q = stream, K = V = H_src[i]), added residually.
// The payload at layer i is the stream right after that add (or raw O_i when
// payload_raw_xattn).
template <typename T>
CompressedContext<T> memcom_compress(const MemComSystem<T>& sys,
                                     const std::vector<int32_t>& source_tokens) {
  const ModelConfig& cfg = sys.cfg;
  int64_t t = static_cast<int64_t>(source_tokens.size());
  MEMCOM_CHECK(t >= 1 && t <= cfg.max_seq, "memcom: bad source length");
  MEMCOM_CHECK(t >= sys.m, "memcom: source shorter than memory span, not a compression");
  MEMCOM_CHECK(sys.memory.contains("layers." + std::to_string(cfg.n_layers - 1) + ".xattn.wq") &&
                   !sys.memory.contains("layers." + std::to_string(cfg.n_layers) + ".norm1"),
               "memcom: stack depth mismatch");

  ForwardOptions src_opts;
  src_opts.capture_hidden = true;
  src_opts.compute_logits = false;
  auto src = forward(sys.source, cfg, source_tokens, nullptr, iota_positions(0, t), src_opts);

  CrossAttnShape hs = xattn_shape(cfg, sys.variant);
  std::vector<int64_t> positions = iota_positions(sys.memory_pos_start, sys.m);
  Tensor<T> x = sys.memory.at("memory_tokens");
  CompressedContext<T> ctx;
  ctx.kind = ContextKind::kPerLayer;
  ctx.source_t = t;
  ctx.config_hash = cfg.hash_hex();
  ctx.compressor_id = std::string("memcom.") + to_string(sys.variant);
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string base = "layers." + std::to_string(i) + ".";
    Tensor<T> xn = rmsnorm(x, sys.memory.at(base + "norm1"), cfg.norm_eps);
    AttentionOut<T> att = self_attention(xn, sys.memory, base, cfg, nullptr, nullptr, positions);
    Tensor<T> h = add(x, att.out);
    Tensor<T> o_i = cross_attention(h, src.hiddens[static_cast<size_t>(i)], sys.memory,
                                    base + "xattn.", hs);
    x = add(h, o_i);
    ctx.payload.push_back(sys.payload_raw_xattn ? o_i : x);
    Tensor<T> hn = rmsnorm(x, sys.memory.at(base + "norm2"), cfg.norm_eps);
    Tensor<T> gated = mul(silu(matmul(hn, sys.memory.at(base + "mlp.gate"))),
                          matmul(hn, sys.memory.at(base + "mlp.up")));
    x = add(x, matmul(gated, sys.memory.at(base + "mlp.down")));
  }
  return ctx;
}

// ---------------------------------------------------------------------------
// ICAE ladder

template <typename T>
struct IcaeSystem {
  ModelConfig cfg;
  IcaeCapacity capacity = IcaeCapacity::kIcae;
  int64_t m = 0;
  int64_t lora_rank = 32;
  double lora_alpha = 32.0;
  int phase_stamp = 0;  // set once trained

  ParamTree<T> target;      // permanently frozen
  ParamTree<T> compressor;  // clone; only kIcaePp trains (attention) weights here
  ParamTree<T> extras;      // LoRA adapter pairs + memory_tokens
};

template <typename T>
IcaeSystem<T> make_icae(const ModelConfig& cfg, const ParamTree<T>& target_params, int64_t m,
                        IcaeCapacity capacity, Rng rng, int64_t lora_rank = 32,
                        double lora_alpha = 32.0) {
  cfg.validate();
  MEMCOM_CHECK(m >= 1 && m < cfg.max_seq, "icae: bad memory token count");
  IcaeSystem<T> sys;
  sys.cfg = cfg;
  sys.capacity = capacity;
  sys.m = m;
  sys.lora_rank = lora_rank;
  sys.lora_alpha = lora_alpha;
  sys.target = target_params.clone();
  freeze_all(sys.target);
  sys.compressor = target_params.clone();
  freeze_all(sys.compressor);
  if (capacity == IcaeCapacity::kIcaePp) {
    apply_freeze(sys.compressor, FreezeMask{{"layers.*.attn.*"}});
  } else {
    std::vector<std::string> mats = {"wq", "wk"};
    if (capacity == IcaeCapacity::kIcaePlus) mats = {"wq", "wk", "wv", "wo"};
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
      std::string base = "layers." + std::to_string(i) + ".attn.";
      for (const std::string& w : mats) {
        const Shape& ws = sys.compressor.at(base + w).shape();
        Rng sa = rng.split(base + w + ".lora_a");
        sys.extras.add(base + w + ".lora_a", randn<T>(sa, {ws[0], lora_rank}, 0.02, true));
        sys.extras.add(base + w + ".lora_b", Tensor<T>::zeros({lora_rank, ws[1]}, true));
      }
    }
  }
  Rng mt = rng.split("memory_tokens");
  sys.extras.add("memory_tokens", randn<T>(mt, {m, cfg.d_model}, 0.02, true));
  return sys;
}

template <typename T>
int64_t icae_trainable_count(const IcaeSystem<T>& sys) {
  int64_t n = 0;
  for (const auto& [path, t] : sys.compressor.items())
    if (t.requires_grad()) n += t.numel();
  for (const auto& [path, t] : sys.extras.items())
    if (t.requires_grad()) n += t.numel();
  return n;
}

// One pass over [source tokens; memory tokens]; the final-layer residual
// stream at the m memory slots is the payload.
template <typename T>
CompressedContext<T> icae_compress(const IcaeSystem<T>& sys,
                                   const std::vector<int32_t>& source_tokens) {
  const ModelConfig& cfg = sys.cfg;
  int64_t t = static_cast<int64_t>(source_tokens.size());
  MEMCOM_CHECK(t >= 1, "icae: empty source");
  MEMCOM_CHECK(t >= sys.m, "icae: source shorter than memory span, not a compression");
  MEMCOM_CHECK(t + sys.m <= cfg.max_seq, "icae: source plus memory tokens exceed max_seq");
  Tensor<T> emb = embedding_lookup(sys.compressor.at("embed.tok"), source_tokens);
  Tensor<T> x = concat(0, std::vector<Tensor<T>>{emb, sys.extras.at("memory_tokens")});
  LoraSet<T> lora = collect_lora(sys.extras, sys.lora_alpha, sys.lora_rank);
  ForwardOptions opts;
  opts.capture_hidden = true;
  opts.compute_logits = false;
  auto res = forward_embeddings(sys.compressor, cfg, std::move(x), nullptr,
                                iota_positions(0, t + sys.m), opts,
                                lora.adapters.empty() ? nullptr : &lora);
  CompressedContext<T> ctx;
  ctx.kind = ContextKind::kEmbeddingPrefix;
  ctx.payload.push_back(slice(res.hiddens.back(), 0, t, t + sys.m));
  ctx.source_t = t;
  ctx.config_hash = cfg.hash_hex();
  ctx.compressor_id = to_string(sys.capacity);
  return ctx;
}

// ---------------------------------------------------------------------------
// Target-side consumption

// Turn a context into the target's per-layer KV prefix at positions
// 0..m-1.  PER_LAYER: the target applies its own pre-attention norm and
// frozen K/V projections (plus rotation) to each layer's array.
// EMBEDDING_PREFIX: the payload runs through the target as m input
// embeddings and the resulting per-layer KV is kept.
template <typename T>
LayerKV<T> context_prefix_kv(const ParamTree<T>& target, const ModelConfig& cfg,
                             const CompressedContext<T>& ctx) {
  validate_context(ctx, cfg);
  int64_t m = ctx.m();
  std::vector<int64_t> positions = iota_positions(0, m);
  LayerKV<T> kv;
  if (ctx.kind == ContextKind::kEmbeddingPrefix) {
    ForwardOptions opts;
    opts.capture_kv = true;
    opts.compute_logits = false;
    auto res = forward_embeddings(target, cfg, ctx.payload.front(), nullptr, positions, opts);
    return std::move(res.kv);
  }
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string base = "layers." + std::to_string(i) + ".";
    Tensor<T> ni = rmsnorm(ctx.payload[static_cast<size_t>(i)], target.at(base + "norm1"),
                           cfg.norm_eps);
    Tensor<T> k = reshape(matmul(ni, target.at(base + "attn.wk")),
                          {m, cfg.n_kv_heads, cfg.head_dim});
    Tensor<T> v = reshape(matmul(ni, target.at(base + "attn.wv")),
                          {m, cfg.n_kv_heads, cfg.head_dim});
    kv.k.push_back(rope_apply(k, positions, cfg.rope_base));
    kv.v.push_back(v);
  }
  kv.positions = positions;
  return kv;
}

// Run the frozen target over `tokens` with the compressed context as its only
// past: token j attends to m context entries plus the causal window, at every
// layer.  Refuses contexts minted under a different architecture.
template <typename T>
ForwardResult<T> target_attend(const ParamTree<T>& target, const ModelConfig& cfg,
                               const CompressedContext<T>& ctx,
                               const std::vector<int32_t>& tokens,
                               const ForwardOptions& opts = {}) {
  MEMCOM_CHECK(ctx.config_hash == cfg.hash_hex(),
               "target_attend: context was built for a different model configuration");
  LayerKV<T> prefix = context_prefix_kv(target, cfg, ctx);
  int64_t m = ctx.m();
  return forward(target, cfg, tokens, &prefix,
                 iota_positions(m, static_cast<int64_t>(tokens.size())), opts);
}

// Prefix KV entries the two passes share must agree for incremental scoring.
template <typename T>
LayerKV<T> kv_concat(const LayerKV<T>& a, const LayerKV<T>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  MEMCOM_CHECK(a.k.size() == b.k.size(), "kv_concat: layer count mismatch");
  MEMCOM_CHECK(a.positions.back() < b.positions.front(), "kv_concat: positions must ascend");
  LayerKV<T> out;
  for (size_t i = 0; i < a.k.size(); ++i) {
    out.k.push_back(concat(0, std::vector<Tensor<T>>{a.k[i], b.k[i]}));
    out.v.push_back(concat(0, std::vector<Tensor<T>>{a.v[i], b.v[i]}));
  }
  out.positions = a.positions;
  out.positions.insert(out.positions.end(), b.positions.begin(), b.positions.end());
  return out;
}

}  // namespace memcom
