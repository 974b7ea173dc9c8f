#pragma once

// Bit-exact binary persistence: compressed contexts, training checkpoints,
// optimizer state.  One container format serves all of them.
//
// File layout (normative, little-endian on every platform):
//   magic "MCC1"                      4 bytes
//   version        u32               (currently 1)
//   kind           u8                (0 per-layer context, 1 embedding-prefix
//                                     context, 2 checkpoint)
//   L              u32               payload array count (model depth for
//                                     kind 0, 1 for kind 1, depth for kind 2)
//   m              u32               memory token count (0 for checkpoints)
//   d              u32               model width
//   dtype          u8                (0 = 32-bit float, 1 = 64-bit float)
//   source_t       u32               compressed prompt length (0 for kind 2)
//   config_hash    32 raw bytes      SHA-256 of the model config text
//   payload        element bytes, layer-major then token-major then
//                                    channel-major (kind 2: checkpoint body)
//   crc32          u32               over everything above it
//
// Corruption (bad magic, unknown version, truncation, CRC mismatch) raises
// IoError; consuming a well-formed file against the wrong model or element
// type raises ConfigError.  Writes are atomic: temp file + rename.

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "memcom/common.hpp"
#include "memcom/compressor.hpp"
#include "memcom/digest.hpp"
#include "memcom/model.hpp"
#include "memcom/tensor.hpp"
#include "memcom/train.hpp"

namespace memcom {

inline constexpr uint32_t kCacheVersion = 1;
inline constexpr uint8_t kKindPerLayer = 0;
inline constexpr uint8_t kKindEmbeddingPrefix = 1;
inline constexpr uint8_t kKindCheckpoint = 2;
inline constexpr size_t kCacheHeaderBytes = 58;  // magic..config_hash
inline constexpr size_t kCacheTrailerBytes = 4;  // crc32

// Parsed header plus integrity facts; returned by inspect_cache.
struct CacheInfo {
  uint32_t version = 0;
  uint8_t kind = 0;
  int64_t n_layers = 0;
  int64_t m = 0;
  int64_t d = 0;
  uint8_t dtype = 0;
  int64_t source_t = 0;
  std::string config_hash_hex;
  int64_t payload_bytes = 0;
  int64_t file_bytes = 0;
  uint32_t crc = 0;
};

namespace detail {

template <typename T>
constexpr uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "cache: unsupported element type");
  return std::is_same_v<T, float> ? 0 : 1;
}

inline size_t dtype_size(uint8_t code) {
  MEMCOM_CHECK_IO(code == 0 || code == 1, "cache: unknown dtype code");
  return code == 0 ? 4 : 8;
}

// Append-only little-endian buffer.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void scalar(float v) { f32(v); }
  void scalar(double v) { f64(v); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<uint8_t>& bytes() const { return buf_; }
  std::vector<uint8_t>& bytes_mut() { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

// Bounds-checked little-endian reader; overruns raise IoError.
class ByteReader {
 public:
  ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}

  uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void scalar(float& v) { v = f32(); }
  void scalar(double& v) { v = f64(); }
  std::string str() {
    uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  void raw(void* out, size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  void skip(size_t n) {
    need(n);
    pos_ += n;
  }
  size_t remaining() const { return n_ - pos_; }
  size_t position() const { return pos_; }

 private:
  void need(size_t n) const {
    MEMCOM_CHECK_IO(pos_ + n <= n_, "cache: truncated file");
  }
  const uint8_t* p_;
  size_t n_;
  size_t pos_ = 0;
};

// Whole-file helpers (src/cacheio.cpp).
std::vector<uint8_t> read_file_bytes(const std::string& path);
void atomic_write_file(const std::string& path, const std::vector<uint8_t>& bytes);

void write_header(ByteWriter& w, uint8_t kind, int64_t L, int64_t m, int64_t d, uint8_t dtype,
                  int64_t source_t, const std::array<uint8_t, 32>& config_hash);

// Parses and validates magic/version/length/CRC; returns header facts and the
// payload slice boundaries.  Everything structural that can fail here is an
// IoError.
struct ParsedFile {
  CacheInfo info;
  size_t payload_offset = 0;
};
ParsedFile parse_and_verify(const std::vector<uint8_t>& bytes);

std::array<uint8_t, 32> hash_from_hex(const std::string& hex);

template <typename T>
void write_tensor_values(ByteWriter& w, const Tensor<T>& t) {
  for (T v : t.data()) w.scalar(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Compressed contexts.

template <typename T>
void save_context(const CompressedContext<T>& ctx, const std::string& path) {
  MEMCOM_CHECK(!ctx.payload.empty(), "cache: refusing to save empty context");
  int64_t m = ctx.m();
  int64_t d = ctx.payload.front().shape()[1];
  uint8_t kind = ctx.kind == ContextKind::kPerLayer ? kKindPerLayer : kKindEmbeddingPrefix;
  if (kind == kKindEmbeddingPrefix)
    MEMCOM_CHECK(ctx.payload.size() == 1, "cache: embedding context must hold one array");
  for (const auto& p : ctx.payload)
    MEMCOM_CHECK(p.rank() == 2 && p.shape()[0] == m && p.shape()[1] == d,
                 "cache: ragged context payload");

  detail::ByteWriter w;
  detail::write_header(w, kind, static_cast<int64_t>(ctx.payload.size()), m, d,
                       detail::dtype_code<T>(), ctx.source_t,
                       detail::hash_from_hex(ctx.config_hash));
  for (const auto& p : ctx.payload) detail::write_tensor_values(w, p);
  w.u32(crc32(w.bytes().data(), w.bytes().size()));
  detail::atomic_write_file(path, w.bytes());
}

template <typename T = float>
CompressedContext<T> load_context(const std::string& path) {
  std::vector<uint8_t> bytes = detail::read_file_bytes(path);
  detail::ParsedFile pf = detail::parse_and_verify(bytes);
  const CacheInfo& info = pf.info;
  MEMCOM_CHECK(info.kind == kKindPerLayer || info.kind == kKindEmbeddingPrefix,
               "cache: file holds a checkpoint, not a context");
  MEMCOM_CHECK(info.dtype == detail::dtype_code<T>(),
               "cache: element type mismatch at consumption");

  CompressedContext<T> ctx;
  ctx.kind = info.kind == kKindPerLayer ? ContextKind::kPerLayer : ContextKind::kEmbeddingPrefix;
  ctx.source_t = info.source_t;
  ctx.config_hash = info.config_hash_hex;
  ctx.compressor_id = "cache";
  detail::ByteReader r(bytes.data() + pf.payload_offset,
                       static_cast<size_t>(info.payload_bytes));
  for (int64_t l = 0; l < info.n_layers; ++l) {
    std::vector<T> vals(static_cast<size_t>(info.m * info.d));
    for (T& v : vals) r.scalar(v);
    ctx.payload.push_back(Tensor<T>::leaf({info.m, info.d}, std::move(vals)));
  }
  return ctx;
}

// Consumption-time gate: the context must have been produced under the same
// model config as the target that will attend to it.
template <typename T = float>
CompressedContext<T> load_context(const std::string& path, const ModelConfig& cfg) {
  CompressedContext<T> ctx = load_context<T>(path);
  MEMCOM_CHECK(ctx.config_hash == cfg.hash_hex(),
               "cache: context was built under a different model config");
  validate_context(ctx, cfg);
  return ctx;
}

// Header facts without materializing the payload; still verifies the CRC.
CacheInfo inspect_cache(const std::string& path);

// Stored context floats over the floats of a full per-layer KV cache for t
// prompt tokens (K and V, every layer, kv heads).
template <typename T>
double cache_size_ratio(const CompressedContext<T>& ctx, const ModelConfig& cfg, int64_t t) {
  MEMCOM_CHECK(t > 0, "cache: token count must be positive");
  int64_t stored = 0;
  for (const auto& p : ctx.payload) stored += p.numel();
  double full = 2.0 * static_cast<double>(cfg.n_layers) * static_cast<double>(t) *
                static_cast<double>(cfg.n_kv_heads) * static_cast<double>(cfg.head_dim);
  return static_cast<double>(stored) / full;
}

// ---------------------------------------------------------------------------
// Checkpoints.  Same container, kind byte 2.  The body holds named parameter
// trees (values, shapes, requires_grad bits), optional Adam state, the phase
// stamp, an RNG cursor, and an opaque config text blob.

struct CheckpointExtra {
  int phase_stamp = 0;
  uint64_t rng_key = 0;
  uint64_t rng_counter = 0;
  std::string config_text;
};

// Checkpoint inventory read without knowing its structure up front: tree
// names plus the extra block, parameter values skipped.  CRC still verified.
struct CheckpointPeek {
  CheckpointExtra extra;
  std::vector<std::string> tree_names;
};
CheckpointPeek peek_checkpoint(const std::string& path);

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     std::initializer_list<std::pair<const char*, const ParamTree<T>*>> trees,
                     const Adam<T>* opt, const CheckpointExtra& extra) {
  detail::ByteWriter w;
  detail::write_header(w, kKindCheckpoint, cfg.n_layers, 0, cfg.d_model, detail::dtype_code<T>(),
                       0, cfg.hash());
  w.u32(static_cast<uint32_t>(trees.size()));
  for (const auto& [name, tree] : trees) {
    w.str(name);
    w.u32(static_cast<uint32_t>(tree->size()));
    for (const auto& [p, t] : tree->items()) {
      w.str(p);
      w.u8(t.requires_grad() ? 1 : 0);
      w.u8(static_cast<uint8_t>(t.rank()));
      for (int64_t dim : t.shape()) w.i64(dim);
      detail::write_tensor_values(w, t);
    }
  }
  w.u8(opt != nullptr ? 1 : 0);
  if (opt != nullptr) {
    w.i64(opt->step_count());
    w.u32(static_cast<uint32_t>(opt->slots().size()));
    for (const auto& [p, slot] : opt->slots()) {
      w.str(p);
      w.i64(static_cast<int64_t>(slot.m.size()));
      for (T v : slot.m) w.scalar(v);
      for (T v : slot.v) w.scalar(v);
    }
  }
  w.u32(static_cast<uint32_t>(extra.phase_stamp));
  w.u64(extra.rng_key);
  w.u64(extra.rng_counter);
  w.str(extra.config_text);
  w.u32(crc32(w.bytes().data(), w.bytes().size()));
  detail::atomic_write_file(path, w.bytes());
}

// Restores parameter values (and requires_grad bits) into caller-provided
// trees, which must match the file structurally: same names, order, paths,
// and shapes.  Restores Adam moments and step count into `opt` when both the
// file and the caller carry optimizer state.
template <typename T>
CheckpointExtra load_checkpoint(const std::string& path, const ModelConfig& cfg,
                                std::initializer_list<std::pair<const char*, ParamTree<T>*>> trees,
                                Adam<T>* opt) {
  std::vector<uint8_t> bytes = detail::read_file_bytes(path);
  detail::ParsedFile pf = detail::parse_and_verify(bytes);
  const CacheInfo& info = pf.info;
  MEMCOM_CHECK(info.kind == kKindCheckpoint, "cache: file holds a context, not a checkpoint");
  MEMCOM_CHECK(info.dtype == detail::dtype_code<T>(),
               "cache: element type mismatch at consumption");
  MEMCOM_CHECK(info.config_hash_hex == cfg.hash_hex(),
               "cache: checkpoint was built under a different model config");

  detail::ByteReader r(bytes.data() + pf.payload_offset,
                       static_cast<size_t>(info.payload_bytes));
  uint32_t n_trees = r.u32();
  MEMCOM_CHECK(n_trees == trees.size(), "cache: checkpoint tree count mismatch");
  for (auto& [name, tree] : trees) {
    std::string fname = r.str();
    MEMCOM_CHECK(fname == name, "cache: checkpoint tree '" + fname + "' where '" +
                                    std::string(name) + "' expected");
    uint32_t n_params = r.u32();
    MEMCOM_CHECK(n_params == tree->size(),
                 "cache: parameter count mismatch in tree '" + fname + "'");
    for (auto& [p, t] : tree->items_mut()) {
      std::string fpath = r.str();
      MEMCOM_CHECK(fpath == p, "cache: parameter '" + fpath + "' where '" + p + "' expected");
      bool rg = r.u8() != 0;
      uint8_t rank = r.u8();
      MEMCOM_CHECK(rank == t.rank(), "cache: rank mismatch for '" + p + "'");
      for (int64_t dim : t.shape())
        MEMCOM_CHECK(r.i64() == dim, "cache: shape mismatch for '" + p + "'");
      auto& data = t.data_mut();
      for (T& v : data) r.scalar(v);
      t.set_requires_grad(rg);
    }
  }
  bool has_opt = r.u8() != 0;
  if (has_opt) {
    int64_t step_count = r.i64();
    uint32_t n_slots = r.u32();
    std::map<std::string, typename Adam<T>::Slot> slots;
    for (uint32_t i = 0; i < n_slots; ++i) {
      std::string p = r.str();
      int64_t n = r.i64();
      MEMCOM_CHECK_IO(n >= 0, "cache: negative slot length");
      typename Adam<T>::Slot slot;
      slot.m.resize(static_cast<size_t>(n));
      slot.v.resize(static_cast<size_t>(n));
      for (T& v : slot.m) r.scalar(v);
      for (T& v : slot.v) r.scalar(v);
      slots.emplace(std::move(p), std::move(slot));
    }
    if (opt != nullptr) {
      opt->slots_mut() = std::move(slots);
      opt->set_step_count(step_count);
    }
  } else if (opt != nullptr) {
    opt->slots_mut().clear();
    opt->set_step_count(0);
  }
  CheckpointExtra extra;
  extra.phase_stamp = static_cast<int>(r.u32());
  extra.rng_key = r.u64();
  extra.rng_counter = r.u64();
  extra.config_text = r.str();
  MEMCOM_CHECK_IO(r.remaining() == 0, "cache: trailing bytes after checkpoint body");
  return extra;
}

}  // namespace memcom
