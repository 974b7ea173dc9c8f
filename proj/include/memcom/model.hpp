#pragma once

// Model configuration, the named-parameter registry, freeze masks, and
// checksum utilities.  Parameters live in a flat ordered registry keyed by
// dotted paths ("layers.2.attn.wq"); freeze masks select trainable subsets by
// glob pattern, and checksums hash raw parameter bytes in registry order so
// frozen-weight guarantees can be asserted bit-exactly.

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memcom/digest.hpp"
#include "memcom/ops.hpp"
#include "memcom/tensor.hpp"

namespace memcom {

struct ModelConfig {
  int64_t n_layers = 4;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  int64_t n_kv_heads = 4;
  int64_t head_dim = 32;
  int64_t d_ff = 512;
  int64_t vocab_size = 512;
  int64_t max_seq = 1024;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  void validate() const {
    MEMCOM_CHECK(n_layers >= 1, "config: n_layers must be >= 1");
    MEMCOM_CHECK(d_model >= 1 && vocab_size >= 4 && max_seq >= 2, "config: bad dimensions");
    MEMCOM_CHECK(n_heads >= 1 && head_dim >= 2 && head_dim % 2 == 0,
                 "config: head_dim must be even and positive");
    MEMCOM_CHECK(d_model == n_heads * head_dim, "config: d_model != n_heads * head_dim");
    MEMCOM_CHECK(n_kv_heads >= 1 && n_heads % n_kv_heads == 0,
                 "config: n_heads must be a multiple of n_kv_heads");
    MEMCOM_CHECK(d_ff >= 1, "config: d_ff must be >= 1");
    MEMCOM_CHECK(rope_base > 1.0 && norm_eps > 0.0, "config: bad rope_base or norm_eps");
  }

  // Stable text rendering; the hash of this text identifies the architecture.
  std::string canonical_text() const {
    std::ostringstream os;
    os << "d_ff=" << d_ff << "\n"
       << "d_model=" << d_model << "\n"
       << "head_dim=" << head_dim << "\n"
       << "max_seq=" << max_seq << "\n"
       << "n_heads=" << n_heads << "\n"
       << "n_kv_heads=" << n_kv_heads << "\n"
       << "n_layers=" << n_layers << "\n"
       << "norm_eps=" << norm_eps << "\n"
       << "rope_base=" << rope_base << "\n"
       << "vocab_size=" << vocab_size << "\n";
    return os.str();
  }

  std::array<uint8_t, 32> hash() const {
    std::string t = canonical_text();
    return Sha256::digest(t.data(), t.size());
  }

  std::string hash_hex() const { return Sha256::hex(hash()); }

  bool operator==(const ModelConfig& o) const { return canonical_text() == o.canonical_text(); }
};

template <typename T>
class ParamTree {
 public:
  void add(std::string path, Tensor<T> t) {
    MEMCOM_CHECK(!index_.count(path), "param registry: duplicate path '" + path + "'");
    t.set_name(path);
    index_[path] = items_.size();
    items_.emplace_back(std::move(path), std::move(t));
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  Tensor<T>& at(const std::string& path) {
    auto it = index_.find(path);
    MEMCOM_CHECK(it != index_.end(), "param registry: missing path '" + path + "'");
    return items_[it->second].second;
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = index_.find(path);
    MEMCOM_CHECK(it != index_.end(), "param registry: missing path '" + path + "'");
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor<T>>>& items_mut() { return items_; }
  size_t size() const { return items_.size(); }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [p, t] : items_) n += t.numel();
    return n;
  }

  ParamTree clone() const {
    ParamTree out;
    for (const auto& [p, t] : items_) out.add(p, t.clone());
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Glob with '*' matching any run of characters (dots included).
inline bool glob_match(const std::string& pattern, const std::string& s) {
  size_t p = 0, i = 0, star = std::string::npos, mark = 0;
  while (i < s.size()) {
    if (p < pattern.size() && (pattern[p] == s[i])) {
      ++p;
      ++i;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = i;
    } else if (star != std::string::npos) {
      p = star + 1;
      i = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

// Trainable-subset selector.  Every pattern must hit at least one parameter;
// a dead pattern signals a configuration typo and is an error.
struct FreezeMask {
  std::vector<std::string> trainable;

  bool matches(const std::string& path) const {
    for (const auto& p : trainable)
      if (glob_match(p, path)) return true;
    return false;
  }
};

template <typename T>
void apply_freeze(ParamTree<T>& tree, const FreezeMask& mask) {
  for (const auto& pat : mask.trainable) {
    bool hit = false;
    for (const auto& [path, t] : tree.items())
      if (glob_match(pat, path)) {
        hit = true;
        break;
      }
    MEMCOM_CHECK(hit, "freeze mask: pattern '" + pat + "' matches no parameter");
  }
  for (auto& [path, t] : tree.items_mut()) t.set_requires_grad(mask.matches(path));
}

template <typename T>
void freeze_all(ParamTree<T>& tree) {
  for (auto& [path, t] : tree.items_mut()) t.set_requires_grad(false);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> trainable_params(const ParamTree<T>& tree) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& [path, t] : tree.items())
    if (t.requires_grad()) out.emplace_back(path, t);
  return out;
}

template <typename T>
int64_t count_params(const ParamTree<T>& tree, const std::vector<std::string>& patterns) {
  int64_t n = 0;
  for (const auto& [path, t] : tree.items())
    for (const auto& pat : patterns)
      if (glob_match(pat, path)) {
        n += t.numel();
        break;
      }
  return n;
}

// SHA-256 over (path, raw value bytes) of every parameter matching the
// pattern, in registry order.  Bit-exact: any parameter drift changes it.
template <typename T>
std::string params_checksum(const ParamTree<T>& tree, const std::string& pattern = "*") {
  Sha256 h;
  for (const auto& [path, t] : tree.items()) {
    if (!glob_match(pattern, path)) continue;
    h.update(path.data(), path.size());
    h.update(t.data().data(), t.data().size() * sizeof(T));
  }
  return Sha256::hex(h.finish());
}

// Base decoder weights.  Every tensor draws from its own named stream, so
// adding parameters never reshuffles existing initializations.
template <typename T>
ParamTree<T> init_transformer_params(const ModelConfig& cfg, Rng rng) {
  cfg.validate();
  ParamTree<T> tree;
  auto mk = [&](const std::string& path, Shape shape, double stddev) {
    Rng s = rng.split(path);
    tree.add(path, randn<T>(s, std::move(shape), stddev));
  };
  const double init_std = 0.02;
  const double resid_std = init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  mk("embed.tok", {cfg.vocab_size, cfg.d_model}, init_std);
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string b = "layers." + std::to_string(i) + ".";
    tree.add(b + "norm1", Tensor<T>::full({cfg.d_model}, T(1)));
    mk(b + "attn.wq", {cfg.d_model, cfg.n_heads * cfg.head_dim}, init_std);
    mk(b + "attn.wk", {cfg.d_model, cfg.n_kv_heads * cfg.head_dim}, init_std);
    mk(b + "attn.wv", {cfg.d_model, cfg.n_kv_heads * cfg.head_dim}, init_std);
    mk(b + "attn.wo", {cfg.n_heads * cfg.head_dim, cfg.d_model}, resid_std);
    tree.add(b + "norm2", Tensor<T>::full({cfg.d_model}, T(1)));
    mk(b + "mlp.gate", {cfg.d_model, cfg.d_ff}, init_std);
    mk(b + "mlp.up", {cfg.d_model, cfg.d_ff}, init_std);
    mk(b + "mlp.down", {cfg.d_ff, cfg.d_model}, resid_std);
  }
  tree.add("final_norm", Tensor<T>::full({cfg.d_model}, T(1)));
  return tree;
}

}  // namespace memcom
