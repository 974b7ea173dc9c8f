#pragma once

// Two-phase training: sequence splitting, masked next-token loss through a
// compressor, an Adam-family optimizer over an explicit trainable set, linear
// warmup into a constant learning rate, and freeze-soundness checksums that
// are hard assertions rather than log lines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "memcom/compressor.hpp"

namespace memcom {

// ---------------------------------------------------------------------------
// Sequence splitting

struct SplitSpec {
  int64_t total_len = 512;
  int64_t lo = 352;  // inclusive source-length bounds
  int64_t hi = 416;

  void validate() const {
    MEMCOM_CHECK(total_len >= 2, "split: total_len too small");
    MEMCOM_CHECK(1 <= lo && lo <= hi && hi < total_len, "split: bad source range");
  }
};

inline std::pair<std::vector<int32_t>, std::vector<int32_t>> split_sequence(
    const std::vector<int32_t>& seq, const SplitSpec& spec, Rng& rng) {
  spec.validate();
  MEMCOM_CHECK(static_cast<int64_t>(seq.size()) == spec.total_len,
               "split: sequence length does not match spec");
  int64_t cut = rng.uniform_int(spec.lo, spec.hi);
  return {std::vector<int32_t>(seq.begin(), seq.begin() + cut),
          std::vector<int32_t>(seq.begin() + cut, seq.end())};
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; kept at 0 throughout
  double clip_norm = 0.0;     // 0 disables global-norm clipping
};

// The explicit set of tensors an optimizer may touch.  Paths are prefixed by
// stack ("source.", "memory.", ...) so identical tree paths stay distinct.
template <typename T>
struct TrainableSet {
  std::vector<std::pair<std::string, Tensor<T>>> params;

  int64_t total() const {
    int64_t n = 0;
    for (const auto& [p, t] : params) n += t.numel();
    return n;
  }
};

template <typename T>
TrainableSet<T> collect_trainable(
    std::initializer_list<std::pair<const char*, const ParamTree<T>*>> trees) {
  TrainableSet<T> set;
  for (const auto& [prefix, tree] : trees)
    for (const auto& [path, t] : tree->items())
      if (t.requires_grad()) set.params.emplace_back(std::string(prefix) + path, t);
  return set;
}

template <typename T>
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_count_; }

  struct Slot {
    std::vector<T> m, v;
  };
  const std::map<std::string, Slot>& slots() const { return slots_; }
  std::map<std::string, Slot>& slots_mut() { return slots_; }
  void set_step_count(int64_t n) { step_count_ = n; }

  // One update over the set; missing gradients count as zero.  Returns the
  // pre-clip global gradient norm.
  double step(TrainableSet<T>& set, double lr) {
    MEMCOM_CHECK(!set.params.empty(), "optimizer: empty trainable set");
    double sq = 0.0;
    for (auto& [path, t] : set.params)
      if (t.has_grad())
        for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    double norm = std::sqrt(sq);
    double gscale = 1.0;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) gscale = cfg_.clip_norm / norm;

    ++step_count_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (auto& [path, t] : set.params) {
      Slot& slot = slots_[path];
      size_t n = t.data().size();
      if (slot.m.empty()) {
        slot.m.assign(n, T(0));
        slot.v.assign(n, T(0));
      }
      MEMCOM_CHECK(slot.m.size() == n, "optimizer: moment shape drift for " + path);
      const std::vector<T>* grad = t.has_grad() ? &t.grad() : nullptr;
      auto& data = t.data_mut();
      for (size_t i = 0; i < n; ++i) {
        double g = grad ? static_cast<double>((*grad)[i]) * gscale : 0.0;
        double m = cfg_.beta1 * static_cast<double>(slot.m[i]) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * static_cast<double>(slot.v[i]) + (1.0 - cfg_.beta2) * g * g;
        slot.m[i] = static_cast<T>(m);
        slot.v[i] = static_cast<T>(v);
        double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        double p = static_cast<double>(data[i]);
        data[i] = static_cast<T>(p - lr * (upd + cfg_.weight_decay * p));
      }
    }
    for (auto& [path, t] : set.params) t.zero_grad();
    return norm;
  }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Slot> slots_;
  int64_t step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Schedule and phase configuration

struct PhaseConfig {
  int phase = 1;
  int64_t steps = 1;
  int64_t start_step = 0;  // resume point; steps counts the end, not the remainder
  int64_t batch_size = 1;
  double peak_lr = 2e-4;
  int64_t warmup_steps = 0;
  uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const {
    MEMCOM_CHECK(phase == 1 || phase == 2, "phase: must be 1 or 2");
    MEMCOM_CHECK(steps >= 1 && batch_size >= 1, "phase: steps and batch_size must be >= 1");
    MEMCOM_CHECK(start_step >= 0 && start_step < steps, "phase: start_step out of range");
    MEMCOM_CHECK(peak_lr >= 0.0 && warmup_steps >= 0, "phase: bad schedule");
  }
};

// Linear warmup to peak, constant afterwards.
inline double lr_at(int64_t step, const PhaseConfig& pc) {
  if (pc.warmup_steps <= 0 || step >= pc.warmup_steps) return pc.peak_lr;
  return pc.peak_lr * static_cast<double>(step) / static_cast<double>(pc.warmup_steps);
}

inline PhaseConfig default_phase1(int64_t steps, uint64_t seed) {
  PhaseConfig pc;
  pc.phase = 1;
  pc.steps = steps;
  pc.peak_lr = 2e-4;
  pc.warmup_steps = std::max<int64_t>(1, steps / 20);
  pc.seed = seed;
  return pc;
}

inline PhaseConfig default_phase2(int64_t steps, uint64_t seed) {
  PhaseConfig pc = default_phase1(steps, seed);
  pc.phase = 2;
  pc.peak_lr = 2e-6;
  return pc;
}

// ---------------------------------------------------------------------------
// Losses

// Next-token loss within a token run: row j predicts tokens[j + 1]; pad
// labels are masked out.  The final row has no label and is dropped.
template <typename T>
Tensor<T> shifted_loss(const Tensor<T>& logits, const std::vector<int32_t>& tokens,
                       int32_t pad_id) {
  int64_t n = static_cast<int64_t>(tokens.size());
  MEMCOM_CHECK(n >= 2, "loss: need at least two tokens");
  MEMCOM_CHECK(logits.shape()[0] == n, "loss: logits/token length mismatch");
  std::vector<int32_t> labels(tokens.begin() + 1, tokens.end());
  labels.push_back(0);
  std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
  for (int64_t j = 0; j + 1 < n; ++j)
    mask[static_cast<size_t>(j)] = tokens[static_cast<size_t>(j + 1)] == pad_id ? 0 : 1;
  return cross_entropy(logits, labels, mask);
}

template <typename T>
Tensor<T> lm_loss(const ParamTree<T>& tree, const ModelConfig& cfg,
                  const std::vector<int32_t>& seq, int32_t pad_id) {
  auto res = forward(tree, cfg, seq, nullptr,
                     iota_positions(0, static_cast<int64_t>(seq.size())));
  return shifted_loss(res.logits, seq, pad_id);
}

template <typename T>
Tensor<T> memcom_loss(const MemComSystem<T>& sys, const std::vector<int32_t>& source,
                      const std::vector<int32_t>& target, int32_t pad_id) {
  auto ctx = memcom_compress(sys, source);
  auto res = target_attend(sys.target, sys.cfg, ctx, target);
  return shifted_loss(res.logits, target, pad_id);
}

template <typename T>
Tensor<T> icae_loss(const IcaeSystem<T>& sys, const std::vector<int32_t>& source,
                    const std::vector<int32_t>& target, int32_t pad_id) {
  auto ctx = icae_compress(sys, source);
  auto res = target_attend(sys.target, sys.cfg, ctx, target);
  return shifted_loss(res.logits, target, pad_id);
}

// ---------------------------------------------------------------------------
// Steps, reports, phases

struct StepRecord {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  int64_t tokens = 0;
};

struct TrainReport {
  int phase = 0;
  int64_t trainable_count = 0;
  std::vector<StepRecord> steps;
  std::string target_checksum_before, target_checksum_after;
  std::string frozen_checksum_before, frozen_checksum_after;

  double first_loss() const { return steps.empty() ? 0.0 : steps.front().loss; }
  double last_loss() const { return steps.empty() ? 0.0 : steps.back().loss; }
};

// Checksum over every parameter the optimizer must not touch.
template <typename T>
std::string frozen_checksum(std::initializer_list<const ParamTree<T>*> trees) {
  Sha256 h;
  for (const ParamTree<T>* tree : trees)
    for (const auto& [path, t] : tree->items())
      if (!t.requires_grad()) {
        h.update(path.data(), path.size());
        h.update(t.data().data(), t.data().size() * sizeof(T));
      }
  return Sha256::hex(h.finish());
}

// One optimizer step over batch_size examples; `example_loss(k)` builds the
// loss graph for batch element k.  Returns the mean loss.
template <typename T, typename LossFn>
StepRecord train_step(LossFn&& example_loss, int64_t batch_size, TrainableSet<T>& train,
                      Adam<T>& opt, double lr, int64_t step_index = 0) {
  MEMCOM_CHECK(batch_size >= 1, "train: batch_size must be >= 1");
  for (auto& [p, t] : train.params) t.zero_grad();
  double total = 0.0;
  for (int64_t k = 0; k < batch_size; ++k) {
    Tensor<T> loss = example_loss(k);
    MEMCOM_CHECK(loss.numel() == 1, "train: loss must be scalar");
    Tensor<T> scaled = scale(loss, 1.0 / static_cast<double>(batch_size));
    double v = static_cast<double>(scaled.item());
    MEMCOM_CHECK_NUM(std::isfinite(v),
                     "train: non-finite loss at step " + std::to_string(step_index));
    total += v;
    scaled.backward();
  }
  StepRecord rec;
  rec.step = step_index;
  rec.loss = total;
  rec.lr = lr;
  rec.grad_norm = opt.step(train, lr);
  return rec;
}

namespace detail {

class InstabilityMonitor {
 public:
  // Abort when the loss exceeds 10x the running median of the last 50
  // healthy losses for 50 consecutive steps.  Violating losses never enter
  // the reference window, so a divergence cannot drag the median up with it.
  void observe(double loss, int64_t step) {
    if (window_.size() == 50) {
      std::vector<double> sorted(window_.begin(), window_.end());
      std::nth_element(sorted.begin(), sorted.begin() + 25, sorted.end());
      double med = sorted[25];
      if (loss > 10.0 * med) {
        ++consecutive_;
        MEMCOM_CHECK_NUM(consecutive_ < 50,
                         "train: instability abort at step " + std::to_string(step) +
                             " (loss " + std::to_string(loss) + " > 10x median " +
                             std::to_string(med) + " for 50 steps)");
        return;
      }
      consecutive_ = 0;
      window_.pop_front();
    }
    window_.push_back(loss);
  }

 private:
  std::deque<double> window_;
  int consecutive_ = 0;
};

// Shared phase loop: schedule, instability watch, freeze checksums.
template <typename T, typename LossFn>
TrainReport run_phase_core(const PhaseConfig& pc, TrainableSet<T>& train,
                           std::initializer_list<const ParamTree<T>*> all_trees,
                           const ParamTree<T>* guarded_target, LossFn&& batch_loss, Adam<T>& opt,
                           const std::function<void(const StepRecord&)>& on_step,
                           int64_t* token_accum = nullptr) {
  pc.validate();
  MEMCOM_CHECK(!train.params.empty(), "train: empty trainable set");
  TrainReport report;
  report.phase = pc.phase;
  report.trainable_count = train.total();
  if (guarded_target != nullptr)
    report.target_checksum_before = params_checksum(*guarded_target);
  report.frozen_checksum_before = frozen_checksum<T>(all_trees);

  Rng base(pc.seed);
  InstabilityMonitor monitor;
  for (int64_t step = pc.start_step; step < pc.steps; ++step) {
    Rng step_rng = base.split(static_cast<uint64_t>(step));
    double lr = lr_at(step, pc);
    if (token_accum != nullptr) *token_accum = 0;
    StepRecord rec = train_step<T>(
        [&](int64_t k) { return batch_loss(step_rng, step, k); }, pc.batch_size, train, opt, lr,
        step);
    if (token_accum != nullptr) rec.tokens = *token_accum;
    monitor.observe(rec.loss, step);
    report.steps.push_back(rec);
    if (on_step) on_step(rec);
  }

  report.frozen_checksum_after = frozen_checksum<T>(all_trees);
  MEMCOM_CHECK_NUM(report.frozen_checksum_after == report.frozen_checksum_before,
                   "train: frozen parameters changed during phase " + std::to_string(pc.phase));
  if (guarded_target != nullptr) {
    report.target_checksum_after = params_checksum(*guarded_target);
    MEMCOM_CHECK_NUM(report.target_checksum_after == report.target_checksum_before,
                     "train: target parameters changed during phase " + std::to_string(pc.phase));
  }
  return report;
}

}  // namespace detail

// Sampler signature: draw one (source, target) pair from the stream.
using PairSampler = std::function<std::pair<std::vector<int32_t>, std::vector<int32_t>>(Rng&)>;

template <typename T>
TrainReport run_phase(MemComSystem<T>& sys, const PhaseConfig& pc, const PairSampler& sample,
                      Adam<T>& opt, int32_t pad_id,
                      const std::function<void(const StepRecord&)>& on_step = nullptr) {
  if (pc.phase == 1) {
    apply_phase1_freeze(sys);
  } else {
    MEMCOM_CHECK(sys.phase_stamp >= 1, "train: phase 2 requested before phase 1");
    apply_phase2_freeze(sys);
  }
  auto train = collect_trainable<T>({{"source.", &sys.source}, {"memory.", &sys.memory}});
  int64_t step_tokens = 0;
  auto report = detail::run_phase_core<T>(
      pc, train, {&sys.target, &sys.source, &sys.memory}, &sys.target,
      [&](Rng& rng, int64_t, int64_t) {
        auto [src, tgt] = sample(rng);
        step_tokens += static_cast<int64_t>(src.size() + tgt.size());
        return memcom_loss(sys, src, tgt, pad_id);
      },
      opt, on_step, &step_tokens);
  sys.phase_stamp = pc.phase;
  return report;
}

template <typename T>
TrainReport run_phase(IcaeSystem<T>& sys, const PhaseConfig& pc, const PairSampler& sample,
                      Adam<T>& opt, int32_t pad_id,
                      const std::function<void(const StepRecord&)>& on_step = nullptr) {
  MEMCOM_CHECK(pc.phase == 1, "train: the capacity ladder trains in a single phase");
  auto train = collect_trainable<T>({{"compressor.", &sys.compressor}, {"extras.", &sys.extras}});
  int64_t step_tokens = 0;
  auto report = detail::run_phase_core<T>(
      pc, train, {&sys.target, &sys.compressor, &sys.extras}, &sys.target,
      [&](Rng& rng, int64_t, int64_t) {
        auto [src, tgt] = sample(rng);
        step_tokens += static_cast<int64_t>(src.size() + tgt.size());
        return icae_loss(sys, src, tgt, pad_id);
      },
      opt, on_step, &step_tokens);
  sys.phase_stamp = pc.phase;
  return report;
}

// Plain language-model training of a bare parameter tree (used to pretrain
// the model that later becomes the frozen target).
template <typename T>
TrainReport run_pretrain(ParamTree<T>& tree, const ModelConfig& cfg, const PhaseConfig& pc,
                         const std::function<std::vector<int32_t>(Rng&)>& sample_seq,
                         Adam<T>& opt, int32_t pad_id,
                         const std::function<void(const StepRecord&)>& on_step = nullptr) {
  apply_freeze(tree, FreezeMask{{"*"}});
  auto train = collect_trainable<T>({{"model.", &tree}});
  int64_t step_tokens = 0;
  return detail::run_phase_core<T>(
      pc, train, {&tree}, nullptr,
      [&](Rng& rng, int64_t, int64_t) {
        auto seq = sample_seq(rng);
        step_tokens += static_cast<int64_t>(seq.size());
        return lm_loss(tree, cfg, seq, pad_id);
      },
      opt, on_step, &step_tokens);
}

// ---------------------------------------------------------------------------
// Held-out evaluation losses (no gradients)

template <typename T, typename LossFn>
double mean_nll(int64_t n, LossFn&& nth_loss) {
  MEMCOM_CHECK(n >= 1, "nll: empty evaluation set");
  NoGradGuard guard;
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) total += static_cast<double>(nth_loss(i).item());
  return total / static_cast<double>(n);
}

template <typename T>
double heldout_nll(const MemComSystem<T>& sys,
                   const std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>>& pairs,
                   int32_t pad_id) {
  return mean_nll<T>(static_cast<int64_t>(pairs.size()), [&](int64_t i) {
    return memcom_loss(sys, pairs[static_cast<size_t>(i)].first,
                       pairs[static_cast<size_t>(i)].second, pad_id);
  });
}

template <typename T>
double heldout_nll(const IcaeSystem<T>& sys,
                   const std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>>& pairs,
                   int32_t pad_id) {
  return mean_nll<T>(static_cast<int64_t>(pairs.size()), [&](int64_t i) {
    return icae_loss(sys, pairs[static_cast<size_t>(i)].first,
                     pairs[static_cast<size_t>(i)].second, pad_id);
  });
}

template <typename T>
double heldout_lm_nll(const ParamTree<T>& tree, const ModelConfig& cfg,
                      const std::vector<std::vector<int32_t>>& seqs, int32_t pad_id) {
  return mean_nll<T>(static_cast<int64_t>(seqs.size()),
                     [&](int64_t i) { return lm_loss(tree, cfg, seqs[static_cast<size_t>(i)], pad_id); });
}

}  // namespace memcom
