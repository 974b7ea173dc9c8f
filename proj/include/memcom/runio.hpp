#pragma once

// Operator plumbing shared by the command-line tool and the acceptance
// harness: flat dotted-key configuration, resolved-config round-trips, run
// directories with locking, append-only metrics lines, token file I/O, and
// the experiment drivers that turn a config into trained artifacts.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "memcom/cacheio.hpp"
#include "memcom/common.hpp"
#include "memcom/compressor.hpp"
#include "memcom/evalharness.hpp"
#include "memcom/tasks.hpp"
#include "memcom/train.hpp"

namespace memcom {

// ---------------------------------------------------------------------------
// Flat dotted-key configuration: "model.n_layers = 4" lines, '#' comments.
// Values stay strings until a typed getter reads them; bad values raise
// ConfigError naming the key.

class KvConfig {
 public:
  static KvConfig parse_text(const std::string& text);
  static KvConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  // "key=value" from a command-line override flag.
  void apply_override(const std::string& spec);

  bool has(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_i64(const std::string& key, int64_t fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  double get_f64(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key, const std::string& fallback) const;

  // Canonical "key = value" lines, sorted by key; parse(dump()) is identity.
  std::string dump() const;
  const std::map<std::string, std::string>& items() const { return items_; }

 private:
  std::map<std::string, std::string> items_;
};

// ---------------------------------------------------------------------------
// Resolved run configuration.  Every knob has a default; from_kv rejects
// unknown keys so typos fail loudly, and to_kv materializes the full state
// for the config.resolved dump that makes a run replayable.

struct PhaseKnobs {
  int64_t steps = 200;
  int64_t batch = 1;
  double lr = 2e-4;
  int64_t warmup = 10;
  int64_t start_step = 0;
  uint64_t seed = 11;
};

struct RunConfig {
  ModelConfig model;
  uint64_t seed = 1;  // system/artifact initialization
  std::string method = "MEMCOM_P1";
  std::string variant = "one_head";
  int64_t lora_rank = 32;
  double lora_alpha = 32.0;
  std::string target_init = "random";  // or a checkpoint path

  int64_t task_classes = 32;
  int64_t task_k_in = 16;
  int64_t task_k_lab = 1;
  double task_rho = 0.125;
  uint64_t task_seed = 1;

  int64_t budget_t = 384;
  int64_t budget_m = 64;

  PhaseKnobs phase1{200, 1, 2e-4, 10, 0, 11};
  PhaseKnobs phase2{50, 1, 2e-6, 0, 0, 12};
  PhaseKnobs pretrain{0, 1, 3e-4, 20, 0, 13};  // steps 0 disables pretraining
  int64_t pretrain_len = 256;
  double pretrain_task_frac = 0.5;

  int64_t eval_queries = 5;
  bool eval_generation = false;
  bool eval_shuffled = false;

  std::vector<int64_t> sweep_ratios{3, 6, 8};
  std::vector<uint64_t> sweep_seeds{1};
  std::vector<std::string> sweep_methods{"BASELINE_FULL", "BASELINE_TRUNC", "MEMCOM_P1"};

  std::vector<std::string> ablate_variants{"one_head", "mha", "mqa", "mqa_self_init"};
  std::vector<uint64_t> ablate_seeds{1};
  int64_t ablate_ratio = 6;

  static RunConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;

  PhaseConfig phase1_pc() const;
  PhaseConfig phase2_pc() const;
  PhaseConfig pretrain_pc() const;
  Vocab vocab() const { return Vocab::for_size(static_cast<int32_t>(model.vocab_size)); }
  ClassificationTask make_task() const;
};

CrossAttnVariant variant_from_string(const std::string& s);
IcaeCapacity capacity_for(MethodId id);

// Stable run identity: prefix of the SHA-256 of the resolved config text.
std::string run_id_for(const KvConfig& resolved);

// ---------------------------------------------------------------------------
// Run directories.  One command per directory (lock file); contents are
// append-only, and re-running into a non-empty directory needs an explicit
// overwrite.

class RunDir {
 public:
  // $MEMCOM_RUN_ROOT when set, "runs" otherwise.
  static std::string run_root();
  static RunDir create(const std::string& path, bool overwrite);

  RunDir(RunDir&& other) noexcept;
  RunDir& operator=(RunDir&&) = delete;
  RunDir(const RunDir&) = delete;
  ~RunDir();

  const std::string& path() const { return path_; }
  std::string sub(const std::string& rel) const;
  // Creates rel under the run dir; an existing file is an append-only breach.
  void write_text(const std::string& rel, const std::string& text);

 private:
  RunDir() = default;
  std::string path_;
  bool locked_ = false;
};

// One JSON object per line, timestamp first so replays can strip it.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void record(const std::string& run_id, const std::string& kind,
              const nlohmann::ordered_json& payload);

 private:
  std::string path_;
};

std::string iso_timestamp();
// Blanks every "timestamp":"..." value; lets byte-compares ignore wall time.
std::string strip_timestamps(const std::string& text);

// Whitespace-separated token ids; one sequence per file / one per line.
std::vector<int32_t> read_token_file(const std::string& path);
std::vector<std::vector<int32_t>> read_token_lines(const std::string& path);
void write_token_file(const std::string& path, const std::vector<int32_t>& tokens);

// ---------------------------------------------------------------------------
// Experiment drivers.

// Training pair stream: a freshly packed prompt as the source, a fresh
// rendered query shot (uniform class) as the target text.
inline PairSampler classification_sampler(ClassificationTask task, int64_t budget_t) {
  return [task = std::move(task), budget_t](Rng& rng) {
    Rng prompt_rng = rng.split("prompt");
    PackedPrompt prompt = build_prompt(task, budget_t, prompt_rng);
    Rng query_rng = rng.split("query");
    auto cls = static_cast<int32_t>(query_rng.uniform_int(0, task.n_classes - 1));
    Shot shot = sample_shot(task, cls, query_rng);
    return std::make_pair(prompt.tokens, render_shot(shot, task.vocab));
  };
}

inline std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> heldout_pairs(
    const ClassificationTask& task, int64_t budget_t, int64_t n, Rng rng) {
  PairSampler sample = classification_sampler(task, budget_t);
  std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    Rng r = rng.split(static_cast<uint64_t>(i));
    out.push_back(sample(r));
  }
  return out;
}

// Language-model pretraining stream: structured corpus text mixed with
// prompts from fresh tasks of the same family, so the model learns both
// generic prediction and in-context label induction without memorizing any
// one task's prototypes.
inline std::function<std::vector<int32_t>(Rng&)> pretrain_sampler(
    const Vocab& vocab, int32_t classes, int32_t k_in, int32_t k_lab, double rho,
    int64_t seq_len, double task_frac) {
  return [=](Rng& rng) -> std::vector<int32_t> {
    Rng pick = rng.split("kind");
    if (pick.uniform() < task_frac) {
      Rng task_rng = rng.split("task");
      ClassificationTask task = gen_task(vocab, classes, k_in, k_lab, rho, task_rng);
      Rng pack_rng = rng.split("pack");
      return build_prompt(task, seq_len, pack_rng).tokens;
    }
    CorpusConfig cc;
    cc.vocab = vocab;
    cc.total_len = seq_len;
    Rng corpus_rng = rng.split("corpus");
    return corpus_sequence(cc, corpus_rng);
  };
}

// Owned trained systems for one (task, m); view() adapts to the evaluation
// harness's non-owning artifact table.
template <typename T>
struct ArtifactSet {
  std::unique_ptr<MemComSystem<T>> memcom_p1, memcom_p2;
  std::unique_ptr<IcaeSystem<T>> icae, icae_plus, icae_pp;

  MethodArtifacts<T> view() const {
    MethodArtifacts<T> a;
    a.memcom_p1 = memcom_p1.get();
    a.memcom_p2 = memcom_p2.get();
    a.icae = icae.get();
    a.icae_plus = icae_plus.get();
    a.icae_pp = icae_pp.get();
    return a;
  }
};

struct ArtifactTrainPlan {
  CrossAttnVariant variant = CrossAttnVariant::kOneHead;
  int64_t lora_rank = 32;
  double lora_alpha = 32.0;
  PhaseConfig phase1;
  PhaseConfig phase2;
  uint64_t init_seed = 1;
};

// Trains exactly the artifacts the requested methods need.  All methods see
// the same pair stream (phase seeds live in the plan), so comparisons are
// paired.  A second-phase request trains its first phase implicitly.
template <typename T>
ArtifactSet<T> train_artifacts(
    const ModelConfig& cfg, const ParamTree<T>& target, const ClassificationTask& task,
    int64_t t, int64_t m, const std::vector<MethodId>& methods, const ArtifactTrainPlan& plan,
    const std::function<void(MethodId, const StepRecord&)>& on_step = nullptr) {
  ArtifactSet<T> set;
  PairSampler sample = classification_sampler(task, t);
  int32_t pad = task.vocab.pad;
  auto want = [&](MethodId id) {
    return std::find(methods.begin(), methods.end(), id) != methods.end();
  };
  auto cb = [&](MethodId id) -> std::function<void(const StepRecord&)> {
    if (!on_step) return nullptr;
    return [&on_step, id](const StepRecord& rec) { on_step(id, rec); };
  };

  if (want(MethodId::kMemcomP1) || want(MethodId::kMemcomP2)) {
    set.memcom_p1 = std::make_unique<MemComSystem<T>>(
        make_memcom<T>(cfg, target, m, plan.variant, Rng(plan.init_seed).split("memcom")));
    PhaseConfig pc1 = plan.phase1;
    pc1.phase = 1;
    Adam<T> opt(pc1.optimizer);
    run_phase(*set.memcom_p1, pc1, sample, opt, pad, cb(MethodId::kMemcomP1));
  }
  if (want(MethodId::kMemcomP2)) {
    set.memcom_p2 = std::make_unique<MemComSystem<T>>(set.memcom_p1->clone());
    PhaseConfig pc2 = plan.phase2;
    pc2.phase = 2;
    Adam<T> opt(pc2.optimizer);
    run_phase(*set.memcom_p2, pc2, sample, opt, pad, cb(MethodId::kMemcomP2));
    if (!want(MethodId::kMemcomP1)) set.memcom_p1.reset();
  }

  auto ladder = [&](MethodId id, IcaeCapacity cap, const char* tag,
                    std::unique_ptr<IcaeSystem<T>>& slot) {
    if (!want(id)) return;
    slot = std::make_unique<IcaeSystem<T>>(make_icae<T>(
        cfg, target, m, cap, Rng(plan.init_seed).split(tag), plan.lora_rank, plan.lora_alpha));
    PhaseConfig pc = plan.phase1;
    pc.phase = 1;
    Adam<T> opt(pc.optimizer);
    run_phase(*slot, pc, sample, opt, pad, cb(id));
  };
  ladder(MethodId::kIcae, IcaeCapacity::kIcae, "icae", set.icae);
  ladder(MethodId::kIcaePlus, IcaeCapacity::kIcaePlus, "icae_plus", set.icae_plus);
  ladder(MethodId::kIcaePp, IcaeCapacity::kIcaePp, "icae_pp", set.icae_pp);
  return set;
}

// ---------------------------------------------------------------------------
// Checkpoint rebuilding.  A checkpoint carries its resolved config, so the
// holder can be reconstructed without external knowledge; the tree inventory
// tells target-only, layer-wise, and capacity-ladder checkpoints apart.

template <typename T>
struct LoadedSystem {
  RunConfig rc;
  CheckpointExtra extra;
  std::vector<std::string> tree_names;
  std::unique_ptr<MemComSystem<T>> memcom;
  std::unique_ptr<IcaeSystem<T>> icae;
  std::unique_ptr<ParamTree<T>> target_only;

  const ParamTree<T>& target() const {
    if (memcom) return memcom->target;
    if (icae) return icae->target;
    return *target_only;
  }
};

template <typename T>
LoadedSystem<T> load_system(const std::string& path, Adam<T>* opt = nullptr) {
  LoadedSystem<T> out;
  CheckpointPeek peek = peek_checkpoint(path);
  out.extra = peek.extra;
  out.tree_names = peek.tree_names;
  out.rc = RunConfig::from_kv(KvConfig::parse_text(peek.extra.config_text));
  const ModelConfig& cfg = out.rc.model;

  const std::vector<std::string> target_shape = {"target"};
  const std::vector<std::string> memcom_shape = {"target", "source", "memory"};
  const std::vector<std::string> icae_shape = {"target", "compressor", "extras"};
  if (peek.tree_names == target_shape) {
    out.target_only =
        std::make_unique<ParamTree<T>>(init_transformer_params<T>(cfg, Rng(0)));
    load_checkpoint<T>(path, cfg, {{"target", out.target_only.get()}}, opt);
  } else if (peek.tree_names == memcom_shape) {
    ParamTree<T> blank = init_transformer_params<T>(cfg, Rng(0));
    out.memcom = std::make_unique<MemComSystem<T>>(make_memcom<T>(
        cfg, blank, out.rc.budget_m, variant_from_string(out.rc.variant), Rng(0)));
    load_checkpoint<T>(path, cfg,
                       {{"target", &out.memcom->target},
                        {"source", &out.memcom->source},
                        {"memory", &out.memcom->memory}},
                       opt);
    out.memcom->phase_stamp = peek.extra.phase_stamp;
  } else if (peek.tree_names == icae_shape) {
    ParamTree<T> blank = init_transformer_params<T>(cfg, Rng(0));
    out.icae = std::make_unique<IcaeSystem<T>>(
        make_icae<T>(cfg, blank, out.rc.budget_m, capacity_for(method_from_string(out.rc.method)),
                     Rng(0), out.rc.lora_rank, out.rc.lora_alpha));
    load_checkpoint<T>(path, cfg,
                       {{"target", &out.icae->target},
                        {"compressor", &out.icae->compressor},
                        {"extras", &out.icae->extras}},
                       opt);
    out.icae->phase_stamp = peek.extra.phase_stamp;
  } else {
    throw ConfigError("checkpoint: unrecognized tree inventory in '" + path + "'");
  }
  return out;
}

// Builds the frozen target per config: fresh random weights, a pretraining
// run over the mixed stream, or a target-bearing checkpoint.
template <typename T>
ParamTree<T> build_target(const RunConfig& rc,
                          const std::function<void(const StepRecord&)>& on_step = nullptr) {
  if (rc.target_init != "random") {
    LoadedSystem<T> sys = load_system<T>(rc.target_init);
    MEMCOM_CHECK(sys.rc.model == rc.model,
                 "config: target checkpoint was built for a different model");
    return sys.target().clone();
  }
  ParamTree<T> tree = init_transformer_params<T>(rc.model, Rng(rc.seed).split("target"));
  if (rc.pretrain.steps > 0) {
    Vocab vocab = rc.vocab();
    auto sample = pretrain_sampler(vocab, static_cast<int32_t>(rc.task_classes),
                                   static_cast<int32_t>(rc.task_k_in),
                                   static_cast<int32_t>(rc.task_k_lab), rc.task_rho,
                                   rc.pretrain_len, rc.pretrain_task_frac);
    PhaseConfig pc = rc.pretrain_pc();
    Adam<T> opt(pc.optimizer);
    run_pretrain(tree, rc.model, pc, sample, opt, vocab.pad, on_step);
  }
  return tree;
}

}  // namespace memcom
