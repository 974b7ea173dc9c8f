// Accuracy measurement by candidate-label scoring, compression-ratio sweeps
// across every method, and the cross-attention ablation runner.
//
// Scoring is by per-candidate label log-likelihood (teacher-forced), which
// removes decoding hyperparameters and makes every accuracy bit-reproducible;
// greedy generation with exact label match is available behind a flag.  The
// incremental scorer shares one pass over context+query across candidates;
// because the forward path is prefix-cache exact, it matches a per-candidate
// full re-run bitwise.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "memcom/compressor.hpp"
#include "memcom/digest.hpp"
#include "memcom/tasks.hpp"
#include "memcom/transformer.hpp"

namespace memcom {

enum class MethodId {
  kBaselineFull = 0,   // raw prompt packed to the full budget t
  kBaselineTrunc = 1,  // raw prompt packed to the small budget m (fewer shots)
  kIcae = 2,
  kIcaePlus = 3,
  kIcaePp = 4,
  kMemcomP1 = 5,
  kMemcomP2 = 6,
};

inline const char* to_string(MethodId m) {
  switch (m) {
    case MethodId::kBaselineFull: return "BASELINE_FULL";
    case MethodId::kBaselineTrunc: return "BASELINE_TRUNC";
    case MethodId::kIcae: return "ICAE";
    case MethodId::kIcaePlus: return "ICAE_PLUS";
    case MethodId::kIcaePp: return "ICAE_PP";
    case MethodId::kMemcomP1: return "MEMCOM_P1";
    case MethodId::kMemcomP2: return "MEMCOM_P2";
  }
  return "?";
}

inline MethodId method_from_string(const std::string& s) {
  for (int i = 0; i <= 6; ++i) {
    auto m = static_cast<MethodId>(i);
    if (s == to_string(m)) return m;
  }
  MEMCOM_CHECK(false, "unknown method '" + s + "'");
  return MethodId::kBaselineFull;
}

namespace detail {

// log softmax of one logits row at one id, accumulated in double.
template <typename T>
double row_log_prob(const Tensor<T>& logits, int64_t row, int32_t id) {
  const auto& shape = logits.shape();
  int64_t v = shape.back();
  int64_t rows = logits.numel() / v;
  MEMCOM_CHECK(row >= 0 && row < rows && id >= 0 && id < v,
               "row_log_prob: index out of range");
  const T* base = logits.data().data() + row * v;
  double mx = static_cast<double>(base[0]);
  for (int64_t i = 1; i < v; ++i) mx = std::max(mx, static_cast<double>(base[i]));
  double sum = 0.0;
  for (int64_t i = 0; i < v; ++i) sum += std::exp(static_cast<double>(base[i]) - mx);
  return static_cast<double>(base[id]) - mx - std::log(sum);
}

}  // namespace detail

// Per-candidate teacher-forced label log-likelihoods given an already
// materialized context KV whose entries sit at positions [0, next_pos).
// The query (with trailing separator) runs once; each candidate then runs
// against context+query KV, and its score is the sum of per-token log
// probabilities of the label tokens.  `span_out`, when given, receives the
// query pass's per-layer prefix entry counts (the context size each target
// token attends to beyond the causal window).
template <typename T>
std::vector<double> label_scores(const ParamTree<T>& target, const ModelConfig& cfg,
                                 const LayerKV<std::type_identity_t<T>>* context_kv,
                                 int64_t next_pos,
                                 const std::vector<int32_t>& query_sep,
                                 const std::vector<std::vector<int32_t>>& candidates,
                                 std::vector<int64_t>* span_out = nullptr) {
  MEMCOM_CHECK(!candidates.empty(), "label_scores: need at least one candidate");
  MEMCOM_CHECK(!query_sep.empty(), "label_scores: empty query");
  NoGradGuard ng;
  ForwardOptions opts;
  opts.capture_kv = true;
  auto qpos = iota_positions(next_pos, static_cast<int64_t>(query_sep.size()));
  auto qres = forward(target, cfg, query_sep, context_kv, qpos, opts);
  if (span_out) *span_out = qres.span.prefix_entries;
  LayerKV<T> joint = context_kv ? kv_concat(*context_kv, qres.kv) : qres.kv;
  int64_t qrows = static_cast<int64_t>(query_sep.size());
  int64_t cand_pos = next_pos + qrows;

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (const auto& cand : candidates) {
    MEMCOM_CHECK(!cand.empty(), "label_scores: empty candidate label");
    double total = detail::row_log_prob(qres.logits, qrows - 1, cand[0]);
    if (cand.size() > 1) {
      auto cpos = iota_positions(cand_pos, static_cast<int64_t>(cand.size()));
      auto cres = forward(target, cfg, cand, &joint, cpos);
      for (size_t j = 0; j + 1 < cand.size(); ++j)
        total += detail::row_log_prob(cres.logits, static_cast<int64_t>(j),
                                      cand[j + 1]);
    }
    scores.push_back(total);
  }
  return scores;
}

// Argmax with ties broken toward the lowest class id.
inline int32_t argmax_class(const std::vector<double>& scores) {
  int32_t best = 0;
  for (size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[static_cast<size_t>(best)]) best = static_cast<int32_t>(i);
  return best;
}

// Compressed-context scoring: the m memory entries are the query's only past.
template <typename T>
int32_t score_labels(const ParamTree<T>& target, const ModelConfig& cfg,
                     const CompressedContext<T>& ctx,
                     const std::vector<int32_t>& query_sep,
                     const std::vector<std::vector<int32_t>>& candidates,
                     std::vector<int64_t>* span_out = nullptr) {
  NoGradGuard ng;
  LayerKV<T> prefix = context_prefix_kv(target, cfg, ctx);
  return argmax_class(
      label_scores(target, cfg, &prefix, ctx.m(), query_sep, candidates, span_out));
}

// Raw-prompt scoring for the uncompressed baselines.
template <typename T>
int32_t score_labels(const ParamTree<T>& target, const ModelConfig& cfg,
                     const std::vector<int32_t>& prompt,
                     const std::vector<int32_t>& query_sep,
                     const std::vector<std::vector<int32_t>>& candidates,
                     std::vector<int64_t>* span_out = nullptr) {
  NoGradGuard ng;
  if (prompt.empty())
    return argmax_class(
        label_scores<T>(target, cfg, nullptr, 0, query_sep, candidates, span_out));
  ForwardOptions opts;
  opts.capture_kv = true;
  opts.compute_logits = false;
  auto pres = forward(target, cfg, prompt, nullptr,
                      iota_positions(0, static_cast<int64_t>(prompt.size())), opts);
  return argmax_class(label_scores(target, cfg, &pres.kv,
                                   static_cast<int64_t>(prompt.size()), query_sep,
                                   candidates, span_out));
}

// Greedy decoding over the same machinery; ties break to the lowest token id.
template <typename T>
std::vector<int32_t> generate_greedy(const ParamTree<T>& target, const ModelConfig& cfg,
                                     const LayerKV<std::type_identity_t<T>>* context_kv,
                                     int64_t next_pos,
                                     const std::vector<int32_t>& query_sep,
                                     int64_t n_tokens) {
  NoGradGuard ng;
  ForwardOptions opts;
  opts.capture_kv = true;
  LayerKV<T> past;
  std::vector<int32_t> feed = query_sep;
  int64_t pos = next_pos;
  std::vector<int32_t> out;
  bool has_past = false;
  while (static_cast<int64_t>(out.size()) < n_tokens) {
    const LayerKV<T>* prefix = has_past ? &past : context_kv;
    auto res =
        forward(target, cfg, feed, prefix,
                iota_positions(pos, static_cast<int64_t>(feed.size())), opts);
    past = has_past ? kv_concat(past, res.kv)
                    : (context_kv ? kv_concat(*context_kv, res.kv) : res.kv);
    has_past = true;
    pos += static_cast<int64_t>(feed.size());
    const auto& shape = res.logits.shape();
    int64_t v = shape.back();
    const T* row = res.logits.data().data() + (res.logits.numel() - v);
    int32_t best = 0;
    for (int64_t i = 1; i < v; ++i)
      if (row[i] > row[best]) best = static_cast<int32_t>(i);
    out.push_back(best);
    feed = {best};
  }
  return out;
}

// Evaluation artifacts for one compression budget.  Baselines need only the
// target; every other method needs its trained system.  A missing pointer is
// a missing artifact.
template <typename T>
struct MethodArtifacts {
  const MemComSystem<T>* memcom_p1 = nullptr;
  const MemComSystem<T>* memcom_p2 = nullptr;
  const IcaeSystem<T>* icae = nullptr;
  const IcaeSystem<T>* icae_plus = nullptr;
  const IcaeSystem<T>* icae_pp = nullptr;

  bool has(MethodId m) const {
    switch (m) {
      case MethodId::kBaselineFull:
      case MethodId::kBaselineTrunc: return true;
      case MethodId::kIcae: return icae != nullptr;
      case MethodId::kIcaePlus: return icae_plus != nullptr;
      case MethodId::kIcaePp: return icae_pp != nullptr;
      case MethodId::kMemcomP1: return memcom_p1 != nullptr;
      case MethodId::kMemcomP2: return memcom_p2 != nullptr;
    }
    return false;
  }
};

struct EvalOutcome {
  int64_t correct = 0;
  int64_t n_queries = 0;
  double accuracy = 0.0;
  // Per-layer context entries observed on the last scored query (compressed
  // methods only); checked against m on every query.
  std::vector<int64_t> context_entries;
  // SHA-256 over every packed prompt and query in evaluation order.
  std::string stream_digest;
};

// Evaluates one method over an eval set.  Full-budget prompts are packed to
// t; BASELINE_TRUNC packs to m instead; compressor methods compress the
// t-token prompt down to m memory entries and consume them via the KV path.
// Span honesty is asserted per query: compressed contexts must present
// exactly m entries per layer, truncated prompts at most m tokens.
template <typename T>
EvalOutcome evaluate(MethodId method, const ModelConfig& cfg,
                     const ParamTree<T>& target, const MethodArtifacts<T>& art,
                     const ClassificationTask& task,
                     const std::vector<PromptSpec>& specs, int64_t t, int64_t m,
                     bool generation = false) {
  MEMCOM_CHECK(art.has(method),
               std::string("evaluate: missing trained artifacts for ") +
                   to_string(method));
  MEMCOM_CHECK(!specs.empty(), "evaluate: empty eval set");
  NoGradGuard ng;
  EvalOutcome out;
  Sha256 stream;
  const std::vector<std::vector<int32_t>>& candidates = task.label_names;
  for (const auto& spec : specs) {
    int64_t pack_budget = method == MethodId::kBaselineTrunc ? m : t;
    PackedPrompt prompt = prompt_for_spec(task, spec, pack_budget);
    stream.update(prompt.tokens.data(), prompt.tokens.size() * sizeof(int32_t));
    stream.update(spec.query.data(), spec.query.size() * sizeof(int32_t));

    std::vector<int32_t> query_sep = spec.query;
    query_sep.push_back(task.vocab.sep);

    int32_t pred = -1;
    std::vector<int64_t> span;
    switch (method) {
      case MethodId::kBaselineFull:
      case MethodId::kBaselineTrunc: {
        if (method == MethodId::kBaselineTrunc)
          MEMCOM_CHECK_NUM(static_cast<int64_t>(prompt.tokens.size()) <= m,
                           "evaluate: truncated prompt exceeds m");
        if (generation) {
          ForwardOptions opts;
          opts.capture_kv = true;
          opts.compute_logits = false;
          auto pres =
              forward(target, cfg, prompt.tokens, nullptr,
                      iota_positions(0, static_cast<int64_t>(prompt.tokens.size())),
                      opts);
          auto gen = generate_greedy(target, cfg, &pres.kv,
                                     static_cast<int64_t>(prompt.tokens.size()),
                                     query_sep, task.k_lab);
          pred = gen == candidates[static_cast<size_t>(spec.gold_class)]
                     ? spec.gold_class
                     : -1;
        } else {
          pred = score_labels(target, cfg, prompt.tokens, query_sep, candidates,
                              &span);
        }
        break;
      }
      default: {
        CompressedContext<T> ctx;
        switch (method) {
          case MethodId::kMemcomP1: ctx = memcom_compress(*art.memcom_p1, prompt.tokens); break;
          case MethodId::kMemcomP2: ctx = memcom_compress(*art.memcom_p2, prompt.tokens); break;
          case MethodId::kIcae: ctx = icae_compress(*art.icae, prompt.tokens); break;
          case MethodId::kIcaePlus: ctx = icae_compress(*art.icae_plus, prompt.tokens); break;
          default: ctx = icae_compress(*art.icae_pp, prompt.tokens); break;
        }
        MEMCOM_CHECK_NUM(ctx.m() == m, "evaluate: context size " +
                                           std::to_string(ctx.m()) +
                                           " != budget m " + std::to_string(m));
        if (generation) {
          LayerKV<T> prefix = context_prefix_kv(target, cfg, ctx);
          auto gen = generate_greedy(target, cfg, &prefix, ctx.m(), query_sep,
                                     task.k_lab);
          pred = gen == candidates[static_cast<size_t>(spec.gold_class)]
                     ? spec.gold_class
                     : -1;
        } else {
          pred = score_labels(target, cfg, ctx, query_sep, candidates, &span);
          for (int64_t entries : span)
            MEMCOM_CHECK_NUM(entries == m,
                             "evaluate: a layer attended to " +
                                 std::to_string(entries) + " context entries, not " +
                                 std::to_string(m));
          out.context_entries = span;
        }
        break;
      }
    }
    out.correct += pred == spec.gold_class ? 1 : 0;
    ++out.n_queries;
  }
  out.accuracy =
      static_cast<double>(out.correct) / static_cast<double>(out.n_queries);
  out.stream_digest = Sha256::hex(stream.finish());
  return out;
}

// Gold labels replaced by independent uniform draws: any predictor's accuracy
// against the shuffled golds is Bernoulli(1/C), which calibrates the whole
// pipeline's chance floor.
inline std::vector<PromptSpec> shuffle_gold(const std::vector<PromptSpec>& specs,
                                            int32_t n_classes, Rng& rng) {
  std::vector<PromptSpec> out = specs;
  for (auto& spec : out)
    spec.gold_class = static_cast<int32_t>(rng.uniform_int(0, n_classes - 1));
  return out;
}

struct SweepCell {
  MethodId method = MethodId::kBaselineFull;
  int64_t grid_ratio = 0;  // the sweep's nominal ratio for this cell
  std::string task_name;
  uint64_t seed = 0;
  int64_t t = 0;
  int64_t m = 0;  // context budget actually consumed (== t for BASELINE_FULL)
  bool present = false;
  double accuracy = 0.0;
  int64_t n_queries = 0;
  double degradation = 0.0;  // accuracy minus BASELINE_FULL at same task+seed

  double recorded_ratio() const {
    return static_cast<double>(t) / static_cast<double>(m);
  }
};

struct SweepTable {
  std::vector<SweepCell> cells;

  // Flat results table; absent cells carry empty accuracy fields.
  std::string csv() const {
    std::ostringstream os;
    os << "method,ratio,task,seed,t,m,accuracy,n_queries\n";
    for (const auto& c : cells) {
      os << to_string(c.method) << ',' << format_num(c.recorded_ratio()) << ','
         << c.task_name << ',' << c.seed << ',' << c.t << ',' << c.m << ',';
      if (c.present)
        os << format_num(c.accuracy) << ',' << c.n_queries << '\n';
      else
        os << ",0\n";
    }
    return os.str();
  }

  std::string degradation_csv() const {
    std::ostringstream os;
    os << "method,ratio,task,seed,degradation\n";
    for (const auto& c : cells) {
      if (!c.present) continue;
      os << to_string(c.method) << ',' << format_num(c.recorded_ratio()) << ','
         << c.task_name << ',' << c.seed << ',' << format_num(c.degradation) << '\n';
    }
    return os.str();
  }

  // Mean accuracy per (method, grid ratio) over tasks and seeds, for plotting
  // accuracy-vs-ratio curves; BASELINE_FULL appears as a flat reference.
  std::string plot_data() const {
    std::ostringstream os;
    os << "method,ratio,mean_accuracy,n_cells\n";
    std::map<std::pair<int, int64_t>, std::pair<double, int64_t>> acc;
    for (const auto& c : cells) {
      if (!c.present) continue;
      auto& slot = acc[{static_cast<int>(c.method), c.grid_ratio}];
      slot.first += c.accuracy;
      slot.second += 1;
    }
    for (const auto& [key, sum] : acc)
      os << to_string(static_cast<MethodId>(key.first)) << ',' << key.second << ','
         << format_num(sum.first / static_cast<double>(sum.second)) << ','
         << sum.second << '\n';
    return os.str();
  }

  const SweepCell* find(MethodId method, int64_t grid_ratio,
                        const std::string& task_name, uint64_t seed) const {
    for (const auto& c : cells)
      if (c.method == method && c.grid_ratio == grid_ratio &&
          c.task_name == task_name && c.seed == seed)
        return &c;
    return nullptr;
  }

  static std::string format_num(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
  }
};

template <typename T>
struct SweepInputs {
  ModelConfig cfg;
  const ParamTree<T>* target = nullptr;
  std::vector<MethodId> methods;
  std::vector<int64_t> ratios{3, 6, 8};
  // Trained systems per nominal ratio (m = t / ratio differs per ratio).
  std::map<int64_t, MethodArtifacts<T>> artifacts;
  std::vector<std::pair<std::string, const ClassificationTask*>> tasks;
  std::vector<uint64_t> seeds;
  int64_t t = 384;
  int32_t queries_per_class = 5;
  bool generation = false;
};

// Full (method x ratio x task x seed) cross-product.  Every replicate's eval
// set derives only from (task, seed), so methods and ratios see identical
// queries and prompt streams; BASELINE_FULL is additionally computed per
// (task, seed) as the degradation reference even when not requested.  Cells
// whose artifacts are missing are marked absent and the sweep continues.
template <typename T>
SweepTable run_sweep(const SweepInputs<T>& in) {
  MEMCOM_CHECK(in.target != nullptr, "run_sweep: no target");
  MEMCOM_CHECK(!in.methods.empty() && !in.ratios.empty() && !in.tasks.empty() &&
                   !in.seeds.empty(),
               "run_sweep: empty sweep axis");
  for (int64_t r : in.ratios)
    MEMCOM_CHECK(r >= 2 && in.t % r == 0,
                 "run_sweep: budget " + std::to_string(in.t) +
                     " not divisible by ratio " + std::to_string(r));

  // Degradation reference per (task, seed).
  std::map<std::pair<std::string, uint64_t>, double> full_ref;
  std::map<std::pair<std::string, uint64_t>, std::vector<PromptSpec>> eval_sets;
  for (const auto& [name, task] : in.tasks)
    for (uint64_t seed : in.seeds) {
      Rng erng = Rng(seed).split("evalset");
      auto specs = make_eval_set(*task, in.queries_per_class, in.t, erng);
      MethodArtifacts<T> none;
      auto ref = evaluate(MethodId::kBaselineFull, in.cfg, *in.target, none, *task,
                          specs, in.t, in.t, in.generation);
      full_ref[{name, seed}] = ref.accuracy;
      eval_sets[{name, seed}] = std::move(specs);
    }

  SweepTable table;
  for (int64_t ratio : in.ratios) {
    int64_t m = in.t / ratio;
    auto art_it = in.artifacts.find(ratio);
    MethodArtifacts<T> none;
    const MethodArtifacts<T>& art =
        art_it == in.artifacts.end() ? none : art_it->second;
    for (MethodId method : in.methods)
      for (const auto& [name, task] : in.tasks)
        for (uint64_t seed : in.seeds) {
          SweepCell cell;
          cell.method = method;
          cell.grid_ratio = ratio;
          cell.task_name = name;
          cell.seed = seed;
          cell.t = in.t;
          cell.m = method == MethodId::kBaselineFull ? in.t : m;
          if (art.has(method)) {
            auto outc = evaluate(method, in.cfg, *in.target, art, *task,
                                 eval_sets[{name, seed}], in.t, m, in.generation);
            cell.present = true;
            cell.accuracy = outc.accuracy;
            cell.n_queries = outc.n_queries;
            cell.degradation = outc.accuracy - full_ref[{name, seed}];
          }
          table.cells.push_back(std::move(cell));
        }
  }
  return table;
}

struct AblationRow {
  CrossAttnVariant variant = CrossAttnVariant::kOneHead;
  int64_t xattn_params = 0;
  // accuracy per task name, plus the evaluation stream digest per task.
  std::vector<std::pair<std::string, double>> accuracy;
  std::vector<std::pair<std::string, std::string>> digests;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string csv() const {
    std::ostringstream os;
    os << "variant,xattn_params";
    if (!rows.empty())
      for (const auto& [name, acc] : rows.front().accuracy) os << ',' << name;
    os << '\n';
    for (const auto& r : rows) {
      os << to_string(r.variant) << ',' << r.xattn_params;
      for (const auto& [name, acc] : r.accuracy)
        os << ',' << SweepTable::format_num(acc);
      os << '\n';
    }
    return os.str();
  }
};

template <typename T>
int64_t xattn_param_count(const MemComSystem<T>& sys) {
  int64_t total = 0;
  for (const auto& [path, tensor] : sys.memory.items())
    if (path.find(".xattn.") != std::string::npos) total += tensor.numel();
  return total;
}

// Cross-attention ablation at one fixed ratio: every variant is evaluated on
// byte-identical query and prompt streams (asserted via stream digests), with
// config drift between variants rejected by hash.
template <typename T>
AblationTable run_ablation(
    const ModelConfig& cfg, const ParamTree<T>& target,
    const std::vector<std::pair<CrossAttnVariant, const MemComSystem<T>*>>& variants,
    const std::vector<std::pair<std::string, const ClassificationTask*>>& tasks,
    uint64_t seed, int64_t t, int64_t ratio, int32_t queries_per_class) {
  MEMCOM_CHECK(!variants.empty() && !tasks.empty(), "run_ablation: nothing to run");
  MEMCOM_CHECK(t % ratio == 0, "run_ablation: budget not divisible by ratio");
  int64_t m = t / ratio;
  std::string cfg_hash = cfg.hash_hex();
  for (const auto& [variant, sys] : variants) {
    MEMCOM_CHECK(sys != nullptr, std::string("run_ablation: missing artifact for ") +
                                     to_string(variant));
    MEMCOM_CHECK(sys->cfg.hash_hex() == cfg_hash,
                 std::string("run_ablation: config drift in variant ") +
                     to_string(variant));
    MEMCOM_CHECK(sys->variant == variant,
                 "run_ablation: artifact/variant label mismatch");
    MEMCOM_CHECK(sys->m == m, std::string("run_ablation: variant ") +
                                  to_string(variant) + " trained for m " +
                                  std::to_string(sys->m) + ", expected " +
                                  std::to_string(m));
  }

  AblationTable table;
  for (const auto& [variant, sys] : variants) {
    AblationRow row;
    row.variant = variant;
    row.xattn_params = xattn_param_count(*sys);
    for (const auto& [name, task] : tasks) {
      Rng erng = Rng(seed).split("evalset");
      auto specs = make_eval_set(*task, queries_per_class, t, erng);
      MethodArtifacts<T> art;
      art.memcom_p1 = sys;
      auto outc =
          evaluate(MethodId::kMemcomP1, cfg, target, art, *task, specs, t, m);
      row.accuracy.emplace_back(name, outc.accuracy);
      row.digests.emplace_back(name, outc.stream_digest);
    }
    table.rows.push_back(std::move(row));
  }
  // Identical seeds must mean identical evaluation streams across variants.
  for (size_t r = 1; r < table.rows.size(); ++r)
    for (size_t i = 0; i < table.rows[r].digests.size(); ++i)
      MEMCOM_CHECK(table.rows[r].digests[i] == table.rows[0].digests[i],
                   "run_ablation: evaluation stream diverged between variants");
  return table;
}

}  // namespace memcom
