// Synthetic data: a structured pretraining corpus plus many-shot prototype
// classification tasks with class-balanced prompt packing.
//
// The corpus emits sequences whose tokens all come from the vocab's corpus
// range with uniform marginals, so the unigram entropy floor is exactly
// ln(|corpus range|) while copy spans, periodic motifs, and key-value recalls
// give a trained model plenty of structure to beat that floor with.
//
// Classification tasks assign each class a prototype pattern of feature
// tokens; shots are prototypes with a fixed number of positions resampled.
// Prototypes are rejection-sampled to pairwise Hamming distance at least
// 2*ceil(rho*k_in)+1, which keeps every noisy shot strictly nearest to its
// own prototype.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memcom/common.hpp"
#include "memcom/rng.hpp"

namespace memcom {

// Token-id layout. Three reserved ids, then three disjoint sub-ranges
// (half-open [lo, hi)) for shot features, label names, and corpus text.
struct Vocab {
  int32_t size = 512;
  int32_t pad = 0;
  int32_t sep = 1;         // input -> label separator inside a shot
  int32_t shot_delim = 2;  // terminates each rendered shot
  int32_t feature_lo = 3, feature_hi = 257;
  int32_t label_lo = 257, label_hi = 384;
  int32_t corpus_lo = 384, corpus_hi = 512;

  // Splits the ids after the three reserved ones roughly 2:1:1 across
  // features, labels, and corpus tokens.
  static Vocab for_size(int32_t v);

  void validate() const;
  int32_t n_features() const { return feature_hi - feature_lo; }
  int32_t n_labels() const { return label_hi - label_lo; }
  int32_t n_corpus() const { return corpus_hi - corpus_lo; }
};

// One demonstration: input pattern plus its label name.
struct Shot {
  std::vector<int32_t> input;  // k_in feature tokens
  std::vector<int32_t> label;  // k_lab label tokens
  int32_t class_id = 0;
};

// input ++ sep ++ label ++ shot_delim; length k_in + k_lab + 2.
std::vector<int32_t> render_shot(const Shot& shot, const Vocab& vocab);

struct ClassificationTask {
  Vocab vocab;
  int32_t n_classes = 0;
  int32_t k_in = 0;
  int32_t k_lab = 0;
  double rho = 0.0;  // fraction of prototype positions resampled per shot
  std::vector<std::vector<int32_t>> prototypes;   // n_classes x k_in
  std::vector<std::vector<int32_t>> label_names;  // n_classes x k_lab, unique

  int32_t noise_positions() const;                    // ceil(rho * k_in)
  int32_t min_separation() const;                     // 2*noise_positions()+1
  int64_t shot_len() const { return k_in + k_lab + 2; }
  void validate() const;
};

// Rejection-samples prototypes until every pair is at least min_separation
// apart and label names are unique. Throws ConfigError when the requested
// separation exceeds k_in or sampling exhausts its retry budget.
ClassificationTask gen_task(const Vocab& vocab, int32_t n_classes, int32_t k_in,
                            int32_t k_lab, double rho, Rng& rng);

// Prototype with exactly noise_positions() distinct positions resampled
// uniformly from the feature range.
Shot sample_shot(const ClassificationTask& task, int32_t class_id, Rng& rng);

// Argmin-Hamming class for an input pattern; ties break to the lowest id.
int32_t nearest_prototype(const ClassificationTask& task,
                          const std::vector<int32_t>& input);

// A packed many-shot prompt.
struct PackedPrompt {
  std::vector<int32_t> tokens;
  std::vector<Shot> shots;                // in packed order
  std::vector<int32_t> per_class_counts;  // size n_classes
  int32_t rebuilds = 0;  // times packing restarted to dodge a query collision
};

// Round-robin class-balanced packing: one fresh shot per class per pass, in
// class-id order; the first shot that would overflow the budget is dropped
// and packing stops. Throws ConfigError when even one shot does not fit.
PackedPrompt build_prompt(const ClassificationTask& task, int64_t budget, Rng& rng);

// One evaluation query plus everything needed to rebuild its prompt.
struct PromptSpec {
  int64_t budget_t = 0;
  std::vector<int32_t> query;  // k_in feature tokens, input only
  int32_t gold_class = 0;
  uint64_t order_seed = 0;
};

// n_per_class fresh noisy queries per class, each with its own packing seed.
std::vector<PromptSpec> make_eval_set(const ClassificationTask& task,
                                      int32_t n_per_class, int64_t budget_t,
                                      Rng& rng);

// Deterministically packs the prompt for a spec at the given budget (the
// spec's own budget_t by default; pass m for the fewer-shots baseline).
// Repacks with a stepped seed if any packed shot's input equals the query,
// so a query is never answerable by exact-match lookup; throws ConfigError
// when collisions cannot be avoided (rho = 0 makes them unavoidable).
PackedPrompt prompt_for_spec(const ClassificationTask& task, const PromptSpec& spec);
PackedPrompt prompt_for_spec(const ClassificationTask& task, const PromptSpec& spec,
                             int64_t budget);

// Structured corpus generator configuration. Segment kinds are drawn by
// weight; every emitted token is marginally uniform over the corpus range.
struct CorpusConfig {
  Vocab vocab;
  int64_t total_len = 512;
  double w_copy = 0.25;    // second half of segment repeats the first half
  double w_motif = 0.25;   // short motif tiled across the segment
  double w_recall = 0.25;  // key-value pairs, then re-queried pairs
  double w_noise = 0.25;   // i.i.d. uniform tokens
  int32_t seg_lo = 16, seg_hi = 48;
  int32_t motif_lo = 2, motif_hi = 6;

  void validate() const;
  // Analytic unigram entropy of the emitted stream, in nats.
  double unigram_entropy() const;
};

// One sequence of exactly total_len tokens.
std::vector<int32_t> corpus_sequence(const CorpusConfig& config, Rng& rng);

// Versioned text round-trip for audits and replays.
std::string task_to_text(const ClassificationTask& task);
ClassificationTask task_from_text(const std::string& text);
std::string eval_set_to_text(const std::vector<PromptSpec>& specs);
std::vector<PromptSpec> eval_set_from_text(const std::string& text);

}  // namespace memcom
