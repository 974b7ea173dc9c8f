#include "memcom/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace memcom {

Vocab Vocab::for_size(int32_t v) {
  MEMCOM_CHECK(v >= 16, "vocab: size must be at least 16, got " + std::to_string(v));
  Vocab out;
  out.size = v;
  int32_t usable = v - 3;
  int32_t features = usable / 2;
  int32_t labels = usable / 4;
  out.feature_lo = 3;
  out.feature_hi = 3 + features;
  out.label_lo = out.feature_hi;
  out.label_hi = out.label_lo + labels;
  out.corpus_lo = out.label_hi;
  out.corpus_hi = v;
  out.validate();
  return out;
}

void Vocab::validate() const {
  MEMCOM_CHECK(size > 0, "vocab: size must be positive");
  MEMCOM_CHECK(pad >= 0 && sep >= 0 && shot_delim >= 0, "vocab: negative reserved id");
  MEMCOM_CHECK(pad != sep && pad != shot_delim && sep != shot_delim,
               "vocab: reserved ids must be distinct");
  MEMCOM_CHECK(pad < feature_lo && sep < feature_lo && shot_delim < feature_lo,
               "vocab: reserved ids must precede the feature range");
  MEMCOM_CHECK(feature_lo < feature_hi, "vocab: empty feature range");
  MEMCOM_CHECK(feature_hi <= label_lo && label_lo < label_hi,
               "vocab: label range must follow features and be non-empty");
  MEMCOM_CHECK(label_hi <= corpus_lo && corpus_lo < corpus_hi,
               "vocab: corpus range must follow labels and be non-empty");
  MEMCOM_CHECK(corpus_hi <= size, "vocab: corpus range exceeds vocab size");
}

std::vector<int32_t> render_shot(const Shot& shot, const Vocab& vocab) {
  std::vector<int32_t> out;
  out.reserve(shot.input.size() + shot.label.size() + 2);
  out.insert(out.end(), shot.input.begin(), shot.input.end());
  out.push_back(vocab.sep);
  out.insert(out.end(), shot.label.begin(), shot.label.end());
  out.push_back(vocab.shot_delim);
  return out;
}

int32_t ClassificationTask::noise_positions() const {
  return static_cast<int32_t>(std::ceil(rho * static_cast<double>(k_in)));
}

int32_t ClassificationTask::min_separation() const { return 2 * noise_positions() + 1; }

void ClassificationTask::validate() const {
  vocab.validate();
  MEMCOM_CHECK(n_classes >= 1, "task: need at least one class");
  MEMCOM_CHECK(k_in >= 1 && k_lab >= 1, "task: k_in and k_lab must be positive");
  MEMCOM_CHECK(rho >= 0.0 && rho <= 1.0, "task: rho must lie in [0, 1]");
  MEMCOM_CHECK(static_cast<int32_t>(prototypes.size()) == n_classes &&
                   static_cast<int32_t>(label_names.size()) == n_classes,
               "task: prototype/label tables must have one row per class");
  for (const auto& p : prototypes) {
    MEMCOM_CHECK(static_cast<int32_t>(p.size()) == k_in, "task: prototype length != k_in");
    for (int32_t tok : p)
      MEMCOM_CHECK(tok >= vocab.feature_lo && tok < vocab.feature_hi,
                   "task: prototype token outside feature range");
  }
  for (const auto& l : label_names) {
    MEMCOM_CHECK(static_cast<int32_t>(l.size()) == k_lab, "task: label length != k_lab");
    for (int32_t tok : l)
      MEMCOM_CHECK(tok >= vocab.label_lo && tok < vocab.label_hi,
                   "task: label token outside label range");
  }
}

namespace {

int32_t hamming(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
  int32_t d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i] ? 1 : 0;
  return d;
}

std::vector<int32_t> uniform_tokens(Rng& rng, int32_t n, int32_t lo, int32_t hi) {
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& t : out) t = static_cast<int32_t>(rng.uniform_int(lo, hi - 1));
  return out;
}

}  // namespace

ClassificationTask gen_task(const Vocab& vocab, int32_t n_classes, int32_t k_in,
                            int32_t k_lab, double rho, Rng& rng) {
  vocab.validate();
  ClassificationTask task;
  task.vocab = vocab;
  task.n_classes = n_classes;
  task.k_in = k_in;
  task.k_lab = k_lab;
  task.rho = rho;
  MEMCOM_CHECK(n_classes >= 1, "gen_task: need at least one class");
  MEMCOM_CHECK(k_in >= 1 && k_lab >= 1, "gen_task: k_in and k_lab must be positive");
  MEMCOM_CHECK(rho >= 0.0 && rho <= 1.0, "gen_task: rho must lie in [0, 1]");
  MEMCOM_CHECK(task.min_separation() <= k_in,
               "gen_task: required separation " + std::to_string(task.min_separation()) +
                   " exceeds k_in " + std::to_string(k_in));

  constexpr int kRetries = 10000;
  task.prototypes.reserve(static_cast<size_t>(n_classes));
  for (int32_t c = 0; c < n_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
      auto cand = uniform_tokens(rng, k_in, vocab.feature_lo, vocab.feature_hi);
      placed = true;
      for (const auto& prev : task.prototypes)
        if (hamming(cand, prev) < task.min_separation()) {
          placed = false;
          break;
        }
      if (placed) task.prototypes.push_back(std::move(cand));
    }
    MEMCOM_CHECK(placed, "gen_task: could not place prototype " + std::to_string(c) +
                             " after " + std::to_string(kRetries) +
                             " attempts (configuration too dense)");
  }

  task.label_names.reserve(static_cast<size_t>(n_classes));
  for (int32_t c = 0; c < n_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
      auto cand = uniform_tokens(rng, k_lab, vocab.label_lo, vocab.label_hi);
      placed = std::find(task.label_names.begin(), task.label_names.end(), cand) ==
               task.label_names.end();
      if (placed) task.label_names.push_back(std::move(cand));
    }
    MEMCOM_CHECK(placed, "gen_task: could not draw a unique label name for class " +
                             std::to_string(c));
  }
  return task;
}

Shot sample_shot(const ClassificationTask& task, int32_t class_id, Rng& rng) {
  MEMCOM_CHECK(class_id >= 0 && class_id < task.n_classes,
               "sample_shot: class id " + std::to_string(class_id) + " out of range");
  Shot shot;
  shot.class_id = class_id;
  shot.input = task.prototypes[static_cast<size_t>(class_id)];
  shot.label = task.label_names[static_cast<size_t>(class_id)];
  int32_t n = task.noise_positions();
  // Partial Fisher-Yates picks n distinct positions.
  std::vector<int32_t> idx(static_cast<size_t>(task.k_in));
  for (int32_t i = 0; i < task.k_in; ++i) idx[static_cast<size_t>(i)] = i;
  for (int32_t i = 0; i < n; ++i) {
    auto j = static_cast<size_t>(rng.uniform_int(i, task.k_in - 1));
    std::swap(idx[static_cast<size_t>(i)], idx[j]);
  }
  for (int32_t i = 0; i < n; ++i)
    shot.input[static_cast<size_t>(idx[static_cast<size_t>(i)])] = static_cast<int32_t>(
        rng.uniform_int(task.vocab.feature_lo, task.vocab.feature_hi - 1));
  return shot;
}

int32_t nearest_prototype(const ClassificationTask& task,
                          const std::vector<int32_t>& input) {
  MEMCOM_CHECK(static_cast<int32_t>(input.size()) == task.k_in,
               "nearest_prototype: input length != k_in");
  int32_t best = 0;
  int32_t best_d = hamming(input, task.prototypes[0]);
  for (int32_t c = 1; c < task.n_classes; ++c) {
    int32_t d = hamming(input, task.prototypes[static_cast<size_t>(c)]);
    if (d < best_d) {
      best = c;
      best_d = d;
    }
  }
  return best;
}

PackedPrompt build_prompt(const ClassificationTask& task, int64_t budget, Rng& rng) {
  MEMCOM_CHECK(budget >= task.shot_len(),
               "build_prompt: budget " + std::to_string(budget) +
                   " below one rendered shot (" + std::to_string(task.shot_len()) + ")");
  PackedPrompt out;
  out.per_class_counts.assign(static_cast<size_t>(task.n_classes), 0);
  bool full = false;
  while (!full) {
    for (int32_t c = 0; c < task.n_classes; ++c) {
      Shot shot = sample_shot(task, c, rng);
      auto rendered = render_shot(shot, task.vocab);
      if (static_cast<int64_t>(out.tokens.size() + rendered.size()) > budget) {
        full = true;  // drop the overflowing shot and stop packing
        break;
      }
      out.tokens.insert(out.tokens.end(), rendered.begin(), rendered.end());
      out.shots.push_back(std::move(shot));
      ++out.per_class_counts[static_cast<size_t>(c)];
    }
  }
  return out;
}

std::vector<PromptSpec> make_eval_set(const ClassificationTask& task,
                                      int32_t n_per_class, int64_t budget_t,
                                      Rng& rng) {
  MEMCOM_CHECK(n_per_class >= 1, "make_eval_set: need at least one query per class");
  std::vector<PromptSpec> specs;
  specs.reserve(static_cast<size_t>(n_per_class) * static_cast<size_t>(task.n_classes));
  for (int32_t c = 0; c < task.n_classes; ++c)
    for (int32_t q = 0; q < n_per_class; ++q) {
      PromptSpec spec;
      spec.budget_t = budget_t;
      spec.query = sample_shot(task, c, rng).input;
      spec.gold_class = c;
      spec.order_seed = rng.next_u64();
      specs.push_back(std::move(spec));
    }
  return specs;
}

PackedPrompt prompt_for_spec(const ClassificationTask& task, const PromptSpec& spec) {
  return prompt_for_spec(task, spec, spec.budget_t);
}

PackedPrompt prompt_for_spec(const ClassificationTask& task, const PromptSpec& spec,
                             int64_t budget) {
  constexpr int kAttempts = 64;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Rng rng = Rng(spec.order_seed).split(static_cast<uint64_t>(attempt));
    PackedPrompt prompt = build_prompt(task, budget, rng);
    bool collision = false;
    for (const auto& shot : prompt.shots)
      if (shot.input == spec.query) {
        collision = true;
        break;
      }
    if (!collision) {
      prompt.rebuilds = attempt;
      return prompt;
    }
  }
  MEMCOM_CHECK(false,
               "prompt_for_spec: could not pack a prompt free of the query after " +
                   std::to_string(kAttempts) + " attempts (rho too small?)");
  return {};
}

void CorpusConfig::validate() const {
  vocab.validate();
  MEMCOM_CHECK(total_len >= 1, "corpus: total_len must be positive");
  MEMCOM_CHECK(w_copy >= 0 && w_motif >= 0 && w_recall >= 0 && w_noise >= 0,
               "corpus: negative mixture weight");
  MEMCOM_CHECK(w_copy + w_motif + w_recall + w_noise > 0, "corpus: all weights zero");
  MEMCOM_CHECK(seg_lo >= 2 && seg_lo <= seg_hi, "corpus: bad segment length range");
  MEMCOM_CHECK(motif_lo >= 1 && motif_lo <= motif_hi, "corpus: bad motif length range");
}

double CorpusConfig::unigram_entropy() const {
  // Every emitted token is either a uniform draw over the corpus range or a
  // verbatim copy of one, so the marginal is uniform.
  return std::log(static_cast<double>(vocab.n_corpus()));
}

namespace {

enum class SegKind { kCopy, kMotif, kRecall, kNoise };

SegKind draw_kind(const CorpusConfig& cfg, Rng& rng) {
  double total = cfg.w_copy + cfg.w_motif + cfg.w_recall + cfg.w_noise;
  double u = rng.uniform() * total;
  if ((u -= cfg.w_copy) < 0) return SegKind::kCopy;
  if ((u -= cfg.w_motif) < 0) return SegKind::kMotif;
  if ((u -= cfg.w_recall) < 0) return SegKind::kRecall;
  return SegKind::kNoise;
}

std::vector<int32_t> make_segment(const CorpusConfig& cfg, Rng& rng) {
  auto len = static_cast<int32_t>(rng.uniform_int(cfg.seg_lo, cfg.seg_hi));
  const int32_t lo = cfg.vocab.corpus_lo, hi = cfg.vocab.corpus_hi;
  std::vector<int32_t> seg;
  seg.reserve(static_cast<size_t>(len));
  switch (draw_kind(cfg, rng)) {
    case SegKind::kCopy: {
      int32_t half = std::max(1, len / 2);
      auto first = uniform_tokens(rng, half, lo, hi);
      seg = first;
      seg.insert(seg.end(), first.begin(), first.end());
      break;
    }
    case SegKind::kMotif: {
      auto period = static_cast<int32_t>(
          rng.uniform_int(cfg.motif_lo, std::min(cfg.motif_hi, len)));
      auto motif = uniform_tokens(rng, period, lo, hi);
      for (int32_t i = 0; i < len; ++i)
        seg.push_back(motif[static_cast<size_t>(i % period)]);
      break;
    }
    case SegKind::kRecall: {
      int32_t n_pairs = std::max(1, len / 4);
      auto keys = uniform_tokens(rng, n_pairs, lo, hi);
      // Distinct keys make the recall unambiguous; by symmetry the marginal
      // of a distinct-uniform draw is still uniform over the range.
      for (int32_t i = 1; i < n_pairs; ++i)
        for (int attempt = 0; attempt < 100; ++attempt) {
          bool dup = false;
          for (int32_t j = 0; j < i; ++j)
            if (keys[static_cast<size_t>(j)] == keys[static_cast<size_t>(i)]) {
              dup = true;
              break;
            }
          if (!dup) break;
          keys[static_cast<size_t>(i)] =
              static_cast<int32_t>(rng.uniform_int(lo, hi - 1));
        }
      auto vals = uniform_tokens(rng, n_pairs, lo, hi);
      for (int32_t i = 0; i < n_pairs; ++i) {
        seg.push_back(keys[static_cast<size_t>(i)]);
        seg.push_back(vals[static_cast<size_t>(i)]);
      }
      while (static_cast<int32_t>(seg.size()) < len) {
        auto j = static_cast<size_t>(rng.uniform_int(0, n_pairs - 1));
        seg.push_back(keys[j]);
        if (static_cast<int32_t>(seg.size()) < len) seg.push_back(vals[j]);
      }
      break;
    }
    case SegKind::kNoise:
      seg = uniform_tokens(rng, len, lo, hi);
      break;
  }
  return seg;
}

}  // namespace

std::vector<int32_t> corpus_sequence(const CorpusConfig& config, Rng& rng) {
  config.validate();
  std::vector<int32_t> out;
  out.reserve(static_cast<size_t>(config.total_len));
  while (static_cast<int64_t>(out.size()) < config.total_len) {
    auto seg = make_segment(config, rng);
    auto room = static_cast<size_t>(config.total_len) - out.size();
    if (seg.size() > room) seg.resize(room);
    out.insert(out.end(), seg.begin(), seg.end());
  }
  return out;
}

namespace {

void append_ids(std::ostringstream& os, const std::vector<int32_t>& ids) {
  for (int32_t id : ids) os << ' ' << id;
}

std::vector<int32_t> read_ids(std::istringstream& is, int32_t n, const char* what) {
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& id : out)
    MEMCOM_CHECK(static_cast<bool>(is >> id), std::string("parse: truncated ") + what);
  return out;
}

}  // namespace

std::string task_to_text(const ClassificationTask& task) {
  task.validate();
  std::ostringstream os;
  os << "memtask 1\n";
  os << "vocab " << task.vocab.size << ' ' << task.vocab.pad << ' ' << task.vocab.sep
     << ' ' << task.vocab.shot_delim << ' ' << task.vocab.feature_lo << ' '
     << task.vocab.feature_hi << ' ' << task.vocab.label_lo << ' ' << task.vocab.label_hi
     << ' ' << task.vocab.corpus_lo << ' ' << task.vocab.corpus_hi << '\n';
  char rho_buf[64];
  std::snprintf(rho_buf, sizeof rho_buf, "%.17g", task.rho);
  os << "task " << task.n_classes << ' ' << task.k_in << ' ' << task.k_lab << ' '
     << rho_buf << '\n';
  for (int32_t c = 0; c < task.n_classes; ++c) {
    os << "proto " << c;
    append_ids(os, task.prototypes[static_cast<size_t>(c)]);
    os << '\n';
    os << "label " << c;
    append_ids(os, task.label_names[static_cast<size_t>(c)]);
    os << '\n';
  }
  return os.str();
}

ClassificationTask task_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string word;
  int version = 0;
  MEMCOM_CHECK(static_cast<bool>(is >> word >> version) && word == "memtask" &&
                   version == 1,
               "parse: not a memtask v1 record");
  ClassificationTask task;
  MEMCOM_CHECK(static_cast<bool>(is >> word) && word == "vocab",
               "parse: expected vocab line");
  Vocab& v = task.vocab;
  MEMCOM_CHECK(static_cast<bool>(is >> v.size >> v.pad >> v.sep >> v.shot_delim >>
                                 v.feature_lo >> v.feature_hi >> v.label_lo >>
                                 v.label_hi >> v.corpus_lo >> v.corpus_hi),
               "parse: truncated vocab line");
  MEMCOM_CHECK(static_cast<bool>(is >> word) && word == "task",
               "parse: expected task line");
  MEMCOM_CHECK(static_cast<bool>(is >> task.n_classes >> task.k_in >> task.k_lab >>
                                 task.rho),
               "parse: truncated task line");
  task.prototypes.assign(static_cast<size_t>(task.n_classes), {});
  task.label_names.assign(static_cast<size_t>(task.n_classes), {});
  std::vector<bool> saw_proto(static_cast<size_t>(task.n_classes), false);
  std::vector<bool> saw_label(static_cast<size_t>(task.n_classes), false);
  while (is >> word) {
    int32_t c = -1;
    MEMCOM_CHECK(static_cast<bool>(is >> c) && c >= 0 && c < task.n_classes,
                 "parse: bad class id in '" + word + "' line");
    if (word == "proto") {
      task.prototypes[static_cast<size_t>(c)] = read_ids(is, task.k_in, "prototype");
      saw_proto[static_cast<size_t>(c)] = true;
    } else if (word == "label") {
      task.label_names[static_cast<size_t>(c)] = read_ids(is, task.k_lab, "label");
      saw_label[static_cast<size_t>(c)] = true;
    } else {
      MEMCOM_CHECK(false, "parse: unknown record '" + word + "'");
    }
  }
  for (int32_t c = 0; c < task.n_classes; ++c)
    MEMCOM_CHECK(saw_proto[static_cast<size_t>(c)] && saw_label[static_cast<size_t>(c)],
                 "parse: missing rows for class " + std::to_string(c));
  task.validate();
  return task;
}

std::string eval_set_to_text(const std::vector<PromptSpec>& specs) {
  std::ostringstream os;
  os << "memeval 1\n";
  for (const auto& spec : specs) {
    os << "spec " << spec.budget_t << ' ' << spec.gold_class << ' ' << spec.order_seed
       << ' ' << spec.query.size();
    append_ids(os, spec.query);
    os << '\n';
  }
  return os.str();
}

std::vector<PromptSpec> eval_set_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string word;
  int version = 0;
  MEMCOM_CHECK(static_cast<bool>(is >> word >> version) && word == "memeval" &&
                   version == 1,
               "parse: not a memeval v1 record");
  std::vector<PromptSpec> specs;
  while (is >> word) {
    MEMCOM_CHECK(word == "spec", "parse: unknown record '" + word + "'");
    PromptSpec spec;
    int32_t k = 0;
    MEMCOM_CHECK(static_cast<bool>(is >> spec.budget_t >> spec.gold_class >>
                                   spec.order_seed >> k) &&
                     k >= 0,
                 "parse: truncated spec line");
    spec.query = read_ids(is, k, "query");
    specs.push_back(std::move(spec));
  }
  return specs;
}

}  // namespace memcom
