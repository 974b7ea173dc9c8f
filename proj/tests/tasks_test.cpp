#include "memcom/tasks.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <vector>

namespace memcom {
namespace {

int32_t hamming(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
  int32_t d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i] ? 1 : 0;
  return d;
}

TEST(vocab_test, for_size_partitions_ids) {
  for (int32_t v : {16, 48, 512, 1000}) {
    Vocab vocab = Vocab::for_size(v);
    EXPECT_EQ(vocab.size, v);
    EXPECT_EQ(vocab.pad, 0);
    EXPECT_EQ(vocab.sep, 1);
    EXPECT_EQ(vocab.shot_delim, 2);
    EXPECT_EQ(vocab.feature_lo, 3);
    EXPECT_LE(vocab.feature_hi, vocab.label_lo);
    EXPECT_LE(vocab.label_hi, vocab.corpus_lo);
    EXPECT_EQ(vocab.corpus_hi, v);
    EXPECT_GT(vocab.n_features(), 0);
    EXPECT_GT(vocab.n_labels(), 0);
    EXPECT_GT(vocab.n_corpus(), 0);
  }
  Vocab def;
  def.validate();  // header defaults match for_size(512)
  Vocab v512 = Vocab::for_size(512);
  EXPECT_EQ(def.feature_hi, v512.feature_hi);
  EXPECT_EQ(def.label_hi, v512.label_hi);
  EXPECT_EQ(def.corpus_lo, v512.corpus_lo);
}

TEST(vocab_test, validate_rejects_overlaps) {
  Vocab v = Vocab::for_size(64);
  v.label_lo = v.feature_hi - 1;  // overlap features/labels
  EXPECT_THROW(v.validate(), ConfigError);
  v = Vocab::for_size(64);
  v.corpus_hi = v.size + 1;  // past the vocab
  EXPECT_THROW(v.validate(), ConfigError);
  v = Vocab::for_size(64);
  v.sep = v.pad;  // reserved ids collide
  EXPECT_THROW(v.validate(), ConfigError);
}

TEST(tasks_test, render_shot_layout) {
  Vocab vocab = Vocab::for_size(512);
  Shot shot;
  shot.input = {10, 11, 12};
  shot.label = {300, 301};
  shot.class_id = 0;
  auto r = render_shot(shot, vocab);
  ASSERT_EQ(r.size(), 7u);  // k_in + k_lab + 2
  EXPECT_EQ(r[0], 10);
  EXPECT_EQ(r[1], 11);
  EXPECT_EQ(r[2], 12);
  EXPECT_EQ(r[3], vocab.sep);
  EXPECT_EQ(r[4], 300);
  EXPECT_EQ(r[5], 301);
  EXPECT_EQ(r[6], vocab.shot_delim);
}

TEST(tasks_test, gen_task_two_classes_zero_noise) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(1);
  auto task = gen_task(vocab, 2, 8, 2, 0.0, rng);
  task.validate();
  EXPECT_EQ(task.noise_positions(), 0);
  EXPECT_EQ(task.min_separation(), 1);
  EXPECT_GE(hamming(task.prototypes[0], task.prototypes[1]), 1);
  EXPECT_NE(task.label_names[0], task.label_names[1]);
}

TEST(tasks_test, gen_task_separation_exhaustive) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(2);
  auto task = gen_task(vocab, 32, 16, 2, 0.125, rng);
  EXPECT_EQ(task.noise_positions(), 2);
  EXPECT_EQ(task.min_separation(), 5);
  for (int32_t a = 0; a < 32; ++a)
    for (int32_t b = a + 1; b < 32; ++b)
      EXPECT_GE(hamming(task.prototypes[a], task.prototypes[b]), 5)
          << "pair " << a << "," << b;
  std::set<std::vector<int32_t>> names(task.label_names.begin(), task.label_names.end());
  EXPECT_EQ(names.size(), 32u);
}

TEST(tasks_test, gen_task_rejects_unsatisfiable) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(3);
  // 2*ceil(1.0*4)+1 = 9 > k_in = 4.
  EXPECT_THROW(gen_task(vocab, 2, 4, 1, 1.0, rng), ConfigError);
  // Seven distinct one-token prototypes out of a six-token feature range.
  Vocab tiny = Vocab::for_size(16);
  ASSERT_EQ(tiny.n_features(), 6);
  EXPECT_THROW(gen_task(tiny, 7, 1, 1, 0.0, rng), ConfigError);
}

TEST(tasks_test, gen_task_deterministic) {
  Vocab vocab = Vocab::for_size(512);
  Rng a(4), b(4);
  auto ta = gen_task(vocab, 8, 12, 2, 0.25, a);
  auto tb = gen_task(vocab, 8, 12, 2, 0.25, b);
  EXPECT_EQ(ta.prototypes, tb.prototypes);
  EXPECT_EQ(ta.label_names, tb.label_names);
}

TEST(tasks_test, sample_shot_zero_noise_is_prototype) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(5);
  auto task = gen_task(vocab, 4, 8, 2, 0.0, rng);
  for (int32_t c = 0; c < 4; ++c) {
    auto shot = sample_shot(task, c, rng);
    EXPECT_EQ(shot.input, task.prototypes[c]);
    EXPECT_EQ(shot.label, task.label_names[c]);
    EXPECT_EQ(shot.class_id, c);
  }
  EXPECT_THROW(sample_shot(task, 4, rng), ConfigError);
}

TEST(tasks_test, sample_shot_distance_bounds) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(6);
  auto task = gen_task(vocab, 32, 16, 2, 0.125, rng);
  const int32_t n = task.noise_positions();
  for (int i = 0; i < 1000; ++i) {
    auto c = static_cast<int32_t>(rng.uniform_int(0, 31));
    auto shot = sample_shot(task, c, rng);
    int32_t own = hamming(shot.input, task.prototypes[c]);
    EXPECT_LE(own, n);
    for (int32_t other = 0; other < 32; ++other) {
      if (other == c) continue;
      EXPECT_GT(hamming(shot.input, task.prototypes[other]), own);
    }
    for (int32_t tok : shot.input) {
      EXPECT_GE(tok, vocab.feature_lo);
      EXPECT_LT(tok, vocab.feature_hi);
    }
  }
}

TEST(tasks_test, nearest_prototype_recovers_class) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(7);
  auto task = gen_task(vocab, 32, 16, 2, 0.125, rng);
  for (int i = 0; i < 1000; ++i) {
    auto c = static_cast<int32_t>(rng.uniform_int(0, 31));
    auto shot = sample_shot(task, c, rng);
    EXPECT_EQ(nearest_prototype(task, shot.input), c);
  }
}

TEST(tasks_test, build_prompt_exact_fit_one_per_class) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(8);
  auto task = gen_task(vocab, 3, 8, 2, 0.125, rng);
  int64_t budget = 3 * task.shot_len();
  auto prompt = build_prompt(task, budget, rng);
  EXPECT_EQ(static_cast<int64_t>(prompt.tokens.size()), budget);
  EXPECT_EQ(prompt.shots.size(), 3u);
  EXPECT_EQ(prompt.per_class_counts, (std::vector<int32_t>{1, 1, 1}));
  EXPECT_THROW(build_prompt(task, task.shot_len() - 1, rng), ConfigError);
}

TEST(tasks_test, build_prompt_balance_and_budget_sweep) {
  Rng rng(9);
  for (int kase = 0; kase < 200; ++kase) {
    Vocab vocab = Vocab::for_size(512);
    auto c_count = static_cast<int32_t>(rng.uniform_int(2, 9));
    auto k_in = static_cast<int32_t>(rng.uniform_int(4, 12));
    auto task = gen_task(vocab, c_count, k_in, 2, 0.25, rng);
    int64_t budget = rng.uniform_int(task.shot_len(), 40 * task.shot_len());
    auto prompt = build_prompt(task, budget, rng);
    EXPECT_LE(static_cast<int64_t>(prompt.tokens.size()), budget);
    auto [lo, hi] = std::minmax_element(prompt.per_class_counts.begin(),
                                        prompt.per_class_counts.end());
    EXPECT_LE(*hi - *lo, 1) << "case " << kase;
    int32_t total = 0;
    for (int32_t n : prompt.per_class_counts) total += n;
    EXPECT_EQ(total, static_cast<int32_t>(prompt.shots.size()));
    // Round-robin means class c count never exceeds class b count for b < c.
    for (size_t c = 1; c < prompt.per_class_counts.size(); ++c)
      EXPECT_LE(prompt.per_class_counts[c], prompt.per_class_counts[c - 1]);
  }
}

TEST(tasks_test, make_eval_set_shape_and_gold) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(10);
  auto task = gen_task(vocab, 8, 12, 2, 0.125, rng);
  auto specs = make_eval_set(task, 5, 384, rng);
  ASSERT_EQ(specs.size(), 40u);
  for (size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(specs[i].gold_class, static_cast<int32_t>(i / 5));
    EXPECT_EQ(specs[i].budget_t, 384);
    EXPECT_EQ(specs[i].query.size(), 12u);
    EXPECT_EQ(nearest_prototype(task, specs[i].query), specs[i].gold_class);
  }
  std::set<uint64_t> seeds;
  for (const auto& s : specs) seeds.insert(s.order_seed);
  EXPECT_EQ(seeds.size(), specs.size());
}

TEST(tasks_test, query_never_packed_into_own_prompt) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(11);
  auto task = gen_task(vocab, 8, 12, 2, 0.25, rng);
  auto specs = make_eval_set(task, 5, 10 * task.shot_len(), rng);
  int audited = 0;
  for (int round = 0; round < 25 && audited < 1000; ++round)
    for (const auto& spec : specs) {
      PromptSpec s = spec;
      s.order_seed = spec.order_seed + static_cast<uint64_t>(round) * 0x9E3779B9ull;
      auto prompt = prompt_for_spec(task, s);
      for (const auto& shot : prompt.shots) EXPECT_NE(shot.input, s.query);
      ++audited;
    }
  EXPECT_GE(audited, 1000);
}

TEST(tasks_test, prompt_for_spec_deterministic_and_budget_override) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(12);
  auto task = gen_task(vocab, 4, 8, 2, 0.25, rng);
  auto specs = make_eval_set(task, 1, 12 * task.shot_len(), rng);
  auto a = prompt_for_spec(task, specs[0]);
  auto b = prompt_for_spec(task, specs[0]);
  EXPECT_EQ(a.tokens, b.tokens);
  auto small = prompt_for_spec(task, specs[0], 4 * task.shot_len());
  EXPECT_LE(small.tokens.size(), 4u * static_cast<size_t>(task.shot_len()));
  EXPECT_LT(small.tokens.size(), a.tokens.size());
  // Same order seed, same sampling stream: the small prompt is a prefix of
  // the large one when no collision rebuild interferes.
  if (a.rebuilds == 0 && small.rebuilds == 0)
    EXPECT_TRUE(std::equal(small.tokens.begin(), small.tokens.end(), a.tokens.begin()));
}

TEST(tasks_test, zero_noise_query_collision_rejected) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(13);
  auto task = gen_task(vocab, 3, 8, 2, 0.0, rng);
  auto specs = make_eval_set(task, 1, 6 * task.shot_len(), rng);
  // With rho = 0 every same-class shot equals the prototype equals the query.
  EXPECT_THROW(prompt_for_spec(task, specs[0]), ConfigError);
}

TEST(corpus_test, copy_span_structure) {
  CorpusConfig cfg;
  cfg.vocab = Vocab::for_size(512);
  cfg.w_copy = 1.0;
  cfg.w_motif = cfg.w_recall = cfg.w_noise = 0.0;
  cfg.seg_lo = cfg.seg_hi = 32;
  cfg.total_len = 32;
  Rng rng(14);
  auto seq = corpus_sequence(cfg, rng);
  ASSERT_EQ(seq.size(), 32u);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(seq[i], seq[i + 16]);
}

TEST(corpus_test, motif_periodicity) {
  CorpusConfig cfg;
  cfg.vocab = Vocab::for_size(512);
  cfg.w_motif = 1.0;
  cfg.w_copy = cfg.w_recall = cfg.w_noise = 0.0;
  cfg.seg_lo = cfg.seg_hi = 24;
  cfg.motif_lo = cfg.motif_hi = 4;
  cfg.total_len = 24;
  Rng rng(15);
  auto seq = corpus_sequence(cfg, rng);
  ASSERT_EQ(seq.size(), 24u);
  for (size_t i = 4; i < seq.size(); ++i) EXPECT_EQ(seq[i], seq[i - 4]);
}

TEST(corpus_test, tokens_stay_in_corpus_range) {
  CorpusConfig cfg;
  cfg.vocab = Vocab::for_size(512);
  Rng rng(16);
  for (int s = 0; s < 20; ++s) {
    auto seq = corpus_sequence(cfg, rng);
    ASSERT_EQ(static_cast<int64_t>(seq.size()), cfg.total_len);
    for (int32_t tok : seq) {
      EXPECT_GE(tok, cfg.vocab.corpus_lo);
      EXPECT_LT(tok, cfg.vocab.corpus_hi);
    }
  }
}

TEST(corpus_test, deterministic_stream) {
  CorpusConfig cfg;
  cfg.vocab = Vocab::for_size(512);
  Rng a(17), b(17);
  for (int s = 0; s < 5; ++s)
    EXPECT_EQ(corpus_sequence(cfg, a), corpus_sequence(cfg, b));
}

// Empirical unigram entropy over one million tokens against the analytic
// mixture entropy: every emitted token is a uniform draw over the corpus
// range or a verbatim copy of one, so the expected value is ln(range size).
TEST(corpus_test, unigram_entropy_matches_mixture) {
  CorpusConfig cfg;
  cfg.vocab = Vocab::for_size(512);
  const double want = cfg.unigram_entropy();
  EXPECT_NEAR(want, std::log(128.0), 1e-12);
  Rng rng(18);
  std::vector<int64_t> counts(static_cast<size_t>(cfg.vocab.size), 0);
  int64_t total = 0;
  while (total < 1000000) {
    for (int32_t tok : corpus_sequence(cfg, rng)) ++counts[static_cast<size_t>(tok)];
    total += cfg.total_len;
  }
  double h = 0.0;
  for (int64_t c : counts) {
    if (c == 0) continue;
    double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  EXPECT_NEAR(h, want, 0.05 * want) << "empirical " << h << " analytic " << want;
}

TEST(corpus_test, config_validation) {
  CorpusConfig cfg;
  cfg.vocab = Vocab::for_size(512);
  cfg.w_copy = cfg.w_motif = cfg.w_recall = cfg.w_noise = 0.0;
  Rng rng(19);
  EXPECT_THROW(corpus_sequence(cfg, rng), ConfigError);
  cfg = CorpusConfig{};
  cfg.vocab = Vocab::for_size(512);
  cfg.seg_lo = 10;
  cfg.seg_hi = 5;
  EXPECT_THROW(corpus_sequence(cfg, rng), ConfigError);
}

TEST(serial_test, task_text_round_trip) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(20);
  auto task = gen_task(vocab, 8, 12, 2, 0.125, rng);
  auto text = task_to_text(task);
  auto back = task_from_text(text);
  EXPECT_EQ(back.n_classes, task.n_classes);
  EXPECT_EQ(back.k_in, task.k_in);
  EXPECT_EQ(back.k_lab, task.k_lab);
  EXPECT_EQ(back.rho, task.rho);
  EXPECT_EQ(back.prototypes, task.prototypes);
  EXPECT_EQ(back.label_names, task.label_names);
  EXPECT_EQ(task_to_text(back), text);
  EXPECT_THROW(task_from_text("memtask 2\n"), ConfigError);
  EXPECT_THROW(task_from_text("bogus"), ConfigError);
}

TEST(serial_test, eval_set_text_round_trip) {
  Vocab vocab = Vocab::for_size(512);
  Rng rng(21);
  auto task = gen_task(vocab, 4, 8, 2, 0.25, rng);
  auto specs = make_eval_set(task, 3, 240, rng);
  auto text = eval_set_to_text(specs);
  auto back = eval_set_from_text(text);
  ASSERT_EQ(back.size(), specs.size());
  for (size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(back[i].budget_t, specs[i].budget_t);
    EXPECT_EQ(back[i].gold_class, specs[i].gold_class);
    EXPECT_EQ(back[i].order_seed, specs[i].order_seed);
    EXPECT_EQ(back[i].query, specs[i].query);
  }
  EXPECT_THROW(eval_set_from_text("memeval 9\n"), ConfigError);
}

}  // namespace
}  // namespace memcom
