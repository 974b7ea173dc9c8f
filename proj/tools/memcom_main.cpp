// Command-line workbench: train/compress/infer plus evaluation, sweep,
// ablation, gradient checking, and cache inspection.  Every run directory
// holds the exact resolved config, append-only metrics lines, and result
// tables, so any run can be replayed from its own artifacts.
//
// Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O
// corruption.

#include <cstdio>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "memcom/cacheio.hpp"
#include "memcom/compressor.hpp"
#include "memcom/evalharness.hpp"
#include "memcom/gradcheck.hpp"
#include "memcom/runio.hpp"
#include "memcom/tasks.hpp"
#include "memcom/train.hpp"

using namespace memcom;

namespace {

using Json = nlohmann::ordered_json;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig load_rc(const std::string& config_path, const std::vector<std::string>& sets) {
  KvConfig kv = config_path.empty() ? KvConfig() : KvConfig::load(config_path);
  for (const auto& s : sets) kv.apply_override(s);
  return RunConfig::from_kv(kv);
}

std::string default_out(const std::string& prefix, const std::string& rid) {
  return RunDir::run_root() + "/" + prefix + "-" + rid;
}

bool is_memcom_method(MethodId id) {
  return id == MethodId::kMemcomP1 || id == MethodId::kMemcomP2;
}

std::function<void(const StepRecord&)> step_recorder(MetricsWriter& mw, const std::string& rid,
                                                     int phase) {
  return [&mw, rid, phase](const StepRecord& rec) {
    mw.record(rid, "train-step",
              Json{{"phase", phase},
                   {"step", rec.step},
                   {"loss", rec.loss},
                   {"lr", rec.lr},
                   {"grad_norm", rec.grad_norm},
                   {"tokens", rec.tokens}});
  };
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const RunConfig& rc, std::string out, bool overwrite) {
  MEMCOM_CHECK(rc.pretrain.steps >= 1, "pretrain: pretrain.steps must be >= 1");
  MEMCOM_CHECK(rc.target_init == "random", "pretrain: target.init must be 'random'");
  KvConfig resolved = rc.to_kv();
  std::string rid = run_id_for(resolved);
  if (out.empty()) out = default_out("pretrain", rid);
  RunDir rd = RunDir::create(out, overwrite);
  rd.write_text("config.resolved", resolved.dump());
  MetricsWriter mw(rd.sub("metrics.ndjson"));

  ParamTree<float> tree = build_target<float>(rc, step_recorder(mw, rid, 0));

  Vocab vocab = rc.vocab();
  auto sample = pretrain_sampler(vocab, static_cast<int32_t>(rc.task_classes),
                                 static_cast<int32_t>(rc.task_k_in),
                                 static_cast<int32_t>(rc.task_k_lab), rc.task_rho,
                                 rc.pretrain_len, rc.pretrain_task_frac);
  std::vector<std::vector<int32_t>> heldout;
  Rng hrng = Rng(rc.pretrain.seed).split("heldout");
  for (int i = 0; i < 16; ++i) {
    Rng r = hrng.split(static_cast<uint64_t>(i));
    heldout.push_back(sample(r));
  }
  double nll = heldout_lm_nll(tree, rc.model, heldout, vocab.pad);

  CheckpointExtra extra;
  extra.phase_stamp = 0;
  extra.config_text = resolved.dump();
  save_checkpoint<float>(rd.sub("checkpoints/target.mcc"), rc.model, {{"target", &tree}},
                         nullptr, extra);
  mw.record(rid, "pretrain-summary",
            Json{{"steps", rc.pretrain.steps}, {"heldout_lm_nll", nll}});
  std::cout << rd.path() << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc, std::string out, bool overwrite, int phase,
              const std::string& resume) {
  MethodId mid = method_from_string(rc.method);
  MEMCOM_CHECK(mid != MethodId::kBaselineFull && mid != MethodId::kBaselineTrunc,
               "train: baselines have nothing to train");
  MEMCOM_CHECK(phase == 1 || phase == 2, "train: phase must be 1 or 2");
  KvConfig resolved = rc.to_kv();
  std::string rid = run_id_for(resolved);
  if (out.empty()) out = default_out("train", rid) + "-p" + std::to_string(phase);
  RunDir rd = RunDir::create(out, overwrite);
  rd.write_text("config.resolved", resolved.dump());
  MetricsWriter mw(rd.sub("metrics.ndjson"));

  ClassificationTask task = rc.make_task();
  PairSampler sample = classification_sampler(task, rc.budget_t);
  int32_t pad = task.vocab.pad;
  PhaseConfig pc = phase == 1 ? rc.phase1_pc() : rc.phase2_pc();
  bool continuing = pc.start_step > 0;
  MEMCOM_CHECK(!continuing || !resume.empty(),
               "train: a nonzero start_step needs --resume with the matching checkpoint");

  CheckpointExtra extra;
  extra.config_text = resolved.dump();
  TrainReport report;
  std::string ckpt_path = rd.sub("checkpoints/ckpt_phase" + std::to_string(phase) + ".mcc");

  if (is_memcom_method(mid)) {
    std::unique_ptr<MemComSystem<float>> sys;
    Adam<float> opt(pc.optimizer);
    if (resume.empty()) {
      MEMCOM_CHECK(phase == 1, "train: phase 2 needs --resume with a phase-1 checkpoint");
      ParamTree<float> target = build_target<float>(rc, step_recorder(mw, rid, 0));
      sys = std::make_unique<MemComSystem<float>>(make_memcom<float>(
          rc.model, target, rc.budget_m, variant_from_string(rc.variant),
          Rng(rc.seed).split("memcom")));
    } else {
      LoadedSystem<float> ls = load_system<float>(resume, continuing ? &opt : nullptr);
      MEMCOM_CHECK(ls.memcom != nullptr,
                   "train: --resume checkpoint does not hold a layer-wise system");
      MEMCOM_CHECK(ls.rc.model == rc.model,
                   "train: checkpoint model differs from the requested config");
      MEMCOM_CHECK(ls.memcom->m == rc.budget_m,
                   "train: checkpoint memory span differs from budget.m");
      sys = std::move(ls.memcom);
    }
    report = run_phase(*sys, pc, sample, opt, pad, step_recorder(mw, rid, phase));
    extra.phase_stamp = sys->phase_stamp;
    save_checkpoint<float>(ckpt_path, rc.model,
                           {{"target", &sys->target},
                            {"source", &sys->source},
                            {"memory", &sys->memory}},
                           &opt, extra);
  } else {
    MEMCOM_CHECK(phase == 1, "train: the capacity ladder trains in a single phase");
    std::unique_ptr<IcaeSystem<float>> sys;
    Adam<float> opt(pc.optimizer);
    if (resume.empty()) {
      ParamTree<float> target = build_target<float>(rc, step_recorder(mw, rid, 0));
      sys = std::make_unique<IcaeSystem<float>>(
          make_icae<float>(rc.model, target, rc.budget_m, capacity_for(mid),
                           Rng(rc.seed).split("icae"), rc.lora_rank, rc.lora_alpha));
    } else {
      LoadedSystem<float> ls = load_system<float>(resume, continuing ? &opt : nullptr);
      MEMCOM_CHECK(ls.icae != nullptr,
                   "train: --resume checkpoint does not hold a capacity-ladder system");
      MEMCOM_CHECK(ls.rc.model == rc.model,
                   "train: checkpoint model differs from the requested config");
      MEMCOM_CHECK(ls.icae->m == rc.budget_m,
                   "train: checkpoint memory span differs from budget.m");
      sys = std::move(ls.icae);
    }
    report = run_phase(*sys, pc, sample, opt, pad, step_recorder(mw, rid, phase));
    extra.phase_stamp = sys->phase_stamp;
    save_checkpoint<float>(ckpt_path, rc.model,
                           {{"target", &sys->target},
                            {"compressor", &sys->compressor},
                            {"extras", &sys->extras}},
                           &opt, extra);
  }

  mw.record(rid, "train-summary",
            Json{{"phase", phase},
                 {"first_loss", report.first_loss()},
                 {"last_loss", report.last_loss()},
                 {"trainable", report.trainable_count},
                 {"target_checksum", report.target_checksum_after}});
  std::cout << rd.path() << "\n";
  return 0;
}

int cmd_compress(const std::string& ckpt, const std::string& prompt_file,
                 const std::string& cache_out) {
  LoadedSystem<float> ls = load_system<float>(ckpt);
  MEMCOM_CHECK(ls.memcom != nullptr || ls.icae != nullptr,
               "compress: checkpoint holds no compressor");
  std::vector<int32_t> tokens = read_token_file(prompt_file);
  int64_t t = static_cast<int64_t>(tokens.size());
  int64_t m = ls.memcom ? ls.memcom->m : ls.icae->m;
  MEMCOM_CHECK(t > m, "compress: prompt must be longer than the memory span (t > m)");

  CompressedContext<float> ctx =
      ls.memcom ? memcom_compress(*ls.memcom, tokens) : icae_compress(*ls.icae, tokens);
  save_context(ctx, cache_out);

  double ratio = cache_size_ratio(ctx, ls.rc.model, t);
  std::cout << "cache " << cache_out << "\n"
            << "kind " << (ctx.kind == ContextKind::kPerLayer ? "per_layer" : "embedding_prefix")
            << "\n"
            << "arrays " << ctx.payload.size() << "\n"
            << "m " << ctx.m() << "\n"
            << "source_t " << ctx.source_t << "\n"
            << "nominal_ratio " << fmt17(static_cast<double>(t) / static_cast<double>(m)) << "\n"
            << "cache_size_ratio " << fmt17(ratio) << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& cache, const std::string& query_file,
              const std::string& labels_file) {
  LoadedSystem<float> ls = load_system<float>(ckpt);
  const ModelConfig& cfg = ls.rc.model;
  CompressedContext<float> ctx = load_context<float>(cache, cfg);
  std::vector<int32_t> query = read_token_file(query_file);
  std::vector<std::vector<int32_t>> candidates = read_token_lines(labels_file);

  LayerKV<float> prefix = context_prefix_kv(ls.target(), cfg, ctx);
  std::vector<int64_t> span;
  std::vector<double> scores =
      label_scores(ls.target(), cfg, &prefix, ctx.m(), query, candidates, &span);
  int32_t pred = argmax_class(scores);

  for (size_t l = 0; l < span.size(); ++l)
    std::cout << "span layer=" << l << " entries=" << span[l] << "\n";
  for (size_t j = 0; j < scores.size(); ++j)
    std::cout << "score " << j << " " << fmt17(scores[j]) << "\n";
  std::cout << "predicted " << pred << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, std::string out, bool overwrite,
             const std::vector<std::string>& ckpts) {
  KvConfig resolved = rc.to_kv();
  std::string rid = run_id_for(resolved);
  if (out.empty()) out = default_out("eval", rid);
  RunDir rd = RunDir::create(out, overwrite);
  rd.write_text("config.resolved", resolved.dump());
  MetricsWriter mw(rd.sub("metrics.ndjson"));

  std::vector<LoadedSystem<float>> systems;
  for (const auto& path : ckpts) systems.push_back(load_system<float>(path));

  std::unique_ptr<ParamTree<float>> own_target;
  const ParamTree<float>* target = nullptr;
  if (systems.empty()) {
    own_target = std::make_unique<ParamTree<float>>(build_target<float>(rc));
    target = own_target.get();
  } else {
    target = &systems[0].target();
    std::string t0 = params_checksum(*target);
    for (size_t i = 1; i < systems.size(); ++i)
      MEMCOM_CHECK(params_checksum(systems[i].target()) == t0,
                   "eval: checkpoints disagree on the frozen target");
  }

  MethodArtifacts<float> art;
  for (auto& ls : systems) {
    if (ls.memcom) {
      MEMCOM_CHECK(ls.memcom->m == rc.budget_m,
                   "eval: checkpoint memory span differs from budget.m");
      if (ls.memcom->phase_stamp >= 2)
        art.memcom_p2 = ls.memcom.get();
      else
        art.memcom_p1 = ls.memcom.get();
    } else if (ls.icae) {
      MEMCOM_CHECK(ls.icae->m == rc.budget_m,
                   "eval: checkpoint memory span differs from budget.m");
      switch (ls.icae->capacity) {
        case IcaeCapacity::kIcae: art.icae = ls.icae.get(); break;
        case IcaeCapacity::kIcaePlus: art.icae_plus = ls.icae.get(); break;
        case IcaeCapacity::kIcaePp: art.icae_pp = ls.icae.get(); break;
      }
    }
  }

  ClassificationTask task = rc.make_task();
  std::string task_name = "c" + std::to_string(rc.task_classes);
  Rng erng = Rng(rc.seed).split("evalset");
  auto specs = make_eval_set(task, static_cast<int32_t>(rc.eval_queries), rc.budget_t, erng);

  std::vector<MethodId> methods = {MethodId::kBaselineFull, MethodId::kBaselineTrunc};
  for (MethodId id : {MethodId::kIcae, MethodId::kIcaePlus, MethodId::kIcaePp,
                      MethodId::kMemcomP1, MethodId::kMemcomP2})
    if (art.has(id)) methods.push_back(id);

  SweepTable table;
  double full_acc = 0.0;
  for (MethodId id : methods) {
    EvalOutcome outc = evaluate(id, rc.model, *target, art, task, specs, rc.budget_t,
                                rc.budget_m, rc.eval_generation);
    if (id == MethodId::kBaselineFull) full_acc = outc.accuracy;
    SweepCell cell;
    cell.method = id;
    cell.grid_ratio = rc.budget_t % rc.budget_m == 0 ? rc.budget_t / rc.budget_m : 0;
    cell.task_name = task_name;
    cell.seed = rc.task_seed;
    cell.t = rc.budget_t;
    cell.m = id == MethodId::kBaselineFull ? rc.budget_t : rc.budget_m;
    cell.present = true;
    cell.accuracy = outc.accuracy;
    cell.n_queries = outc.n_queries;
    cell.degradation = outc.accuracy - full_acc;
    table.cells.push_back(cell);
    mw.record(rid, "eval-cell",
              Json{{"method", to_string(id)},
                   {"accuracy", outc.accuracy},
                   {"n_queries", outc.n_queries},
                   {"stream_digest", outc.stream_digest}});
  }

  if (rc.eval_shuffled) {
    Rng srng = Rng(rc.seed).split("shuffle");
    auto shuffled = shuffle_gold(specs, static_cast<int32_t>(rc.task_classes), srng);
    for (MethodId id : methods) {
      EvalOutcome outc = evaluate(id, rc.model, *target, art, task, shuffled, rc.budget_t,
                                  rc.budget_m, rc.eval_generation);
      mw.record(rid, "eval-cell",
                Json{{"method", to_string(id)},
                     {"control", "shuffle_gold"},
                     {"accuracy", outc.accuracy},
                     {"n_queries", outc.n_queries}});
    }
  }

  rd.write_text("results.csv", table.csv());
  std::cout << rd.path() << "\n";
  return 0;
}

int cmd_sweep(const RunConfig& rc, std::string out, bool overwrite) {
  KvConfig resolved = rc.to_kv();
  std::string rid = run_id_for(resolved);
  if (out.empty()) out = default_out("sweep", rid);
  RunDir rd = RunDir::create(out, overwrite);
  rd.write_text("config.resolved", resolved.dump());
  MetricsWriter mw(rd.sub("metrics.ndjson"));

  ParamTree<float> target = build_target<float>(rc, step_recorder(mw, rid, 0));
  ClassificationTask task = rc.make_task();
  std::string task_name = "c" + std::to_string(rc.task_classes);

  std::vector<MethodId> methods;
  for (const auto& name : rc.sweep_methods) methods.push_back(method_from_string(name));

  ArtifactTrainPlan plan;
  plan.variant = variant_from_string(rc.variant);
  plan.lora_rank = rc.lora_rank;
  plan.lora_alpha = rc.lora_alpha;
  plan.phase1 = rc.phase1_pc();
  plan.phase2 = rc.phase2_pc();
  plan.init_seed = rc.seed;

  std::vector<std::pair<int64_t, ArtifactSet<float>>> owners;
  for (int64_t ratio : rc.sweep_ratios) {
    MEMCOM_CHECK(rc.budget_t % ratio == 0, "sweep: budget.t must be divisible by every ratio");
    int64_t m = rc.budget_t / ratio;
    auto cb = [&mw, &rid, ratio](MethodId id, const StepRecord& rec) {
      mw.record(rid, "train-step",
                Json{{"method", to_string(id)},
                     {"ratio", ratio},
                     {"step", rec.step},
                     {"loss", rec.loss}});
    };
    owners.emplace_back(ratio, train_artifacts<float>(rc.model, target, task, rc.budget_t, m,
                                                      methods, plan, cb));
  }

  SweepInputs<float> in;
  in.cfg = rc.model;
  in.target = &target;
  in.methods = methods;
  in.ratios = rc.sweep_ratios;
  in.tasks = {{task_name, &task}};
  in.seeds = rc.sweep_seeds;
  in.t = rc.budget_t;
  in.queries_per_class = static_cast<int32_t>(rc.eval_queries);
  in.generation = rc.eval_generation;
  for (auto& [ratio, set] : owners) in.artifacts[ratio] = set.view();

  SweepTable table = run_sweep(in);
  rd.write_text("results.csv", table.csv());
  rd.write_text("degradation.csv", table.degradation_csv());
  rd.write_text("plot.csv", table.plot_data());
  for (const SweepCell& cell : table.cells)
    mw.record(rid, "eval-cell",
              Json{{"method", to_string(cell.method)},
                   {"ratio", cell.grid_ratio},
                   {"task", cell.task_name},
                   {"seed", cell.seed},
                   {"present", cell.present},
                   {"accuracy", cell.accuracy},
                   {"degradation", cell.degradation}});
  mw.record(rid, "sweep-summary",
            Json{{"cells", table.cells.size()},
                 {"methods", rc.sweep_methods.size()},
                 {"ratios", rc.sweep_ratios.size()}});
  std::cout << rd.path() << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& rc, std::string out, bool overwrite) {
  for (uint64_t s : rc.ablate_seeds)
    MEMCOM_CHECK(s == rc.ablate_seeds[0],
                 "ablate: variants must share a seed, got mismatched ablate.seeds");
  uint64_t seed = rc.ablate_seeds[0];
  MEMCOM_CHECK(rc.budget_t % rc.ablate_ratio == 0,
               "ablate: budget.t must be divisible by ablate.ratio");
  int64_t m = rc.budget_t / rc.ablate_ratio;

  KvConfig resolved = rc.to_kv();
  std::string rid = run_id_for(resolved);
  if (out.empty()) out = default_out("ablate", rid);
  RunDir rd = RunDir::create(out, overwrite);
  rd.write_text("config.resolved", resolved.dump());
  MetricsWriter mw(rd.sub("metrics.ndjson"));

  ParamTree<float> target = build_target<float>(rc, step_recorder(mw, rid, 0));
  ClassificationTask task = rc.make_task();
  std::string task_name = "c" + std::to_string(rc.task_classes);
  PairSampler sample = classification_sampler(task, rc.budget_t);

  std::vector<std::unique_ptr<MemComSystem<float>>> owners;
  std::vector<std::pair<CrossAttnVariant, const MemComSystem<float>*>> variants;
  for (const auto& name : rc.ablate_variants) {
    CrossAttnVariant v = variant_from_string(name);
    owners.push_back(std::make_unique<MemComSystem<float>>(
        make_memcom<float>(rc.model, target, m, v, Rng(seed).split("ablate"))));
    PhaseConfig pc = rc.phase1_pc();
    Adam<float> opt(pc.optimizer);
    auto cb = [&mw, &rid, name](const StepRecord& rec) {
      mw.record(rid, "train-step",
                Json{{"variant", name}, {"step", rec.step}, {"loss", rec.loss}});
    };
    run_phase(*owners.back(), pc, sample, opt, task.vocab.pad, cb);
    variants.emplace_back(v, owners.back().get());
  }

  AblationTable table =
      run_ablation(rc.model, target, variants, {{task_name, &task}}, seed, rc.budget_t,
                   rc.ablate_ratio, static_cast<int32_t>(rc.eval_queries));
  rd.write_text("ablation.csv", table.csv());
  mw.record(rid, "sweep-summary", Json{{"rows", table.rows.size()}});
  std::cout << rd.path() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& rc) {
  const ModelConfig& cfg = rc.model;
  auto target = init_transformer_params<double>(cfg, Rng(rc.seed).split("target"));
  auto sys = make_memcom<double>(cfg, target, rc.budget_m, variant_from_string(rc.variant),
                                 Rng(rc.seed).split("memcom"));
  apply_phase2_freeze(sys);

  Rng rng(rc.seed);
  auto draw = [&](int64_t n) {
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (auto& t : out) t = static_cast<int32_t>(rng.uniform_int(1, cfg.vocab_size - 1));
    return out;
  };
  std::vector<int32_t> src = draw(12), tgt = draw(5);
  Vocab vocab = rc.vocab();
  auto loss_fn = [&]() { return memcom_loss(sys, src, tgt, vocab.pad); };

  std::string last = "layers." + std::to_string(cfg.n_layers - 1);
  std::vector<std::pair<std::string, Tensor<double>>> probes = {
      {"memory_tokens", sys.memory.at("memory_tokens")},
      {"xattn0.wq", sys.memory.at("layers.0.xattn.wq")},
      {"xattn0.wk", sys.memory.at("layers.0.xattn.wk")},
      {"xattn0.wv", sys.memory.at("layers.0.xattn.wv")},
      {"xattn0.wo", sys.memory.at("layers.0.xattn.wo")},
      {"xattn_last.wq", sys.memory.at(last + ".xattn.wq")},
      {"mem.attn0.wq", sys.memory.at("layers.0.attn.wq")},
      {"mem.mlp_last.gate", sys.memory.at(last + ".mlp.gate")},
      {"mem.norm1", sys.memory.at("layers.0.norm1")},
      {"src.embed", sys.source.at("embed.tok")},
      {"src.attn0.wk", sys.source.at("layers.0.attn.wk")},
      {"src.final_norm", sys.source.at("final_norm")},
  };
  auto rep = gradcheck_params<double>(loss_fn, probes, 1e-5, 6, Rng(rc.seed).split("gc"));
  bool pass = rep.max_rel_err < 1e-4;
  std::cout << "gradcheck coords=" << rep.coords_checked
            << " max_rel_err=" << fmt17(rep.max_rel_err) << " worst=" << rep.worst_param << "["
            << rep.worst_coord << "]"
            << " analytic=" << fmt17(rep.worst_analytic)
            << " numeric=" << fmt17(rep.worst_numeric) << "\n"
            << (pass ? "PASS" : "FAIL") << " threshold 0.0001\n";
  return pass ? 0 : 2;
}

int cmd_inspect(const std::string& path) {
  CacheInfo info = inspect_cache(path);
  const char* kind = info.kind == kKindPerLayer ? "per_layer"
                     : info.kind == kKindEmbeddingPrefix ? "embedding_prefix"
                                                         : "checkpoint";
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", info.crc);
  std::cout << "kind " << kind << "\n"
            << "version " << info.version << "\n"
            << "arrays " << info.n_layers << "\n"
            << "m " << info.m << "\n"
            << "d " << info.d << "\n"
            << "dtype " << (info.dtype == 0 ? "f32" : "f64") << "\n"
            << "source_t " << info.source_t << "\n"
            << "config_hash " << info.config_hash_hex << "\n"
            << "payload_bytes " << info.payload_bytes << "\n"
            << "file_bytes " << info.file_bytes << "\n"
            << "crc32 " << crc << "\n";
  if (info.kind == kKindCheckpoint) {
    CheckpointPeek peek = peek_checkpoint(path);
    std::cout << "trees";
    for (const auto& name : peek.tree_names) std::cout << " " << name;
    std::cout << "\nphase_stamp " << peek.extra.phase_stamp << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layer-wise prompt compression workbench"};
  app.require_subcommand(1);

  std::string config_path, out, resume, ckpt, cache, prompt, query, labels, inspect_path;
  std::vector<std::string> sets, ckpts;
  bool overwrite = false;
  int phase = 1;

  auto add_common = [&](CLI::App* cmd, bool with_out) {
    cmd->add_option("--config", config_path, "flat key = value config file");
    cmd->add_option("--set", sets, "config override key=value (repeatable)");
    if (with_out) {
      cmd->add_option("--out", out, "run directory (default: under the run root)");
      cmd->add_flag("--overwrite", overwrite, "replace an existing run directory");
    }
  };

  CLI::App* c_train = app.add_subcommand("train", "train a compressor phase");
  add_common(c_train, true);
  c_train->add_option("--phase", phase, "training phase (1 or 2)")->check(CLI::Range(1, 2));
  c_train->add_option("--resume", resume, "checkpoint to continue from");

  CLI::App* c_pre = app.add_subcommand("pretrain", "pretrain the frozen target LM");
  add_common(c_pre, true);

  CLI::App* c_comp = app.add_subcommand("compress", "compress a prompt file into a cache");
  c_comp->add_option("--ckpt", ckpt, "trained compressor checkpoint")->required();
  c_comp->add_option("--prompt", prompt, "token file to compress")->required();
  c_comp->add_option("--cache", cache, "output cache path")->required();

  CLI::App* c_inf = app.add_subcommand("infer", "score candidate labels against a cache");
  c_inf->add_option("--ckpt", ckpt, "checkpoint holding the frozen target")->required();
  c_inf->add_option("--cache", cache, "compressed context")->required();
  c_inf->add_option("--query", query, "query token file")->required();
  c_inf->add_option("--labels", labels, "candidate label token file, one per line")->required();

  CLI::App* c_eval = app.add_subcommand("eval", "evaluate methods on the configured task");
  add_common(c_eval, true);
  c_eval->add_option("--ckpt", ckpts, "trained checkpoints (repeatable)");

  CLI::App* c_sweep = app.add_subcommand("sweep", "compression-ratio sweep");
  add_common(c_sweep, true);

  CLI::App* c_abl = app.add_subcommand("ablate", "cross-attention variant ablation");
  add_common(c_abl, true);

  CLI::App* c_gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(c_gc, false);

  CLI::App* c_ins = app.add_subcommand("inspect-cache", "print cache or checkpoint header facts");
  c_ins->add_option("path", inspect_path, "cache file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_train->parsed()) return cmd_train(load_rc(config_path, sets), out, overwrite, phase,
                                            resume);
    if (c_pre->parsed()) return cmd_pretrain(load_rc(config_path, sets), out, overwrite);
    if (c_comp->parsed()) return cmd_compress(ckpt, prompt, cache);
    if (c_inf->parsed()) return cmd_infer(ckpt, cache, query, labels);
    if (c_eval->parsed()) return cmd_eval(load_rc(config_path, sets), out, overwrite, ckpts);
    if (c_sweep->parsed()) return cmd_sweep(load_rc(config_path, sets), out, overwrite);
    if (c_abl->parsed()) return cmd_ablate(load_rc(config_path, sets), out, overwrite);
    if (c_gc->parsed()) return cmd_gradcheck(load_rc(config_path, sets));
    if (c_ins->parsed()) return cmd_inspect(inspect_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
