#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "memcom/cacheio.hpp"
#include "memcom/compressor.hpp"
#include "memcom/train.hpp"

using namespace memcom;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.head_dim = 8;
  cfg.d_ff = 64;
  cfg.vocab_size = 64;
  cfg.max_seq = 128;
  return cfg;
}

std::string tmp_path(const std::string& name) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "memcom_cacheio_test";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::vector<int32_t> tokens_in(Rng& rng, int64_t n, const ModelConfig& cfg) {
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& t : out) t = static_cast<int32_t>(rng.uniform_int(1, cfg.vocab_size - 1));
  return out;
}

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void rewrite_crc(std::vector<uint8_t>& bytes) {
  uint32_t c = crc32(bytes.data(), bytes.size() - 4);
  for (int i = 0; i < 4; ++i)
    bytes[bytes.size() - 4 + static_cast<size_t>(i)] = static_cast<uint8_t>(c >> (8 * i));
}

template <typename T>
void expect_payload_bitwise(const CompressedContext<T>& a, const CompressedContext<T>& b) {
  ASSERT_EQ(a.payload.size(), b.payload.size());
  for (size_t i = 0; i < a.payload.size(); ++i) {
    ASSERT_EQ(a.payload[i].shape(), b.payload[i].shape());
    EXPECT_EQ(0, std::memcmp(a.payload[i].data().data(), b.payload[i].data().data(),
                             a.payload[i].data().size() * sizeof(T)));
  }
}

TEST(CacheIoTest, per_layer_round_trip_is_bitwise) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(11);
  auto src = tokens_in(rng, 16, cfg);
  auto ctx = memcom_compress(sys, src);

  std::string path = tmp_path("per_layer.mcc");
  save_context(ctx, path);
  auto back = load_context<float>(path, cfg);

  EXPECT_EQ(back.kind, ContextKind::kPerLayer);
  EXPECT_EQ(back.source_t, 16);
  EXPECT_EQ(back.config_hash, cfg.hash_hex());
  expect_payload_bitwise(ctx, back);
  validate_context(back, cfg);
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
}

TEST(CacheIoTest, embedding_round_trip_is_bitwise) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_icae<float>(cfg, target, 4, IcaeCapacity::kIcae, Rng(3));
  Rng rng(11);
  auto src = tokens_in(rng, 16, cfg);
  auto ctx = icae_compress(sys, src);

  std::string path = tmp_path("embedding.mcc");
  save_context(ctx, path);
  auto back = load_context<float>(path, cfg);

  EXPECT_EQ(back.kind, ContextKind::kEmbeddingPrefix);
  ASSERT_EQ(back.payload.size(), 1u);
  EXPECT_EQ(back.source_t, 16);
  expect_payload_bitwise(ctx, back);
}

TEST(CacheIoTest, save_load_save_is_byte_identical) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kMha, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 20, cfg));

  std::string p1 = tmp_path("idem1.mcc");
  std::string p2 = tmp_path("idem2.mcc");
  save_context(ctx, p1);
  auto back = load_context<float>(p1);
  save_context(back, p2);
  EXPECT_EQ(detail::read_file_bytes(p1), detail::read_file_bytes(p2));
}

TEST(CacheIoTest, payload_arithmetic_and_inspect) {
  ModelConfig desk;  // defaults: 4 layers, d = 128
  CompressedContext<float> ctx;
  ctx.kind = ContextKind::kPerLayer;
  ctx.source_t = 64;
  ctx.config_hash = desk.hash_hex();
  for (int l = 0; l < 4; ++l)
    ctx.payload.push_back(Tensor<float>::leaf({8, 128}, std::vector<float>(8 * 128, 0.5f)));

  std::string path = tmp_path("arith.mcc");
  save_context(ctx, path);
  CacheInfo info = inspect_cache(path);

  EXPECT_EQ(info.version, 1u);
  EXPECT_EQ(info.kind, kKindPerLayer);
  EXPECT_EQ(info.n_layers, 4);
  EXPECT_EQ(info.m, 8);
  EXPECT_EQ(info.d, 128);
  EXPECT_EQ(info.dtype, 0);
  EXPECT_EQ(info.source_t, 64);
  EXPECT_EQ(info.config_hash_hex, desk.hash_hex());
  EXPECT_EQ(info.payload_bytes, 4 * 8 * 128 * 4);  // 16384
  EXPECT_EQ(info.file_bytes,
            info.payload_bytes + static_cast<int64_t>(kCacheHeaderBytes + kCacheTrailerBytes));
  EXPECT_EQ(static_cast<int64_t>(std::filesystem::file_size(path)), info.file_bytes);
}

TEST(CacheIoTest, file_size_matches_formula_within_64_bytes) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 6, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 24, cfg));

  std::string path = tmp_path("formula.mcc");
  save_context(ctx, path);
  int64_t measured = static_cast<int64_t>(std::filesystem::file_size(path));
  int64_t formula = 4 * cfg.n_layers * 6 * cfg.d_model;
  EXPECT_LE(std::abs(measured - formula), 64);
}

TEST(CacheIoTest, truncation_is_io_error_never_partial) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 16, cfg));

  std::string good = tmp_path("trunc_good.mcc");
  save_context(ctx, good);
  auto bytes = detail::read_file_bytes(good);

  std::string cut = tmp_path("trunc_cut.mcc");
  for (size_t keep : {size_t(3), size_t(20), kCacheHeaderBytes + 5, bytes.size() - 5,
                      bytes.size() - 1}) {
    write_bytes(cut, std::vector<uint8_t>(bytes.begin(), bytes.begin() + keep));
    EXPECT_THROW(load_context<float>(cut), IoError) << "keep=" << keep;
    EXPECT_THROW(inspect_cache(cut), IoError) << "keep=" << keep;
  }
}

TEST(CacheIoTest, corruption_is_crc_error) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 16, cfg));

  std::string good = tmp_path("crc_good.mcc");
  save_context(ctx, good);
  auto bytes = detail::read_file_bytes(good);

  std::string bad = tmp_path("crc_bad.mcc");
  for (size_t at : {size_t(9), kCacheHeaderBytes + 17, bytes.size() - 6}) {
    auto flipped = bytes;
    flipped[at] ^= 0x40;
    write_bytes(bad, flipped);
    EXPECT_THROW(load_context<float>(bad), IoError) << "at=" << at;
  }
}

TEST(CacheIoTest, bad_magic_and_unknown_version_are_io_errors) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 16, cfg));

  std::string good = tmp_path("hdr_good.mcc");
  save_context(ctx, good);
  auto bytes = detail::read_file_bytes(good);

  auto magic = bytes;
  magic[0] = 'X';
  rewrite_crc(magic);  // CRC valid so the magic check itself must fire
  std::string p1 = tmp_path("hdr_magic.mcc");
  write_bytes(p1, magic);
  EXPECT_THROW(load_context<float>(p1), IoError);

  auto version = bytes;
  version[4] = 2;
  rewrite_crc(version);
  std::string p2 = tmp_path("hdr_version.mcc");
  write_bytes(p2, version);
  EXPECT_THROW(load_context<float>(p2), IoError);
}

TEST(CacheIoTest, kind_and_dtype_gates_are_config_errors) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 16, cfg));

  std::string ctx_path = tmp_path("gate_ctx.mcc");
  save_context(ctx, ctx_path);
  EXPECT_THROW(load_context<double>(ctx_path), ConfigError);
  Adam<float> opt;
  EXPECT_THROW(load_checkpoint<float>(ctx_path, cfg, {{"source", &sys.source}}, &opt),
               ConfigError);

  std::string ckpt_path = tmp_path("gate_ckpt.mcc");
  save_checkpoint<float>(ckpt_path, cfg, {{"source", &sys.source}}, nullptr, {});
  EXPECT_THROW(load_context<float>(ckpt_path), ConfigError);
}

TEST(CacheIoTest, config_hash_gate_refuses_other_model) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Rng rng(5);
  auto ctx = memcom_compress(sys, tokens_in(rng, 16, cfg));

  std::string path = tmp_path("hash_gate.mcc");
  save_context(ctx, path);

  ModelConfig other = cfg;
  other.d_ff = 96;
  EXPECT_THROW(load_context<float>(path, other), ConfigError);
  EXPECT_NO_THROW(load_context<float>(path));  // ungated read still works
}

TEST(CacheIoTest, size_ratio_formulas) {
  ModelConfig cfg = tiny_cfg();  // d = 32 = 2 * n_kv_heads * head_dim
  auto mk = [&](int64_t m) {
    CompressedContext<float> ctx;
    ctx.kind = ContextKind::kPerLayer;
    ctx.config_hash = cfg.hash_hex();
    for (int64_t l = 0; l < cfg.n_layers; ++l)
      ctx.payload.push_back(
          Tensor<float>::leaf({m, cfg.d_model}, std::vector<float>(m * cfg.d_model, 0.0f)));
    ctx.source_t = m;
    return ctx;
  };

  // m == t stores one d-vector per layer-token against K and V rows.
  auto full = mk(16);
  double want = static_cast<double>(cfg.d_model) / (2.0 * cfg.n_kv_heads * cfg.head_dim);
  EXPECT_DOUBLE_EQ(cache_size_ratio(full, cfg, 16), want);
  EXPECT_DOUBLE_EQ(want, 1.0);

  // m = t/8 with d == 2 * n_kv_heads * head_dim collapses to the nominal 1/8.
  auto eighth = mk(4);
  EXPECT_DOUBLE_EQ(cache_size_ratio(eighth, cfg, 32), 0.125);

  EXPECT_THROW(cache_size_ratio(full, cfg, 0), ConfigError);
}

TEST(CacheIoTest, checkpoint_round_trip_restores_bitwise) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys_a = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Adam<float> opt_a;

  PhaseConfig pc;
  pc.phase = 1;
  pc.steps = 3;
  pc.peak_lr = 1e-3;
  pc.seed = 11;
  PairSampler sample = [&](Rng& rng) {
    Rng r = rng.split("pair");
    return std::make_pair(tokens_in(r, 12, cfg), tokens_in(r, 6, cfg));
  };
  run_phase(sys_a, pc, sample, opt_a, 0);

  CheckpointExtra extra;
  extra.phase_stamp = sys_a.phase_stamp;
  extra.rng_key = 42;
  extra.rng_counter = 9;
  extra.config_text = cfg.canonical_text();
  std::string path = tmp_path("ckpt.mcc");
  save_checkpoint<float>(path, cfg,
                         {{"target", &sys_a.target},
                          {"source", &sys_a.source},
                          {"memory", &sys_a.memory}},
                         &opt_a, extra);

  // A system with a different init seed must come back bitwise equal to A.
  auto sys_b = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(99));
  Adam<float> opt_b;
  CheckpointExtra got = load_checkpoint<float>(path, cfg,
                                               {{"target", &sys_b.target},
                                                {"source", &sys_b.source},
                                                {"memory", &sys_b.memory}},
                                               &opt_b);

  EXPECT_EQ(params_checksum(sys_a.target), params_checksum(sys_b.target));
  EXPECT_EQ(params_checksum(sys_a.source), params_checksum(sys_b.source));
  EXPECT_EQ(params_checksum(sys_a.memory), params_checksum(sys_b.memory));
  EXPECT_EQ(opt_b.step_count(), 3);
  ASSERT_EQ(opt_a.slots().size(), opt_b.slots().size());
  for (const auto& [p, slot] : opt_a.slots()) {
    const auto& other = opt_b.slots().at(p);
    ASSERT_EQ(slot.m.size(), other.m.size());
    EXPECT_EQ(0, std::memcmp(slot.m.data(), other.m.data(), slot.m.size() * sizeof(float)));
    EXPECT_EQ(0, std::memcmp(slot.v.data(), other.v.data(), slot.v.size() * sizeof(float)));
  }
  EXPECT_EQ(got.phase_stamp, 1);
  EXPECT_EQ(got.rng_key, 42u);
  EXPECT_EQ(got.rng_counter, 9u);
  EXPECT_EQ(got.config_text, cfg.canonical_text());

  // Frozen state and trainability bits travel with the file.
  EXPECT_FALSE(sys_b.target.at("embed.tok").requires_grad());
  EXPECT_FALSE(sys_b.source.at("embed.tok").requires_grad());
  EXPECT_TRUE(sys_b.memory.at("memory_tokens").requires_grad());
}

TEST(CacheIoTest, checkpoint_save_load_save_is_byte_identical) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  std::string p1 = tmp_path("ckpt_idem1.mcc");
  std::string p2 = tmp_path("ckpt_idem2.mcc");
  CheckpointExtra extra;
  extra.phase_stamp = 0;
  extra.config_text = "x = 1\n";
  save_checkpoint<float>(p1, cfg, {{"memory", &sys.memory}}, nullptr, extra);

  auto sys2 = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(99));
  CheckpointExtra got = load_checkpoint<float>(p1, cfg, {{"memory", &sys2.memory}}, nullptr);
  save_checkpoint<float>(p2, cfg, {{"memory", &sys2.memory}}, nullptr, got);
  EXPECT_EQ(detail::read_file_bytes(p1), detail::read_file_bytes(p2));
}

TEST(CacheIoTest, checkpoint_structure_gate) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  auto sys = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  std::string path = tmp_path("ckpt_gate.mcc");
  save_checkpoint<float>(path, cfg, {{"source", &sys.source}, {"memory", &sys.memory}}, nullptr,
                         {});

  auto sys2 = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  // Wrong tree order.
  EXPECT_THROW(load_checkpoint<float>(path, cfg,
                                      {{"memory", &sys2.memory}, {"source", &sys2.source}},
                                      nullptr),
               ConfigError);
  // Wrong count.
  EXPECT_THROW(load_checkpoint<float>(path, cfg, {{"source", &sys2.source}}, nullptr),
               ConfigError);
  // Wrong model config.
  ModelConfig other = cfg;
  other.d_ff = 96;
  auto target3 = init_transformer_params<float>(other, Rng(7));
  auto sys3 = make_memcom<float>(other, target3, 4, CrossAttnVariant::kOneHead, Rng(3));
  EXPECT_THROW(load_checkpoint<float>(path, other,
                                      {{"source", &sys3.source}, {"memory", &sys3.memory}},
                                      nullptr),
               ConfigError);
}

TEST(CacheIoTest, resume_matches_uninterrupted_run_bitwise) {
  ModelConfig cfg = tiny_cfg();
  auto target = init_transformer_params<float>(cfg, Rng(7));
  PairSampler sample = [&](Rng& rng) {
    Rng r = rng.split("pair");
    return std::make_pair(tokens_in(r, 12, cfg), tokens_in(r, 6, cfg));
  };
  PhaseConfig pc_full;
  pc_full.phase = 1;
  pc_full.steps = 10;
  pc_full.warmup_steps = 3;
  pc_full.peak_lr = 1e-3;
  pc_full.seed = 11;

  auto sys_u = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Adam<float> opt_u;
  auto report_u = run_phase(sys_u, pc_full, sample, opt_u, 0);

  // Same schedule, interrupted at step 5 and checkpointed.
  auto sys_a = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(3));
  Adam<float> opt_a;
  PhaseConfig pc_half = pc_full;
  pc_half.steps = 5;
  run_phase(sys_a, pc_half, sample, opt_a, 0);
  CheckpointExtra extra;
  extra.phase_stamp = sys_a.phase_stamp;
  std::string path = tmp_path("resume.mcc");
  save_checkpoint<float>(path, cfg,
                         {{"target", &sys_a.target},
                          {"source", &sys_a.source},
                          {"memory", &sys_a.memory}},
                         &opt_a, extra);

  // Restore into a differently-initialized system and run the back half.
  auto sys_b = make_memcom<float>(cfg, target, 4, CrossAttnVariant::kOneHead, Rng(99));
  Adam<float> opt_b;
  CheckpointExtra got = load_checkpoint<float>(path, cfg,
                                               {{"target", &sys_b.target},
                                                {"source", &sys_b.source},
                                                {"memory", &sys_b.memory}},
                                               &opt_b);
  sys_b.phase_stamp = got.phase_stamp;
  PhaseConfig pc_resume = pc_full;
  pc_resume.start_step = 5;
  auto report_b = run_phase(sys_b, pc_resume, sample, opt_b, 0);

  EXPECT_EQ(params_checksum(sys_u.source), params_checksum(sys_b.source));
  EXPECT_EQ(params_checksum(sys_u.memory), params_checksum(sys_b.memory));
  EXPECT_EQ(report_u.last_loss(), report_b.last_loss());

  // The frozen target never moves through any of this.
  EXPECT_EQ(params_checksum(sys_u.target), params_checksum(target));
  EXPECT_EQ(params_checksum(sys_b.target), params_checksum(target));

  PhaseConfig bad = pc_full;
  bad.start_step = 10;
  EXPECT_THROW(bad.validate(), ConfigError);
}

}  // namespace
