#include "memcom/cacheio.hpp"

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace memcom {
namespace detail {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  MEMCOM_CHECK_IO(in.good(), "cache: cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  MEMCOM_CHECK_IO(!in.bad(), "cache: read failed for '" + path + "'");
  return bytes;
}

void atomic_write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    MEMCOM_CHECK_IO(out.good(), "cache: cannot create '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    MEMCOM_CHECK_IO(out.good(), "cache: write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cache: cannot publish '" + path + "'");
  }
}

void write_header(ByteWriter& w, uint8_t kind, int64_t L, int64_t m, int64_t d, uint8_t dtype,
                  int64_t source_t, const std::array<uint8_t, 32>& config_hash) {
  MEMCOM_CHECK(L >= 0 && m >= 0 && d >= 0 && source_t >= 0, "cache: negative header field");
  w.raw("MCC1", 4);
  w.u32(kCacheVersion);
  w.u8(kind);
  w.u32(static_cast<uint32_t>(L));
  w.u32(static_cast<uint32_t>(m));
  w.u32(static_cast<uint32_t>(d));
  w.u8(dtype);
  w.u32(static_cast<uint32_t>(source_t));
  w.raw(config_hash.data(), config_hash.size());
}

ParsedFile parse_and_verify(const std::vector<uint8_t>& bytes) {
  MEMCOM_CHECK_IO(bytes.size() >= kCacheHeaderBytes + kCacheTrailerBytes,
                  "cache: truncated file");
  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  uint32_t actual_crc = crc32(bytes.data(), bytes.size() - 4);
  MEMCOM_CHECK_IO(stored_crc == actual_crc, "cache: CRC mismatch, file is corrupt");

  ByteReader r(bytes.data(), bytes.size() - 4);
  char magic[4];
  r.raw(magic, 4);
  MEMCOM_CHECK_IO(std::memcmp(magic, "MCC1", 4) == 0, "cache: bad magic, not a cache file");

  ParsedFile pf;
  pf.info.version = r.u32();
  MEMCOM_CHECK_IO(pf.info.version == kCacheVersion,
                  "cache: unknown format version " + std::to_string(pf.info.version));
  pf.info.kind = r.u8();
  MEMCOM_CHECK_IO(pf.info.kind <= kKindCheckpoint, "cache: unknown kind byte");
  pf.info.n_layers = r.u32();
  pf.info.m = r.u32();
  pf.info.d = r.u32();
  pf.info.dtype = r.u8();
  dtype_size(pf.info.dtype);
  pf.info.source_t = r.u32();
  std::array<uint8_t, 32> hash;
  r.raw(hash.data(), hash.size());
  pf.info.config_hash_hex = Sha256::hex(hash);

  pf.payload_offset = r.position();
  pf.info.file_bytes = static_cast<int64_t>(bytes.size());
  pf.info.payload_bytes =
      static_cast<int64_t>(bytes.size() - pf.payload_offset - kCacheTrailerBytes);
  pf.info.crc = stored_crc;

  if (pf.info.kind == kKindPerLayer || pf.info.kind == kKindEmbeddingPrefix) {
    int64_t arrays = pf.info.kind == kKindPerLayer ? pf.info.n_layers : 1;
    int64_t expect = static_cast<int64_t>(dtype_size(pf.info.dtype)) * arrays * pf.info.m *
                     pf.info.d;
    MEMCOM_CHECK_IO(pf.info.payload_bytes == expect,
                    "cache: payload length disagrees with header");
    if (pf.info.kind == kKindEmbeddingPrefix)
      MEMCOM_CHECK_IO(pf.info.n_layers == 1, "cache: embedding context must hold one array");
  }
  return pf;
}

std::array<uint8_t, 32> hash_from_hex(const std::string& hex) {
  MEMCOM_CHECK(hex.size() == 64, "cache: config hash must be 64 hex characters");
  auto nib = [](char c) -> uint8_t {
    if (c >= '0' && c <= '9') return static_cast<uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<uint8_t>(c - 'a' + 10);
    throw ConfigError("cache: config hash is not lowercase hex");
  };
  std::array<uint8_t, 32> out;
  for (size_t i = 0; i < 32; ++i)
    out[i] = static_cast<uint8_t>((nib(hex[2 * i]) << 4) | nib(hex[2 * i + 1]));
  return out;
}

}  // namespace detail

CacheInfo inspect_cache(const std::string& path) {
  std::vector<uint8_t> bytes = detail::read_file_bytes(path);
  return detail::parse_and_verify(bytes).info;
}

CheckpointPeek peek_checkpoint(const std::string& path) {
  std::vector<uint8_t> bytes = detail::read_file_bytes(path);
  detail::ParsedFile pf = detail::parse_and_verify(bytes);
  MEMCOM_CHECK(pf.info.kind == kKindCheckpoint, "cache: file holds a context, not a checkpoint");
  size_t esize = detail::dtype_size(pf.info.dtype);

  detail::ByteReader r(bytes.data() + pf.payload_offset,
                       static_cast<size_t>(pf.info.payload_bytes));
  CheckpointPeek peek;
  uint32_t n_trees = r.u32();
  for (uint32_t ti = 0; ti < n_trees; ++ti) {
    peek.tree_names.push_back(r.str());
    uint32_t n_params = r.u32();
    for (uint32_t pi = 0; pi < n_params; ++pi) {
      r.str();  // path
      r.u8();   // requires_grad
      uint8_t rank = r.u8();
      int64_t numel = 1;
      for (uint8_t d = 0; d < rank; ++d) {
        int64_t dim = r.i64();
        MEMCOM_CHECK_IO(dim >= 0, "cache: negative dimension in checkpoint");
        numel *= dim;
      }
      r.skip(static_cast<size_t>(numel) * esize);
    }
  }
  if (r.u8() != 0) {
    r.i64();  // step count
    uint32_t n_slots = r.u32();
    for (uint32_t i = 0; i < n_slots; ++i) {
      r.str();
      int64_t n = r.i64();
      MEMCOM_CHECK_IO(n >= 0, "cache: negative slot length");
      r.skip(2 * static_cast<size_t>(n) * esize);
    }
  }
  peek.extra.phase_stamp = static_cast<int>(r.u32());
  peek.extra.rng_key = r.u64();
  peek.extra.rng_counter = r.u64();
  peek.extra.config_text = r.str();
  return peek;
}

}  // namespace memcom
