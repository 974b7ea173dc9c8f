#include "memcom/runio.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace memcom {
namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int64_t parse_i64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  long long x = std::strtoll(v.c_str(), &end, 10);
  MEMCOM_CHECK(!v.empty() && end == v.c_str() + v.size() && errno == 0,
               "config: key '" + key + "': expected integer, got '" + v + "'");
  return static_cast<int64_t>(x);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  MEMCOM_CHECK(!v.empty() && v[0] != '-' && end == v.c_str() + v.size() && errno == 0,
               "config: key '" + key + "': expected unsigned integer, got '" + v + "'");
  return static_cast<uint64_t>(x);
}

double parse_f64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  MEMCOM_CHECK(!v.empty() && end == v.c_str() + v.size() && errno == 0,
               "config: key '" + key + "': expected number, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "': expected boolean, got '" + v + "'");
}

std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ",";
    out += parts[i];
  }
  return out;
}

std::string join_i64(const std::vector<int64_t>& parts) {
  std::vector<std::string> s;
  s.reserve(parts.size());
  for (int64_t p : parts) s.push_back(std::to_string(p));
  return join(s);
}

std::string join_u64(const std::vector<uint64_t>& parts) {
  std::vector<std::string> s;
  s.reserve(parts.size());
  for (uint64_t p : parts) s.push_back(std::to_string(p));
  return join(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// KvConfig

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig kv;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    std::string line = trim(raw);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    MEMCOM_CHECK(eq != std::string::npos, "config: malformed line '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    MEMCOM_CHECK(!key.empty(), "config: malformed line '" + line + "'");
    MEMCOM_CHECK(!kv.items_.count(key), "config: duplicate key '" + key + "'");
    kv.items_[key] = value;
  }
  return kv;
}

KvConfig KvConfig::load(const std::string& path) {
  std::ifstream in(path);
  MEMCOM_CHECK_IO(in.good(), "config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

void KvConfig::set(const std::string& key, const std::string& value) {
  MEMCOM_CHECK(!trim(key).empty(), "config: empty key");
  items_[trim(key)] = trim(value);
}

void KvConfig::apply_override(const std::string& spec) {
  size_t eq = spec.find('=');
  MEMCOM_CHECK(eq != std::string::npos && eq > 0,
               "config: override must be key=value, got '" + spec + "'");
  set(spec.substr(0, eq), spec.substr(eq + 1));
}

bool KvConfig::has(const std::string& key) const { return items_.count(key) != 0; }

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : it->second;
}

int64_t KvConfig::get_i64(const std::string& key, int64_t fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : parse_i64(key, it->second);
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : parse_u64(key, it->second);
}

double KvConfig::get_f64(const std::string& key, double fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : parse_f64(key, it->second);
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : parse_bool(key, it->second);
}

std::vector<std::string> KvConfig::get_list(const std::string& key,
                                            const std::string& fallback) const {
  std::string raw = get_str(key, fallback);
  std::vector<std::string> out;
  std::istringstream in(raw);
  std::string part;
  while (std::getline(in, part, ',')) {
    std::string p = trim(part);
    MEMCOM_CHECK(!p.empty(), "config: key '" + key + "': empty list element in '" + raw + "'");
    out.push_back(p);
  }
  MEMCOM_CHECK(!out.empty(), "config: key '" + key + "': empty list");
  return out;
}

std::string KvConfig::dump() const {
  std::string out;
  for (const auto& [k, v] : items_) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// RunConfig

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "model.n_layers",   "model.d_model",    "model.n_heads",
      "model.n_kv_heads", "model.head_dim",   "model.d_ff",
      "model.vocab_size", "model.max_seq",    "model.rope_base",
      "model.norm_eps",   "seed",             "method",
      "memcom.variant",   "icae.lora_rank",   "icae.lora_alpha",
      "target.init",      "task.classes",     "task.k_in",
      "task.k_lab",       "task.rho",         "task.seed",
      "budget.t",         "budget.m",         "phase1.steps",
      "phase1.batch",     "phase1.lr",        "phase1.warmup",
      "phase1.start_step", "phase1.seed",     "phase2.steps",
      "phase2.batch",     "phase2.lr",        "phase2.warmup",
      "phase2.start_step", "phase2.seed",     "pretrain.steps",
      "pretrain.batch",   "pretrain.lr",      "pretrain.warmup",
      "pretrain.start_step", "pretrain.seed", "pretrain.len",
      "pretrain.task_frac", "eval.queries_per_class", "eval.generation",
      "eval.shuffled",    "sweep.ratios",     "sweep.seeds",
      "sweep.methods",    "ablate.variants",  "ablate.seeds",
      "ablate.ratio",
  };
  return keys;
}

PhaseKnobs read_phase(const KvConfig& kv, const std::string& prefix, const PhaseKnobs& def) {
  PhaseKnobs k;
  k.steps = kv.get_i64(prefix + ".steps", def.steps);
  k.batch = kv.get_i64(prefix + ".batch", def.batch);
  k.lr = kv.get_f64(prefix + ".lr", def.lr);
  k.warmup = kv.get_i64(prefix + ".warmup", def.warmup);
  k.start_step = kv.get_i64(prefix + ".start_step", def.start_step);
  k.seed = kv.get_u64(prefix + ".seed", def.seed);
  return k;
}

void write_phase(KvConfig& kv, const std::string& prefix, const PhaseKnobs& k) {
  kv.set(prefix + ".steps", std::to_string(k.steps));
  kv.set(prefix + ".batch", std::to_string(k.batch));
  kv.set(prefix + ".lr", fmt_f64(k.lr));
  kv.set(prefix + ".warmup", std::to_string(k.warmup));
  kv.set(prefix + ".start_step", std::to_string(k.start_step));
  kv.set(prefix + ".seed", std::to_string(k.seed));
}

void check_phase(const std::string& prefix, const PhaseKnobs& k, bool allow_zero_steps) {
  MEMCOM_CHECK(k.steps >= (allow_zero_steps ? 0 : 1),
               "config: key '" + prefix + ".steps': must be >= " +
                   std::string(allow_zero_steps ? "0" : "1"));
  MEMCOM_CHECK(k.batch >= 1, "config: key '" + prefix + ".batch': must be >= 1");
  MEMCOM_CHECK(k.lr >= 0.0, "config: key '" + prefix + ".lr': must be >= 0");
  MEMCOM_CHECK(k.warmup >= 0, "config: key '" + prefix + ".warmup': must be >= 0");
  MEMCOM_CHECK(k.start_step >= 0 && (k.steps == 0 || k.start_step < k.steps),
               "config: key '" + prefix + ".start_step': out of range");
}

PhaseConfig to_pc(const PhaseKnobs& k, int phase) {
  PhaseConfig pc;
  pc.phase = phase;
  pc.steps = k.steps;
  pc.start_step = k.start_step;
  pc.batch_size = k.batch;
  pc.peak_lr = k.lr;
  pc.warmup_steps = k.warmup;
  pc.seed = k.seed;
  return pc;
}

}  // namespace

RunConfig RunConfig::from_kv(const KvConfig& kv) {
  for (const auto& [key, value] : kv.items())
    MEMCOM_CHECK(known_keys().count(key), "config: unknown key '" + key + "'");

  RunConfig rc;
  rc.model.n_layers = kv.get_i64("model.n_layers", rc.model.n_layers);
  rc.model.d_model = kv.get_i64("model.d_model", rc.model.d_model);
  rc.model.n_heads = kv.get_i64("model.n_heads", rc.model.n_heads);
  rc.model.n_kv_heads = kv.get_i64("model.n_kv_heads", rc.model.n_kv_heads);
  rc.model.head_dim = kv.get_i64("model.head_dim", rc.model.head_dim);
  rc.model.d_ff = kv.get_i64("model.d_ff", rc.model.d_ff);
  rc.model.vocab_size = kv.get_i64("model.vocab_size", rc.model.vocab_size);
  rc.model.max_seq = kv.get_i64("model.max_seq", rc.model.max_seq);
  rc.model.rope_base = kv.get_f64("model.rope_base", rc.model.rope_base);
  rc.model.norm_eps = kv.get_f64("model.norm_eps", rc.model.norm_eps);
  rc.model.validate();

  rc.seed = kv.get_u64("seed", rc.seed);
  rc.method = kv.get_str("method", rc.method);
  method_from_string(rc.method);
  rc.variant = kv.get_str("memcom.variant", rc.variant);
  variant_from_string(rc.variant);
  rc.lora_rank = kv.get_i64("icae.lora_rank", rc.lora_rank);
  rc.lora_alpha = kv.get_f64("icae.lora_alpha", rc.lora_alpha);
  MEMCOM_CHECK(rc.lora_rank >= 1, "config: key 'icae.lora_rank': must be >= 1");
  MEMCOM_CHECK(rc.lora_alpha > 0.0, "config: key 'icae.lora_alpha': must be > 0");
  rc.target_init = kv.get_str("target.init", rc.target_init);
  MEMCOM_CHECK(!rc.target_init.empty(), "config: key 'target.init': must not be empty");

  rc.task_classes = kv.get_i64("task.classes", rc.task_classes);
  rc.task_k_in = kv.get_i64("task.k_in", rc.task_k_in);
  rc.task_k_lab = kv.get_i64("task.k_lab", rc.task_k_lab);
  rc.task_rho = kv.get_f64("task.rho", rc.task_rho);
  rc.task_seed = kv.get_u64("task.seed", rc.task_seed);
  MEMCOM_CHECK(rc.task_classes >= 2, "config: key 'task.classes': must be >= 2");
  MEMCOM_CHECK(rc.task_k_in >= 1 && rc.task_k_lab >= 1,
               "config: keys 'task.k_in'/'task.k_lab': must be >= 1");
  MEMCOM_CHECK(rc.task_rho >= 0.0 && rc.task_rho <= 1.0,
               "config: key 'task.rho': must lie in [0, 1]");

  rc.budget_t = kv.get_i64("budget.t", rc.budget_t);
  rc.budget_m = kv.get_i64("budget.m", rc.budget_m);
  MEMCOM_CHECK(rc.budget_m >= 1 && rc.budget_m <= rc.budget_t,
               "config: keys 'budget.m'/'budget.t': need 1 <= m <= t");
  MEMCOM_CHECK(rc.budget_t <= rc.model.max_seq,
               "config: key 'budget.t': exceeds model.max_seq");

  rc.phase1 = read_phase(kv, "phase1", rc.phase1);
  rc.phase2 = read_phase(kv, "phase2", rc.phase2);
  rc.pretrain = read_phase(kv, "pretrain", rc.pretrain);
  check_phase("phase1", rc.phase1, false);
  check_phase("phase2", rc.phase2, false);
  check_phase("pretrain", rc.pretrain, true);
  rc.pretrain_len = kv.get_i64("pretrain.len", rc.pretrain_len);
  rc.pretrain_task_frac = kv.get_f64("pretrain.task_frac", rc.pretrain_task_frac);
  MEMCOM_CHECK(rc.pretrain_len >= 8 && rc.pretrain_len <= rc.model.max_seq,
               "config: key 'pretrain.len': out of range");
  MEMCOM_CHECK(rc.pretrain_task_frac >= 0.0 && rc.pretrain_task_frac <= 1.0,
               "config: key 'pretrain.task_frac': must lie in [0, 1]");

  rc.eval_queries = kv.get_i64("eval.queries_per_class", rc.eval_queries);
  rc.eval_generation = kv.get_bool("eval.generation", rc.eval_generation);
  rc.eval_shuffled = kv.get_bool("eval.shuffled", rc.eval_shuffled);
  MEMCOM_CHECK(rc.eval_queries >= 1, "config: key 'eval.queries_per_class': must be >= 1");

  if (kv.has("sweep.ratios")) {
    rc.sweep_ratios.clear();
    for (const auto& s : kv.get_list("sweep.ratios", ""))
      rc.sweep_ratios.push_back(parse_i64("sweep.ratios", s));
  }
  for (int64_t r : rc.sweep_ratios)
    MEMCOM_CHECK(r >= 1, "config: key 'sweep.ratios': ratios must be >= 1");
  if (kv.has("sweep.seeds")) {
    rc.sweep_seeds.clear();
    for (const auto& s : kv.get_list("sweep.seeds", ""))
      rc.sweep_seeds.push_back(parse_u64("sweep.seeds", s));
  }
  if (kv.has("sweep.methods")) rc.sweep_methods = kv.get_list("sweep.methods", "");
  for (const auto& mth : rc.sweep_methods) method_from_string(mth);

  if (kv.has("ablate.variants")) rc.ablate_variants = kv.get_list("ablate.variants", "");
  for (const auto& v : rc.ablate_variants) variant_from_string(v);
  if (kv.has("ablate.seeds")) {
    rc.ablate_seeds.clear();
    for (const auto& s : kv.get_list("ablate.seeds", ""))
      rc.ablate_seeds.push_back(parse_u64("ablate.seeds", s));
  }
  rc.ablate_ratio = kv.get_i64("ablate.ratio", rc.ablate_ratio);
  MEMCOM_CHECK(rc.ablate_ratio >= 1, "config: key 'ablate.ratio': must be >= 1");
  return rc;
}

KvConfig RunConfig::to_kv() const {
  KvConfig kv;
  kv.set("model.n_layers", std::to_string(model.n_layers));
  kv.set("model.d_model", std::to_string(model.d_model));
  kv.set("model.n_heads", std::to_string(model.n_heads));
  kv.set("model.n_kv_heads", std::to_string(model.n_kv_heads));
  kv.set("model.head_dim", std::to_string(model.head_dim));
  kv.set("model.d_ff", std::to_string(model.d_ff));
  kv.set("model.vocab_size", std::to_string(model.vocab_size));
  kv.set("model.max_seq", std::to_string(model.max_seq));
  kv.set("model.rope_base", fmt_f64(model.rope_base));
  kv.set("model.norm_eps", fmt_f64(model.norm_eps));
  kv.set("seed", std::to_string(seed));
  kv.set("method", method);
  kv.set("memcom.variant", variant);
  kv.set("icae.lora_rank", std::to_string(lora_rank));
  kv.set("icae.lora_alpha", fmt_f64(lora_alpha));
  kv.set("target.init", target_init);
  kv.set("task.classes", std::to_string(task_classes));
  kv.set("task.k_in", std::to_string(task_k_in));
  kv.set("task.k_lab", std::to_string(task_k_lab));
  kv.set("task.rho", fmt_f64(task_rho));
  kv.set("task.seed", std::to_string(task_seed));
  kv.set("budget.t", std::to_string(budget_t));
  kv.set("budget.m", std::to_string(budget_m));
  write_phase(kv, "phase1", phase1);
  write_phase(kv, "phase2", phase2);
  write_phase(kv, "pretrain", pretrain);
  kv.set("pretrain.len", std::to_string(pretrain_len));
  kv.set("pretrain.task_frac", fmt_f64(pretrain_task_frac));
  kv.set("eval.queries_per_class", std::to_string(eval_queries));
  kv.set("eval.generation", eval_generation ? "true" : "false");
  kv.set("eval.shuffled", eval_shuffled ? "true" : "false");
  kv.set("sweep.ratios", join_i64(sweep_ratios));
  kv.set("sweep.seeds", join_u64(sweep_seeds));
  kv.set("sweep.methods", join(sweep_methods));
  kv.set("ablate.variants", join(ablate_variants));
  kv.set("ablate.seeds", join_u64(ablate_seeds));
  kv.set("ablate.ratio", std::to_string(ablate_ratio));
  return kv;
}

PhaseConfig RunConfig::phase1_pc() const { return to_pc(phase1, 1); }
PhaseConfig RunConfig::phase2_pc() const { return to_pc(phase2, 2); }
PhaseConfig RunConfig::pretrain_pc() const { return to_pc(pretrain, 1); }

ClassificationTask RunConfig::make_task() const {
  Rng rng(task_seed);
  return gen_task(vocab(), static_cast<int32_t>(task_classes), static_cast<int32_t>(task_k_in),
                  static_cast<int32_t>(task_k_lab), task_rho, rng);
}

CrossAttnVariant variant_from_string(const std::string& s) {
  if (s == "one_head") return CrossAttnVariant::kOneHead;
  if (s == "mha") return CrossAttnVariant::kMha;
  if (s == "mqa") return CrossAttnVariant::kMqa;
  if (s == "mqa_self_init") return CrossAttnVariant::kMqaSelfInit;
  throw ConfigError("config: unknown cross-attention variant '" + s + "'");
}

IcaeCapacity capacity_for(MethodId id) {
  switch (id) {
    case MethodId::kIcae: return IcaeCapacity::kIcae;
    case MethodId::kIcaePlus: return IcaeCapacity::kIcaePlus;
    case MethodId::kIcaePp: return IcaeCapacity::kIcaePp;
    default: break;
  }
  throw ConfigError(std::string("config: method ") + to_string(id) +
                    " has no capacity-ladder rung");
}

std::string run_id_for(const KvConfig& resolved) {
  std::string text = resolved.dump();
  return Sha256::hex(Sha256::digest(text.data(), text.size())).substr(0, 12);
}

// ---------------------------------------------------------------------------
// RunDir

std::string RunDir::run_root() {
  const char* env = std::getenv("MEMCOM_RUN_ROOT");
  return (env != nullptr && env[0] != '\0') ? env : "runs";
}

RunDir RunDir::create(const std::string& path, bool overwrite) {
  fs::path p(path);
  if (fs::exists(p)) {
    MEMCOM_CHECK(fs::is_directory(p), "run: '" + path + "' exists and is not a directory");
    MEMCOM_CHECK(!fs::exists(p / "lock"),
                 "run: '" + path + "' is locked by another command");
    bool empty = fs::directory_iterator(p) == fs::directory_iterator();
    if (!empty) {
      MEMCOM_CHECK(overwrite,
                   "run: '" + path + "' already holds a run; pass --overwrite to replace it");
      fs::remove_all(p);
    }
  }
  std::error_code ec;
  fs::create_directories(p, ec);
  MEMCOM_CHECK_IO(fs::is_directory(p), "run: cannot create '" + path + "'");

  int fd = ::open((p / "lock").c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  MEMCOM_CHECK(fd >= 0, "run: '" + path + "' is locked by another command");
  std::string pid = std::to_string(::getpid()) + "\n";
  ssize_t written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
  MEMCOM_CHECK_IO(written == static_cast<ssize_t>(pid.size()),
                  "run: cannot write lock in '" + path + "'");

  RunDir rd;
  rd.path_ = path;
  rd.locked_ = true;
  return rd;
}

RunDir::RunDir(RunDir&& other) noexcept : path_(std::move(other.path_)), locked_(other.locked_) {
  other.locked_ = false;
}

RunDir::~RunDir() {
  if (locked_) {
    std::error_code ec;
    fs::remove(fs::path(path_) / "lock", ec);
  }
}

std::string RunDir::sub(const std::string& rel) const {
  fs::path full = fs::path(path_) / rel;
  if (full.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(full.parent_path(), ec);
  }
  return full.string();
}

void RunDir::write_text(const std::string& rel, const std::string& text) {
  std::string full = sub(rel);
  MEMCOM_CHECK(!fs::exists(full),
               "run: '" + rel + "' already exists; run directories are append-only");
  std::ofstream out(full, std::ios::binary);
  MEMCOM_CHECK_IO(out.good(), "run: cannot create '" + full + "'");
  out << text;
  MEMCOM_CHECK_IO(out.good(), "run: write failed for '" + full + "'");
}

// ---------------------------------------------------------------------------
// Metrics

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {}

void MetricsWriter::record(const std::string& run_id, const std::string& kind,
                           const nlohmann::ordered_json& payload) {
  nlohmann::ordered_json line;
  line["timestamp"] = iso_timestamp();
  line["run_id"] = run_id;
  line["kind"] = kind;
  for (const auto& [k, v] : payload.items()) line[k] = v;
  std::ofstream out(path_, std::ios::app);
  MEMCOM_CHECK_IO(out.good(), "metrics: cannot open '" + path_ + "'");
  out << line.dump() << "\n";
  MEMCOM_CHECK_IO(out.good(), "metrics: write failed for '" + path_ + "'");
}

std::string iso_timestamp() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string strip_timestamps(const std::string& text) {
  static const std::string key = "\"timestamp\":\"";
  std::string out;
  size_t i = 0;
  while (true) {
    size_t at = text.find(key, i);
    if (at == std::string::npos) {
      out.append(text, i, text.size() - i);
      return out;
    }
    out.append(text, i, at - i);
    out += key;
    size_t end = text.find('"', at + key.size());
    if (end == std::string::npos) {
      i = at + key.size();
      continue;
    }
    i = end;  // keep the closing quote, drop the value
  }
}

// ---------------------------------------------------------------------------
// Token files

std::vector<int32_t> read_token_file(const std::string& path) {
  std::ifstream in(path);
  MEMCOM_CHECK_IO(in.good(), "tokens: cannot open '" + path + "'");
  std::vector<int32_t> out;
  std::string word;
  while (in >> word) out.push_back(static_cast<int32_t>(parse_i64("token file " + path, word)));
  MEMCOM_CHECK(!out.empty(), "tokens: '" + path + "' holds no tokens");
  return out;
}

std::vector<std::vector<int32_t>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  MEMCOM_CHECK_IO(in.good(), "tokens: cannot open '" + path + "'");
  std::vector<std::vector<int32_t>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<int32_t> row;
    std::string word;
    while (ls >> word)
      row.push_back(static_cast<int32_t>(parse_i64("token file " + path, word)));
    if (!row.empty()) out.push_back(std::move(row));
  }
  MEMCOM_CHECK(!out.empty(), "tokens: '" + path + "' holds no tokens");
  return out;
}

void write_token_file(const std::string& path, const std::vector<int32_t>& tokens) {
  std::ofstream out(path);
  MEMCOM_CHECK_IO(out.good(), "tokens: cannot create '" + path + "'");
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out << " ";
    out << tokens[i];
  }
  out << "\n";
  MEMCOM_CHECK_IO(out.good(), "tokens: write failed for '" + path + "'");
}

}  // namespace memcom
