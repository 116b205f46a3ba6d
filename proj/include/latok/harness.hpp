#pragma once
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "latok/model.hpp"
#include "latok/objectives.hpp"
#include "latok/sampler.hpp"
#include "latok/tasks.hpp"

namespace latok {

// One flat key space shared by the config file and the CLI flags; a config is
// a text file of `key = value` lines, flags override file entries.
struct ExperimentConfig {
  // task selection and desk-scale overrides (0 / -1 keep the task default)
  std::string task = "sudoku-gen";
  int box = 0, seq_len = 0, holes = -1, houses = 0, attrs = 0, clues = 0, operands = 0;
  // model; explicit dims win over the preset
  std::string preset = "tiny";
  int hidden = 0, layers = 0, heads = 0, mlp_ratio = 0;
  // objective / training
  std::string objective = "mdm";
  int window = 1;  // next-token window width for the windowed objective
  int epochs = 20, batch = 32;
  double lr = 3e-4, weight_decay = 0.01, warmup_frac = 0.01;
  std::string decay = "none";  // none | cosine; both share the warmup ramp
  int val_count = 256;
  std::string dataset, val_dataset, resume;
  // sampling / evaluation
  std::string sampler = "mdm";
  std::string decode;  // greedy | sample; empty picks the task default
  double temperature = 1.0;
  std::string latents = "0";  // comma list of latent counts; "all" allowed
  int k = 8;                  // candidate set size, shared by every top-prob variant
  int episodes = 500;
  std::string seeds;  // eval seeds, comma list; empty falls back to seed
  std::string checkpoint, trace;
  // generation / io
  int count = 1000;
  uint64_t seed = 1;
  std::string out = "out";
};

namespace detail {

inline long long parse_ll(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error("config: bad number for " + key + ": '" + v + "'");
  }
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace detail

inline void apply_config_kv(ExperimentConfig& c, const std::string& key,
                            const std::string& value) {
  auto ll = [&] { return detail::parse_ll(key, value); };
  if (key == "task") c.task = value;
  else if (key == "box") c.box = (int)ll();
  else if (key == "seq_len") c.seq_len = (int)ll();
  else if (key == "holes") c.holes = (int)ll();
  else if (key == "houses") c.houses = (int)ll();
  else if (key == "attrs") c.attrs = (int)ll();
  else if (key == "clues") c.clues = (int)ll();
  else if (key == "operands") c.operands = (int)ll();
  else if (key == "preset") c.preset = value;
  else if (key == "hidden") c.hidden = (int)ll();
  else if (key == "layers") c.layers = (int)ll();
  else if (key == "heads") c.heads = (int)ll();
  else if (key == "mlp_ratio") c.mlp_ratio = (int)ll();
  else if (key == "objective") c.objective = value;
  else if (key == "window") c.window = (int)ll();
  else if (key == "epochs") c.epochs = (int)ll();
  else if (key == "batch") c.batch = (int)ll();
  else if (key == "lr") c.lr = detail::parse_double(key, value);
  else if (key == "weight_decay") c.weight_decay = detail::parse_double(key, value);
  else if (key == "warmup_frac") c.warmup_frac = detail::parse_double(key, value);
  else if (key == "decay") c.decay = value;
  else if (key == "val_count") c.val_count = (int)ll();
  else if (key == "dataset") c.dataset = value;
  else if (key == "val_dataset") c.val_dataset = value;
  else if (key == "resume") c.resume = value;
  else if (key == "sampler") c.sampler = value;
  else if (key == "decode") c.decode = value;
  else if (key == "temperature") c.temperature = detail::parse_double(key, value);
  else if (key == "latents") c.latents = value;
  else if (key == "k") c.k = (int)ll();
  else if (key == "episodes") c.episodes = (int)ll();
  else if (key == "seeds") c.seeds = value;
  else if (key == "checkpoint") c.checkpoint = value;
  else if (key == "trace") c.trace = value;
  else if (key == "count") c.count = (int)ll();
  else if (key == "seed") c.seed = (uint64_t)ll();
  else if (key == "out") c.out = value;
  else throw std::runtime_error("config: unknown key '" + key + "'");
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key = value");
    apply_config_kv(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// Latent sweep entries: non-negative counts, or "all" for every remaining
// position. "all" maps onto the sequence length, which the samplers clamp.
inline std::vector<std::pair<std::string, int>> parse_latents(const std::string& list, int L) {
  std::vector<std::pair<std::string, int>> out;
  for (const std::string& item : detail::split_list(list)) {
    if (item == "all") out.emplace_back(item, L);
    else {
      long long v = detail::parse_ll("latents", item);
      if (v < 0) throw std::runtime_error("config: latents entries must be >= 0");
      out.emplace_back(item, (int)v);
    }
  }
  if (out.empty()) throw std::runtime_error("config: latents list is empty");
  return out;
}

inline std::vector<uint64_t> parse_seeds(const ExperimentConfig& c) {
  if (c.seeds.empty()) return {c.seed};
  std::vector<uint64_t> out;
  for (const std::string& item : detail::split_list(c.seeds))
    out.push_back((uint64_t)detail::parse_ll("seeds", item));
  return out;
}

namespace detail {

inline const std::map<std::string, std::vector<std::string>>& sampler_compat() {
  static const std::map<std::string, std::vector<std::string>> compat = {
      {"mdm", {"mdm", "adaptive_mdm"}},
      {"sidm", {"sidm", "adaptive_sidm"}},
      {"scdm", {"scdm", "scdm_ltm", "adaptive_scdm", "adaptive_ltm"}},
      {"armtp", {"armtp", "armtp_window"}},
      {"arntp", {"ar"}},
      {"ar", {"ar"}},
  };
  return compat;
}

}  // namespace detail

// A sampler only makes sense on weights trained with the matching attention
// layout. Evaluation rejects incompatible pairs before any compute happens;
// training ignores the sampler entirely.
inline void check_sampler_pair(const ExperimentConfig& c) {
  auto it = detail::sampler_compat().find(c.objective);
  if (it == detail::sampler_compat().end())
    throw std::runtime_error("config: unknown objective '" + c.objective + "'");
  bool ok = false;
  for (const std::string& s : it->second) ok = ok || s == c.sampler;
  if (!ok)
    throw std::runtime_error("config: sampler '" + c.sampler + "' incompatible with objective '" +
                             c.objective + "'");
}

inline void validate_config(const ExperimentConfig& c) {
  if (!detail::sampler_compat().count(c.objective))
    throw std::runtime_error("config: unknown objective '" + c.objective + "'");
  if (!c.decode.empty() && c.decode != "greedy" && c.decode != "sample")
    throw std::runtime_error("config: decode must be greedy or sample");
  if (c.epochs < 1 || c.batch < 1 || c.episodes < 1 || c.k < 1 || c.window < 1)
    throw std::runtime_error("config: epochs, batch, episodes, k, window must be >= 1");
  if (c.lr <= 0 || c.temperature <= 0)
    throw std::runtime_error("config: lr and temperature must be positive");
  if (c.warmup_frac < 0 || c.warmup_frac > 1)
    throw std::runtime_error("config: warmup_frac must lie in [0,1]");
  if (c.decay != "none" && c.decay != "cosine")
    throw std::runtime_error("config: decay must be none or cosine");
}

inline TaskSpec config_task(const ExperimentConfig& c) {
  TaskSpec base = task_by_name(c.task);
  int box = c.box > 0 ? c.box : base.box;
  switch (base.kind) {
    case TaskSpec::SUDOKU_GEN: {
      int n = sudoku_side(box);
      int L = c.seq_len > 0 ? c.seq_len : (c.box > 0 ? n * n : base.seq_len);
      return task_sudoku_gen(box, L, base.name);
    }
    case TaskSpec::SUDOKU_PUZZLE: {
      int n = sudoku_side(box);
      int holes = c.holes >= 0 ? c.holes : base.holes;
      int L = c.seq_len > 0 ? c.seq_len : (c.box > 0 ? 2 * n * n + 3 : base.seq_len);
      return task_sudoku_puzzle(box, L, holes);
    }
    case TaskSpec::ZEBRA: {
      int H = c.houses > 0 ? c.houses : base.houses;
      int K = c.attrs > 0 ? c.attrs : base.attrs;
      int cl = c.clues > 0 ? c.clues : base.clues;
      bool dims_changed = c.houses > 0 || c.attrs > 0 || c.clues > 0;
      int L = c.seq_len > 0 ? c.seq_len : (dims_changed ? 3 + 8 * cl + H * K : base.seq_len);
      return task_zebra(H, K, cl, L);
    }
    case TaskSpec::COUNTDOWN: {
      int ops = c.operands > 0 ? c.operands : base.operands;
      int L = c.seq_len > 0 ? c.seq_len
                            : (c.operands > 0 ? 3 * ops + 4 + 9 * (ops - 1) : base.seq_len);
      return task_countdown(ops, L);
    }
  }
  throw std::runtime_error("config_task: unreachable");
}

inline ModelConfig config_model(const ExperimentConfig& c, const TaskSpec& spec) {
  if (c.hidden > 0 || c.layers > 0 || c.heads > 0) {
    if (c.hidden <= 0 || c.layers < 0 || c.heads <= 0)
      throw std::runtime_error("config: hidden, layers, heads must be given together");
    ModelConfig m{spec.vocab, spec.seq_len, c.hidden,
                  c.heads,    c.layers,     c.mlp_ratio > 0 ? c.mlp_ratio : 4};
    m.validate();
    return m;
  }
  return preset_config(c.preset, spec.vocab, spec.seq_len);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {{"task", c.task},         {"box", c.box},
          {"seq_len", c.seq_len},   {"holes", c.holes},
          {"houses", c.houses},     {"attrs", c.attrs},
          {"clues", c.clues},       {"operands", c.operands},
          {"preset", c.preset},     {"hidden", c.hidden},
          {"layers", c.layers},     {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio}, {"objective", c.objective},
          {"window", c.window},     {"epochs", c.epochs},
          {"batch", c.batch},       {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"warmup_frac", c.warmup_frac},
          {"decay", c.decay},       {"val_count", c.val_count},
          {"dataset", c.dataset},   {"val_dataset", c.val_dataset},
          {"sampler", c.sampler},   {"decode", c.decode},
          {"temperature", c.temperature}, {"latents", c.latents},
          {"k", c.k},               {"episodes", c.episodes},
          {"seeds", c.seeds},       {"count", c.count},
          {"seed", c.seed},         {"out", c.out}};
}

// ---------------------------------------------------------------------------
// gen

inline std::string run_gen(const ExperimentConfig& c) {
  TaskSpec spec = config_task(c);
  if (c.count < 0) throw std::runtime_error("gen: count must be >= 0");
  auto ds = generate_dataset(spec, c.count, c.seed);
  std::filesystem::path p(c.out);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  write_dataset(c.out, spec, ds);
  return c.out;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
  std::string best_path, last_path, log_path;
  int epochs_run = 0, best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  double last_train = 0, last_val = 0;
};

namespace detail {

template <typename S>
LossResult<S> config_loss(const ModelT<S>& model, const std::vector<std::vector<int>>& rows,
                          const ExperimentConfig& c, int mask_id, Rng& rng) {
  if (c.objective == "mdm") return loss_mdm(model, rows, mask_id, rng);
  if (c.objective == "sidm") return loss_sidm(model, rows, mask_id, rng);
  if (c.objective == "scdm") return loss_scdm(model, rows, mask_id, rng);
  if (c.objective == "armtp") return loss_armtp(model, rows, mask_id, rng);
  if (c.objective == "arntp") return loss_arntp(model, rows, mask_id, c.window, rng);
  if (c.objective == "ar") return loss_ar_standard(model, rows, mask_id);
  throw std::runtime_error("config: unknown objective '" + c.objective + "'");
}

// Per-epoch rng streams: resuming at an epoch boundary replays the exact
// trajectory of an uninterrupted run.
constexpr uint64_t kStreamOrder = 0xE0000000ull;
constexpr uint64_t kStreamLoss = 0xA0000000ull;
constexpr uint64_t kStreamVal = 0xF0000000ull;
constexpr uint64_t kStreamEvalInstance = 0x10000000ull;

}  // namespace detail

inline TrainResult run_train(const ExperimentConfig& c) {
  validate_config(c);
  TaskSpec spec = config_task(c);
  if (c.dataset.empty()) throw std::runtime_error("train: dataset path required (run gen first)");
  auto insts = read_dataset(c.dataset, spec);

  std::vector<std::vector<int>> train_rows, val_rows;
  if (!c.val_dataset.empty()) {
    for (const auto& i : insts) train_rows.push_back(i.tokens);
    for (const auto& i : read_dataset(c.val_dataset, spec)) val_rows.push_back(i.tokens);
  } else {
    if ((int)insts.size() <= c.val_count)
      throw std::runtime_error("train: dataset too small for the validation split");
    for (size_t i = 0; i + (size_t)c.val_count < insts.size(); ++i)
      train_rows.push_back(insts[i].tokens);
    for (size_t i = insts.size() - (size_t)c.val_count; i < insts.size(); ++i)
      val_rows.push_back(insts[i].tokens);
  }
  if (train_rows.empty() || val_rows.empty())
    throw std::runtime_error("train: empty train or validation split");

  ModelConfig mc = config_model(c, spec);
  ModelT<float> model;
  model.cfg = mc;
  model.build();
  AdamWT<float> opt;
  opt.lr = (float)c.lr;
  opt.weight_decay = (float)c.weight_decay;
  int start_epoch = 0;

  if (!c.resume.empty()) {
    auto loaded = load_checkpoint<float>(c.resume);
    if (!(loaded.model.cfg == mc))
      throw std::runtime_error("train: resume checkpoint does not match the configured model");
    if (!loaded.has_optimizer)
      throw std::runtime_error("train: resume checkpoint has no optimizer state");
    model = std::move(loaded.model);
    opt = std::move(loaded.opt);
    opt.lr = (float)c.lr;  // config stays authoritative for hyperparameters
    opt.weight_decay = (float)c.weight_decay;
    start_epoch = loaded.meta.at("epoch").get<int>();
    if (start_epoch >= c.epochs)
      throw std::runtime_error("train: resume epoch is past the configured epoch count");
  } else {
    model.init(c.seed);
    auto params = model.params();
    opt.attach(params);
  }
  auto params = model.params();

  std::filesystem::create_directories(c.out);
  TrainResult res;
  res.best_path = c.out + "/ckpt_best.bin";
  res.last_path = c.out + "/ckpt_last.bin";
  res.log_path = c.out + "/train_log.ndjson";
  std::ofstream log(res.log_path, start_epoch ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot open " + res.log_path);

  int steps_per_epoch = ((int)train_rows.size() + c.batch - 1) / c.batch;
  long long total_steps = (long long)steps_per_epoch * c.epochs;
  bool cosine = c.decay == "cosine";

  auto val_loss = [&] {
    // Fresh stream each epoch: every validation pass sees identical masking.
    Rng vrng(c.seed, detail::kStreamVal);
    double total = 0;
    int batches = 0;
    for (size_t at = 0; at < val_rows.size(); at += (size_t)c.batch) {
      std::vector<std::vector<int>> rows(
          val_rows.begin() + (long)at,
          val_rows.begin() + (long)std::min(val_rows.size(), at + (size_t)c.batch));
      total += (double)detail::config_loss(model, rows, c, spec.mask_id, vrng).loss.data()[0];
      ++batches;
    }
    return total / batches;
  };

  if (start_epoch > 0) {
    // Rebuild the best-so-far marker from the resumed log.
    std::ifstream prev(res.log_path);
    std::string line;
    while (std::getline(prev, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      double v = j.at("val_loss").get<double>();
      if (v < res.best_val) {
        res.best_val = v;
        res.best_epoch = j.at("epoch").get<int>();
      }
    }
  }

  for (int epoch = start_epoch; epoch < c.epochs; ++epoch) {
    Rng order_rng(c.seed, detail::kStreamOrder + (uint64_t)epoch);
    Rng loss_rng(c.seed, detail::kStreamLoss + (uint64_t)epoch);
    std::vector<int> order(train_rows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
    order_rng.shuffle(order);

    double train_total = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      std::vector<std::vector<int>> rows;
      for (int b = step * c.batch; b < std::min((step + 1) * c.batch, (int)order.size()); ++b)
        rows.push_back(train_rows[(size_t)order[(size_t)b]]);
      model.zero_grad();
      TapeT<float> tape;
      TapeT<float>::Scope scope(tape);
      LossResult<float> out = detail::config_loss(model, rows, c, spec.mask_id, loss_rng);
      tape.backward(out.loss);
      long long gstep = (long long)epoch * steps_per_epoch + step;
      float lr_scale = (float)(cosine ? cosine_scale(gstep, total_steps, c.warmup_frac)
                                      : warmup_scale(gstep, total_steps, c.warmup_frac));
      opt.step(params, lr_scale);
      train_total += (double)out.loss.data()[0];
    }
    double train_mean = train_total / steps_per_epoch;
    double val = val_loss();

    nlohmann::json meta = {{"epoch", epoch + 1},
                           {"train_loss", train_mean},
                           {"val_loss", val},
                           {"config", config_to_json(c)}};
    save_checkpoint(res.last_path, model, &opt, meta);
    if (val < res.best_val) {
      res.best_val = val;
      res.best_epoch = epoch + 1;
      save_checkpoint(res.best_path, model, &opt, meta);
    }
    log << nlohmann::json({{"epoch", epoch + 1},
                           {"train_loss", train_mean},
                           {"val_loss", val},
                           {"examples", train_rows.size()},
                           {"steps", steps_per_epoch}})
               .dump()
        << "\n";
    log.flush();
    res.epochs_run = epoch + 1 - start_epoch;
    res.last_train = train_mean;
    res.last_val = val;
  }
  return res;
}

// ---------------------------------------------------------------------------
// eval

struct MetricsRow {
  std::string task, variant, n_label, decode;
  int k = 0;
  uint64_t seed = 0;
  int episodes = 0;
  double accuracy = 0;
  double soft_loss = std::numeric_limits<double>::quiet_NaN();  // board tasks only
  double tokens_mean = 0, rel_cost = 0;
};

namespace detail {

struct EpisodeOutcome {
  bool ok = false;
  std::string reason;
  double soft = std::numeric_limits<double>::quiet_NaN();
  uint64_t tokens = 0;
  int steps = 0;
  double rel = 0;
};

inline bool sampler_sweeps_latents(const std::string& s) {
  return s == "scdm_ltm" || s == "adaptive_ltm" || s == "armtp_window";
}

inline int eval_workers() {
  if (const char* env = std::getenv("LATOK_WORKERS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v < 1 || v > 256) throw std::runtime_error("LATOK_WORKERS must lie in [1,256]");
    return (int)v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return (int)std::max(1u, std::min(8u, hw));
}

inline SampleRunReport run_episode_sampler(const ExperimentConfig& c, Predictor& pred,
                                           const SequenceState& st, int n,
                                           const DecodeOptions& opts, Rng& rng) {
  auto planned = [&](PlannedVariant v) {
    Schedule pi = random_schedule_for(st, rng);
    return sample_planned(pred, st, pi, v, opts, rng);
  };
  if (c.sampler == "mdm") return planned(PlannedVariant::MDM);
  if (c.sampler == "sidm") return planned(PlannedVariant::SIDM);
  if (c.sampler == "scdm") return planned(PlannedVariant::SCDM);
  if (c.sampler == "scdm_ltm") {
    Schedule pi = random_schedule_for(st, rng);
    return sample_scdm_ltm(pred, st, pi, n, opts, rng);
  }
  if (c.sampler == "adaptive_mdm")
    return sample_adaptive_topprob(pred, st, PlannedVariant::MDM, c.k, opts, rng);
  if (c.sampler == "adaptive_sidm")
    return sample_adaptive_topprob(pred, st, PlannedVariant::SIDM, c.k, opts, rng);
  if (c.sampler == "adaptive_scdm")
    return sample_adaptive_topprob(pred, st, PlannedVariant::SCDM, c.k, opts, rng);
  if (c.sampler == "adaptive_ltm") return sample_adaptive_ltm(pred, st, n, c.k, opts, rng);
  if (c.sampler == "ar") return sample_autoregressive(pred, st, ArVariant::AR, 0, opts, rng);
  if (c.sampler == "armtp")
    return sample_autoregressive(pred, st, ArVariant::ARMTP, 0, opts, rng);
  if (c.sampler == "armtp_window") {
    if (n < 1) throw std::runtime_error("eval: armtp_window needs latents >= 1");
    return sample_autoregressive(pred, st, ArVariant::ARMTP_WINDOW, n, opts, rng);
  }
  throw std::runtime_error("config: unknown sampler '" + c.sampler + "'");
}

}  // namespace detail

inline std::string resolve_decode(const ExperimentConfig& c, const TaskSpec& spec) {
  if (!c.decode.empty()) return c.decode;
  return spec.kind == TaskSpec::COUNTDOWN ? "greedy" : "sample";
}

inline std::vector<MetricsRow> run_eval(const ExperimentConfig& c) {
  validate_config(c);
  check_sampler_pair(c);
  TaskSpec spec = config_task(c);
  if (c.checkpoint.empty()) throw std::runtime_error("eval: checkpoint path required");
  auto loaded = load_checkpoint<float>(c.checkpoint);
  if (loaded.model.cfg.vocab != spec.vocab)
    throw std::runtime_error("eval: vocabulary mismatch between checkpoint and task");
  if (loaded.model.cfg.max_len < spec.seq_len)
    throw std::runtime_error("eval: checkpoint max_len below task seq_len");
  // The checkpoint defines the model; explicit dims in the config act as a
  // guard against evaluating the wrong file.
  if (c.hidden > 0 || c.layers > 0 || c.heads > 0) {
    ModelConfig want = config_model(c, spec);
    if (!(loaded.model.cfg == want))
      throw std::runtime_error("eval: checkpoint does not match the configured model");
  }
  const ModelT<float>& model = loaded.model;

  std::string decode = resolve_decode(c, spec);
  DecodeOptions opts;
  opts.greedy = decode == "greedy";
  opts.temperature = c.temperature;

  auto latents = detail::sampler_sweeps_latents(c.sampler)
                     ? parse_latents(c.latents, spec.seq_len)
                     : std::vector<std::pair<std::string, int>>{{"-", 0}};
  std::vector<uint64_t> seeds = parse_seeds(c);
  bool board_task = spec.kind == TaskSpec::SUDOKU_GEN;

  std::ofstream trace;
  if (!c.trace.empty()) {
    std::filesystem::path p(c.trace);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    trace.open(c.trace, std::ios::trunc);
    if (!trace) throw std::runtime_error("eval: cannot open trace " + c.trace);
  }

  std::vector<MetricsRow> rows;
  int workers = detail::eval_workers();
  for (uint64_t seed : seeds) {
    for (const auto& [n_label, n] : latents) {
      std::vector<detail::EpisodeOutcome> outcomes((size_t)c.episodes);
      std::atomic<int> next{0};
      std::atomic<bool> failed{false};
      std::string first_error;
      std::mutex error_mu;
      auto work = [&] {
        TransformerPredictor pred(model);
        for (;;) {
          int e = next.fetch_add(1);
          if (e >= c.episodes || failed.load()) break;
          try {
            Rng inst_rng(seed, detail::kStreamEvalInstance + (uint64_t)e);
            PuzzleInstance inst = task_generate(spec, inst_rng);
            std::vector<uint8_t> clean((size_t)spec.seq_len, 0);
            for (int i = 0; i < inst.prompt_len; ++i) clean[(size_t)i] = 1;
            SequenceState st = make_prompt_state(inst.tokens, clean, spec.mask_id);
            Rng rng(seed, (uint64_t)e);  // per-episode decode stream
            SampleRunReport rep = detail::run_episode_sampler(c, pred, st, n, opts, rng);
            detail::EpisodeOutcome& o = outcomes[(size_t)e];
            auto v = validate_sample(spec, rep.tokens);
            o.ok = v.ok;
            o.reason = v.reason;
            if (board_task) o.soft = task_soft_loss(spec, rep.tokens);
            o.tokens = rep.tokens_processed;
            o.steps = rep.steps;
            uint64_t masked = (uint64_t)(spec.seq_len - inst.prompt_len);
            o.rel = (double)rep.tokens_processed / ((double)masked * spec.seq_len);
          } catch (const std::exception& ex) {
            std::lock_guard<std::mutex> lock(error_mu);
            if (first_error.empty()) first_error = ex.what();
            failed.store(true);
            break;
          }
        }
      };
      if (workers == 1) {
        work();
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
      }
      if (failed.load()) throw std::runtime_error("eval: episode failed: " + first_error);

      MetricsRow row;
      row.task = spec.name;
      row.variant = c.sampler;
      row.n_label = n_label;
      row.decode = decode;
      row.k = c.k;
      row.seed = seed;
      row.episodes = c.episodes;
      double acc = 0, soft = 0, tok = 0, rel = 0;
      for (const auto& o : outcomes) {
        acc += o.ok;
        soft += board_task ? o.soft : 0;
        tok += (double)o.tokens;
        rel += o.rel;
      }
      row.accuracy = acc / c.episodes;
      if (board_task) row.soft_loss = soft / c.episodes;
      row.tokens_mean = tok / c.episodes;
      row.rel_cost = rel / c.episodes;
      rows.push_back(row);

      if (trace.is_open()) {
        for (int e = 0; e < c.episodes; ++e) {
          const auto& o = outcomes[(size_t)e];
          nlohmann::json line = {{"seed", seed},       {"variant", c.sampler},
                                 {"n", n_label},       {"episode", e},
                                 {"ok", o.ok},         {"reason", o.reason},
                                 {"tokens", o.tokens}, {"steps", o.steps}};
          trace << line.dump() << "\n";
        }
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// metrics csv

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

constexpr const char* kMetricsHeader =
    "task,variant,n,k,decode,seed,episodes,accuracy,soft_loss,tokens_processed,rel_cost";

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << kMetricsHeader << "\n";
  for (const MetricsRow& r : rows) {
    out << r.task << ',' << r.variant << ',' << r.n_label << ',' << r.k << ',' << r.decode << ','
        << r.seed << ',' << r.episodes << ',' << detail::fmt(r.accuracy) << ','
        << (std::isnan(r.soft_loss) ? std::string() : detail::fmt(r.soft_loss)) << ','
        << detail::fmt(r.tokens_mean) << ',' << detail::fmt(r.rel_cost) << "\n";
  }
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_metrics_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader)
    throw std::runtime_error("read_metrics_csv: bad header in " + path);
  std::vector<MetricsRow> rows;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cur;
    std::istringstream ls(line);
    while (std::getline(ls, cur, ',')) f.push_back(cur);
    if (line.back() == ',') f.push_back("");
    if (f.size() != 11)
      throw std::runtime_error("read_metrics_csv: bad field count at line " +
                               std::to_string(lineno));
    MetricsRow r;
    r.task = f[0];
    r.variant = f[1];
    r.n_label = f[2];
    r.k = (int)detail::parse_ll("k", f[3]);
    r.decode = f[4];
    r.seed = (uint64_t)detail::parse_ll("seed", f[5]);
    r.episodes = (int)detail::parse_ll("episodes", f[6]);
    r.accuracy = detail::parse_double("accuracy", f[7]);
    r.soft_loss = f[8].empty() ? std::numeric_limits<double>::quiet_NaN()
                               : detail::parse_double("soft_loss", f[8]);
    r.tokens_mean = detail::parse_double("tokens_processed", f[9]);
    r.rel_cost = detail::parse_double("rel_cost", f[10]);
    rows.push_back(r);
  }
  return rows;
}

// Cost ratios are quoted truncated to hundredths, not rounded: a ratio is an
// upper-bound style figure, so 0.5078 still reads as the 0.50x family.
inline std::string format_rel_cost(double r) {
  double t = std::floor(r * 100.0 + 1e-9) / 100.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2fx", t);
  return buf;
}

// ---------------------------------------------------------------------------
// report

// Spearman rank correlation with tie-averaged ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::runtime_error("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    size_t n = v.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      double avg = (double)(i + j) / 2.0 + 1.0;  // mean of 1-based positions i..j
      for (size_t k2 = i; k2 <= j; ++k2) r[idx[k2]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= (double)rx.size();
  my /= (double)ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0;  // a constant series carries no order information
  return sxy / std::sqrt(sxx * syy);
}

struct ReportGroup {
  std::string task, variant, n_label, decode;
  int k = 0;
  int seeds = 0;
  double acc_mean = 0, acc_stderr = 0;
  double soft_mean = std::numeric_limits<double>::quiet_NaN();
  double soft_stderr = std::numeric_limits<double>::quiet_NaN();
  double tokens_mean = 0, rel_mean = 0;
};

struct ReportResult {
  std::vector<ReportGroup> groups;
  // task/variant families with a latent sweep: per-seed and mean Spearman
  // rho of accuracy against latent count.
  struct Trend {
    std::string task, variant, decode;
    int k = 0;
    std::vector<double> per_seed_rho;
    double mean_rho = 0;
  };
  std::vector<Trend> trends;
  std::string summary;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / (double)v.size();
}

inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (double)(v.size() - 1)) / std::sqrt((double)v.size());
}

inline double latent_order(const std::string& label) {
  if (label == "all") return std::numeric_limits<double>::max();
  return (double)parse_ll("latents", label);
}

}  // namespace detail

inline ReportResult run_report(const std::string& csv_path, const std::string& out_dir) {
  auto rows = read_metrics_csv(csv_path);
  if (rows.empty()) throw std::runtime_error("report: no rows in " + csv_path);
  std::filesystem::create_directories(out_dir);

  // Group rows over seeds; keys keep first-seen order for stable output.
  using Key = std::tuple<std::string, std::string, std::string, std::string, int>;
  std::vector<Key> order;
  std::map<Key, std::vector<const MetricsRow*>> by_key;
  for (const MetricsRow& r : rows) {
    Key key{r.task, r.variant, r.n_label, r.decode, r.k};
    if (!by_key.count(key)) order.push_back(key);
    by_key[key].push_back(&r);
  }

  ReportResult res;
  for (const Key& key : order) {
    const auto& group = by_key[key];
    ReportGroup g;
    std::tie(g.task, g.variant, g.n_label, g.decode, g.k) = key;
    g.seeds = (int)group.size();
    std::vector<double> acc, soft, tok, rel;
    for (const MetricsRow* r : group) {
      acc.push_back(r->accuracy);
      tok.push_back(r->tokens_mean);
      rel.push_back(r->rel_cost);
      if (!std::isnan(r->soft_loss)) soft.push_back(r->soft_loss);
    }
    g.acc_mean = detail::mean_of(acc);
    g.acc_stderr = detail::stderr_of(acc);
    g.tokens_mean = detail::mean_of(tok);
    g.rel_mean = detail::mean_of(rel);
    if (!soft.empty()) {
      g.soft_mean = detail::mean_of(soft);
      g.soft_stderr = detail::stderr_of(soft);
    }
    res.groups.push_back(g);
  }

  // Latent-count trends: per seed, rho(latent order, accuracy).
  using FamKey = std::tuple<std::string, std::string, std::string, int>;
  std::vector<FamKey> fam_order;
  std::map<FamKey, std::map<uint64_t, std::vector<std::pair<double, double>>>> fams;
  for (const MetricsRow& r : rows) {
    if (r.n_label == "-") continue;
    FamKey fk{r.task, r.variant, r.decode, r.k};
    if (!fams.count(fk)) fam_order.push_back(fk);
    fams[fk][r.seed].emplace_back(detail::latent_order(r.n_label), r.accuracy);
  }
  for (const FamKey& fk : fam_order) {
    auto& per_seed = fams[fk];
    ReportResult::Trend tr;
    std::tie(tr.task, tr.variant, tr.decode, tr.k) = fk;
    for (auto& [seed, pts] : per_seed) {
      if (pts.size() < 2) continue;
      std::sort(pts.begin(), pts.end());
      std::vector<double> xs, ys;
      for (auto& [x, y] : pts) {
        xs.push_back(x);
        ys.push_back(y);
      }
      tr.per_seed_rho.push_back(spearman(xs, ys));
    }
    if (tr.per_seed_rho.empty()) continue;
    tr.mean_rho = detail::mean_of(tr.per_seed_rho);
    res.trends.push_back(tr);
  }

  // Data files: one latent-sweep table, one cost/metric table.
  {
    std::ofstream f(out_dir + "/by_latents.tsv", std::ios::trunc | std::ios::binary);
    f << "task\tvariant\tn\tk\tdecode\tseeds\taccuracy\taccuracy_stderr\tsoft_loss\t"
         "soft_loss_stderr\ttokens_processed\trel_cost\n";
    for (const ReportGroup& g : res.groups)
      f << g.task << '\t' << g.variant << '\t' << g.n_label << '\t' << g.k << '\t' << g.decode
        << '\t' << g.seeds << '\t' << detail::fmt(g.acc_mean) << '\t' << detail::fmt(g.acc_stderr)
        << '\t' << (std::isnan(g.soft_mean) ? std::string() : detail::fmt(g.soft_mean)) << '\t'
        << (std::isnan(g.soft_stderr) ? std::string() : detail::fmt(g.soft_stderr)) << '\t'
        << detail::fmt(g.tokens_mean) << '\t' << detail::fmt(g.rel_mean) << "\n";
  }
  {
    std::ofstream f(out_dir + "/cost_vs_metric.tsv", std::ios::trunc | std::ios::binary);
    f << "task\tvariant\tn\tk\tdecode\trel_cost\taccuracy\tcost_label\n";
    for (const ReportGroup& g : res.groups)
      f << g.task << '\t' << g.variant << '\t' << g.n_label << '\t' << g.k << '\t' << g.decode
        << '\t' << detail::fmt(g.rel_mean) << '\t' << detail::fmt(g.acc_mean) << '\t'
        << format_rel_cost(g.rel_mean) << "\n";
  }

  std::ostringstream s;
  s << "groups (" << res.groups.size() << "):\n";
  char buf[256];
  for (const ReportGroup& g : res.groups) {
    std::snprintf(buf, sizeof(buf),
                  "  %-14s %-14s n=%-4s k=%-3d %-7s seeds=%d acc %.4f +/- %.4f cost %s\n",
                  g.task.c_str(), g.variant.c_str(), g.n_label.c_str(), g.k, g.decode.c_str(),
                  g.seeds, g.acc_mean, g.acc_stderr, format_rel_cost(g.rel_mean).c_str());
    s << buf;
    if (!std::isnan(g.soft_mean)) {
      std::snprintf(buf, sizeof(buf), "  %-14s   soft loss %.4f +/- %.4f\n", "", g.soft_mean,
                    g.soft_stderr);
      s << buf;
    }
  }
  if (!res.trends.empty()) {
    s << "latent-count trends (Spearman rho of accuracy vs n, per seed):\n";
    for (const auto& tr : res.trends) {
      std::snprintf(buf, sizeof(buf), "  %-14s %-14s mean rho %.3f  [", tr.task.c_str(),
                    tr.variant.c_str(), tr.mean_rho);
      s << buf;
      for (size_t i = 0; i < tr.per_seed_rho.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%s%.3f", i ? ", " : "", tr.per_seed_rho[i]);
        s << buf;
      }
      s << "]  " << (tr.mean_rho > 0 ? "monotone-up" : "not-monotone") << "\n";
    }
  }
  res.summary = s.str();
  {
    std::ofstream f(out_dir + "/summary.txt", std::ios::trunc | std::ios::binary);
    f << res.summary;
  }
  return res;
}

}  // namespace latok
