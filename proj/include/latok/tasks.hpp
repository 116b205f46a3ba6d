#pragma once
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latok/countdown.hpp"
#include "latok/rng.hpp"
#include "latok/sudoku.hpp"
#include "latok/zebra.hpp"

namespace latok {

// A task fixes the token table, sequence length, and instance generator.
// Sequences are padded to seq_len; pad_id is the filler (sudoku-puzzle reuses
// EOS for that, its table has no separate pad).
struct TaskSpec {
  enum Kind { SUDOKU_GEN, SUDOKU_PUZZLE, ZEBRA, COUNTDOWN };
  Kind kind = SUDOKU_GEN;
  std::string name;
  int seq_len = 0, vocab = 0, mask_id = 0, pad_id = 0;
  std::vector<std::string> token_names;

  int box = 3;                              // sudoku tasks
  int holes = 40;                           // sudoku-puzzle
  int houses = 5, attrs = 6, clues = 40;    // zebra
  int operands = 5;                         // countdown
};

struct PuzzleInstance {
  std::vector<int> tokens;  // length = spec.seq_len
  int prompt_len = 0;       // leading tokens held fixed at sampling time
  nlohmann::json meta;
};

struct ValidationResult {
  bool ok = false;
  std::string reason;  // empty when ok
};

namespace detail {

inline std::vector<std::string> digit_names(int lo, int hi) {
  std::vector<std::string> out;
  for (int v = lo; v <= hi; ++v) out.push_back(std::to_string(v));
  return out;
}

}  // namespace detail

// Free-form board generation: the n*n solution cells, then padding.
inline TaskSpec task_sudoku_gen(int box, int seq_len, const std::string& name = "sudoku-gen") {
  int n = sudoku_side(box);
  if (seq_len < n * n) throw std::runtime_error("task_sudoku_gen: seq_len below board size");
  TaskSpec s;
  s.kind = TaskSpec::SUDOKU_GEN;
  s.name = name;
  s.box = box;
  s.seq_len = seq_len;
  s.vocab = n + 2;
  s.pad_id = n;
  s.mask_id = n + 1;
  s.token_names = detail::digit_names(1, n);
  s.token_names.push_back("PAD");
  s.token_names.push_back("MASK");
  return s;
}

// BOS puzzle SEP solution EOS, padded with EOS; holes in the puzzle half are
// EMPTY cells the solution half must fill consistently.
inline TaskSpec task_sudoku_puzzle(int box, int seq_len, int holes) {
  int n = sudoku_side(box);
  if (n > 9) throw std::runtime_error("task_sudoku_puzzle: base above 3 not supported");
  if (holes < 0 || holes > n * n) throw std::runtime_error("task_sudoku_puzzle: bad hole count");
  if (seq_len < 2 * n * n + 3) throw std::runtime_error("task_sudoku_puzzle: seq_len too short");
  TaskSpec s;
  s.kind = TaskSpec::SUDOKU_PUZZLE;
  s.name = "sudoku-puzzle";
  s.box = box;
  s.holes = holes;
  s.seq_len = seq_len;
  s.vocab = n + 5;
  s.pad_id = n + 3;  // EOS doubles as padding
  s.mask_id = n + 4;
  s.token_names = detail::digit_names(1, n);
  s.token_names.push_back("EMPTY");
  s.token_names.push_back("BOS");
  s.token_names.push_back("SEP");
  s.token_names.push_back("EOS");
  s.token_names.push_back("MASK");
  return s;
}

inline TaskSpec task_zebra(int houses, int attrs, int clues, int seq_len) {
  // Worst case: every clue relational (8 tokens) plus BOS, SEP, grid, EOS.
  if (seq_len < 3 + 8 * clues + houses * attrs)
    throw std::runtime_error("task_zebra: seq_len cannot hold the longest encoding");
  TaskSpec s;
  s.kind = TaskSpec::ZEBRA;
  s.name = "zebra";
  s.houses = houses;
  s.attrs = attrs;
  s.clues = clues;
  s.seq_len = seq_len;
  s.vocab = zebra_tok::kVocab;
  s.pad_id = zebra_tok::kPad;
  s.mask_id = zebra_tok::kMask;
  s.token_names = detail::digit_names(1, 9);
  for (const char* t : {"=", "!=", "<", "<<", ">", ">>", "~", "CLUE", "SEP", "BOS", "EOS", "PAD",
                        "A", "MASK"})
    s.token_names.push_back(t);
  return s;
}

inline TaskSpec task_countdown(int operands, int seq_len) {
  // Longest chain: all numbers two digits, operands-1 steps.
  int worst = 3 * operands + 4 + 9 * (operands - 1);
  if (seq_len < worst) throw std::runtime_error("task_countdown: seq_len too short");
  TaskSpec s;
  s.kind = TaskSpec::COUNTDOWN;
  s.name = "countdown";
  s.operands = operands;
  s.seq_len = seq_len;
  s.vocab = countdown_tok::kVocab;
  s.pad_id = countdown_tok::kPad;
  s.mask_id = countdown_tok::kMask;
  s.token_names = detail::digit_names(0, 9);
  for (const char* t : {"+", "-", "*", "/", "=", ",", ":", "EOS", "PAD", "MASK"})
    s.token_names.push_back(t);
  return s;
}

// The benchmark set. Sequence lengths and vocab sizes are part of the
// experiment definitions, so they are fixed here rather than configurable.
inline TaskSpec task_by_name(const std::string& name) {
  if (name == "sudoku-gen") return task_sudoku_gen(3, 128);
  if (name == "sudoku-large") return task_sudoku_gen(6, 1536, "sudoku-large");
  if (name == "sudoku-puzzle") return task_sudoku_puzzle(3, 192, 40);
  if (name == "zebra") return task_zebra(5, 6, 40, 384);
  if (name == "countdown") return task_countdown(5, 64);
  throw std::runtime_error("unknown task: " + name);
}

inline const std::string& token_name(const TaskSpec& spec, int id) {
  if (id < 0 || id >= (int)spec.token_names.size())
    throw std::runtime_error("token_name: id out of range");
  return spec.token_names[(size_t)id];
}

inline int token_id(const TaskSpec& spec, const std::string& name) {
  for (size_t i = 0; i < spec.token_names.size(); ++i)
    if (spec.token_names[i] == name) return (int)i;
  throw std::runtime_error("token_id: unknown token '" + name + "' for task " + spec.name);
}

inline std::string detokenize(const TaskSpec& spec, const std::vector<int>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_name(spec, tokens[i]);
  }
  return out;
}

inline std::vector<int> tokenize(const TaskSpec& spec, const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(token_id(spec, word));
  return out;
}

namespace detail {

inline void pad_to(std::vector<int>& tokens, int seq_len, int pad_id) {
  if ((int)tokens.size() > seq_len)
    throw std::runtime_error("instance longer than task seq_len");
  tokens.resize((size_t)seq_len, pad_id);
}

}  // namespace detail

inline PuzzleInstance task_generate(const TaskSpec& spec, Rng& rng) {
  PuzzleInstance inst;
  inst.meta = nlohmann::json::object();
  switch (spec.kind) {
    case TaskSpec::SUDOKU_GEN: {
      std::vector<int> board = sudoku_generate(spec.box, rng);
      for (int v : board) inst.tokens.push_back(v - 1);
      inst.prompt_len = 0;
      break;
    }
    case TaskSpec::SUDOKU_PUZZLE: {
      int n = sudoku_side(spec.box);
      std::vector<int> board = sudoku_generate(spec.box, rng);
      std::vector<int> cells(board.size());
      for (size_t i = 0; i < cells.size(); ++i) cells[i] = (int)i;
      std::vector<int> hole_at(board.size(), 0);
      rng.perm_prefix(cells, spec.holes);
      for (int i = 0; i < spec.holes; ++i) hole_at[(size_t)cells[(size_t)i]] = 1;
      int empty_id = n, bos_id = n + 1, sep_id = n + 2;
      inst.tokens.push_back(bos_id);
      for (size_t i = 0; i < board.size(); ++i)
        inst.tokens.push_back(hole_at[i] ? empty_id : board[i] - 1);
      inst.tokens.push_back(sep_id);
      inst.prompt_len = (int)inst.tokens.size();
      for (int v : board) inst.tokens.push_back(v - 1);
      inst.tokens.push_back(spec.pad_id);  // EOS
      inst.meta["holes"] = spec.holes;
      break;
    }
    case TaskSpec::ZEBRA: {
      ZebraInstance z = zebra_generate(spec.houses, spec.attrs, spec.clues, rng);
      inst.tokens = zebra_encode(z, &inst.prompt_len);
      inst.meta["clues"] = (int)z.clues.size();
      break;
    }
    case TaskSpec::COUNTDOWN: {
      CountdownInstance c = countdown_generate(rng, spec.operands);
      inst.tokens = countdown_encode(c, &inst.prompt_len);
      inst.meta["target"] = c.target;
      inst.meta["steps"] = (int)c.steps.size();
      break;
    }
  }
  detail::pad_to(inst.tokens, spec.seq_len, spec.pad_id);
  return inst;
}

// Full-sequence correctness check for a decoded sample. Any surviving mask
// token fails outright; the rest is task-specific parsing plus the task's
// hard constraints.
inline ValidationResult validate_sample(const TaskSpec& spec, const std::vector<int>& tokens) {
  ValidationResult res;
  auto fail = [&](const std::string& r) {
    res.ok = false;
    res.reason = r;
    return res;
  };
  if ((int)tokens.size() != spec.seq_len) return fail("bad-length");
  for (int t : tokens) {
    if (t < 0 || t >= spec.vocab) return fail("token-out-of-range");
    if (t == spec.mask_id) return fail("mask-remaining");
  }
  switch (spec.kind) {
    case TaskSpec::SUDOKU_GEN: {
      int n = sudoku_side(spec.box);
      std::vector<int> board;
      for (int i = 0; i < n * n; ++i) {
        if (tokens[(size_t)i] < 0 || tokens[(size_t)i] >= n) return fail("bad-token");
        board.push_back(tokens[(size_t)i] + 1);
      }
      for (size_t i = (size_t)n * n; i < tokens.size(); ++i)
        if (tokens[i] != spec.pad_id) return fail("bad-padding");
      if (!sudoku_valid(board, spec.box)) return fail("constraint-violated");
      break;
    }
    case TaskSpec::SUDOKU_PUZZLE: {
      int n = sudoku_side(spec.box);
      int empty_id = n, bos_id = n + 1, sep_id = n + 2;
      size_t i = 0;
      if (tokens[i++] != bos_id) return fail("missing-bos");
      std::vector<int> puzzle;
      for (int k = 0; k < n * n; ++k, ++i) {
        int t = tokens[i];
        if (t != empty_id && (t < 0 || t >= n)) return fail("bad-puzzle-cell");
        puzzle.push_back(t);
      }
      if (tokens[i++] != sep_id) return fail("missing-sep");
      std::vector<int> board;
      for (int k = 0; k < n * n; ++k, ++i) {
        int t = tokens[i];
        if (t < 0 || t >= n) return fail("bad-solution-cell");
        board.push_back(t + 1);
      }
      for (; i < tokens.size(); ++i)
        if (tokens[i] != spec.pad_id) return fail("bad-padding");
      if (!sudoku_valid(board, spec.box)) return fail("constraint-violated");
      for (int k = 0; k < n * n; ++k)
        if (puzzle[(size_t)k] != empty_id && puzzle[(size_t)k] + 1 != board[(size_t)k])
          return fail("clue-contradicted");
      break;
    }
    case TaskSpec::ZEBRA: {
      ZebraParse p = zebra_parse(tokens, spec.houses, spec.attrs);
      if (!p.ok) return fail(p.reason);
      std::string why;
      if (!zebra_check(p.inst, &why)) return fail(why);
      break;
    }
    case TaskSpec::COUNTDOWN: {
      CountdownParse p = countdown_parse(tokens);
      if (!p.ok) return fail(p.reason);
      if ((int)p.inst.operands.size() != spec.operands) return fail("bad-operand-count");
      std::string why;
      if (!countdown_check(p.inst, &why)) return fail(why);
      break;
    }
  }
  res.ok = true;
  return res;
}

// Graded constraint violation in [0,1]; zero iff the sample validates.
// Defined for the board-generation tasks, where partial credit is meaningful.
inline double task_soft_loss(const TaskSpec& spec, const std::vector<int>& tokens) {
  if (spec.kind != TaskSpec::SUDOKU_GEN)
    throw std::runtime_error("task_soft_loss: defined for board generation only");
  int n = sudoku_side(spec.box);
  if ((int)tokens.size() < n * n) throw std::runtime_error("task_soft_loss: sequence too short");
  std::vector<int> board(tokens.begin(), tokens.begin() + n * n);
  return soft_constraint_loss(board, spec.box);
}

// One NDJSON line per instance: {"task": .., "tokens": [..], "prompt_len": ..,
// "meta": {..}}.
inline void write_dataset(const std::string& path, const TaskSpec& spec,
                          const std::vector<PuzzleInstance>& instances) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_dataset: cannot open " + path);
  for (const PuzzleInstance& inst : instances) {
    nlohmann::json line = {{"task", spec.name},
                           {"tokens", inst.tokens},
                           {"prompt_len", inst.prompt_len},
                           {"meta", inst.meta}};
    out << line.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write_dataset: write failed for " + path);
}

inline std::vector<PuzzleInstance> read_dataset(const std::string& path, const TaskSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_dataset: cannot open " + path);
  std::vector<PuzzleInstance> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw std::runtime_error("read_dataset: bad json at line " + std::to_string(lineno));
    if (j.at("task").get<std::string>() != spec.name)
      throw std::runtime_error("read_dataset: task mismatch at line " + std::to_string(lineno));
    PuzzleInstance inst;
    inst.tokens = j.at("tokens").get<std::vector<int>>();
    inst.prompt_len = j.at("prompt_len").get<int>();
    inst.meta = j.value("meta", nlohmann::json::object());
    if ((int)inst.tokens.size() != spec.seq_len)
      throw std::runtime_error("read_dataset: bad length at line " + std::to_string(lineno));
    out.push_back(std::move(inst));
  }
  return out;
}

// Instance i always comes from Rng(seed, i), so a dataset is reproducible
// from (task, seed, count) alone and stable under count extension.
inline std::vector<PuzzleInstance> generate_dataset(const TaskSpec& spec, int count,
                                                    uint64_t seed) {
  std::vector<PuzzleInstance> out;
  out.reserve((size_t)count);
  for (int i = 0; i < count; ++i) {
    Rng rng(seed, (uint64_t)i);
    out.push_back(task_generate(spec, rng));
  }
  return out;
}

}  // namespace latok
