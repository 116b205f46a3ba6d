#pragma once
#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "latok/rng.hpp"

namespace latok {

// Boards are row-major vectors of digit values 1..n over an n x n grid with
// b x b blocks, n = b*b. Base 6 gives the 36 x 36 grid; candidate bitmasks
// therefore need 36 bits.
inline int sudoku_side(int b) {
  if (b < 2 || b > 8) throw std::runtime_error("sudoku: base must be in [2, 8]");
  return b * b;
}

inline int sudoku_block_of(int r, int c, int b) { return (r / b) * b + (c / b); }

inline bool sudoku_valid(const std::vector<int>& board, int b) {
  int n = sudoku_side(b);
  if ((int)board.size() != n * n) return false;
  std::vector<uint64_t> row(n, 0), col(n, 0), blk(n, 0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      int v = board[(size_t)r * n + c];
      if (v < 1 || v > n) return false;
      uint64_t bit = 1ull << (v - 1);
      int k = sudoku_block_of(r, c, b);
      if ((row[r] & bit) || (col[c] & bit) || (blk[k] & bit)) return false;
      row[r] |= bit;
      col[c] |= bit;
      blk[k] |= bit;
    }
  return true;
}

namespace detail {

struct SudokuFill {
  int b, n;
  std::vector<int> board;
  std::vector<uint64_t> row, col, blk;
  uint64_t all;
  long long steps = 0, step_cap = 0;

  explicit SudokuFill(int base)
      : b(base), n(sudoku_side(base)), board((size_t)n * n, 0), row(n, 0), col(n, 0), blk(n, 0),
        all(n == 64 ? ~0ull : (1ull << n) - 1) {}

  uint64_t candidates(int r, int c) const {
    return all & ~(row[r] | col[c] | blk[sudoku_block_of(r, c, b)]);
  }

  void place(int r, int c, int v) {
    uint64_t bit = 1ull << (v - 1);
    board[(size_t)r * n + c] = v;
    row[r] |= bit;
    col[c] |= bit;
    blk[sudoku_block_of(r, c, b)] |= bit;
  }

  void remove(int r, int c, int v) {
    uint64_t bit = 1ull << (v - 1);
    board[(size_t)r * n + c] = 0;
    row[r] &= ~bit;
    col[c] &= ~bit;
    blk[sudoku_block_of(r, c, b)] &= ~bit;
  }

  // Most-constrained-cell search with shuffled candidate order. Returns false
  // when the step budget runs out, so the caller can restart with fresh draws.
  bool fill(Rng& rng) {
    if (step_cap && ++steps > step_cap) return false;
    int best_r = -1, best_c = -1, best_count = n + 1;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        if (board[(size_t)r * n + c]) continue;
        int cnt = __builtin_popcountll(candidates(r, c));
        if (cnt == 0) return false;
        if (cnt < best_count) {
          best_count = cnt;
          best_r = r;
          best_c = c;
          if (cnt == 1) goto chosen;
        }
      }
    if (best_r < 0) return true;  // full board
  chosen:
    uint64_t cand = candidates(best_r, best_c);
    std::vector<int> order;
    for (int v = 1; v <= n; ++v)
      if (cand & (1ull << (v - 1))) order.push_back(v);
    rng.shuffle(order);
    for (int v : order) {
      place(best_r, best_c, v);
      if (fill(rng)) return true;
      remove(best_r, best_c, v);
      if (step_cap && steps > step_cap) return false;
    }
    return false;
  }
};

}  // namespace detail

// A random valid board by randomized backtracking; retries with fresh
// shuffles whenever a fill exceeds its step budget.
inline std::vector<int> sudoku_generate(int b, Rng& rng) {
  int n = sudoku_side(b);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    detail::SudokuFill f(b);
    f.step_cap = 200ll * n * n;  // generous: empty-grid MRV fills rarely backtrack
    if (f.fill(rng)) return f.board;
  }
  throw std::runtime_error("sudoku_generate: retry budget exhausted");
}

// Every valid board for a base (feasible only for b = 2: 288 boards).
inline std::vector<std::vector<int>> sudoku_enumerate_all(int b) {
  int n = sudoku_side(b);
  if (n > 4) throw std::runtime_error("sudoku_enumerate_all: only base 2 is enumerable");
  std::vector<std::vector<int>> out;
  detail::SudokuFill f(b);
  auto go = [&](auto&& self, int idx) -> void {
    if (idx == n * n) {
      out.push_back(f.board);
      return;
    }
    int r = idx / n, c = idx % n;
    uint64_t cand = f.candidates(r, c);
    for (int v = 1; v <= n; ++v)
      if (cand & (1ull << (v - 1))) {
        f.place(r, c, v);
        self(self, idx + 1);
        f.remove(r, c, v);
      }
  };
  go(go, 0);
  return out;
}

// Unique-valid-digit constraint loss over all 3n units. Token ids outside the
// digit range contribute nothing (they never reduce a unit's loss). Digits are
// the ids 0..n-1 (value minus one).
inline double soft_constraint_loss(const std::vector<int>& tokens, int b) {
  int n = sudoku_side(b);
  if ((int)tokens.size() != n * n)
    throw std::runtime_error("soft_constraint_loss: board length mismatch");
  // Missing-digit counts are integers; one final division keeps the result
  // exactly rational (the all-identical board lands on 3(n-1) with no drift).
  auto unit_missing = [&](auto&& cell_of) {
    uint64_t seen = 0;
    for (int i = 0; i < n; ++i) {
      int id = tokens[(size_t)cell_of(i)];
      if (id >= 0 && id < n) seen |= 1ull << id;
    }
    return n - __builtin_popcountll(seen);
  };
  long long total = 0;
  for (int r = 0; r < n; ++r) total += unit_missing([&](int i) { return r * n + i; });
  for (int c = 0; c < n; ++c) total += unit_missing([&](int i) { return i * n + c; });
  for (int k = 0; k < n; ++k) {
    int r0 = (k / b) * b, c0 = (k % b) * b;
    total += unit_missing([&](int i) { return (r0 + i / b) * n + (c0 + i % b); });
  }
  return (double)total / n;
}

}  // namespace latok
