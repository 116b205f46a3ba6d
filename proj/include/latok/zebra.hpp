#pragma once
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "latok/rng.hpp"

namespace latok {

// Token ids, fixed 23-entry table.
namespace zebra_tok {
constexpr int kDigitBase = 0;  // digits 1..9 at ids 0..8
constexpr int kEq = 9, kNeq = 10, kLeft = 11, kImmLeft = 12, kRight = 13, kImmRight = 14,
              kNeighbor = 15, kClue = 16, kSep = 17, kBos = 18, kEos = 19, kPad = 20, kAttr = 21,
              kMask = 22;
constexpr int kVocab = 23;
inline int digit(int v) { return kDigitBase + v - 1; }  // value 1..9
inline bool is_digit(int id) { return id >= 0 && id <= 8; }
inline int digit_value(int id) { return id + 1; }
}  // namespace zebra_tok

// Attribute assignment puzzle: each of K attributes distributes the values
// 1..H across the H houses as a permutation. Clues relate attribute holders
// by identity, inequality, or house position.
struct ZebraClue {
  enum Type { EQ, NEQ, LEFT, IMM_LEFT, RIGHT, IMM_RIGHT, NEIGHBOR, AT };
  Type type;
  int a1 = 0, v1 = 0;      // first (attribute, value), 1-based
  int a2 = 0, v2 = 0;      // second pair, relational clues only
  int house = 0;           // 1-based, AT only
};

struct ZebraInstance {
  int houses = 0, attrs = 0;
  std::vector<std::vector<int>> grid;  // grid[k][h] = value of attribute k at house h
  std::vector<ZebraClue> clues;
};

namespace detail {

// House (0-based) holding value v of attribute k; -1 when absent.
inline int zebra_house_of(const ZebraInstance& z, int k, int v) {
  for (int h = 0; h < z.houses; ++h)
    if (z.grid[(size_t)k][(size_t)h] == v) return h;
  return -1;
}

}  // namespace detail

inline bool zebra_clue_holds(const ZebraInstance& z, const ZebraClue& c) {
  if (c.type == ZebraClue::AT) {
    if (c.a1 < 1 || c.a1 > z.attrs || c.house < 1 || c.house > z.houses) return false;
    return z.grid[(size_t)c.a1 - 1][(size_t)c.house - 1] == c.v1;
  }
  if (c.a1 < 1 || c.a1 > z.attrs || c.a2 < 1 || c.a2 > z.attrs) return false;
  int h1 = detail::zebra_house_of(z, c.a1 - 1, c.v1);
  int h2 = detail::zebra_house_of(z, c.a2 - 1, c.v2);
  if (h1 < 0 || h2 < 0) return false;
  switch (c.type) {
    case ZebraClue::EQ: return h1 == h2;
    case ZebraClue::NEQ: return h1 != h2;
    case ZebraClue::LEFT: return h1 < h2;
    case ZebraClue::IMM_LEFT: return h2 == h1 + 1;
    case ZebraClue::RIGHT: return h1 > h2;
    case ZebraClue::IMM_RIGHT: return h1 == h2 + 1;
    case ZebraClue::NEIGHBOR: return std::abs(h1 - h2) == 1;
    default: return false;
  }
}

// Grid rows must each be a permutation of 1..H.
inline bool zebra_grid_wellformed(const ZebraInstance& z) {
  if ((int)z.grid.size() != z.attrs) return false;
  for (const auto& row : z.grid) {
    if ((int)row.size() != z.houses) return false;
    std::vector<uint8_t> seen((size_t)z.houses + 1, 0);
    for (int v : row) {
      if (v < 1 || v > z.houses || seen[(size_t)v]) return false;
      seen[(size_t)v] = 1;
    }
  }
  return true;
}

// Random truth grid plus clue_count clues it satisfies, type drawn uniformly
// (identity clues need a second attribute, so K = 1 falls back to the rest).
inline ZebraInstance zebra_generate(int H, int K, int clue_count, Rng& rng) {
  if (H < 2 || H > 9 || K < 1 || K > 9)
    throw std::runtime_error("zebra_generate: houses in [2,9], attributes in [1,9]");
  ZebraInstance z;
  z.houses = H;
  z.attrs = K;
  z.grid.assign((size_t)K, std::vector<int>(H));
  for (auto& row : z.grid) {
    for (int h = 0; h < H; ++h) row[(size_t)h] = h + 1;
    rng.shuffle(row);
  }
  while ((int)z.clues.size() < clue_count) {
    auto type = (ZebraClue::Type)rng.below_int(8);
    ZebraClue c;
    c.type = type;
    if (type == ZebraClue::AT) {
      c.house = rng.below_int(H) + 1;
      c.a1 = rng.below_int(K) + 1;
      c.v1 = z.grid[(size_t)c.a1 - 1][(size_t)c.house - 1];
    } else if (type == ZebraClue::EQ) {
      if (K < 2) continue;  // needs two attributes to say anything
      int h = rng.below_int(H);
      c.a1 = rng.below_int(K) + 1;
      do c.a2 = rng.below_int(K) + 1;
      while (c.a2 == c.a1);
      c.v1 = z.grid[(size_t)c.a1 - 1][(size_t)h];
      c.v2 = z.grid[(size_t)c.a2 - 1][(size_t)h];
    } else {
      int h1, h2;
      switch (type) {
        case ZebraClue::NEQ: {
          h1 = rng.below_int(H);
          do h2 = rng.below_int(H);
          while (h2 == h1);
          break;
        }
        case ZebraClue::LEFT: {
          h1 = rng.below_int(H - 1);
          h2 = h1 + 1 + rng.below_int(H - 1 - h1);
          break;
        }
        case ZebraClue::RIGHT: {
          h2 = rng.below_int(H - 1);
          h1 = h2 + 1 + rng.below_int(H - 1 - h2);
          break;
        }
        case ZebraClue::IMM_LEFT: {
          h1 = rng.below_int(H - 1);
          h2 = h1 + 1;
          break;
        }
        case ZebraClue::IMM_RIGHT: {
          h2 = rng.below_int(H - 1);
          h1 = h2 + 1;
          break;
        }
        default: {  // NEIGHBOR
          h1 = rng.below_int(H);
          if (h1 == 0)
            h2 = 1;
          else if (h1 == H - 1)
            h2 = H - 2;
          else
            h2 = h1 + (rng.below_int(2) ? 1 : -1);
          break;
        }
      }
      c.a1 = rng.below_int(K) + 1;
      c.a2 = rng.below_int(K) + 1;
      c.v1 = z.grid[(size_t)c.a1 - 1][(size_t)h1];
      c.v2 = z.grid[(size_t)c.a2 - 1][(size_t)h2];
    }
    z.clues.push_back(c);
  }
  return z;
}

// [BOS] clue* [SEP] solution [EOS]; solution is house-major. Relational clues
// read CLUE ATTR a v rel ATTR a v; absolute ones read CLUE h ATTR a v.
inline std::vector<int> zebra_encode(const ZebraInstance& z, int* prompt_len = nullptr) {
  using namespace zebra_tok;
  static const int rel_tok[] = {kEq, kNeq, kLeft, kImmLeft, kRight, kImmRight, kNeighbor};
  std::vector<int> out = {kBos};
  for (const ZebraClue& c : z.clues) {
    out.push_back(kClue);
    if (c.type == ZebraClue::AT) {
      out.push_back(digit(c.house));
      out.push_back(kAttr);
      out.push_back(digit(c.a1));
      out.push_back(digit(c.v1));
    } else {
      out.push_back(kAttr);
      out.push_back(digit(c.a1));
      out.push_back(digit(c.v1));
      out.push_back(rel_tok[(int)c.type]);
      out.push_back(kAttr);
      out.push_back(digit(c.a2));
      out.push_back(digit(c.v2));
    }
  }
  out.push_back(kSep);
  if (prompt_len) *prompt_len = (int)out.size();
  for (int h = 0; h < z.houses; ++h)
    for (int k = 0; k < z.attrs; ++k) out.push_back(digit(z.grid[(size_t)k][(size_t)h]));
  out.push_back(kEos);
  return out;
}

struct ZebraParse {
  bool ok = false;
  std::string reason;
  ZebraInstance inst;
};

// Strict parse of a full (possibly padded) sequence.
inline ZebraParse zebra_parse(const std::vector<int>& tokens, int H, int K) {
  using namespace zebra_tok;
  ZebraParse out;
  out.inst.houses = H;
  out.inst.attrs = K;
  size_t i = 0;
  auto fail = [&](const std::string& r) {
    out.ok = false;
    out.reason = r;
    return out;
  };
  auto need = [&](int id) {
    if (i >= tokens.size() || tokens[i] != id) return false;
    ++i;
    return true;
  };
  auto take_digit = [&](int& v) {
    if (i >= tokens.size() || !is_digit(tokens[i])) return false;
    v = digit_value(tokens[i]);
    ++i;
    return true;
  };
  if (!need(kBos)) return fail("missing-bos");
  static const ZebraClue::Type rel_of[] = {ZebraClue::EQ,       ZebraClue::NEQ,
                                           ZebraClue::LEFT,     ZebraClue::IMM_LEFT,
                                           ZebraClue::RIGHT,    ZebraClue::IMM_RIGHT,
                                           ZebraClue::NEIGHBOR};
  while (i < tokens.size() && tokens[i] == kClue) {
    ++i;
    ZebraClue c;
    if (i < tokens.size() && is_digit(tokens[i])) {
      c.type = ZebraClue::AT;
      take_digit(c.house);
      if (!need(kAttr) || !take_digit(c.a1) || !take_digit(c.v1)) return fail("bad-clue");
    } else {
      if (!need(kAttr) || !take_digit(c.a1) || !take_digit(c.v1)) return fail("bad-clue");
      if (i >= tokens.size() || tokens[i] < kEq || tokens[i] > kNeighbor)
        return fail("bad-clue-relation");
      c.type = rel_of[tokens[i] - kEq];
      ++i;
      if (!need(kAttr) || !take_digit(c.a2) || !take_digit(c.v2)) return fail("bad-clue");
    }
    out.inst.clues.push_back(c);
  }
  if (!need(kSep)) return fail("missing-sep");
  out.inst.grid.assign((size_t)K, std::vector<int>(H, 0));
  for (int h = 0; h < H; ++h)
    for (int k = 0; k < K; ++k) {
      int v;
      if (!take_digit(v)) return fail("short-solution");
      out.inst.grid[(size_t)k][(size_t)h] = v;
    }
  if (!need(kEos)) return fail("missing-eos");
  for (; i < tokens.size(); ++i)
    if (tokens[i] != kPad) return fail("bad-padding");
  out.ok = true;
  return out;
}

// Well-formed grid + every clue satisfied.
inline bool zebra_check(const ZebraInstance& z, std::string* why = nullptr) {
  if (!zebra_grid_wellformed(z)) {
    if (why) *why = "grid-not-permutation";
    return false;
  }
  for (const ZebraClue& c : z.clues)
    if (!zebra_clue_holds(z, c)) {
      if (why) *why = "clue-violated";
      return false;
    }
  return true;
}

}  // namespace latok
