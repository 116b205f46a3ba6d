#pragma once
#include <stdexcept>
#include <string>
#include <vector>

#include "latok/rng.hpp"

namespace latok {

namespace countdown_tok {
constexpr int kDigitBase = 0;  // digits 0..9 at ids 0..9
constexpr int kPlus = 10, kMinus = 11, kMul = 12, kDiv = 13, kEq = 14, kComma = 15, kColon = 16,
              kEos = 17, kPad = 18, kMask = 19;
constexpr int kVocab = 20;
}  // namespace countdown_tok

// Arithmetic chain puzzle: combine the operands step by step to reach the
// target. Every value stays in 1..99 and each number is consumable once;
// step results join the pool.
struct CountdownStep {
  int a = 0, b = 0, c = 0;
  char op = '+';  // one of + - * /
};

struct CountdownInstance {
  std::vector<int> operands;
  int target = 0;
  std::vector<CountdownStep> steps;
};

namespace detail {

inline bool countdown_apply(int a, char op, int b, int& c) {
  switch (op) {
    case '+': c = a + b; break;
    case '-': c = a - b; break;
    case '*': c = a * b; break;
    case '/':
      if (b == 0 || a % b != 0) return false;
      c = a / b;
      break;
    default: return false;
  }
  return c >= 1 && c <= 99;
}

}  // namespace detail

// Random instance with num_operands starting numbers and 1..num_operands-1
// combining steps; the target is the final step's result. Each step draws
// two pool entries and a uniformly chosen feasible operation.
inline CountdownInstance countdown_generate(Rng& rng, int num_operands = 5) {
  if (num_operands < 2) throw std::runtime_error("countdown_generate: need at least 2 operands");
  for (int attempt = 0; attempt < 1000; ++attempt) {
    CountdownInstance inst;
    for (int i = 0; i < num_operands; ++i) inst.operands.push_back(rng.below_int(20) + 1);
    std::vector<int> pool = inst.operands;
    int num_steps = rng.below_int(num_operands - 1) + 1;
    bool dead = false;
    for (int s = 0; s < num_steps && !dead; ++s) {
      int tries = 0;
      for (;; ++tries) {
        if (tries == 50) {
          dead = true;  // pool stuck (e.g. sums overflow 99); regenerate
          break;
        }
        int ia = rng.below_int((int)pool.size());
        int ib;
        do ib = rng.below_int((int)pool.size());
        while (ib == ia);
        int a = pool[(size_t)ia], b = pool[(size_t)ib];
        static const char ops[] = {'+', '-', '*', '/'};
        char feasible[4];
        int results[4];
        int nf = 0;
        for (char op : ops) {
          int c;
          if (detail::countdown_apply(a, op, b, c)) {
            feasible[nf] = op;
            results[nf] = c;
            ++nf;
          }
        }
        if (nf == 0) continue;
        int pick = rng.below_int(nf);
        CountdownStep st{a, b, results[pick], feasible[pick]};
        inst.steps.push_back(st);
        if (ia < ib) std::swap(ia, ib);
        pool.erase(pool.begin() + ia);
        pool.erase(pool.begin() + ib);
        pool.push_back(st.c);
        break;
      }
    }
    if (dead) continue;
    inst.target = inst.steps.back().c;
    return inst;
  }
  throw std::runtime_error("countdown_generate: exhausted attempts");
}

namespace detail {

inline void countdown_push_number(std::vector<int>& out, int v) {
  if (v >= 100) out.push_back(countdown_tok::kDigitBase + v / 100 % 10);
  if (v >= 10) out.push_back(countdown_tok::kDigitBase + v / 10 % 10);
  out.push_back(countdown_tok::kDigitBase + v % 10);
}

inline int countdown_op_tok(char op) {
  switch (op) {
    case '+': return countdown_tok::kPlus;
    case '-': return countdown_tok::kMinus;
    case '*': return countdown_tok::kMul;
    default: return countdown_tok::kDiv;
  }
}

}  // namespace detail

// n1 , n2 , .. : target : a op b = c , a op b = c .. [EOS]; numbers are
// plain digit runs. The prompt spans through the second colon.
inline std::vector<int> countdown_encode(const CountdownInstance& inst, int* prompt_len = nullptr) {
  using namespace countdown_tok;
  std::vector<int> out;
  for (size_t i = 0; i < inst.operands.size(); ++i) {
    if (i) out.push_back(kComma);
    detail::countdown_push_number(out, inst.operands[i]);
  }
  out.push_back(kColon);
  detail::countdown_push_number(out, inst.target);
  out.push_back(kColon);
  if (prompt_len) *prompt_len = (int)out.size();
  for (size_t s = 0; s < inst.steps.size(); ++s) {
    if (s) out.push_back(kComma);
    const CountdownStep& st = inst.steps[s];
    detail::countdown_push_number(out, st.a);
    out.push_back(detail::countdown_op_tok(st.op));
    detail::countdown_push_number(out, st.b);
    out.push_back(kEq);
    detail::countdown_push_number(out, st.c);
  }
  out.push_back(kEos);
  return out;
}

struct CountdownParse {
  bool ok = false;
  std::string reason;
  CountdownInstance inst;
};

inline CountdownParse countdown_parse(const std::vector<int>& tokens) {
  using namespace countdown_tok;
  CountdownParse out;
  size_t i = 0;
  auto fail = [&](const std::string& r) {
    out.ok = false;
    out.reason = r;
    return out;
  };
  auto is_digit = [&](size_t j) { return j < tokens.size() && tokens[j] >= 0 && tokens[j] <= 9; };
  auto take_number = [&](int& v) {
    if (!is_digit(i)) return false;
    long acc = 0;
    size_t start = i;
    while (is_digit(i)) {
      acc = acc * 10 + tokens[i];
      if (acc > 9999 || i - start >= 6) return false;  // runaway digit string
      ++i;
    }
    v = (int)acc;
    return true;
  };
  auto op_of = [&](int id, char& op) {
    switch (id) {
      case kPlus: op = '+'; return true;
      case kMinus: op = '-'; return true;
      case kMul: op = '*'; return true;
      case kDiv: op = '/'; return true;
      default: return false;
    }
  };
  // Operand list up to the first colon.
  for (;;) {
    int v;
    if (!take_number(v)) return fail("bad-operand");
    out.inst.operands.push_back(v);
    if (i < tokens.size() && tokens[i] == kComma) {
      ++i;
      continue;
    }
    break;
  }
  if (i >= tokens.size() || tokens[i] != kColon) return fail("missing-colon");
  ++i;
  if (!take_number(out.inst.target)) return fail("bad-target");
  if (i >= tokens.size() || tokens[i] != kColon) return fail("missing-colon");
  ++i;
  for (;;) {
    CountdownStep st;
    if (!take_number(st.a)) return fail("bad-step");
    if (i >= tokens.size() || !op_of(tokens[i], st.op)) return fail("bad-step-op");
    ++i;
    if (!take_number(st.b)) return fail("bad-step");
    if (i >= tokens.size() || tokens[i] != kEq) return fail("missing-eq");
    ++i;
    if (!take_number(st.c)) return fail("bad-step");
    out.inst.steps.push_back(st);
    if (i < tokens.size() && tokens[i] == kComma) {
      ++i;
      continue;
    }
    break;
  }
  if (i >= tokens.size() || tokens[i] != kEos) return fail("missing-eos");
  ++i;
  for (; i < tokens.size(); ++i)
    if (tokens[i] != kPad) return fail("bad-padding");
  out.ok = true;
  return out;
}

// Each step must compute correctly and draw both inputs from the live pool
// (operands plus earlier results, consumed once); the last step must land on
// the target.
inline bool countdown_check(const CountdownInstance& inst, std::string* why = nullptr) {
  auto fail = [&](const char* r) {
    if (why) *why = r;
    return false;
  };
  if (inst.steps.empty()) return fail("no-steps");
  std::vector<int> pool = inst.operands;
  auto consume = [&](int v) {
    for (size_t j = 0; j < pool.size(); ++j)
      if (pool[j] == v) {
        pool.erase(pool.begin() + (long)j);
        return true;
      }
    return false;
  };
  for (const CountdownStep& st : inst.steps) {
    if (!consume(st.a)) return fail("operand-unavailable");
    if (!consume(st.b)) return fail("operand-unavailable");
    int c;
    if (!detail::countdown_apply(st.a, st.op, st.b, c) || c != st.c) return fail("bad-arithmetic");
    pool.push_back(st.c);
  }
  if (inst.steps.back().c != inst.target) return fail("wrong-target");
  return true;
}

}  // namespace latok
