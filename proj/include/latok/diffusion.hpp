#pragma once
#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "latok/rng.hpp"

namespace latok {

// Partially decoded sequence in original order. tokens[i] is the decoded
// value where clean[i] == 1 and mask_id elsewhere. Decoding is absorbing:
// clean positions never revert.
struct SequenceState {
  int len = 0;
  int mask_id = -1;
  std::vector<int> tokens;
  std::vector<uint8_t> clean;

  int clean_count() const {
    int c = 0;
    for (uint8_t b : clean) c += b;
    return c;
  }
};

inline SequenceState make_masked_state(int L, int mask_id) {
  if (L < 1) throw std::runtime_error("make_masked_state: length must be positive");
  SequenceState st;
  st.len = L;
  st.mask_id = mask_id;
  st.tokens.assign(L, mask_id);
  st.clean.assign(L, 0);
  return st;
}

// Prompt-conditioned start state: positions with prompt_clean set carry their
// given tokens and are treated as already decoded.
inline SequenceState make_prompt_state(const std::vector<int>& tokens,
                                       const std::vector<uint8_t>& prompt_clean,
                                       int mask_id) {
  if (tokens.size() != prompt_clean.size() || tokens.empty())
    throw std::runtime_error("make_prompt_state: tokens/clean size mismatch");
  SequenceState st;
  st.len = (int)tokens.size();
  st.mask_id = mask_id;
  st.clean = prompt_clean;
  st.tokens.resize(st.len);
  for (int i = 0; i < st.len; ++i) st.tokens[i] = prompt_clean[i] ? tokens[i] : mask_id;
  return st;
}

// Decode order over original positions (0-based permutation of 0..L-1).
using Schedule = std::vector<int>;
// Grouped decode order: disjoint sets, decoded one set per step.
using SetSchedule = std::vector<std::vector<int>>;

inline void check_schedule(const Schedule& pi, int L, const char* op) {
  if ((int)pi.size() != L) throw std::runtime_error(std::string(op) + ": schedule length mismatch");
  std::vector<uint8_t> seen(L, 0);
  for (int p : pi) {
    if (p < 0 || p >= L || seen[p]) throw std::runtime_error(std::string(op) + ": schedule is not a permutation");
    seen[p] = 1;
  }
}

inline void check_set_schedule(const SetSchedule& S, int L, const char* op) {
  std::vector<uint8_t> seen(L, 0);
  size_t total = 0;
  for (const auto& set : S) {
    if (set.empty()) throw std::runtime_error(std::string(op) + ": empty set in schedule");
    for (int p : set) {
      if (p < 0 || p >= L || seen[p]) throw std::runtime_error(std::string(op) + ": sets must disjointly cover positions");
      seen[p] = 1;
      ++total;
    }
  }
  if (total != (size_t)L) throw std::runtime_error(std::string(op) + ": sets must cover every position");
}

inline Schedule random_schedule(int L, Rng& rng) {
  Schedule pi(L);
  for (int i = 0; i < L; ++i) pi[i] = i;
  rng.shuffle(pi);
  return pi;
}

// Schedule compatible with a prompt-conditioned state: clean positions first
// (ascending, they are already decoded), masked positions in random order.
inline Schedule random_schedule_for(const SequenceState& st, Rng& rng) {
  Schedule clean_part, masked_part;
  for (int i = 0; i < st.len; ++i) (st.clean[i] ? clean_part : masked_part).push_back(i);
  rng.shuffle(masked_part);
  clean_part.insert(clean_part.end(), masked_part.begin(), masked_part.end());
  return clean_part;
}

// Uniform over all schedules consistent with the corruption: clean-prefix and
// masked-suffix orders are each an independent uniform shuffle.
inline Schedule random_schedule_uniform(const SequenceState& st, Rng& rng) {
  Schedule clean_part, masked_part;
  for (int i = 0; i < st.len; ++i) (st.clean[i] ? clean_part : masked_part).push_back(i);
  rng.shuffle(clean_part);
  rng.shuffle(masked_part);
  clean_part.insert(clean_part.end(), masked_part.begin(), masked_part.end());
  return clean_part;
}

// Corruption at step t of a T = L step process: exactly L - (t-1) positions
// masked, chosen uniformly without replacement. t = 1 masks everything,
// t = T leaves exactly one mask.
inline SequenceState forward_corrupt(const std::vector<int>& x_clean, int t, int mask_id, Rng& rng) {
  int L = (int)x_clean.size();
  if (L < 1) throw std::runtime_error("forward_corrupt: empty sequence");
  if (t < 1 || t > L) throw std::runtime_error("forward_corrupt: t out of range [1, T]");
  int m = L - (t - 1);
  std::vector<int> idx(L);
  for (int i = 0; i < L; ++i) idx[i] = i;
  std::vector<int> masked = rng.perm_prefix(idx, (size_t)m);
  SequenceState st;
  st.len = L;
  st.mask_id = mask_id;
  st.tokens = x_clean;
  st.clean.assign(L, 1);
  for (int p : masked) {
    st.tokens[p] = mask_id;
    st.clean[p] = 0;
  }
  return st;
}

// Model input layout: tokens physically rearranged to schedule order while
// positions keep the original indices (the embeddings the model sees are
// unchanged, only the layout moves).
struct ReorderedInput {
  std::vector<int> tokens;
  std::vector<int> positions;
  int clean_count = 0;
};

inline ReorderedInput reorder(const SequenceState& st, const Schedule& pi) {
  check_schedule(pi, st.len, "reorder");
  int c = st.clean_count();
  for (int i = 0; i < c; ++i)
    if (!st.clean[pi[i]])
      throw std::runtime_error("reorder: schedule prefix must equal the clean set");
  ReorderedInput out;
  out.clean_count = c;
  out.tokens.resize(st.len);
  out.positions.resize(st.len);
  for (int i = 0; i < st.len; ++i) {
    out.tokens[i] = st.tokens[pi[i]];
    out.positions[i] = pi[i];
  }
  return out;
}

// Original-index partition into (clean, masked), both ascending.
inline std::pair<std::vector<int>, std::vector<int>> partition(const SequenceState& st) {
  std::pair<std::vector<int>, std::vector<int>> out;
  for (int i = 0; i < st.len; ++i) (st.clean[i] ? out.first : out.second).push_back(i);
  return out;
}

// Adaptive reschedule: move position pos (currently somewhere at slot >= t)
// to slot t, shifting the slots in between one to the right. Slots 0-based.
inline void update_schedule_adaptive(Schedule& pi, int t, int pos) {
  if (t < 0 || t >= (int)pi.size()) throw std::runtime_error("update_schedule_adaptive: slot out of range");
  int cur = -1;
  for (int i = t; i < (int)pi.size(); ++i)
    if (pi[i] == pos) {
      cur = i;
      break;
    }
  if (cur < 0) throw std::runtime_error("update_schedule_adaptive: position not in the undecoded suffix");
  for (int i = cur; i > t; --i) pi[i] = pi[i - 1];
  pi[t] = pos;
}

// Textual dump: original-order token ids, `_` for masked positions.
inline std::string dump_state(const SequenceState& st) {
  std::ostringstream os;
  for (int i = 0; i < st.len; ++i) {
    if (i) os << ' ';
    if (st.clean[i])
      os << st.tokens[i];
    else
      os << '_';
  }
  return os.str();
}

}  // namespace latok
