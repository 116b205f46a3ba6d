#pragma once
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace latok {

// Binary attention visibility. a[i*len+j] == 1 means query slot i may attend
// to key slot j. Slots index the (possibly reordered or truncated) model
// input, not original sequence positions.
struct AttentionMask {
  int len = 0;
  std::vector<uint8_t> a;

  AttentionMask() = default;
  explicit AttentionMask(int n, uint8_t fill = 0) : len(n), a((size_t)n * n, fill) {}

  uint8_t at(int i, int j) const { return a[(size_t)i * len + j]; }
  void set(int i, int j, uint8_t v) { a[(size_t)i * len + j] = v; }
  const uint8_t* row(int i) const { return a.data() + (size_t)i * len; }

  bool operator==(const AttentionMask& o) const { return len == o.len && a == o.a; }
};

inline void check_step(const char* op, int t, int L) {
  if (L < 1) throw std::runtime_error(std::string(op) + ": sequence length must be positive");
  if (t < 1 || t > L) throw std::runtime_error(std::string(op) + ": step t out of range [1, L]");
}

// Full bidirectional visibility.
inline AttentionMask mask_full(int L) {
  if (L < 1) throw std::runtime_error("mask_full: sequence length must be positive");
  return AttentionMask(L, 1);
}

// Semi-independent pattern at step t over a layout whose first t-1 slots are
// clean: every slot sees the clean prefix, masked slots additionally see only
// themselves. A_ij = 1 iff j < t or i == j (slots 1-based in the formula).
inline AttentionMask mask_independent(int t, int L) {
  check_step("mask_independent", t, L);
  AttentionMask m(L);
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < t - 1; ++j) m.set(i, j, 1);
    m.set(i, i, 1);
  }
  return m;
}

// Semi-causal pattern at step t: clean prefix fully visible to everyone,
// causal order among the masked slots. A_ij = 1 iff j < t, or i,j >= t and
// j <= i. Clean rows keep full bidirectional access to the clean prefix only.
inline AttentionMask mask_semi_causal(int t, int L) {
  check_step("mask_semi_causal", t, L);
  AttentionMask m(L);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      if (j < t - 1 || (i >= t - 1 && j >= t - 1 && j <= i)) m.set(i, j, 1);
  return m;
}

// Window truncation for next-token models that jointly predict a bounded
// block: keep the clean prefix (t-1 slots) plus at most n masked slots, drop
// the rest of the sequence entirely. Attention inside the window is fully
// bidirectional.
struct WindowMask {
  AttentionMask mask;
  int retained = 0;  // pass length: min(t-1+n, L)
};

inline WindowMask mask_armtp_window(int t, int L, int n) {
  check_step("mask_armtp_window", t, L);
  if (n < 1) throw std::runtime_error("mask_armtp_window: window must be positive");
  int r = t - 1 + n;
  if (r > L) r = L;
  return WindowMask{mask_full(r), r};
}

}  // namespace latok
