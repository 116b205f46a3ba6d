#pragma once
#include <stdexcept>
#include <string>
#include <vector>

#include "latok/diffusion.hpp"
#include "latok/model.hpp"
#include "latok/rng.hpp"
#include "latok/tensor.hpp"

namespace latok {

// One training example in its final layout: what the model sees (tokens,
// positions, mask) plus where the loss reads targets. `weight` multiplies the
// cross entropy at every active slot; inactive slots contribute an exact zero.
struct ExampleLayout {
  std::vector<int> tokens, positions, targets;
  std::vector<uint8_t> active;
  AttentionMask mask{0, {}};
  double weight = 1.0;
  int t = 0;  // the step draw that produced this layout, for diagnostics
};

namespace detail {

inline void check_clean_row(const std::vector<int>& clean, int vocab, int mask_id) {
  if (clean.empty()) throw std::runtime_error("objective: empty sequence");
  if (mask_id < 0 || mask_id >= vocab) throw std::runtime_error("objective: mask id outside vocab");
  for (int v : clean)
    if (v < 0 || v >= vocab || v == mask_id)
      throw std::runtime_error("objective: clean token outside vocab or equal to mask id");
}

inline std::vector<int> iota_positions(int L) {
  std::vector<int> p(L);
  for (int i = 0; i < L; ++i) p[i] = i;
  return p;
}

}  // namespace detail

// ---- Layout builders -------------------------------------------------------
// Builders take an explicit step t so identities can be tested at fixed t;
// the loss_* entry points draw t ~ Unif{1..L} themselves.

// Original order, suffix of forward_corrupt masks, full bidirectional
// attention, per-slot weight 1/(masked count).
inline ExampleLayout layout_mdm(const std::vector<int>& clean, int mask_id, int t, Rng& rng) {
  int L = (int)clean.size();
  SequenceState st = forward_corrupt(clean, t, mask_id, rng);
  ExampleLayout e;
  e.tokens = st.tokens;
  e.positions = detail::iota_positions(L);
  e.targets = clean;
  e.active.assign(L, 0);
  for (int i = 0; i < L; ++i) e.active[i] = st.clean[i] ? 0 : 1;
  e.mask = mask_full(L);
  e.weight = 1.0 / (L - t + 1);
  e.t = t;
  return e;
}

// Reordered layout (clean block first, masked block after) under a uniformly
// random consistent schedule, with the independent or semi-causal mask.
inline ExampleLayout layout_reordered(const std::vector<int>& clean, int mask_id, int t, Rng& rng,
                                      bool semi_causal) {
  int L = (int)clean.size();
  SequenceState st = forward_corrupt(clean, t, mask_id, rng);
  Schedule pi = random_schedule_uniform(st, rng);
  ReorderedInput r = reorder(st, pi);
  ExampleLayout e;
  e.tokens = r.tokens;
  e.positions = r.positions;
  e.targets.resize(L);
  for (int i = 0; i < L; ++i) e.targets[i] = clean[(size_t)r.positions[i]];
  e.active.assign(L, 0);
  for (int i = t - 1; i < L; ++i) e.active[i] = 1;
  e.mask = semi_causal ? mask_semi_causal(t, L) : mask_independent(t, L);
  e.weight = 1.0 / (L - t + 1);
  e.t = t;
  return e;
}

// Right-side corruption: positions t..L (1-based) masked, bidirectional
// attention, unshifted targets, unit weights.
inline ExampleLayout layout_suffix_mtp(const std::vector<int>& clean, int mask_id, int t) {
  int L = (int)clean.size();
  check_step("layout_suffix_mtp", t, L);
  ExampleLayout e;
  e.tokens = clean;
  for (int i = t - 1; i < L; ++i) e.tokens[i] = mask_id;
  e.positions = detail::iota_positions(L);
  e.targets = clean;
  e.active.assign(L, 0);
  for (int i = t - 1; i < L; ++i) e.active[i] = 1;
  e.mask = mask_full(L);
  e.weight = 1.0;
  e.t = t;
  return e;
}

// Windowed next-token layout: clean prefix, then min(n, L-t+1) mask slots.
// Only the first masked slot carries loss; the rest just join attention.
inline ExampleLayout layout_window_ntp(const std::vector<int>& clean, int mask_id, int t, int n) {
  int L = (int)clean.size();
  if (n < 1) throw std::runtime_error("layout_window_ntp: window must be >= 1");
  WindowMask wm = mask_armtp_window(t, L, n);
  int r = wm.retained;
  ExampleLayout e;
  e.tokens.assign(clean.begin(), clean.begin() + r);
  for (int i = t - 1; i < r; ++i) e.tokens[i] = mask_id;
  e.positions = detail::iota_positions(r);
  e.targets.assign(r, 0);
  e.targets[t - 1] = clean[(size_t)t - 1];
  e.active.assign(r, 0);
  e.active[t - 1] = 1;
  e.mask = wm.mask;
  e.weight = 1.0;
  e.t = t;
  return e;
}

// Left-to-right layout: a mask sentinel stands in for the start-of-sequence
// token, so slot i predicts clean[i] from everything before it. All L
// positions train in one causal pass.
inline ExampleLayout layout_causal(const std::vector<int>& clean, int mask_id) {
  int L = (int)clean.size();
  ExampleLayout e;
  e.tokens.resize(L);
  e.tokens[0] = mask_id;
  for (int i = 1; i < L; ++i) e.tokens[i] = clean[(size_t)i - 1];
  e.positions = detail::iota_positions(L);
  e.targets = clean;
  e.active.assign(L, 1);
  e.mask = mask_semi_causal(1, L);
  e.weight = 1.0 / L;
  e.t = 0;
  return e;
}

// ---- Graph reduction -------------------------------------------------------

template <typename S>
struct LossResult {
  TensorT<S> loss;     // scalar node on the active tape
  std::vector<int> t;  // per-example step draws
  double value() const { return (double)loss.data()[0]; }
};

// All examples share one layout length: fold into a single batched forward.
// Batch reduction is the mean over examples of their weighted sums.
template <typename S>
TensorT<S> fold_examples(const ModelT<S>& model, const std::vector<ExampleLayout>& ex) {
  if (ex.empty()) throw std::runtime_error("fold_examples: empty batch");
  int B = (int)ex.size(), L = (int)ex[0].tokens.size();
  std::vector<int> tokens, positions, targets;
  std::vector<uint8_t> active;
  std::vector<const AttentionMask*> masks;
  std::vector<S> w;
  tokens.reserve((size_t)B * L);
  for (const ExampleLayout& e : ex) {
    if ((int)e.tokens.size() != L) throw std::runtime_error("fold_examples: unequal layout lengths");
    tokens.insert(tokens.end(), e.tokens.begin(), e.tokens.end());
    positions.insert(positions.end(), e.positions.begin(), e.positions.end());
    targets.insert(targets.end(), e.targets.begin(), e.targets.end());
    active.insert(active.end(), e.active.begin(), e.active.end());
    masks.push_back(&e.mask);
    for (int i = 0; i < L; ++i) w.push_back((S)(e.weight / B));
  }
  TensorT<S> logits = model.forward_batch(tokens, positions, masks, B, L);
  return weighted_sum(cross_entropy_rows(logits, targets, active), w);
}

// Layout lengths differ: one forward per example, summed then averaged.
template <typename S>
TensorT<S> chain_examples(const ModelT<S>& model, const std::vector<ExampleLayout>& ex) {
  if (ex.empty()) throw std::runtime_error("chain_examples: empty batch");
  TensorT<S> total;
  for (const ExampleLayout& e : ex) {
    TensorT<S> logits = model.forward(e.tokens, e.positions, e.mask);
    std::vector<S> w(e.tokens.size(), (S)(e.weight / ex.size()));
    TensorT<S> part = weighted_sum(cross_entropy_rows(logits, e.targets, e.active), w);
    total = total.defined() ? add(total, part) : part;
  }
  return total;
}

// ---- Entry points ----------------------------------------------------------

namespace detail {

template <typename S>
using LayoutFn = ExampleLayout (*)(const std::vector<int>&, int, int, Rng&);

template <typename S>
LossResult<S> batched_loss(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                           int mask_id, Rng& rng, LayoutFn<S> fn) {
  if (clean.empty()) throw std::runtime_error("objective: empty batch");
  std::vector<ExampleLayout> ex;
  LossResult<S> out;
  for (const std::vector<int>& row : clean) {
    check_clean_row(row, model.cfg.vocab, mask_id);
    int t = (int)rng.below((uint64_t)row.size()) + 1;
    ex.push_back(fn(row, mask_id, t, rng));
    out.t.push_back(t);
  }
  out.loss = fold_examples(model, ex);
  return out;
}

}  // namespace detail

// Monte-Carlo masked-denoising loss: original order, full attention.
template <typename S>
LossResult<S> loss_mdm(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                       int mask_id, Rng& rng) {
  return detail::batched_loss<S>(model, clean, mask_id, rng,
                                 [](const std::vector<int>& row, int mid, int t, Rng& r) {
                                   return layout_mdm(row, mid, t, r);
                                 });
}

// Reordered layout with the independent (mask-slots-blind) attention pattern.
template <typename S>
LossResult<S> loss_sidm(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                        int mask_id, Rng& rng) {
  return detail::batched_loss<S>(model, clean, mask_id, rng,
                                 [](const std::vector<int>& row, int mid, int t, Rng& r) {
                                   return layout_reordered(row, mid, t, r, false);
                                 });
}

// Reordered layout with the semi-causal (causal-among-masked) pattern.
template <typename S>
LossResult<S> loss_scdm(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                        int mask_id, Rng& rng) {
  return detail::batched_loss<S>(model, clean, mask_id, rng,
                                 [](const std::vector<int>& row, int mid, int t, Rng& r) {
                                   return layout_reordered(row, mid, t, r, true);
                                 });
}

// Multi-token prediction over a uniformly drawn masked suffix, unit weights.
template <typename S>
LossResult<S> loss_armtp(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                         int mask_id, Rng& rng) {
  return detail::batched_loss<S>(model, clean, mask_id, rng,
                                 [](const std::vector<int>& row, int mid, int t, Rng&) {
                                   return layout_suffix_mtp(row, mid, t);
                                 });
}

// Windowed variant: loss only at the next token; the other window slots
// participate in attention but never in the loss.
template <typename S>
LossResult<S> loss_arntp(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                         int mask_id, int n, Rng& rng) {
  if (clean.empty()) throw std::runtime_error("objective: empty batch");
  std::vector<ExampleLayout> ex;
  LossResult<S> out;
  for (const std::vector<int>& row : clean) {
    detail::check_clean_row(row, model.cfg.vocab, mask_id);
    int t = (int)rng.below((uint64_t)row.size()) + 1;
    ex.push_back(layout_window_ntp(row, mask_id, t, n));
    out.t.push_back(t);
  }
  out.loss = chain_examples(model, ex);  // window lengths vary with t
  return out;
}

// Standard left-to-right training: every position in one causal pass.
template <typename S>
LossResult<S> loss_ar_standard(const ModelT<S>& model, const std::vector<std::vector<int>>& clean,
                               int mask_id) {
  if (clean.empty()) throw std::runtime_error("objective: empty batch");
  std::vector<ExampleLayout> ex;
  LossResult<S> out;
  for (const std::vector<int>& row : clean) {
    detail::check_clean_row(row, model.cfg.vocab, mask_id);
    ex.push_back(layout_causal(row, mask_id));
    out.t.push_back(0);
  }
  out.loss = fold_examples(model, ex);
  return out;
}

}  // namespace latok
