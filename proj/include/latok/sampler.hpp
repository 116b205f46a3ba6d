#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "latok/attention.hpp"
#include "latok/diffusion.hpp"
#include "latok/model.hpp"
#include "latok/rng.hpp"

namespace latok {

// Anything that can turn (tokens, positions, mask) into logits. Samplers talk
// to this interface so tests can substitute hand-built distributions.
struct Predictor {
  virtual ~Predictor() = default;
  virtual int vocab() const = 0;
  // Row-major (len x vocab) logits for one sequence.
  virtual std::vector<float> logits(const std::vector<int>& tokens,
                                    const std::vector<int>& positions,
                                    const AttentionMask& mask) = 0;
};

struct TransformerPredictor final : Predictor {
  const Model& model;
  explicit TransformerPredictor(const Model& m) : model(m) {}
  int vocab() const override { return model.cfg.vocab; }
  std::vector<float> logits(const std::vector<int>& tokens, const std::vector<int>& positions,
                            const AttentionMask& mask) override {
    Tensor out = model.forward(tokens, positions, mask);
    return std::vector<float>(out.data(), out.data() + out.size());
  }
};

struct DecodeOptions {
  bool greedy = false;
  double temperature = 1.0;     // sampling only; greedy ignores it
  bool record_layouts = false;  // keep per-step input layouts in the trace
};

struct StepTrace {
  int pos = -1;              // original position decoded this step
  int token = -1;            // value written there
  double confidence = 0.0;   // max_v p at temperature 1, mask excluded
  std::vector<int> layout;   // original positions of the pass input, if recorded
};

struct SampleRunReport {
  std::vector<int> tokens;        // final sequence, original order
  uint64_t tokens_processed = 0;  // sum of forward-pass input lengths
  int steps = 0;                  // decode steps (= forward passes here)
  std::vector<StepTrace> trace;
};

// Cost of a relative to b, in processed tokens.
inline double meter_ratio(const SampleRunReport& a, const SampleRunReport& b) {
  if (b.tokens_processed == 0) throw std::runtime_error("meter_ratio: zero-cost baseline");
  return (double)a.tokens_processed / (double)b.tokens_processed;
}

namespace detail {

struct Decoded {
  int token;
  double confidence;
};

// Confidence comes from the temperature-1 distribution (the model's own
// prediction); the decode draw respects opts.temperature. The mask token is
// banned from the support in both.
inline Decoded decode_row(const float* row, int V, int mask_id, const DecodeOptions& opts,
                          Rng& rng) {
  if (opts.temperature <= 0) throw std::runtime_error("decode: temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  int arg = -1;
  for (int v = 0; v < V; ++v) {
    if (v == mask_id) continue;
    if ((double)row[v] > mx) {
      mx = (double)row[v];
      arg = v;
    }
  }
  if (arg < 0) throw std::runtime_error("decode: empty support");
  double z1 = 0;
  for (int v = 0; v < V; ++v)
    if (v != mask_id) z1 += std::exp((double)row[v] - mx);
  Decoded d{arg, 1.0 / z1};
  if (opts.greedy) return d;

  double zt = 0;
  for (int v = 0; v < V; ++v)
    if (v != mask_id) zt += std::exp(((double)row[v] - mx) / opts.temperature);
  double threshold = rng.uniform_double() * zt;
  double acc = 0;
  int last_valid = arg;
  for (int v = 0; v < V; ++v) {
    if (v == mask_id) continue;
    acc += std::exp(((double)row[v] - mx) / opts.temperature);
    last_valid = v;
    if (acc > threshold) {
      d.token = v;
      return d;
    }
  }
  d.token = last_valid;  // fp guard: acc summed to just under the threshold
  return d;
}

inline void check_state_vocab(const SequenceState& st, const Predictor& pred, const char* op) {
  int V = pred.vocab();
  if (st.mask_id < 0 || st.mask_id >= V)
    throw std::runtime_error(std::string(op) + ": mask id outside model vocabulary");
  for (int i = 0; i < st.len; ++i)
    if (st.tokens[i] < 0 || st.tokens[i] >= V)
      throw std::runtime_error(std::string(op) + ": token outside model vocabulary");
}

inline std::vector<int> iota(int n) {
  std::vector<int> v(n);
  for (int i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

enum class PlannedVariant { MDM, SIDM, SCDM };

// One position per step along a fixed schedule. The schedule's prefix must be
// exactly the clean set of the starting state (prompt positions count as
// already decoded); sampling begins at the first masked slot.
inline SampleRunReport sample_planned(Predictor& pred, const SequenceState& start,
                                      const Schedule& pi, PlannedVariant variant,
                                      const DecodeOptions& opts, Rng& rng) {
  detail::check_state_vocab(start, pred, "sample_planned");
  check_schedule(pi, start.len, "sample_planned");
  SequenceState st = start;
  int L = st.len, t0 = st.clean_count();
  for (int s = 0; s < t0; ++s)
    if (!st.clean[(size_t)pi[(size_t)s]])
      throw std::runtime_error("sample_planned: schedule prefix must cover the clean set");

  SampleRunReport rep;
  std::vector<int> full_pos = detail::iota(L);
  AttentionMask full = mask_full(L);
  for (int t = t0 + 1; t <= L; ++t) {
    int target = pi[(size_t)t - 1];
    StepTrace step;
    std::vector<float> lg;
    int read_row;
    if (variant == PlannedVariant::MDM) {
      lg = pred.logits(st.tokens, full_pos, full);
      read_row = target;
      rep.tokens_processed += (uint64_t)L;
      if (opts.record_layouts) step.layout = full_pos;
    } else {
      std::vector<int> toks, pos;
      for (int s = 0; s < t - 1; ++s) {
        toks.push_back(st.tokens[(size_t)pi[(size_t)s]]);
        pos.push_back(pi[(size_t)s]);
      }
      toks.push_back(st.mask_id);
      pos.push_back(target);
      AttentionMask m = variant == PlannedVariant::SIDM ? mask_independent(t, t)
                                                        : mask_semi_causal(t, t);
      lg = pred.logits(toks, pos, m);
      read_row = t - 1;
      rep.tokens_processed += (uint64_t)t;
      if (opts.record_layouts) step.layout = pos;
    }
    detail::Decoded d =
        detail::decode_row(lg.data() + (size_t)read_row * pred.vocab(), pred.vocab(), st.mask_id,
                           opts, rng);
    st.tokens[(size_t)target] = d.token;
    st.clean[(size_t)target] = 1;
    step.pos = target;
    step.token = d.token;
    step.confidence = d.confidence;
    rep.trace.push_back(std::move(step));
    ++rep.steps;
  }
  rep.tokens = st.tokens;
  return rep;
}

// Several positions per step: each set is decoded conditionally independently
// from one full-length forward pass (ascending position order within a set).
inline SampleRunReport sample_set_schedule(Predictor& pred, const SequenceState& start,
                                           const SetSchedule& sets, const DecodeOptions& opts,
                                           Rng& rng) {
  detail::check_state_vocab(start, pred, "sample_set_schedule");
  SequenceState st = start;
  int L = st.len;
  std::vector<uint8_t> seen(L, 0);
  size_t covered = 0, masked = 0;
  for (int i = 0; i < L; ++i) masked += st.clean[(size_t)i] ? 0 : 1;
  for (const auto& group : sets) {
    if (group.empty()) throw std::runtime_error("sample_set_schedule: empty set");
    for (int p : group) {
      if (p < 0 || p >= L) throw std::runtime_error("sample_set_schedule: position out of range");
      if (st.clean[(size_t)p])
        throw std::runtime_error("sample_set_schedule: set contains a clean position");
      if (seen[(size_t)p]) throw std::runtime_error("sample_set_schedule: position repeated");
      seen[(size_t)p] = 1;
      ++covered;
    }
  }
  if (covered != masked)
    throw std::runtime_error("sample_set_schedule: sets must cover every masked position");

  SampleRunReport rep;
  std::vector<int> full_pos = detail::iota(L);
  AttentionMask full = mask_full(L);
  for (const auto& group : sets) {
    std::vector<float> lg = pred.logits(st.tokens, full_pos, full);
    rep.tokens_processed += (uint64_t)L;
    ++rep.steps;
    std::vector<int> ordered = group;
    std::sort(ordered.begin(), ordered.end());
    for (int p : ordered) {
      detail::Decoded d = detail::decode_row(lg.data() + (size_t)p * pred.vocab(), pred.vocab(),
                                             st.mask_id, opts, rng);
      st.tokens[(size_t)p] = d.token;
      st.clean[(size_t)p] = 1;
      StepTrace step;
      step.pos = p;
      step.token = d.token;
      step.confidence = d.confidence;
      if (opts.record_layouts) step.layout = full_pos;
      rep.trace.push_back(std::move(step));
    }
  }
  rep.tokens = st.tokens;
  return rep;
}

// Planned semi-causal decoding with n latent mask slots: at step t, up to n
// future masked positions are drawn uniformly without replacement and placed
// before the target, so its prediction can attend to them. Only the target is
// decoded. n = 0 draws nothing from the generator and reproduces
// sample_planned(SCDM) exactly.
inline SampleRunReport sample_scdm_ltm(Predictor& pred, const SequenceState& start,
                                       const Schedule& pi, int n, const DecodeOptions& opts,
                                       Rng& rng) {
  if (n < 0) throw std::runtime_error("sample_scdm_ltm: latent count must be >= 0");
  detail::check_state_vocab(start, pred, "sample_scdm_ltm");
  check_schedule(pi, start.len, "sample_scdm_ltm");
  SequenceState st = start;
  int L = st.len, t0 = st.clean_count();
  for (int s = 0; s < t0; ++s)
    if (!st.clean[(size_t)pi[(size_t)s]])
      throw std::runtime_error("sample_scdm_ltm: schedule prefix must cover the clean set");

  SampleRunReport rep;
  for (int t = t0 + 1; t <= L; ++t) {
    int target = pi[(size_t)t - 1];
    std::vector<int> future(pi.begin() + t, pi.end());
    int z = std::min(n, (int)future.size());
    std::vector<int> latents = rng.perm_prefix(future, (size_t)z);

    std::vector<int> toks, pos;
    for (int s = 0; s < t - 1; ++s) {
      toks.push_back(st.tokens[(size_t)pi[(size_t)s]]);
      pos.push_back(pi[(size_t)s]);
    }
    for (int p : latents) {
      toks.push_back(st.mask_id);
      pos.push_back(p);
    }
    toks.push_back(st.mask_id);
    pos.push_back(target);
    int r = (int)toks.size();
    AttentionMask m = mask_semi_causal(t, r);
    std::vector<float> lg = pred.logits(toks, pos, m);
    rep.tokens_processed += (uint64_t)r;

    detail::Decoded d = detail::decode_row(lg.data() + (size_t)(r - 1) * pred.vocab(),
                                           pred.vocab(), st.mask_id, opts, rng);
    st.tokens[(size_t)target] = d.token;
    st.clean[(size_t)target] = 1;
    StepTrace step;
    step.pos = target;
    step.token = d.token;
    step.confidence = d.confidence;
    if (opts.record_layouts) step.layout = pos;
    rep.trace.push_back(std::move(step));
    ++rep.steps;
  }
  rep.tokens = st.tokens;
  return rep;
}

// Confidence-ordered decoding: per step the candidate with the highest
// max-probability is decoded (ties to the lowest original index) and the
// schedule is updated in place. Candidates are the first min(k, remaining)
// masked positions in current schedule order, for every variant alike.
inline SampleRunReport sample_adaptive_topprob(Predictor& pred, const SequenceState& start,
                                               PlannedVariant variant, int k,
                                               const DecodeOptions& opts, Rng& rng) {
  if (k < 1) throw std::runtime_error("sample_adaptive_topprob: candidate count must be >= 1");
  detail::check_state_vocab(start, pred, "sample_adaptive_topprob");
  SequenceState st = start;
  int L = st.len, t0 = st.clean_count(), V = pred.vocab();

  Schedule pi;
  for (int i = 0; i < L; ++i)
    if (st.clean[(size_t)i]) pi.push_back(i);
  for (int i = 0; i < L; ++i)
    if (!st.clean[(size_t)i]) pi.push_back(i);

  SampleRunReport rep;
  std::vector<int> full_pos = detail::iota(L);
  AttentionMask full = mask_full(L);
  for (int t = t0 + 1; t <= L; ++t) {
    int remaining = L - t + 1;
    int c = std::min(k, remaining);
    std::vector<int> candidates(pi.begin() + (t - 1), pi.begin() + (t - 1) + c);

    std::vector<float> lg;
    std::vector<int> rows(c);  // logits row of each candidate
    StepTrace step;
    if (variant == PlannedVariant::MDM) {
      lg = pred.logits(st.tokens, full_pos, full);
      rep.tokens_processed += (uint64_t)L;
      for (int i = 0; i < c; ++i) rows[(size_t)i] = candidates[(size_t)i];
      if (opts.record_layouts) step.layout = full_pos;
    } else {
      std::vector<int> toks, pos;
      for (int s = 0; s < t - 1; ++s) {
        toks.push_back(st.tokens[(size_t)pi[(size_t)s]]);
        pos.push_back(pi[(size_t)s]);
      }
      for (int i = 0; i < c; ++i) {
        toks.push_back(st.mask_id);
        pos.push_back(candidates[(size_t)i]);
        rows[(size_t)i] = t - 1 + i;
      }
      int r = (int)toks.size();
      AttentionMask m = variant == PlannedVariant::SIDM ? mask_independent(t, r)
                                                        : mask_semi_causal(t, r);
      lg = pred.logits(toks, pos, m);
      rep.tokens_processed += (uint64_t)r;
      if (opts.record_layouts) step.layout = pos;
    }

    // argmax confidence; ties to the lowest original position index
    int best = -1;
    double best_conf = -1.0;
    for (int i = 0; i < c; ++i) {
      const float* row = lg.data() + (size_t)rows[(size_t)i] * V;
      double mx = -std::numeric_limits<double>::infinity();
      for (int v = 0; v < V; ++v)
        if (v != st.mask_id) mx = std::max(mx, (double)row[v]);
      double z = 0;
      for (int v = 0; v < V; ++v)
        if (v != st.mask_id) z += std::exp((double)row[v] - mx);
      double conf = 1.0 / z;
      bool wins = conf > best_conf ||
                  (conf == best_conf && candidates[(size_t)i] < candidates[(size_t)best]);
      if (best < 0 || wins) {
        best = i;
        best_conf = conf;
      }
    }
    int target = candidates[(size_t)best];
    detail::Decoded d = detail::decode_row(lg.data() + (size_t)rows[(size_t)best] * V, V,
                                           st.mask_id, opts, rng);
    st.tokens[(size_t)target] = d.token;
    st.clean[(size_t)target] = 1;
    update_schedule_adaptive(pi, t - 1, target);

    step.pos = target;
    step.token = d.token;
    step.confidence = best_conf;
    rep.trace.push_back(std::move(step));
    ++rep.steps;
  }
  rep.tokens = st.tokens;
  return rep;
}

// Latent modulation plus adaptive candidates: n latent masks precede the
// min(k, remaining) candidate masks; confidence is computed for candidates
// only. k = 1 reduces to sample_scdm_ltm draw for draw.
inline SampleRunReport sample_adaptive_ltm(Predictor& pred, const SequenceState& start, int n,
                                           int k, const DecodeOptions& opts, Rng& rng) {
  if (n < 0) throw std::runtime_error("sample_adaptive_ltm: latent count must be >= 0");
  if (k < 1) throw std::runtime_error("sample_adaptive_ltm: candidate count must be >= 1");
  detail::check_state_vocab(start, pred, "sample_adaptive_ltm");
  SequenceState st = start;
  int L = st.len, t0 = st.clean_count(), V = pred.vocab();

  Schedule pi;
  for (int i = 0; i < L; ++i)
    if (st.clean[(size_t)i]) pi.push_back(i);
  for (int i = 0; i < L; ++i)
    if (!st.clean[(size_t)i]) pi.push_back(i);

  SampleRunReport rep;
  for (int t = t0 + 1; t <= L; ++t) {
    int remaining = L - t + 1;
    int c = std::min(k, remaining);
    std::vector<int> candidates(pi.begin() + (t - 1), pi.begin() + (t - 1) + c);
    std::vector<int> pool(pi.begin() + (t - 1) + c, pi.end());
    int z = std::min(n, (int)pool.size());
    std::vector<int> latents = rng.perm_prefix(pool, (size_t)z);

    std::vector<int> toks, pos;
    for (int s = 0; s < t - 1; ++s) {
      toks.push_back(st.tokens[(size_t)pi[(size_t)s]]);
      pos.push_back(pi[(size_t)s]);
    }
    for (int p : latents) {
      toks.push_back(st.mask_id);
      pos.push_back(p);
    }
    int first_candidate_row = (int)toks.size();
    for (int p : candidates) {
      toks.push_back(st.mask_id);
      pos.push_back(p);
    }
    int r = (int)toks.size();
    AttentionMask m = mask_semi_causal(t, r);
    std::vector<float> lg = pred.logits(toks, pos, m);
    rep.tokens_processed += (uint64_t)r;

    int best = -1;
    double best_conf = -1.0;
    for (int i = 0; i < c; ++i) {
      const float* row = lg.data() + (size_t)(first_candidate_row + i) * V;
      double mx = -std::numeric_limits<double>::infinity();
      for (int v = 0; v < V; ++v)
        if (v != st.mask_id) mx = std::max(mx, (double)row[v]);
      double zz = 0;
      for (int v = 0; v < V; ++v)
        if (v != st.mask_id) zz += std::exp((double)row[v] - mx);
      double conf = 1.0 / zz;
      bool wins = conf > best_conf ||
                  (conf == best_conf && candidates[(size_t)i] < candidates[(size_t)best]);
      if (best < 0 || wins) {
        best = i;
        best_conf = conf;
      }
    }
    int target = candidates[(size_t)best];
    detail::Decoded d = detail::decode_row(lg.data() + (size_t)(first_candidate_row + best) * V,
                                           V, st.mask_id, opts, rng);
    st.tokens[(size_t)target] = d.token;
    st.clean[(size_t)target] = 1;
    update_schedule_adaptive(pi, t - 1, target);

    StepTrace step;
    step.pos = target;
    step.token = d.token;
    step.confidence = best_conf;
    if (opts.record_layouts) step.layout = pos;
    rep.trace.push_back(std::move(step));
    ++rep.steps;
  }
  rep.tokens = st.tokens;
  return rep;
}

enum class ArVariant { AR, ARMTP, ARMTP_WINDOW };

// Left-to-right decoding. AR grows a causal prefix with a mask sentinel as
// the start token; ARMTP keeps the full masked suffix in a bidirectional
// pass; the windowed form truncates that suffix to n slots. The clean set of
// the starting state must be a prefix (prompts are prefixes here).
inline SampleRunReport sample_autoregressive(Predictor& pred, const SequenceState& start,
                                             ArVariant variant, int window,
                                             const DecodeOptions& opts, Rng& rng) {
  detail::check_state_vocab(start, pred, "sample_autoregressive");
  if (variant == ArVariant::ARMTP_WINDOW && window < 1)
    throw std::runtime_error("sample_autoregressive: window must be >= 1");
  SequenceState st = start;
  int L = st.len, t0 = st.clean_count();
  for (int i = 0; i < t0; ++i)
    if (!st.clean[(size_t)i])
      throw std::runtime_error("sample_autoregressive: clean set must be a prefix");

  SampleRunReport rep;
  for (int t = t0 + 1; t <= L; ++t) {
    std::vector<int> toks, pos;
    int read_row;
    AttentionMask m{0, {}};
    if (variant == ArVariant::AR) {
      toks.push_back(st.mask_id);  // start-of-sequence stand-in
      pos.push_back(0);
      for (int i = 0; i < t - 1; ++i) {
        toks.push_back(st.tokens[(size_t)i]);
        pos.push_back(i + 1);
      }
      read_row = t - 1;
      m = mask_semi_causal(1, t);
    } else {
      int r = variant == ArVariant::ARMTP ? L : mask_armtp_window(t, L, window).retained;
      for (int i = 0; i < t - 1; ++i) {
        toks.push_back(st.tokens[(size_t)i]);
        pos.push_back(i);
      }
      for (int i = t - 1; i < r; ++i) {
        toks.push_back(st.mask_id);
        pos.push_back(i);
      }
      read_row = t - 1;
      m = mask_full(r);
    }
    std::vector<float> lg = pred.logits(toks, pos, m);
    rep.tokens_processed += (uint64_t)toks.size();

    detail::Decoded d = detail::decode_row(lg.data() + (size_t)read_row * pred.vocab(),
                                           pred.vocab(), st.mask_id, opts, rng);
    st.tokens[(size_t)t - 1] = d.token;
    st.clean[(size_t)t - 1] = 1;
    StepTrace step;
    step.pos = t - 1;
    step.token = d.token;
    step.confidence = d.confidence;
    if (opts.record_layouts) step.layout = pos;
    rep.trace.push_back(std::move(step));
    ++rep.steps;
  }
  rep.tokens = st.tokens;
  return rep;
}

}  // namespace latok
