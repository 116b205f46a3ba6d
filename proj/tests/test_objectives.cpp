#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "latok/objectives.hpp"

using namespace latok;

namespace {

constexpr int kV = 11, kMask = 10;

template <typename S>
ModelT<S> toy_model(uint64_t seed, int layers = 2) {
  ModelT<S> m;
  m.cfg.vocab = kV;
  m.cfg.max_len = 16;
  m.cfg.hidden = 32;
  m.cfg.heads = 4;
  m.cfg.layers = layers;
  m.init(seed);
  return m;
}

// Zeroing the readout makes every logit exactly zero: a uniform model.
template <typename S>
void make_uniform(ModelT<S>& m) {
  for (size_t i = 0; i < m.head_w.size(); ++i) m.head_w.data()[i] = S(0);
  for (size_t i = 0; i < m.head_b.size(); ++i) m.head_b.data()[i] = S(0);
}

// Inference-style reference: plain double softmax of one logits row.
template <typename S>
double nll_at(const TensorT<S>& logits, int row, int target) {
  const S* r = logits.data() + (size_t)row * kV;
  double mx = (double)r[0];
  for (int v = 1; v < kV; ++v) mx = std::max(mx, (double)r[v]);
  double z = 0;
  for (int v = 0; v < kV; ++v) z += std::exp((double)r[v] - mx);
  return -((double)r[target] - mx - std::log(z));
}

std::vector<int> row8() { return {3, 1, 4, 1, 5, 9, 2, 6}; }

}  // namespace

TEST_CASE("per-slot weights follow the inverse masked count") {
  std::vector<int> x = {1, 2, 3, 4};
  Rng rng(5, 0);
  CHECK(layout_mdm(x, kMask, 4, rng).weight == 1.0);
  CHECK(layout_mdm(x, kMask, 3, rng).weight == 0.5);
  CHECK(layout_mdm(x, kMask, 1, rng).weight == 0.25);
  CHECK(layout_reordered(x, kMask, 3, rng, true).weight == 0.5);
  CHECK(layout_suffix_mtp(x, kMask, 1).weight == 1.0);  // unit weights here
  CHECK(layout_causal(x, kMask).weight == 0.25);        // mean over L slots
}

TEST_CASE("uniform model collapses every loss to log vocab") {
  auto m = toy_model<double>(1);
  make_uniform(m);
  std::vector<std::vector<int>> batch = {row8(), {0, 1, 2, 3, 4, 5, 6, 7}};
  double lnV = std::log((double)kV);
  Rng rng(11, 0);

  // Inverse-count weighting cancels the masked count exactly.
  CHECK_THAT(loss_mdm(m, batch, kMask, rng).value(), Catch::Matchers::WithinAbs(lnV, 1e-12));
  CHECK_THAT(loss_sidm(m, batch, kMask, rng).value(), Catch::Matchers::WithinAbs(lnV, 1e-12));
  CHECK_THAT(loss_scdm(m, batch, kMask, rng).value(), Catch::Matchers::WithinAbs(lnV, 1e-12));
  CHECK_THAT(loss_ar_standard(m, batch, kMask).value(), Catch::Matchers::WithinAbs(lnV, 1e-12));
  CHECK_THAT(loss_arntp(m, batch, kMask, 3, rng).value(), Catch::Matchers::WithinAbs(lnV, 1e-12));

  // Unit weights: each example contributes (masked count) * ln V.
  auto r = loss_armtp(m, batch, kMask, rng);
  double expect = 0;
  for (int t : r.t) expect += (8.0 - t + 1) * lnV;
  expect /= (double)batch.size();
  CHECK_THAT(r.value(), Catch::Matchers::WithinAbs(expect, 1e-12));
}

TEST_CASE("targets at inactive slots never touch the loss") {
  auto m = toy_model<float>(2);
  std::vector<int> x = row8();
  ExampleLayout a = layout_suffix_mtp(x, kMask, 5);
  ExampleLayout b = a;
  for (int i = 0; i < 4; ++i) b.targets[i] = (b.targets[i] + 3) % (kV - 1);  // clean slots
  float va = fold_examples(m, {a}).data()[0];
  float vb = fold_examples(m, {b}).data()[0];
  CHECK(va == vb);

  ExampleLayout w = layout_window_ntp(x, kMask, 3, 4);
  ExampleLayout w2 = w;
  for (size_t i = 0; i < w2.targets.size(); ++i)
    if (!w2.active[i]) w2.targets[i] = 7;
  CHECK(fold_examples(m, {w}).data()[0] == fold_examples(m, {w2}).data()[0]);
}

TEST_CASE("masked-slot loss ignores the order of other masked slots") {
  // Rows that cannot see a slot are unaffected by where it sits, so a
  // masked slot's term depends only on the clean block and itself.
  auto m = toy_model<double>(3);
  std::vector<int> x = row8();
  int L = 8, t = 4;  // clean {1,4,6}, masked {0,2,3,5,7}

  auto build = [&](const std::vector<int>& masked_order) {
    ExampleLayout e;
    std::vector<int> slots = {1, 4, 6};
    slots.insert(slots.end(), masked_order.begin(), masked_order.end());
    for (int p : slots) {
      bool clean = p == 1 || p == 4 || p == 6;
      e.tokens.push_back(clean ? x[(size_t)p] : kMask);
      e.positions.push_back(p);
      e.targets.push_back(x[(size_t)p]);
      e.active.push_back(clean ? 0 : 1);
    }
    e.mask = mask_independent(t, L);
    e.weight = 1.0;
    return e;
  };

  ExampleLayout a = build({0, 2, 3, 5, 7});
  ExampleLayout b = build({5, 0, 7, 3, 2});
  TensorT<double> la = m.forward(a.tokens, a.positions, a.mask);
  TensorT<double> lb = m.forward(b.tokens, b.positions, b.mask);
  // original position 3 sits at slot 5 in a, slot 6 in b
  CHECK_THAT(nll_at(la, 5, x[3]), Catch::Matchers::WithinAbs(nll_at(lb, 6, x[3]), 1e-9));
  // and position 7: slot 7 in a, slot 5 in b
  CHECK_THAT(nll_at(la, 7, x[7]), Catch::Matchers::WithinAbs(nll_at(lb, 5, x[7]), 1e-9));
}

TEST_CASE("semi-causal last slot sees the full corrupted context") {
  // With one attention layer the context rows contribute raw
  // (token, position) values, so only the read row's visible set matters.
  // The last masked slot sees everything, exactly like a full-attention
  // forward over the same corrupted sequence read at the same position.
  auto m = toy_model<double>(4, 1);
  std::vector<int> x = {3, 1, 4, 1, 5, 9};
  int L = 6, t = 3;  // clean {1,3}, masked {0,2,4,5}

  ExampleLayout e;
  std::vector<int> slots = {1, 3, 2, 5, 0, 4};
  for (int p : slots) {
    bool clean = p == 1 || p == 3;
    e.tokens.push_back(clean ? x[(size_t)p] : kMask);
    e.positions.push_back(p);
  }
  e.mask = mask_semi_causal(t, L);
  TensorT<double> reordered = m.forward(e.tokens, e.positions, e.mask);

  std::vector<int> orig = {kMask, x[1], kMask, x[3], kMask, kMask};
  TensorT<double> full = m.forward(orig, {0, 1, 2, 3, 4, 5}, mask_full(L));

  // last scheduled slot holds original position 4
  CHECK_THAT(nll_at(reordered, 5, x[4]), Catch::Matchers::WithinAbs(nll_at(full, 4, x[4]), 1e-9));
}

TEST_CASE("first-masked restriction equals the inference-path next-token loss") {
  auto m = toy_model<float>(5);
  std::vector<int> x = row8();
  for (int t : {1, 3, 5, 8}) {
    ExampleLayout e = layout_suffix_mtp(x, kMask, t);
    ExampleLayout restricted = e;
    restricted.active.assign(e.active.size(), 0);
    restricted.active[(size_t)t - 1] = 1;
    double objective_path = fold_examples(m, {restricted}).data()[0];
    TensorT<float> logits = m.forward(e.tokens, e.positions, e.mask);
    double inference_path = nll_at(logits, t - 1, x[(size_t)t - 1]);
    CHECK_THAT(objective_path, Catch::Matchers::WithinAbs(inference_path, 1e-5));
  }

  // t = L: the whole suffix is that single term.
  ExampleLayout last = layout_suffix_mtp(x, kMask, 8);
  TensorT<float> logits = m.forward(last.tokens, last.positions, last.mask);
  CHECK_THAT(fold_examples(m, {last}).data()[0],
             Catch::Matchers::WithinAbs(nll_at(logits, 7, x[7]), 1e-5));
}

TEST_CASE("parallel causal pass equals the per-step loop") {
  auto m = toy_model<float>(6);
  std::vector<int> x = row8();
  int L = (int)x.size();
  double parallel = loss_ar_standard(m, {x}, kMask).value();

  double loop = 0;
  for (int t = 1; t <= L; ++t) {
    std::vector<int> in(1, kMask), pos(1, 0);
    for (int i = 1; i < t; ++i) {
      in.push_back(x[(size_t)i - 1]);
      pos.push_back(i);
    }
    TensorT<float> logits = m.forward(in, pos, mask_semi_causal(1, t));
    loop += nll_at(logits, t - 1, x[(size_t)t - 1]);
  }
  loop /= L;
  CHECK_THAT(parallel, Catch::Matchers::WithinAbs(loop, 1e-5));
}

TEST_CASE("window slots participate in attention but not in the loss") {
  auto m = toy_model<float>(7);
  std::vector<int> x = row8();
  int t = 3;

  // Targets past the read slot are never consulted.
  std::vector<int> y = x;
  y[5] = 0;
  y[6] = 8;
  ExampleLayout a = layout_window_ntp(x, kMask, t, 4);
  ExampleLayout b = layout_window_ntp(y, kMask, t, 4);
  CHECK(fold_examples(m, {a}).data()[0] == fold_examples(m, {b}).data()[0]);

  // Wider windows change the value through attention alone.
  double n1 = fold_examples(m, {layout_window_ntp(x, kMask, t, 1)}).data()[0];
  double n3 = fold_examples(m, {layout_window_ntp(x, kMask, t, 3)}).data()[0];
  CHECK(n1 != n3);

  // Position embeddings of the extra window slots get gradient only when
  // those slots exist.
  for (int n : {1, 3}) {
    m.zero_grad();
    TapeT<float> tape;
    TapeT<float>::Scope scope(tape);
    TensorT<float> loss = chain_examples(m, {layout_window_ntp(x, kMask, t, n)});
    tape.backward(loss);
    double wgrad = 0;
    for (int p = t; p < t - 1 + n && p < 8; ++p)
      for (int j = 0; j < m.cfg.hidden; ++j)
        wgrad += std::abs(m.pos_emb.grad()[(size_t)p * m.cfg.hidden + j]);
    if (n == 1)
      CHECK(wgrad == 0.0);
    else
      CHECK(wgrad > 0.0);
  }
}

TEST_CASE("window of one at the last step is exactly the single-mask suffix") {
  auto m = toy_model<float>(8);
  std::vector<int> x = row8();
  ExampleLayout w = layout_window_ntp(x, kMask, 8, 1);
  ExampleLayout s = layout_suffix_mtp(x, kMask, 8);
  REQUIRE(w.tokens == s.tokens);
  CHECK(fold_examples(m, {w}).data()[0] == fold_examples(m, {s}).data()[0]);
}

TEST_CASE("length-one sequences make the reordered and plain losses coincide") {
  auto m = toy_model<double>(9);
  std::vector<std::vector<int>> batch = {{4}, {7}};
  Rng r1(3, 0), r2(3, 0);
  double a = loss_mdm(m, batch, kMask, r1).value();
  double b = loss_sidm(m, batch, kMask, r2).value();
  CHECK(a == b);
}

TEST_CASE("losses are deterministic, finite, and non-negative") {
  auto m = toy_model<float>(10);
  std::vector<std::vector<int>> batch = {row8(), {0, 1, 2, 3, 4, 5, 6, 7}, {9, 9, 8, 8, 7, 7, 6, 6}};

  Rng a(21, 0), b(21, 0);
  CHECK(loss_scdm(m, batch, kMask, a).value() == loss_scdm(m, batch, kMask, b).value());

  Rng rng(22, 0);
  for (double v : {loss_mdm(m, batch, kMask, rng).value(), loss_sidm(m, batch, kMask, rng).value(),
                   loss_scdm(m, batch, kMask, rng).value(), loss_armtp(m, batch, kMask, rng).value(),
                   loss_arntp(m, batch, kMask, 2, rng).value(),
                   loss_ar_standard(m, batch, kMask).value()}) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
  }
}

TEST_CASE("objective entry points reject malformed batches") {
  auto m = toy_model<float>(12);
  Rng rng(1, 0);
  std::vector<std::vector<int>> empty;
  CHECK_THROWS(loss_mdm(m, empty, kMask, rng));
  std::vector<std::vector<int>> has_mask = {{1, kMask, 2}};
  CHECK_THROWS(loss_mdm(m, has_mask, kMask, rng));
  std::vector<std::vector<int>> out_of_vocab = {{1, 99, 2}};
  CHECK_THROWS(loss_armtp(m, out_of_vocab, kMask, rng));
  ExampleLayout a = layout_suffix_mtp({1, 2, 3}, kMask, 2);
  ExampleLayout b = layout_suffix_mtp({1, 2, 3, 4}, kMask, 2);
  CHECK_THROWS(fold_examples(m, {a, b}));
}
