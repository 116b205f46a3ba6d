#include <catch2/catch_amalgamated.hpp>
#include <functional>

#include "latok/optim.hpp"
#include "latok/rng.hpp"
#include "latok/tensor.hpp"

using namespace latok;
using T64 = TensorT<double>;
using T32 = TensorT<float>;

namespace {

T64 randn64(std::vector<int> shape, Rng& rng, double sd = 1.0, bool rg = true) {
  T64 t = T64::zeros(std::move(shape), rg);
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, sd);
  return t;
}

// Central-difference oracle at h = 1e-3 on the double instantiation: every
// element of every listed input must match the analytic gradient within
// relative error 1e-3 (tiny absolute floor covers h^2 truncation noise on
// near-zero gradients).
void check_grads(const std::vector<T64*>& inputs, const std::function<T64()>& fn,
                 double h = 1e-3, double tol = 1e-3) {
  for (T64* in : inputs) in->zero_grad();
  TapeT<double> tape;
  {
    TapeT<double>::Scope scope(tape);
    T64 loss = fn();
    tape.backward(loss);
  }
  for (size_t which = 0; which < inputs.size(); ++which) {
    T64& in = *inputs[which];
    for (size_t i = 0; i < in.size(); ++i) {
      double keep = in.data()[i];
      in.data()[i] = keep + h;
      double fp = fn().item();
      in.data()[i] = keep - h;
      double fm = fn().item();
      in.data()[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double an = in.grad()[i];
      double err = std::abs(fd - an);
      double denom = std::max(std::abs(fd), std::abs(an));
      INFO("input " << which << " element " << i << " fd=" << fd << " analytic=" << an);
      CHECK((err <= tol * denom || err <= 1e-6));
    }
  }
}

std::vector<double> randw(size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.normal(0.0, 1.0);
  return w;
}

}  // namespace

TEST_CASE("matmul matches a hand-computed product") {
  T32 a = T32::from({2, 2}, {1, 2, 3, 4});
  T32 b = T32::from({2, 2}, {5, 6, 7, 8});
  T32 c = matmul(a, b);
  CHECK(c.data()[0] == 19.0f);
  CHECK(c.data()[1] == 22.0f);
  CHECK(c.data()[2] == 43.0f);
  CHECK(c.data()[3] == 50.0f);
  CHECK_THROWS(matmul(a, T32::from({3, 1}, {1, 2, 3})));
}

TEST_CASE("gemm kernels agree with the double reference on awkward shapes") {
  Rng rng(11);
  for (int M : {1, 2, 5, 17}) {
    for (int N : {1, 3, 16, 33}) {
      for (int K : {1, 4, 9, 40}) {
        std::vector<float> af((size_t)M * K), bf((size_t)K * N);
        std::vector<double> ad(af.size()), bd(bf.size());
        for (size_t i = 0; i < af.size(); ++i) ad[i] = af[i] = (float)rng.normal();
        for (size_t i = 0; i < bf.size(); ++i) bd[i] = bf[i] = (float)rng.normal();
        std::vector<float> cf((size_t)M * N, 1.f);
        std::vector<double> cd((size_t)M * N, 1.0);
        detail::gemm_nn<float>(M, N, K, af.data(), K, bf.data(), N, cf.data(), N, true);
        detail::gemm_nn<double>(M, N, K, ad.data(), K, bd.data(), N, cd.data(), N, true);
        for (size_t i = 0; i < cf.size(); ++i)
          REQUIRE(std::abs(cf[i] - cd[i]) <= 1e-4 * (1.0 + std::abs(cd[i])));

        // nt: C (MxK') = A (MxN') * B^T with B (K'xN') -> reuse shapes
        std::vector<float> ef((size_t)M * K, 0.f);
        std::vector<double> ed(ef.size(), 0.0);
        std::vector<float> bt((size_t)K * N);
        std::vector<double> btd(bt.size());
        for (size_t i = 0; i < bt.size(); ++i) btd[i] = bt[i] = (float)rng.normal();
        // C (MxK) = X (MxN) * Y^T, Y stored (KxN)
        std::vector<float> xf((size_t)M * N);
        std::vector<double> xd(xf.size());
        for (size_t i = 0; i < xf.size(); ++i) xd[i] = xf[i] = (float)rng.normal();
        detail::gemm_nt<float>(M, K, N, xf.data(), N, bt.data(), N, ef.data(), K, false);
        detail::gemm_nt<double>(M, K, N, xd.data(), N, btd.data(), N, ed.data(), K, false);
        for (size_t i = 0; i < ef.size(); ++i)
          REQUIRE(std::abs(ef[i] - ed[i]) <= 1e-4 * (1.0 + std::abs(ed[i])));

        // tn: C (KxN) += A^T (MxK) * B (MxN)
        std::vector<float> tf((size_t)K * N, 0.5f);
        std::vector<double> td(tf.size(), 0.5);
        detail::gemm_tn<float>(M, N, K, af.data(), K, xf.data(), N, tf.data(), N, true);
        detail::gemm_tn<double>(M, N, K, ad.data(), K, xd.data(), N, td.data(), N, true);
        for (size_t i = 0; i < tf.size(); ++i)
          REQUIRE(std::abs(tf[i] - td[i]) <= 1e-4 * (1.0 + std::abs(td[i])));
      }
    }
  }
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(1);
  T64 a = randn64({3, 4}, rng);
  T64 b = randn64({4, 5}, rng);
  auto w = randw(15, rng);
  check_grads({&a, &b}, [&] { return weighted_sum(matmul(a, b), w); });
}

TEST_CASE("linear gradients match finite differences") {
  Rng rng(2);
  T64 x = randn64({4, 3}, rng);
  T64 w = randn64({3, 6}, rng);
  T64 b = randn64({6}, rng);
  auto wt = randw(24, rng);
  check_grads({&x, &w, &b}, [&] { return weighted_sum(linear(x, w, b), wt); });
  // Bias-free variant.
  check_grads({&x, &w}, [&] { return weighted_sum(linear(x, w, T64{}), wt); });
}

TEST_CASE("add and scale gradients match finite differences") {
  Rng rng(3);
  T64 a = randn64({2, 5}, rng);
  T64 b = randn64({2, 5}, rng);
  auto w = randw(10, rng);
  check_grads({&a, &b}, [&] { return weighted_sum(add(a, b), w); });
  check_grads({&a}, [&] { return weighted_sum(scale(a, 2.5), w); });
}

TEST_CASE("embed_rows gathers rows and accumulates duplicate-id gradients") {
  T32 table = T32::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  TapeT<float> tape;
  {
    TapeT<float>::Scope scope(tape);
    T32 out = embed_rows(table, {2, 0, 2});
    CHECK(out.data()[0] == 5.0f);
    CHECK(out.data()[4] == 5.0f);
    T32 loss = sum_all(out);
    tape.backward(loss);
  }
  // Row 2 gathered twice: its gradient doubles.
  CHECK(table.grad()[0] == 1.0f);
  CHECK(table.grad()[2] == 0.0f);
  CHECK(table.grad()[4] == 2.0f);
  CHECK_THROWS(embed_rows(table, {3}));
}

TEST_CASE("embed_rows gradients match finite differences") {
  Rng rng(4);
  T64 table = randn64({5, 3}, rng);
  std::vector<int> ids = {4, 1, 1, 0};
  auto w = randw(12, rng);
  check_grads({&table}, [&] { return weighted_sum(embed_rows(table, ids), w); });
}

TEST_CASE("layer_norm maps constant rows to the bias exactly") {
  T32 x = T32::from({1, 4}, {3, 3, 3, 3});
  T32 g = T32::from({4}, {2, 2, 2, 2});
  T32 b = T32::from({4}, {0.5, 0.5, 0.5, 0.5});
  T32 y = layer_norm(x, g, b);
  for (int j = 0; j < 4; ++j) CHECK(y.data()[j] == 0.5f);
}

TEST_CASE("layer_norm gradients match finite differences") {
  Rng rng(5);
  T64 x = randn64({3, 8}, rng);
  T64 g = randn64({8}, rng);
  T64 b = randn64({8}, rng);
  auto w = randw(24, rng);
  check_grads({&x, &g, &b}, [&] { return weighted_sum(layer_norm(x, g, b), w); });
}

TEST_CASE("gelu is zero at zero and matches finite differences") {
  T32 z = T32::from({1}, {0.f});
  CHECK(gelu(z).data()[0] == 0.0f);
  Rng rng(6);
  T64 x = randn64({2, 7}, rng, 2.0);
  auto w = randw(14, rng);
  check_grads({&x}, [&] { return weighted_sum(gelu(x), w); });
}

TEST_CASE("split_heads and merge_heads are inverse layouts") {
  Rng rng(7);
  const int B = 2, L = 3, heads = 2, H = 4;
  T32 x = T32::zeros({B * L, 3 * H});
  for (size_t i = 0; i < x.size(); ++i) x.data()[i] = (float)i;
  T32 v = split_heads(x, B, L, heads, 2);
  T32 back = merge_heads(v, B, L, heads);
  for (int r = 0; r < B * L; ++r)
    for (int j = 0; j < H; ++j)
      CHECK(back.data()[(size_t)r * H + j] == x.data()[(size_t)r * 3 * H + 2 * H + j]);
}

TEST_CASE("attention pipeline gradients match finite differences") {
  Rng rng(8);
  const int B = 1, L = 4, heads = 2, H = 6;
  T64 qkv = randn64({B * L, 3 * H}, rng);
  AttentionMask mask = mask_semi_causal(2, L);
  std::vector<const AttentionMask*> masks(B * heads, &mask);
  auto w = randw((size_t)B * L * H, rng);
  check_grads({&qkv}, [&] {
    T64 q = split_heads(qkv, B, L, heads, 0);
    T64 k = split_heads(qkv, B, L, heads, 1);
    T64 v = split_heads(qkv, B, L, heads, 2);
    T64 s = attn_scores(q, k, 1.0 / std::sqrt(3.0));
    T64 p = masked_softmax(s, masks);
    T64 o = attn_mix(p, v);
    return weighted_sum(merge_heads(o, B, L, heads), w);
  });
}

TEST_CASE("masked softmax over full visibility is plain softmax") {
  T32 s = T32::from({3, 3}, {1, 2, 3, 0, 0, 0, -1, 5, 2});
  T32 p = masked_softmax(s, mask_full(3));
  for (int i = 0; i < 3; ++i) {
    float sum = 0;
    for (int j = 0; j < 3; ++j) sum += p.data()[i * 3 + j];
    CHECK(std::abs(sum - 1.0f) < 1e-6f);
  }
  CHECK(std::abs(p.data()[3] - 1.0f / 3) < 1e-6f);
}

TEST_CASE("masked softmax renormalizes over the visible support") {
  // Dropping a key and renormalizing the full softmax must equal the masked
  // softmax directly.
  T32 s = T32::from({2, 2}, {1.0f, 2.0f, 0.3f, -0.7f});
  AttentionMask m(2);
  m.set(0, 0, 1);
  m.set(1, 0, 1);
  m.set(1, 1, 1);
  T32 p = masked_softmax(s, m);
  CHECK(p.data()[0] == 1.0f);      // single visible key -> probability one
  CHECK(p.data()[1] == 0.0f);      // invisible -> exact zero
  float e0 = std::exp(0.3f), e1 = std::exp(-0.7f);
  CHECK(std::abs(p.data()[2] - e0 / (e0 + e1)) < 1e-6f);
}

TEST_CASE("masked softmax rejects rows with no visible key") {
  T32 s = T32::from({2, 2}, {1, 2, 3, 4});
  AttentionMask m(2);
  m.set(0, 0, 1);
  CHECK_THROWS(masked_softmax(s, m));
}

TEST_CASE("masked softmax gradients vanish exactly on invisible entries") {
  Rng rng(9);
  const int L = 4;
  T64 s = randn64({L, L}, rng);
  AttentionMask mask = mask_independent(3, L);
  auto w = randw((size_t)L * L, rng);
  check_grads({&s}, [&] { return weighted_sum(masked_softmax(s, mask), w); });

  s.zero_grad();
  TapeT<double> tape;
  {
    TapeT<double>::Scope scope(tape);
    T64 loss = weighted_sum(masked_softmax(s, mask), w);
    tape.backward(loss);
  }
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      if (!mask.at(i, j)) CHECK(s.grad()[(size_t)i * L + j] == 0.0);
}

TEST_CASE("cross entropy equals ln V on uniform logits and zero on inactive rows") {
  const int V = 7;
  T32 logits = T32::zeros({3, V}, true);
  TapeT<float> tape;
  T32 ce;
  {
    TapeT<float>::Scope scope(tape);
    ce = cross_entropy_rows(logits, {0, 3, 6}, {1, 0, 1});
    T32 loss = sum_all(ce);
    tape.backward(loss);
  }
  CHECK(std::abs(ce.data()[0] - std::log((float)V)) < 1e-6f);
  CHECK(ce.data()[1] == 0.0f);  // inactive: exact zero loss
  CHECK(std::abs(ce.data()[2] - std::log((float)V)) < 1e-6f);
  for (int j = 0; j < V; ++j) CHECK(logits.grad()[V + j] == 0.0f);  // inactive: exact zero grad
}

TEST_CASE("cross entropy gradients match finite differences") {
  Rng rng(10);
  T64 logits = randn64({4, 6}, rng);
  std::vector<int> targets = {5, 0, 2, 2};
  std::vector<uint8_t> active = {1, 1, 0, 1};
  auto w = randw(4, rng);
  check_grads({&logits}, [&] { return weighted_sum(cross_entropy_rows(logits, targets, active), w); });
  CHECK_THROWS(cross_entropy_rows(logits, {9, 0, 0, 0}, {1, 1, 1, 1}));
}

TEST_CASE("weighted_sum computes the weighted reduction and its gradient") {
  T32 x = T32::from({3}, {1, 2, 3}, true);
  TapeT<float> tape;
  {
    TapeT<float>::Scope scope(tape);
    T32 loss = weighted_sum(x, {0.5f, -1.0f, 2.0f});
    CHECK(loss.item() == 4.5f);
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == 0.5f);
  CHECK(x.grad()[1] == -1.0f);
  CHECK(x.grad()[2] == 2.0f);
}

TEST_CASE("ops outside a tape scope do not record or allocate gradients") {
  T32 a = T32::from({2, 2}, {1, 2, 3, 4}, true);
  T32 b = T32::from({2, 2}, {1, 1, 1, 1}, true);
  T32 c = matmul(a, b);
  CHECK_FALSE(c.wants_grad());
}

TEST_CASE("a tape refuses a second backward sweep") {
  T32 x = T32::from({1}, {2.f}, true);
  TapeT<float> tape;
  T32 loss;
  {
    TapeT<float>::Scope scope(tape);
    loss = scale(x, 3.f);
  }
  tape.backward(loss);
  CHECK(x.grad()[0] == 3.0f);
  CHECK_THROWS(tape.backward(loss));
}

TEST_CASE("adamw leaves parameters untouched with zero gradient and zero decay") {
  T32 p = T32::from({3}, {1.5f, -2.0f, 0.25f}, true);
  AdamW opt;
  opt.weight_decay = 0.0f;
  opt.attach({&p});
  std::vector<float> before(p.data(), p.data() + 3);
  p.zero_grad();
  for (int i = 0; i < 5; ++i) opt.step({&p});
  for (int j = 0; j < 3; ++j) CHECK(p.data()[j] == before[j]);
}

TEST_CASE("adamw first step moves against the gradient at roughly lr") {
  T32 p = T32::from({1}, {1.0f}, true);
  AdamW opt;
  opt.lr = 0.01f;
  opt.weight_decay = 0.0f;
  opt.attach({&p});
  p.ensure_grad();
  p.grad()[0] = 2.0f;
  opt.step({&p});
  CHECK(p.data()[0] < 1.0f);
  CHECK(std::abs((1.0f - p.data()[0]) - 0.01f) < 1e-4f);
}

TEST_CASE("adamw trajectories are bit-identical across runs") {
  auto run = [] {
    Rng rng(42);
    T32 p = T32::zeros({8}, true);
    for (size_t i = 0; i < p.size(); ++i) p.data()[i] = (float)rng.normal();
    AdamW opt;
    opt.attach({&p});
    for (int step = 0; step < 100; ++step) {
      p.zero_grad();
      for (size_t i = 0; i < p.size(); ++i) p.grad()[i] = (float)rng.normal();
      opt.step({&p}, (float)warmup_scale(step, 100));
    }
    return std::vector<float>(p.data(), p.data() + p.size());
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("warmup scale ramps linearly then holds at one") {
  CHECK(warmup_scale(0, 1000, 0.01) == Catch::Approx(0.1));
  CHECK(warmup_scale(9, 1000, 0.01) == Catch::Approx(1.0));
  CHECK(warmup_scale(500, 1000, 0.01) == 1.0);
}

TEST_CASE("cosine scale shares the ramp then decays monotonically to zero") {
  CHECK(cosine_scale(0, 1000, 0.01) == warmup_scale(0, 1000, 0.01));
  CHECK(cosine_scale(9, 1000, 0.01) == Catch::Approx(1.0));
  CHECK(cosine_scale(10, 1000, 0.01) == Catch::Approx(1.0));
  // Midpoint of the decay span [10, 1000] lands on half the peak.
  CHECK(cosine_scale(505, 1000, 0.01) == Catch::Approx(0.5));
  double prev = 1.0;
  for (long long s = 10; s < 1000; ++s) {
    double cur = cosine_scale(s, 1000, 0.01);
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK(cosine_scale(999, 1000, 0.01) < 1e-5);
  CHECK(cosine_scale(999, 1000, 0.01) > 0.0);
}
