#pragma once
#include <bit>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "latok/attention.hpp"
#include "latok/optim.hpp"
#include "latok/rng.hpp"
#include "latok/tensor.hpp"

namespace latok {

struct ModelConfig {
  int vocab = 0;
  int max_len = 0;
  int hidden = 0;
  int heads = 0;
  int layers = 0;
  int mlp_ratio = 4;

  void validate() const {
    if (vocab < 2 || max_len < 1 || hidden < 1 || heads < 1 || layers < 0 || mlp_ratio < 1)
      throw std::runtime_error("ModelConfig: non-positive dimension");
    if (hidden % heads != 0) throw std::runtime_error("ModelConfig: hidden must divide evenly by heads");
  }
  bool operator==(const ModelConfig&) const = default;
};

// Named sizes: width / heads / depth.
inline ModelConfig preset_config(const std::string& name, int vocab, int max_len) {
  ModelConfig c;
  c.vocab = vocab;
  c.max_len = max_len;
  if (name == "tiny") {
    c.hidden = 384; c.heads = 12; c.layers = 3;
  } else if (name == "mini") {
    c.hidden = 512; c.heads = 8; c.layers = 6;
  } else if (name == "sminy") {
    c.hidden = 768; c.heads = 12; c.layers = 6;
  } else if (name == "small") {
    c.hidden = 768; c.heads = 12; c.layers = 12;
  } else {
    throw std::runtime_error("preset_config: unknown preset '" + name + "'");
  }
  return c;
}

// Pre-norm transformer over token + learned absolute position embeddings.
// Position ids are supplied by the caller and always refer to original
// sequence positions, so physically reordered inputs keep their embeddings.
// There is no time/step conditioning input anywhere.
template <typename S>
struct ModelT {
  struct Layer {
    TensorT<S> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    TensorT<S> ln2_g, ln2_b, fc_w, fc_b, fc2_w, fc2_b;
  };

  ModelConfig cfg;
  TensorT<S> tok_emb, pos_emb;
  std::vector<Layer> layers;
  TensorT<S> lnf_g, lnf_b, head_w, head_b;

  void build() {
    cfg.validate();
    int h = cfg.hidden, mh = cfg.mlp_ratio * cfg.hidden;
    tok_emb = TensorT<S>::zeros({cfg.vocab, h}, true);
    pos_emb = TensorT<S>::zeros({cfg.max_len, h}, true);
    layers.assign((size_t)cfg.layers, Layer{});
    for (auto& l : layers) {
      l.ln1_g = TensorT<S>::zeros({h}, true);
      l.ln1_b = TensorT<S>::zeros({h}, true);
      l.qkv_w = TensorT<S>::zeros({h, 3 * h}, true);
      l.qkv_b = TensorT<S>::zeros({3 * h}, true);
      l.proj_w = TensorT<S>::zeros({h, h}, true);
      l.proj_b = TensorT<S>::zeros({h}, true);
      l.ln2_g = TensorT<S>::zeros({h}, true);
      l.ln2_b = TensorT<S>::zeros({h}, true);
      l.fc_w = TensorT<S>::zeros({h, mh}, true);
      l.fc_b = TensorT<S>::zeros({mh}, true);
      l.fc2_w = TensorT<S>::zeros({mh, h}, true);
      l.fc2_b = TensorT<S>::zeros({h}, true);
    }
    lnf_g = TensorT<S>::zeros({h}, true);
    lnf_b = TensorT<S>::zeros({h}, true);
    head_w = TensorT<S>::zeros({h, cfg.vocab}, true);
    head_b = TensorT<S>::zeros({cfg.vocab}, true);
  }

  // Scaled-normal init: std 0.02 everywhere, residual output projections
  // additionally shrunk by 1/sqrt(2 * layers). Gains one, biases zero.
  void init(uint64_t seed) {
    build();
    Rng rng(seed, 0x6d6f64656c);
    double base = 0.02;
    double resid = cfg.layers > 0 ? base / std::sqrt(2.0 * cfg.layers) : base;
    auto fill_normal = [&](TensorT<S>& t, double sd) {
      for (size_t i = 0; i < t.size(); ++i) t.data()[i] = (S)rng.normal(0.0, sd);
    };
    auto fill_const = [&](TensorT<S>& t, S v) {
      for (size_t i = 0; i < t.size(); ++i) t.data()[i] = v;
    };
    fill_normal(tok_emb, base);
    fill_normal(pos_emb, base);
    for (auto& l : layers) {
      fill_const(l.ln1_g, S(1));
      fill_const(l.ln1_b, S(0));
      fill_normal(l.qkv_w, base);
      fill_const(l.qkv_b, S(0));
      fill_normal(l.proj_w, resid);
      fill_const(l.proj_b, S(0));
      fill_const(l.ln2_g, S(1));
      fill_const(l.ln2_b, S(0));
      fill_normal(l.fc_w, base);
      fill_const(l.fc_b, S(0));
      fill_normal(l.fc2_w, resid);
      fill_const(l.fc2_b, S(0));
    }
    fill_const(lnf_g, S(1));
    fill_const(lnf_b, S(0));
    fill_normal(head_w, base);
    fill_const(head_b, S(0));
  }

  std::vector<TensorT<S>*> params() {
    std::vector<TensorT<S>*> p = {&tok_emb, &pos_emb};
    for (auto& l : layers)
      for (TensorT<S>* t : {&l.ln1_g, &l.ln1_b, &l.qkv_w, &l.qkv_b, &l.proj_w, &l.proj_b,
                            &l.ln2_g, &l.ln2_b, &l.fc_w, &l.fc_b, &l.fc2_w, &l.fc2_b})
        p.push_back(t);
    for (TensorT<S>* t : {&lnf_g, &lnf_b, &head_w, &head_b}) p.push_back(t);
    return p;
  }

  size_t count_params() {
    size_t n = 0;
    for (TensorT<S>* t : params()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (TensorT<S>* t : params()) {
      t->ensure_grad();
      t->zero_grad();
    }
  }

  // Batched forward over B sequences of equal length L. masks has either one
  // entry (shared) or one per example. Returns logits (B*L, vocab).
  TensorT<S> forward_batch(const std::vector<int>& tokens, const std::vector<int>& positions,
                           const std::vector<const AttentionMask*>& masks, int B, int L) const {
    if ((int)tokens.size() != B * L || (int)positions.size() != B * L)
      throw std::runtime_error("forward_batch: token/position count mismatch");
    if ((int)masks.size() != B && masks.size() != 1)
      throw std::runtime_error("forward_batch: need one mask, or one per example");
    for (const AttentionMask* m : masks)
      if (!m || m->len != L) throw std::runtime_error("forward_batch: mask length mismatch");
    for (int p : positions)
      if (p < 0 || p >= cfg.max_len) throw std::runtime_error("forward_batch: position out of range");
    int h = cfg.hidden, heads = cfg.heads;
    S scale = S(1) / (S)std::sqrt((double)(h / heads));
    std::vector<const AttentionMask*> group_masks((size_t)B * heads);
    for (int b = 0; b < B; ++b)
      for (int hd = 0; hd < heads; ++hd)
        group_masks[(size_t)b * heads + hd] = masks.size() == 1 ? masks[0] : masks[b];

    TensorT<S> x = add(embed_rows(tok_emb, tokens), embed_rows(pos_emb, positions));
    for (const Layer& l : layers) {
      TensorT<S> n1 = layer_norm(x, l.ln1_g, l.ln1_b);
      TensorT<S> qkv = linear(n1, l.qkv_w, l.qkv_b);
      TensorT<S> q = split_heads(qkv, B, L, heads, 0);
      TensorT<S> k = split_heads(qkv, B, L, heads, 1);
      TensorT<S> v = split_heads(qkv, B, L, heads, 2);
      TensorT<S> att = masked_softmax(attn_scores(q, k, scale), group_masks);
      TensorT<S> mixed = merge_heads(attn_mix(att, v), B, L, heads);
      x = add(x, linear(mixed, l.proj_w, l.proj_b));
      TensorT<S> n2 = layer_norm(x, l.ln2_g, l.ln2_b);
      x = add(x, linear(gelu(linear(n2, l.fc_w, l.fc_b)), l.fc2_w, l.fc2_b));
    }
    TensorT<S> nf = layer_norm(x, lnf_g, lnf_b);
    return linear(nf, head_w, head_b);
  }

  // Single sequence: logits (L, vocab).
  TensorT<S> forward(const std::vector<int>& tokens, const std::vector<int>& positions,
                     const AttentionMask& mask) const {
    return forward_batch(tokens, positions, {&mask}, 1, (int)tokens.size());
  }
};

using Model = ModelT<float>;

// ---- Checkpoint container -------------------------------------------------
// Layout: magic "LTOKCKP1", u64 little-endian header length, JSON header,
// then the declared float32 arrays raw little-endian: parameters in params()
// order, then optimizer first/second moments in the same order when present.

namespace detail {
static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_f32(std::FILE* f, const float* v, size_t n) {
  if (std::fwrite(v, sizeof(float), n, f) != n)
    throw std::runtime_error("checkpoint: short write");
}
inline void read_f32(std::FILE* f, float* v, size_t n) {
  if (std::fread(v, sizeof(float), n, f) != n)
    throw std::runtime_error("checkpoint: short read");
}
}  // namespace detail

constexpr char kCheckpointMagic[9] = "LTOKCKP1";

template <typename S>
void save_checkpoint(const std::string& path, ModelT<S>& model,
                     const AdamWT<std::type_identity_t<S>>* opt, const nlohmann::json& meta) {
  nlohmann::json header;
  header["version"] = 1;
  header["scalar"] = "f32";
  header["config"] = {{"vocab", model.cfg.vocab},       {"max_len", model.cfg.max_len},
                      {"hidden", model.cfg.hidden},     {"heads", model.cfg.heads},
                      {"layers", model.cfg.layers},     {"mlp_ratio", model.cfg.mlp_ratio}};
  header["param_count"] = model.count_params();
  header["has_optimizer"] = opt != nullptr;
  if (opt) {
    header["optimizer"] = {{"lr", (double)opt->lr},
                           {"beta1", (double)opt->beta1},
                           {"beta2", (double)opt->beta2},
                           {"eps", (double)opt->eps},
                           {"weight_decay", (double)opt->weight_decay},
                           {"step_count", opt->step_count}};
  }
  header["meta"] = meta;
  std::string hs = header.dump();

  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  if (std::fwrite(kCheckpointMagic, 1, 8, f.get()) != 8)
    throw std::runtime_error("checkpoint: short write");
  uint64_t hlen = hs.size();
  if (std::fwrite(&hlen, sizeof(hlen), 1, f.get()) != 1)
    throw std::runtime_error("checkpoint: short write");
  if (std::fwrite(hs.data(), 1, hs.size(), f.get()) != hs.size())
    throw std::runtime_error("checkpoint: short write");

  std::vector<float> buf;
  auto dump = [&](const S* v, size_t n) {
    buf.resize(n);
    for (size_t i = 0; i < n; ++i) buf[i] = (float)v[i];
    detail::write_f32(f.get(), buf.data(), n);
  };
  for (TensorT<S>* t : model.params()) dump(t->data(), t->size());
  if (opt) {
    for (const auto& m : opt->m) dump(m.data(), m.size());
    for (const auto& v : opt->v) dump(v.data(), v.size());
  }
}

template <typename S>
struct LoadedCheckpointT {
  ModelT<S> model;
  bool has_optimizer = false;
  AdamWT<S> opt;
  nlohmann::json meta;
};

template <typename S>
LoadedCheckpointT<S> load_checkpoint(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  if (std::fread(magic, 1, 8, f.get()) != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic");
  uint64_t hlen = 0;
  if (std::fread(&hlen, sizeof(hlen), 1, f.get()) != 1)
    throw std::runtime_error("load_checkpoint: truncated header");
  std::string hs(hlen, '\0');
  if (std::fread(hs.data(), 1, hlen, f.get()) != hlen)
    throw std::runtime_error("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("version").get<int>() != 1) throw std::runtime_error("load_checkpoint: unknown version");

  LoadedCheckpointT<S> out;
  const auto& c = header.at("config");
  out.model.cfg = ModelConfig{c.at("vocab").get<int>(),  c.at("max_len").get<int>(),
                              c.at("hidden").get<int>(), c.at("heads").get<int>(),
                              c.at("layers").get<int>(), c.at("mlp_ratio").get<int>()};
  out.model.build();
  if (header.at("param_count").get<size_t>() != out.model.count_params())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");

  std::vector<float> buf;
  auto slurp = [&](S* v, size_t n) {
    buf.resize(n);
    detail::read_f32(f.get(), buf.data(), n);
    for (size_t i = 0; i < n; ++i) v[i] = (S)buf[i];
  };
  for (TensorT<S>* t : out.model.params()) slurp(t->data(), t->size());
  out.has_optimizer = header.at("has_optimizer").get<bool>();
  if (out.has_optimizer) {
    const auto& o = header.at("optimizer");
    out.opt.lr = (S)o.at("lr").get<double>();
    out.opt.beta1 = (S)o.at("beta1").get<double>();
    out.opt.beta2 = (S)o.at("beta2").get<double>();
    out.opt.eps = (S)o.at("eps").get<double>();
    out.opt.weight_decay = (S)o.at("weight_decay").get<double>();
    out.opt.step_count = o.at("step_count").get<long long>();
    auto ps = out.model.params();
    out.opt.attach(ps);
    for (auto& m : out.opt.m) slurp(m.data(), m.size());
    for (auto& v : out.opt.v) slurp(v.data(), v.size());
  }
  out.meta = header.value("meta", nlohmann::json::object());
  return out;
}

}  // namespace latok
