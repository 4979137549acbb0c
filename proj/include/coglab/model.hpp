#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "coglab/common.hpp"

namespace coglab {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 256;
  int vocab_size = 512;
  int context_len = 64;
  bool tie_embeddings = false;

  void validate() const {
    if (n_layers < 2) throw ConfigError("n_layers must be >= 2");
    if (d_model <= 0 || n_heads <= 0 || d_ffn <= 0 || vocab_size <= 0 || context_len <= 0)
      throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig toy() { return ModelConfig{}; }
};

struct LoRAConfig {
  int rank = 8;
  double scaling = 2.0;
};

template <typename S>
struct LoraPair {
  Mat<S> a;  // [d_in, r]
  Mat<S> b;  // [r, d_out]
};

template <typename S>
struct LayerAdapters {
  bool present = false;
  LoraPair<S> wq, wk, wv, wo, w1, w2;
};

template <typename S>
struct LayerParams {
  Mat<S> ln1_g, ln1_b;          // [1, d]
  Mat<S> wq, wk, wv, wo;        // [d, d]
  Mat<S> bq, bk, bv, bo;        // [1, d]
  Mat<S> ln2_g, ln2_b;          // [1, d]
  Mat<S> w1, b1;                // [d, f], [1, f]
  Mat<S> w2, b2;                // [f, d], [1, d]
};

template <typename S>
struct ParamStore {
  Mat<S> tok_emb;                        // [V, d]
  Mat<S> pos_emb;                        // [context, d]
  std::vector<LayerParams<S>> layers;    // L entries
  Mat<S> lnf_g, lnf_b;                   // [1, d]
  Mat<S> head_w;                         // [d, V]; empty when embeddings are tied
  std::vector<LayerAdapters<S>> adapters;  // empty until attach_lora
};

template <typename S>
struct ModelState {
  ModelConfig config;
  std::uint64_t seed = 0;
  ParamStore<S> p;
  bool has_adapters = false;
  LoRAConfig lora;
};

// One training example: a token row plus an optional per-token answer mask
// (1 = token is part of an answer span). Empty mask means every next-token
// position contributes to the loss.
struct Example {
  std::vector<int> tokens;
  std::vector<std::uint8_t> answer_mask;
};

inline std::string param_group(const std::string& name) {
  if (name.rfind("layer.", 0) == 0) {
    auto second = name.find('.', 6);
    return name.substr(0, second);
  }
  return name.substr(0, name.find('.'));
}

inline int param_layer(const std::string& name) {
  if (name.rfind("layer.", 0) != 0) return -1;
  return std::stoi(name.substr(6, name.find('.', 6) - 6));
}

// Visits every parameter tensor in a fixed deterministic order. The names
// double as checkpoint keys and TrainableSet members.
template <typename S, typename F>
void for_each_param(ParamStore<S>& p, const ModelConfig& cfg, F&& f) {
  f(std::string("embedding.tok"), p.tok_emb);
  f(std::string("embedding.pos"), p.pos_emb);
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string base = "layer." + std::to_string(i) + ".";
    auto& L = p.layers[static_cast<std::size_t>(i)];
    f(base + "ln1.g", L.ln1_g);
    f(base + "ln1.b", L.ln1_b);
    f(base + "attn.wq", L.wq);
    f(base + "attn.bq", L.bq);
    f(base + "attn.wk", L.wk);
    f(base + "attn.bk", L.bk);
    f(base + "attn.wv", L.wv);
    f(base + "attn.bv", L.bv);
    f(base + "attn.wo", L.wo);
    f(base + "attn.bo", L.bo);
    f(base + "ln2.g", L.ln2_g);
    f(base + "ln2.b", L.ln2_b);
    f(base + "ffn.w1", L.w1);
    f(base + "ffn.b1", L.b1);
    f(base + "ffn.w2", L.w2);
    f(base + "ffn.b2", L.b2);
    if (!p.adapters.empty() && p.adapters[static_cast<std::size_t>(i)].present) {
      auto& A = p.adapters[static_cast<std::size_t>(i)];
      f(base + "attn.wq.lora_a", A.wq.a);
      f(base + "attn.wq.lora_b", A.wq.b);
      f(base + "attn.wk.lora_a", A.wk.a);
      f(base + "attn.wk.lora_b", A.wk.b);
      f(base + "attn.wv.lora_a", A.wv.a);
      f(base + "attn.wv.lora_b", A.wv.b);
      f(base + "attn.wo.lora_a", A.wo.a);
      f(base + "attn.wo.lora_b", A.wo.b);
      f(base + "ffn.w1.lora_a", A.w1.a);
      f(base + "ffn.w1.lora_b", A.w1.b);
      f(base + "ffn.w2.lora_a", A.w2.a);
      f(base + "ffn.w2.lora_b", A.w2.b);
    }
  }
  f(std::string("lm_head.lnf.g"), p.lnf_g);
  f(std::string("lm_head.lnf.b"), p.lnf_b);
  if (!cfg.tie_embeddings) f(std::string("lm_head.w"), p.head_w);
}

template <typename S, typename F>
void for_each_param(const ParamStore<S>& p, const ModelConfig& cfg, F&& f) {
  for_each_param(const_cast<ParamStore<S>&>(p), cfg,
                 [&](const std::string& n, Mat<S>& m) { f(n, static_cast<const Mat<S>&>(m)); });
}

template <typename S>
ParamStore<S> make_zero_like(const ParamStore<S>& p, const ModelConfig& cfg) {
  ParamStore<S> z;
  z.layers.resize(p.layers.size());
  z.adapters.resize(p.adapters.size());
  for (std::size_t i = 0; i < p.adapters.size(); ++i) z.adapters[i].present = p.adapters[i].present;
  auto zp = [&](Mat<S>& dst, const Mat<S>& src) { dst = Mat<S>::Zero(src.rows(), src.cols()); };
  zp(z.tok_emb, p.tok_emb);
  zp(z.pos_emb, p.pos_emb);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& L = p.layers[i];
    auto& Z = z.layers[i];
    zp(Z.ln1_g, L.ln1_g); zp(Z.ln1_b, L.ln1_b);
    zp(Z.wq, L.wq); zp(Z.bq, L.bq);
    zp(Z.wk, L.wk); zp(Z.bk, L.bk);
    zp(Z.wv, L.wv); zp(Z.bv, L.bv);
    zp(Z.wo, L.wo); zp(Z.bo, L.bo);
    zp(Z.ln2_g, L.ln2_g); zp(Z.ln2_b, L.ln2_b);
    zp(Z.w1, L.w1); zp(Z.b1, L.b1);
    zp(Z.w2, L.w2); zp(Z.b2, L.b2);
    if (i < p.adapters.size() && p.adapters[i].present) {
      const auto& A = p.adapters[i];
      auto& ZA = z.adapters[i];
      zp(ZA.wq.a, A.wq.a); zp(ZA.wq.b, A.wq.b);
      zp(ZA.wk.a, A.wk.a); zp(ZA.wk.b, A.wk.b);
      zp(ZA.wv.a, A.wv.a); zp(ZA.wv.b, A.wv.b);
      zp(ZA.wo.a, A.wo.a); zp(ZA.wo.b, A.wo.b);
      zp(ZA.w1.a, A.w1.a); zp(ZA.w1.b, A.w1.b);
      zp(ZA.w2.a, A.w2.a); zp(ZA.w2.b, A.w2.b);
    }
  }
  zp(z.lnf_g, p.lnf_g);
  zp(z.lnf_b, p.lnf_b);
  if (p.head_w.size() > 0) zp(z.head_w, p.head_w);
  return z;
}

// Deterministic init: scaled normal for weight matrices, zeros for biases,
// ones for layer-norm gains. Residual-output projections get the usual
// 1/sqrt(2L) shrink.
template <typename S = float>
ModelState<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState<S> m;
  m.config = cfg;
  m.seed = seed;
  Rng rng(derive_seed(seed, "model-init"));
  const double std_base = 0.02;
  const double std_res = std_base / std::sqrt(2.0 * cfg.n_layers);
  auto fill_normal = [&](Mat<S>& t, int r, int c, double sd) {
    t.resize(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) t(i, j) = static_cast<S>(rng.normal() * sd);
  };
  auto fill_zero = [&](Mat<S>& t, int r, int c) { t = Mat<S>::Zero(r, c); };
  auto fill_one = [&](Mat<S>& t, int r, int c) { t = Mat<S>::Ones(r, c); };

  const int d = cfg.d_model, f = cfg.d_ffn, V = cfg.vocab_size;
  fill_normal(m.p.tok_emb, V, d, std_base);
  fill_normal(m.p.pos_emb, cfg.context_len, d, std_base);
  m.p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& L : m.p.layers) {
    fill_one(L.ln1_g, 1, d); fill_zero(L.ln1_b, 1, d);
    fill_normal(L.wq, d, d, std_base); fill_zero(L.bq, 1, d);
    fill_normal(L.wk, d, d, std_base); fill_zero(L.bk, 1, d);
    fill_normal(L.wv, d, d, std_base); fill_zero(L.bv, 1, d);
    fill_normal(L.wo, d, d, std_res);  fill_zero(L.bo, 1, d);
    fill_one(L.ln2_g, 1, d); fill_zero(L.ln2_b, 1, d);
    fill_normal(L.w1, d, f, std_base); fill_zero(L.b1, 1, f);
    fill_normal(L.w2, f, d, std_res);  fill_zero(L.b2, 1, d);
  }
  fill_one(m.p.lnf_g, 1, d);
  fill_zero(m.p.lnf_b, 1, d);
  if (!cfg.tie_embeddings) fill_normal(m.p.head_w, d, V, std_base);
  return m;
}

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename S>
S gelu(S x) {
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + static_cast<S>(std::erf(static_cast<double>(x) / 1.4142135623730951)));
}

template <typename S>
S gelu_grad(S x) {
  const double xd = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(xd / 1.4142135623730951));
  const double pdf = std::exp(-0.5 * xd * xd) / 2.5066282746310002;
  return static_cast<S>(cdf + xd * pdf);
}

// y = g * (x - mu) * rstd + b, row-wise. Returns per-row mean and rstd.
template <typename S>
void layernorm_forward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, Mat<S>& y,
                       Mat<S>& mean, Mat<S>& rstd) {
  const int T = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  y.resize(T, d);
  mean.resize(T, 1);
  rstd.resize(T, 1);
  for (int t = 0; t < T; ++t) {
    const S mu = x.row(t).mean();
    S var = 0;
    for (int j = 0; j < d; ++j) {
      const S c = x(t, j) - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S r = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var) + kLnEps));
    mean(t, 0) = mu;
    rstd(t, 0) = r;
    for (int j = 0; j < d; ++j) y(t, j) = g(0, j) * (x(t, j) - mu) * r + b(0, j);
  }
}

template <typename S>
void layernorm_backward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& mean, const Mat<S>& rstd,
                        const Mat<S>& dy, Mat<S>& dx, Mat<S>& dg, Mat<S>& db) {
  const int T = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  dx.resize(T, d);
  for (int t = 0; t < T; ++t) {
    const S mu = mean(t, 0);
    const S r = rstd(t, 0);
    S sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (int j = 0; j < d; ++j) {
      const S xhat = (x(t, j) - mu) * r;
      const S dxh = dy(t, j) * g(0, j);
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * xhat;
      dg(0, j) += dy(t, j) * xhat;
      db(0, j) += dy(t, j);
    }
    const S inv_d = static_cast<S>(1) / static_cast<S>(d);
    for (int j = 0; j < d; ++j) {
      const S xhat = (x(t, j) - mu) * r;
      const S dxh = dy(t, j) * g(0, j);
      dx(t, j) = r * (dxh - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
    }
  }
}

// x [T, d_in] times (W + scale * A * B) plus bias row.
template <typename S>
Mat<S> project(const Mat<S>& x, const Mat<S>& w, const Mat<S>& bias, const LoraPair<S>* lora,
               S scale) {
  Mat<S> y = x * w;
  y.rowwise() += bias.row(0);
  if (lora != nullptr) y.noalias() += (x * lora->a) * lora->b * scale;
  return y;
}

// Backward of project: accumulates dW, dbias (and dA, dB) and returns dx.
template <typename S>
Mat<S> project_backward(const Mat<S>& x, const Mat<S>& w, const Mat<S>& dy, Mat<S>& dw,
                        Mat<S>& dbias, const LoraPair<S>* lora, LoraPair<S>* dlora, S scale) {
  dw.noalias() += x.transpose() * dy;
  dbias.row(0) += dy.colwise().sum();
  Mat<S> dx = dy * w.transpose();
  if (lora != nullptr) {
    Mat<S> dy_bt = dy * lora->b.transpose();        // [T, r]
    dlora->a.noalias() += x.transpose() * dy_bt * scale;
    dlora->b.noalias() += (x * lora->a).transpose() * dy * scale;
    dx.noalias() += dy_bt * lora->a.transpose() * scale;
  }
  return dx;
}

}  // namespace detail

template <typename S>
struct LayerCache {
  Mat<S> x_in;                  // input to the block [T, d]
  Mat<S> ln1_out, ln1_mean, ln1_rstd;
  Mat<S> q, k, v;               // [T, d]
  Mat<S> att_probs;             // [H*T, T] softmax rows per head
  Mat<S> att_concat;            // [T, d] heads concatenated, before wo
  Mat<S> x_mid;                 // after attention residual [T, d]
  Mat<S> ln2_out, ln2_mean, ln2_rstd;
  Mat<S> ffn_pre;               // [T, f]
  Mat<S> ffn_act;               // gelu(ffn_pre) [T, f]
};

template <typename S>
struct ForwardCache {
  std::vector<LayerCache<S>> layers;
  Mat<S> x_final;               // input to the final layer norm
  Mat<S> lnf_out, lnf_mean, lnf_rstd;
};

// Full causal forward pass over one token sequence. Returns [T, V] logits.
template <typename S>
Mat<S> forward_logits(const ModelState<S>& m, std::span<const int> tokens,
                      ForwardCache<S>* cache = nullptr) {
  const ModelConfig& cfg = m.config;
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw InputError("empty token sequence");
  if (T > cfg.context_len) throw InputError("sequence length exceeds context_len");
  for (int t = 0; t < T; ++t)
    if (tokens[t] < 0 || tokens[t] >= cfg.vocab_size)
      throw InputError("token id out of range: " + std::to_string(tokens[t]));

  const int d = cfg.d_model, H = cfg.n_heads, hd = d / H;
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  Mat<S> x(T, d);
  for (int t = 0; t < T; ++t)
    x.row(t) = m.p.tok_emb.row(tokens[t]) + m.p.pos_emb.row(t);

  if (cache != nullptr) cache->layers.resize(static_cast<std::size_t>(cfg.n_layers));
  ForwardCache<S> scratch;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = m.p.layers[static_cast<std::size_t>(l)];
    const LayerAdapters<S>* A = nullptr;
    if (m.has_adapters && m.p.adapters[static_cast<std::size_t>(l)].present)
      A = &m.p.adapters[static_cast<std::size_t>(l)];
    LayerCache<S>& c = cache != nullptr ? cache->layers[static_cast<std::size_t>(l)]
                                        : scratch.layers.emplace_back();
    const S lscale = static_cast<S>(m.lora.scaling);

    c.x_in = x;
    detail::layernorm_forward(c.x_in, L.ln1_g, L.ln1_b, c.ln1_out, c.ln1_mean, c.ln1_rstd);
    c.q = detail::project(c.ln1_out, L.wq, L.bq, A ? &A->wq : nullptr, lscale);
    c.k = detail::project(c.ln1_out, L.wk, L.bk, A ? &A->wk : nullptr, lscale);
    c.v = detail::project(c.ln1_out, L.wv, L.bv, A ? &A->wv : nullptr, lscale);

    c.att_probs.resize(H * T, T);
    c.att_concat.resize(T, d);
    for (int h = 0; h < H; ++h) {
      auto qh = c.q.block(0, h * hd, T, hd);
      auto kh = c.k.block(0, h * hd, T, hd);
      auto vh = c.v.block(0, h * hd, T, hd);
      Mat<S> scores = qh * kh.transpose() * inv_sqrt_hd;  // [T, T]
      for (int i = 0; i < T; ++i) {
        // causal softmax over j <= i
        S mx = scores(i, 0);
        for (int j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        S sum = 0;
        for (int j = 0; j <= i; ++j) {
          const S e = static_cast<S>(std::exp(static_cast<double>(scores(i, j) - mx)));
          c.att_probs(h * T + i, j) = e;
          sum += e;
        }
        const S inv = static_cast<S>(1) / sum;
        for (int j = 0; j <= i; ++j) c.att_probs(h * T + i, j) *= inv;
        for (int j = i + 1; j < T; ++j) c.att_probs(h * T + i, j) = 0;
      }
      c.att_concat.block(0, h * hd, T, hd).noalias() =
          c.att_probs.block(h * T, 0, T, T) * vh;
    }
    Mat<S> att_out = detail::project(c.att_concat, L.wo, L.bo, A ? &A->wo : nullptr, lscale);
    c.x_mid = c.x_in + att_out;

    detail::layernorm_forward(c.x_mid, L.ln2_g, L.ln2_b, c.ln2_out, c.ln2_mean, c.ln2_rstd);
    c.ffn_pre = detail::project(c.ln2_out, L.w1, L.b1, A ? &A->w1 : nullptr, lscale);
    c.ffn_act = c.ffn_pre.unaryExpr([](S v) { return detail::gelu(v); });
    Mat<S> ffn_out = detail::project(c.ffn_act, L.w2, L.b2, A ? &A->w2 : nullptr, lscale);
    x = c.x_mid + ffn_out;
    if (cache == nullptr) scratch.layers.clear();
  }

  Mat<S>* xf_store = cache != nullptr ? &cache->lnf_out : &scratch.lnf_out;
  Mat<S>* mean_store = cache != nullptr ? &cache->lnf_mean : &scratch.lnf_mean;
  Mat<S>* rstd_store = cache != nullptr ? &cache->lnf_rstd : &scratch.lnf_rstd;
  if (cache != nullptr) cache->x_final = x;
  detail::layernorm_forward(cache != nullptr ? cache->x_final : x, m.p.lnf_g, m.p.lnf_b,
                            *xf_store, *mean_store, *rstd_store);
  if (cfg.tie_embeddings) return *xf_store * m.p.tok_emb.transpose();
  return *xf_store * m.p.head_w;
}

// Mean negative log-likelihood over masked-in positions.
template <typename S>
double nll_loss(const Mat<S>& logits, std::span<const int> targets,
                std::span<const std::uint8_t> loss_mask) {
  const int T = static_cast<int>(logits.rows());
  const int V = static_cast<int>(logits.cols());
  if (static_cast<int>(targets.size()) != T || static_cast<int>(loss_mask.size()) != T)
    throw InputError("nll_loss: dimension mismatch");
  double total = 0;
  long count = 0;
  for (int t = 0; t < T; ++t) {
    if (!loss_mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= V) throw InputError("nll_loss: target out of range");
    double mx = static_cast<double>(logits(t, 0));
    for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(logits(t, j)));
    double lse = 0;
    for (int j = 0; j < V; ++j) lse += std::exp(static_cast<double>(logits(t, j)) - mx);
    total += std::log(lse) + mx - static_cast<double>(logits(t, targets[t]));
    ++count;
  }
  if (count == 0) throw DegenerateBatchError("all positions masked out");
  return total / static_cast<double>(count);
}

template <typename S>
struct BackwardResult {
  double loss = 0;
  long masked_positions = 0;
  ParamStore<S> grads;
};

namespace detail {

// Derives (inputs, targets, position mask) from an example row.
inline void split_example(const Example& ex, std::vector<int>& inputs, std::vector<int>& targets,
                          std::vector<std::uint8_t>& mask) {
  const std::size_t n = ex.tokens.size();
  if (n < 2) throw InputError("example must have at least two tokens");
  if (!ex.answer_mask.empty() && ex.answer_mask.size() != n)
    throw InputError("answer mask length mismatch");
  inputs.assign(ex.tokens.begin(), ex.tokens.end() - 1);
  targets.assign(ex.tokens.begin() + 1, ex.tokens.end());
  mask.resize(n - 1);
  for (std::size_t t = 0; t + 1 < n; ++t)
    mask[t] = ex.answer_mask.empty() ? 1 : ex.answer_mask[t + 1];
}

}  // namespace detail

// Exact analytic gradients of the mean nll over all masked-in positions of
// the batch, with respect to every parameter (frozen or not).
template <typename S>
BackwardResult<S> backward(const ModelState<S>& m, std::span<const Example> batch) {
  const ModelConfig& cfg = m.config;
  BackwardResult<S> out;
  out.grads = make_zero_like(m.p, cfg);

  long total_masked = 0;
  std::vector<int> inputs, targets;
  std::vector<std::uint8_t> mask;
  for (const auto& ex : batch) {
    detail::split_example(ex, inputs, targets, mask);
    for (auto v : mask) total_masked += v;
  }
  if (total_masked == 0) throw DegenerateBatchError("all positions masked out");
  out.masked_positions = total_masked;

  const int d = cfg.d_model, H = cfg.n_heads, hd = d / H;
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  const S lscale = static_cast<S>(m.lora.scaling);
  const S inv_count = static_cast<S>(1.0 / static_cast<double>(total_masked));

  double loss_sum = 0;
  ForwardCache<S> cache;
  for (const auto& ex : batch) {
    detail::split_example(ex, inputs, targets, mask);
    const int T = static_cast<int>(inputs.size());
    Mat<S> logits = forward_logits(m, std::span<const int>(inputs), &cache);
    const int V = static_cast<int>(logits.cols());

    // softmax cross-entropy gradient, scaled by 1/total_masked
    Mat<S> dlogits = Mat<S>::Zero(T, V);
    for (int t = 0; t < T; ++t) {
      if (!mask[t]) continue;
      double mx = static_cast<double>(logits(t, 0));
      for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(logits(t, j)));
      double lse = 0;
      for (int j = 0; j < V; ++j) lse += std::exp(static_cast<double>(logits(t, j)) - mx);
      loss_sum += std::log(lse) + mx - static_cast<double>(logits(t, targets[t]));
      const double inv_lse = 1.0 / lse;
      for (int j = 0; j < V; ++j)
        dlogits(t, j) =
            static_cast<S>(std::exp(static_cast<double>(logits(t, j)) - mx) * inv_lse) * inv_count;
      dlogits(t, targets[t]) -= inv_count;
    }

    // head and final layer norm
    Mat<S> d_xf;
    if (cfg.tie_embeddings) {
      d_xf = dlogits * m.p.tok_emb;
      out.grads.tok_emb.noalias() += dlogits.transpose() * cache.lnf_out;
    } else {
      d_xf = dlogits * m.p.head_w.transpose();
      out.grads.head_w.noalias() += cache.lnf_out.transpose() * dlogits;
    }
    Mat<S> dx;
    detail::layernorm_backward(cache.x_final, m.p.lnf_g, cache.lnf_mean, cache.lnf_rstd, d_xf, dx,
                               out.grads.lnf_g, out.grads.lnf_b);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      const auto& L = m.p.layers[static_cast<std::size_t>(l)];
      auto& G = out.grads.layers[static_cast<std::size_t>(l)];
      const LayerCache<S>& c = cache.layers[static_cast<std::size_t>(l)];
      const LayerAdapters<S>* A = nullptr;
      LayerAdapters<S>* dA = nullptr;
      if (m.has_adapters && m.p.adapters[static_cast<std::size_t>(l)].present) {
        A = &m.p.adapters[static_cast<std::size_t>(l)];
        dA = &out.grads.adapters[static_cast<std::size_t>(l)];
      }

      // FFN branch
      Mat<S> d_act = detail::project_backward(c.ffn_act, L.w2, dx, G.w2, G.b2,
                                              A ? &A->w2 : nullptr, dA ? &dA->w2 : nullptr, lscale);
      Mat<S> d_pre = d_act.binaryExpr(c.ffn_pre,
                                      [](S g, S x) { return g * detail::gelu_grad(x); });
      Mat<S> d_ln2 = detail::project_backward(c.ln2_out, L.w1, d_pre, G.w1, G.b1,
                                              A ? &A->w1 : nullptr, dA ? &dA->w1 : nullptr, lscale);
      Mat<S> d_xmid;
      detail::layernorm_backward(c.x_mid, L.ln2_g, c.ln2_mean, c.ln2_rstd, d_ln2, d_xmid, G.ln2_g,
                                 G.ln2_b);
      d_xmid += dx;  // residual

      // attention branch
      Mat<S> d_concat = detail::project_backward(c.att_concat, L.wo, d_xmid, G.wo, G.bo,
                                                 A ? &A->wo : nullptr, dA ? &dA->wo : nullptr,
                                                 lscale);
      const int T2 = static_cast<int>(c.x_in.rows());
      Mat<S> d_q = Mat<S>::Zero(T2, d), d_k = Mat<S>::Zero(T2, d), d_v = Mat<S>::Zero(T2, d);
      for (int h = 0; h < H; ++h) {
        auto qh = c.q.block(0, h * hd, T2, hd);
        auto kh = c.k.block(0, h * hd, T2, hd);
        auto vh = c.v.block(0, h * hd, T2, hd);
        auto probs = c.att_probs.block(h * T2, 0, T2, T2);
        auto d_oh = d_concat.block(0, h * hd, T2, hd);

        Mat<S> d_probs = d_oh * vh.transpose();          // [T, T]
        d_v.block(0, h * hd, T2, hd).noalias() = probs.transpose() * d_oh;

        Mat<S> d_scores(T2, T2);
        for (int i = 0; i < T2; ++i) {
          S dot = 0;
          for (int j = 0; j <= i; ++j) dot += d_probs(i, j) * probs(i, j);
          for (int j = 0; j <= i; ++j)
            d_scores(i, j) = probs(i, j) * (d_probs(i, j) - dot);
          for (int j = i + 1; j < T2; ++j) d_scores(i, j) = 0;
        }
        d_q.block(0, h * hd, T2, hd).noalias() = d_scores * kh * inv_sqrt_hd;
        d_k.block(0, h * hd, T2, hd).noalias() = d_scores.transpose() * qh * inv_sqrt_hd;
      }
      Mat<S> d_ln1 = detail::project_backward(c.ln1_out, L.wq, d_q, G.wq, G.bq,
                                              A ? &A->wq : nullptr, dA ? &dA->wq : nullptr, lscale);
      d_ln1 += detail::project_backward(c.ln1_out, L.wk, d_k, G.wk, G.bk, A ? &A->wk : nullptr,
                                        dA ? &dA->wk : nullptr, lscale);
      d_ln1 += detail::project_backward(c.ln1_out, L.wv, d_v, G.wv, G.bv, A ? &A->wv : nullptr,
                                        dA ? &dA->wv : nullptr, lscale);
      Mat<S> d_xin;
      detail::layernorm_backward(c.x_in, L.ln1_g, c.ln1_mean, c.ln1_rstd, d_ln1, d_xin, G.ln1_g,
                                 G.ln1_b);
      d_xin += d_xmid;  // residual
      dx = std::move(d_xin);
    }

    // embeddings
    for (int t = 0; t < T; ++t) {
      out.grads.tok_emb.row(inputs[static_cast<std::size_t>(t)]) += dx.row(t);
      out.grads.pos_emb.row(t) += dx.row(t);
    }
  }

  out.loss = loss_sum / static_cast<double>(total_masked);
  return out;
}

}  // namespace coglab
