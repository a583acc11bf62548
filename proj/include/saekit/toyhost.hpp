#pragma once

// A small deterministic transformer language model used as the host for SAE
// collection, splicing and evaluation. Each block is RMS-normed at the start
// and end of both the attention and MLP sublayers:
//
//   a_in      = rmsnorm(resid, g_pre_attn)
//   heads     = concat_h( softmax(Q_h K_h^T / sqrt(dh)) V_h )   <- attn_out_pre_wo
//   resid    += rmsnorm(heads W_O, g_post_attn)
//   m_in      = rmsnorm(resid, g_pre_mlp)                       <- mlp_in_post_norm
//   mlp_out   = rmsnorm(gelu(m_in W1) W2, g_post_mlp)           <- mlp_out_post_norm
//   resid    += mlp_out                                         <- resid_post_mlp
//
// The forward pass takes an optional transform at one site; the transform
// output replaces the site value and the pass continues. At mlp_in_post_norm
// the transform consumes m_in and its output replaces mlp_out (the whole MLP
// sublayer), which is the transcoder splice.

#include "saekit/common.hpp"
#include "saekit/shard.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace saekit {

// token inventory of the toy host
inline constexpr uint16_t kTokBos = 0;
inline constexpr uint16_t kTokEos = 1;
inline constexpr uint16_t kTokPad = 2;
inline constexpr uint16_t kTokFirstSymbol = 3;

inline bool is_special_token(uint16_t t) { return t < kTokFirstSymbol; }

struct ToyLmConfig {
  int vocab = 67;  // 64 symbols + BOS/EOS/PAD
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int head_dim = 16;
  int d_ff = 256;
  int max_seq = 64;
  double rms_eps = 1e-6;

  void validate() const {
    if (heads * head_dim != d_model) {
      throw ConfigError("ToyLmConfig: heads * head_dim must equal d_model");
    }
    if (vocab < kTokFirstSymbol + 2 || vocab > 256) {
      throw ConfigError("ToyLmConfig: vocab must be in [5, 256]");
    }
    if (layers < 1 || d_model < 1 || d_ff < 1 || max_seq < 2) {
      throw ConfigError("ToyLmConfig: bad sizes");
    }
  }
};

template <class T>
struct ToyLmT {
  ToyLmConfig cfg;
  MatR<T> embed;      // V x D
  MatR<T> pos_embed;  // max_seq x D, learned absolute positions
  struct Layer {
    VecX<T> g_pre_attn, g_post_attn, g_pre_mlp, g_post_mlp;  // D
    MatR<T> wq, wk, wv, wo;                                  // D x D
    MatR<T> w1;                                              // D x F
    MatR<T> w2;                                              // F x D
  };
  std::vector<Layer> layers;
  VecX<T> g_final;  // D
  MatR<T> unembed;  // D x V

  template <class U>
  ToyLmT<U> cast() const {
    ToyLmT<U> out;
    out.cfg = cfg;
    out.embed = embed.template cast<U>();
    out.pos_embed = pos_embed.template cast<U>();
    out.layers.resize(layers.size());
    for (size_t l = 0; l < layers.size(); ++l) {
      const Layer& a = layers[l];
      auto& b = out.layers[l];
      b.g_pre_attn = a.g_pre_attn.template cast<U>();
      b.g_post_attn = a.g_post_attn.template cast<U>();
      b.g_pre_mlp = a.g_pre_mlp.template cast<U>();
      b.g_post_mlp = a.g_post_mlp.template cast<U>();
      b.wq = a.wq.template cast<U>();
      b.wk = a.wk.template cast<U>();
      b.wv = a.wv.template cast<U>();
      b.wo = a.wo.template cast<U>();
      b.w1 = a.w1.template cast<U>();
      b.w2 = a.w2.template cast<U>();
    }
    out.g_final = g_final.template cast<U>();
    out.unembed = unembed.template cast<U>();
    return out;
  }
};

using ToyLm = ToyLmT<float>;

ToyLm toy_lm_random_init(const ToyLmConfig& cfg, uint64_t seed);
void save_toy_lm(const std::filesystem::path& path, const ToyLm& lm);
ToyLm load_toy_lm(const std::filesystem::path& path);

// Dimension of one activation row at a site.
inline int site_dim(const ToyLmConfig& cfg, Site site) {
  switch (site) {
    case Site::attn_out_pre_wo: return cfg.heads * cfg.head_dim;
    default: return cfg.d_model;
  }
}

// ----------------------------- forward -----------------------------

template <class T>
struct ToyLmCacheT {
  std::vector<uint16_t> tokens;
  MatR<T> x0;
  struct LayerCache {
    MatR<T> resid_in, a_in;
    VecX<T> a_in_inv_rms;
    MatR<T> q, k, v;
    std::vector<MatR<T>> probs;  // per head, S x S
    MatR<T> heads_concat, attn_proj, attn_out;
    VecX<T> attn_out_inv_rms;
    MatR<T> resid_mid, m_in;
    VecX<T> m_in_inv_rms;
    MatR<T> h_pre, h, mlp_raw, mlp_out;
    VecX<T> mlp_out_inv_rms;
    MatR<T> resid_out;
  };
  std::vector<LayerCache> layers;
  MatR<T> final_normed;
  VecX<T> final_inv_rms;
  MatR<T> logits;
};

template <class T>
using SiteTransformT = std::function<MatR<T>(const MatR<T>&)>;

namespace detail {

template <class T>
MatR<T> rmsnorm_rows(const MatR<T>& x, const VecX<T>& gain, double eps, VecX<T>& inv_rms_out) {
  const Eigen::Index S = x.rows(), D = x.cols();
  MatR<T> y(S, D);
  inv_rms_out.resize(S);
  for (Eigen::Index i = 0; i < S; ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(D) + static_cast<T>(eps);
    const T inv = T(1) / std::sqrt(ms);
    inv_rms_out(i) = inv;
    y.row(i) = x.row(i).cwiseProduct(gain.transpose()) * inv;
  }
  return y;
}

template <class T>
T gelu(T x) {
  return static_cast<T>(0.5) * x * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
  const T phi = std::exp(-x * x / T(2)) * static_cast<T>(0.3989422804014326779);
  const T Phi = static_cast<T>(0.5) * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
  return Phi + x * phi;
}

}  // namespace detail

template <class T>
void toy_forward(const ToyLmT<T>& lm, std::span<const uint16_t> tokens, ToyLmCacheT<T>& cache,
                 const SiteSpec* splice_site = nullptr,
                 const SiteTransformT<T>* transform = nullptr) {
  const auto& cfg = lm.cfg;
  const Eigen::Index S = static_cast<Eigen::Index>(tokens.size());
  const int D = cfg.d_model, H = cfg.heads, Dh = cfg.head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(Dh));
  if (S < 2) throw ConfigError("toy_forward: need at least two tokens");

  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.x0.resize(S, D);
  // embeddings are scaled by sqrt(d_model) so the token signal matches the
  // unit-RMS sublayer outputs added to the residual stream
  if (S > cfg.max_seq) throw ConfigError("toy_forward: sequence longer than max_seq");
  const T embed_scale = std::sqrt(static_cast<T>(D));
  for (Eigen::Index t = 0; t < S; ++t) {
    if (tokens[t] >= cfg.vocab) throw ConfigError("toy_forward: token out of range");
    cache.x0.row(t) = lm.embed.row(tokens[t]) * embed_scale + lm.pos_embed.row(t);
  }

  auto apply = [&](Site site, int layer, MatR<T>& value) {
    if (splice_site && transform && splice_site->site == site && splice_site->layer == layer) {
      MatR<T> replaced = (*transform)(value);
      if (replaced.rows() != value.rows() || replaced.cols() != value.cols()) {
        throw std::invalid_argument("site transform changed the activation shape");
      }
      value = std::move(replaced);
    }
  };

  cache.layers.resize(cfg.layers);
  MatR<T> resid = cache.x0;
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& L = lm.layers[l];
    auto& C = cache.layers[l];
    C.resid_in = resid;
    C.a_in = detail::rmsnorm_rows(C.resid_in, L.g_pre_attn, cfg.rms_eps, C.a_in_inv_rms);

    C.q.noalias() = C.a_in * L.wq;
    C.k.noalias() = C.a_in * L.wk;
    C.v.noalias() = C.a_in * L.wv;

    C.probs.assign(H, MatR<T>());
    C.heads_concat.resize(S, D);
    for (int h = 0; h < H; ++h) {
      auto Qh = C.q.middleCols(h * Dh, Dh);
      auto Kh = C.k.middleCols(h * Dh, Dh);
      auto Vh = C.v.middleCols(h * Dh, Dh);
      MatR<T> scores(S, S);
      scores.noalias() = Qh * Kh.transpose();
      scores *= scale;
      MatR<T>& P = C.probs[h];
      P = MatR<T>::Zero(S, S);
      for (Eigen::Index i = 0; i < S; ++i) {
        // causal softmax over j <= i
        T mx = scores(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        T denom = T(0);
        for (Eigen::Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(scores(i, j) - mx);
          denom += P(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= denom;
      }
      C.heads_concat.middleCols(h * Dh, Dh).noalias() = P * Vh;
    }
    apply(Site::attn_out_pre_wo, l, C.heads_concat);

    C.attn_proj.noalias() = C.heads_concat * L.wo;
    C.attn_out = detail::rmsnorm_rows(C.attn_proj, L.g_post_attn, cfg.rms_eps, C.attn_out_inv_rms);
    C.resid_mid = C.resid_in + C.attn_out;

    C.m_in = detail::rmsnorm_rows(C.resid_mid, L.g_pre_mlp, cfg.rms_eps, C.m_in_inv_rms);
    C.h_pre.noalias() = C.m_in * L.w1;
    C.h = C.h_pre.unaryExpr([](T x) { return detail::gelu(x); });
    C.mlp_raw.noalias() = C.h * L.w2;
    C.mlp_out = detail::rmsnorm_rows(C.mlp_raw, L.g_post_mlp, cfg.rms_eps, C.mlp_out_inv_rms);
    if (splice_site && transform && splice_site->site == Site::mlp_in_post_norm &&
        splice_site->layer == l) {
      // transcoder splice: the transform consumes m_in and replaces mlp_out
      MatR<T> replaced = (*transform)(C.m_in);
      if (replaced.rows() != S || replaced.cols() != D) {
        throw std::invalid_argument("transcoder transform changed the activation shape");
      }
      C.mlp_out = std::move(replaced);
    }
    apply(Site::mlp_out_post_norm, l, C.mlp_out);

    C.resid_out = C.resid_mid + C.mlp_out;
    apply(Site::resid_post_mlp, l, C.resid_out);
    resid = C.resid_out;
  }

  cache.final_normed = detail::rmsnorm_rows(resid, lm.g_final, cfg.rms_eps, cache.final_inv_rms);
  cache.logits.noalias() = cache.final_normed * lm.unembed;
}

// Read site values out of a forward cache.
template <class T>
const MatR<T>& site_values(const ToyLmCacheT<T>& cache, const SiteSpec& spec) {
  const auto& L = cache.layers.at(static_cast<size_t>(spec.layer));
  switch (spec.site) {
    case Site::attn_out_pre_wo: return L.heads_concat;
    case Site::mlp_out_post_norm: return L.mlp_out;
    case Site::resid_post_mlp: return L.resid_out;
    case Site::mlp_in_post_norm: return L.m_in;
  }
  throw ConfigError("unknown site");
}

// ----------------------------- backward -----------------------------

template <class T>
struct ToyLmGradsT {
  MatR<T> embed;
  MatR<T> pos_embed;
  struct Layer {
    VecX<T> g_pre_attn, g_post_attn, g_pre_mlp, g_post_mlp;
    MatR<T> wq, wk, wv, wo, w1, w2;
  };
  std::vector<Layer> layers;
  VecX<T> g_final;
  MatR<T> unembed;

  static ToyLmGradsT zeros_like(const ToyLmT<T>& lm) {
    ToyLmGradsT g;
    g.embed = MatR<T>::Zero(lm.embed.rows(), lm.embed.cols());
    g.pos_embed = MatR<T>::Zero(lm.pos_embed.rows(), lm.pos_embed.cols());
    g.layers.resize(lm.layers.size());
    for (size_t l = 0; l < lm.layers.size(); ++l) {
      const auto& L = lm.layers[l];
      auto& gl = g.layers[l];
      gl.g_pre_attn = VecX<T>::Zero(L.g_pre_attn.size());
      gl.g_post_attn = VecX<T>::Zero(L.g_post_attn.size());
      gl.g_pre_mlp = VecX<T>::Zero(L.g_pre_mlp.size());
      gl.g_post_mlp = VecX<T>::Zero(L.g_post_mlp.size());
      gl.wq = MatR<T>::Zero(L.wq.rows(), L.wq.cols());
      gl.wk = MatR<T>::Zero(L.wk.rows(), L.wk.cols());
      gl.wv = MatR<T>::Zero(L.wv.rows(), L.wv.cols());
      gl.wo = MatR<T>::Zero(L.wo.rows(), L.wo.cols());
      gl.w1 = MatR<T>::Zero(L.w1.rows(), L.w1.cols());
      gl.w2 = MatR<T>::Zero(L.w2.rows(), L.w2.cols());
    }
    g.g_final = VecX<T>::Zero(lm.g_final.size());
    g.unembed = MatR<T>::Zero(lm.unembed.rows(), lm.unembed.cols());
    return g;
  }
};

namespace detail {

// y = x .* gain * inv_rms rowwise; dx and dgain from dy.
template <class T>
MatR<T> rmsnorm_backward(const MatR<T>& x, const VecX<T>& gain, const VecX<T>& inv_rms,
                         const MatR<T>& dy, VecX<T>* dgain) {
  const Eigen::Index S = x.rows(), D = x.cols();
  MatR<T> dx(S, D);
  for (Eigen::Index i = 0; i < S; ++i) {
    const T inv = inv_rms(i);
    auto xr = x.row(i);
    auto dyr = dy.row(i);
    const T s = dyr.cwiseProduct(gain.transpose()).cwiseProduct(xr).sum();
    dx.row(i) =
        dyr.cwiseProduct(gain.transpose()) * inv - xr * (inv * inv * inv * s / static_cast<T>(D));
    if (dgain) dgain->noalias() += xr.cwiseProduct(dyr).transpose() * inv;
  }
  return dx;
}

}  // namespace detail

// Backpropagates d_logits through a cached clean forward pass. Weight
// gradients accumulate into *wgrads when given; the gradient at one site can
// be captured into *site_grad_out.
template <class T>
void toy_backward(const ToyLmT<T>& lm, const ToyLmCacheT<T>& cache, const MatR<T>& d_logits,
                  ToyLmGradsT<T>* wgrads = nullptr, const SiteSpec* capture_site = nullptr,
                  MatR<T>* site_grad_out = nullptr) {
  const auto& cfg = lm.cfg;
  const Eigen::Index S = cache.logits.rows();
  const int D = cfg.d_model, H = cfg.heads, Dh = cfg.head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(Dh));

  auto capture = [&](Site site, int layer, const MatR<T>& grad) {
    if (capture_site && site_grad_out && capture_site->site == site &&
        capture_site->layer == layer) {
      *site_grad_out = grad;
    }
  };

  if (wgrads) wgrads->unembed.noalias() += cache.final_normed.transpose() * d_logits;
  MatR<T> d_final_normed;
  d_final_normed.noalias() = d_logits * lm.unembed.transpose();

  const MatR<T>& final_resid = cache.layers.back().resid_out;
  MatR<T> d_resid = detail::rmsnorm_backward(final_resid, lm.g_final, cache.final_inv_rms,
                                             d_final_normed, wgrads ? &wgrads->g_final : nullptr);

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& L = lm.layers[l];
    const auto& C = cache.layers[l];
    auto* gl = wgrads ? &wgrads->layers[static_cast<size_t>(l)] : nullptr;

    capture(Site::resid_post_mlp, l, d_resid);

    // resid_out = resid_mid + mlp_out
    const MatR<T>& d_mlp_out = d_resid;
    capture(Site::mlp_out_post_norm, l, d_mlp_out);
    MatR<T> d_mlp_raw = detail::rmsnorm_backward(C.mlp_raw, L.g_post_mlp, C.mlp_out_inv_rms,
                                                 d_mlp_out, gl ? &gl->g_post_mlp : nullptr);
    MatR<T> d_h;
    d_h.noalias() = d_mlp_raw * L.w2.transpose();
    if (gl) gl->w2.noalias() += C.h.transpose() * d_mlp_raw;
    MatR<T> d_h_pre =
        d_h.cwiseProduct(C.h_pre.unaryExpr([](T x) { return detail::gelu_grad(x); }));
    MatR<T> d_m_in;
    d_m_in.noalias() = d_h_pre * L.w1.transpose();
    if (gl) gl->w1.noalias() += C.m_in.transpose() * d_h_pre;
    capture(Site::mlp_in_post_norm, l, d_m_in);
    MatR<T> d_resid_mid = detail::rmsnorm_backward(C.resid_mid, L.g_pre_mlp, C.m_in_inv_rms,
                                                   d_m_in, gl ? &gl->g_pre_mlp : nullptr);
    d_resid_mid += d_resid;

    // resid_mid = resid_in + attn_out
    const MatR<T>& d_attn_out = d_resid_mid;
    MatR<T> d_attn_proj = detail::rmsnorm_backward(C.attn_proj, L.g_post_attn, C.attn_out_inv_rms,
                                                   d_attn_out, gl ? &gl->g_post_attn : nullptr);
    MatR<T> d_heads;
    d_heads.noalias() = d_attn_proj * L.wo.transpose();
    if (gl) gl->wo.noalias() += C.heads_concat.transpose() * d_attn_proj;
    capture(Site::attn_out_pre_wo, l, d_heads);

    MatR<T> d_q = MatR<T>::Zero(S, D), d_k = MatR<T>::Zero(S, D), d_v = MatR<T>::Zero(S, D);
    for (int h = 0; h < H; ++h) {
      auto Qh = C.q.middleCols(h * Dh, Dh);
      auto Kh = C.k.middleCols(h * Dh, Dh);
      auto Vh = C.v.middleCols(h * Dh, Dh);
      const MatR<T>& P = C.probs[h];
      auto dOh = d_heads.middleCols(h * Dh, Dh);

      d_v.middleCols(h * Dh, Dh).noalias() = P.transpose() * dOh;
      MatR<T> dP;
      dP.noalias() = dOh * Vh.transpose();
      // softmax backward; masked entries have P = 0 and drop out
      MatR<T> dS(S, S);
      for (Eigen::Index i = 0; i < S; ++i) {
        const T dot = dP.row(i).cwiseProduct(P.row(i)).sum();
        dS.row(i) = P.row(i).cwiseProduct(dP.row(i) - MatR<T>::Constant(1, S, dot));
      }
      d_q.middleCols(h * Dh, Dh).noalias() = dS * Kh * scale;
      d_k.middleCols(h * Dh, Dh).noalias() = dS.transpose() * Qh * scale;
    }

    MatR<T> d_a_in;
    d_a_in.noalias() = d_q * L.wq.transpose();
    d_a_in.noalias() += d_k * L.wk.transpose();
    d_a_in.noalias() += d_v * L.wv.transpose();
    if (gl) {
      gl->wq.noalias() += C.a_in.transpose() * d_q;
      gl->wk.noalias() += C.a_in.transpose() * d_k;
      gl->wv.noalias() += C.a_in.transpose() * d_v;
    }
    MatR<T> d_resid_in = detail::rmsnorm_backward(C.resid_in, L.g_pre_attn, C.a_in_inv_rms,
                                                  d_a_in, gl ? &gl->g_pre_attn : nullptr);
    d_resid_in += d_resid_mid;
    d_resid = std::move(d_resid_in);
  }

  if (wgrads) {
    const T embed_scale = std::sqrt(static_cast<T>(D));
    for (Eigen::Index t = 0; t < S; ++t) {
      wgrads->embed.row(cache.tokens[static_cast<size_t>(t)]) += d_resid.row(t) * embed_scale;
      wgrads->pos_embed.row(t) += d_resid.row(t);
    }
  }
}

// ----------------------------- losses and splicing -----------------------------

// Cross-entropy of predicting tokens[t+1] from position t. A position counts
// only if neither tokens[t] nor tokens[t+1] is special.
struct TokenLossResult {
  VecX<double> per_position;    // size S-1; 0 where masked
  std::vector<uint8_t> counted; // size S-1
  double mean = 0;              // over counted positions
  int64_t count = 0;
};

template <class T>
TokenLossResult lm_cross_entropy(const MatR<T>& logits, std::span<const uint16_t> tokens) {
  const Eigen::Index S = logits.rows();
  TokenLossResult out;
  out.per_position = VecX<double>::Zero(S - 1);
  out.counted.assign(static_cast<size_t>(S - 1), 0);
  double total = 0;
  for (Eigen::Index t = 0; t + 1 < S; ++t) {
    if (is_special_token(tokens[t]) || is_special_token(tokens[t + 1])) continue;
    // stable log-softmax in 64-bit
    VecX<double> row = logits.row(t).template cast<double>();
    const double mx = row.maxCoeff();
    const double lse = std::log((row.array() - mx).exp().sum()) + mx;
    const double loss = lse - row(tokens[t + 1]);
    out.per_position(t) = loss;
    out.counted[static_cast<size_t>(t)] = 1;
    total += loss;
    ++out.count;
  }
  out.mean = out.count > 0 ? total / static_cast<double>(out.count) : 0.0;
  return out;
}

// Runs the forward pass with `transform` substituted at the site and returns
// per-token losses. An identity transform reproduces the plain forward
// bitwise (the same operations run either way).
template <class T>
TokenLossResult forward_with_splice(const ToyLmT<T>& lm, std::span<const uint16_t> tokens,
                                    const SiteSpec& site, const SiteTransformT<T>& transform) {
  ToyLmCacheT<T> cache;
  toy_forward(lm, tokens, cache, &site, &transform);
  return lm_cross_entropy<T>(cache.logits, tokens);
}

// Gradient of the mean-centered correct-next-token logit at `position` with
// respect to the site activation row at the same position (clean forward).
template <class T>
VecX<T> attribution_gradient(const ToyLmT<T>& lm, const ToyLmCacheT<T>& cache,
                             const SiteSpec& site, Eigen::Index position) {
  const Eigen::Index S = cache.logits.rows();
  const int V = lm.cfg.vocab;
  if (position + 1 >= S) throw std::invalid_argument("attribution position has no next token");
  MatR<T> d_logits = MatR<T>::Zero(S, V);
  d_logits.row(position).setConstant(T(-1) / static_cast<T>(V));
  d_logits(position, cache.tokens[static_cast<size_t>(position + 1)]) += T(1);
  MatR<T> site_grad;
  toy_backward<T>(lm, cache, d_logits, nullptr, &site, &site_grad);
  return site_grad.row(position).transpose();
}

// ----------------------------- gain folding -----------------------------

// Folds the pre-MLP RMSNorm gains into W1 (W1 <- diag(g) W1, gains set to 1);
// model outputs are unchanged and the transcoder input site becomes the
// post-RMSNorm activation with unit gains.
template <class T>
ToyLmT<T> fold_rms_gains(const ToyLmT<T>& lm) {
  ToyLmT<T> out = lm;
  for (auto& layer : out.layers) {
    for (Eigen::Index d = 0; d < layer.w1.rows(); ++d) {
      layer.w1.row(d) *= layer.g_pre_mlp(d);
    }
    layer.g_pre_mlp.setOnes();
  }
  return out;
}

// ----------------------------- corpus -----------------------------

// Sequences from a seeded order-2 Markov source over `symbols` symbols,
// wrapped as BOS <symbols...> EOS.
struct ToyCorpus {
  uint16_t vocab_total = 0;  // symbols + specials
  uint32_t seq_len = 0;
  std::vector<std::vector<uint16_t>> sequences;
};

ToyCorpus generate_markov_corpus(int symbols, int64_t num_sequences, int seq_len, uint64_t seed);
void save_corpus(const std::filesystem::path& path, const ToyCorpus& corpus);
ToyCorpus load_corpus(const std::filesystem::path& path);

// ----------------------------- host training -----------------------------

struct ToyTrainConfig {
  int64_t steps = 2000;
  int64_t sequences_per_step = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
};

struct ToyTrainResult {
  double initial_loss = 0;
  double final_loss = 0;  // held-out mean cross-entropy
};

// Plain minibatch Adam over the full weight set; independent of the SAE
// trainer. Throws NumericError on divergence.
ToyTrainResult train_toy_lm(ToyLm& lm, const ToyCorpus& corpus, const ToyTrainConfig& cfg);

double held_out_loss(const ToyLm& lm, const ToyCorpus& corpus, int64_t max_sequences = 64);

}  // namespace saekit
