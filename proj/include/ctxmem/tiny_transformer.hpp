#pragma once

// Reference decoder-only transformer in double precision: learned token and
// position embeddings, pre-LayerNorm blocks (causal multi-head attention,
// GELU MLP), final LayerNorm and an untied output head. Forward and backward
// passes are written out by hand so adapter and base gradients are exact.

#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>

#include <nlohmann/json.hpp>

#include "ctxmem/adapter.hpp"
#include "ctxmem/backend.hpp"
#include "ctxmem/cloze.hpp"
#include "ctxmem/linalg.hpp"
#include "ctxmem/tensor_io.hpp"

namespace ctxmem {

struct TransformerConfig {
  std::size_t vocab_size = 0;
  std::size_t context_window = 1024;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 512;

  void validate() const {
    if (vocab_size < 3) throw ConfigError("vocab_size too small");
    if (context_window == 0) throw ConfigError("context_window must be positive");
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (n_layers == 0 || d_ff == 0) throw ConfigError("n_layers and d_ff must be positive");
  }

  bool operator==(const TransformerConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"context_window", c.context_window}, {"d_model", c.d_model},
       {"n_heads", c.n_heads},       {"n_layers", c.n_layers},             {"d_ff", c.d_ff}};
}

inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("context_window").get_to(c.context_window);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_ff").get_to(c.d_ff);
}

struct BlockParams {
  Matrix ln1_g, ln1_b;      // 1 x D
  Matrix wq, wk, wv, wo;    // D x D (out x in)
  Matrix ln2_g, ln2_b;      // 1 x D
  Matrix w1, b1;            // F x D, 1 x F
  Matrix w2, b2;            // D x F, 1 x D

  Matrix& proj(Projection p) {
    switch (p) {
      case Projection::wq: return wq;
      case Projection::wk: return wk;
      case Projection::wv: return wv;
      case Projection::wo: return wo;
      case Projection::w1: return w1;
      case Projection::w2: return w2;
    }
    return wq;
  }
  const Matrix& proj(Projection p) const { return const_cast<BlockParams*>(this)->proj(p); }
};

struct TransformerParams {
  Matrix tok_emb;  // V x D
  std::vector<BlockParams> blocks;
  Matrix lnf_g, lnf_b;  // 1 x D
  Matrix head;          // V x D

  /// Visits every parameter matrix with a stable name.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("tok_emb", self.tok_emb);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = "block." + std::to_string(i) + ".";
      f(p + "ln1_g", b.ln1_g);
      f(p + "ln1_b", b.ln1_b);
      f(p + "wq", b.wq);
      f(p + "wk", b.wk);
      f(p + "wv", b.wv);
      f(p + "wo", b.wo);
      f(p + "ln2_g", b.ln2_g);
      f(p + "ln2_b", b.ln2_b);
      f(p + "w1", b.w1);
      f(p + "b1", b.b1);
      f(p + "w2", b.w2);
      f(p + "b2", b.b2);
    }
    f("lnf_g", self.lnf_g);
    f("lnf_b", self.lnf_b);
    f("head", self.head);
  }
  template <typename F>
  void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  static TransformerParams zeros(const TransformerConfig& c) {
    const auto V = static_cast<Eigen::Index>(c.vocab_size), D = static_cast<Eigen::Index>(c.d_model),
               F = static_cast<Eigen::Index>(c.d_ff);
    TransformerParams p;
    p.tok_emb = Matrix::Zero(V, D);
    p.blocks.resize(c.n_layers);
    for (auto& b : p.blocks) {
      b.ln1_g = Matrix::Zero(1, D);
      b.ln1_b = Matrix::Zero(1, D);
      b.wq = b.wk = b.wv = b.wo = Matrix::Zero(D, D);
      b.ln2_g = Matrix::Zero(1, D);
      b.ln2_b = Matrix::Zero(1, D);
      b.w1 = Matrix::Zero(F, D);
      b.b1 = Matrix::Zero(1, F);
      b.w2 = Matrix::Zero(D, F);
      b.b2 = Matrix::Zero(1, D);
    }
    p.lnf_g = Matrix::Zero(1, D);
    p.lnf_b = Matrix::Zero(1, D);
    p.head = Matrix::Zero(V, D);
    return p;
  }

  /// Embeddings and head N(0, 0.02); projections N(0, 0.5 / sqrt(fan_in)),
  /// residual outputs further scaled by 1/sqrt(2L). A fixed 0.02 is tuned for
  /// wide models and leaves narrow ones near a saddle for thousands of steps.
  static TransformerParams random(const TransformerConfig& c, std::uint64_t seed) {
    TransformerParams p = zeros(c);
    Rng rng(seed);
    const double s = 0.02;
    const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(c.n_layers));
    const double sd = 0.5 / std::sqrt(static_cast<double>(c.d_model));
    const double sf = 0.5 / std::sqrt(static_cast<double>(c.d_ff));
    p.tok_emb = random_normal(p.tok_emb.rows(), p.tok_emb.cols(), s, rng);
    // No absolute position table: positions enter only through the rotary
    // q/k encoding. A learned table slowed copy-head formation badly.
    for (auto& b : p.blocks) {
      b.ln1_g.setOnes();
      b.ln2_g.setOnes();
      b.wq = random_normal(b.wq.rows(), b.wq.cols(), sd, rng);
      b.wk = random_normal(b.wk.rows(), b.wk.cols(), sd, rng);
      b.wv = random_normal(b.wv.rows(), b.wv.cols(), sd, rng);
      b.wo = random_normal(b.wo.rows(), b.wo.cols(), sd * depth, rng);
      b.w1 = random_normal(b.w1.rows(), b.w1.cols(), sd, rng);
      b.w2 = random_normal(b.w2.rows(), b.w2.cols(), sf * depth, rng);
    }
    p.lnf_g.setOnes();
    p.head = random_normal(p.head.rows(), p.head.cols(), s, rng);
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  std::string fingerprint() const {
    std::uint64_t h = kFnvOffset;
    for_each([&](const std::string& name, const Matrix& m) {
      h = fnv1a(name, h);
      h = fnv1a_values(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), h);
    });
    return hex64(h);
  }
};

namespace tfm {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd rstd;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, LayerNormCache* cache) {
  const auto D = static_cast<double>(x.cols());
  Eigen::VectorXd mean = x.rowwise().sum() / D;
  Matrix xc = x.colwise() - mean;
  Eigen::VectorXd var = xc.array().square().rowwise().sum() / D;
  Eigen::VectorXd rstd = (var.array() + kLnEps).rsqrt();
  Matrix xhat = xc.array().colwise() * rstd.array();
  Matrix y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& g, const LayerNormCache& c, Matrix* dg, Matrix* db) {
  if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * g.row(0).array();
  const auto D = static_cast<double>(dy.cols());
  Eigen::VectorXd m1 = dxhat.rowwise().sum() / D;
  Eigen::VectorXd m2 = (dxhat.array() * c.xhat.array()).rowwise().sum() / D;
  Matrix dx = (dxhat.colwise() - m1) - (c.xhat.array().colwise() * m2.array()).matrix();
  return dx.array().colwise() * c.rstd.array();
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

/// Cached state of one adapter-carrying linear map.
struct LoraCache {
  bool active = false;
  Matrix mask;  // dropout keep-mask scaled by 1/(1-p); empty when dropout is off
  Matrix xd;    // adapter input after dropout
  Matrix xa;    // xd * A^T
};

struct LoraRef {
  const LoraFactors* factors = nullptr;
  double scale = 0.0;
  double dropout = 0.0;
};

inline Matrix linear(const Matrix& x, const Matrix& w, const LoraRef& lora, Rng* rng, LoraCache* cache) {
  Matrix y = x * w.transpose();
  if (lora.factors) {
    Matrix mask;
    const bool drop = rng && lora.dropout > 0.0;
    if (drop) {
      mask.resize(x.rows(), x.cols());
      const double keep = 1.0 / (1.0 - lora.dropout);
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(*rng) < lora.dropout ? 0.0 : keep;
    }
    Matrix xd = drop ? Matrix(x.array() * mask.array()) : x;
    Matrix xa = xd * lora.factors->a.transpose();
    y.noalias() += lora.scale * (xa * lora.factors->b.transpose());
    if (cache) {
      cache->active = true;
      cache->mask = std::move(mask);
      cache->xd = std::move(xd);
      cache->xa = std::move(xa);
    }
  }
  return y;
}

/// Backward of `linear`: returns dL/dx and accumulates weight and factor gradients.
inline Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, const LoraRef& lora,
                              const LoraCache& cache, Matrix* dw, LoraFactors* dlora) {
  Matrix dx = dy * w;
  if (dw) dw->noalias() += dy.transpose() * x;
  if (lora.factors && cache.active) {
    Matrix dxa = lora.scale * (dy * lora.factors->b);
    if (dlora) {
      dlora->b.noalias() += lora.scale * (dy.transpose() * cache.xa);
      dlora->a.noalias() += dxa.transpose() * cache.xd;
    }
    Matrix dxd = dxa * lora.factors->a;
    if (cache.mask.size() > 0)
      dx.array() += dxd.array() * cache.mask.array();
    else
      dx += dxd;
  }
  return dx;
}

struct BlockCache {
  Matrix x_in;
  LayerNormCache ln1;
  Matrix h1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix attn;
  Matrix x_mid;
  LayerNormCache ln2;
  Matrix h2;
  Matrix u, g;
  std::array<LoraCache, 6> lora;
};

struct ForwardCache {
  TokenSequence input;
  std::vector<BlockCache> blocks;
  Matrix x_final;  // residual after the last block
  LayerNormCache lnf;
  Matrix hf;  // final normalized states
};

inline LoraRef lora_ref(const AdapterState* adapter, std::size_t layer, Projection p) {
  if (!adapter) return {};
  const LoraFactors* f = adapter->find(layer, p);
  if (!f) return {};
  return {f, adapter->scaling(), adapter->dropout};
}

inline std::size_t pidx(Projection p) { return static_cast<std::size_t>(p); }

/// Rotary position encoding applied in place to rows [start, start + rows) of
/// per-head query or key blocks. `inverse` rotates back (used for gradients).
inline void rotate_positions(Matrix& m, Eigen::Index start, std::size_t n_heads, bool inverse) {
  const Eigen::Index dh = m.cols() / static_cast<Eigen::Index>(n_heads);
  const double sign = inverse ? -1.0 : 1.0;
  for (Eigen::Index i = 0; i + 1 < dh; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dh));
    for (Eigen::Index t = 0; t < m.rows(); ++t) {
      const double ang = static_cast<double>(start + t) * freq;
      const double c = std::cos(ang), s = sign * std::sin(ang);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const Eigen::Index a = static_cast<Eigen::Index>(h) * dh + i;
        const double x0 = m(t, a), x1 = m(t, a + 1);
        m(t, a) = c * x0 - s * x1;
        m(t, a + 1) = s * x0 + c * x1;
      }
    }
  }
}

/// Full forward pass; fills `cache` when given. Returns the final normalized states.
inline Matrix forward(const TransformerConfig& cfg, const TransformerParams& P, const AdapterState* adapter,
                      std::span<const TokenId> input, Rng* dropout_rng, ForwardCache* cache,
                      std::vector<Matrix>* block_outputs = nullptr) {
  const auto T = static_cast<Eigen::Index>(input.size());
  const auto D = static_cast<Eigen::Index>(cfg.d_model);
  if (input.size() > cfg.context_window) throw WindowOverflow(input.size(), cfg.context_window, "model input");
  Matrix x(T, D);
  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId tok = input[static_cast<std::size_t>(t)];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size)
      throw Error("token id " + std::to_string(tok) + " outside vocabulary");
    x.row(t) = P.tok_emb.row(tok);
  }
  if (cache) {
    cache->input.assign(input.begin(), input.end());
    cache->blocks.assign(cfg.n_layers, BlockCache{});
  }
  const std::size_t H = cfg.n_heads;
  const auto dh = static_cast<Eigen::Index>(cfg.d_model / H);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& B = P.blocks[l];
    BlockCache local;
    BlockCache& c = cache ? cache->blocks[l] : local;
    auto lc = [&](Projection p) { return cache ? &c.lora[pidx(p)] : nullptr; };
    if (cache) c.x_in = x;

    Matrix h1 = layer_norm(x, B.ln1_g, B.ln1_b, cache ? &c.ln1 : nullptr);
    Matrix q = linear(h1, B.wq, lora_ref(adapter, l, Projection::wq), dropout_rng, lc(Projection::wq));
    Matrix k = linear(h1, B.wk, lora_ref(adapter, l, Projection::wk), dropout_rng, lc(Projection::wk));
    Matrix v = linear(h1, B.wv, lora_ref(adapter, l, Projection::wv), dropout_rng, lc(Projection::wv));
    rotate_positions(q, 0, H, false);
    rotate_positions(k, 0, H, false);
    Matrix attn(T, D);
    if (cache) c.probs.resize(H);
    for (std::size_t h = 0; h < H; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      Matrix s = (q.middleCols(col, dh) * k.middleCols(col, dh).transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double e = std::exp(s(i, j) - mx);
          s(i, j) = e;
          sum += e;
        }
        s.row(i).head(i + 1) /= sum;
        if (i + 1 < T) s.row(i).tail(T - i - 1).setZero();
      }
      attn.middleCols(col, dh).noalias() = s * v.middleCols(col, dh);
      if (cache) c.probs[h] = std::move(s);
    }
    Matrix a = linear(attn, B.wo, lora_ref(adapter, l, Projection::wo), dropout_rng, lc(Projection::wo));
    x += a;
    if (cache) {
      c.h1 = std::move(h1);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.attn = std::move(attn);
      c.x_mid = x;
    }

    Matrix h2 = layer_norm(x, B.ln2_g, B.ln2_b, cache ? &c.ln2 : nullptr);
    Matrix u = linear(h2, B.w1, lora_ref(adapter, l, Projection::w1), dropout_rng, lc(Projection::w1));
    u.rowwise() += B.b1.row(0);
    Matrix g = u.unaryExpr([](double z) { return gelu(z); });
    Matrix m = linear(g, B.w2, lora_ref(adapter, l, Projection::w2), dropout_rng, lc(Projection::w2));
    m.rowwise() += B.b2.row(0);
    x += m;
    if (cache) {
      c.h2 = std::move(h2);
      c.u = std::move(u);
      c.g = std::move(g);
    }
    if (block_outputs) block_outputs->push_back(x);
  }
  Matrix hf = layer_norm(x, P.lnf_g, P.lnf_b, cache ? &cache->lnf : nullptr);
  if (cache) {
    cache->x_final = x;
    cache->hf = hf;
  }
  return hf;
}

/// Upstream gradients for `backward`. `dlogits` covers rows [first_row, T);
/// `dhidden` covers the same rows of hidden layer `hidden_layer`.
struct UpstreamGrads {
  std::size_t first_row = 0;
  Matrix dlogits;
  Matrix dhidden;
  std::size_t hidden_layer = 0;
};

inline void backward(const TransformerConfig& cfg, const TransformerParams& P, const AdapterState* adapter,
                     const ForwardCache& cache, const UpstreamGrads& up, TransformerParams* dP,
                     AdapterGradients* dA) {
  const auto T = static_cast<Eigen::Index>(cache.input.size());
  const auto D = static_cast<Eigen::Index>(cfg.d_model);
  const auto first = static_cast<Eigen::Index>(up.first_row);
  const auto rows = T - first;
  const std::size_t L = cfg.n_layers;

  auto inject = [&](Matrix& dst, std::size_t layer) {
    if (up.dhidden.size() > 0 && up.hidden_layer == layer) dst.bottomRows(rows) += up.dhidden;
  };

  Matrix dhf = Matrix::Zero(T, D);
  if (up.dlogits.size() > 0) {
    dhf.bottomRows(rows).noalias() = up.dlogits * P.head;
    if (dP) dP->head.noalias() += up.dlogits.transpose() * cache.hf.bottomRows(rows);
  }
  inject(dhf, L);
  Matrix dx = layer_norm_backward(dhf, P.lnf_g, cache.lnf, dP ? &dP->lnf_g : nullptr, dP ? &dP->lnf_b : nullptr);

  const std::size_t H = cfg.n_heads;
  const auto dh = static_cast<Eigen::Index>(cfg.d_model / H);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t li = L; li-- > 0;) {
    inject(dx, li);
    const auto& B = P.blocks[li];
    const auto& c = cache.blocks[li];
    BlockParams* dB = dP ? &dP->blocks[li] : nullptr;
    auto dl = [&](Projection p) -> LoraFactors* {
      if (!dA || !adapter || !adapter->find(li, p)) return nullptr;
      return &dA->at(factor_key(li, p));
    };
    auto ref = [&](Projection p) { return lora_ref(adapter, li, p); };

    // MLP branch
    if (dB) dB->b2 += dx.colwise().sum();
    Matrix dg = linear_backward(dx, c.g, B.w2, ref(Projection::w2), c.lora[pidx(Projection::w2)],
                                dB ? &dB->w2 : nullptr, dl(Projection::w2));
    Matrix du = dg.array() * c.u.unaryExpr([](double z) { return gelu_grad(z); }).array();
    if (dB) dB->b1 += du.colwise().sum();
    Matrix dh2 = linear_backward(du, c.h2, B.w1, ref(Projection::w1), c.lora[pidx(Projection::w1)],
                                 dB ? &dB->w1 : nullptr, dl(Projection::w1));
    dx += layer_norm_backward(dh2, B.ln2_g, c.ln2, dB ? &dB->ln2_g : nullptr, dB ? &dB->ln2_b : nullptr);

    // Attention branch
    Matrix dattn = linear_backward(dx, c.attn, B.wo, ref(Projection::wo), c.lora[pidx(Projection::wo)],
                                   dB ? &dB->wo : nullptr, dl(Projection::wo));
    Matrix dq(T, D), dk(T, D), dv(T, D);
    for (std::size_t h = 0; h < H; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const Matrix& p = c.probs[h];
      auto dO = dattn.middleCols(col, dh);
      Matrix dp = dO * c.v.middleCols(col, dh).transpose();
      dv.middleCols(col, dh).noalias() = p.transpose() * dO;
      Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
      Matrix ds = p.array() * (dp.colwise() - rs).array();
      dq.middleCols(col, dh).noalias() = (ds * c.k.middleCols(col, dh)) * inv_sqrt;
      dk.middleCols(col, dh).noalias() = (ds.transpose() * c.q.middleCols(col, dh)) * inv_sqrt;
    }
    rotate_positions(dq, 0, H, true);
    rotate_positions(dk, 0, H, true);
    Matrix dh1 = linear_backward(dq, c.h1, B.wq, ref(Projection::wq), c.lora[pidx(Projection::wq)],
                                 dB ? &dB->wq : nullptr, dl(Projection::wq));
    dh1 += linear_backward(dk, c.h1, B.wk, ref(Projection::wk), c.lora[pidx(Projection::wk)], dB ? &dB->wk : nullptr,
                           dl(Projection::wk));
    dh1 += linear_backward(dv, c.h1, B.wv, ref(Projection::wv), c.lora[pidx(Projection::wv)], dB ? &dB->wv : nullptr,
                           dl(Projection::wv));
    dx += layer_norm_backward(dh1, B.ln1_g, c.ln1, dB ? &dB->ln1_g : nullptr, dB ? &dB->ln1_b : nullptr);
  }
  if (dP) {
    for (Eigen::Index t = 0; t < T; ++t) {
      dP->tok_emb.row(cache.input[static_cast<std::size_t>(t)]) += dx.row(t);
    }
  }
}

/// Base weights with the adapter delta folded in.
inline TransformerParams merge(const TransformerParams& P, const AdapterState& adapter) {
  TransformerParams out = P;
  for (std::size_t l = 0; l < out.blocks.size(); ++l)
    for (auto p : kAllProjections)
      if (const LoraFactors* f = adapter.find(l, p)) out.blocks[l].proj(p).noalias() += adapter.scaling() * (f->b * f->a);
  return out;
}

}  // namespace tfm

class TinyTransformer;

namespace detail {

/// KV-cached incremental decoding for the reference transformer.
class TinyDecodeSession final : public DecodeSession {
 public:
  TinyDecodeSession(const TransformerConfig& cfg, const TransformerParams& params, const AdapterState* adapter)
      : cfg_(cfg), P_(params), adapter_(adapter) {
    const auto W = static_cast<Eigen::Index>(cfg.context_window), D = static_cast<Eigen::Index>(cfg.d_model);
    keys_.assign(cfg.n_layers, Matrix(W, D));
    values_.assign(cfg.n_layers, Matrix(W, D));
  }

  RowVector append(std::span<const TokenId> tokens) override {
    if (len_ + tokens.size() > cfg_.context_window)
      throw WindowOverflow(len_ + tokens.size(), cfg_.context_window, "decode session");
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const auto D = static_cast<Eigen::Index>(cfg_.d_model);
    const auto start = static_cast<Eigen::Index>(len_);
    Matrix x(n, D);
    for (Eigen::Index t = 0; t < n; ++t) {
      const TokenId tok = tokens[static_cast<std::size_t>(t)];
      if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab_size)
        throw Error("token id " + std::to_string(tok) + " outside vocabulary");
      x.row(t) = P_.tok_emb.row(tok);
    }
    const std::size_t H = cfg_.n_heads;
    const auto dh = static_cast<Eigen::Index>(cfg_.d_model / H);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const auto& B = P_.blocks[l];
      Matrix h1 = tfm::layer_norm(x, B.ln1_g, B.ln1_b, nullptr);
      Matrix q = tfm::linear(h1, B.wq, tfm::lora_ref(adapter_, l, Projection::wq), nullptr, nullptr);
      Matrix k = tfm::linear(h1, B.wk, tfm::lora_ref(adapter_, l, Projection::wk), nullptr, nullptr);
      tfm::rotate_positions(q, start, H, false);
      tfm::rotate_positions(k, start, H, false);
      keys_[l].middleRows(start, n) = k;
      values_[l].middleRows(start, n) =
          tfm::linear(h1, B.wv, tfm::lora_ref(adapter_, l, Projection::wv), nullptr, nullptr);
      const auto total = start + n;
      Matrix attn(n, D);
      for (std::size_t h = 0; h < H; ++h) {
        const auto col = static_cast<Eigen::Index>(h) * dh;
        Matrix s = (q.middleCols(col, dh) * keys_[l].block(0, col, total, dh).transpose()) * inv_sqrt;
        for (Eigen::Index i = 0; i < n; ++i) {
          const Eigen::Index visible = start + i + 1;
          const double mx = s.row(i).head(visible).maxCoeff();
          s.row(i).head(visible) = (s.row(i).head(visible).array() - mx).exp();
          s.row(i).head(visible) /= s.row(i).head(visible).sum();
          if (visible < total) s.row(i).tail(total - visible).setZero();
        }
        attn.middleCols(col, dh).noalias() = s * values_[l].block(0, col, total, dh);
      }
      x += tfm::linear(attn, B.wo, tfm::lora_ref(adapter_, l, Projection::wo), nullptr, nullptr);
      Matrix h2 = tfm::layer_norm(x, B.ln2_g, B.ln2_b, nullptr);
      Matrix u = tfm::linear(h2, B.w1, tfm::lora_ref(adapter_, l, Projection::w1), nullptr, nullptr);
      u.rowwise() += B.b1.row(0);
      Matrix g = u.unaryExpr([](double z) { return tfm::gelu(z); });
      Matrix m = tfm::linear(g, B.w2, tfm::lora_ref(adapter_, l, Projection::w2), nullptr, nullptr);
      m.rowwise() += B.b2.row(0);
      x += m;
    }
    len_ += tokens.size();
    Matrix last = x.bottomRows(1);
    Matrix hf = tfm::layer_norm(last, P_.lnf_g, P_.lnf_b, nullptr);
    return hf * P_.head.transpose();
  }

 private:
  const TransformerConfig& cfg_;
  const TransformerParams& P_;
  const AdapterState* adapter_;
  std::vector<Matrix> keys_, values_;
  std::size_t len_ = 0;
};

}  // namespace detail

class TinyTransformer final : public AdaptableModel {
 public:
  TinyTransformer(TransformerConfig cfg, TransformerParams params, std::string id = "tiny-transformer",
                  const Vocabulary& vocab = Vocabulary::reference())
      : cfg_(cfg), params_(std::move(params)), id_(std::move(id)), vocab_(vocab) {
    cfg_.validate();
    if (cfg_.vocab_size != vocab_.size())
      throw ConfigError("model vocab_size " + std::to_string(cfg_.vocab_size) + " differs from tokenizer size " +
                        std::to_string(vocab_.size()));
    fingerprint_ = params_.fingerprint();
  }

  static std::shared_ptr<TinyTransformer> create_random(TransformerConfig cfg, std::uint64_t seed,
                                                        std::string id = "tiny-transformer") {
    if (cfg.vocab_size == 0) cfg.vocab_size = Vocabulary::reference().size();
    return std::make_shared<TinyTransformer>(cfg, TransformerParams::random(cfg, seed), std::move(id));
  }

  std::string identifier() const override { return id_; }
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t context_window() const override { return cfg_.context_window; }
  std::size_t hidden_dim() const override { return cfg_.d_model; }
  std::size_t hidden_layers() const override { return cfg_.n_layers; }
  std::string fingerprint() const override { return fingerprint_; }

  const TransformerConfig& config() const { return cfg_; }
  const TransformerParams& params() const { return params_; }

  Matrix logits(const AdapterState* adapter, std::span<const TokenId> input, std::size_t first_row = 0) const override {
    check_first_row(input, first_row);
    Matrix hf = tfm::forward(cfg_, params_, adapter, input, nullptr, nullptr);
    return hf.bottomRows(hf.rows() - static_cast<Eigen::Index>(first_row)) * params_.head.transpose();
  }

  /// Layer l < n_layers is the residual stream after block l; layer n_layers
  /// is the final normalized state that the output head projects.
  Matrix hidden(const AdapterState* adapter, std::span<const TokenId> input, std::size_t layer,
                std::size_t first_row = 0) const override {
    check_first_row(input, first_row);
    if (layer > cfg_.n_layers) throw ConfigError("invalid hidden layer " + std::to_string(layer));
    std::vector<Matrix> outs;
    Matrix hf = tfm::forward(cfg_, params_, adapter, input, nullptr, nullptr, &outs);
    const Matrix& src = layer == cfg_.n_layers ? hf : outs[layer];
    return src.bottomRows(src.rows() - static_cast<Eigen::Index>(first_row));
  }

  std::unique_ptr<DecodeSession> decode_session(const AdapterState* adapter) const override {
    return std::make_unique<detail::TinyDecodeSession>(cfg_, params_, adapter);
  }

  std::optional<QuerySynthesizer> query_synthesizer() const override { return QuerySynthesizer(cloze_queries); }

  std::string preferred_optimizer() const override { return "adam"; }

  AdapterState init_adapter(const AdapterSpec& spec, std::uint64_t seed) const override {
    if (spec.rank < 1) throw ConfigError("adapter rank must be at least 1");
    if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) throw ConfigError("adapter dropout must be in [0, 1)");
    auto targets = resolve_targets(spec.targets, cfg_.n_layers);
    AdapterState s;
    s.rank = spec.rank;
    s.alpha = spec.alpha;
    s.dropout = spec.dropout;
    s.targets = spec.targets;
    s.base_fingerprint = fingerprint_;
    s.seed = seed;
    Rng rng(seed);
    for (const auto& [layer, proj] : targets) {
      const Matrix& w = params_.blocks[layer].proj(proj);
      // A ~ N(0, 1/in); B = 0 so the initial delta is exactly zero.
      LoraFactors f{random_normal(static_cast<Eigen::Index>(spec.rank), w.cols(),
                                  1.0 / std::sqrt(static_cast<double>(w.cols())), rng),
                    Matrix::Zero(w.rows(), static_cast<Eigen::Index>(spec.rank))};
      s.factors.emplace(factor_key(layer, proj), std::move(f));
    }
    return s;
  }

  std::shared_ptr<const AdaptableModel> merge(const AdapterState& adapter) const override {
    detail::check_adapter(*this, &adapter);
    return std::make_shared<TinyTransformer>(cfg_, tfm::merge(params_, adapter), id_ + "+merged", vocab_);
  }

  double accumulate_adapter_gradient(const AdapterState& adapter, std::span<const TokenId> input, std::size_t first_row,
                                     std::optional<std::size_t> hidden_layer, const LossHead& head, Rng* dropout_rng,
                                     AdapterGradients& grads) const override {
    detail::check_adapter(*this, &adapter);
    check_first_row(input, first_row);
    tfm::ForwardCache cache;
    std::vector<Matrix> outs;
    Matrix hf = tfm::forward(cfg_, params_, &adapter, input, dropout_rng, &cache, hidden_layer ? &outs : nullptr);
    const auto rows = hf.rows() - static_cast<Eigen::Index>(first_row);
    Matrix logits = hf.bottomRows(rows) * params_.head.transpose();
    Matrix hidden;
    if (hidden_layer) {
      if (*hidden_layer > cfg_.n_layers) throw ConfigError("invalid hidden layer " + std::to_string(*hidden_layer));
      const Matrix& src = *hidden_layer == cfg_.n_layers ? hf : outs[*hidden_layer];
      hidden = src.bottomRows(rows);
    }
    OutputGradients og;
    const double loss = head(logits, hidden_layer ? &hidden : nullptr, og);
    tfm::UpstreamGrads up;
    up.first_row = first_row;
    up.dlogits = std::move(og.dlogits);
    up.dhidden = std::move(og.dhidden);
    up.hidden_layer = hidden_layer.value_or(0);
    tfm::backward(cfg_, params_, &adapter, cache, up, nullptr, &grads);
    return loss;
  }

  ArrayFile to_arrays() const {
    ArrayFile f;
    f.metadata["format"] = "ctxmem.tiny_transformer.v1";
    f.metadata["config"] = nlohmann::json(cfg_).dump();
    f.metadata["identifier"] = id_;
    f.metadata["vocabulary"] = vocab_.fingerprint();
    params_.for_each([&](const std::string& name, const Matrix& m) { f.arrays[name] = to_named_array(m); });
    return f;
  }

  void save(const std::filesystem::path& path) const { write_array_file(path, to_arrays()); }

  static std::shared_ptr<TinyTransformer> load(const std::filesystem::path& path) {
    ArrayFile f = read_array_file(path);
    auto it = f.metadata.find("format");
    if (it == f.metadata.end() || it->second != "ctxmem.tiny_transformer.v1")
      throw Error(path.string() + " is not a tiny-transformer checkpoint");
    if (f.metadata["vocabulary"] != Vocabulary::reference().fingerprint())
      throw Error(path.string() + " was built with a different vocabulary");
    auto cfg = nlohmann::json::parse(f.metadata.at("config")).get<TransformerConfig>();
    TransformerParams p = TransformerParams::zeros(cfg);
    p.for_each([&](const std::string& name, Matrix& m) {
      auto a = f.arrays.find(name);
      if (a == f.arrays.end()) throw Error(path.string() + " lacks parameter '" + name + "'");
      Matrix loaded = from_named_array(a->second, name);
      if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
        throw Error(path.string() + ": parameter '" + name + "' has the wrong shape");
      m = std::move(loaded);
    });
    return std::make_shared<TinyTransformer>(cfg, std::move(p), f.metadata.at("identifier"));
  }

 private:
  static void check_first_row(std::span<const TokenId> input, std::size_t first_row) {
    if (first_row > input.size()) throw Error("first_row beyond input length");
  }

  TransformerConfig cfg_;
  TransformerParams params_;
  std::string id_;
  const Vocabulary& vocab_;
  std::string fingerprint_;
};

}  // namespace ctxmem
