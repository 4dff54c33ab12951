#pragma once

// Miniature decoder-only transformer with per-layer adapter prefixes.
//
// Each layer is a pre-norm residual block (RMSNorm -> attention -> RMSNorm ->
// SiLU MLP). Attention uses the adapter tokens p_l only as extra keys and
// values. For head h of layer l with queries Q, sequence keys/values K, V and
// adapter keys/values Kp = p_l Wk, Vp = p_l Wv:
//
//   out_h = g[l,h] * softmax(Q Kp^T / sqrt(d_h)) Vp  +  causal_softmax(Q K^T / sqrt(d_h)) V
//
// The two score blocks are normalized separately and the adapter block is
// scaled by the gate g, which starts at exactly zero. Backpropagation is
// written out by hand and verified against finite differences in the tests.

#include "fvqa/core.hpp"
#include "fvqa/prompt.hpp"
#include "fvqa/visual.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace fvqa {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int n_adapter = 10;
  int vocab_size = 0;
  int max_seq_len = 64;
  int d_enc = 16;
  int ffn_mult = 4;
  bool gate_per_head = true;
  bool proj_bias = true;
  bool visual_pos_emb = true;

  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return ffn_mult * d_model; }
  int gate_cols() const { return gate_per_head ? n_heads : 1; }

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || n_adapter < 1 || vocab_size < 4 ||
        max_seq_len < 1 || d_enc < 1 || ffn_mult < 1)
      fail(Errc::BadConfig, "all model sizes must be positive (vocab_size >= 4)");
    if (d_model % n_heads != 0) fail(Errc::BadConfig, "d_model must be divisible by n_heads");
  }

  // L*N_p*D + L*G + D_enc*D (+ D for the projection bias).
  long long trainable_count() const {
    const long long L = n_layers, Np = n_adapter, D = d_model;
    return L * Np * D + L * gate_cols() + static_cast<long long>(d_enc) * D + (proj_bias ? D : 0);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class GradScope {
  Trainable,  // adapter tokens, gates, projection: the fine-tuned set
  Backbone,   // everything else; used only when pretraining the base model
  All,
};

inline bool in_scope(GradScope scope, bool trainable) {
  return scope == GradScope::All || (scope == GradScope::Trainable) == trainable;
}

template <typename T>
struct LayerWeights {
  Mat<T> attn_norm, wq, wk, wv, wo;
  Mat<T> ffn_norm, w1, b1, w2, b2;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Mat<T> tok_emb;  // V x D
  Mat<T> pos_emb;  // S x D
  std::vector<LayerWeights<T>> layers;
  Mat<T> final_norm;      // 1 x D
  Mat<T> head;            // D x V, the output Linear
  Mat<T> adapter_tokens;  // (L*N_p) x D
  Mat<T> gates;           // L x G
  ProjectionParams<T> proj;

  // Calls f(name, tensor, trainable) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.layers.resize(layers.size());
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
    return out;
  }

  std::vector<Mat<T>*> tensors() {
    std::vector<Mat<T>*> out;
    visit([&](const std::string&, Mat<T>& m, bool) { out.push_back(&m); });
    return out;
  }
  std::vector<const Mat<T>*> tensors() const {
    std::vector<const Mat<T>*> out;
    visit([&](const std::string&, const Mat<T>& m, bool) { out.push_back(&m); });
    return out;
  }

  long long trainable_count() const {
    long long n = 0;
    visit([&](const std::string&, const Mat<T>& m, bool trainable) {
      if (trainable) n += m.size();
    });
    return n;
  }
  long long total_count() const {
    long long n = 0;
    visit([&](const std::string&, const Mat<T>& m, bool) { n += m.size(); });
    return n;
  }

  auto adapter_block(int layer) const {
    return adapter_tokens.middleRows(static_cast<Eigen::Index>(layer) * config.n_adapter,
                                     config.n_adapter);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f("tok_emb", self.tok_emb, false);
    f("pos_emb", self.pos_emb, false);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& w = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm", w.attn_norm, false);
      f(p + "wq", w.wq, false);
      f(p + "wk", w.wk, false);
      f(p + "wv", w.wv, false);
      f(p + "wo", w.wo, false);
      f(p + "ffn_norm", w.ffn_norm, false);
      f(p + "w1", w.w1, false);
      f(p + "b1", w.b1, false);
      f(p + "w2", w.w2, false);
      f(p + "b2", w.b2, false);
    }
    f("final_norm", self.final_norm, false);
    f("head", self.head, false);
    f("adapter.tokens", self.adapter_tokens, true);
    f("adapter.gates", self.gates, true);
    f("proj.weight", self.proj.weight, true);
    f("proj.bias", self.proj.bias, self.config.proj_bias);
  }
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x1417));
  const int D = cfg.d_model, F = cfg.ffn_dim(), L = cfg.n_layers;
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  const double residual_sd = sd / std::sqrt(2.0 * L);
  ModelParams<T> p;
  p.config = cfg;
  p.tok_emb = gaussian<T>(cfg.vocab_size, D, sd, rng);
  p.pos_emb = gaussian<T>(cfg.max_seq_len, D, 0.5 * sd, rng);
  p.layers.resize(static_cast<std::size_t>(L));
  for (auto& w : p.layers) {
    w.attn_norm = Mat<T>::Ones(1, D);
    w.wq = gaussian<T>(D, D, sd, rng);
    w.wk = gaussian<T>(D, D, sd, rng);
    w.wv = gaussian<T>(D, D, sd, rng);
    w.wo = gaussian<T>(D, D, residual_sd, rng);
    w.ffn_norm = Mat<T>::Ones(1, D);
    w.w1 = gaussian<T>(D, F, sd, rng);
    w.b1 = Mat<T>::Zero(1, F);
    w.w2 = gaussian<T>(F, D, 1.0 / std::sqrt(static_cast<double>(F)) / std::sqrt(2.0 * L), rng);
    w.b2 = Mat<T>::Zero(1, D);
  }
  p.final_norm = Mat<T>::Ones(1, D);
  p.head = gaussian<T>(D, cfg.vocab_size, sd, rng);
  p.adapter_tokens = gaussian<T>(static_cast<Eigen::Index>(L) * cfg.n_adapter, D, sd, rng);
  p.gates = Mat<T>::Zero(L, cfg.gate_cols());
  p.proj.weight = gaussian<T>(cfg.d_enc, D, 1.0 / std::sqrt(3.0 * cfg.d_enc), rng);
  p.proj.bias = Mat<T>::Zero(1, D);
  return p;
}

// Same shapes as `like`, zero-filled; tensors outside `scope` stay empty.
template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& like, GradScope scope) {
  ModelParams<T> g;
  g.config = like.config;
  g.layers.resize(like.layers.size());
  auto src = like.tensors();
  std::vector<bool> trainable;
  like.visit([&](const std::string&, const Mat<T>&, bool t) { trainable.push_back(t); });
  auto dst = g.tensors();
  for (std::size_t i = 0; i < src.size(); ++i)
    if (in_scope(scope, trainable[i])) *dst[i] = Mat<T>::Zero(src[i]->rows(), src[i]->cols());
  return g;
}

// --- forward ---------------------------------------------------------------

template <typename T>
struct LayerCache {
  Mat<T> x_in;
  Vec<T> inv_rms1;
  Mat<T> xn1;
  Mat<T> q, k, v;
  Mat<T> kp, vp;                    // adapter keys / values (N_p x D)
  std::vector<Mat<T>> probs_seq;    // per head, N x N, causal softmax
  std::vector<Mat<T>> probs_adapter;  // per head, N x N_p, before gating
  Mat<T> attn_cat;
  Mat<T> x_mid;
  Vec<T> inv_rms2;
  Mat<T> xn2;
  Mat<T> pre_act;
  Mat<T> act;
};

template <typename T>
struct ForwardPass {
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final;
  Vec<T> inv_rms_final;
  Mat<T> hidden;  // final normalized features h, N x D
  Mat<T> logits;  // N x V; row t scores the token at t+1
  std::vector<Segment> segments;
  std::vector<std::int32_t> ids;
  std::size_t visual_begin = 0;
  std::size_t visual_count = 0;
  bool adapters_on = true;
  bool recorded = false;

  std::size_t length() const { return ids.size(); }

  // Post-gate adapter attention of one head: g * softmax(S^{N_p}).
  template <typename P>
  Mat<T> gated_adapter_attention(const P& params, int layer, int head) const {
    const int gcol = params.config.gate_per_head ? head : 0;
    return layers[static_cast<std::size_t>(layer)].probs_adapter[static_cast<std::size_t>(head)] *
           params.gates(layer, gcol);
  }
};

namespace detail {

inline constexpr double kRmsEps = 1e-6;

template <typename T>
void rms_norm(const Mat<T>& x, const Mat<T>& gain, Mat<T>& y, Vec<T>& inv_rms) {
  const auto n = x.rows();
  inv_rms.resize(n);
  y.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(x.cols());
    inv_rms(i) = T(1) / std::sqrt(ms + static_cast<T>(kRmsEps));
    y.row(i) = (x.row(i) * inv_rms(i)).cwiseProduct(gain.row(0));
  }
}

// Returns dL/dx; accumulates dL/dgain into dgain when non-empty.
template <typename T>
Mat<T> rms_norm_backward(const Mat<T>& x, const Mat<T>& gain, const Vec<T>& inv_rms,
                         const Mat<T>& dy, Mat<T>* dgain) {
  const auto n = x.rows();
  const T d = static_cast<T>(x.cols());
  Mat<T> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T r = inv_rms(i);
    RowVec<T> dxhat = dy.row(i).cwiseProduct(gain.row(0));
    const T dot = dxhat.dot(x.row(i));
    dx.row(i) = r * dxhat - (r * r * r / d) * dot * x.row(i);
    if (dgain) dgain->row(0) += dy.row(i).cwiseProduct(x.row(i) * r);
  }
  return dx;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

template <typename T>
ForwardPass<T> forward(const ModelParams<T>& params, const PromptLayout& layout, const Mat<T>& visual,
                       bool adapters_on = true) {
  const auto& cfg = params.config;
  const auto N = static_cast<Eigen::Index>(layout.size());
  if (layout.size() > static_cast<std::size_t>(cfg.max_seq_len))
    fail(Errc::SeqTooLong, std::to_string(layout.size()) + " > max_seq_len " +
                               std::to_string(cfg.max_seq_len));
  if (layout.size() == 0) fail(Errc::ShapeMismatch, "empty layout");
  if (static_cast<std::size_t>(visual.rows()) != layout.visual_count ||
      (layout.visual_count > 0 && visual.cols() != cfg.d_model))
    fail(Errc::ShapeMismatch, "visual tokens do not match the layout's visual slots");

  const int D = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  ForwardPass<T> fp;
  fp.ids = layout.ids;
  fp.segments = layout.segments;
  fp.visual_begin = layout.visual_begin;
  fp.visual_count = layout.visual_count;
  fp.adapters_on = adapters_on;

  Mat<T> x(N, D);
  for (Eigen::Index t = 0; t < N; ++t) {
    const auto st = static_cast<std::size_t>(t);
    if (layout.segments[st] == Segment::VisualPlaceholder) {
      x.row(t) = visual.row(static_cast<Eigen::Index>(st - layout.visual_begin));
      if (cfg.visual_pos_emb) x.row(t) += params.pos_emb.row(t);
    } else {
      const auto id = layout.ids[st];
      if (id < 0 || id >= cfg.vocab_size) fail(Errc::UnknownId, "token id " + std::to_string(id));
      x.row(t) = params.tok_emb.row(id) + params.pos_emb.row(t);
    }
  }

  fp.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& w = params.layers[l];
    auto& c = fp.layers[l];
    c.x_in = x;
    detail::rms_norm(x, w.attn_norm, c.xn1, c.inv_rms1);
    c.q.noalias() = c.xn1 * w.wq;
    c.k.noalias() = c.xn1 * w.wk;
    c.v.noalias() = c.xn1 * w.wv;
    if (adapters_on) {
      const Mat<T> adapter = params.adapter_block(static_cast<int>(l));
      c.kp.noalias() = adapter * w.wk;
      c.vp.noalias() = adapter * w.wv;
    }
    c.attn_cat.resize(N, D);
    c.probs_seq.resize(static_cast<std::size_t>(H));
    c.probs_adapter.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      const auto qh = c.q.middleCols(h * dh, dh);
      const auto kh = c.k.middleCols(h * dh, dh);
      const auto vh = c.v.middleCols(h * dh, dh);
      Mat<T> s = (qh * kh.transpose()) * scale;
      for (Eigen::Index i = 0; i < N; ++i) {
        auto row = s.row(i).head(i + 1);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp().matrix();
        row /= row.sum();
        s.row(i).tail(N - i - 1).setZero();
      }
      Mat<T> out = s * vh;
      c.probs_seq[static_cast<std::size_t>(h)] = std::move(s);
      if (adapters_on) {
        Mat<T> sp = (qh * c.kp.middleCols(h * dh, dh).transpose()) * scale;
        softmax_rows(sp);
        const T g = params.gates(static_cast<Eigen::Index>(l), cfg.gate_per_head ? h : 0);
        out.noalias() += g * (sp * c.vp.middleCols(h * dh, dh));
        c.probs_adapter[static_cast<std::size_t>(h)] = std::move(sp);
      }
      c.attn_cat.middleCols(h * dh, dh) = out;
    }
    c.x_mid = x;
    c.x_mid.noalias() += c.attn_cat * w.wo;
    detail::rms_norm(c.x_mid, w.ffn_norm, c.xn2, c.inv_rms2);
    c.pre_act.noalias() = c.xn2 * w.w1;
    c.pre_act.rowwise() += w.b1.row(0);
    c.act = c.pre_act.unaryExpr([](T z) { return z * detail::sigmoid(z); });
    x = c.x_mid;
    x.noalias() += c.act * w.w2;
    x.rowwise() += w.b2.row(0);
  }
  fp.x_final = x;
  detail::rms_norm(x, params.final_norm, fp.hidden, fp.inv_rms_final);
  fp.logits.noalias() = fp.hidden * params.head;
  fp.recorded = true;
  return fp;
}

// --- backward --------------------------------------------------------------

template <typename T>
struct Gradients {
  ModelParams<T> params;  // tensors outside the scope are empty
  Mat<T> visual;          // dL/d(visual tokens), N_v x D
};

// Backpropagates dL/dlogits and dL/dhidden (either may be empty) through a
// recorded forward pass. Gradients are produced only for tensors in `scope`;
// gradients w.r.t. the visual tokens are always returned.
template <typename T>
Gradients<T> backward(const ModelParams<T>& params, const ForwardPass<T>& fp, const Mat<T>& dlogits,
                      const Mat<T>& dhidden, GradScope scope = GradScope::Trainable) {
  if (!fp.recorded) fail(Errc::GraphNotRecorded, "backward called without a recorded forward pass");
  const auto& cfg = params.config;
  const auto N = static_cast<Eigen::Index>(fp.length());
  const int D = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool backbone = in_scope(scope, false);
  const bool adapter = in_scope(scope, true);

  Gradients<T> g{zeros_like(params, scope), Mat<T>::Zero(static_cast<Eigen::Index>(fp.visual_count), D)};
  auto& gp = g.params;

  Mat<T> dh_final = Mat<T>::Zero(N, D);
  if (dlogits.size() > 0) {
    dh_final.noalias() += dlogits * params.head.transpose();
    if (backbone) gp.head.noalias() += fp.hidden.transpose() * dlogits;
  }
  if (dhidden.size() > 0) dh_final += dhidden;
  Mat<T> dx = detail::rms_norm_backward(fp.x_final, params.final_norm, fp.inv_rms_final, dh_final,
                                        backbone ? &gp.final_norm : nullptr);

  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const auto& w = params.layers[static_cast<std::size_t>(l)];
    const auto& c = fp.layers[static_cast<std::size_t>(l)];
    auto& gw = gp.layers[static_cast<std::size_t>(l)];

    // MLP
    Mat<T> dact = dx * w.w2.transpose();
    if (backbone) {
      gw.w2.noalias() += c.act.transpose() * dx;
      gw.b2.row(0) += dx.colwise().sum();
    }
    Mat<T> dpre = dact.binaryExpr(c.pre_act, [](T d, T z) {
      const T s = detail::sigmoid(z);
      return d * s * (T(1) + z * (T(1) - s));
    });
    if (backbone) {
      gw.w1.noalias() += c.xn2.transpose() * dpre;
      gw.b1.row(0) += dpre.colwise().sum();
    }
    Mat<T> dxn2 = dpre * w.w1.transpose();
    Mat<T> dx_mid = dx + detail::rms_norm_backward(c.x_mid, w.ffn_norm, c.inv_rms2, dxn2,
                                                   backbone ? &gw.ffn_norm : nullptr);

    // attention
    Mat<T> dcat = dx_mid * w.wo.transpose();
    if (backbone) gw.wo.noalias() += c.attn_cat.transpose() * dx_mid;
    Mat<T> dq(N, D), dk(N, D), dv(N, D);
    Mat<T> dkp, dvp;
    if (fp.adapters_on) {
      dkp = Mat<T>::Zero(cfg.n_adapter, D);
      dvp = Mat<T>::Zero(cfg.n_adapter, D);
    }
    for (int h = 0; h < H; ++h) {
      const Mat<T> dout = dcat.middleCols(h * dh, dh);
      const auto qh = c.q.middleCols(h * dh, dh);
      const auto kh = c.k.middleCols(h * dh, dh);
      const auto vh = c.v.middleCols(h * dh, dh);
      const auto& ps = c.probs_seq[static_cast<std::size_t>(h)];

      Mat<T> dps = dout * vh.transpose();
      dv.middleCols(h * dh, dh).noalias() = ps.transpose() * dout;
      Mat<T> ds = ps.cwiseProduct(dps);
      Vec<T> rows = ds.rowwise().sum();
      ds.noalias() -= ps.cwiseProduct(rows.replicate(1, N));
      dq.middleCols(h * dh, dh).noalias() = (ds * kh) * scale;
      dk.middleCols(h * dh, dh).noalias() = (ds.transpose() * qh) * scale;

      if (fp.adapters_on) {
        const int gcol = cfg.gate_per_head ? h : 0;
        const T gate = params.gates(l, gcol);
        const auto& pa = c.probs_adapter[static_cast<std::size_t>(h)];
        const auto kph = c.kp.middleCols(h * dh, dh);
        const auto vph = c.vp.middleCols(h * dh, dh);
        Mat<T> av = pa * vph;
        if (adapter) gp.gates(l, gcol) += av.cwiseProduct(dout).sum();
        Mat<T> dpa = (dout * vph.transpose()) * gate;
        dvp.middleCols(h * dh, dh).noalias() += (pa.transpose() * dout) * gate;
        Mat<T> dsa = pa.cwiseProduct(dpa);
        Vec<T> arows = dsa.rowwise().sum();
        dsa.noalias() -= pa.cwiseProduct(arows.replicate(1, pa.cols()));
        dq.middleCols(h * dh, dh).noalias() += (dsa * kph) * scale;
        dkp.middleCols(h * dh, dh).noalias() += (dsa.transpose() * qh) * scale;
      }
    }
    if (backbone) {
      gw.wq.noalias() += c.xn1.transpose() * dq;
      gw.wk.noalias() += c.xn1.transpose() * dk;
      gw.wv.noalias() += c.xn1.transpose() * dv;
    }
    if (fp.adapters_on) {
      const Mat<T> tokens = params.adapter_block(l);
      if (backbone) {
        gw.wk.noalias() += tokens.transpose() * dkp;
        gw.wv.noalias() += tokens.transpose() * dvp;
      }
      if (adapter) {
        auto block = gp.adapter_tokens.middleRows(static_cast<Eigen::Index>(l) * cfg.n_adapter,
                                                  cfg.n_adapter);
        block.noalias() += dkp * w.wk.transpose();
        block.noalias() += dvp * w.wv.transpose();
      }
    }
    Mat<T> dxn1 = dq * w.wq.transpose();
    dxn1.noalias() += dk * w.wk.transpose();
    dxn1.noalias() += dv * w.wv.transpose();
    dx = dx_mid + detail::rms_norm_backward(c.x_in, w.attn_norm, c.inv_rms1, dxn1,
                                            backbone ? &gw.attn_norm : nullptr);
  }

  for (Eigen::Index t = 0; t < N; ++t) {
    const auto st = static_cast<std::size_t>(t);
    const bool visual = fp.segments[st] == Segment::VisualPlaceholder;
    if (visual) g.visual.row(static_cast<Eigen::Index>(st - fp.visual_begin)) = dx.row(t);
    if (backbone) {
      if (!visual) gp.tok_emb.row(fp.ids[st]) += dx.row(t);
      if (!visual || cfg.visual_pos_emb) gp.pos_emb.row(t) += dx.row(t);
    }
  }
  return g;
}

// dst += alpha * src for every tensor present in both.
template <typename T>
void accumulate(ModelParams<T>& dst, const ModelParams<T>& src, T alpha = T(1)) {
  auto d = dst.tensors();
  auto s = src.tensors();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (s[i]->size() == 0) continue;
    if (d[i]->size() == 0) *d[i] = Mat<T>::Zero(s[i]->rows(), s[i]->cols());
    d[i]->noalias() += alpha * *s[i];
  }
}

}  // namespace fvqa
