#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sflow/adam.hpp"
#include "sflow/ops.hpp"
#include "sflow/rng.hpp"
#include "sflow/serialize.hpp"
#include "sflow/tensor.hpp"

namespace sflow {

struct PolicyConfig {
  int n_layers = 4;
  int d_model = 32;
  int n_heads = 2;
  int n_vis_tokens = 8;
  int n_lang_tokens = 1;
  int n_state_tokens = 1;
  int chunk_len = 8;    // actions predicted per forward pass
  int action_dim = 2;
  int tau_embed_dim = 8;
  int state_dim = 2;

  int d_head() const { return d_model / n_heads; }
  int prefix_len() const { return n_vis_tokens + n_lang_tokens; }
  int suffix_len() const { return n_state_tokens + chunk_len; }
  int mlp_hidden() const { return 4 * d_model; }

  void validate() const {
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (d_model < 1) throw std::invalid_argument("config: d_model must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("config: d_model must be divisible by n_heads");
    if (n_vis_tokens < 1)
      throw std::invalid_argument("config: n_vis_tokens must be >= 1");
    if (n_lang_tokens < 1)
      throw std::invalid_argument("config: n_lang_tokens must be >= 1");
    if (n_state_tokens < 1)
      throw std::invalid_argument("config: n_state_tokens must be >= 1");
    if (chunk_len < 1) throw std::invalid_argument("config: chunk_len must be >= 1");
    if (action_dim < 1) throw std::invalid_argument("config: action_dim must be >= 1");
    if (state_dim < 1) throw std::invalid_argument("config: state_dim must be >= 1");
    if (tau_embed_dim < 2 || tau_embed_dim % 2 != 0)
      throw std::invalid_argument("config: tau_embed_dim must be a positive even number");
  }
};

inline void to_json(nlohmann::json& j, const PolicyConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_vis_tokens", c.n_vis_tokens},
                     {"n_lang_tokens", c.n_lang_tokens},
                     {"n_state_tokens", c.n_state_tokens},
                     {"chunk_len", c.chunk_len},
                     {"action_dim", c.action_dim},
                     {"tau_embed_dim", c.tau_embed_dim},
                     {"state_dim", c.state_dim}};
}

inline void from_json(const nlohmann::json& j, PolicyConfig& c) {
  PolicyConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_vis_tokens = j.value("n_vis_tokens", d.n_vis_tokens);
  c.n_lang_tokens = j.value("n_lang_tokens", d.n_lang_tokens);
  c.n_state_tokens = j.value("n_state_tokens", d.n_state_tokens);
  c.chunk_len = j.value("chunk_len", d.chunk_len);
  c.action_dim = j.value("action_dim", d.action_dim);
  c.tau_embed_dim = j.value("tau_embed_dim", d.tau_embed_dim);
  c.state_dim = j.value("state_dim", d.state_dim);
}

template <typename T>
struct AttnWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct MlpWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct BlockWeights {
  Tensor<T> norm_attn;
  AttnWeights<T> attn;
  Tensor<T> norm_mlp;
  MlpWeights<T> mlp;
};

template <typename T>
struct LayerWeights {
  BlockWeights<T> prefix;  // acts on vision-language tokens
  BlockWeights<T> suffix;  // acts on state + action tokens
};

template <typename T>
struct PolicyParams {
  PolicyConfig cfg;
  Tensor<T> prefix_in_w, prefix_in_b;
  Tensor<T> state_w, state_b;
  Tensor<T> action_in_w, action_in_b;
  Tensor<T> tau_w, tau_b;
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> action_out_w, action_out_b;
};

namespace detail {

template <typename T, typename Fn>
void visit_block(const std::string& base, BlockWeights<T>& b, Fn&& fn) {
  fn(base + ".norm_attn", b.norm_attn);
  fn(base + ".attn.wq", b.attn.wq);
  fn(base + ".attn.bq", b.attn.bq);
  fn(base + ".attn.wk", b.attn.wk);
  fn(base + ".attn.bk", b.attn.bk);
  fn(base + ".attn.wv", b.attn.wv);
  fn(base + ".attn.bv", b.attn.bv);
  fn(base + ".attn.wo", b.attn.wo);
  fn(base + ".attn.bo", b.attn.bo);
  fn(base + ".norm_mlp", b.norm_mlp);
  fn(base + ".mlp.w1", b.mlp.w1);
  fn(base + ".mlp.b1", b.mlp.b1);
  fn(base + ".mlp.w2", b.mlp.w2);
  fn(base + ".mlp.b2", b.mlp.b2);
}

}  // namespace detail

/// Visits every parameter in a fixed order (embedding adapters, layers
/// bottom-up with the vision-language block before the action block,
/// then the output head). Serialization, the optimizer, and parameter
/// counting all rely on this order being stable.
template <typename T, typename Fn>
void for_each_param(PolicyParams<T>& p, Fn&& fn) {
  fn("embed.prefix_in.w", p.prefix_in_w);
  fn("embed.prefix_in.b", p.prefix_in_b);
  fn("embed.state.w", p.state_w);
  fn("embed.state.b", p.state_b);
  fn("embed.action_in.w", p.action_in_w);
  fn("embed.action_in.b", p.action_in_b);
  fn("embed.tau.w", p.tau_w);
  fn("embed.tau.b", p.tau_b);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string base = "layers." + std::to_string(i);
    detail::visit_block(base + ".prefix", p.layers[i].prefix, fn);
    detail::visit_block(base + ".suffix", p.layers[i].suffix, fn);
  }
  fn("head.final_norm", p.final_norm);
  fn("head.action_out.w", p.action_out_w);
  fn("head.action_out.b", p.action_out_b);
}

template <typename T>
ParamList<T> param_list(PolicyParams<T>& p) {
  ParamList<T> out;
  for_each_param(p, [&out](const std::string& name, Tensor<T>& t) {
    out.push_back({name, t});
  });
  return out;
}

template <typename T>
std::int64_t count_params(PolicyParams<T>& p) {
  std::int64_t n = 0;
  for_each_param(p, [&n](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
void set_trainable(PolicyParams<T>& p, bool on) {
  for_each_param(p, [on](const std::string&, Tensor<T>& t) {
    t.set_requires_grad(on);
  });
}

namespace detail {

template <typename T>
BlockWeights<T> init_block(const PolicyConfig& cfg, Rng& rng) {
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.d_model));
  const std::int64_t d = cfg.d_model, h = cfg.mlp_hidden();
  BlockWeights<T> b;
  b.norm_attn = Tensor<T>::full({d}, T(1));
  b.attn.wq = Tensor<T>::gaussian({d, d}, rng, scale);
  b.attn.bq = Tensor<T>::zeros({d});
  b.attn.wk = Tensor<T>::gaussian({d, d}, rng, scale);
  b.attn.bk = Tensor<T>::zeros({d});
  b.attn.wv = Tensor<T>::gaussian({d, d}, rng, scale);
  b.attn.bv = Tensor<T>::zeros({d});
  b.attn.wo = Tensor<T>::gaussian({d, d}, rng, scale);
  b.attn.bo = Tensor<T>::zeros({d});
  b.norm_mlp = Tensor<T>::full({d}, T(1));
  b.mlp.w1 = Tensor<T>::gaussian({d, h}, rng, scale);
  b.mlp.b1 = Tensor<T>::zeros({h});
  b.mlp.w2 = Tensor<T>::gaussian({h, d}, rng,
                                 T(1) / std::sqrt(static_cast<T>(h)));
  b.mlp.b2 = Tensor<T>::zeros({d});
  return b;
}

}  // namespace detail

template <typename T>
PolicyParams<T> init_policy(const PolicyConfig& cfg, Rng& rng) {
  cfg.validate();
  PolicyParams<T> p;
  p.cfg = cfg;
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.d_model));
  const std::int64_t d = cfg.d_model;
  p.prefix_in_w = Tensor<T>::gaussian({d, d}, rng, scale);
  p.prefix_in_b = Tensor<T>::zeros({d});
  p.state_w = Tensor<T>::gaussian({cfg.state_dim, cfg.n_state_tokens * d}, rng,
                                  T(1) / std::sqrt(static_cast<T>(cfg.state_dim)));
  p.state_b = Tensor<T>::zeros({cfg.n_state_tokens * d});
  p.action_in_w = Tensor<T>::gaussian(
      {cfg.action_dim, d}, rng, T(1) / std::sqrt(static_cast<T>(cfg.action_dim)));
  p.action_in_b = Tensor<T>::zeros({d});
  p.tau_w = Tensor<T>::gaussian(
      {cfg.tau_embed_dim, d}, rng,
      T(1) / std::sqrt(static_cast<T>(cfg.tau_embed_dim)));
  p.tau_b = Tensor<T>::zeros({d});
  p.layers.reserve(cfg.n_layers);
  for (int i = 0; i < cfg.n_layers; ++i)
    p.layers.push_back(
        {detail::init_block<T>(cfg, rng), detail::init_block<T>(cfg, rng)});
  p.final_norm = Tensor<T>::full({d}, T(1));
  p.action_out_w = Tensor<T>::gaussian({d, cfg.action_dim}, rng, scale);
  p.action_out_b = Tensor<T>::zeros({cfg.action_dim});
  return p;
}

/// One observation as the policy consumes it: vision tokens and language
/// tokens already live in model space; the proprioceptive state does not.
template <typename T>
struct Observation {
  Tensor<T> vis;    // [n_vis_tokens x d_model]
  Tensor<T> lang;   // [n_lang_tokens x d_model]
  Tensor<T> state;  // [state_dim]
};

enum class AttnScope { kActionToVL, kAllTokens };

/// Attention probabilities captured at one layer. `action_rows` stacks the
/// per-head action-token rows renormalized over vision-language keys only,
/// shape [n_heads*chunk_len x prefix_len]. The full-scope matrices are
/// only populated when requested.
template <typename T>
struct AttentionRecord {
  Tensor<T> action_rows;
  Tensor<T> prefix_rows;  // [n_heads*prefix_len x prefix_len]
  Tensor<T> suffix_rows;  // [n_heads*suffix_len x (prefix_len+suffix_len)]
};

struct ForwardOptions {
  int capture_attn_layer = -1;  // layer whose attention to record; -1 = none
  AttnScope attn_scope = AttnScope::kActionToVL;
  bool record_hiddens = false;  // keep per-layer action-token states
  const std::set<int>* skip_layers = nullptr;
};

template <typename T>
struct PrefixCache {
  std::vector<Tensor<T>> k, v;  // per layer, [prefix_len x d_model]
};

template <typename T>
struct ForwardResult {
  Tensor<T> velocity;  // [chunk_len x action_dim]
  AttentionRecord<T> attn;
  // hiddens[0] is the embedded input; hiddens[i+1] follows layer i. Only
  // action-token rows are kept, detached: [chunk_len x d_model] each.
  std::vector<Tensor<T>> action_hiddens;
  // Vision-language stream states in the same layout (uncached forward
  // only); lets callers observe that the mask isolates the prefix.
  std::vector<Tensor<T>> prefix_hiddens;
};

struct PolicyCallCounters {
  std::int64_t forward = 0;
  std::int64_t cache_builds = 0;
  std::int64_t cached_forward = 0;
};

inline PolicyCallCounters& policy_call_counters() {
  thread_local PolicyCallCounters c;
  return c;
}

namespace detail {

inline void check_skip_layers(const PolicyConfig& cfg, const std::set<int>* skip) {
  if (!skip) return;
  for (int s : *skip)
    if (s < 0 || s >= cfg.n_layers)
      throw std::invalid_argument("skip_layers: layer " + std::to_string(s) +
                                  " outside [0," +
                                  std::to_string(cfg.n_layers) + ")");
  if (static_cast<int>(skip->size()) >= cfg.n_layers)
    throw std::invalid_argument("skip_layers: at least one layer must remain");
}

inline bool skipped(const std::set<int>* skip, int layer) {
  return skip && skip->count(layer) > 0;
}

template <typename T>
Tensor<T> tau_features(const PolicyConfig& cfg, T tau) {
  const int e = cfg.tau_embed_dim;
  Tensor<T> f = Tensor<T>::zeros({e});
  const T pos = tau * T(1000);
  for (int i = 0; i < e / 2; ++i) {
    const T freq = std::pow(T(10000), -static_cast<T>(2 * i) / static_cast<T>(e));
    f.values()[2 * i] = std::sin(pos * freq);
    f.values()[2 * i + 1] = std::cos(pos * freq);
  }
  return f;
}

/// Per-head scaled dot-product attention of q against (k, v). When
/// `capture` is set, rows [row0, row1) of the score matrix are softmaxed
/// over the first `key_limit` keys only and stacked head-by-head into
/// `capture->first`; full softmax rows go to `capture->second` when
/// `want_full` is set.
template <typename T>
Tensor<T> multi_head_attention(
    const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int n_heads,
    std::pair<Tensor<T>, Tensor<T>>* capture = nullptr, std::int64_t row0 = 0,
    std::int64_t row1 = 0, std::int64_t key_limit = 0, bool want_full = false) {
  const std::int64_t dh = q.cols() / n_heads;
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> head_out;
  std::vector<Tensor<T>> captured_limited, captured_full;
  head_out.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor<T> scores = mul_scalar(matmul(qh, transpose(kh)), inv_sqrt_dh);
    Tensor<T> weights = softmax(scores);
    head_out.push_back(matmul(weights, vh));
    if (capture) {
      if (row1 > row0 && key_limit > 0)
        captured_limited.push_back(
            softmax(slice_cols(slice_rows(scores, row0, row1), 0, key_limit)));
      if (want_full) captured_full.push_back(weights);
    }
  }
  if (capture) {
    if (!captured_limited.empty())
      capture->first = concat_rows(captured_limited);
    if (!captured_full.empty()) capture->second = concat_rows(captured_full);
  }
  return concat_cols(head_out);
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpWeights<T>& w) {
  return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

template <typename T>
Tensor<T> embed_prefix(const PolicyParams<T>& p, const Observation<T>& obs) {
  const auto& cfg = p.cfg;
  if (obs.vis.rank() != 2 || obs.vis.rows() != cfg.n_vis_tokens ||
      obs.vis.cols() != cfg.d_model)
    throw std::invalid_argument("forward: vision tokens have shape " +
                                shape_str(obs.vis.shape()));
  if (obs.lang.rank() != 2 || obs.lang.rows() != cfg.n_lang_tokens ||
      obs.lang.cols() != cfg.d_model)
    throw std::invalid_argument("forward: language tokens have shape " +
                                shape_str(obs.lang.shape()));
  return linear(concat_rows<T>({obs.vis, obs.lang}), p.prefix_in_w,
                p.prefix_in_b);
}

template <typename T>
Tensor<T> embed_suffix(const PolicyParams<T>& p, const Tensor<T>& state,
                       const Tensor<T>& actions, T tau) {
  const auto& cfg = p.cfg;
  if (state.numel() != cfg.state_dim)
    throw std::invalid_argument("forward: state has shape " +
                                shape_str(state.shape()));
  if (actions.rank() != 2 || actions.rows() != cfg.chunk_len ||
      actions.cols() != cfg.action_dim)
    throw std::invalid_argument("forward: action chunk has shape " +
                                shape_str(actions.shape()) + ", expected [" +
                                std::to_string(cfg.chunk_len) + "," +
                                std::to_string(cfg.action_dim) + "]");
  Tensor<T> state_row = reshape(state, {1, cfg.state_dim});
  Tensor<T> state_tok = reshape(linear(state_row, p.state_w, p.state_b),
                                {cfg.n_state_tokens, cfg.d_model});
  Tensor<T> action_tok = linear(actions, p.action_in_w, p.action_in_b);
  Tensor<T> suffix = concat_rows<T>({state_tok, action_tok});
  Tensor<T> tau_row =
      linear(reshape(tau_features<T>(cfg, tau), {1, cfg.tau_embed_dim}),
             p.tau_w, p.tau_b);
  return add_row(suffix, reshape(tau_row, {cfg.d_model}));
}

/// One layer of the vision-language stream: pre-norm attention over the
/// prefix itself plus MLP. Also emits this layer's keys/values so the
/// action stream can attend to them.
template <typename T>
struct PrefixLayerOut {
  Tensor<T> hidden, k, v;
  Tensor<T> attn_rows;  // populated only on capture
};

template <typename T>
PrefixLayerOut<T> prefix_layer(const BlockWeights<T>& w, const Tensor<T>& x,
                               int n_heads, bool capture_full) {
  PrefixLayerOut<T> out;
  Tensor<T> nx = rms_norm(x, w.norm_attn);
  Tensor<T> q = linear(nx, w.attn.wq, w.attn.bq);
  out.k = linear(nx, w.attn.wk, w.attn.bk);
  out.v = linear(nx, w.attn.wv, w.attn.bv);
  std::pair<Tensor<T>, Tensor<T>> cap;
  Tensor<T> mixed = multi_head_attention(q, out.k, out.v, n_heads,
                                         capture_full ? &cap : nullptr, 0, 0, 0,
                                         capture_full);
  Tensor<T> h = add(x, linear(mixed, w.attn.wo, w.attn.bo));
  out.hidden = add(h, mlp_forward(rms_norm(h, w.norm_mlp), w.mlp));
  if (capture_full) out.attn_rows = cap.second;
  return out;
}

template <typename T>
struct SuffixLayerCapture {
  bool action_to_vl = false;
  bool full = false;
  Tensor<T> action_rows, full_rows;
};

/// One layer of the action stream: queries come from the suffix tokens,
/// keys/values are the prefix K/V of this layer concatenated with the
/// suffix's own. The prefix stream never sees these tokens.
template <typename T>
Tensor<T> suffix_layer(const BlockWeights<T>& w, const Tensor<T>& x,
                       const Tensor<T>& prefix_k, const Tensor<T>& prefix_v,
                       const PolicyConfig& cfg, SuffixLayerCapture<T>* cap) {
  Tensor<T> nx = rms_norm(x, w.norm_attn);
  Tensor<T> q = linear(nx, w.attn.wq, w.attn.bq);
  Tensor<T> k = concat_rows<T>({prefix_k, linear(nx, w.attn.wk, w.attn.bk)});
  Tensor<T> v = concat_rows<T>({prefix_v, linear(nx, w.attn.wv, w.attn.bv)});
  std::pair<Tensor<T>, Tensor<T>> slot;
  const bool want_cap = cap && (cap->action_to_vl || cap->full);
  Tensor<T> mixed = multi_head_attention(
      q, k, v, cfg.n_heads, want_cap ? &slot : nullptr,
      cap && cap->action_to_vl ? cfg.n_state_tokens : 0,
      cap && cap->action_to_vl ? cfg.suffix_len() : 0,
      cap && cap->action_to_vl ? cfg.prefix_len() : 0, cap && cap->full);
  if (want_cap) {
    cap->action_rows = slot.first;
    cap->full_rows = slot.second;
  }
  Tensor<T> h = add(x, linear(mixed, w.attn.wo, w.attn.bo));
  return add(h, mlp_forward(rms_norm(h, w.norm_mlp), w.mlp));
}

template <typename T>
Tensor<T> action_rows_of(const PolicyConfig& cfg, const Tensor<T>& suffix) {
  return slice_rows(suffix, cfg.n_state_tokens, cfg.suffix_len());
}

/// Runs the suffix stream against per-layer prefix K/V (live or cached).
template <typename T>
ForwardResult<T> run_suffix(const PolicyParams<T>& p,
                            const std::vector<Tensor<T>>& prefix_k,
                            const std::vector<Tensor<T>>& prefix_v,
                            const Tensor<T>& state, const Tensor<T>& actions,
                            T tau, const ForwardOptions& opts,
                            std::vector<Tensor<T>>* prefix_attn_rows) {
  const auto& cfg = p.cfg;
  check_skip_layers(cfg, opts.skip_layers);
  if (opts.capture_attn_layer >= cfg.n_layers)
    throw std::out_of_range("forward: capture layer " +
                            std::to_string(opts.capture_attn_layer) +
                            " in a depth-" + std::to_string(cfg.n_layers) +
                            " model");
  ForwardResult<T> res;
  Tensor<T> s = embed_suffix(p, state, actions, tau);
  if (opts.record_hiddens)
    res.action_hiddens.push_back(action_rows_of(cfg, s).detach());
  std::vector<Tensor<T>> full_blocks;
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (skipped(opts.skip_layers, l)) {
      if (opts.record_hiddens)
        res.action_hiddens.push_back(action_rows_of(cfg, s).detach());
      continue;
    }
    SuffixLayerCapture<T> cap;
    SuffixLayerCapture<T>* capp = nullptr;
    if (l == opts.capture_attn_layer) {
      cap.action_to_vl = true;
      cap.full = opts.attn_scope == AttnScope::kAllTokens;
      capp = &cap;
    }
    s = suffix_layer(p.layers[l].suffix, s, prefix_k[l], prefix_v[l], cfg,
                     capp);
    if (capp) {
      res.attn.action_rows = cap.action_rows;
      if (cap.full) {
        res.attn.suffix_rows = cap.full_rows;
        if (prefix_attn_rows && !(*prefix_attn_rows)[l].defined())
          throw std::logic_error("prefix attention missing at capture layer");
        if (prefix_attn_rows) res.attn.prefix_rows = (*prefix_attn_rows)[l];
      }
    }
    if (opts.record_hiddens)
      res.action_hiddens.push_back(action_rows_of(cfg, s).detach());
  }
  Tensor<T> final_actions = action_rows_of(cfg, rms_norm(s, p.final_norm));
  res.velocity = linear(final_actions, p.action_out_w, p.action_out_b);
  return res;
}

}  // namespace detail

/// Full joint pass: the vision-language stream runs alongside the action
/// stream, which attends to it layer by layer. Gradients flow into both
/// expert parameter sets when they are trainable.
template <typename T>
ForwardResult<T> policy_forward(const PolicyParams<T>& p,
                                const Observation<T>& obs,
                                const Tensor<T>& actions, T tau,
                                const ForwardOptions& opts = {}) {
  ++policy_call_counters().forward;
  const auto& cfg = p.cfg;
  detail::check_skip_layers(cfg, opts.skip_layers);
  const bool want_prefix_attn = opts.capture_attn_layer >= 0 &&
                                opts.attn_scope == AttnScope::kAllTokens;
  Tensor<T> x = detail::embed_prefix(p, obs);
  std::vector<Tensor<T>> ks(cfg.n_layers), vs(cfg.n_layers);
  std::vector<Tensor<T>> prefix_attn(cfg.n_layers);
  std::vector<Tensor<T>> prefix_hiddens;
  if (opts.record_hiddens) prefix_hiddens.push_back(x.detach());
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (!detail::skipped(opts.skip_layers, l)) {
      auto out = detail::prefix_layer(
          p.layers[l].prefix, x, cfg.n_heads,
          want_prefix_attn && l == opts.capture_attn_layer);
      ks[l] = out.k;
      vs[l] = out.v;
      prefix_attn[l] = out.attn_rows;
      x = out.hidden;
    }
    if (opts.record_hiddens) prefix_hiddens.push_back(x.detach());
  }
  ForwardResult<T> res =
      detail::run_suffix(p, ks, vs, obs.state, actions, tau, opts,
                         want_prefix_attn ? &prefix_attn : nullptr);
  res.prefix_hiddens = std::move(prefix_hiddens);
  return res;
}

/// Precomputes the vision-language keys/values once per observation. The
/// prefix stream cannot attend to action tokens, so its activations do
/// not depend on them and survive across denoising steps unchanged.
template <typename T>
PrefixCache<T> build_prefix_cache(const PolicyParams<T>& p,
                                  const Observation<T>& obs,
                                  const std::set<int>* skip_layers = nullptr) {
  ++policy_call_counters().cache_builds;
  const auto& cfg = p.cfg;
  detail::check_skip_layers(cfg, skip_layers);
  PrefixCache<T> cache;
  cache.k.resize(cfg.n_layers);
  cache.v.resize(cfg.n_layers);
  Tensor<T> x = detail::embed_prefix(p, obs);
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (detail::skipped(skip_layers, l)) continue;
    auto out = detail::prefix_layer(p.layers[l].prefix, x, cfg.n_heads, false);
    cache.k[l] = out.k.detach();
    cache.v[l] = out.v.detach();
    x = out.hidden;
  }
  return cache;
}

/// Suffix-only pass against a prefix cache. Arithmetic on the action
/// stream is identical to the joint pass, so results match bit for bit.
template <typename T>
ForwardResult<T> policy_forward_cached(const PolicyParams<T>& p,
                                       const PrefixCache<T>& cache,
                                       const Tensor<T>& state,
                                       const Tensor<T>& actions, T tau,
                                       const ForwardOptions& opts = {}) {
  ++policy_call_counters().cached_forward;
  if (static_cast<int>(cache.k.size()) != p.cfg.n_layers)
    throw std::invalid_argument("prefix cache built for a different depth");
  if (opts.capture_attn_layer >= 0 && opts.attn_scope == AttnScope::kAllTokens)
    throw std::invalid_argument(
        "full-scope attention capture needs the uncached forward");
  for (int l = 0; l < p.cfg.n_layers; ++l)
    if (!detail::skipped(opts.skip_layers, l) && !cache.k[l].defined())
      throw std::invalid_argument(
          "prefix cache is missing layer " + std::to_string(l) +
          "; it was built with that layer skipped");
  return detail::run_suffix<T>(p, cache.k, cache.v, state, actions, tau, opts,
                               nullptr);
}

template <typename T>
std::string policy_config_json(const PolicyParams<T>& p) {
  nlohmann::json j = p.cfg;
  return j.dump();
}

template <typename T>
void save_policy(const std::string& path, PolicyParams<T>& p) {
  std::vector<NamedTensorData> tensors;
  for_each_param(p, [&tensors](const std::string& name, Tensor<T>& t) {
    tensors.push_back(to_record(name, t));
  });
  save_checkpoint(path, policy_config_json(p), tensors);
}

template <typename T>
PolicyParams<T> load_policy(const std::string& path) {
  TensorFile f = load_checkpoint(path);
  PolicyConfig cfg;
  try {
    cfg = nlohmann::json::parse(f.config_json).get<PolicyConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("'" + path + "': bad config block: " + e.what());
  }
  cfg.validate();
  Rng rng(0);
  PolicyParams<T> p = init_policy<T>(cfg, rng);
  std::map<std::string, const NamedTensorData*> by_name;
  for (const auto& t : f.tensors) {
    if (!by_name.emplace(t.name, &t).second)
      throw std::runtime_error("'" + path + "': duplicate tensor '" + t.name +
                               "'");
  }
  std::size_t used = 0;
  for_each_param(p, [&](const std::string& name, Tensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("'" + path + "': missing tensor '" + name + "'");
    from_record(*it->second, t);
    ++used;
  });
  if (used != by_name.size())
    throw std::runtime_error("'" + path + "': file contains " +
                             std::to_string(by_name.size()) +
                             " tensors, expected " + std::to_string(used));
  return p;
}

}  // namespace sflow
