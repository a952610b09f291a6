#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "sflow/flow.hpp"
#include "sflow/ops.hpp"
#include "sflow/policy.hpp"
#include "test_support.hpp"

using namespace sflow;
namespace st = sflow::testing;

namespace {

PolicyConfig pinned_tiny() {
  PolicyConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.n_vis_tokens = 2;
  c.n_lang_tokens = 1;
  c.n_state_tokens = 1;
  c.chunk_len = 2;
  c.action_dim = 2;
  c.tau_embed_dim = 4;
  c.state_dim = 2;
  return c;
}

}  // namespace

TEST(PolicyConfigTest, ValidationCatchesBadValues) {
  PolicyConfig c = pinned_tiny();
  EXPECT_NO_THROW(c.validate());
  c.d_model = 6;
  c.n_heads = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = pinned_tiny();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = pinned_tiny();
  c.tau_embed_dim = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(PolicyConfigTest, JsonRoundTrip) {
  PolicyConfig c = pinned_tiny();
  nlohmann::json j = c;
  PolicyConfig back = j.get<PolicyConfig>();
  EXPECT_EQ(back.n_layers, c.n_layers);
  EXPECT_EQ(back.d_model, c.d_model);
  EXPECT_EQ(back.chunk_len, c.chunk_len);
  EXPECT_EQ(back.tau_embed_dim, c.tau_embed_dim);
}

TEST(PolicyInit, ParamCountMatchesHandCount) {
  // For one layer at width 4 (hidden 16), counted directly:
  //   adapters 20+12+12+20, two blocks of 236, head 4+10.
  Rng rng(0, 0);
  PolicyParams<double> p = init_policy<double>(pinned_tiny(), rng);
  EXPECT_EQ(count_params(p), 550);
}

TEST(PolicyInit, SeedDeterminism) {
  Rng r1(5, 1), r2(5, 1), r3(5, 2);
  PolicyParams<float> a = init_policy<float>(pinned_tiny(), r1);
  PolicyParams<float> b = init_policy<float>(pinned_tiny(), r2);
  PolicyParams<float> c = init_policy<float>(pinned_tiny(), r3);
  ParamList<float> la = param_list(a), lb = param_list(b), lc = param_list(c);
  bool any_diff_stream = false;
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].name, lb[i].name);
    EXPECT_EQ(la[i].tensor.values(), lb[i].tensor.values()) << la[i].name;
    if (la[i].tensor.values() != lc[i].tensor.values()) any_diff_stream = true;
  }
  EXPECT_TRUE(any_diff_stream);
}

TEST(PolicyForward, VelocityShapeAndZeroWeights) {
  Rng rng(1, 0);
  PolicyConfig cfg = st::tiny_config(rng);
  PolicyParams<double> p = init_policy<double>(cfg, rng);
  Observation<double> obs = st::random_obs<double>(cfg, rng);
  Tensor<double> a = st::random_chunk<double>(cfg, rng);

  ForwardResult<double> out = policy_forward(p, obs, a, 0.3);
  EXPECT_EQ(out.velocity.rows(), cfg.chunk_len);
  EXPECT_EQ(out.velocity.cols(), cfg.action_dim);

  for_each_param(p, [](const std::string&, Tensor<double>& t) {
    for (auto& v : t.values()) v = 0;
  });
  ForwardResult<double> z = policy_forward(p, obs, a, 0.3);
  for (double v : z.velocity.values()) EXPECT_EQ(v, 0.0);
}

TEST(PolicyForward, RejectsBadShapesAndCaptureLayer) {
  Rng rng(2, 0);
  PolicyConfig cfg = st::tiny_config(rng);
  PolicyParams<double> p = init_policy<double>(cfg, rng);
  Observation<double> obs = st::random_obs<double>(cfg, rng);
  Tensor<double> a = st::random_chunk<double>(cfg, rng);

  Tensor<double> bad = Tensor<double>::zeros({cfg.chunk_len + 1, cfg.action_dim});
  EXPECT_THROW(policy_forward(p, obs, bad, 0.5), std::invalid_argument);

  Observation<double> bad_obs = obs;
  bad_obs.vis = Tensor<double>::zeros({cfg.n_vis_tokens + 1, cfg.d_model});
  EXPECT_THROW(policy_forward(p, bad_obs, a, 0.5), std::invalid_argument);

  ForwardOptions opts;
  opts.capture_attn_layer = cfg.n_layers;  // one past the end
  EXPECT_THROW(policy_forward(p, obs, a, 0.5, opts), std::out_of_range);
}

TEST(PolicyForward, AttentionRowsAreDistributions) {
  Rng rng(3, 0);
  for (int trial = 0; trial < 10; ++trial) {
    PolicyConfig cfg = st::random_config(rng);
    PolicyParams<float> p = init_policy<float>(cfg, rng);
    Observation<float> obs = st::random_obs<float>(cfg, rng);
    Tensor<float> a = st::random_chunk<float>(cfg, rng);
    ForwardOptions opts;
    opts.capture_attn_layer = static_cast<int>(rng.below(cfg.n_layers));
    ForwardResult<float> out = policy_forward(p, obs, a, 0.5f, opts);

    const auto& rows = out.attn.action_rows;
    ASSERT_EQ(rows.rows(), cfg.n_heads * cfg.chunk_len);
    ASSERT_EQ(rows.cols(), cfg.prefix_len());
    for (std::int64_t i = 0; i < rows.rows(); ++i) {
      float sum = 0;
      for (std::int64_t j = 0; j < rows.cols(); ++j) {
        EXPECT_GE(rows.at(i, j), 0.0f);
        sum += rows.at(i, j);
      }
      EXPECT_NEAR(sum, 1.0f, 1e-6f);
    }
  }
}

TEST(PolicyForward, FullScopeCaptureShapes) {
  Rng rng(4, 0);
  PolicyConfig cfg = st::random_config(rng);
  PolicyParams<float> p = init_policy<float>(cfg, rng);
  Observation<float> obs = st::random_obs<float>(cfg, rng);
  Tensor<float> a = st::random_chunk<float>(cfg, rng);
  ForwardOptions opts;
  opts.capture_attn_layer = 0;
  opts.attn_scope = AttnScope::kAllTokens;
  ForwardResult<float> out = policy_forward(p, obs, a, 0.25f, opts);

  const std::int64_t P = cfg.prefix_len(), S = cfg.suffix_len();
  ASSERT_EQ(out.attn.prefix_rows.rows(), cfg.n_heads * P);
  ASSERT_EQ(out.attn.prefix_rows.cols(), P);
  ASSERT_EQ(out.attn.suffix_rows.rows(), cfg.n_heads * S);
  ASSERT_EQ(out.attn.suffix_rows.cols(), P + S);
  for (const auto* m : {&out.attn.prefix_rows, &out.attn.suffix_rows})
    for (std::int64_t i = 0; i < m->rows(); ++i) {
      float sum = 0;
      for (std::int64_t j = 0; j < m->cols(); ++j) sum += m->at(i, j);
      EXPECT_NEAR(sum, 1.0f, 1e-6f);
    }
}

TEST(PolicyMask, PrefixStatesBitwiseInvariantToSuffix) {
  Rng rng(6, 0);
  for (int trial = 0; trial < 50; ++trial) {
    PolicyConfig cfg = st::random_config(rng);
    PolicyParams<float> p = init_policy<float>(cfg, rng);
    Observation<float> obs = st::random_obs<float>(cfg, rng);
    ForwardOptions opts;
    opts.record_hiddens = true;

    Tensor<float> a1 = st::random_chunk<float>(cfg, rng);
    Tensor<float> a2 = mul_scalar(st::random_chunk<float>(cfg, rng), 50.0f);
    Observation<float> obs2 = obs;
    obs2.state = mul_scalar(obs.state, -7.0f);

    ForwardResult<float> r1 = policy_forward(p, obs, a1, 0.1f, opts);
    ForwardResult<float> r2 = policy_forward(p, obs2, a2, 0.9f, opts);
    ASSERT_EQ(r1.prefix_hiddens.size(), static_cast<std::size_t>(cfg.n_layers + 1));
    for (std::size_t l = 0; l < r1.prefix_hiddens.size(); ++l)
      EXPECT_EQ(r1.prefix_hiddens[l].values(), r2.prefix_hiddens[l].values())
          << "prefix state " << l << " depends on suffix inputs";
  }
}

TEST(PolicyCache, MatchesUncachedForwardOverManyConfigs) {
  Rng rng(7, 0);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    PolicyConfig cfg = st::random_config(rng);
    PolicyParams<float> p = init_policy<float>(cfg, rng);
    Observation<float> obs = st::random_obs<float>(cfg, rng);
    PrefixCache<float> cache = build_prefix_cache(p, obs);
    for (int step = 0; step < 10; ++step) {
      const float tau = static_cast<float>(step) / 10.0f;
      Tensor<float> a = st::random_chunk<float>(cfg, rng);
      Tensor<float> v1 = policy_forward(p, obs, a, tau).velocity;
      Tensor<float> v2 =
          policy_forward_cached(p, cache, obs.state, a, tau).velocity;
      for (std::size_t i = 0; i < v1.values().size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(v1.values()[i]) -
                                         v2.values()[i]));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(PolicyCache, ShapeAndContents) {
  Rng rng(8, 0);
  PolicyConfig cfg = st::random_config(rng);
  PolicyParams<float> p = init_policy<float>(cfg, rng);
  Observation<float> obs = st::random_obs<float>(cfg, rng);
  PrefixCache<float> cache = build_prefix_cache(p, obs);
  ASSERT_EQ(cache.k.size(), static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    EXPECT_EQ(cache.k[l].rows(), cfg.prefix_len());
    EXPECT_EQ(cache.k[l].cols(), cfg.d_model);
    EXPECT_EQ(cache.v[l].shape(), cache.k[l].shape());
  }

  // One perturbed visual token must change the cache.
  Observation<float> obs2 = obs;
  obs2.vis = obs.vis.detach();
  obs2.vis.at(0, 0) += 1.0f;
  PrefixCache<float> cache2 = build_prefix_cache(p, obs2);
  EXPECT_NE(cache.k[0].values(), cache2.k[0].values());

  // The cache never looks at chunk_len.
  PolicyParams<float> p2 = p;
  p2.cfg.chunk_len = cfg.chunk_len + 3;
  PrefixCache<float> cache3 = build_prefix_cache(p2, obs);
  for (int l = 0; l < cfg.n_layers; ++l) {
    EXPECT_EQ(cache.k[l].values(), cache3.k[l].values());
    EXPECT_EQ(cache.v[l].values(), cache3.v[l].values());
  }
}

TEST(PolicyCache, TauReachesOnlySuffix) {
  Rng rng(9, 0);
  PolicyConfig cfg = st::tiny_config(rng);
  PolicyParams<float> p = init_policy<float>(cfg, rng);
  Observation<float> obs = st::random_obs<float>(cfg, rng);
  Tensor<float> a = st::random_chunk<float>(cfg, rng);
  PrefixCache<float> cache = build_prefix_cache(p, obs);
  Tensor<float> v0 = policy_forward_cached(p, cache, obs.state, a, 0.0f).velocity;
  Tensor<float> v1 = policy_forward_cached(p, cache, obs.state, a, 1.0f).velocity;
  EXPECT_NE(v0.values(), v1.values());
}

TEST(PolicyCache, MismatchesRejected) {
  Rng rng(10, 0);
  PolicyConfig cfg = st::tiny_config(rng);
  cfg.n_layers = 2;
  PolicyParams<float> p = init_policy<float>(cfg, rng);
  Observation<float> obs = st::random_obs<float>(cfg, rng);
  Tensor<float> a = st::random_chunk<float>(cfg, rng);
  PrefixCache<float> cache = build_prefix_cache(p, obs);

  PolicyConfig deeper = cfg;
  deeper.n_layers = 3;
  Rng rng2(10, 1);
  PolicyParams<float> q = init_policy<float>(deeper, rng2);
  EXPECT_THROW(policy_forward_cached(q, cache, obs.state, a, 0.5f),
               std::invalid_argument);

  ForwardOptions opts;
  opts.capture_attn_layer = 0;
  opts.attn_scope = AttnScope::kAllTokens;
  EXPECT_THROW(policy_forward_cached(p, cache, obs.state, a, 0.5f, opts),
               std::invalid_argument);

  // Cache built with a layer skipped cannot serve a full forward.
  std::set<int> skip{0};
  PrefixCache<float> partial = build_prefix_cache(p, obs, &skip);
  EXPECT_THROW(policy_forward_cached(p, partial, obs.state, a, 0.5f),
               std::invalid_argument);
}

TEST(PolicySkip, EmptySetIsBaselineAndFullSetRejected) {
  Rng rng(11, 0);
  PolicyConfig cfg = st::random_config(rng);
  PolicyParams<float> p = init_policy<float>(cfg, rng);
  Observation<float> obs = st::random_obs<float>(cfg, rng);
  Tensor<float> a = st::random_chunk<float>(cfg, rng);

  ForwardOptions opts;
  std::set<int> empty;
  opts.skip_layers = &empty;
  Tensor<float> v1 = policy_forward(p, obs, a, 0.4f).velocity;
  Tensor<float> v2 = policy_forward(p, obs, a, 0.4f, opts).velocity;
  EXPECT_EQ(v1.values(), v2.values());

  std::set<int> all;
  for (int l = 0; l < cfg.n_layers; ++l) all.insert(l);
  opts.skip_layers = &all;
  EXPECT_THROW(policy_forward(p, obs, a, 0.4f, opts), std::invalid_argument);

  std::set<int> oob{cfg.n_layers};
  opts.skip_layers = &oob;
  EXPECT_THROW(policy_forward(p, obs, a, 0.4f, opts), std::invalid_argument);
}

TEST(PolicySkip, EqualsIdentityWeightedLayer) {
  Rng rng(12, 0);
  for (int trial = 0; trial < 5; ++trial) {
    PolicyConfig cfg = st::random_config(rng);
    if (cfg.n_layers < 2) cfg.n_layers = 2;
    PolicyParams<double> p = init_policy<double>(cfg, rng);
    Observation<double> obs = st::random_obs<double>(cfg, rng);
    Tensor<double> a = st::random_chunk<double>(cfg, rng);
    const int l = static_cast<int>(rng.below(cfg.n_layers));

    // A layer whose residual branches emit zero is the identity map.
    PolicyParams<double> ident = p;
    ident.layers = p.layers;
    auto zeroed = [](const BlockWeights<double>& b) {
      BlockWeights<double> out = b;
      out.attn.wo = Tensor<double>::zeros(b.attn.wo.shape());
      out.attn.bo = Tensor<double>::zeros(b.attn.bo.shape());
      out.mlp.w2 = Tensor<double>::zeros(b.mlp.w2.shape());
      out.mlp.b2 = Tensor<double>::zeros(b.mlp.b2.shape());
      return out;
    };
    ident.layers[l] = {zeroed(p.layers[l].prefix), zeroed(p.layers[l].suffix)};

    std::set<int> skip{l};
    ForwardOptions opts;
    opts.skip_layers = &skip;
    Tensor<double> v_skip = policy_forward(p, obs, a, 0.7, opts).velocity;
    Tensor<double> v_ident = policy_forward(ident, obs, a, 0.7).velocity;
    ASSERT_EQ(v_skip.values().size(), v_ident.values().size());
    for (std::size_t i = 0; i < v_skip.values().size(); ++i)
      EXPECT_NEAR(v_skip.values()[i], v_ident.values()[i], 1e-12);

    // And skipping genuinely changes the output.
    Tensor<double> v_base = policy_forward(p, obs, a, 0.7).velocity;
    EXPECT_NE(v_base.values(), v_skip.values());
  }
}

TEST(PolicyCheckpoint, SaveLoadRoundTripIsBitwise) {
  Rng rng(13, 0);
  PolicyConfig cfg = st::random_config(rng);
  PolicyParams<float> p = init_policy<float>(cfg, rng);
  st::TempDir tmp("ckpt");
  const std::string path = tmp.path("p.ckpt");
  save_policy(path, p);
  PolicyParams<float> q = load_policy<float>(path);

  EXPECT_EQ(q.cfg.n_layers, cfg.n_layers);
  EXPECT_EQ(q.cfg.d_model, cfg.d_model);
  ParamList<float> lp = param_list(p), lq = param_list(q);
  ASSERT_EQ(lp.size(), lq.size());
  for (std::size_t i = 0; i < lp.size(); ++i) {
    EXPECT_EQ(lp[i].name, lq[i].name);
    EXPECT_EQ(lp[i].tensor.values(), lq[i].tensor.values()) << lp[i].name;
  }

  save_policy(tmp.path("q.ckpt"), q);
  EXPECT_EQ(st::read_file_bytes(path), st::read_file_bytes(tmp.path("q.ckpt")));
}

TEST(PolicyCheckpoint, CorruptFilesRejected) {
  Rng rng(14, 0);
  PolicyParams<float> p = init_policy<float>(pinned_tiny(), rng);
  st::TempDir tmp("ckpt_bad");
  const std::string path = tmp.path("p.ckpt");
  save_policy(path, p);

  std::string bytes = st::read_file_bytes(path);
  bytes[0] = 'X';  // magic
  std::ofstream(tmp.path("bad_magic.ckpt"), std::ios::binary) << bytes;
  EXPECT_THROW(load_policy<float>(tmp.path("bad_magic.ckpt")), std::runtime_error);

  std::string truncated = st::read_file_bytes(path);
  truncated.resize(truncated.size() / 2);
  std::ofstream(tmp.path("short.ckpt"), std::ios::binary) << truncated;
  EXPECT_THROW(load_policy<float>(tmp.path("short.ckpt")), std::runtime_error);
}
