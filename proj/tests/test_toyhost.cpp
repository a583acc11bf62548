#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "saekit/planted.hpp"
#include "saekit/toyhost.hpp"

#include <cmath>
#include <cstring>

using namespace saekit;

namespace {

ToyLmConfig tiny_config() {
  ToyLmConfig cfg;
  cfg.vocab = 11;  // 8 symbols + specials
  cfg.d_model = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.d_ff = 12;
  return cfg;
}

std::vector<uint16_t> tiny_tokens() {
  return {kTokBos, 4, 7, 3, 9, 5, kTokEos};
}

double mean_centered_logit(const MatR<double>& logits, std::span<const uint16_t> tokens,
                           Eigen::Index t) {
  const double correct = logits(t, tokens[t + 1]);
  return correct - logits.row(t).mean();
}

}  // namespace

TEST_CASE("markov corpus: shape, determinism, symbol range") {
  auto c1 = generate_markov_corpus(16, 20, 12, 5);
  auto c2 = generate_markov_corpus(16, 20, 12, 5);
  auto c3 = generate_markov_corpus(16, 20, 12, 6);
  CHECK(c1.vocab_total == 19);
  CHECK(c1.sequences.size() == 20);
  for (const auto& seq : c1.sequences) {
    REQUIRE(seq.size() == 12);
    CHECK(seq.front() == kTokBos);
    CHECK(seq.back() == kTokEos);
    for (size_t t = 1; t + 1 < seq.size(); ++t) {
      CHECK(seq[t] >= kTokFirstSymbol);
      CHECK(seq[t] < 19);
    }
  }
  CHECK(c1.sequences == c2.sequences);
  CHECK(c1.sequences != c3.sequences);
}

TEST_CASE("corpus file roundtrip") {
  auto corpus = generate_markov_corpus(16, 8, 10, 3);
  auto path = std::filesystem::temp_directory_path() / "saekit_corpus.tcrp";
  save_corpus(path, corpus);
  auto back = load_corpus(path);
  CHECK(back.vocab_total == corpus.vocab_total);
  CHECK(back.seq_len == corpus.seq_len);
  CHECK(back.sequences == corpus.sequences);
  std::filesystem::remove(path);
}

TEST_CASE("toy LM weights roundtrip bitwise") {
  auto lm = toy_lm_random_init(tiny_config(), 7);
  auto path = std::filesystem::temp_directory_path() / "saekit_lm.tlmw";
  save_toy_lm(path, lm);
  auto back = load_toy_lm(path);
  CHECK(std::memcmp(back.embed.data(), lm.embed.data(), sizeof(float) * lm.embed.size()) == 0);
  CHECK(std::memcmp(back.unembed.data(), lm.unembed.data(),
                    sizeof(float) * lm.unembed.size()) == 0);
  for (size_t l = 0; l < lm.layers.size(); ++l) {
    CHECK(std::memcmp(back.layers[l].wq.data(), lm.layers[l].wq.data(),
                      sizeof(float) * lm.layers[l].wq.size()) == 0);
    CHECK(std::memcmp(back.layers[l].w1.data(), lm.layers[l].w1.data(),
                      sizeof(float) * lm.layers[l].w1.size()) == 0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("forward is deterministic and site dimensions are stable") {
  auto lm = toy_lm_random_init(tiny_config(), 3);
  auto tokens = tiny_tokens();
  ToyLmCacheT<float> c1, c2;
  toy_forward<float>(lm, tokens, c1);
  toy_forward<float>(lm, tokens, c2);
  CHECK(std::memcmp(c1.logits.data(), c2.logits.data(), sizeof(float) * c1.logits.size()) == 0);

  for (int l = 0; l < 2; ++l) {
    CHECK(site_values(c1, {Site::attn_out_pre_wo, l}).cols() ==
          lm.cfg.heads * lm.cfg.head_dim);
    CHECK(site_values(c1, {Site::mlp_out_post_norm, l}).cols() == lm.cfg.d_model);
    CHECK(site_values(c1, {Site::resid_post_mlp, l}).cols() == lm.cfg.d_model);
    CHECK(site_values(c1, {Site::mlp_in_post_norm, l}).cols() == lm.cfg.d_model);
  }
}

TEST_CASE("untrained loss is close to log vocab") {
  ToyLmConfig cfg;  // default 64-symbol setup
  auto lm = toy_lm_random_init(cfg, 11);
  auto corpus = generate_markov_corpus(64, 32, 18, 9);
  double loss = held_out_loss(lm, corpus, 32);
  const double uniform = std::log(static_cast<double>(cfg.vocab));
  CHECK(loss > 0.9 * uniform);
  CHECK(loss < 1.1 * uniform);
}

TEST_CASE("identity splice reproduces the plain forward bitwise") {
  auto lm = toy_lm_random_init(tiny_config(), 13);
  auto tokens = tiny_tokens();
  ToyLmCacheT<float> plain;
  toy_forward<float>(lm, tokens, plain);
  auto base = lm_cross_entropy<float>(plain.logits, tokens);

  SiteTransformT<float> identity = [](const MatF& x) { return x; };
  for (Site site : {Site::attn_out_pre_wo, Site::mlp_out_post_norm, Site::resid_post_mlp}) {
    for (int layer = 0; layer < 2; ++layer) {
      SiteSpec spec{site, layer};
      ToyLmCacheT<float> spliced;
      toy_forward<float>(lm, tokens, spliced, &spec, &identity);
      CHECK(std::memcmp(spliced.logits.data(), plain.logits.data(),
                        sizeof(float) * plain.logits.size()) == 0);
      auto result = forward_with_splice<float>(lm, tokens, spec, identity);
      for (Eigen::Index t = 0; t < result.per_position.size(); ++t) {
        CHECK(result.per_position(t) == base.per_position(t));
      }
    }
  }
}

TEST_CASE("zero transform at resid_post_mlp changes downstream losses") {
  auto lm = toy_lm_random_init(tiny_config(), 17);
  auto tokens = tiny_tokens();
  ToyLmCacheT<float> plain;
  toy_forward<float>(lm, tokens, plain);
  auto base = lm_cross_entropy<float>(plain.logits, tokens);

  SiteTransformT<float> zero = [](const MatF& x) { return MatF(MatF::Zero(x.rows(), x.cols())); };
  auto spliced = forward_with_splice<float>(lm, tokens, {Site::resid_post_mlp, 0}, zero);
  CHECK(std::abs(spliced.mean - base.mean) > 1e-6);
}

TEST_CASE("transform shape violations are rejected") {
  auto lm = toy_lm_random_init(tiny_config(), 19);
  auto tokens = tiny_tokens();
  SiteTransformT<float> bad = [](const MatF& x) { return MatF(x.topRows(x.rows() - 1)); };
  CHECK_THROWS_AS(forward_with_splice<float>(lm, tokens, {Site::resid_post_mlp, 0}, bad),
                  std::invalid_argument);
}

TEST_CASE("weight gradients match central finite differences") {
  auto lmf = toy_lm_random_init(tiny_config(), 23);
  ToyLmT<double> lm = lmf.cast<double>();
  auto tokens = tiny_tokens();

  ToyLmCacheT<double> cache;
  toy_forward<double>(lm, tokens, cache);
  const Eigen::Index S = cache.logits.rows();
  auto base_loss = lm_cross_entropy<double>(cache.logits, tokens);

  // d(mean CE)/d(logits) for counted positions
  MatR<double> d_logits = MatR<double>::Zero(S, lm.cfg.vocab);
  for (Eigen::Index t = 0; t + 1 < S; ++t) {
    if (!base_loss.counted[static_cast<size_t>(t)]) continue;
    VecX<double> row = cache.logits.row(t).transpose();
    VecX<double> p = (row.array() - row.maxCoeff()).exp();
    p /= p.sum();
    p(tokens[t + 1]) -= 1.0;
    d_logits.row(t) = p.transpose() / static_cast<double>(base_loss.count);
  }
  auto grads = ToyLmGradsT<double>::zeros_like(lm);
  toy_backward<double>(lm, cache, d_logits, &grads);

  const double h = 1e-5;
  auto fd_check = [&](double analytic, auto&& bump) {
    ToyLmT<double> hi = lm, lo = lm;
    bump(hi, h);
    bump(lo, -h);
    ToyLmCacheT<double> ch, cl;
    toy_forward<double>(hi, tokens, ch);
    toy_forward<double>(lo, tokens, cl);
    const double fd = (lm_cross_entropy<double>(ch.logits, tokens).mean -
                       lm_cross_entropy<double>(cl.logits, tokens).mean) /
                      (2 * h);
    if (std::abs(analytic) > 1e-7) {
      CHECK(std::abs(fd - analytic) / std::abs(analytic) < 1e-5);
    } else {
      CHECK(std::abs(fd) < 1e-6);
    }
  };

  Rng pick(99);
  auto sample_mat = [&](const MatR<double>& g, auto&& locate) {
    for (int trial = 0; trial < 6; ++trial) {
      const auto i = static_cast<Eigen::Index>(pick.below(static_cast<uint64_t>(g.rows())));
      const auto j = static_cast<Eigen::Index>(pick.below(static_cast<uint64_t>(g.cols())));
      fd_check(g(i, j), [&](ToyLmT<double>& m, double d) { locate(m)(i, j) += d; });
    }
  };
  auto sample_vec = [&](const VecX<double>& g, auto&& locate) {
    for (int trial = 0; trial < 4; ++trial) {
      const auto i = static_cast<Eigen::Index>(pick.below(static_cast<uint64_t>(g.size())));
      fd_check(g(i), [&](ToyLmT<double>& m, double d) { locate(m)(i) += d; });
    }
  };

  sample_mat(grads.embed, [](ToyLmT<double>& m) -> MatR<double>& { return m.embed; });
  sample_mat(grads.unembed, [](ToyLmT<double>& m) -> MatR<double>& { return m.unembed; });
  sample_vec(grads.g_final, [](ToyLmT<double>& m) -> VecX<double>& { return m.g_final; });
  for (int l = 0; l < 2; ++l) {
    sample_mat(grads.layers[l].wq, [l](ToyLmT<double>& m) -> MatR<double>& { return m.layers[l].wq; });
    sample_mat(grads.layers[l].wk, [l](ToyLmT<double>& m) -> MatR<double>& { return m.layers[l].wk; });
    sample_mat(grads.layers[l].wv, [l](ToyLmT<double>& m) -> MatR<double>& { return m.layers[l].wv; });
    sample_mat(grads.layers[l].wo, [l](ToyLmT<double>& m) -> MatR<double>& { return m.layers[l].wo; });
    sample_mat(grads.layers[l].w1, [l](ToyLmT<double>& m) -> MatR<double>& { return m.layers[l].w1; });
    sample_mat(grads.layers[l].w2, [l](ToyLmT<double>& m) -> MatR<double>& { return m.layers[l].w2; });
    sample_vec(grads.layers[l].g_pre_attn,
               [l](ToyLmT<double>& m) -> VecX<double>& { return m.layers[l].g_pre_attn; });
    sample_vec(grads.layers[l].g_post_attn,
               [l](ToyLmT<double>& m) -> VecX<double>& { return m.layers[l].g_post_attn; });
    sample_vec(grads.layers[l].g_pre_mlp,
               [l](ToyLmT<double>& m) -> VecX<double>& { return m.layers[l].g_pre_mlp; });
    sample_vec(grads.layers[l].g_post_mlp,
               [l](ToyLmT<double>& m) -> VecX<double>& { return m.layers[l].g_post_mlp; });
  }
}

TEST_CASE("attribution site gradients match splice-perturbation finite differences") {
  auto lmf = toy_lm_random_init(tiny_config(), 29);
  ToyLmT<double> lm = lmf.cast<double>();
  auto tokens = tiny_tokens();
  ToyLmCacheT<double> cache;
  toy_forward<double>(lm, tokens, cache);

  const double h = 1e-5;
  Rng pick(31);
  for (Site site : {Site::attn_out_pre_wo, Site::mlp_out_post_norm, Site::resid_post_mlp,
                    Site::mlp_in_post_norm}) {
    for (int layer = 0; layer < 2; ++layer) {
      SiteSpec spec{site, layer};
      const Eigen::Index t = 3;  // a mid-sequence non-special position
      VecX<double> grad = attribution_gradient<double>(lm, cache, spec, t);

      for (int trial = 0; trial < 4; ++trial) {
        const auto k = static_cast<Eigen::Index>(pick.below(static_cast<uint64_t>(grad.size())));
        auto loss_with_bump = [&](double d) {
          // mlp_in transforms replace the MLP output, so perturb via a
          // pass-through transform at the observation site itself
          SiteTransformT<double> bump = [&](const MatR<double>& x) {
            MatR<double> y = x;
            y(t, k) += d;
            return y;
          };
          SiteSpec where = spec;
          ToyLmCacheT<double> c;
          if (site == Site::mlp_in_post_norm) {
            // capture semantics differ: perturb m_in by recomputing the MLP
            // by hand is involved; instead perturb resid_mid upstream is not
            // equivalent. Use the analytic chain check below instead.
            return std::numeric_limits<double>::quiet_NaN();
          }
          toy_forward<double>(lm, tokens, c, &where, &bump);
          return mean_centered_logit(c.logits, tokens, t);
        };
        if (site == Site::mlp_in_post_norm) continue;
        const double fd = (loss_with_bump(h) - loss_with_bump(-h)) / (2 * h);
        if (std::abs(grad(k)) > 1e-7) {
          CHECK(std::abs(fd - grad(k)) / std::abs(grad(k)) < 1e-5);
        } else {
          CHECK(std::abs(fd) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("mlp_in gradient equals the chain through the MLP sublayer") {
  // independent check for the transcoder input site: chain d(mlp path) by
  // finite differences of the downstream loss while recomputing the MLP
  auto lmf = toy_lm_random_init(tiny_config(), 37);
  ToyLmT<double> lm = lmf.cast<double>();
  auto tokens = tiny_tokens();
  ToyLmCacheT<double> cache;
  toy_forward<double>(lm, tokens, cache);
  const Eigen::Index t = 3;
  const int layer = 1;
  VecX<double> grad = attribution_gradient<double>(lm, cache, {Site::mlp_in_post_norm, layer}, t);

  // finite differences through a transcoder-style splice that recomputes the
  // MLP sublayer from perturbed m_in
  const auto& L = lm.layers[layer];
  const double h = 1e-6;
  auto mlp_from = [&](const MatR<double>& m_in) {
    MatR<double> h_pre = m_in * L.w1;
    MatR<double> hh = h_pre.unaryExpr([](double x) { return detail::gelu(x); });
    MatR<double> raw = hh * L.w2;
    VecX<double> inv;
    return detail::rmsnorm_rows<double>(raw, L.g_post_mlp, lm.cfg.rms_eps, inv);
  };
  Rng pick(41);
  for (int trial = 0; trial < 5; ++trial) {
    const auto k = static_cast<Eigen::Index>(pick.below(static_cast<uint64_t>(grad.size())));
    auto loss_with = [&](double d) {
      SiteTransformT<double> splice = [&](const MatR<double>& m_in) {
        MatR<double> bumped = m_in;
        bumped(t, k) += d;
        return mlp_from(bumped);
      };
      SiteSpec spec{Site::mlp_in_post_norm, layer};
      ToyLmCacheT<double> c;
      toy_forward<double>(lm, tokens, c, &spec, &splice);
      return mean_centered_logit(c.logits, tokens, t);
    };
    const double fd = (loss_with(h) - loss_with(-h)) / (2 * h);
    if (std::abs(grad(k)) > 1e-7) {
      CHECK(std::abs(fd - grad(k)) / std::abs(grad(k)) < 1e-4);
    } else {
      CHECK(std::abs(fd) < 1e-6);
    }
  }
}

TEST_CASE("gain folding preserves logits and normalizes the transcoder input site") {
  auto lm = toy_lm_random_init(tiny_config(), 43);
  // perturb the pre-MLP gains away from 1
  Rng rng(47);
  for (auto& L : lm.layers) {
    for (int d = 0; d < lm.cfg.d_model; ++d) {
      L.g_pre_mlp(d) = static_cast<float>(rng.uniform(0.5, 1.5));
    }
  }
  auto folded = fold_rms_gains(lm);
  for (const auto& L : folded.layers) CHECK((L.g_pre_mlp.array() == 1.0f).all());

  auto tokens = tiny_tokens();
  ToyLmCacheT<float> before, after;
  toy_forward<float>(lm, tokens, before);
  toy_forward<float>(folded, tokens, after);
  CHECK((before.logits - after.logits).cwiseAbs().maxCoeff() < 1e-5f);

  // identity gains -> weights unchanged
  auto lm1 = toy_lm_random_init(tiny_config(), 49);
  auto folded1 = fold_rms_gains(lm1);
  CHECK(std::memcmp(folded1.layers[0].w1.data(), lm1.layers[0].w1.data(),
                    sizeof(float) * lm1.layers[0].w1.size()) == 0);

  // after folding, m_in rows have squared norm d_model (unit-gain RMS norm)
  const auto& m_in = site_values(after, {Site::mlp_in_post_norm, 0});
  for (Eigen::Index i = 0; i < m_in.rows(); ++i) {
    CHECK(m_in.row(i).squaredNorm() ==
          doctest::Approx(static_cast<float>(lm.cfg.d_model)).epsilon(1e-4));
  }
}

TEST_CASE("toy LM training beats the uniform baseline and is deterministic") {
  auto corpus = generate_markov_corpus(64, 4096, 18, 3);
  ToyLmConfig cfg;
  auto run = [&] {
    auto lm = toy_lm_random_init(cfg, 5);
    ToyTrainConfig tc;
    tc.steps = 1500;
    tc.sequences_per_step = 16;
    tc.lr = 3e-3;
    tc.seed = 5;
    auto result = train_toy_lm(lm, corpus, tc);
    return std::make_pair(lm, result);
  };
  auto [lm1, r1] = run();
  const double uniform = std::log(static_cast<double>(cfg.vocab));
  INFO("initial ", r1.initial_loss, " final ", r1.final_loss, " baseline ", uniform);
  CHECK(r1.initial_loss > 0.9 * uniform);
  CHECK(r1.final_loss < 0.9 * uniform);
  CHECK(r1.final_loss < r1.initial_loss);

  auto [lm2, r2] = run();
  CHECK(r2.final_loss == r1.final_loss);
  CHECK(std::memcmp(lm1.embed.data(), lm2.embed.data(), sizeof(float) * lm1.embed.size()) == 0);
  CHECK(std::memcmp(lm1.unembed.data(), lm2.unembed.data(),
                    sizeof(float) * lm1.unembed.size()) == 0);
}

// ----------------------------- planted dictionary -----------------------------

TEST_CASE("planted rows: noiseless single active feature is exact") {
  auto dict = PlantedDictionary::random(16, 4, 0.3, 3);
  dict.noise_scale = 0.0;
  auto sample = generate_planted_activations(dict, 200, 9);
  bool checked = false;
  for (int64_t r = 0; r < sample.rows.rows(); ++r) {
    if (sample.codes[static_cast<size_t>(r)].size() != 1) continue;
    auto [f, a] = sample.codes[static_cast<size_t>(r)][0];
    VecF want = dict.directions.row(f).transpose() * a;
    // generation accumulates in 64-bit then rounds once
    CHECK((sample.rows.row(r).transpose() - want).cwiseAbs().maxCoeff() < 1e-6f);
    checked = true;
    break;
  }
  CHECK(checked);
}

TEST_CASE("planted rows: same seed identical, mean active count near p*F") {
  auto dict = PlantedDictionary::random(24, 40, 0.15, 11);
  auto s1 = generate_planted_activations(dict, 20000, 13);
  auto s2 = generate_planted_activations(dict, 20000, 13);
  CHECK(std::memcmp(s1.rows.data(), s2.rows.data(), sizeof(float) * s1.rows.size()) == 0);

  double mean_active = 0;
  for (const auto& code : s1.codes) mean_active += static_cast<double>(code.size());
  mean_active /= static_cast<double>(s1.codes.size());
  const double expect = 0.15 * 40;
  const double sigma = std::sqrt(40 * 0.15 * 0.85 / 20000.0);
  CHECK(std::abs(mean_active - expect) < 3 * sigma + 1e-9);
}

TEST_CASE("recovery matching scores a perfect decoder at cosine 1") {
  auto dict = PlantedDictionary::random(12, 6, 0.2, 17);
  MatF w_dec(12, 10);  // decoder wider than the dictionary
  Rng rng(19);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 10; ++j) w_dec(i, j) = static_cast<float>(rng.normal());
  for (int f = 0; f < 6; ++f) w_dec.col(f + 2) = dict.directions.row(f).transpose();

  auto matches = match_dictionary(w_dec, dict.directions);
  REQUIRE(matches.size() == 6);
  for (const auto& m : matches) {
    CHECK(m.column == m.feature + 2);
    CHECK(m.cosine == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(recovery_score(w_dec, dict.directions, 0.9) == 1.0);
}
