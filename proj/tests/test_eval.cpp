#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "saekit/eval.hpp"
#include "saekit/standardize.hpp"
#include "saekit/trainer.hpp"

#include <cmath>
#include <cstring>

using namespace saekit;

namespace {

SaeParamsT<float> identity_sae(int n, float theta = 0.001f) {
  SaeParamsT<float> p;
  p.w_enc = MatF::Identity(n, n);
  p.b_enc = VecF::Zero(n);
  p.w_dec = MatF::Identity(n, n);
  p.b_dec = VecF::Zero(n);
  p.theta = VecF::Constant(n, theta);
  p.parameterization = Parameterization::inference;
  return p;
}

ToyLmConfig tiny_config() {
  ToyLmConfig cfg;
  cfg.vocab = 11;
  cfg.d_model = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.d_ff = 12;
  return cfg;
}

std::vector<std::vector<uint16_t>> tiny_sequences(int count) {
  auto corpus = generate_markov_corpus(8, count, 9, 77);
  return corpus.sequences;
}

}  // namespace

// ----------------------------- bf16 -----------------------------

TEST_CASE("bf16 rounding: exact values, ties to even, nearest otherwise") {
  CHECK(bf16_round(1.0f) == 1.0f);
  CHECK(bf16_round(-2.5f) == -2.5f);
  CHECK(bf16_round(0.0f) == 0.0f);

  // 1 + 2^-8 sits exactly between 1.0 and 1 + 2^-7: tie -> even mantissa (1.0)
  const float tie = 1.0f + std::ldexp(1.0f, -8);
  CHECK(bf16_round(tie) == 1.0f);

  // 1 + 3*2^-9 is nearer to 1 + 2^-7
  const float up = 1.0f + 3.0f * std::ldexp(1.0f, -9);
  CHECK(bf16_round(up) == 1.0f + std::ldexp(1.0f, -7));

  // NaN passes through, infinity is preserved
  CHECK(std::isnan(bf16_round(std::numeric_limits<float>::quiet_NaN())));
  CHECK(bf16_round(std::numeric_limits<float>::infinity()) ==
        std::numeric_limits<float>::infinity());
  // values above the largest bf16 round to infinity
  CHECK(bf16_round(std::numeric_limits<float>::max()) == std::numeric_limits<float>::infinity());
}

TEST_CASE("bf16 rounding is idempotent bitwise on arbitrary patterns") {
  Rng rng(3);
  for (int trial = 0; trial < 200000; ++trial) {
    uint32_t bits = static_cast<uint32_t>(rng.next_u64());
    float x;
    std::memcpy(&x, &bits, 4);
    float once = bf16_round(x);
    float twice = bf16_round(once);
    CHECK(std::memcmp(&once, &twice, 4) == 0);
  }
}

// ----------------------------- FVU / L0 -----------------------------

TEST_CASE("fvu is exactly 1 when the SAE returns the dataset mean") {
  // silent encoder (w_enc = 0) with b_dec at the dataset mean
  SaeParamsT<float> p = identity_sae(2);
  p.w_enc.setZero();
  p.theta.setConstant(1.0f);
  p.b_dec << 2.0f, 0.0f;
  MatF rows(2, 2);
  rows << 1.0f, 0.0f, 3.0f, 0.0f;  // mean (2, 0), exactly representable
  SaeRunner sae(p, std::nullopt);
  CHECK(fvu(sae, rows) == 1.0);
}

TEST_CASE("fvu is exactly 0 for perfect reconstruction") {
  SaeParamsT<float> p = identity_sae(3);
  MatF rows(4, 3);
  rows << 1, 2, 3, 4, 5, 6, 7, 8, 9, 0.5, 1.5, 2.5;
  SaeRunner sae(p, std::nullopt);
  CHECK(fvu(sae, rows) == 0.0);
}

TEST_CASE("fvu matches a two-pass scalar oracle on random data") {
  Rng rng(5);
  auto params = init_params(8, 16, 5);
  auto folded = fold_parameters(params, 1.0);
  SaeRunner sae(folded, std::nullopt);
  MatF rows(100, 8);
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 8; ++j) rows(i, j) = static_cast<float>(rng.uniform(-2, 2));

  const double got = fvu(sae, rows);

  // oracle: explicit two passes with scalar loops
  MatF recon = sae.reconstruct_rows(rows);
  double mean[8] = {0};
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 8; ++j) mean[j] += rows(i, j);
  for (double& m : mean) m /= 100.0;
  double num = 0, den = 0;
  for (int i = 0; i < 100; ++i) {
    for (int j = 0; j < 8; ++j) {
      const double r = static_cast<double>(rows(i, j)) - recon(i, j);
      const double d = static_cast<double>(rows(i, j)) - mean[j];
      num += r * r;
      den += d * d;
    }
  }
  CHECK(std::abs(got - num / den) < 1e-10);
}

TEST_CASE("fvu rejects degenerate evaluation sets") {
  SaeRunner sae(identity_sae(2), std::nullopt);
  MatF one_row(1, 2);
  one_row << 1, 2;
  CHECK_THROWS_AS(fvu(sae, one_row), ConfigError);
  MatF constant(5, 2);
  constant.setConstant(3.0f);
  CHECK_THROWS_AS(fvu(sae, constant), NumericError);
}

TEST_CASE("mean_l0 edge cases and brute force") {
  // thresholds above every pre-activation -> 0
  SaeParamsT<float> silent = identity_sae(4, 100.0f);
  MatF rows(10, 4);
  Rng rng(7);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 4; ++j) rows(i, j) = static_cast<float>(rng.uniform(0, 2));
  CHECK(mean_l0(SaeRunner(silent, std::nullopt), rows) == 0.0);
  CHECK_THROWS_AS(mean_l0(SaeRunner(silent, std::nullopt), MatF(0, 4)), ConfigError);

  // identity SAE on one-hot rows -> exactly 1
  MatF onehots = MatF::Identity(4, 4);
  CHECK(mean_l0(SaeRunner(identity_sae(4), std::nullopt), onehots) == 1.0);

  // random instance vs brute-force count
  auto params = fold_parameters(init_params(6, 12, 9), 1.0);
  SaeRunner sae(params, std::nullopt);
  MatF data(50, 6);
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 6; ++j) data(i, j) = static_cast<float>(rng.uniform(-2, 2));
  MatF f = sae.encode_rows(data);
  int64_t count = 0;
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 12; ++j) count += f(i, j) > 0 ? 1 : 0;
  CHECK(mean_l0(sae, data) == static_cast<double>(count) / 50.0);
}

TEST_CASE("SaeRunner requires a norm constant for training parameterization") {
  auto params = init_params(4, 8, 3);
  CHECK_THROWS_AS(SaeRunner(params, std::nullopt), ConfigError);
  CHECK_NOTHROW(SaeRunner(params, 2.0));
  CHECK_NOTHROW(SaeRunner(fold_parameters(params, 2.0), std::nullopt));
}

TEST_CASE("training-parameterized and folded runners agree on raw rows") {
  Rng rng(21);
  auto params = init_params(6, 12, 31);
  for (int i = 0; i < 12; ++i) params.b_enc(i) = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (int i = 0; i < 6; ++i) params.b_dec(i) = static_cast<float>(rng.uniform(-0.3, 0.3));
  const double c = 2.5;
  SaeRunner training(params, c);
  SaeRunner folded(fold_parameters(params, c), std::nullopt);
  MatF rows(64, 6);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 6; ++j) rows(i, j) = static_cast<float>(rng.uniform(-4, 4));
  MatF a = training.reconstruct_rows(rows);
  MatF b = folded.reconstruct_rows(rows);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-5f);
}

// ----------------------------- delta loss -----------------------------

TEST_CASE("identity splice has delta exactly zero") {
  auto lm = toy_lm_random_init(tiny_config(), 3);
  auto seqs = tiny_sequences(12);
  for (Site site : {Site::attn_out_pre_wo, Site::mlp_out_post_norm, Site::resid_post_mlp}) {
    auto result = delta_loss(lm, {site, 1}, identity_transform(), seqs);
    CHECK(result.delta == 0.0);
    CHECK(result.base > 0.0);
  }
}

TEST_CASE("mean ablation hurts; per-position bookkeeping is consistent") {
  auto lm = toy_lm_random_init(tiny_config(), 9);
  auto seqs = tiny_sequences(16);
  SiteSpec spec{Site::resid_post_mlp, 1};
  VecF mean = site_mean(lm, spec, seqs);
  auto result = delta_loss(lm, spec, mean_ablation_transform(mean), seqs);
  CHECK(result.delta != 0.0);

  // sums over per-position buckets reproduce the aggregate means
  double base_sum = 0, spliced_sum = 0;
  int64_t count = 0;
  for (Eigen::Index t = 0; t < result.base_per_position.size(); ++t) {
    base_sum += result.base_per_position(t);
    spliced_sum += result.spliced_per_position(t);
    count += result.position_counts[static_cast<size_t>(t)];
  }
  CHECK(result.base == doctest::Approx(base_sum / count).epsilon(1e-12));
  CHECK(result.spliced == doctest::Approx(spliced_sum / count).epsilon(1e-12));
}

TEST_CASE("per-position curves mask special tokens and match naive recomputation") {
  auto lm = toy_lm_random_init(tiny_config(), 11);
  auto seqs = tiny_sequences(10);
  auto sae = SaeRunner(fold_parameters(init_params(8, 16, 7), 1.0), std::nullopt);
  SiteSpec spec{Site::mlp_out_post_norm, 0};
  auto curves = per_position_curves(lm, sae, spec, seqs);

  const auto S = static_cast<Eigen::Index>(seqs[0].size());
  REQUIRE(curves.recon_loss.size() == S);
  // position 0 holds BOS, the last position holds EOS: masked
  CHECK(curves.recon_counts[0] == 0);
  CHECK(curves.recon_counts[static_cast<size_t>(S - 1)] == 0);
  CHECK(curves.recon_loss(0) == 0.0);

  // naive recomputation: same reconstruction path, independent scalar
  // accumulation of the per-position bookkeeping
  ToyLmCacheT<float> cache;
  for (Eigen::Index t = 1; t + 1 < S; ++t) {
    double sum = 0;
    int64_t n = 0;
    for (const auto& seq : seqs) {
      if (is_special_token(seq[static_cast<size_t>(t)])) continue;
      toy_forward<float>(lm, seq, cache);
      const MatF& values = site_values(cache, spec);
      MatF recon = sae.reconstruct_rows(values);
      for (Eigen::Index j = 0; j < values.cols(); ++j) {
        const double r = static_cast<double>(values(t, j)) - recon(t, j);
        sum += r * r;
      }
      ++n;
    }
    REQUIRE(n == curves.recon_counts[static_cast<size_t>(t)]);
    CHECK(curves.recon_loss(t) == doctest::Approx(sum / n).epsilon(1e-12));
  }
}

// ----------------------------- frequencies -----------------------------

TEST_CASE("firing frequencies: extremes and brute-force recount") {
  auto lm = toy_lm_random_init(tiny_config(), 13);
  auto seqs = tiny_sequences(20);
  SiteSpec spec{Site::resid_post_mlp, 0};

  // thresholds above everything -> all zero, all mass in the zero bucket
  auto silent = identity_sae(8, 1e6f);
  auto hist0 = frequency_histogram(SaeRunner(silent, std::nullopt), lm, spec, seqs);
  CHECK(hist0.zero_count == 8);
  CHECK((hist0.frequency.array() == 0.0).all());

  // bias-dominated latent fires on every token
  auto always = identity_sae(8);
  always.b_enc.setConstant(100.0f);
  auto hist1 = frequency_histogram(SaeRunner(always, std::nullopt), lm, spec, seqs);
  CHECK((hist1.frequency.array() == 1.0).all());
  CHECK(hist1.bin_counts.back() == 8);  // all latents in the top bin

  // random SAE vs brute force; bin totals account for every latent
  auto params = fold_parameters(init_params(8, 24, 17), 1.0);
  SaeRunner sae(params, std::nullopt);
  auto hist = frequency_histogram(sae, lm, spec, seqs);
  MatF rows = collect_site_rows(lm, spec, seqs);
  REQUIRE(hist.token_count == rows.rows());
  MatF f = sae.encode_rows(rows);
  for (int j = 0; j < 24; ++j) {
    int64_t fires = 0;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) fires += f(i, j) > 0 ? 1 : 0;
    CHECK(hist.frequency(j) == static_cast<double>(fires) / hist.token_count);
  }
  int64_t binned = hist.zero_count;
  for (int64_t c : hist.bin_counts) binned += c;
  CHECK(binned == 24);
}

// ----------------------------- attribution -----------------------------

TEST_CASE("r_L0 closed-form cases") {
  VecX<double> uniform(5);
  uniform.setConstant(0.3);
  CHECK(std::abs(*r_l0_from_attribution(uniform) - 1.0) < 1e-9);

  VecX<double> negated(4);
  negated << 0.2, -0.2, 0.2, -0.2;  // uniform magnitudes, mixed signs
  CHECK(std::abs(*r_l0_from_attribution(negated) - 1.0) < 1e-9);

  VecX<double> single(6);
  single.setZero();
  single(2) = -0.7;
  CHECK(std::abs(*r_l0_from_attribution(single) - 1.0) < 1e-9);

  VecX<double> two(2);
  two << 0.9, 0.1;
  const double s = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(std::abs(*r_l0_from_attribution(two) - std::exp(s) / 2.0) < 1e-12);
  CHECK(*r_l0_from_attribution(two) == doctest::Approx(0.6921).epsilon(1e-3));

  VecX<double> zero = VecX<double>::Zero(3);
  CHECK_FALSE(r_l0_from_attribution(zero).has_value());
}

TEST_CASE("r_L0 bounds hold on random attribution vectors") {
  Rng rng(23);
  for (int trial = 0; trial < 10000; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(20));
    VecX<double> y(m);
    int64_t nonzero = 0;
    for (int i = 0; i < m; ++i) {
      y(i) = rng.uniform() < 0.3 ? 0.0 : rng.uniform(-2, 2);
      if (y(i) != 0.0) ++nonzero;
    }
    auto r = r_l0_from_attribution(y);
    if (nonzero == 0) {
      CHECK_FALSE(r.has_value());
      continue;
    }
    REQUIRE(r.has_value());
    CHECK(*r <= 1.0 + 1e-12);
    CHECK(*r >= 1.0 / static_cast<double>(nonzero) - 1e-12);
  }
}

TEST_CASE("attribution over the toy host produces in-range values") {
  auto lm = toy_lm_random_init(tiny_config(), 29);
  auto seqs = tiny_sequences(6);
  auto sae = SaeRunner(fold_parameters(init_params(8, 16, 3), 1.0), std::nullopt);
  auto result = attribution_r_l0(lm, sae, {Site::resid_post_mlp, 1}, seqs, 64);
  CHECK(result.per_token.size() + result.skipped > 0);
  for (double r : result.per_token) {
    CHECK(r > 0.0);
    CHECK(r <= 1.0 + 1e-12);
  }
}

// ----------------------------- reduced precision -----------------------------

TEST_CASE("reduced-precision FVU stays close to full precision") {
  Rng rng(31);
  auto params = fold_parameters(init_params(8, 32, 41), 1.0);
  MatF rows(256, 8);
  for (int i = 0; i < 256; ++i)
    for (int j = 0; j < 8; ++j) rows(i, j) = static_cast<float>(rng.uniform(-1, 1));
  const double full = fvu(SaeRunner(params, std::nullopt, false), rows);
  const double reduced = fvu(SaeRunner(params, std::nullopt, true), rows);
  CHECK(std::abs(full - reduced) < 1e-2);
}

// ----------------------------- report -----------------------------

TEST_CASE("report files are written with the expected keys") {
  auto dir = std::filesystem::temp_directory_path() / "saekit_eval_report";
  std::filesystem::create_directories(dir);
  EvalReport report;
  report.metadata["site"] = "resid_post_mlp";
  report.metadata["layer"] = "1";
  report.mean_l0 = 12.5;
  report.fvu = 0.07;
  DeltaLossResult dl;
  dl.base = 1.0;
  dl.spliced = 1.25;
  dl.delta = 0.25;
  dl.base_per_position = VecX<double>::Zero(3);
  dl.spliced_per_position = VecX<double>::Zero(3);
  dl.position_counts = {0, 4, 4};
  report.delta = dl;
  save_report(dir / "report", report);

  auto kv = read_key_value_file(dir / "report.txt");
  CHECK(kv.at("mean_l0") == format_double(12.5));
  CHECK(kv.at("fvu") == format_double(0.07));
  CHECK(kv.at("delta_loss") == format_double(0.25));
  CHECK(kv.at("site") == "resid_post_mlp");
  std::filesystem::remove_all(dir);
}
