#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "saekit/standardize.hpp"
#include "saekit/trainer.hpp"

#include <cmath>
#include <cstring>
#include <set>

using namespace saekit;

namespace {

RowSource rows_from(const MatF& m) {
  auto i = std::make_shared<Eigen::Index>(0);
  return [m, i](VecF& row) {
    if (*i >= m.rows()) return false;
    row = m.row((*i)++).transpose();
    return true;
  };
}

std::set<int> active_set(const VecF& f) {
  std::set<int> s;
  for (int i = 0; i < f.size(); ++i)
    if (f(i) > 0.0f) s.insert(i);
  return s;
}

}  // namespace

TEST_CASE("constant-norm stream gives that norm") {
  MatF m = MatF::Zero(6, 3);
  for (int i = 0; i < 6; ++i) m(i, i % 3) = 2.0f;  // every row has norm 2
  auto nc = estimate_norm_constant(rows_from(m), 6);
  CHECK(nc.c == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(nc.sample_count == 6);
}

TEST_CASE("mixed norms 1 and 3 give sqrt(5)") {
  MatF m = MatF::Zero(4, 2);
  m(0, 0) = 1.0f;
  m(1, 1) = 3.0f;
  m(2, 0) = -1.0f;
  m(3, 1) = -3.0f;
  auto nc = estimate_norm_constant(rows_from(m), 4);
  CHECK(nc.c == doctest::Approx(std::sqrt(5.0)).epsilon(1e-12));
}

TEST_CASE("sample_count caps how much of the stream is read") {
  MatF m = MatF::Zero(10, 2);
  for (int i = 0; i < 10; ++i) m(i, 0) = i < 5 ? 1.0f : 100.0f;
  auto nc = estimate_norm_constant(rows_from(m), 5);
  CHECK(nc.c == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(nc.sample_count == 5);
}

TEST_CASE("degenerate streams are rejected") {
  MatF zeros = MatF::Zero(5, 3);
  CHECK_THROWS_AS(estimate_norm_constant(rows_from(zeros), 5), NumericError);
  MatF empty(0, 3);
  CHECK_THROWS_AS(estimate_norm_constant(rows_from(empty), 5), ConfigError);
  CHECK_THROWS_AS(estimate_norm_constant(rows_from(zeros), 0), ConfigError);
}

TEST_CASE("normalized stream has unit mean squared norm") {
  Rng rng(4);
  MatF m(200, 8);
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 8; ++j) m(i, j) = static_cast<float>(rng.uniform(-3, 3));
  auto nc = estimate_norm_constant(rows_from(m), 200);
  double mean_sq = 0;
  for (int i = 0; i < 200; ++i) {
    mean_sq += (m.row(i).cast<double>() / nc.c).squaredNorm();
  }
  mean_sq /= 200;
  CHECK(mean_sq == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("folding with c=1 and zero pre-encoder bias is the identity") {
  auto p = init_params(4, 8, 3);
  CHECK((p.b_dec.array() == 0.0f).all());
  auto q = fold_parameters(p, 1.0);
  CHECK(q.parameterization == Parameterization::inference);
  CHECK(std::memcmp(q.w_enc.data(), p.w_enc.data(), sizeof(float) * 32) == 0);
  CHECK(std::memcmp(q.b_enc.data(), p.b_enc.data(), sizeof(float) * 8) == 0);
  CHECK(std::memcmp(q.w_dec.data(), p.w_dec.data(), sizeof(float) * 32) == 0);
  CHECK(std::memcmp(q.b_dec.data(), p.b_dec.data(), sizeof(float) * 4) == 0);
  CHECK(std::memcmp(q.theta.data(), p.theta.data(), sizeof(float) * 8) == 0);
}

TEST_CASE("folded thresholds scale by exactly c") {
  auto p = init_params(4, 8, 5);
  Rng rng(6);
  for (int i = 0; i < 8; ++i) p.theta(i) = static_cast<float>(rng.uniform(0.001, 0.1));
  const double c = 2.75;
  auto q = fold_parameters(p, c);
  for (int i = 0; i < 8; ++i) {
    CHECK(static_cast<double>(q.theta(i)) / p.theta(i) == doctest::Approx(c).epsilon(1e-6));
  }
}

TEST_CASE("folding is rejected on already-folded parameters and bad c") {
  auto p = init_params(4, 8, 7);
  auto q = fold_parameters(p, 2.0);
  CHECK_THROWS_AS(fold_parameters(q, 2.0), ConfigError);
  CHECK_THROWS_AS(fold_parameters(p, 0.0), ConfigError);
  CHECK_THROWS_AS(fold_parameters(p, -1.0), ConfigError);
}

TEST_CASE("folded SAE equals the normalize/subtract/encode/decode/rescale pipeline") {
  // randomized training-parameterization SAE with nonzero biases
  Rng rng(11);
  auto p = init_params(4, 8, 19);
  for (int i = 0; i < 8; ++i) {
    p.b_enc(i) = static_cast<float>(rng.uniform(-0.2, 0.2));
    p.theta(i) = static_cast<float>(rng.uniform(0.01, 0.3));
  }
  for (int i = 0; i < 4; ++i) p.b_dec(i) = static_cast<float>(rng.uniform(-0.5, 0.5));
  const double c = 3.7;
  auto folded = fold_parameters(p, c);

  int identical_sets = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    VecF x_raw(4);
    for (int i = 0; i < 4; ++i) x_raw(i) = static_cast<float>(rng.uniform(-4, 4));

    // training pipeline: normalize, encode (subtracts b_dec), decode, rescale
    VecF x = x_raw / static_cast<float>(c);
    VecF f_train = encode(p, x);
    VecF x_hat_raw = decode(p, f_train) * static_cast<float>(c);

    VecF f_fold = encode(folded, x_raw);
    VecF x_hat_fold = decode(folded, f_fold);

    CHECK((x_hat_fold - x_hat_raw).cwiseAbs().maxCoeff() < 1e-5f);
    if (active_set(f_train) == active_set(f_fold)) ++identical_sets;
  }
  CHECK(identical_sets == 1000);
}

TEST_CASE("transcoder folding scales the encoder bias without a b_dec term") {
  auto p = init_params(4, 8, 23, SaeKind::transcoder);
  Rng rng(8);
  for (int i = 0; i < 8; ++i) p.b_enc(i) = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (int i = 0; i < 4; ++i) p.b_dec(i) = static_cast<float>(rng.uniform(-0.5, 0.5));
  const double c = 2.0;
  auto folded = fold_parameters(p, c);
  for (int i = 0; i < 8; ++i) {
    CHECK(folded.b_enc(i) == doctest::Approx(c * p.b_enc(i)).epsilon(1e-6));
  }

  // end to end: folded transcoder on raw inputs matches normalize->run->rescale
  for (int trial = 0; trial < 200; ++trial) {
    VecF x_raw(4);
    for (int i = 0; i < 4; ++i) x_raw(i) = static_cast<float>(rng.uniform(-4, 4));
    VecF y_train = decode(p, encode(p, VecF(x_raw / 2.0f))) * 2.0f;
    VecF y_fold = decode(folded, encode(folded, x_raw));
    CHECK((y_fold - y_train).cwiseAbs().maxCoeff() < 1e-5f);
  }
}
