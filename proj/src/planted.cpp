#include "saekit/planted.hpp"

#include <algorithm>

namespace saekit {

PlantedDictionary PlantedDictionary::random(int n, int features, double activation_prob,
                                            uint64_t seed) {
  if (n < 1 || features < 1) throw ConfigError("PlantedDictionary: need n >= 1 and F >= 1");
  if (!(activation_prob > 0.0 && activation_prob < 1.0)) {
    throw ConfigError("PlantedDictionary: activation probability must be in (0, 1)");
  }
  Rng rng(seed);
  PlantedDictionary dict;
  dict.activation_prob = activation_prob;
  dict.directions.resize(features, n);
  for (int f = 0; f < features; ++f) {
    VecX<double> d(n);
    for (int j = 0; j < n; ++j) d(j) = rng.normal();
    d /= d.norm();
    dict.directions.row(f) = d.cast<float>().transpose();
  }
  return dict;
}

PlantedSample generate_planted_activations(const PlantedDictionary& dict, int64_t count,
                                           uint64_t seed) {
  if (count < 1) throw ConfigError("generate_planted_activations: count must be >= 1");
  const auto F = dict.feature_count();
  const auto n = dict.dim();
  Rng rng(seed);
  PlantedSample out;
  out.rows = MatF::Zero(count, n);
  out.codes.resize(count);
  for (int64_t r = 0; r < count; ++r) {
    VecX<double> row = VecX<double>::Zero(n);
    for (int f = 0; f < F; ++f) {
      if (rng.uniform() < dict.activation_prob) {
        const double a = rng.uniform(dict.magnitude_lo, dict.magnitude_hi);
        row += a * dict.directions.row(f).cast<double>().transpose();
        out.codes[r].emplace_back(f, static_cast<float>(a));
      }
    }
    if (dict.noise_scale > 0.0) {
      for (int j = 0; j < n; ++j) row(j) += dict.noise_scale * rng.normal();
    }
    out.rows.row(r) = row.cast<float>().transpose();
  }
  return out;
}

std::vector<RecoveryMatch> match_dictionary(const MatF& w_dec, const MatF& directions) {
  const int F = static_cast<int>(directions.rows());
  const int M = static_cast<int>(w_dec.cols());
  MatR<double> cos(F, M);
  for (int f = 0; f < F; ++f) {
    VecX<double> d = directions.row(f).cast<double>().transpose();
    const double dn = d.norm();
    for (int m = 0; m < M; ++m) {
      VecX<double> c = w_dec.col(m).cast<double>();
      const double cn = c.norm();
      cos(f, m) = (dn > 0 && cn > 0) ? d.dot(c) / (dn * cn) : 0.0;
    }
  }
  struct Pair {
    double cosine;
    int f, m;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<size_t>(F) * M);
  for (int f = 0; f < F; ++f)
    for (int m = 0; m < M; ++m) pairs.push_back({cos(f, m), f, m});
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    if (a.f != b.f) return a.f < b.f;
    return a.m < b.m;
  });
  std::vector<RecoveryMatch> matches(F);
  std::vector<bool> f_used(F, false), m_used(M, false);
  int matched = 0;
  for (const Pair& p : pairs) {
    if (matched == std::min(F, M)) break;
    if (f_used[p.f] || m_used[p.m]) continue;
    f_used[p.f] = true;
    m_used[p.m] = true;
    matches[p.f] = {p.f, p.m, p.cosine};
    ++matched;
  }
  return matches;
}

double recovery_score(const MatF& w_dec, const MatF& directions, double min_cosine) {
  auto matches = match_dictionary(w_dec, directions);
  int good = 0;
  for (const auto& m : matches) {
    if (m.column >= 0 && m.cosine > min_cosine) ++good;
  }
  return static_cast<double>(good) / static_cast<double>(directions.rows());
}

}  // namespace saekit
