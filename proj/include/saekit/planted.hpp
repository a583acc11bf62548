#pragma once

// Synthetic planted-dictionary data: rows are sparse positive combinations of
// known unit directions plus optional isotropic noise. Serves as desk-scale
// ground truth for dictionary-recovery scoring.

#include "saekit/common.hpp"

#include <utility>
#include <vector>

namespace saekit {

struct PlantedDictionary {
  MatF directions;         // F x n, each row a unit vector
  double activation_prob = 0.05;
  double magnitude_lo = 0.5;   // active magnitudes drawn uniformly from [lo, hi]
  double magnitude_hi = 1.5;
  double noise_scale = 0.0;    // stddev of per-coordinate gaussian noise

  Eigen::Index feature_count() const { return directions.rows(); }
  Eigen::Index dim() const { return directions.cols(); }

  static PlantedDictionary random(int n, int features, double activation_prob, uint64_t seed);
};

struct PlantedSample {
  MatF rows;  // count x n
  // ground-truth codes: per row, the (feature index, magnitude) pairs
  std::vector<std::vector<std::pair<int, float>>> codes;
};

PlantedSample generate_planted_activations(const PlantedDictionary& dict, int64_t count,
                                           uint64_t seed);

// Greedy maximum-cosine matching of planted directions to decoder columns;
// every direction is matched to its best still-unused column, best pairs first.
struct RecoveryMatch {
  int feature = -1;
  int column = -1;
  double cosine = 0.0;
};

std::vector<RecoveryMatch> match_dictionary(const MatF& w_dec, const MatF& directions);

// Fraction of planted directions whose matched column exceeds the cosine cut.
double recovery_score(const MatF& w_dec, const MatF& directions, double min_cosine);

}  // namespace saekit
