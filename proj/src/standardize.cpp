#include "saekit/standardize.hpp"

#include <cmath>

namespace saekit {

NormConstant estimate_norm_constant(const RowSource& rows, int64_t sample_count) {
  if (sample_count < 1) throw ConfigError("estimate_norm_constant: sample_count must be >= 1");
  VecF row;
  double sum_sq = 0.0;
  int64_t seen = 0;
  while (seen < sample_count && rows(row)) {
    sum_sq += row.cast<double>().squaredNorm();
    ++seen;
  }
  if (seen == 0) throw ConfigError("estimate_norm_constant: empty activation stream");
  const double c = std::sqrt(sum_sq / static_cast<double>(seen));
  if (!(c > 0.0) || !std::isfinite(c)) {
    throw NumericError("estimate_norm_constant: degenerate stream (mean squared norm = " +
                       format_double(sum_sq / static_cast<double>(seen)) + ")");
  }
  return NormConstant{c, seen};
}

}  // namespace saekit
