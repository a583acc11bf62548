#pragma once

// Parameter standardization: estimate the fixed input-normalization scalar C
// and fold it, together with the pre-encoder bias, into the SAE parameters so
// raw (unnormalized) activations can be fed directly at inference:
//   b_enc' = C b_enc - C W_enc b_dec   (the W_enc b_dec term only exists when
//   b_dec' = C b_dec                    the encoder used a pre-encoder bias)
//   theta' = C theta

#include "saekit/common.hpp"
#include "saekit/core.hpp"

#include <functional>

namespace saekit {

struct NormConstant {
  double c = 0.0;
  int64_t sample_count = 0;
};

// Row source contract: fill `row` and return true, or return false when the
// stream is exhausted. All rows must share one dimension.
using RowSource = std::function<bool(VecF& row)>;

// c = sqrt(mean ||x||^2) over up to sample_count rows, so E||x/c||^2 = 1.
NormConstant estimate_norm_constant(const RowSource& rows, int64_t sample_count);

template <class T>
SaeParamsT<T> fold_parameters(const SaeParamsT<T>& params, double c) {
  if (c <= 0.0) throw ConfigError("fold_parameters: c must be > 0");
  if (params.parameterization == Parameterization::inference) {
    throw ConfigError("fold_parameters: parameters are already in inference parameterization");
  }
  params.validate();
  SaeParamsT<T> out = params;
  out.parameterization = Parameterization::inference;
  // folded biases computed in 64-bit, stored back at T
  VecX<double> b_enc = c * params.b_enc.template cast<double>();
  if (params.uses_pre_encoder_bias()) {
    b_enc.noalias() -= c * (params.w_enc.template cast<double>() *
                            params.b_dec.template cast<double>());
  }
  out.b_enc = b_enc.template cast<T>();
  out.b_dec = (c * params.b_dec.template cast<double>()).template cast<T>();
  out.theta = (c * params.theta.template cast<double>()).template cast<T>();
  return out;
}

}  // namespace saekit
