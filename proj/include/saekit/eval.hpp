#pragma once

// Evaluation metrics: mean L0, FVU, delta LM loss via splicing, per-position
// curves, latent firing frequencies, attribution-weighted uniformity (r_L0),
// and bfloat16 reduced-precision inference.

#include "saekit/core.hpp"
#include "saekit/shard.hpp"
#include "saekit/toyhost.hpp"

#include <optional>
#include <vector>

namespace saekit {

// Round-to-nearest-even truncation of a float32 to bfloat16, re-expanded to
// float32. NaN passes through; overflow saturates to infinity as in bf16.
inline float bf16_round(float x) {
  uint32_t bits;
  std::memcpy(&bits, &x, 4);
  if ((bits & 0x7fffffffu) > 0x7f800000u) return x;  // NaN
  bits += 0x7fffu + ((bits >> 16) & 1u);
  bits &= 0xffff0000u;
  float out;
  std::memcpy(&out, &bits, 4);
  return out;
}

MatF bf16_round(const MatF& m);
VecF bf16_round(const VecF& v);
void bf16_round_in_place(SaeParamsT<float>& params);
void bf16_round_in_place(ToyLm& lm);

// Applies an SAE or transcoder to raw (unnormalized) activation rows.
// Training-parameterized weights need the normalization constant; folded
// (inference) weights consume raw rows directly. In reduced precision the
// weights and the values crossing each stage boundary are bf16-rounded.
class SaeRunner {
 public:
  SaeRunner(SaeParamsT<float> params, std::optional<double> norm_c, bool reduced_precision = false);

  MatF encode_rows(const MatF& raw) const;       // B x M latents
  MatF reconstruct_rows(const MatF& raw) const;  // B x n, raw space
  const SaeParamsT<float>& params() const { return params_; }
  bool reduced() const { return reduced_; }

 private:
  SaeParamsT<float> params_;
  double c_ = 1.0;
  bool needs_norm_ = false;
  bool reduced_ = false;
};

// ----------------------------- scalar metrics -----------------------------

double mean_l0(const SaeRunner& sae, const MatF& raw_rows);

// mean ||t - t_hat||^2 / mean ||t - t_bar||^2 with t_bar the dataset mean of
// the targets over the evaluation set. Targets default to the inputs.
double fvu(const SaeRunner& sae, const MatF& raw_rows, const MatF* raw_targets = nullptr);

// ----------------------------- splice transforms -----------------------------

SiteTransformT<float> identity_transform();
SiteTransformT<float> sae_transform(const SaeRunner& sae);
// transcoder: consumes mlp_in_post_norm rows, emits the predicted MLP output
SiteTransformT<float> transcoder_transform(const SaeRunner& sae);
SiteTransformT<float> mean_ablation_transform(VecF site_mean);

// Mean site activation over non-special tokens.
VecF site_mean(const ToyLm& host, const SiteSpec& site,
               const std::vector<std::vector<uint16_t>>& sequences);

// Collects site rows for non-special input tokens across sequences.
MatF collect_site_rows(const ToyLm& host, const SiteSpec& site,
                       const std::vector<std::vector<uint16_t>>& sequences);
// Paired (mlp_in_post_norm, mlp_out_post_norm) rows for transcoder work.
std::pair<MatF, MatF> collect_transcoder_rows(const ToyLm& host, int layer,
                                              const std::vector<std::vector<uint16_t>>& sequences);

// ----------------------------- delta LM loss -----------------------------

struct DeltaLossResult {
  double base = 0;
  double spliced = 0;
  double delta = 0;  // spliced - base
  // per-position sums over counted positions (size seq_len - 1)
  VecX<double> base_per_position;
  VecX<double> spliced_per_position;
  std::vector<int64_t> position_counts;
};

// Cross-entropy increase when transform(activation) replaces the site value
// during the forward pass; special tokens are masked out of the aggregation.
// With reduced precision the host weights are bf16-rounded first.
DeltaLossResult delta_loss(const ToyLm& host, const SiteSpec& site,
                           const SiteTransformT<float>& transform,
                           const std::vector<std::vector<uint16_t>>& sequences,
                           bool reduced_precision = false);

// ----------------------------- per-position curves -----------------------------

struct PerPositionCurves {
  VecX<double> recon_loss;          // mean ||x - x_hat||^2 at each position
  std::vector<int64_t> recon_counts;
  VecX<double> delta_loss;          // spliced - base CE at each position
  std::vector<int64_t> loss_counts;
};

PerPositionCurves per_position_curves(const ToyLm& host, const SaeRunner& sae,
                                      const SiteSpec& site,
                                      const std::vector<std::vector<uint16_t>>& sequences);

// ----------------------------- firing frequencies -----------------------------

struct FrequencyHistogram {
  VecX<double> frequency;            // per latent: fires / token_count
  int64_t token_count = 0;
  std::vector<double> bin_edges;     // 65 log-spaced edges over [1e-6, 1]
  std::vector<int64_t> bin_counts;   // 64 bins partitioning (0, 1]
  int64_t zero_count = 0;            // latents that never fire
};

FrequencyHistogram frequency_histogram(const SaeRunner& sae, const ToyLm& host,
                                       const SiteSpec& site,
                                       const std::vector<std::vector<uint16_t>>& sequences);

// ----------------------------- attribution r_L0 -----------------------------

// r_L0 = exp(entropy(p)) / ||y||_0 with p = |y| / sum|y| over nonzero entries.
// Empty when y is all zero.
std::optional<double> r_l0_from_attribution(const VecX<double>& y);

struct AttributionResult {
  std::vector<double> per_token;  // r_L0 for each scored token
  int64_t skipped = 0;            // tokens with all-zero attribution
  double mean = 0;
};

// y := f(x) .* W_dec^T grad_x L with L the mean-centered logit of the correct
// next token, grad taken at the SAE input site by the host's analytic
// backward; the SAE enters only through f and W_dec.
AttributionResult attribution_r_l0(const ToyLm& host, const SaeRunner& sae, const SiteSpec& site,
                                   const std::vector<std::vector<uint16_t>>& sequences,
                                   int64_t max_tokens = 4096);

// ----------------------------- report -----------------------------

struct EvalReport {
  KeyValueMap metadata;  // model, site, layer, width, lambda, precision, seeds
  std::optional<double> mean_l0;
  std::optional<double> fvu;
  std::optional<DeltaLossResult> delta;
  std::optional<double> mean_ablation_delta;
  std::optional<PerPositionCurves> per_position;
  std::optional<FrequencyHistogram> histogram;
  std::optional<AttributionResult> attribution;
};

// Writes <prefix>.txt (key=value) plus tabular sidecars:
// <prefix>_per_position.tsv, <prefix>_freq_hist.tsv.
void save_report(const std::filesystem::path& prefix, const EvalReport& report);

}  // namespace saekit
