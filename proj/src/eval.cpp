#include "saekit/eval.hpp"

#include <algorithm>
#include <cmath>

namespace saekit {

MatF bf16_round(const MatF& m) {
  return m.unaryExpr([](float x) { return bf16_round(x); });
}

VecF bf16_round(const VecF& v) {
  return v.unaryExpr([](float x) { return bf16_round(x); });
}

void bf16_round_in_place(SaeParamsT<float>& params) {
  params.w_enc = bf16_round(params.w_enc);
  params.b_enc = bf16_round(params.b_enc);
  params.w_dec = bf16_round(params.w_dec);
  params.b_dec = bf16_round(params.b_dec);
  params.theta = bf16_round(params.theta);
}

void bf16_round_in_place(ToyLm& lm) {
  lm.embed = bf16_round(lm.embed);
  for (auto& L : lm.layers) {
    L.g_pre_attn = bf16_round(L.g_pre_attn);
    L.g_post_attn = bf16_round(L.g_post_attn);
    L.g_pre_mlp = bf16_round(L.g_pre_mlp);
    L.g_post_mlp = bf16_round(L.g_post_mlp);
    L.wq = bf16_round(L.wq);
    L.wk = bf16_round(L.wk);
    L.wv = bf16_round(L.wv);
    L.wo = bf16_round(L.wo);
    L.w1 = bf16_round(L.w1);
    L.w2 = bf16_round(L.w2);
  }
  lm.g_final = bf16_round(lm.g_final);
  lm.unembed = bf16_round(lm.unembed);
}

// ----------------------------- SaeRunner -----------------------------

SaeRunner::SaeRunner(SaeParamsT<float> params, std::optional<double> norm_c,
                     bool reduced_precision)
    : params_(std::move(params)), reduced_(reduced_precision) {
  params_.validate();
  needs_norm_ = params_.parameterization == Parameterization::training;
  if (needs_norm_) {
    if (!norm_c || !(*norm_c > 0)) {
      throw ConfigError(
          "SaeRunner: training-parameterized SAE needs a positive normalization constant; "
          "fold the parameters or pass the constant");
    }
    c_ = *norm_c;
  }
  if (reduced_) bf16_round_in_place(params_);
}

MatF SaeRunner::encode_rows(const MatF& raw) const {
  MatF x = raw;
  if (needs_norm_) x /= static_cast<float>(c_);
  if (reduced_) x = bf16_round(x);
  MatF f = encode_batch(params_, x);
  if (reduced_) f = bf16_round(f);
  return f;
}

MatF SaeRunner::reconstruct_rows(const MatF& raw) const {
  MatF x_hat = decode_batch(params_, encode_rows(raw));
  if (needs_norm_) x_hat *= static_cast<float>(c_);
  if (reduced_) x_hat = bf16_round(x_hat);
  return x_hat;
}

// ----------------------------- scalar metrics -----------------------------

double mean_l0(const SaeRunner& sae, const MatF& raw_rows) {
  if (raw_rows.rows() == 0) throw ConfigError("mean_l0: empty input");
  MatF f = sae.encode_rows(raw_rows);
  return static_cast<double>((f.array() > 0.0f).count()) / static_cast<double>(raw_rows.rows());
}

double fvu(const SaeRunner& sae, const MatF& raw_rows, const MatF* raw_targets) {
  if (raw_rows.rows() < 2) throw ConfigError("fvu: need at least two rows");
  const MatF& targets = raw_targets ? *raw_targets : raw_rows;
  if (targets.rows() != raw_rows.rows()) throw std::invalid_argument("fvu: target rows mismatch");
  MatF recon = sae.reconstruct_rows(raw_rows);
  VecX<double> mean = targets.cast<double>().colwise().mean().transpose();
  double num = 0, den = 0;
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    VecX<double> t = targets.row(i).cast<double>().transpose();
    num += (t - recon.row(i).cast<double>().transpose()).squaredNorm();
    den += (t - mean).squaredNorm();
  }
  if (!(den > 0)) throw NumericError("fvu: zero-variance evaluation set");
  return num / den;
}

// ----------------------------- transforms -----------------------------

SiteTransformT<float> identity_transform() {
  return [](const MatF& x) { return x; };
}

SiteTransformT<float> sae_transform(const SaeRunner& sae) {
  return [sae](const MatF& x) { return sae.reconstruct_rows(x); };
}

SiteTransformT<float> transcoder_transform(const SaeRunner& sae) {
  if (sae.params().kind != SaeKind::transcoder) {
    throw ConfigError("transcoder_transform: SAE is not a transcoder");
  }
  return [sae](const MatF& m_in) { return sae.reconstruct_rows(m_in); };
}

SiteTransformT<float> mean_ablation_transform(VecF mean) {
  return [mean = std::move(mean)](const MatF& x) {
    MatF out(x.rows(), x.cols());
    out.rowwise() = mean.transpose();
    return out;
  };
}

MatF collect_site_rows(const ToyLm& host, const SiteSpec& site,
                       const std::vector<std::vector<uint16_t>>& sequences) {
  if (sequences.empty()) throw ConfigError("collect_site_rows: no sequences");
  std::vector<VecF> rows;
  ToyLmCacheT<float> cache;
  for (const auto& seq : sequences) {
    toy_forward<float>(host, seq, cache);
    const MatF& values = site_values(cache, site);
    for (size_t t = 0; t < seq.size(); ++t) {
      if (is_special_token(seq[t])) continue;
      rows.push_back(values.row(static_cast<Eigen::Index>(t)).transpose());
    }
  }
  if (rows.empty()) throw ConfigError("collect_site_rows: only special tokens");
  MatF out(static_cast<Eigen::Index>(rows.size()), rows[0].size());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return out;
}

std::pair<MatF, MatF> collect_transcoder_rows(
    const ToyLm& host, int layer, const std::vector<std::vector<uint16_t>>& sequences) {
  MatF inputs = collect_site_rows(host, {Site::mlp_in_post_norm, layer}, sequences);
  MatF targets = collect_site_rows(host, {Site::mlp_out_post_norm, layer}, sequences);
  return {std::move(inputs), std::move(targets)};
}

VecF site_mean(const ToyLm& host, const SiteSpec& site,
               const std::vector<std::vector<uint16_t>>& sequences) {
  MatF rows = collect_site_rows(host, site, sequences);
  return rows.cast<double>().colwise().mean().cast<float>().transpose();
}

// ----------------------------- delta loss -----------------------------

DeltaLossResult delta_loss(const ToyLm& host, const SiteSpec& site,
                           const SiteTransformT<float>& transform,
                           const std::vector<std::vector<uint16_t>>& sequences,
                           bool reduced_precision) {
  if (sequences.empty()) throw ConfigError("delta_loss: no sequences");
  const ToyLm* model = &host;
  ToyLm rounded;
  if (reduced_precision) {
    rounded = host;
    bf16_round_in_place(rounded);
    model = &rounded;
  }
  const auto S = static_cast<Eigen::Index>(sequences[0].size());
  DeltaLossResult out;
  out.base_per_position = VecX<double>::Zero(S - 1);
  out.spliced_per_position = VecX<double>::Zero(S - 1);
  out.position_counts.assign(static_cast<size_t>(S - 1), 0);

  double base_sum = 0, spliced_sum = 0;
  int64_t count = 0;
  ToyLmCacheT<float> cache;
  for (const auto& seq : sequences) {
    if (static_cast<Eigen::Index>(seq.size()) != S) {
      throw ConfigError("delta_loss: sequences must share one length");
    }
    toy_forward<float>(*model, seq, cache);
    auto base = lm_cross_entropy<float>(cache.logits, seq);
    auto spliced = forward_with_splice<float>(*model, seq, site, transform);
    for (Eigen::Index t = 0; t + 1 < S; ++t) {
      if (!base.counted[static_cast<size_t>(t)]) continue;
      out.base_per_position(t) += base.per_position(t);
      out.spliced_per_position(t) += spliced.per_position(t);
      ++out.position_counts[static_cast<size_t>(t)];
    }
    base_sum += base.mean * static_cast<double>(base.count);
    spliced_sum += spliced.mean * static_cast<double>(spliced.count);
    count += base.count;
  }
  if (count == 0) throw ConfigError("delta_loss: no countable positions");
  out.base = base_sum / static_cast<double>(count);
  out.spliced = spliced_sum / static_cast<double>(count);
  out.delta = out.spliced - out.base;
  return out;
}

// ----------------------------- per-position curves -----------------------------

PerPositionCurves per_position_curves(const ToyLm& host, const SaeRunner& sae,
                                      const SiteSpec& site,
                                      const std::vector<std::vector<uint16_t>>& sequences) {
  if (sequences.empty()) throw ConfigError("per_position_curves: no sequences");
  const auto S = static_cast<Eigen::Index>(sequences[0].size());
  PerPositionCurves out;
  out.recon_loss = VecX<double>::Zero(S);
  out.recon_counts.assign(static_cast<size_t>(S), 0);

  ToyLmCacheT<float> cache;
  for (const auto& seq : sequences) {
    toy_forward<float>(host, seq, cache);
    const MatF& values = site_values(cache, site);
    MatF recon = sae.reconstruct_rows(values);
    for (Eigen::Index t = 0; t < S; ++t) {
      if (is_special_token(seq[static_cast<size_t>(t)])) continue;  // masked, stays absent
      out.recon_loss(t) +=
          (values.row(t).cast<double>() - recon.row(t).cast<double>()).squaredNorm();
      ++out.recon_counts[static_cast<size_t>(t)];
    }
  }
  for (Eigen::Index t = 0; t < S; ++t) {
    if (out.recon_counts[static_cast<size_t>(t)] > 0) {
      out.recon_loss(t) /= static_cast<double>(out.recon_counts[static_cast<size_t>(t)]);
    }
  }

  auto dl = delta_loss(host, site, sae_transform(sae), sequences);
  out.delta_loss = VecX<double>::Zero(S - 1);
  out.loss_counts = dl.position_counts;
  for (Eigen::Index t = 0; t + 1 < S; ++t) {
    const auto c = dl.position_counts[static_cast<size_t>(t)];
    if (c > 0) {
      out.delta_loss(t) = (dl.spliced_per_position(t) - dl.base_per_position(t)) /
                          static_cast<double>(c);
    }
  }
  return out;
}

// ----------------------------- firing frequencies -----------------------------

FrequencyHistogram frequency_histogram(const SaeRunner& sae, const ToyLm& host,
                                       const SiteSpec& site,
                                       const std::vector<std::vector<uint16_t>>& sequences) {
  MatF rows = collect_site_rows(host, site, sequences);
  MatF f = sae.encode_rows(rows);
  const Eigen::Index M = f.cols();

  FrequencyHistogram out;
  out.token_count = rows.rows();
  out.frequency = VecX<double>::Zero(M);
  for (Eigen::Index j = 0; j < M; ++j) {
    const auto fires = static_cast<double>((f.col(j).array() > 0.0f).count());
    out.frequency(j) = fires / static_cast<double>(out.token_count);
  }

  constexpr int kBins = 64;
  out.bin_edges.resize(kBins + 1);
  const double lo = std::log10(1e-6), hi = 0.0;
  for (int b = 0; b <= kBins; ++b) {
    out.bin_edges[static_cast<size_t>(b)] = std::pow(10.0, lo + (hi - lo) * b / kBins);
  }
  out.bin_edges.back() = 1.0;
  out.bin_counts.assign(kBins, 0);
  for (Eigen::Index j = 0; j < M; ++j) {
    const double freq = out.frequency(j);
    if (freq == 0.0) {
      ++out.zero_count;
      continue;
    }
    // bins partition (0, 1]: everything at or below the first edge lands in bin 0
    int b = 0;
    while (b + 1 < kBins && freq > out.bin_edges[static_cast<size_t>(b + 1)]) ++b;
    ++out.bin_counts[static_cast<size_t>(b)];
  }
  return out;
}

// ----------------------------- attribution -----------------------------

std::optional<double> r_l0_from_attribution(const VecX<double>& y) {
  double sum_abs = 0;
  int64_t nonzero = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) != 0.0) {
      sum_abs += std::abs(y(i));
      ++nonzero;
    }
  }
  if (nonzero == 0 || !(sum_abs > 0)) return std::nullopt;
  double entropy = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) == 0.0) continue;
    const double p = std::abs(y(i)) / sum_abs;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy) / static_cast<double>(nonzero);
}

AttributionResult attribution_r_l0(const ToyLm& host, const SaeRunner& sae, const SiteSpec& site,
                                   const std::vector<std::vector<uint16_t>>& sequences,
                                   int64_t max_tokens) {
  AttributionResult out;
  ToyLmCacheT<float> cache;
  double sum = 0;
  for (const auto& seq : sequences) {
    if (static_cast<int64_t>(out.per_token.size()) >= max_tokens) break;
    toy_forward<float>(host, seq, cache);
    const MatF& values = site_values(cache, site);
    for (size_t t = 0; t + 1 < seq.size(); ++t) {
      if (static_cast<int64_t>(out.per_token.size()) >= max_tokens) break;
      if (is_special_token(seq[t]) || is_special_token(seq[t + 1])) continue;
      MatF row = values.row(static_cast<Eigen::Index>(t));
      VecF f = sae.encode_rows(row).row(0).transpose();
      VecF grad = attribution_gradient<float>(host, cache, site,
                                              static_cast<Eigen::Index>(t));
      VecX<double> y = f.cast<double>().cwiseProduct(
          (sae.params().w_dec.transpose() * grad).cast<double>());
      auto r = r_l0_from_attribution(y);
      if (!r) {
        ++out.skipped;  // all-zero attribution: reported as missing
        continue;
      }
      out.per_token.push_back(*r);
      sum += *r;
    }
  }
  out.mean = out.per_token.empty() ? 0.0 : sum / static_cast<double>(out.per_token.size());
  return out;
}

// ----------------------------- report -----------------------------

void save_report(const std::filesystem::path& prefix, const EvalReport& report) {
  KeyValueMap kv = report.metadata;
  if (report.mean_l0) kv["mean_l0"] = format_double(*report.mean_l0);
  if (report.fvu) kv["fvu"] = format_double(*report.fvu);
  if (report.delta) {
    kv["base_loss"] = format_double(report.delta->base);
    kv["spliced_loss"] = format_double(report.delta->spliced);
    kv["delta_loss"] = format_double(report.delta->delta);
  }
  if (report.mean_ablation_delta) {
    kv["mean_ablation_delta"] = format_double(*report.mean_ablation_delta);
  }
  if (report.attribution) {
    kv["r_l0_mean"] = format_double(report.attribution->mean);
    kv["r_l0_tokens"] = std::to_string(report.attribution->per_token.size());
    kv["r_l0_skipped"] = std::to_string(report.attribution->skipped);
  }
  if (report.histogram) {
    kv["freq_token_count"] = std::to_string(report.histogram->token_count);
    kv["freq_zero_latents"] = std::to_string(report.histogram->zero_count);
  }
  auto main_path = prefix;
  main_path += ".txt";
  write_key_value_file(main_path, kv);

  if (report.per_position) {
    std::string tsv = "position\trecon_loss\trecon_count\tdelta_loss\tloss_count\n";
    const auto& pp = *report.per_position;
    for (Eigen::Index t = 0; t < pp.recon_loss.size(); ++t) {
      tsv += std::to_string(t);
      tsv += '\t';
      tsv += format_double(pp.recon_loss(t));
      tsv += '\t';
      tsv += std::to_string(pp.recon_counts[static_cast<size_t>(t)]);
      tsv += '\t';
      if (t < pp.delta_loss.size()) {
        tsv += format_double(pp.delta_loss(t));
        tsv += '\t';
        tsv += std::to_string(pp.loss_counts[static_cast<size_t>(t)]);
      } else {
        tsv += "-\t-";
      }
      tsv += '\n';
    }
    auto path = prefix;
    path += "_per_position.tsv";
    atomic_write_file(path, tsv);
  }

  if (report.histogram) {
    std::string tsv = "bin_lo\tbin_hi\tcount\n";
    tsv += "0\t0\t" + std::to_string(report.histogram->zero_count) + "\n";
    for (size_t b = 0; b + 1 < report.histogram->bin_edges.size(); ++b) {
      tsv += format_double(report.histogram->bin_edges[b]);
      tsv += '\t';
      tsv += format_double(report.histogram->bin_edges[b + 1]);
      tsv += '\t';
      tsv += std::to_string(report.histogram->bin_counts[b]);
      tsv += '\n';
    }
    auto path = prefix;
    path += "_freq_hist.tsv";
    atomic_write_file(path, tsv);
  }
}

}  // namespace saekit
