#include "cli_common.hpp"

#include "saekit/eval.hpp"

#include <algorithm>

namespace saekit::cli {

namespace {

void cmd_eval(const std::string& host_path, const std::string& corpus_path,
              const std::string& sae_path, const std::string& site_name, int layer,
              const std::string& out_prefix, const std::string& norm_path, double norm_c,
              const std::string& precision, int64_t sequences, int64_t freq_sequences,
              int64_t attr_tokens, bool with_frequencies, bool with_attribution,
              bool with_per_position, bool skip_splice) {
  if (precision != "full" && precision != "bf16") {
    throw ConfigError("eval: --precision must be full or bf16");
  }
  const bool reduced = precision == "bf16";

  ToyLm host = load_toy_lm(host_path);
  auto corpus = load_corpus(corpus_path);
  auto params = load_sae(sae_path);
  auto c = resolve_norm(norm_path, norm_c, /*optional=*/true);
  SaeRunner runner(params, c, reduced);

  const bool transcoder = params.kind == SaeKind::transcoder;
  if (transcoder) host = fold_rms_gains(host);
  const ToyLm* splice_host = &host;
  ToyLm rounded_host;
  if (reduced) {
    rounded_host = host;
    bf16_round_in_place(rounded_host);
    splice_host = &rounded_host;
  }

  SiteSpec spec{transcoder ? Site::mlp_in_post_norm : site_from_string(site_name), layer};
  if (layer < 0 || layer >= host.cfg.layers) throw ConfigError("eval: layer out of range");

  std::vector<std::vector<uint16_t>> eval_seqs(
      corpus.sequences.begin(),
      corpus.sequences.begin() +
          std::min<size_t>(corpus.sequences.size(), static_cast<size_t>(sequences)));

  EvalReport report;
  report.metadata["host"] = host_path;
  report.metadata["sae"] = sae_path;
  report.metadata["site"] = to_string(spec.site);
  report.metadata["layer"] = std::to_string(layer);
  report.metadata["width"] = std::to_string(params.latent_dim());
  report.metadata["kind"] = to_string(params.kind);
  report.metadata["parameterization"] = to_string(params.parameterization);
  report.metadata["precision"] = precision;
  report.metadata["sequences"] = std::to_string(eval_seqs.size());

  // reconstruction-space metrics over collected site rows
  MatF rows = collect_site_rows(*splice_host, spec, eval_seqs);
  report.mean_l0 = mean_l0(runner, rows);
  if (transcoder) {
    MatF targets =
        collect_site_rows(*splice_host, {Site::mlp_out_post_norm, layer}, eval_seqs);
    report.fvu = fvu(runner, rows, &targets);
  } else {
    report.fvu = fvu(runner, rows);
  }

  if (!skip_splice) {
    auto transform = transcoder ? transcoder_transform(runner) : sae_transform(runner);
    report.delta = delta_loss(*splice_host, spec, transform, eval_seqs, reduced);
    VecF mean = site_mean(*splice_host, spec, eval_seqs);
    if (transcoder) {
      // ablate the MLP output with its mean, ignoring the transform input
      VecF out_mean = site_mean(*splice_host, {Site::mlp_out_post_norm, layer}, eval_seqs);
      auto ablate = [out_mean](const MatF& x) {
        MatF out(x.rows(), out_mean.size());
        out.rowwise() = out_mean.transpose();
        return out;
      };
      report.mean_ablation_delta =
          delta_loss(*splice_host, spec, ablate, eval_seqs, reduced).delta;
    } else {
      report.mean_ablation_delta =
          delta_loss(*splice_host, spec, mean_ablation_transform(mean), eval_seqs, reduced)
              .delta;
    }
  }

  if (with_per_position && !transcoder) {
    report.per_position = per_position_curves(*splice_host, runner, spec, eval_seqs);
  }
  if (with_frequencies) {
    std::vector<std::vector<uint16_t>> freq_seqs(
        corpus.sequences.begin(),
        corpus.sequences.begin() +
            std::min<size_t>(corpus.sequences.size(), static_cast<size_t>(freq_sequences)));
    report.histogram = frequency_histogram(runner, *splice_host, spec, freq_seqs);
  }
  if (with_attribution && !transcoder) {
    report.attribution = attribution_r_l0(*splice_host, runner, spec, eval_seqs, attr_tokens);
  }

  save_report(out_prefix, report);

  Manifest m;
  m.command = "eval";
  m.config = {{"host", host_path},
              {"corpus", corpus_path},
              {"sae", sae_path},
              {"site", site_name},
              {"layer", std::to_string(layer)},
              {"out", out_prefix},
              {"precision", precision},
              {"sequences", std::to_string(sequences)}};
  m.inputs = {host_path, corpus_path, sae_path};
  m.outputs = {out_prefix + ".txt"};
  write_manifest(out_prefix + ".txt", m);
  note("eval: mean_l0 " + format_double(*report.mean_l0) + " fvu " +
       format_double(*report.fvu) +
       (report.delta ? " delta_loss " + format_double(report.delta->delta) : ""));
}

// Aggregates eval reports (key=value files) into a sparsity-fidelity table.
void cmd_report(const std::string& in_dir, const std::string& out) {
  struct Row {
    double lambda;
    std::string l0, delta, fvu;
  };
  std::vector<Row> rows;
  for (const auto& entry : std::filesystem::directory_iterator(in_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    KeyValueMap kv;
    try {
      kv = read_key_value_file(entry.path());
    } catch (const std::exception&) {
      continue;
    }
    if (!kv.count("mean_l0") && !kv.count("fvu")) continue;
    Row row;
    row.lambda = kv.count("lambda") ? parse_double(kv["lambda"]) : 0.0;
    row.l0 = kv.count("mean_l0") ? kv["mean_l0"] : "-";
    row.delta = kv.count("delta_loss") ? kv["delta_loss"] : "-";
    row.fvu = kv.count("fvu") ? kv["fvu"] : "-";
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("report: no eval reports found in " + in_dir);
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.lambda < b.lambda;
  });
  std::string tsv = "lambda\tmean_l0\tdelta_loss\tfvu\n";
  for (const auto& row : rows) {
    tsv += format_double(row.lambda);
    tsv += '\t';
    tsv += row.l0;
    tsv += '\t';
    tsv += row.delta;
    tsv += '\t';
    tsv += row.fvu;
    tsv += '\n';
  }
  atomic_write_file(out, tsv);

  Manifest m;
  m.command = "report";
  m.config = {{"in_dir", in_dir}, {"out", out}};
  m.outputs = {out};
  write_manifest(out, m);
  note("report: wrote " + out + " (" + std::to_string(rows.size()) + " rows)");
}

}  // namespace

void register_eval_commands(CLI::App& app) {
  {
    struct Opt {
      std::string host, corpus, sae, site = "resid_post_mlp", out, norm;
      std::string precision = "full";
      double norm_c = 0;
      int layer = 0;
      int64_t sequences = 256, freq_sequences = 1000, attr_tokens = 2048;
      bool with_frequencies = false, with_attribution = false, with_per_position = false;
      bool skip_splice = false;
    };
    auto opt = std::make_shared<Opt>();
    auto* cmd = app.add_subcommand("eval", "Evaluate an SAE against the host");
    cmd->add_option("--host", opt->host)->required();
    cmd->add_option("--corpus", opt->corpus)->required();
    cmd->add_option("--sae", opt->sae)->required();
    cmd->add_option("--site", opt->site);
    cmd->add_option("--layer", opt->layer)->default_val(0);
    cmd->add_option("--out", opt->out, "report path prefix")->required();
    cmd->add_option("--norm", opt->norm);
    cmd->add_option("--norm-c", opt->norm_c);
    cmd->add_option("--precision", opt->precision, "full | bf16");
    cmd->add_option("--sequences", opt->sequences)->default_val(256);
    cmd->add_option("--freq-sequences", opt->freq_sequences)->default_val(1000);
    cmd->add_option("--attr-tokens", opt->attr_tokens)->default_val(2048);
    cmd->add_flag("--with-frequencies", opt->with_frequencies);
    cmd->add_flag("--with-attribution", opt->with_attribution);
    cmd->add_flag("--with-per-position", opt->with_per_position);
    cmd->add_flag("--skip-splice", opt->skip_splice, "reconstruction metrics only");
    cmd->callback([opt] {
      cmd_eval(opt->host, opt->corpus, opt->sae, opt->site, opt->layer, opt->out, opt->norm,
               opt->norm_c, opt->precision, opt->sequences, opt->freq_sequences,
               opt->attr_tokens, opt->with_frequencies, opt->with_attribution,
               opt->with_per_position, opt->skip_splice);
    });
  }
  {
    auto opt = std::make_shared<std::pair<std::string, std::string>>();
    auto* cmd = app.add_subcommand("report", "Aggregate eval reports into a table");
    cmd->add_option("--in-dir", opt->first)->required();
    cmd->add_option("--out", opt->second)->required();
    cmd->callback([opt] { cmd_report(opt->first, opt->second); });
  }
}

}  // namespace saekit::cli
