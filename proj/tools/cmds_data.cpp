#include "cli_common.hpp"

#include "saekit/eval.hpp"
#include "saekit/toyhost.hpp"

#include <algorithm>

namespace saekit::cli {

namespace {

// pick up to max_sequences indices, seeded, in ascending order
std::vector<size_t> select_sequences(size_t total, int64_t max_sequences, uint64_t seed) {
  std::vector<size_t> idx(total);
  for (size_t i = 0; i < total; ++i) idx[i] = i;
  if (max_sequences > 0 && static_cast<size_t>(max_sequences) < total) {
    Rng rng(mix_seed(seed, 0x5e1ec7));
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(static_cast<size_t>(max_sequences));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

void cmd_gen_corpus(const std::string& out, int64_t sequences, int seq_len, int symbols,
                    uint64_t seed) {
  Manifest m;
  m.command = "gen-corpus";
  m.config = {{"out", out},
              {"sequences", std::to_string(sequences)},
              {"seq_len", std::to_string(seq_len)},
              {"symbols", std::to_string(symbols)},
              {"seed", std::to_string(seed)}};
  m.outputs = {out};
  if (manifest_matches(out, m)) {
    note("gen-corpus: up to date, skipping");
    return;
  }
  auto corpus = generate_markov_corpus(symbols, sequences, seq_len, seed);
  save_corpus(out, corpus);
  write_manifest(out, m);
  note("gen-corpus: wrote " + std::to_string(corpus.sequences.size()) + " sequences to " + out);
}

void cmd_train_host(const std::string& corpus_path, const std::string& out, int64_t steps,
                    int64_t batch_seqs, double lr, uint64_t seed, ToyLmConfig shape) {
  Manifest m;
  m.command = "train-host";
  m.config = {{"corpus", corpus_path},
              {"out", out},
              {"steps", std::to_string(steps)},
              {"batch_seqs", std::to_string(batch_seqs)},
              {"lr", format_double(lr)},
              {"seed", std::to_string(seed)},
              {"layers", std::to_string(shape.layers)},
              {"d_model", std::to_string(shape.d_model)},
              {"heads", std::to_string(shape.heads)},
              {"head_dim", std::to_string(shape.head_dim)},
              {"d_ff", std::to_string(shape.d_ff)},
              {"max_seq", std::to_string(shape.max_seq)}};
  m.inputs = {corpus_path};
  m.outputs = {out};
  if (manifest_matches(out, m)) {
    note("train-host: up to date, skipping");
    return;
  }
  auto corpus = load_corpus(corpus_path);
  shape.vocab = corpus.vocab_total;
  if (static_cast<int>(corpus.seq_len) > shape.max_seq) {
    throw ConfigError("train-host: corpus seq_len exceeds --max-seq");
  }
  auto lm = toy_lm_random_init(shape, seed);
  ToyTrainConfig tc;
  tc.steps = steps;
  tc.sequences_per_step = batch_seqs;
  tc.lr = lr;
  tc.seed = seed;
  auto result = train_toy_lm(lm, corpus, tc);
  save_toy_lm(out, lm);
  write_manifest(out, m);
  note("train-host: held-out loss " + format_double(result.initial_loss) + " -> " +
       format_double(result.final_loss) + " (uniform " +
       format_double(std::log(static_cast<double>(shape.vocab))) + ")");
}

void cmd_collect(const std::string& host_path, const std::string& corpus_path,
                 const std::string& site_name, int layer, const std::string& out_dir,
                 uint64_t seed, const std::string& corpus_tag, const std::string& model_name,
                 int64_t max_sequences, uint64_t target_bytes, bool transcoder_pairs) {
  Manifest m;
  m.command = "collect";
  m.config = {{"host", host_path},
              {"corpus", corpus_path},
              {"site", site_name},
              {"layer", std::to_string(layer)},
              {"out_dir", out_dir},
              {"seed", std::to_string(seed)},
              {"corpus_tag", corpus_tag},
              {"model_name", model_name},
              {"max_sequences", std::to_string(max_sequences)},
              {"target_bytes", std::to_string(target_bytes)},
              {"transcoder_pairs", transcoder_pairs ? "1" : "0"}};
  m.inputs = {host_path, corpus_path};
  if (manifest_matches(out_dir, m)) {
    note("collect: up to date, skipping");
    return;
  }

  ToyLm host = load_toy_lm(host_path);
  auto corpus = load_corpus(corpus_path);
  if (layer < 0 || layer >= host.cfg.layers) throw ConfigError("collect: layer out of range");
  auto picks = select_sequences(corpus.sequences.size(), max_sequences, seed);

  if (transcoder_pairs) {
    // transcoders read the post-RMSNorm MLP input of the gain-folded host
    host = fold_rms_gains(host);
    const auto dim = static_cast<uint32_t>(host.cfg.d_model);
    ShardSetWriter in_writer(std::filesystem::path(out_dir) / "inputs", model_name,
                             Site::mlp_in_post_norm, static_cast<uint16_t>(layer), dim,
                             corpus_tag, target_bytes);
    ShardSetWriter out_writer(std::filesystem::path(out_dir) / "targets", model_name,
                              Site::mlp_out_post_norm, static_cast<uint16_t>(layer), dim,
                              corpus_tag, target_bytes);
    ToyLmCacheT<float> cache;
    for (size_t s : picks) {
      const auto& seq = corpus.sequences[s];
      toy_forward<float>(host, seq, cache);
      const MatF& inputs = site_values(cache, {Site::mlp_in_post_norm, layer});
      const MatF& targets = site_values(cache, {Site::mlp_out_post_norm, layer});
      for (size_t t = 0; t < seq.size(); ++t) {
        if (is_special_token(seq[t])) continue;
        in_writer.append_row(inputs.row(static_cast<Eigen::Index>(t)).data());
        out_writer.append_row(targets.row(static_cast<Eigen::Index>(t)).data());
      }
    }
    auto in_shards = in_writer.close();
    auto out_shards = out_writer.close();
    const auto row_count = in_writer.rows_written();
    for (auto& p : in_shards) m.outputs.push_back(p);
    for (auto& p : out_shards) m.outputs.push_back(p);
    write_manifest(out_dir, m);
    note("collect: wrote " + std::to_string(row_count) + " paired rows to " + out_dir +
         "/{inputs,targets}");
  } else {
    SiteSpec spec{site_from_string(site_name), layer};
    const auto dim = static_cast<uint32_t>(site_dim(host.cfg, spec.site));
    ShardSetWriter writer(out_dir, model_name, spec.site, static_cast<uint16_t>(layer), dim,
                          corpus_tag, target_bytes);
    ToyLmCacheT<float> cache;
    for (size_t s : picks) {
      const auto& seq = corpus.sequences[s];
      toy_forward<float>(host, seq, cache);
      const MatF& values = site_values(cache, spec);
      for (size_t t = 0; t < seq.size(); ++t) {
        if (is_special_token(seq[t])) continue;
        writer.append_row(values.row(static_cast<Eigen::Index>(t)).data());
      }
    }
    const auto row_count = writer.rows_written();
    auto shards = writer.close();
    for (auto& p : shards) m.outputs.push_back(p);
    write_manifest(out_dir, m);
    note("collect: wrote " + std::to_string(row_count) + " rows in " +
         std::to_string(shards.size()) + " shards to " + out_dir);
  }
}

void cmd_estimate_norm(const std::string& shards_dir, const std::string& out, int64_t samples) {
  auto shards = list_shards(shards_dir);
  if (shards.empty()) throw IoError("estimate-norm: no shards in " + shards_dir);
  ShardSetReader reader(shards);
  RowSource source = [&reader](VecF& row) { return reader.next_row(row); };
  auto nc = estimate_norm_constant(source, samples);

  ShardHeader h = read_shard_header(shards[0]);
  NormFile nf;
  nf.c = nc.c;
  nf.sample_count = nc.sample_count;
  nf.dim = h.dim;
  nf.site = to_string(h.site);
  nf.layer = h.layer;
  write_norm_file(out, nf);

  Manifest m;
  m.command = "estimate-norm";
  m.config = {{"shards", shards_dir}, {"out", out}, {"samples", std::to_string(samples)}};
  m.inputs = shards;
  m.outputs = {out};
  write_manifest(out, m);
  note("estimate-norm: c = " + format_double(nc.c) + " from " +
       std::to_string(nc.sample_count) + " rows");
}

void cmd_shuffle(const std::string& shards_dir, const std::string& out_dir, uint64_t seed,
                 int64_t bucket_size, const std::string& paired_dir,
                 const std::string& model_name, uint64_t target_bytes) {
  Manifest m;
  m.command = "shuffle";
  m.config = {{"shards", shards_dir},         {"out_dir", out_dir},
              {"seed", std::to_string(seed)}, {"bucket_size", std::to_string(bucket_size)},
              {"paired", paired_dir},         {"model_name", model_name},
              {"target_bytes", std::to_string(target_bytes)}};
  if (manifest_matches(out_dir, m)) {
    note("shuffle: up to date, skipping");
    return;
  }
  auto shards = list_shards(shards_dir);
  if (shards.empty()) throw IoError("shuffle: no shards in " + shards_dir);
  std::vector<std::filesystem::path> paired;
  if (!paired_dir.empty()) {
    paired = list_shards(paired_dir);
    if (paired.empty()) throw IoError("shuffle: no shards in " + paired_dir);
  }
  m.inputs = shards;
  for (auto& p : paired) m.inputs.push_back(p);
  auto result =
      shuffle_buckets(shards, out_dir, model_name, bucket_size, seed, paired, target_bytes);
  for (auto& p : result.shards) m.outputs.push_back(p);
  for (auto& p : result.target_shards) m.outputs.push_back(p);
  write_manifest(out_dir, m);
  note("shuffle: wrote " + std::to_string(result.shards.size() + result.target_shards.size()) +
       " shards to " + out_dir);
}

}  // namespace

void register_data_commands(CLI::App& app) {
  {
    auto opt = std::make_shared<std::tuple<std::string, int64_t, int, int, uint64_t>>();
    auto* cmd = app.add_subcommand("gen-corpus", "Generate a seeded synthetic token corpus");
    cmd->add_option("--out", std::get<0>(*opt), "output corpus file")->required();
    cmd->add_option("--sequences", std::get<1>(*opt), "number of sequences")->default_val(4096);
    cmd->add_option("--seq-len", std::get<2>(*opt), "tokens per sequence")->default_val(18);
    cmd->add_option("--symbols", std::get<3>(*opt), "alphabet size")->default_val(64);
    cmd->add_option("--seed", std::get<4>(*opt), "rng seed")->required();
    cmd->callback([opt] {
      auto& [out, sequences, seq_len, symbols, seed] = *opt;
      cmd_gen_corpus(out, sequences, seq_len, symbols, seed);
    });
  }
  {
    struct Opt {
      std::string corpus, out;
      int64_t steps = 4000, batch_seqs = 16;
      double lr = 3e-3;
      uint64_t seed = 0;
      ToyLmConfig shape;
    };
    auto opt = std::make_shared<Opt>();
    auto* cmd = app.add_subcommand("train-host", "Train the toy transformer host");
    cmd->add_option("--corpus", opt->corpus)->required();
    cmd->add_option("--out", opt->out, "output weights file")->required();
    cmd->add_option("--steps", opt->steps)->default_val(4000);
    cmd->add_option("--batch-seqs", opt->batch_seqs)->default_val(16);
    cmd->add_option("--lr", opt->lr)->default_val(3e-3);
    cmd->add_option("--seed", opt->seed)->required();
    cmd->add_option("--layers", opt->shape.layers)->default_val(2);
    cmd->add_option("--d-model", opt->shape.d_model)->default_val(64);
    cmd->add_option("--heads", opt->shape.heads)->default_val(4);
    cmd->add_option("--head-dim", opt->shape.head_dim)->default_val(16);
    cmd->add_option("--d-ff", opt->shape.d_ff)->default_val(256);
    cmd->add_option("--max-seq", opt->shape.max_seq)->default_val(64);
    cmd->callback([opt] {
      cmd_train_host(opt->corpus, opt->out, opt->steps, opt->batch_seqs, opt->lr, opt->seed,
                     opt->shape);
    });
  }
  {
    struct Opt {
      std::string host, corpus, site = "resid_post_mlp", out_dir, tag = "toy-markov";
      std::string model_name = "toylm";
      int layer = 0;
      uint64_t seed = 0;
      int64_t max_sequences = 0;
      uint64_t target_bytes = 64ull << 20;
      bool transcoder_pairs = false;
    };
    auto opt = std::make_shared<Opt>();
    auto* cmd = app.add_subcommand("collect", "Collect activation shards from the host");
    cmd->add_option("--host", opt->host)->required();
    cmd->add_option("--corpus", opt->corpus)->required();
    cmd->add_option("--site", opt->site,
                    "attn_out_pre_wo | mlp_out_post_norm | resid_post_mlp");
    cmd->add_option("--layer", opt->layer)->default_val(0);
    cmd->add_option("--out-dir", opt->out_dir)->required();
    cmd->add_option("--seed", opt->seed)->required();
    cmd->add_option("--corpus-tag", opt->tag);
    cmd->add_option("--model-name", opt->model_name);
    cmd->add_option("--max-sequences", opt->max_sequences, "0 = all");
    cmd->add_option("--target-bytes", opt->target_bytes, "shard rollover size");
    cmd->add_flag("--transcoder-pairs", opt->transcoder_pairs,
                  "collect paired (mlp input, mlp output) rows from the gain-folded host");
    cmd->callback([opt] {
      cmd_collect(opt->host, opt->corpus, opt->site, opt->layer, opt->out_dir, opt->seed,
                  opt->tag, opt->model_name, opt->max_sequences, opt->target_bytes,
                  opt->transcoder_pairs);
    });
  }
  {
    auto opt = std::make_shared<std::tuple<std::string, std::string, int64_t>>();
    auto* cmd = app.add_subcommand("estimate-norm", "Estimate the activation norm constant");
    cmd->add_option("--shards", std::get<0>(*opt), "shard directory")->required();
    cmd->add_option("--out", std::get<1>(*opt), "output key=value file")->required();
    cmd->add_option("--samples", std::get<2>(*opt))->default_val(100000);
    cmd->callback([opt] {
      cmd_estimate_norm(std::get<0>(*opt), std::get<1>(*opt), std::get<2>(*opt));
    });
  }
  {
    struct Opt {
      std::string shards, out_dir, paired, model_name = "toylm";
      uint64_t seed = 0;
      int64_t bucket_size = 100000;
      uint64_t target_bytes = 64ull << 20;
    };
    auto opt = std::make_shared<Opt>();
    auto* cmd = app.add_subcommand("shuffle", "Shuffle shard rows within seeded buckets");
    cmd->add_option("--shards", opt->shards)->required();
    cmd->add_option("--out-dir", opt->out_dir)->required();
    cmd->add_option("--seed", opt->seed)->required();
    cmd->add_option("--bucket-size", opt->bucket_size)->default_val(100000);
    cmd->add_option("--paired", opt->paired, "paired target shards (transcoder data)");
    cmd->add_option("--model-name", opt->model_name);
    cmd->add_option("--target-bytes", opt->target_bytes);
    cmd->callback([opt] {
      cmd_shuffle(opt->shards, opt->out_dir, opt->seed, opt->bucket_size, opt->paired,
                  opt->model_name, opt->target_bytes);
    });
  }
}

}  // namespace saekit::cli
