#include "cli_common.hpp"

#include "saekit/client.hpp"
#include "saekit/eval.hpp"
#include "saekit/server.hpp"
#include "saekit/trainer.hpp"

#include <atomic>
#include <csignal>
#include <thread>

namespace saekit::cli {

namespace {

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop = true; }

void cmd_serve(const std::string& shards_dir, const std::string& host, uint16_t port,
               int64_t batch_size, int64_t buffer_batches) {
  ServerConfig cfg;
  cfg.shards = list_shards(shards_dir);
  if (cfg.shards.empty()) throw IoError("serve: no shards in " + shards_dir);
  cfg.host = host;
  cfg.port = port;
  cfg.batch_size = batch_size;
  cfg.buffer_batches = buffer_batches;
  BatchServer server(cfg);
  server.start();
  note("saekit-serve listening on " + std::to_string(server.port()) + " (" +
       std::to_string(server.core().num_batches()) + " batches of " +
       std::to_string(batch_size) + ")");
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  server.stop();
  note("saekit-serve: stopped");
}

struct TrainOpts {
  std::string data, target_data, servers, norm_path, out, kind = "autoencoder";
  double norm_c = 0;
  int width = 0;
  int64_t checkpoint_every = 1000;
  uint64_t trainer_id = 0;
  TrainPlan plan;
  bool quiet = false;
};

KeyValueMap train_config_kv(const TrainOpts& o) {
  KeyValueMap kv = o.plan.to_kv();
  kv["data"] = o.data;
  kv["target_data"] = o.target_data;
  kv["servers"] = o.servers;
  kv["norm"] = o.norm_path;
  kv["norm_c"] = format_double(o.norm_c);
  kv["out"] = o.out;
  kv["kind"] = o.kind;
  kv["width"] = std::to_string(o.width);
  return kv;
}

std::unique_ptr<BatchSource> open_source(const TrainOpts& o, double c) {
  if (!o.data.empty() && !o.servers.empty()) {
    throw ConfigError("train: give either --data or --servers, not both");
  }
  if (!o.data.empty()) {
    auto shards = list_shards(o.data);
    if (shards.empty()) throw IoError("train: no shards in " + o.data);
    if (!o.target_data.empty()) {
      auto targets = list_shards(o.target_data);
      if (targets.empty()) throw IoError("train: no shards in " + o.target_data);
      return std::make_unique<ShardBatchSource>(shards, targets, o.plan.batch_size, c);
    }
    return std::make_unique<ShardBatchSource>(shards, o.plan.batch_size, c);
  }
  if (!o.servers.empty()) {
    if (!o.target_data.empty()) {
      throw ConfigError("train: transcoder targets are only supported with local --data");
    }
    return std::make_unique<RemoteBatchSource>(parse_server_list(o.servers), o.trainer_id, c);
  }
  throw ConfigError("train: a data source is required (--data DIR or --servers LIST)");
}

// Consumes `batches` from the source the same way the training loop would.
void skip_batches(BatchSource& source, int64_t batches) {
  MatF x, t;
  for (int64_t i = 0; i < batches; ++i) {
    if (!source.next(x, t)) {
      source.reset();
      if (!source.next(x, t)) throw ConfigError("train: batch source yields no batches");
    }
  }
}

void run_training(const TrainOpts& o) {
  o.plan.validate();
  if (o.width < 1) throw ConfigError("train: --width must be >= 1");
  const SaeKind kind = o.kind == "transcoder" ? SaeKind::transcoder : SaeKind::autoencoder;
  if (o.kind != "transcoder" && o.kind != "autoencoder") {
    throw ConfigError("train: --kind must be autoencoder or transcoder");
  }
  if (kind == SaeKind::transcoder && o.target_data.empty()) {
    throw ConfigError("train: transcoders need --target-data");
  }
  const double c = *resolve_norm(o.norm_path, o.norm_c);

  auto source = open_source(o, c);
  SaeParamsT<float> params;
  OptimizerState opt;
  bool resumed = false;
  if (checkpoint_exists(o.out)) {
    auto ckpt = load_checkpoint(o.out);
    const bool same_plan = ckpt.plan.to_kv() == o.plan.to_kv();
    if (same_plan && ckpt.params.kind == kind && ckpt.params.latent_dim() == o.width) {
      if (ckpt.opt.step >= o.plan.total_steps) {
        note("train: checkpoint already complete at step " + std::to_string(ckpt.opt.step));
        return;
      }
      params = std::move(ckpt.params);
      opt = std::move(ckpt.opt);
      resumed = true;
      note("train: resuming from step " + std::to_string(opt.step));
    }
  }
  if (!resumed) {
    params = init_params(static_cast<int>(source->dim()), o.width, o.plan.seed, kind);
    opt = OptimizerState::zeros_like(params);
  }

  // position the stream where the run left off (the stream is periodic, so
  // one pass is the longest replay for local shard sources)
  int64_t pos = opt.step;
  if (auto* local = dynamic_cast<ShardBatchSource*>(source.get())) {
    pos %= static_cast<int64_t>(local->batches_per_pass());
  } else if (auto* mem = dynamic_cast<MemoryBatchSource*>(source.get())) {
    (void)mem;
  }
  skip_batches(*source, pos);

  const int64_t print_every = std::max<int64_t>(1, o.plan.total_steps / 20);
  const int64_t ckpt_every = o.checkpoint_every > 0 ? o.checkpoint_every : o.plan.total_steps;
  train_loop(params, opt, *source, o.plan, [&](int64_t step, const StepMetrics& metrics) {
    if (!o.quiet && ((step + 1) % print_every == 0 || step + 1 == o.plan.total_steps)) {
      note("step " + std::to_string(step + 1) + "/" + std::to_string(o.plan.total_steps) +
           " recon " + format_double(metrics.recon) + " L0 " + format_double(metrics.l0) +
           " lambda " + format_double(metrics.lambda));
    }
    if ((step + 1) % ckpt_every == 0 && step + 1 < o.plan.total_steps) {
      save_checkpoint(o.out, Checkpoint{params, opt, o.plan, c});
    }
  });
  save_checkpoint(o.out, Checkpoint{params, opt, o.plan, c});

  Manifest m;
  m.command = "train";
  m.config = train_config_kv(o);
  m.outputs = {o.out};
  write_manifest(o.out, m);
  note("train: wrote " + o.out);
}

void add_plan_options(CLI::App* cmd, const std::shared_ptr<TrainOpts>& opt) {
  cmd->add_option("--eta", opt->plan.eta, "learning rate")->default_val(7e-5);
  cmd->add_option("--beta1", opt->plan.beta1)->default_val(0.0);
  cmd->add_option("--beta2", opt->plan.beta2)->default_val(0.999);
  cmd->add_option("--adam-eps", opt->plan.adam_eps)->default_val(1e-8);
  cmd->add_option("--batch-size", opt->plan.batch_size)->default_val(256);
  cmd->add_option("--lr-warmup-steps", opt->plan.lr_warmup_steps)->default_val(1000);
  cmd->add_option("--lambda-warmup-steps", opt->plan.lambda_warmup_steps)->default_val(10000);
  cmd->add_option("--epsilon-bandwidth", opt->plan.epsilon_bandwidth)->default_val(0.001);
  cmd->add_option("--steps", opt->plan.total_steps, "total training steps")->required();
  cmd->add_option("--seed", opt->plan.seed)->required();
  cmd->add_option("--data", opt->data, "shard directory");
  cmd->add_option("--servers", opt->servers, "host:port[,host:port...]");
  cmd->add_option("--target-data", opt->target_data, "target shards (transcoder)");
  cmd->add_option("--norm", opt->norm_path, "norm constant file from estimate-norm");
  cmd->add_option("--norm-c", opt->norm_c, "norm constant value");
  cmd->add_option("--width", opt->width, "number of latents M")->required();
  cmd->add_option("--kind", opt->kind, "autoencoder | transcoder");
  cmd->add_option("--checkpoint-every", opt->checkpoint_every)->default_val(1000);
  cmd->add_option("--trainer-id", opt->trainer_id)->default_val(0);
  cmd->add_flag("--quiet", opt->quiet);
}

void cmd_sweep(const std::shared_ptr<TrainOpts>& base, const std::string& lambdas_csv,
               const std::string& out_dir, int64_t eval_rows) {
  if (base->data.empty()) throw ConfigError("sweep: needs local --data shards");
  std::vector<double> lambdas;
  {
    size_t pos = 0;
    while (pos < lambdas_csv.size()) {
      size_t comma = lambdas_csv.find(',', pos);
      std::string item = lambdas_csv.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos);
      pos = comma == std::string::npos ? lambdas_csv.size() : comma + 1;
      if (!item.empty()) lambdas.push_back(parse_double(item));
    }
  }
  if (lambdas.empty()) throw ConfigError("sweep: --lambdas is empty");
  std::filesystem::create_directories(out_dir);
  const double c = *resolve_norm(base->norm_path, base->norm_c);

  // raw evaluation rows drawn once from the head of the shard stream
  auto shards = list_shards(base->data);
  ShardRowAccessor accessor(shards);
  const auto n_eval = std::min<uint64_t>(static_cast<uint64_t>(eval_rows), accessor.total_rows());
  MatF eval_raw = accessor.read_rows(0, n_eval);
  MatF eval_target;
  const MatF* eval_target_ptr = nullptr;
  if (!base->target_data.empty()) {
    ShardRowAccessor target_accessor(list_shards(base->target_data));
    eval_target = target_accessor.read_rows(0, n_eval);
    eval_target_ptr = &eval_target;
  }

  std::string table = "lambda\tmean_l0\tfvu\tcheckpoint\n";
  for (double lambda : lambdas) {
    TrainOpts o = *base;
    o.plan.lambda_final = lambda;
    char name[64];
    std::snprintf(name, sizeof(name), "sae_lambda_%g.jsae", lambda);
    o.out = (std::filesystem::path(out_dir) / name).string();
    note("sweep: lambda = " + format_double(lambda));
    run_training(o);

    auto ckpt = load_checkpoint(o.out);
    SaeRunner runner(ckpt.params, c);
    const double l0 = mean_l0(runner, eval_raw);
    const double f = fvu(runner, eval_raw, eval_target_ptr);
    table += format_double(lambda);
    table += '\t';
    table += format_double(l0);
    table += '\t';
    table += format_double(f);
    table += '\t';
    table += o.out;
    table += '\n';
  }
  auto table_path = std::filesystem::path(out_dir) / "sweep.tsv";
  atomic_write_file(table_path, table);

  Manifest m;
  m.command = "sweep";
  m.config = train_config_kv(*base);
  m.config["lambdas"] = lambdas_csv;
  m.config["out_dir"] = out_dir;
  m.config["eval_rows"] = std::to_string(eval_rows);
  m.outputs = {table_path};
  write_manifest(table_path, m);
  note("sweep: wrote " + table_path.string());
}

void cmd_fold(const std::string& in, const std::string& out, const std::string& norm_path,
              double norm_c) {
  auto params = load_sae(in);
  std::optional<double> c = resolve_norm(norm_path, norm_c, /*optional=*/true);
  if (!c) {
    // fall back to the checkpoint sidecar
    auto meta = in + ".meta";
    if (!std::filesystem::exists(meta)) {
      throw ConfigError("fold: no --norm/--norm-c and no sidecar " + meta);
    }
    auto kv = read_key_value_file(meta);
    auto it = kv.find("norm_c");
    if (it == kv.end()) throw ConfigError("fold: sidecar lacks norm_c: " + meta);
    c = parse_double(it->second);
  }
  auto folded = fold_parameters(params, *c);
  save_sae(out, folded);

  Manifest m;
  m.command = "fold";
  m.config = {{"in", in}, {"out", out}, {"norm", norm_path}, {"norm_c", format_double(*c)}};
  m.inputs = {in};
  m.outputs = {out};
  write_manifest(out, m);
  note("fold: wrote " + out + " (c = " + format_double(*c) + ")");
}

}  // namespace

void register_train_commands(CLI::App& app) {
  {
    struct Opt {
      std::string shards, host = "127.0.0.1";
      uint16_t port = 0;
      int64_t batch_size = 256, buffer_batches = 8;
    };
    auto opt = std::make_shared<Opt>();
    auto* cmd = app.add_subcommand("serve", "Serve batches from a shard slice over TCP");
    cmd->add_option("--shards", opt->shards)->required();
    cmd->add_option("--host", opt->host);
    cmd->add_option("--port", opt->port, "0 = ephemeral");
    cmd->add_option("--batch-size", opt->batch_size)->default_val(256);
    cmd->add_option("--buffer-batches", opt->buffer_batches)->default_val(8);
    cmd->callback([opt] {
      cmd_serve(opt->shards, opt->host, opt->port, opt->batch_size, opt->buffer_batches);
    });
  }
  {
    auto opt = std::make_shared<TrainOpts>();
    auto* cmd = app.add_subcommand("train", "Train a JumpReLU SAE or transcoder");
    add_plan_options(cmd, opt);
    cmd->add_option("--lambda", opt->plan.lambda_final, "final sparsity coefficient")
        ->required();
    cmd->add_option("--out", opt->out, "checkpoint path")->required();
    cmd->callback([opt] { run_training(*opt); });
  }
  {
    auto opt = std::make_shared<TrainOpts>();
    auto lambdas = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>();
    auto eval_rows = std::make_shared<int64_t>(8192);
    auto* cmd = app.add_subcommand("sweep", "Train a sparsity-coefficient grid");
    add_plan_options(cmd, opt);
    cmd->add_option("--lambdas", *lambdas, "comma-separated sparsity coefficients")->required();
    cmd->add_option("--out-dir", *out_dir)->required();
    cmd->add_option("--eval-rows", *eval_rows)->default_val(8192);
    cmd->callback([opt, lambdas, out_dir, eval_rows] {
      cmd_sweep(opt, *lambdas, *out_dir, *eval_rows);
    });
  }
  {
    struct Opt {
      std::string in, out, norm;
      double norm_c = 0;
    };
    auto opt = std::make_shared<Opt>();
    auto* cmd = app.add_subcommand(
        "fold", "Fold the norm constant and pre-encoder bias into the parameters");
    cmd->add_option("--in", opt->in)->required();
    cmd->add_option("--out", opt->out)->required();
    cmd->add_option("--norm", opt->norm);
    cmd->add_option("--norm-c", opt->norm_c);
    cmd->callback([opt] { cmd_fold(opt->in, opt->out, opt->norm, opt->norm_c); });
  }
}

}  // namespace saekit::cli
