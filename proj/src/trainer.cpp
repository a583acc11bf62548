#include "saekit/trainer.hpp"

#include <cmath>
#include <cstring>

namespace saekit {

void TrainPlan::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(eta) || !finite(beta1) || !finite(beta2) || !finite(adam_eps) ||
      !finite(lambda_final) || !finite(epsilon_bandwidth)) {
    throw ConfigError("TrainPlan: non-finite scalar");
  }
  if (eta <= 0) throw ConfigError("TrainPlan: eta must be > 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
    throw ConfigError("TrainPlan: betas must be in [0, 1)");
  }
  if (adam_eps <= 0) throw ConfigError("TrainPlan: adam_eps must be > 0");
  if (batch_size < 1) throw ConfigError("TrainPlan: batch_size must be >= 1");
  if (lambda_final < 0) throw ConfigError("TrainPlan: lambda_final must be >= 0");
  if (epsilon_bandwidth <= 0) throw ConfigError("TrainPlan: epsilon_bandwidth must be > 0");
  if (total_steps < 0) throw ConfigError("TrainPlan: total_steps must be >= 0");
  if (lr_warmup_steps < 0 || lambda_warmup_steps < 0) {
    throw ConfigError("TrainPlan: warmup steps must be >= 0");
  }
  if (lr_warmup_steps > total_steps || lambda_warmup_steps > total_steps) {
    throw ConfigError("TrainPlan: warmup steps must not exceed total_steps");
  }
}

KeyValueMap TrainPlan::to_kv() const {
  KeyValueMap kv;
  kv["eta"] = format_double(eta);
  kv["beta1"] = format_double(beta1);
  kv["beta2"] = format_double(beta2);
  kv["adam_eps"] = format_double(adam_eps);
  kv["batch_size"] = std::to_string(batch_size);
  kv["lr_warmup_steps"] = std::to_string(lr_warmup_steps);
  kv["lambda_warmup_steps"] = std::to_string(lambda_warmup_steps);
  kv["lambda_final"] = format_double(lambda_final);
  kv["epsilon_bandwidth"] = format_double(epsilon_bandwidth);
  kv["total_steps"] = std::to_string(total_steps);
  kv["seed"] = std::to_string(seed);
  return kv;
}

TrainPlan TrainPlan::from_kv(const KeyValueMap& kv) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(std::string("TrainPlan: missing key ") + key);
    return it->second;
  };
  TrainPlan p;
  p.eta = parse_double(get("eta"));
  p.beta1 = parse_double(get("beta1"));
  p.beta2 = parse_double(get("beta2"));
  p.adam_eps = parse_double(get("adam_eps"));
  p.batch_size = parse_int(get("batch_size"));
  p.lr_warmup_steps = parse_int(get("lr_warmup_steps"));
  p.lambda_warmup_steps = parse_int(get("lambda_warmup_steps"));
  p.lambda_final = parse_double(get("lambda_final"));
  p.epsilon_bandwidth = parse_double(get("epsilon_bandwidth"));
  p.total_steps = parse_int(get("total_steps"));
  p.seed = static_cast<uint64_t>(parse_int(get("seed")));
  return p;
}

double lr_at(const TrainPlan& plan, int64_t step) {
  if (step < 0) throw std::invalid_argument("lr_at: step must be >= 0");
  const int64_t W = plan.lr_warmup_steps;
  if (W <= 0 || step > W) return plan.eta;
  const double t = static_cast<double>(step) / static_cast<double>(W);
  return plan.eta * (0.1 + 0.9 * (1.0 - std::cos(M_PI * t)) / 2.0);
}

double lambda_at(const TrainPlan& plan, int64_t step) {
  if (step < 0) throw std::invalid_argument("lambda_at: step must be >= 0");
  const int64_t W = plan.lambda_warmup_steps;
  if (W <= 0 || step >= W) return plan.lambda_final;
  return plan.lambda_final * static_cast<double>(step) / static_cast<double>(W);
}

namespace {

constexpr double kThetaFloor = 1e-9;

// Bias-corrected Adam on one tensor, all arithmetic in 64-bit; parameters and
// moments round back to 32-bit storage.
template <class MatLike, class MatLikeF>
void adam_update(MatLikeF& param, MatLikeF& m, MatLikeF& v, const MatLike& grad, double lr,
                 double beta1, double beta2, double eps, int64_t t) {
  MatR<double> md = m.template cast<double>();
  MatR<double> vd = v.template cast<double>();
  MatR<double> pd = param.template cast<double>();
  md = beta1 * md + (1.0 - beta1) * grad;
  vd = beta2 * vd + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  MatR<double> mhat = bc1 > 0 ? (md / bc1).eval() : md;
  MatR<double> vhat = vd / bc2;
  pd -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt() + MatR<double>::Constant(vd.rows(), vd.cols(), eps));
  param = pd.template cast<float>();
  m = md.template cast<float>();
  v = vd.template cast<float>();
}

}  // namespace

StepMetrics train_step(SaeParamsT<float>& params, OptimizerState& opt, const MatF& batch,
                       const MatF* targets, const TrainPlan& plan, int64_t step) {
  if (batch.cols() != params.input_dim()) {
    throw std::invalid_argument("train_step: batch dimension mismatch");
  }
  if (params.kind == SaeKind::transcoder && targets == nullptr) {
    throw std::invalid_argument("train_step: transcoder training requires targets");
  }

  StepMetrics metrics;
  metrics.lr = lr_at(plan, step);
  metrics.lambda = lambda_at(plan, step);

  SaeParamsT<double> pd = params.cast<double>();
  MatR<double> xd = batch.cast<double>();
  MatR<double> td = targets ? targets->cast<double>().eval() : xd;

  BatchLoss<double> loss;
  GradientsT<double> g = sae_backward_batch<double>(pd, xd, td, metrics.lambda,
                                                    plan.epsilon_bandwidth, &loss);
  metrics.recon = loss.recon;
  metrics.l0 = loss.l0;
  metrics.total = loss.total;

  if (!g.all_finite()) {
    throw NumericError("train_step: non-finite gradient at step " + std::to_string(step));
  }

  project_and_constrain(pd, g);

  const int64_t t = opt.step + 1;
  adam_update(params.w_enc, opt.first_moment.w_enc, opt.second_moment.w_enc, g.w_enc, metrics.lr,
              plan.beta1, plan.beta2, plan.adam_eps, t);
  adam_update(params.b_enc, opt.first_moment.b_enc, opt.second_moment.b_enc, g.b_enc, metrics.lr,
              plan.beta1, plan.beta2, plan.adam_eps, t);
  adam_update(params.w_dec, opt.first_moment.w_dec, opt.second_moment.w_dec, g.w_dec, metrics.lr,
              plan.beta1, plan.beta2, plan.adam_eps, t);
  adam_update(params.b_dec, opt.first_moment.b_dec, opt.second_moment.b_dec, g.b_dec, metrics.lr,
              plan.beta1, plan.beta2, plan.adam_eps, t);
  adam_update(params.theta, opt.first_moment.theta, opt.second_moment.theta, g.theta, metrics.lr,
              plan.beta1, plan.beta2, plan.adam_eps, t);
  opt.step = t;

  // renormalize decoder columns (64-bit norms) and keep theta strictly positive
  for (Eigen::Index i = 0; i < params.latent_dim(); ++i) {
    VecX<double> col = params.w_dec.col(i).cast<double>();
    const double nrm = col.norm();
    if (!(nrm > 1e-12)) {
      throw NumericError("train_step: decoder column " + std::to_string(i) + " collapsed");
    }
    params.w_dec.col(i) = (col / nrm).cast<float>();
  }
  params.theta = params.theta.cwiseMax(static_cast<float>(kThetaFloor));

  if (!params.w_enc.allFinite() || !params.b_enc.allFinite() || !params.w_dec.allFinite() ||
      !params.b_dec.allFinite() || !params.theta.allFinite()) {
    throw NumericError("train_step: non-finite parameter after update at step " +
                       std::to_string(step));
  }
  return metrics;
}

SaeParamsT<float> init_params(int n, int M, uint64_t seed, SaeKind kind) {
  if (n < 1 || M < 1) throw ConfigError("init_params: need n >= 1 and M >= 1");
  Rng rng(seed);
  SaeParamsT<float> p;
  p.kind = kind;
  p.parameterization = Parameterization::training;
  p.w_dec.resize(n, M);
  const double dec_limit = std::sqrt(6.0 / static_cast<double>(M));
  for (int j = 0; j < M; ++j) {
    VecX<double> col(n);
    for (int i = 0; i < n; ++i) col(i) = rng.uniform(-dec_limit, dec_limit);
    col /= col.norm();
    p.w_dec.col(j) = col.cast<float>();
  }
  if (kind == SaeKind::autoencoder) {
    p.w_enc = p.w_dec.transpose();
  } else {
    p.w_enc.resize(M, n);
    const double enc_limit = std::sqrt(6.0 / static_cast<double>(n));
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < n; ++j) p.w_enc(i, j) = static_cast<float>(rng.uniform(-enc_limit, enc_limit));
  }
  p.b_enc = VecF::Zero(M);
  p.b_dec = VecF::Zero(n);
  p.theta = VecF::Constant(M, 0.001f);
  return p;
}

// ----------------------------- sources & loop -----------------------------

MemoryBatchSource::MemoryBatchSource(MatF rows, int64_t batch_size)
    : rows_(std::move(rows)), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("MemoryBatchSource: batch_size must be >= 1");
}

MemoryBatchSource::MemoryBatchSource(MatF rows, MatF targets, int64_t batch_size)
    : rows_(std::move(rows)), targets_(std::move(targets)), batch_size_(batch_size) {
  if (batch_size_ < 1) throw ConfigError("MemoryBatchSource: batch_size must be >= 1");
  if (targets_.rows() != rows_.rows()) {
    throw ConfigError("MemoryBatchSource: row/target count mismatch");
  }
}

bool MemoryBatchSource::next(MatF& x, MatF& target) {
  if (cursor_ + batch_size_ > rows_.rows()) return false;  // partial batch dropped
  x = rows_.middleRows(cursor_, batch_size_);
  target = targets_.size() > 0 ? MatF(targets_.middleRows(cursor_, batch_size_)) : x;
  cursor_ += batch_size_;
  return true;
}

int64_t train_loop(SaeParamsT<float>& params, OptimizerState& opt, BatchSource& source,
                   const TrainPlan& plan, const StepCallback& on_step) {
  plan.validate();
  MatF x, target;
  for (int64_t step = opt.step; step < plan.total_steps; ++step) {
    if (!source.next(x, target)) {
      source.reset();
      if (!source.next(x, target)) {
        throw ConfigError("train_loop: batch source yields no batches");
      }
    }
    const bool transcoder = params.kind == SaeKind::transcoder;
    StepMetrics m = train_step(params, opt, x, transcoder ? &target : nullptr, plan, step);
    if (on_step) on_step(step, m);
  }
  return opt.step;
}

// ----------------------------- checkpoints -----------------------------

namespace {

constexpr char kOptMagic[4] = {'J', 'O', 'P', 'T'};

std::filesystem::path meta_path(const std::filesystem::path& sae_path) {
  auto p = sae_path;
  p += ".meta";
  return p;
}
std::filesystem::path opt_path(const std::filesystem::path& sae_path) {
  auto p = sae_path;
  p += ".opt";
  return p;
}

void put_tensor(std::string& out, const MatF& m) {
  size_t off = out.size();
  out.resize(off + sizeof(float) * m.size());
  std::memcpy(out.data() + off, m.data(), sizeof(float) * m.size());
}
void put_tensor(std::string& out, const VecF& v) {
  size_t off = out.size();
  out.resize(off + sizeof(float) * v.size());
  std::memcpy(out.data() + off, v.data(), sizeof(float) * v.size());
}

void get_tensor(const std::string& in, size_t& off, float* dst, size_t count,
                const std::filesystem::path& path) {
  if (off + count * sizeof(float) > in.size()) {
    throw IoError("truncated optimizer state: " + path.string());
  }
  std::memcpy(dst, in.data() + off, count * sizeof(float));
  off += count * sizeof(float);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& sae_path, const Checkpoint& ckpt) {
  save_sae(sae_path, ckpt.params);

  KeyValueMap kv = ckpt.plan.to_kv();
  kv["step"] = std::to_string(ckpt.opt.step);
  kv["norm_c"] = format_double(ckpt.norm_c);
  kv["kind"] = to_string(ckpt.params.kind);
  write_key_value_file(meta_path(sae_path), kv);

  std::string out;
  out.append(kOptMagic, 4);
  put_u32(out, 1);
  put_u64(out, static_cast<uint64_t>(ckpt.opt.step));
  put_u32(out, static_cast<uint32_t>(ckpt.params.input_dim()));
  put_u32(out, static_cast<uint32_t>(ckpt.params.latent_dim()));
  for (const auto* t : {&ckpt.opt.first_moment, &ckpt.opt.second_moment}) {
    put_tensor(out, t->w_enc);
    put_tensor(out, t->b_enc);
    put_tensor(out, t->w_dec);
    put_tensor(out, t->b_dec);
    put_tensor(out, t->theta);
  }
  atomic_write_file(opt_path(sae_path), out);
}

Checkpoint load_checkpoint(const std::filesystem::path& sae_path) {
  Checkpoint ckpt;
  ckpt.params = load_sae(sae_path);

  KeyValueMap kv = read_key_value_file(meta_path(sae_path));
  ckpt.plan = TrainPlan::from_kv(kv);
  auto need = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("checkpoint sidecar missing key: " + std::string(k));
    return it->second;
  };
  const int64_t step = parse_int(need("step"));
  ckpt.norm_c = parse_double(need("norm_c"));

  std::string in = read_file(opt_path(sae_path));
  if (in.size() < 24 || std::memcmp(in.data(), kOptMagic, 4) != 0) {
    throw IoError("not an optimizer-state file: " + opt_path(sae_path).string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(in.data());
  if (get_u32(p + 4) != 1) throw IoError("unsupported optimizer-state version");
  const int64_t opt_step = static_cast<int64_t>(get_u64(p + 8));
  const uint32_t n = get_u32(p + 16), M = get_u32(p + 20);
  if (n != ckpt.params.input_dim() || M != ckpt.params.latent_dim()) {
    throw IoError("optimizer state does not match SAE dimensions: " + opt_path(sae_path).string());
  }
  if (opt_step != step) {
    throw IoError("optimizer state step disagrees with sidecar: " + opt_path(sae_path).string());
  }
  ckpt.opt = OptimizerState::zeros_like(ckpt.params);
  ckpt.opt.step = step;
  size_t off = 24;
  for (auto* t : {&ckpt.opt.first_moment, &ckpt.opt.second_moment}) {
    get_tensor(in, off, t->w_enc.data(), static_cast<size_t>(M) * n, opt_path(sae_path));
    get_tensor(in, off, t->b_enc.data(), M, opt_path(sae_path));
    get_tensor(in, off, t->w_dec.data(), static_cast<size_t>(n) * M, opt_path(sae_path));
    get_tensor(in, off, t->b_dec.data(), n, opt_path(sae_path));
    get_tensor(in, off, t->theta.data(), M, opt_path(sae_path));
  }
  return ckpt;
}

bool checkpoint_exists(const std::filesystem::path& sae_path) {
  return std::filesystem::exists(sae_path) && std::filesystem::exists(meta_path(sae_path)) &&
         std::filesystem::exists(opt_path(sae_path));
}

}  // namespace saekit
