#pragma once

// SAE optimization recipe: Adam with (beta1, beta2) = (0, 0.999), cosine
// learning-rate warmup, linear sparsity-coefficient warmup, decoder-column
// gradient projection, and per-update column renormalization. Gradient and
// update arithmetic run in 64-bit; parameters and optimizer state are stored
// in 32-bit so checkpoints capture the exact training state.

#include "saekit/common.hpp"
#include "saekit/core.hpp"

#include <functional>
#include <optional>

namespace saekit {

struct TrainPlan {
  double eta = 7e-5;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t batch_size = 4096;
  int64_t lr_warmup_steps = 1000;
  int64_t lambda_warmup_steps = 10000;
  double lambda_final = 1e-3;
  double epsilon_bandwidth = 0.001;
  int64_t total_steps = 0;
  uint64_t seed = 0;

  void validate() const;
  KeyValueMap to_kv() const;
  static TrainPlan from_kv(const KeyValueMap& kv);
};

struct OptimizerState {
  ParamTensorsT<float> first_moment;
  ParamTensorsT<float> second_moment;
  int64_t step = 0;

  static OptimizerState zeros_like(const SaeParamsT<float>& p) {
    OptimizerState s;
    s.first_moment = ParamTensorsT<float>::zeros_like(p);
    s.second_moment = ParamTensorsT<float>::zeros_like(p);
    return s;
  }
};

// Cosine warmup from 0.1*eta to eta over lr_warmup_steps, then constant.
double lr_at(const TrainPlan& plan, int64_t step);
// Linear warmup from 0 to lambda_final over lambda_warmup_steps, then constant.
double lambda_at(const TrainPlan& plan, int64_t step);

// Removes the component of each decoder-column gradient parallel to that
// column. Columns must already be unit norm (checked to 1e-4).
template <class T>
void project_and_constrain(const SaeParamsT<T>& params, GradientsT<T>& grads) {
  const Eigen::Index M = params.latent_dim();
  if (grads.w_dec.rows() != params.w_dec.rows() || grads.w_dec.cols() != params.w_dec.cols()) {
    throw std::invalid_argument("project_and_constrain: gradient shape mismatch");
  }
  for (Eigen::Index i = 0; i < M; ++i) {
    auto d = params.w_dec.col(i);
    const T nrm = d.norm();
    if (std::abs(nrm - T(1)) > T(1e-4)) {
      throw NumericError("project_and_constrain: decoder column " + std::to_string(i) +
                         " has norm " + format_double(static_cast<double>(nrm)));
    }
    auto g = grads.w_dec.col(i);
    g -= d * d.dot(g);
  }
}

struct StepMetrics {
  double recon = 0;   // mean squared reconstruction error over the batch
  double l0 = 0;      // mean active-latent count
  double total = 0;   // recon + lambda * l0
  double lr = 0;
  double lambda = 0;
};

// One optimizer step: mean gradients over the batch, projection, Adam with
// bias correction, decoder-column renormalization, theta floor. `targets` is
// null for autoencoders (the batch reconstructs itself).
StepMetrics train_step(SaeParamsT<float>& params, OptimizerState& opt, const MatF& batch,
                       const MatF* targets, const TrainPlan& plan, int64_t step);

// theta = 0.001, W_dec He-uniform with unit-norm columns, W_enc tied to
// W_dec^T at init for autoencoders (independent draw for transcoders), zero
// biases, training parameterization.
SaeParamsT<float> init_params(int n, int M, uint64_t seed, SaeKind kind = SaeKind::autoencoder);

// ----------------------------- batch sources -----------------------------

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  // Fills x (batch_size x n) and target; returns false when the pass over the
  // data is exhausted. target equals x for autoencoder sources.
  virtual bool next(MatF& x, MatF& target) = 0;
  virtual void reset() = 0;
  virtual Eigen::Index dim() const = 0;
};

// In-memory source over pre-normalized rows; loops are the caller's business
// (reset() restarts the pass).
class MemoryBatchSource final : public BatchSource {
 public:
  MemoryBatchSource(MatF rows, int64_t batch_size);
  MemoryBatchSource(MatF rows, MatF targets, int64_t batch_size);

  bool next(MatF& x, MatF& target) override;
  void reset() override { cursor_ = 0; }
  Eigen::Index dim() const override { return rows_.cols(); }

 private:
  MatF rows_;
  MatF targets_;  // empty for autoencoder data
  int64_t batch_size_;
  int64_t cursor_ = 0;
};

// Runs steps [opt.step, plan.total_steps), cycling the source across epochs.
// on_step (optional) observes metrics; returns the final step count.
using StepCallback = std::function<void(int64_t step, const StepMetrics&)>;
int64_t train_loop(SaeParamsT<float>& params, OptimizerState& opt, BatchSource& source,
                   const TrainPlan& plan, const StepCallback& on_step = {});

// ----------------------------- checkpoints -----------------------------
// A checkpoint is the SAE binary plus a plain-text sidecar (plan, step, norm
// constant) and an optimizer-state binary for exact resume.
struct Checkpoint {
  SaeParamsT<float> params;
  OptimizerState opt;
  TrainPlan plan;
  double norm_c = 1.0;
};

void save_checkpoint(const std::filesystem::path& sae_path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& sae_path);
bool checkpoint_exists(const std::filesystem::path& sae_path);

}  // namespace saekit
