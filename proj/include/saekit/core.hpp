#pragma once

// JumpReLU sparse autoencoder / transcoder math.
//
// Encoder:  f(x) = jumprelu(W_enc x' + b_enc, theta)   with x' = x - b_dec for
//           autoencoders in the training parameterization, x' = x otherwise.
// Decoder:  x_hat(f) = W_dec f + b_dec
// Loss:     L = ||target - x_hat(f(x))||^2 + lambda * ||f(x)||_0
//
// The threshold has no useful almost-everywhere gradient, so sae_backward
// produces a straight-through pseudo-gradient for theta using a rectangle
// kernel of bandwidth epsilon; all other parameters get exact a.e. gradients
// with the Heaviside gate treated as locally constant.

#include "saekit/common.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

namespace saekit {

enum class SaeKind : uint8_t { autoencoder = 0, transcoder = 1 };
enum class Parameterization : uint8_t { training = 0, inference = 1 };

std::string to_string(SaeKind k);
std::string to_string(Parameterization p);

template <class T>
struct SaeParamsT {
  MatR<T> w_enc;  // M x n
  VecX<T> b_enc;  // M
  MatR<T> w_dec;  // n x M, columns are the dictionary directions d_i
  VecX<T> b_dec;  // n
  VecX<T> theta;  // M, strictly positive
  SaeKind kind = SaeKind::autoencoder;
  Parameterization parameterization = Parameterization::training;

  Eigen::Index latent_dim() const { return w_enc.rows(); }
  Eigen::Index input_dim() const { return w_enc.cols(); }

  // True when the encoder subtracts b_dec from its input.
  bool uses_pre_encoder_bias() const {
    return kind == SaeKind::autoencoder && parameterization == Parameterization::training;
  }

  void validate() const {
    const Eigen::Index M = latent_dim(), n = input_dim();
    if (M < 1 || n < 1) throw ConfigError("SaeParams: need M >= 1 and n >= 1");
    if (b_enc.size() != M || theta.size() != M || w_dec.rows() != n || w_dec.cols() != M ||
        b_dec.size() != n) {
      throw std::invalid_argument("SaeParams: inconsistent tensor shapes");
    }
    if (!(theta.array() > T(0)).all()) throw std::invalid_argument("SaeParams: theta must be > 0");
    if (!w_enc.allFinite() || !b_enc.allFinite() || !w_dec.allFinite() || !b_dec.allFinite() ||
        !theta.allFinite()) {
      throw NumericError("SaeParams: non-finite entry");
    }
  }

  template <class U>
  SaeParamsT<U> cast() const {
    SaeParamsT<U> out;
    out.w_enc = w_enc.template cast<U>();
    out.b_enc = b_enc.template cast<U>();
    out.w_dec = w_dec.template cast<U>();
    out.b_dec = b_dec.template cast<U>();
    out.theta = theta.template cast<U>();
    out.kind = kind;
    out.parameterization = parameterization;
    return out;
  }
};

template <class T>
struct ForwardTraceT {
  VecX<T> z;      // pre-activations, M
  VecX<T> f;      // latent activations, M
  VecX<T> x_hat;  // reconstruction, n
  T recon_loss = T(0);
  T l0 = T(0);
  T total_loss = T(0);
};

// One tensor per SaeParams field. Also reused for Adam moment storage.
template <class T>
struct ParamTensorsT {
  MatR<T> w_enc;
  VecX<T> b_enc;
  MatR<T> w_dec;
  VecX<T> b_dec;
  VecX<T> theta;

  template <class U>
  static ParamTensorsT zeros_like(const SaeParamsT<U>& p) {
    ParamTensorsT t;
    t.w_enc = MatR<T>::Zero(p.w_enc.rows(), p.w_enc.cols());
    t.b_enc = VecX<T>::Zero(p.b_enc.size());
    t.w_dec = MatR<T>::Zero(p.w_dec.rows(), p.w_dec.cols());
    t.b_dec = VecX<T>::Zero(p.b_dec.size());
    t.theta = VecX<T>::Zero(p.theta.size());
    return t;
  }

  bool all_finite() const {
    return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite() &&
           theta.allFinite();
  }

  template <class U>
  ParamTensorsT<U> cast() const {
    ParamTensorsT<U> out;
    out.w_enc = w_enc.template cast<U>();
    out.b_enc = b_enc.template cast<U>();
    out.w_dec = w_dec.template cast<U>();
    out.b_dec = b_dec.template cast<U>();
    out.theta = theta.template cast<U>();
    return out;
  }
};

template <class T>
struct GradientsT : ParamTensorsT<T> {
  T epsilon = T(0);  // bandwidth that produced the theta pseudo-gradient
};

namespace detail {
template <class T>
void check_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (got " +
                                std::to_string(got) + ", want " + std::to_string(want) + ")");
  }
}
}  // namespace detail

// z * H(z - theta), with H(0) = 0: a tie at the threshold deactivates the latent.
template <class T>
VecX<T> jumprelu(const VecX<T>& z, const VecX<T>& theta) {
  detail::check_dim<T>(z.size(), theta.size(), "jumprelu");
  if (!(theta.array() > T(0)).all()) throw std::invalid_argument("jumprelu: theta must be > 0");
  return (z.array() > theta.array()).select(z, VecX<T>::Zero(z.size()));
}

// Batch pre-activations, one example per row of x (B x n) -> (B x M).
template <class T>
MatR<T> encode_pre_batch(const SaeParamsT<T>& p, const MatR<T>& x) {
  detail::check_dim<T>(x.cols(), p.input_dim(), "encode");
  MatR<T> z;
  if (p.uses_pre_encoder_bias()) {
    z.noalias() = (x.rowwise() - p.b_dec.transpose()) * p.w_enc.transpose();
  } else {
    z.noalias() = x * p.w_enc.transpose();
  }
  z.rowwise() += p.b_enc.transpose();
  return z;
}

template <class T>
MatR<T> apply_jumprelu_batch(const MatR<T>& z, const VecX<T>& theta) {
  return (z.array() > theta.transpose().array().replicate(z.rows(), 1))
      .select(z, MatR<T>::Zero(z.rows(), z.cols()));
}

template <class T>
MatR<T> encode_batch(const SaeParamsT<T>& p, const MatR<T>& x) {
  return apply_jumprelu_batch<T>(encode_pre_batch(p, x), p.theta);
}

template <class T>
VecX<T> encode(const SaeParamsT<T>& p, const VecX<T>& x) {
  MatR<T> xr = x.transpose();
  MatR<T> f = encode_batch(p, xr);
  return f.row(0).transpose();
}

template <class T>
MatR<T> decode_batch(const SaeParamsT<T>& p, const MatR<T>& f) {
  detail::check_dim<T>(f.cols(), p.latent_dim(), "decode");
  MatR<T> x_hat;
  x_hat.noalias() = f * p.w_dec.transpose();
  x_hat.rowwise() += p.b_dec.transpose();
  return x_hat;
}

template <class T>
VecX<T> decode(const SaeParamsT<T>& p, const VecX<T>& f) {
  MatR<T> fr = f.transpose();
  MatR<T> x_hat = decode_batch(p, fr);
  return x_hat.row(0).transpose();
}

template <class T>
ForwardTraceT<T> sae_loss(const SaeParamsT<T>& p, const VecX<T>& x, const VecX<T>& target,
                          T lambda) {
  if (lambda < T(0)) throw std::invalid_argument("sae_loss: lambda must be >= 0");
  detail::check_dim<T>(target.size(), p.b_dec.size(), "sae_loss target");
  if (!x.allFinite() || !target.allFinite()) throw NumericError("sae_loss: non-finite input");
  ForwardTraceT<T> tr;
  MatR<T> xr = x.transpose();
  MatR<T> z = encode_pre_batch(p, xr);
  tr.z = z.row(0).transpose();
  tr.f = jumprelu(tr.z, p.theta);
  tr.x_hat = decode(p, tr.f);
  // 64-bit accumulation for the scalar reductions regardless of T
  double recon = (tr.x_hat - target).template cast<double>().squaredNorm();
  double l0 = static_cast<double>((tr.f.array() > T(0)).count());
  tr.recon_loss = static_cast<T>(recon);
  tr.l0 = static_cast<T>(l0);
  tr.total_loss = static_cast<T>(recon + static_cast<double>(lambda) * l0);
  return tr;
}

// Mean-over-batch loss pieces, used by the trainer and tests.
template <class T>
struct BatchLoss {
  double recon = 0;     // mean squared reconstruction error
  double l0 = 0;        // mean active-latent count
  double total = 0;     // recon + lambda * l0
};

template <class T>
BatchLoss<T> sae_loss_batch(const SaeParamsT<T>& p, const MatR<T>& x, const MatR<T>& target,
                            T lambda) {
  if (lambda < T(0)) throw std::invalid_argument("sae_loss: lambda must be >= 0");
  detail::check_dim<T>(target.rows(), x.rows(), "sae_loss target rows");
  detail::check_dim<T>(target.cols(), p.b_dec.size(), "sae_loss target");
  MatR<T> f = encode_batch(p, x);
  MatR<T> x_hat = decode_batch(p, f);
  BatchLoss<T> out;
  const double B = static_cast<double>(x.rows());
  out.recon = (x_hat - target).template cast<double>().squaredNorm() / B;
  out.l0 = static_cast<double>((f.array() > T(0)).count()) / B;
  out.total = out.recon + static_cast<double>(lambda) * out.l0;
  return out;
}

// Gradients of the mean per-example loss over the batch.
//
// With r = x_hat - target and gate = 1[z > theta]:
//   dL/dW_dec = 2 r f^T                 dL/df = W_dec^T 2r
//   dL/dz     = dL/df .* gate
//   dL/dW_enc = dL/dz x'^T              dL/db_enc = dL/dz
//   dL/db_dec = 2r (- W_enc^T dL/dz when the pre-encoder bias is in use)
//   dL/dtheta_i = -K((z_i-theta_i)/eps)/eps * (dL/df_i * theta_i + lambda)
// where K is the rectangle kernel, K(u) = 1 iff |u| <= 1/2.
template <class T>
GradientsT<T> sae_backward_batch(const SaeParamsT<T>& p, const MatR<T>& x, const MatR<T>& target,
                                 T lambda, T epsilon, BatchLoss<T>* loss_out = nullptr) {
  if (epsilon <= T(0)) throw std::invalid_argument("sae_backward: epsilon must be > 0");
  if (lambda < T(0)) throw std::invalid_argument("sae_backward: lambda must be >= 0");
  detail::check_dim<T>(x.cols(), p.input_dim(), "sae_backward x");
  detail::check_dim<T>(target.rows(), x.rows(), "sae_backward target rows");
  detail::check_dim<T>(target.cols(), p.b_dec.size(), "sae_backward target");

  const Eigen::Index B = x.rows();
  const T invB = T(1) / static_cast<T>(B);

  MatR<T> xp = x;  // encoder input x'
  if (p.uses_pre_encoder_bias()) xp.rowwise() -= p.b_dec.transpose();
  MatR<T> z;
  z.noalias() = xp * p.w_enc.transpose();
  z.rowwise() += p.b_enc.transpose();
  MatR<T> gate =
      (z.array() > p.theta.transpose().array().replicate(B, 1)).template cast<T>().matrix();
  MatR<T> f = z.cwiseProduct(gate);
  MatR<T> x_hat = decode_batch(p, f);

  MatR<T> r2 = T(2) * (x_hat - target);   // B x n
  MatR<T> g_f;                            // B x M, dL/df per example
  g_f.noalias() = r2 * p.w_dec;
  MatR<T> g_z = g_f.cwiseProduct(gate);   // B x M

  GradientsT<T> g;
  g.epsilon = epsilon;
  g.w_dec.noalias() = (invB * r2.transpose()) * f;   // n x M
  g.w_enc.noalias() = (invB * g_z.transpose()) * xp; // M x n
  g.b_enc = invB * g_z.colwise().sum().transpose();
  g.b_dec = invB * r2.colwise().sum().transpose();
  if (p.uses_pre_encoder_bias()) {
    g.b_dec.noalias() -= p.w_enc.transpose() * g.b_enc;
  }

  // rectangle kernel window |z - theta| <= eps/2
  MatR<T> diff = z.rowwise() - p.theta.transpose();
  MatR<T> kernel = (diff.array().abs() <= epsilon / T(2))
                       .template cast<T>()
                       .matrix();
  MatR<T> theta_term =
      kernel.cwiseProduct(g_f.array()
                              .rowwise()
                              .operator*(p.theta.transpose().array())
                              .matrix() +
                          MatR<T>::Constant(B, p.latent_dim(), lambda));
  g.theta = (-invB / epsilon) * theta_term.colwise().sum().transpose();

  if (loss_out) {
    const double Bd = static_cast<double>(B);
    loss_out->recon = (x_hat - target).template cast<double>().squaredNorm() / Bd;
    loss_out->l0 = static_cast<double>((f.array() > T(0)).count()) / Bd;
    loss_out->total = loss_out->recon + static_cast<double>(lambda) * loss_out->l0;
  }
  return g;
}

template <class T>
GradientsT<T> sae_backward(const SaeParamsT<T>& p, const VecX<T>& x, const VecX<T>& target,
                           T lambda, T epsilon) {
  MatR<T> xr = x.transpose();
  MatR<T> tr = target.transpose();
  return sae_backward_batch(p, xr, tr, lambda, epsilon);
}

// ----------------------------- serialization -----------------------------
// Binary layout: magic "JSAE", version u32, kind u8, parameterization u8,
// n u32, M u32, then row-major little-endian float32 in the order
// w_enc, b_enc, w_dec, b_dec, theta.
inline constexpr uint32_t kSaeFormatVersion = 1;

void save_sae(const std::filesystem::path& path, const SaeParamsT<float>& params);
SaeParamsT<float> load_sae(const std::filesystem::path& path);

}  // namespace saekit
