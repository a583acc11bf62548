#include "saekit/core.hpp"

#include <cstring>

namespace saekit {

std::string to_string(SaeKind k) {
  return k == SaeKind::autoencoder ? "autoencoder" : "transcoder";
}
std::string to_string(Parameterization p) {
  return p == Parameterization::training ? "training" : "inference";
}

namespace {

void put_f32_block(std::string& out, const float* data, size_t count) {
  // Little-endian IEEE floats; on this target a straight copy.
  static_assert(sizeof(float) == 4);
  size_t off = out.size();
  out.resize(off + count * 4);
  std::memcpy(out.data() + off, data, count * 4);
}

void get_f32_block(const std::string& in, size_t& off, float* data, size_t count,
                   const std::filesystem::path& path) {
  if (off + count * 4 > in.size()) {
    throw IoError("truncated SAE file: " + path.string() + " at offset " + std::to_string(off));
  }
  std::memcpy(data, in.data() + off, count * 4);
  off += count * 4;
}

}  // namespace

void save_sae(const std::filesystem::path& path, const SaeParamsT<float>& params) {
  params.validate();
  const auto M = static_cast<uint32_t>(params.latent_dim());
  const auto n = static_cast<uint32_t>(params.input_dim());
  std::string out;
  out.reserve(18 + 4ull * (2ull * M * n + 2 * M + 2 * n));
  out += "JSAE";
  put_u32(out, kSaeFormatVersion);
  put_u8(out, static_cast<uint8_t>(params.kind));
  put_u8(out, static_cast<uint8_t>(params.parameterization));
  put_u32(out, n);
  put_u32(out, M);
  put_f32_block(out, params.w_enc.data(), static_cast<size_t>(M) * n);
  put_f32_block(out, params.b_enc.data(), M);
  put_f32_block(out, params.w_dec.data(), static_cast<size_t>(n) * M);
  put_f32_block(out, params.b_dec.data(), n);
  put_f32_block(out, params.theta.data(), M);
  atomic_write_file(path, out);
}

SaeParamsT<float> load_sae(const std::filesystem::path& path) {
  std::string in = read_file(path);
  if (in.size() < 18 || in.compare(0, 4, "JSAE") != 0) {
    throw IoError("not a JSAE file: " + path.string());
  }
  const auto* p = reinterpret_cast<const unsigned char*>(in.data());
  uint32_t version = get_u32(p + 4);
  if (version != kSaeFormatVersion) {
    throw IoError("unsupported JSAE version " + std::to_string(version) + ": " + path.string());
  }
  uint8_t kind = p[8], param = p[9];
  if (kind > 1 || param > 1) throw IoError("corrupt JSAE header: " + path.string());
  uint32_t n = get_u32(p + 10);
  uint32_t M = get_u32(p + 14);
  if (n < 1 || M < 1) throw IoError("corrupt JSAE header (n or M = 0): " + path.string());

  SaeParamsT<float> out;
  out.kind = static_cast<SaeKind>(kind);
  out.parameterization = static_cast<Parameterization>(param);
  out.w_enc.resize(M, n);
  out.b_enc.resize(M);
  out.w_dec.resize(n, M);
  out.b_dec.resize(n);
  out.theta.resize(M);
  size_t off = 18;
  get_f32_block(in, off, out.w_enc.data(), static_cast<size_t>(M) * n, path);
  get_f32_block(in, off, out.b_enc.data(), M, path);
  get_f32_block(in, off, out.w_dec.data(), static_cast<size_t>(n) * M, path);
  get_f32_block(in, off, out.b_dec.data(), n, path);
  get_f32_block(in, off, out.theta.data(), M, path);
  if (off != in.size()) {
    throw IoError("trailing bytes in SAE file: " + path.string());
  }
  out.validate();
  return out;
}

}  // namespace saekit
