#pragma once

#include <CLI11.hpp>

#include "saekit/manifest.hpp"
#include "saekit/shard.hpp"
#include "saekit/standardize.hpp"

#include <iostream>

namespace saekit::cli {

// Normalization constant files: key=value with c, sample_count, dim, site, layer.
struct NormFile {
  double c = 0;
  int64_t sample_count = 0;
  uint32_t dim = 0;
  std::string site;
  int layer = 0;
};

inline void write_norm_file(const std::filesystem::path& path, const NormFile& nf) {
  KeyValueMap kv;
  kv["c"] = format_double(nf.c);
  kv["sample_count"] = std::to_string(nf.sample_count);
  kv["dim"] = std::to_string(nf.dim);
  kv["site"] = nf.site;
  kv["layer"] = std::to_string(nf.layer);
  write_key_value_file(path, kv);
}

inline NormFile read_norm_file(const std::filesystem::path& path) {
  KeyValueMap kv = read_key_value_file(path);
  NormFile nf;
  auto need = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError(path.string() + ": missing key " + k);
    return it->second;
  };
  nf.c = parse_double(need("c"));
  nf.sample_count = parse_int(need("sample_count"));
  nf.dim = static_cast<uint32_t>(parse_int(need("dim")));
  if (auto it = kv.find("site"); it != kv.end()) nf.site = it->second;
  if (auto it = kv.find("layer"); it != kv.end()) nf.layer = static_cast<int>(parse_int(it->second));
  if (!(nf.c > 0)) throw ConfigError(path.string() + ": c must be > 0");
  return nf;
}

// Resolves --norm / --norm-c pairs; exactly one must be present unless
// `optional` and neither is given.
inline std::optional<double> resolve_norm(const std::string& norm_path, double norm_c,
                                          bool optional = false) {
  const bool has_file = !norm_path.empty();
  const bool has_c = norm_c > 0;
  if (has_file && has_c) throw ConfigError("give either --norm or --norm-c, not both");
  if (has_file) return read_norm_file(norm_path).c;
  if (has_c) return norm_c;
  if (optional) return std::nullopt;
  throw ConfigError("a normalization constant is required (--norm FILE or --norm-c X)");
}

inline void note(const std::string& message) { std::cout << message << "\n" << std::flush; }

void register_data_commands(CLI::App& app);
void register_train_commands(CLI::App& app);
void register_eval_commands(CLI::App& app);

}  // namespace saekit::cli
