#include "saekit/manifest.hpp"

namespace saekit {

namespace {

std::filesystem::path manifest_path(const std::filesystem::path& primary_output) {
  auto p = primary_output;
  p += ".manifest";
  return p;
}

KeyValueMap manifest_kv(const Manifest& m, bool with_hashes) {
  KeyValueMap kv;
  kv["command"] = m.command;
  for (const auto& [k, v] : m.config) kv["config." + k] = v;
  size_t i = 0;
  for (const auto& in : m.inputs) {
    std::string key = "input." + std::to_string(i++);
    kv[key] = in.string();
    if (with_hashes) {
      char hex[32];
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(hash_file(in)));
      kv[key + ".fnv64"] = hex;
    }
  }
  i = 0;
  for (const auto& out : m.outputs) {
    std::string key = "output." + std::to_string(i++);
    kv[key] = out.string();
    if (with_hashes) {
      char hex[32];
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(hash_file(out)));
      kv[key + ".fnv64"] = hex;
    }
  }
  return kv;
}

}  // namespace

void write_manifest(const std::filesystem::path& primary_output, const Manifest& manifest) {
  write_key_value_file(manifest_path(primary_output), manifest_kv(manifest, true));
}

bool manifest_matches(const std::filesystem::path& primary_output, const Manifest& manifest) {
  const auto path = manifest_path(primary_output);
  if (!std::filesystem::exists(path)) return false;
  KeyValueMap existing;
  try {
    existing = read_key_value_file(path);
  } catch (const std::exception&) {
    return false;
  }
  // compare command + config; artifact hashes are recorded, not compared,
  // since outputs are reproduced rather than trusted
  KeyValueMap want = manifest_kv(manifest, false);
  for (const auto& [k, v] : want) {
    if (k.rfind("config.", 0) != 0 && k != "command") continue;
    auto it = existing.find(k);
    if (it == existing.end() || it->second != v) return false;
  }
  for (const auto& out : manifest.outputs) {
    if (!std::filesystem::exists(out)) return false;
  }
  return true;
}

}  // namespace saekit
