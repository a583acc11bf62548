#pragma once

// Run manifests: every CLI command records its resolved configuration and the
// FNV-64 hashes of its input and output artifacts next to its primary output.

#include "saekit/common.hpp"

#include <vector>

namespace saekit {

struct Manifest {
  std::string command;
  KeyValueMap config;  // resolved settings
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
};

// Writes <primary_output>.manifest.
void write_manifest(const std::filesystem::path& primary_output, const Manifest& manifest);

// True when an existing manifest matches this command + config (used to make
// commands idempotent: matching runs may be skipped).
bool manifest_matches(const std::filesystem::path& primary_output, const Manifest& manifest);

}  // namespace saekit
