#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "atlasgen/nn.hpp"
#include "atlasgen/tensor.hpp"

namespace atlasgen {

// Single-file checkpoint: JSON metadata (kind, architecture config, trained
// flag, step, ...) followed by named raw double tensors. Writes are atomic
// (temp file + rename).
struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

void write_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

// FNV-1a of a file's bytes, hex-encoded; used in manifests.
std::string file_hash_hex(const std::string& path);

// Copies tensors by name into the collected parameters; shapes must match.
void load_params(ad::ParamMap& params, const Checkpoint& ck);
void save_params(const ad::ParamMap& params, Checkpoint& ck);

// Guard used by consumers that require a finished model ("trained": true).
void require_trained(const Checkpoint& ck, const std::string& what);

} // namespace atlasgen
