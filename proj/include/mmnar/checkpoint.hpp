#pragma once

#include <string>
#include <vector>

#include "mmnar/tape.hpp"

// Parameter checkpoint: magic + version, a metadata string (JSON), a manifest
// of (name, shape) pairs, then the flat value arrays in manifest order.
// All integers and doubles are little-endian.

namespace mmnar {

struct CheckpointData {
  std::string meta;  // free-form JSON (config hash, model dims, ...)
  std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const ParamStore& params, const std::string& meta, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

// Copies loaded values into an existing store; throws if the manifest does
// not match the store's names and shapes exactly.
void load_checkpoint_into(const CheckpointData& data, ParamStore& params);

}  // namespace mmnar
