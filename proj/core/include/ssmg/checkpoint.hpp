#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ssmg/tensor.hpp"

namespace ssmg {

// Versioned binary container: magic "SSMG", format version, a JSON config
// blob, then named float32 tensors.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

struct Checkpoint {
    std::string config_json;
    std::map<std::string, Tensor> tensors;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace ssmg
