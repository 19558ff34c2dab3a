#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfl/optim.hpp"
#include "mfl/tensor.hpp"

namespace mfl {

// Model snapshot; round-trips bit-exactly through the MFL1 file format:
// magic "MFL1\n", one structured-text header line with per-parameter name,
// shape and byte offset, then little-endian 64-bit floats.
struct Checkpoint {
    std::string arch;
    std::int64_t step = 0;
    std::int64_t task_index = 0;
    std::uint64_t seed = 0;
    ParamList params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mfl
