#pragma once

#include <cstdint>
#include <vector>

#include "causalscope/model.hpp"
#include "causalscope/safetensors.hpp"

namespace causalscope {

// Deterministic random GPT-2 checkpoint in the released naming and [in, out]
// Conv1D layout. Values depend only on (config, seed, tensor name, index),
// using integer hashing and no libm calls, so files are bit-identical across hosts.
std::vector<safetensors::NamedTensor> synthetic_checkpoint(const ModelConfig& config, std::uint64_t seed);

// A small geometry used by unit tests.
ModelConfig tiny_config(int vocab_size = 300);

} // namespace causalscope
