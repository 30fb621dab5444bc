#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "edlab/intervene.hpp"
#include "edlab/model.hpp"
#include "edlab/train.hpp"

namespace edlab {

// Single-file checkpoint:
//   "EDLB" | u32 version | u64 header length | JSON header | payload | u32 CRC-32(payload)
// Integers and float32 payload values are little-endian. The header's
// "tensors" manifest lists name, shape, offset and byte length of every
// tensor; the ranges tile the payload in manifest order.
inline constexpr char kCheckpointMagic[4] = {'E', 'D', 'L', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    enum class Kind { io, magic, version, truncated, crc, header, manifest };
    CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
    Kind kind;
};

struct Checkpoint {
    Regime regime = Regime::ablated;
    Processor processor;
    std::optional<Editor> editor;
    EditSpec edit;
    TrainConfig train;
    // Moments for the trained parameter set: the editor in editor runs,
    // otherwise the processor. Empty moments mean no optimizer state.
    OptimizerState optimizer;

    const Params& trained_params() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// CRC-32 (IEEE) as stored in the trailer.
std::uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace edlab
