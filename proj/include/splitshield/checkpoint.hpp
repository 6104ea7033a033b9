#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splitshield/graph.hpp"

namespace splitshield {

// Weight container with a pinned binary layout:
//   magic "SSHD", version u32 LE, entry count u32 LE, then per entry:
//   name length u16 LE, UTF-8 name, dtype u8 (0 = f32), ndim u8,
//   dims u64 LE each, raw f32 LE payload.
// Save -> load round-trips are bit-exact and preserve manifest order.
struct CheckpointEntry {
    std::string name;
    std::uint8_t dtype = 0;  // 0 = f32
    std::vector<std::uint64_t> dims;
    std::vector<float> values;

    bool operator==(const CheckpointEntry&) const = default;
};

struct Checkpoint {
    std::vector<CheckpointEntry> entries;

    bool operator==(const Checkpoint&) const = default;
};

constexpr std::uint32_t kCheckpointVersion = 1;

Checkpoint save_checkpoint(const ModelGraph& model);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
// Throws on corrupt header, truncated payload, or unsupported dtype.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint_file(const std::string& path);

// Fills `structure`'s weights from the checkpoint. The entry set must match
// the graph's weight names and shapes exactly.
ModelGraph load_checkpoint(const Checkpoint& ck, const ModelGraph& structure);
// Convenience: rebuild the graph from a registered architecture first.
ModelGraph load_checkpoint(const Checkpoint& ck, const ArchSpec& arch);

}  // namespace splitshield
