// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stgr/tensorcore/tensor.hpp"

namespace stgr::tensor {

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Flat parameter container.
///
/// Layout (all integers little-endian):
///   "STGRCKPT" | u32 version | u64 seed | u32 count |
///   count x ( u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[] )
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t seed = 0;
    std::vector<NamedTensor> tensors;

    const Tensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const char> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

} // namespace stgr::tensor
