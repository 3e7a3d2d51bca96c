// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stgr/tvid/tvid.hpp"

namespace stgr::train {

using tensor::Parameter;
using tvid::Group;
using tvid::ParamRef;

struct GroupCount {
    std::uint64_t trainable = 0;
    std::uint64_t frozen = 0;
};

/// Every tensor of a model, tagged with its group and trainable flag, plus declared
/// sizes of backbones that are not instantiated.
class ParamRegistry {
public:
    void add(ParamRef ref);
    void add_all(const std::vector<ParamRef>& refs);
    void declare_virtual(const std::string& name, std::uint64_t count);

    const std::vector<ParamRef>& entries() const { return entries_; }
    const std::map<std::string, std::uint64_t>& virtual_counts() const { return virtual_; }
    Parameter* find(const std::string& name) const;

    std::uint64_t trainable_count() const;
    std::uint64_t frozen_count() const;
    std::uint64_t virtual_count() const;
    std::map<Group, GroupCount> group_counts() const;

    /// trainable / (trainable + frozen + virtual). Throws ArgumentError when empty.
    double trainable_fraction() const;

    std::vector<Parameter*> trainable() const;
    std::vector<Parameter*> frozen() const;

    /// Checkpoint bytes of the frozen tensors, in registration order.
    std::string serialize_frozen() const;

private:
    std::vector<ParamRef> entries_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, std::uint64_t> virtual_;
};

/// Hex SHA-256.
std::string sha256_hex(std::string_view bytes);

} // namespace stgr::train
