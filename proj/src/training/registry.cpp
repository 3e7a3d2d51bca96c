// SPDX-License-Identifier: Apache-2.0
#include "stgr/training/registry.hpp"

#include <openssl/evp.h>

#include <fmt/format.h>

#include "stgr/error.hpp"
#include "stgr/tensorcore/checkpoint.hpp"

namespace stgr::train {

void ParamRegistry::add(ParamRef ref) {
    const auto& name = ref.param->name;
    if (index_.contains(name)) throw ContractError(fmt::format("parameter {} registered twice", name));
    const bool should_train = ref.group != Group::backbone_stub;
    if (ref.param->requires_grad != should_train)
        throw ContractError(fmt::format("parameter {} in group {} has the wrong trainable flag", name,
                                        tvid::group_name(ref.group)));
    index_[name] = entries_.size();
    entries_.push_back(ref);
}

void ParamRegistry::add_all(const std::vector<ParamRef>& refs) {
    for (const auto& r : refs) add(r);
}

void ParamRegistry::declare_virtual(const std::string& name, std::uint64_t count) { virtual_[name] = count; }

Parameter* ParamRegistry::find(const std::string& name) const {
    const auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second].param;
}

std::uint64_t ParamRegistry::trainable_count() const {
    std::uint64_t n = 0;
    for (const auto& e : entries_)
        if (e.param->requires_grad) n += e.param->value.size();
    return n;
}

std::uint64_t ParamRegistry::frozen_count() const {
    std::uint64_t n = 0;
    for (const auto& e : entries_)
        if (!e.param->requires_grad) n += e.param->value.size();
    return n;
}

std::uint64_t ParamRegistry::virtual_count() const {
    std::uint64_t n = 0;
    for (const auto& [_, c] : virtual_) n += c;
    return n;
}

std::map<Group, GroupCount> ParamRegistry::group_counts() const {
    std::map<Group, GroupCount> out;
    for (const auto& e : entries_) {
        auto& g = out[e.group];
        (e.param->requires_grad ? g.trainable : g.frozen) += e.param->value.size();
    }
    return out;
}

double ParamRegistry::trainable_fraction() const {
    if (entries_.empty() && virtual_.empty()) throw ArgumentError("trainable fraction of an empty registry");
    const auto total = trainable_count() + frozen_count() + virtual_count();
    if (total == 0) throw ArgumentError("registry holds no parameters");
    return static_cast<double>(trainable_count()) / static_cast<double>(total);
}

std::vector<Parameter*> ParamRegistry::trainable() const {
    std::vector<Parameter*> out;
    for (const auto& e : entries_)
        if (e.param->requires_grad) out.push_back(e.param);
    return out;
}

std::vector<Parameter*> ParamRegistry::frozen() const {
    std::vector<Parameter*> out;
    for (const auto& e : entries_)
        if (!e.param->requires_grad) out.push_back(e.param);
    return out;
}

std::string ParamRegistry::serialize_frozen() const {
    tensor::Checkpoint c;
    for (const auto* p : frozen()) c.tensors.push_back({p->name, p->value});
    return tensor::serialize_checkpoint(c);
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("SHA-256 digest failed");
    std::string out;
    for (unsigned i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
}

} // namespace stgr::train
