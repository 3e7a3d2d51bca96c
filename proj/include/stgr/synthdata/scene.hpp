// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stgr/maskcore/mask.hpp"
#include "stgr/tensorcore/tensor.hpp"

namespace stgr::synth {

/// One phantom image with its candidate pool.
struct Scene {
    std::string scene_id;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<mask::Mask> candidates;
    tensor::Tensor features;                  // [N x d_v]
    tensor::Tensor attributes;                // [K x d_t]; may be empty when guidance is given
    std::optional<tensor::Tensor> guidance;   // [K x d_v], precomputed
    std::vector<mask::Mask> gt;               // referenced lesions
    std::optional<std::vector<int>> labels;
    std::optional<std::vector<double>> true_iou;
    std::uint64_t seed = 0;

    std::size_t size() const { return candidates.size(); }

    bool operator==(const Scene&) const = default;
};

/// Checks every Scene invariant; throws ValidationError naming the first violation.
void validate_scene(const Scene& s);

} // namespace stgr::synth
