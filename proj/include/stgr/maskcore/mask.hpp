// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stgr/tensorcore/tensor.hpp"

namespace stgr::mask {

/// Half-open pixel interval [begin, end) in row-major linear index space.
struct Interval {
    std::uint64_t begin;
    std::uint64_t end;
};

/// Inclusive, axis-aligned pixel box.
struct BBox {
    std::uint32_t x_min;
    std::uint32_t y_min;
    std::uint32_t x_max;
    std::uint32_t y_max;

    friend bool operator==(const BBox&, const BBox&) = default;
};

/// Binary mask on an H x W grid stored as row-major run lengths.
///
/// Runs alternate background/foreground and the first run always counts background
/// pixels, so a mask starting with a set pixel has a leading zero. Apart from that
/// leading zero no run is empty, which makes the encoding canonical: two masks are
/// equal exactly when their runs are equal.
class Mask {
public:
    /// Empty mask of the given size.
    Mask(std::uint32_t height, std::uint32_t width);

    /// Validates the run list; throws ValidationError if it is not canonical or
    /// does not cover exactly height * width pixels.
    static Mask from_runs(std::uint32_t height, std::uint32_t width, std::vector<std::uint64_t> runs);

    static Mask from_bitmap(std::uint32_t height, std::uint32_t width, std::span<const std::uint8_t> bitmap);

    /// Builds a mask from sorted, possibly touching intervals.
    static Mask from_intervals(std::uint32_t height, std::uint32_t width, std::span<const Interval> intervals);

    static Mask full(std::uint32_t height, std::uint32_t width);

    /// Parses the text form "H W r0 r1 ...".
    static Mask parse(std::string_view text);

    std::string to_string() const;

    std::vector<std::uint8_t> to_bitmap() const;

    std::uint32_t height() const { return height_; }
    std::uint32_t width() const { return width_; }
    std::uint64_t pixels() const { return std::uint64_t{height_} * width_; }
    const std::vector<std::uint64_t>& runs() const { return runs_; }

    /// Foreground intervals in increasing order.
    std::vector<Interval> intervals() const;

    bool empty() const { return runs_.size() < 2; }

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    Mask() = default;

    std::uint32_t height_ = 0;
    std::uint32_t width_ = 0;
    std::vector<std::uint64_t> runs_;
};

/// Number of foreground pixels.
std::uint64_t area(const Mask& a);

std::uint64_t intersection_area(const Mask& a, const Mask& b);

/// |a ∩ b| / |a ∪ b|. Two empty masks agree perfectly (1.0); one empty mask scores 0.0.
double iou(const Mask& a, const Mask& b);

Mask intersect(const Mask& a, const Mask& b);
Mask unite(const Mask& a, const Mask& b);
Mask complement(const Mask& a);

/// Pixel-wise OR of a non-empty list.
Mask union_all(std::span<const Mask> masks);

BBox bbox(const Mask& a);

/// Mean of the feature vectors under the mask. feature_map has shape [H, W, d].
tensor::Tensor masked_pool(const tensor::Tensor& feature_map, const Mask& mask);

void require_same_grid(const Mask& a, const Mask& b);

} // namespace stgr::mask
