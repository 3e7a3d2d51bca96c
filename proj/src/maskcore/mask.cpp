// SPDX-License-Identifier: Apache-2.0
#include "stgr/maskcore/mask.hpp"

#include <algorithm>
#include <charconv>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::mask {

namespace {

// Builds a canonical run list from sorted, disjoint, non-touching foreground intervals.
class RunBuilder {
public:
    explicit RunBuilder(std::uint64_t total) : total_(total) {}

    void add_set(std::uint64_t begin, std::uint64_t end) {
        if (end <= begin) return;
        if (begin > cursor_) {
            push(false, begin - cursor_);
        }
        push(true, end - begin);
        cursor_ = end;
    }

    std::vector<std::uint64_t> finish() {
        if (cursor_ < total_) push(false, total_ - cursor_);
        if (runs_.empty()) runs_.push_back(0);
        return std::move(runs_);
    }

private:
    void push(bool set, std::uint64_t len) {
        // Even slots hold background runs, odd slots foreground.
        const bool next_slot_set = runs_.size() % 2 == 1;
        if (runs_.empty() && set) {
            runs_.push_back(0);
            runs_.push_back(len);
        } else if (next_slot_set == set) {
            runs_.push_back(len);
        } else {
            runs_.back() += len;
        }
    }

    std::uint64_t total_;
    std::uint64_t cursor_ = 0;
    std::vector<std::uint64_t> runs_;
};

std::uint64_t parse_u64(std::string_view tok) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size())
        throw ParseError(fmt::format("mask text: '{}' is not a non-negative integer", tok));
    return v;
}

} // namespace

Mask::Mask(std::uint32_t height, std::uint32_t width) : height_(height), width_(width), runs_{std::uint64_t{height} * width} {}

Mask Mask::from_runs(std::uint32_t height, std::uint32_t width, std::vector<std::uint64_t> runs) {
    if (runs.empty()) throw ValidationError("mask: run list is empty");
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i] == 0 && i != 0)
            throw ValidationError(fmt::format("mask: zero-length run at position {}", i));
        total += runs[i];
    }
    if (total != std::uint64_t{height} * width)
        throw ValidationError(fmt::format("mask: runs cover {} pixels, grid {}x{} has {}", total, height, width,
                                          std::uint64_t{height} * width));
    if (runs.size() == 1 && runs[0] == 0 && total != 0) throw ValidationError("mask: lone zero run");
    Mask m;
    m.height_ = height;
    m.width_ = width;
    m.runs_ = std::move(runs);
    return m;
}

Mask Mask::from_intervals(std::uint32_t height, std::uint32_t width, std::span<const Interval> intervals) {
    const std::uint64_t total = std::uint64_t{height} * width;
    RunBuilder b(total);
    std::uint64_t cur_begin = 0, cur_end = 0;
    bool open = false;
    for (const auto& iv : intervals) {
        if (iv.end > total || iv.begin > iv.end) throw ArgumentError("mask: interval outside grid");
        if (iv.begin == iv.end) continue;
        if (open && iv.begin < cur_end) throw ArgumentError("mask: intervals overlap or are unsorted");
        if (open && iv.begin == cur_end) {
            cur_end = iv.end;
            continue;
        }
        if (open) b.add_set(cur_begin, cur_end);
        cur_begin = iv.begin;
        cur_end = iv.end;
        open = true;
    }
    if (open) b.add_set(cur_begin, cur_end);
    Mask m;
    m.height_ = height;
    m.width_ = width;
    m.runs_ = b.finish();
    return m;
}

Mask Mask::from_bitmap(std::uint32_t height, std::uint32_t width, std::span<const std::uint8_t> bitmap) {
    const std::uint64_t total = std::uint64_t{height} * width;
    if (bitmap.size() != total)
        throw ShapeError(fmt::format("bitmap has {} pixels, grid {}x{} needs {}", bitmap.size(), height, width, total));
    std::vector<Interval> ivs;
    std::uint64_t i = 0;
    while (i < total) {
        if (!bitmap[i]) {
            ++i;
            continue;
        }
        std::uint64_t j = i;
        while (j < total && bitmap[j]) ++j;
        ivs.push_back({i, j});
        i = j;
    }
    return from_intervals(height, width, ivs);
}

Mask Mask::full(std::uint32_t height, std::uint32_t width) {
    Mask m;
    m.height_ = height;
    m.width_ = width;
    m.runs_ = {0, std::uint64_t{height} * width};
    return m;
}

Mask Mask::parse(std::string_view text) {
    std::vector<std::uint64_t> nums;
    std::size_t pos = 0;
    while (pos < text.size()) {
        while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t' || text[pos] == '\n')) ++pos;
        if (pos >= text.size()) break;
        std::size_t end = pos;
        while (end < text.size() && text[end] != ' ' && text[end] != '\t' && text[end] != '\n') ++end;
        nums.push_back(parse_u64(text.substr(pos, end - pos)));
        pos = end;
    }
    if (nums.size() < 3) throw ParseError("mask text: expected 'H W r0 ...'");
    if (nums[0] > UINT32_MAX || nums[1] > UINT32_MAX) throw ParseError("mask text: grid dimension too large");
    return from_runs(static_cast<std::uint32_t>(nums[0]), static_cast<std::uint32_t>(nums[1]),
                     std::vector<std::uint64_t>(nums.begin() + 2, nums.end()));
}

std::string Mask::to_string() const {
    std::string out = fmt::format("{} {}", height_, width_);
    for (auto r : runs_) fmt::format_to(std::back_inserter(out), " {}", r);
    return out;
}

std::vector<std::uint8_t> Mask::to_bitmap() const {
    std::vector<std::uint8_t> bits(pixels(), 0);
    for (const auto& iv : intervals()) std::fill(bits.begin() + iv.begin, bits.begin() + iv.end, 1);
    return bits;
}

std::vector<Interval> Mask::intervals() const {
    std::vector<Interval> out;
    out.reserve(runs_.size() / 2);
    std::uint64_t pos = 0;
    for (std::size_t i = 0; i < runs_.size(); ++i) {
        if (i % 2 == 1) out.push_back({pos, pos + runs_[i]});
        pos += runs_[i];
    }
    return out;
}

void require_same_grid(const Mask& a, const Mask& b) {
    if (a.height() != b.height() || a.width() != b.width())
        throw ShapeError(fmt::format("mask grids differ: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
}

std::uint64_t area(const Mask& a) {
    std::uint64_t n = 0;
    const auto& r = a.runs();
    for (std::size_t i = 1; i < r.size(); i += 2) n += r[i];
    return n;
}

std::uint64_t intersection_area(const Mask& a, const Mask& b) {
    require_same_grid(a, b);
    const auto ia = a.intervals();
    const auto ib = b.intervals();
    std::uint64_t n = 0;
    std::size_t i = 0, j = 0;
    while (i < ia.size() && j < ib.size()) {
        const auto lo = std::max(ia[i].begin, ib[j].begin);
        const auto hi = std::min(ia[i].end, ib[j].end);
        if (lo < hi) n += hi - lo;
        if (ia[i].end < ib[j].end) ++i;
        else ++j;
    }
    return n;
}

double iou(const Mask& a, const Mask& b) {
    require_same_grid(a, b);
    const auto inter = intersection_area(a, b);
    const auto uni = area(a) + area(b) - inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

Mask intersect(const Mask& a, const Mask& b) {
    require_same_grid(a, b);
    const auto ia = a.intervals();
    const auto ib = b.intervals();
    std::vector<Interval> out;
    std::size_t i = 0, j = 0;
    while (i < ia.size() && j < ib.size()) {
        const auto lo = std::max(ia[i].begin, ib[j].begin);
        const auto hi = std::min(ia[i].end, ib[j].end);
        if (lo < hi) out.push_back({lo, hi});
        if (ia[i].end < ib[j].end) ++i;
        else ++j;
    }
    return Mask::from_intervals(a.height(), a.width(), out);
}

Mask unite(const Mask& a, const Mask& b) {
    const Mask both[] = {a, b};
    return union_all(both);
}

Mask complement(const Mask& a) {
    auto runs = a.runs();
    if (a.pixels() == 0) return a;
    if (runs.front() == 0) runs.erase(runs.begin());
    else runs.insert(runs.begin(), 0);
    return Mask::from_runs(a.height(), a.width(), std::move(runs));
}

Mask union_all(std::span<const Mask> masks) {
    if (masks.empty()) throw ArgumentError("union_all: empty mask list");
    std::vector<Interval> all;
    for (const auto& m : masks) {
        require_same_grid(masks.front(), m);
        auto ivs = m.intervals();
        all.insert(all.end(), ivs.begin(), ivs.end());
    }
    std::sort(all.begin(), all.end(), [](const Interval& x, const Interval& y) { return x.begin < y.begin; });
    std::vector<Interval> merged;
    for (const auto& iv : all) {
        if (!merged.empty() && iv.begin <= merged.back().end) merged.back().end = std::max(merged.back().end, iv.end);
        else merged.push_back(iv);
    }
    return Mask::from_intervals(masks.front().height(), masks.front().width(), merged);
}

BBox bbox(const Mask& a) {
    if (a.empty()) throw DegenerateInputError("bbox of an empty mask");
    const std::uint64_t w = a.width();
    BBox box{a.width() - 1, a.height() - 1, 0, 0};
    for (const auto& iv : a.intervals()) {
        const auto y0 = static_cast<std::uint32_t>(iv.begin / w);
        const auto y1 = static_cast<std::uint32_t>((iv.end - 1) / w);
        const auto x0 = static_cast<std::uint32_t>(iv.begin % w);
        const auto x1 = static_cast<std::uint32_t>((iv.end - 1) % w);
        box.y_min = std::min(box.y_min, y0);
        box.y_max = std::max(box.y_max, y1);
        box.x_min = std::min(box.x_min, y1 > y0 ? 0u : x0);
        box.x_max = std::max(box.x_max, y1 > y0 ? a.width() - 1 : x1);
    }
    return box;
}

tensor::Tensor masked_pool(const tensor::Tensor& feature_map, const Mask& mask) {
    const auto& s = feature_map.shape();
    if (s.size() != 3 || s[0] != mask.height() || s[1] != mask.width())
        throw ShapeError(fmt::format("masked_pool: feature map {} does not match {}x{} mask", tensor::shape_string(s),
                                     mask.height(), mask.width()));
    if (mask.empty()) throw DegenerateInputError("masked_pool: empty mask has nothing to pool");
    const std::size_t d = s[2];
    tensor::Tensor out({d});
    const auto src = feature_map.data();
    std::uint64_t count = 0;
    for (const auto& iv : mask.intervals()) {
        for (auto p = iv.begin; p < iv.end; ++p) {
            const double* row = src.data() + p * d;
            for (std::size_t k = 0; k < d; ++k) out[k] += row[k];
        }
        count += iv.end - iv.begin;
    }
    for (std::size_t k = 0; k < d; ++k) out[k] /= static_cast<double>(count);
    return out;
}

} // namespace stgr::mask
