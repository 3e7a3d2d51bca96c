// SPDX-License-Identifier: Apache-2.0
#include "stgr/tensorcore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::tensor {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'G', 'R', 'C', 'K', 'P', 'T'};

template <class T>
void put_le(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}

    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return v;
    }

    std::string get_bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) throw ParseError(fmt::format("checkpoint truncated while reading {}", what));
    }

    std::span<const char> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t.value;
    return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(out, Checkpoint::kVersion);
    put_le<std::uint64_t>(out, ckpt.seed);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& nt : ckpt.tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
        out += nt.name;
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nt.value.rank()));
        for (auto d : nt.value.shape()) put_le<std::uint64_t>(out, d);
        for (double v : nt.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

Checkpoint parse_checkpoint(std::span<const char> bytes) {
    Reader r(bytes);
    if (r.get_bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
        throw ParseError("not a checkpoint file (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != Checkpoint::kVersion) throw ParseError(fmt::format("unsupported checkpoint version {}", version));
    Checkpoint ckpt;
    ckpt.seed = r.get<std::uint64_t>("seed");
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t k = 0; k < count; ++k) {
        NamedTensor nt;
        nt.name = r.get_bytes(r.get<std::uint32_t>("name length"), "name");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8) throw ParseError(fmt::format("tensor '{}' has implausible rank {}", nt.name, rank));
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint64_t>("dimension");
        std::vector<double> data(shape_size(shape));
        for (auto& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>("tensor data"));
        nt.value = Tensor(std::move(shape), std::move(data));
        ckpt.tensors.push_back(std::move(nt));
    }
    if (!r.done()) throw ParseError("trailing bytes after checkpoint payload");
    return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError(fmt::format("cannot open '{}' for writing", tmp.string()));
        f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!f) throw IoError(fmt::format("write to '{}' failed", tmp.string()));
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError(fmt::format("cannot rename '{}' to '{}': {}", tmp.string(), path.string(), ec.message()));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse_checkpoint(bytes);
}

} // namespace stgr::tensor
