// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <fmt/format.h>
#include <json.hpp>

#include "stgr/error.hpp"
#include "stgr/synthdata/generator.hpp"
#include "stgr/tensorcore/checkpoint.hpp"
#include "stgr/training/losses.hpp"
#include "stgr/training/registry.hpp"

namespace stgr::synth {

using json = nlohmann::ordered_json;
using mask::Mask;
using tensor::Tensor;

namespace {

constexpr int kSceneSchema = 1;

json matrix_json(const Tensor& t) {
    json rows = json::array();
    for (std::size_t i = 0; i < t.rows(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

json masks_json(const std::vector<Mask>& masks) {
    json arr = json::array();
    for (const auto& m : masks) arr.push_back(json{{"rle", m.to_string()}});
    return arr;
}

/// Field access with the JSON path in every error.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

    bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    Reader at(const char* key) const {
        if (!j_.is_object()) throw ParseError(fmt::format("{}: expected an object", path_));
        if (!j_.contains(key)) throw ParseError(fmt::format("{}.{}: missing field", path_, key));
        return Reader(j_.at(key), path_ + "." + key);
    }

    Reader at(std::size_t i) const { return Reader(j_.at(i), fmt::format("{}[{}]", path_, i)); }

    std::size_t size() const {
        if (!j_.is_array()) throw ParseError(fmt::format("{}: expected an array", path_));
        return j_.size();
    }

    double number() const {
        if (!j_.is_number()) throw ParseError(fmt::format("{}: expected a number", path_));
        return j_.get<double>();
    }

    std::uint64_t uint() const {
        if (!j_.is_number_unsigned() && !(j_.is_number_integer() && j_.get<std::int64_t>() >= 0))
            throw ParseError(fmt::format("{}: expected a non-negative integer", path_));
        return j_.get<std::uint64_t>();
    }

    std::string string() const {
        if (!j_.is_string()) throw ParseError(fmt::format("{}: expected a string", path_));
        return j_.get<std::string>();
    }

    Tensor matrix() const {
        const auto r = size();
        std::size_t c = 0;
        std::vector<double> data;
        for (std::size_t i = 0; i < r; ++i) {
            const Reader row = at(i);
            const auto n = row.size();
            if (i == 0) c = n;
            else if (n != c) throw ParseError(fmt::format("{}: ragged row ({} vs {} values)", row.path_, n, c));
            for (std::size_t j = 0; j < n; ++j) data.push_back(row.at(j).number());
        }
        return Tensor({r, c}, std::move(data));
    }

    std::vector<Mask> masks() const {
        std::vector<Mask> out;
        for (std::size_t i = 0; i < size(); ++i) {
            const Reader item = at(i);
            try {
                out.push_back(Mask::parse(item.at("rle").string()));
            } catch (const ValidationError& e) {
                throw ValidationError(fmt::format("{}.rle: {}", item.path_, e.what()));
            } catch (const ParseError& e) {
                throw ParseError(fmt::format("{}.rle: {}", item.path_, e.what()));
            }
        }
        return out;
    }

    const std::string& path() const { return path_; }

private:
    const json& j_;
    std::string path_;
};

json parse_json(std::string_view text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(fmt::format("{}: {}", what, e.what()));
    }
}

/// Fields shared by scene files and external dumps.
Scene read_common(const Reader& r) {
    Scene s;
    s.height = static_cast<std::uint32_t>(r.at("height").uint());
    s.width = static_cast<std::uint32_t>(r.at("width").uint());
    s.candidates = r.at("candidates").masks();
    s.features = r.at("features").matrix();
    if (r.has("attributes")) s.attributes = r.at("attributes").matrix();
    if (r.has("guidance")) s.guidance = r.at("guidance").matrix();
    s.gt = r.at("gt").masks();
    return s;
}

} // namespace

void validate_scene(const Scene& s) {
    auto fail = [&](const std::string& why) {
        throw ValidationError(fmt::format("scene {}: {}", s.scene_id.empty() ? "?" : s.scene_id, why));
    };
    if (s.height == 0 || s.width == 0) fail("grid dimensions must be positive");
    const auto n = s.candidates.size();
    if (n == 0) fail("no candidates");
    for (std::size_t i = 0; i < n; ++i)
        if (s.candidates[i].height() != s.height || s.candidates[i].width() != s.width)
            fail(fmt::format("candidate {} is {}x{}, scene grid is {}x{}", i, s.candidates[i].height(),
                             s.candidates[i].width(), s.height, s.width));
    for (std::size_t i = 0; i < s.gt.size(); ++i)
        if (s.gt[i].height() != s.height || s.gt[i].width() != s.width) fail(fmt::format("gt mask {} is off-grid", i));
    if (s.features.rank() != 2 || s.features.rows() != n)
        fail(fmt::format("{} feature rows for {} candidates", s.features.rank() == 2 ? s.features.rows() : 0, n));
    if (s.features.cols() == 0) fail("features have zero width");
    auto finite = [&](const Tensor& t, const char* what) {
        for (double v : t.data())
            if (!std::isfinite(v)) fail(fmt::format("non-finite value in {}", what));
    };
    finite(s.features, "features");
    if (s.guidance) {
        if (s.guidance->rank() != 2 || s.guidance->rows() == 0) fail("guidance must hold at least one vector");
        finite(*s.guidance, "guidance");
    } else if (s.attributes.rank() != 2 || s.attributes.rows() == 0 || s.attributes.cols() == 0) {
        fail("scene needs attributes or guidance");
    }
    if (s.attributes.size() > 0) finite(s.attributes, "attributes");
    if (s.labels) {
        if (s.labels->size() != n) fail(fmt::format("{} labels for {} candidates", s.labels->size(), n));
        for (int l : *s.labels)
            if (l != 0 && l != 1) fail(fmt::format("label {} is not binary", l));
    }
    if (s.true_iou) {
        if (s.true_iou->size() != n) fail(fmt::format("{} true_iou values for {} candidates", s.true_iou->size(), n));
        for (double v : *s.true_iou)
            if (!(v >= 0.0 && v <= 1.0)) fail(fmt::format("true_iou {} outside [0, 1]", v));
    }
}

std::string scene_to_json(const Scene& s) {
    json j;
    j["schema_version"] = kSceneSchema;
    j["scene_id"] = s.scene_id;
    j["height"] = s.height;
    j["width"] = s.width;
    j["candidates"] = masks_json(s.candidates);
    j["features"] = matrix_json(s.features);
    j["attributes"] = s.attributes.size() > 0 ? matrix_json(s.attributes) : json::array();
    if (s.guidance) j["guidance"] = matrix_json(*s.guidance);
    j["gt"] = masks_json(s.gt);
    if (s.labels) j["labels"] = *s.labels;
    if (s.true_iou) j["true_iou"] = *s.true_iou;
    j["seed"] = s.seed;
    return j.dump(1) + "\n";
}

Scene scene_from_json(std::string_view text) {
    const json j = parse_json(text, "scene");
    const Reader r(j, "$");
    const auto version = r.at("schema_version").uint();
    if (version != kSceneSchema)
        throw ParseError(fmt::format("$.schema_version: unsupported version {} (expected {})", version, kSceneSchema));
    Scene s = read_common(r);
    s.scene_id = r.at("scene_id").string();
    if (s.attributes.size() == 0) s.attributes = Tensor();
    if (r.has("labels")) {
        const Reader l = r.at("labels");
        std::vector<int> labels;
        for (std::size_t i = 0; i < l.size(); ++i) labels.push_back(static_cast<int>(l.at(i).uint()));
        s.labels = std::move(labels);
    }
    if (r.has("true_iou")) {
        const Reader t = r.at("true_iou");
        std::vector<double> v;
        for (std::size_t i = 0; i < t.size(); ++i) v.push_back(t.at(i).number());
        s.true_iou = std::move(v);
    }
    s.seed = r.at("seed").uint();
    validate_scene(s);
    return s;
}

void save_scene(const std::filesystem::path& path, const Scene& s) {
    tensor::write_file_atomic(path, scene_to_json(s));
}

Scene load_scene(const std::filesystem::path& path) {
    const std::string text = tensor::read_file(path);
    try {
        return scene_from_json(text);
    } catch (const ParseError& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    } catch (const ValidationError& e) {
        throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

std::string manifest_to_json(const Manifest& m) {
    json j;
    j["schema_version"] = Manifest::kSchemaVersion;
    json arr = json::array();
    for (const auto& e : m.scenes) arr.push_back(json{{"id", e.id}, {"path", e.path}, {"digest", e.digest}});
    j["scenes"] = std::move(arr);
    return j.dump(1) + "\n";
}

Manifest manifest_from_json(std::string_view text) {
    const json j = parse_json(text, "manifest");
    const Reader r(j, "$");
    if (r.at("schema_version").uint() != Manifest::kSchemaVersion) throw ParseError("$.schema_version: unsupported");
    Manifest m;
    const Reader scenes = r.at("scenes");
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const Reader e = scenes.at(i);
        m.scenes.push_back({e.at("id").string(), e.at("path").string(), e.at("digest").string()});
    }
    return m;
}

Manifest generate_dataset(const PhantomConfig& cfg, std::size_t n, std::uint64_t seed, const std::filesystem::path& dir) {
    validate_config(cfg);
    if (n == 0) throw ArgumentError("n_scenes must be at least 1");
    std::error_code ec;
    std::filesystem::create_directories(dir / "scenes", ec);
    if (ec) throw IoError(fmt::format("{}: {}", (dir / "scenes").string(), ec.message()));
    Manifest m;
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = fmt::format("scene-{:05d}", i);
        const Scene s = generate_scene(cfg, derive_seed({seed, i}), id);
        const std::string text = scene_to_json(s);
        const std::string rel = "scenes/" + id + ".json";
        tensor::write_file_atomic(dir / rel, text);
        m.scenes.push_back({id, rel, train::sha256_hex(text)});
    }
    tensor::write_file_atomic(dir / "manifest.json", manifest_to_json(m));
    return m;
}

std::vector<Scene> load_dataset(const std::filesystem::path& manifest_path) {
    const Manifest m = manifest_from_json(tensor::read_file(manifest_path));
    const auto base = manifest_path.parent_path();
    std::vector<Scene> out;
    for (const auto& e : m.scenes) {
        const auto path = base / e.path;
        const std::string text = tensor::read_file(path);
        if (train::sha256_hex(text) != e.digest)
            throw ValidationError(fmt::format("{}: digest does not match the manifest", path.string()));
        try {
            out.push_back(scene_from_json(text));
        } catch (const ParseError& err) {
            throw ParseError(fmt::format("{}: {}", path.string(), err.what()));
        }
    }
    if (out.empty()) throw ValidationError(fmt::format("{}: manifest lists no scenes", manifest_path.string()));
    return out;
}

Scene import_external(const std::filesystem::path& path, double match_threshold) {
    const json j = parse_json(tensor::read_file(path), path.string());
    const Reader r(j, "$");
    Scene s = read_common(r);
    s.scene_id = r.has("scene_id") ? r.at("scene_id").string() : path.stem().string();
    auto lab = train::label_candidates(s.candidates, s.gt, match_threshold);
    s.labels = std::move(lab.labels);
    s.true_iou = std::move(lab.true_iou);
    validate_scene(s);
    return s;
}

} // namespace stgr::synth
