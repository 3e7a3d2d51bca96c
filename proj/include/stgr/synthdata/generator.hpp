// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stgr/rng.hpp"
#include "stgr/synthdata/scene.hpp"

namespace stgr::synth {

struct PhantomConfig {
    std::uint32_t height = 128;
    std::uint32_t width = 128;

    std::size_t lesion_classes = 3;
    std::size_t lesions_min = 1, lesions_max = 3;
    /// Chance that a lesion after the first belongs to a non-target class.
    double off_target_rate = 0.5;
    double lesion_radius_min = 7, lesion_radius_max = 14;

    std::size_t confounders_min = 1, confounders_max = 3;
    /// Chance that a confounder is routed through a lesion centre.
    double overlap_intensity = 0.3;

    std::size_t candidates_min = 4, candidates_max = 12;
    /// Extra jittered copies per target lesion (the first copy is always made).
    std::size_t target_copies = 2;
    double jitter_px = 2.0;
    double spurious_rate = 0.3;

    std::size_t feature_dim = 64;     // d_v
    std::size_t text_dim = 32;        // d_t
    std::size_t attributes_min = 1, attributes_max = 4;
    /// Cosine between two lesion class prototypes.
    double class_cosine = 0.5;
    /// Cosine between a confounder prototype and every lesion prototype (rho).
    double confounder_cosine = 0.7;
    double structure_noise = 0.25;    // per-structure deviation from its prototype
    double feature_noise = 0.1;       // per-candidate noise
    double attribute_noise = 0.2;
    std::uint64_t prototype_seed = 1;
};

/// Throws ConfigError naming the offending field.
void validate_config(const PhantomConfig& cfg);

/// Class prototypes shared by every scene built from one config.
struct Prototypes {
    std::vector<std::vector<double>> lesion;      // [C][d_v]
    std::vector<std::vector<double>> confounder;  // two kinds: vessel, rib
    std::vector<double> background;
    std::vector<std::vector<std::vector<double>>> text;  // [C][attributes_max][d_t]
};

Prototypes make_prototypes(const PhantomConfig& cfg);

/// Pure function of (cfg, seed).
Scene generate_scene(const PhantomConfig& cfg, std::uint64_t seed, const std::string& scene_id = "");

/// Scene i uses seed derive_seed({seed, i}).
std::vector<Scene> generate_scenes(const PhantomConfig& cfg, std::size_t n, std::uint64_t seed);

struct ManifestEntry {
    std::string id;
    std::string path;  // relative to the manifest
    std::string digest;
};

struct Manifest {
    static constexpr int kSchemaVersion = 1;
    std::vector<ManifestEntry> scenes;
};

/// Writes scenes/<id>.json and manifest.json under `dir`.
Manifest generate_dataset(const PhantomConfig& cfg, std::size_t n, std::uint64_t seed, const std::filesystem::path& dir);

// --- scene files ------------------------------------------------------------

std::string scene_to_json(const Scene& s);
Scene scene_from_json(std::string_view text);
void save_scene(const std::filesystem::path& path, const Scene& s);
Scene load_scene(const std::filesystem::path& path);

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(std::string_view text);

/// Loads every scene of a manifest and checks its digest.
std::vector<Scene> load_dataset(const std::filesystem::path& manifest_path);

/// Reads an external candidate dump (height, width, candidates[].rle, features,
/// attributes or guidance, gt[].rle) and fills labels and true IoU.
Scene import_external(const std::filesystem::path& path, double match_threshold = 0.5);

} // namespace stgr::synth
