// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stgr/evalharness/eval.hpp"
#include "stgr/synthdata/generator.hpp"
#include "stgr/training/pipeline.hpp"

namespace stgr::cli {

/// Everything a run needs. The graph dimension is model.visual_dim; the stgr block
/// has no dim key of its own.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    synth::PhantomConfig synth;
    train::ModelConfig model;
    train::TrainConfig train;  // seed and threads are taken from the top level
    eval::CvConfig cv;         // seed is taken from the top level
    /// Heads compared by `eval` when no checkpoint is given.
    std::vector<std::string> heads{"stgr", "linear"};
};

/// Defaults, including the declared sizes of the four absent backbones.
RunConfig default_run_config();

/// Reads a JSON document over the defaults. Unknown keys, wrong types and
/// out-of-range values throw ConfigError naming the key path ("train.optim.lr").
RunConfig run_config_from_json(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Full effective config with every key; reading it back gives the same document.
std::string run_config_to_json(const RunConfig& cfg);

void validate_run_config(const RunConfig& cfg);

/// Training config with the top-level seed and thread count applied.
train::TrainConfig effective_train_config(const RunConfig& cfg);

} // namespace stgr::cli
