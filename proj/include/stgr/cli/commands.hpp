// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stgr/cli/run_config.hpp"

namespace stgr::cli {

namespace fs = std::filesystem;

enum class LogLevel { quiet, info, debug };

/// Reads STGR_LOG_LEVEL (quiet | info | debug); unset means info.
LogLevel log_level_from_env();

struct Log {
    std::ostream& out;
    LogLevel level = LogLevel::info;

    void info(const std::string& line) const;
    void debug(const std::string& line) const;
};

/// `data` may name a dataset directory or its manifest.json.
fs::path manifest_path(const fs::path& data);

/// Writes n scenes, manifest.json and config.json into `out`.
synth::Manifest cmd_generate(const RunConfig& cfg, std::size_t n, const fs::path& out, const Log& log);

/// Trains on the dataset and writes config.json, train_log.jsonl (one record per
/// epoch) and checkpoint.ckpt into `out`. The frozen-tensor digest is logged
/// before and after training.
train::TrainResult cmd_train(const RunConfig& cfg, const fs::path& data, const fs::path& out, const Log& log);

/// Without a checkpoint: k-fold CV for every head in cfg.heads. With one: the
/// stored model (head from cfg.model.head) scored on all scenes as a single fold.
/// Writes config.json, report.json and report.tsv into `out`.
std::vector<eval::CvReport> cmd_eval(const RunConfig& cfg, const fs::path& data,
                                     const std::optional<fs::path>& checkpoint, const fs::path& out, const Log& log);

struct AuditRow {
    std::string name;  // group name, or "virtual:<backbone>"
    std::uint64_t params = 0;
    bool trainable = false;
};

struct Audit {
    std::vector<AuditRow> rows;
    std::uint64_t trainable = 0;
    std::uint64_t total = 0;
    double fraction = 0;
};

/// Parameter accounting of the configured model; a checkpoint, when given, must
/// match it tensor for tensor. The table goes to log.out regardless of level.
Audit cmd_audit_params(const RunConfig& cfg, const std::optional<fs::path>& checkpoint, const Log& log);

/// SelectionResult text record for one scene under a stored model.
std::string cmd_golden(const RunConfig& cfg, const fs::path& scene, const fs::path& checkpoint);

/// 1 usage/config, 2 validation, 3 runtime/numeric.
int exit_code(const std::exception& e);

} // namespace stgr::cli
