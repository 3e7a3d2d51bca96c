// SPDX-License-Identifier: Apache-2.0
#include "stgr/cli/commands.hpp"

#include <cstdlib>
#include <string_view>

#include <fmt/format.h>

#include "stgr/error.hpp"
#include "stgr/tensorcore/checkpoint.hpp"
#include "stgr/training/registry.hpp"

namespace stgr::cli {

LogLevel log_level_from_env() {
    const char* v = std::getenv("STGR_LOG_LEVEL");
    if (!v || !*v) return LogLevel::info;
    const std::string_view s(v);
    if (s == "quiet") return LogLevel::quiet;
    if (s == "info") return LogLevel::info;
    if (s == "debug") return LogLevel::debug;
    throw ConfigError(fmt::format("STGR_LOG_LEVEL must be quiet, info or debug (got '{}')", s));
}

void Log::info(const std::string& line) const {
    if (level >= LogLevel::info) out << line << '\n';
}

void Log::debug(const std::string& line) const {
    if (level >= LogLevel::debug) out << line << '\n';
}

fs::path manifest_path(const fs::path& data) {
    return fs::is_directory(data) ? data / "manifest.json" : data;
}

namespace {

void write_config(const RunConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    tensor::write_file_atomic(out / "config.json", run_config_to_json(cfg));
}

std::unique_ptr<train::Model> load_model(const RunConfig& cfg, const fs::path& checkpoint) {
    auto model = eval::make_model(cfg.model, eval::init_seed(cfg.seed));
    model->load(tensor::load_checkpoint(checkpoint));
    return model;
}

std::string frozen_audit(const train::ParamRegistry& reg) {
    return fmt::format("{} frozen tensors, {} params, sha256 {}", reg.frozen().size(), reg.frozen_count(),
                       train::sha256_hex(reg.serialize_frozen()));
}

} // namespace

synth::Manifest cmd_generate(const RunConfig& cfg, std::size_t n, const fs::path& out, const Log& log) {
    validate_run_config(cfg);
    if (n == 0) throw ConfigError("--n must be positive");
    const auto m = synth::generate_dataset(cfg.synth, n, cfg.seed, out);
    write_config(cfg, out);
    log.info(fmt::format("wrote {} scenes to {}", m.scenes.size(), out.string()));
    return m;
}

train::TrainResult cmd_train(const RunConfig& cfg, const fs::path& data, const fs::path& out, const Log& log) {
    validate_run_config(cfg);
    const auto scenes = synth::load_dataset(manifest_path(data));
    auto model = eval::make_model(cfg.model, eval::init_seed(cfg.seed));
    auto& reg = model->registry();
    log.info(fmt::format("start: {}", frozen_audit(reg)));
    log.info(fmt::format("trainable {} / total {} (fraction {:.6g})", reg.trainable_count(),
                         reg.trainable_count() + reg.frozen_count() + reg.virtual_count(), reg.trainable_fraction()));

    std::string jsonl;
    const auto tc = effective_train_config(cfg);
    auto result = train::train_loop(*model, scenes, tc, [&](const train::EpochRecord& r) {
        jsonl += train::epoch_record_json(r) + "\n";
        log.debug(fmt::format("epoch {} loss {:.6f} lr {:.3g}", r.epoch, r.loss.total, r.lr));
    });
    log.info(fmt::format("end:   {}", frozen_audit(reg)));

    write_config(cfg, out);
    tensor::write_file_atomic(out / "train_log.jsonl", jsonl);
    tensor::save_checkpoint(out / "checkpoint.ckpt", model->to_checkpoint(cfg.seed));
    log.info(fmt::format("wrote {} epochs and checkpoint to {}", result.epochs.size(), out.string()));
    return result;
}

std::vector<eval::CvReport> cmd_eval(const RunConfig& cfg, const fs::path& data,
                                     const std::optional<fs::path>& checkpoint, const fs::path& out, const Log& log) {
    validate_run_config(cfg);
    const auto scenes = synth::load_dataset(manifest_path(data));
    std::vector<eval::CvReport> reports;
    if (checkpoint) {
        auto model = load_model(cfg, *checkpoint);
        eval::CvReport r;
        r.head = cfg.model.head;
        r.folds.push_back(eval::evaluate(*model, scenes, cfg.cv.tau_sel));
        r.folds.back().fold = 1;
        r.dsc_mean = r.folds.back().dsc_mean;
        r.iou_mean = r.folds.back().iou_mean;
        reports.push_back(std::move(r));
    } else {
        auto cv = cfg.cv;
        cv.seed = cfg.seed;
        const auto tc = effective_train_config(cfg);
        for (const auto& head : cfg.heads) {
            auto mc = cfg.model;
            mc.head = head;
            log.info(fmt::format("{}-fold CV, head {}", cv.k, head));
            reports.push_back(eval::run_cv(scenes, mc, tc, cv));
        }
    }
    write_config(cfg, out);
    eval::emit_report(reports, out);
    log.info(eval::report_table(reports));
    return reports;
}

Audit cmd_audit_params(const RunConfig& cfg, const std::optional<fs::path>& checkpoint, const Log& log) {
    validate_run_config(cfg);
    auto model = checkpoint ? load_model(cfg, *checkpoint) : eval::make_model(cfg.model, eval::init_seed(cfg.seed));
    const auto& reg = model->registry();

    Audit a;
    for (const auto& [group, gc] : reg.group_counts()) {
        if (gc.trainable) a.rows.push_back({tvid::group_name(group), gc.trainable, true});
        if (gc.frozen) a.rows.push_back({tvid::group_name(group), gc.frozen, false});
    }
    for (const auto& [name, count] : reg.virtual_counts()) a.rows.push_back({"virtual:" + name, count, false});
    for (const auto& r : a.rows) {
        a.total += r.params;
        if (r.trainable) a.trainable += r.params;
    }
    a.fraction = reg.trainable_fraction();

    std::string table = fmt::format("{:<36} {:>14} {}\n", "group", "params", "trainable");
    for (const auto& r : a.rows) table += fmt::format("{:<36} {:>14} {}\n", r.name, r.params, r.trainable ? "yes" : "no");
    table += fmt::format("{:<36} {:>14}\n", "total", a.total);
    table += fmt::format("{:<36} {:>14}\n", "trainable", a.trainable);
    table += fmt::format("trainable fraction {:.6e} ({:.4f}%)\n", a.fraction, 100.0 * a.fraction);
    log.out << table;
    return a;
}

std::string cmd_golden(const RunConfig& cfg, const fs::path& scene, const fs::path& checkpoint) {
    validate_run_config(cfg);
    const auto s = synth::load_scene(scene);
    auto model = load_model(cfg, checkpoint);
    return reason::selection_to_text(model->predict(s, cfg.cv.tau_sel), s.scene_id);
}

int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArgumentError*>(&e)) return 1;
    if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
        dynamic_cast<const IoError*>(&e) || dynamic_cast<const ShapeError*>(&e))
        return 2;
    return 3;
}

} // namespace stgr::cli
