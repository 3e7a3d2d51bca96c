// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include <unistd.h>

#include "doctest.h"

#include "stgr/cli/commands.hpp"
#include "stgr/error.hpp"
#include "stgr/tensorcore/checkpoint.hpp"

using namespace stgr;
using namespace stgr::cli;

namespace {

constexpr const char* kTiny = R"({
  "seed": 5,
  "synth": {"height": 48, "width": 48, "lesion_radius_min": 4, "lesion_radius_max": 8,
            "feature_dim": 8, "text_dim": 8, "attributes_max": 2, "candidates_max": 6},
  "model": {"visual_dim": 8,
            "encoder": {"dim": 8, "heads": 2, "blocks": 1, "lora": {"rank": 2, "alpha": 4}},
            "stgr": {"layers": 1, "heads": 2, "adapter_dim": 4}},
  "train": {"epochs": 2, "batch": 4, "optim": {"lr": 0.001}},
  "eval": {"k": 2}
})";

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("stgr-test-" + tag + "-" + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) { return tensor::read_file(p); }

} // namespace

TEST_CASE("run config defaults") {
    const auto c = default_run_config();
    CHECK(c.model.stgr.layers == 3);
    CHECK(c.model.stgr.adapter_dim == 64);
    CHECK(c.model.encoder.lora.rank == 16);
    CHECK(c.model.encoder.lora.alpha == 32.0);
    CHECK(c.model.encoder.lora.dropout == 0.05);
    CHECK(c.train.optim.lr == 1e-4);
    CHECK(c.train.batch == 16);
    CHECK(c.train.epochs == 50);
    CHECK(c.train.loss.ce == 1.0);
    CHECK(c.train.loss.nce == 0.5);
    CHECK(c.train.loss.reg == 0.5);
    CHECK(c.cv.tau_sel == 0.5);
    CHECK(c.cv.k == 5);
    CHECK(c.threads == 1);
    CHECK(c.model.virtual_backbones.size() == 4);
    CHECK_NOTHROW(validate_run_config(c));
}

TEST_CASE("run config parsing") {
    SUBCASE("round trip is a fixed point") {
        const auto text = run_config_to_json(run_config_from_json(kTiny));
        CHECK(run_config_to_json(run_config_from_json(text)) == text);
        CHECK(run_config_to_json(run_config_from_json("{}")) == run_config_to_json(default_run_config()));
    }
    SUBCASE("overrides land") {
        const auto c = run_config_from_json(kTiny);
        CHECK(c.seed == 5);
        CHECK(c.model.encoder.lora.rank == 2);
        CHECK(c.model.encoder.lora.alpha == 4.0);
        CHECK(c.model.encoder.lora.dropout == 0.05);  // untouched sibling keeps its default
        CHECK(c.train.optim.lr == 0.001);
        CHECK(c.cv.k == 2);
    }
    SUBCASE("unknown keys are named") {
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"bogus": 1})"), doctest::Contains("'bogus'"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"train": {"optim": {"lrr": 1}}})"),
                             doctest::Contains("'train.optim.lrr'"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"model": {"stgr": {"dim": 64}}})"),
                             doctest::Contains("'model.stgr.dim'"), ConfigError);
    }
    SUBCASE("types and ranges") {
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"train": {"epochs": -1}})"), doctest::Contains("train.epochs"),
                             ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"train": {"optim": {"lr": "fast"}}})"),
                             doctest::Contains("train.optim.lr"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"train": {"optim": {"lr": -1e-3}}})"),
                             doctest::Contains("train.optim.lr"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"model": {"encoder": {"lora": {"dropout": 1.0}}}})"),
                             doctest::Contains("lora.dropout"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"model": {"visual_dim": 32}})"),
                             doctest::Contains("synth.feature_dim"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"synth": {"confounder_cosine": 0.9}})"),
                             doctest::Contains("synth"), ConfigError);
        CHECK_THROWS_WITH_AS(run_config_from_json(R"({"eval": {"heads": ["stgr", "mlp"]}})"),
                             doctest::Contains("'mlp'"), ConfigError);
        CHECK_THROWS_AS(run_config_from_json("{"), ConfigError);
        CHECK_THROWS_AS(run_config_from_json("[]"), ConfigError);
    }
    SUBCASE("virtual counts replace the defaults wholesale") {
        const auto c = run_config_from_json(R"({"model": {"virtual_backbones": {"x": 10}}})");
        REQUIRE(c.model.virtual_backbones.size() == 1);
        CHECK(c.model.virtual_backbones.at("x") == 10);
    }
}

TEST_CASE("audit-params") {
    std::ostringstream os;
    const Log log{os, LogLevel::quiet};

    SUBCASE("default config: rows sum to total, fraction under 1%") {
        const auto a = cmd_audit_params(default_run_config(), std::nullopt, log);
        std::uint64_t sum = 0, trainable = 0;
        for (const auto& r : a.rows) {
            sum += r.params;
            if (r.trainable) trainable += r.params;
        }
        CHECK(sum == a.total);
        CHECK(trainable == a.trainable);
        CHECK(a.fraction == static_cast<double>(a.trainable) / static_cast<double>(a.total));
        CHECK(a.fraction < 0.01);
        CHECK(os.str().find("trainable fraction") != std::string::npos);
        CHECK(os.str().find("virtual:llama3_v_8b") != std::string::npos);
    }
    SUBCASE("without virtual counts only the stubs are frozen") {
        auto c = run_config_from_json(kTiny);
        c.model.virtual_backbones.clear();
        const auto a = cmd_audit_params(c, std::nullopt, log);
        for (const auto& r : a.rows) CHECK(r.name.rfind("virtual:", 0) == std::string::npos);
        for (const auto& r : a.rows) CHECK(r.trainable == (r.name != "backbone-stub"));
        CHECK(a.fraction == static_cast<double>(a.trainable) / static_cast<double>(a.total));
        CHECK(a.fraction > 0.01);
    }
}

TEST_CASE("generate, train, eval, golden") {
    TempDir tmp("pipeline");
    std::ostringstream os;
    const Log log{os, LogLevel::quiet};
    const auto cfg = run_config_from_json(kTiny);

    cmd_generate(cfg, 6, tmp.path / "a", log);
    cmd_generate(cfg, 6, tmp.path / "b", log);
    CHECK(slurp(tmp.path / "a/manifest.json") == slurp(tmp.path / "b/manifest.json"));
    CHECK(run_config_from_json(slurp(tmp.path / "a/config.json")).seed == cfg.seed);
    CHECK_THROWS_AS(cmd_generate(cfg, 0, tmp.path / "c", log), ConfigError);

    SUBCASE("lr 0 and epochs 0 both give the init checkpoint") {
        auto c0 = cfg;
        c0.train.epochs = 0;
        cmd_train(c0, tmp.path / "a", tmp.path / "t0", log);
        auto lr0 = cfg;
        lr0.train.optim.lr = 0;
        const auto r = cmd_train(lr0, tmp.path / "a/manifest.json", tmp.path / "t1", log);
        CHECK(slurp(tmp.path / "t0/checkpoint.ckpt") == slurp(tmp.path / "t1/checkpoint.ckpt"));
        CHECK(r.frozen_digest_before == r.frozen_digest_after);
        CHECK(slurp(tmp.path / "t0/train_log.jsonl").empty());
    }
    SUBCASE("train and eval twice are byte-identical") {
        for (const char* run : {"r1", "r2"}) {
            cmd_train(cfg, tmp.path / "a", tmp.path / run / "train", log);
            cmd_eval(cfg, tmp.path / "a", std::nullopt, tmp.path / run / "eval", log);
        }
        for (const char* f : {"train/train_log.jsonl", "train/checkpoint.ckpt", "train/config.json", "eval/report.json",
                              "eval/report.tsv", "eval/config.json"})
            CHECK_MESSAGE(slurp(tmp.path / "r1" / f) == slurp(tmp.path / "r2" / f), f);
        const std::string tsv = slurp(tmp.path / "r1/eval/report.tsv");
        CHECK(tsv.find("gap(stgr-linear)") != std::string::npos);
    }
    SUBCASE("checkpoint evaluation and golden record") {
        cmd_train(cfg, tmp.path / "a", tmp.path / "t", log);
        const auto reps = cmd_eval(cfg, tmp.path / "a", tmp.path / "t/checkpoint.ckpt", tmp.path / "e", log);
        REQUIRE(reps.size() == 1);
        CHECK(reps[0].folds.size() == 1);
        CHECK(reps[0].folds[0].scenes.size() == 6);

        const fs::path scene = tmp.path / "a/scenes/scene-00000.json";
        const std::string rec = cmd_golden(cfg, scene, tmp.path / "t/checkpoint.ckpt");
        CHECK(rec == cmd_golden(cfg, scene, tmp.path / "t/checkpoint.ckpt"));
        CHECK(rec.rfind("scene: scene-00000\ncandidates: ", 0) == 0);
        CHECK(rec.find("\nmerged_mask: 48 48") != std::string::npos);

        CHECK_THROWS_AS(cmd_golden(cfg, scene, tmp.path / "missing.ckpt"), IoError);
        auto other = cfg;
        other.model.head = "linear";
        CHECK_THROWS_AS(cmd_golden(other, scene, tmp.path / "t/checkpoint.ckpt"), ValidationError);
    }
    SUBCASE("tampered dataset is rejected") {
        tensor::write_file_atomic(tmp.path / "a/scenes/scene-00001.json", slurp(tmp.path / "a/scenes/scene-00000.json"));
        CHECK_THROWS_AS(cmd_train(cfg, tmp.path / "a", tmp.path / "t", log), ValidationError);
    }
}

TEST_CASE("exit codes") {
    CHECK(exit_code(ConfigError("x")) == 1);
    CHECK(exit_code(ArgumentError("x")) == 1);
    CHECK(exit_code(ValidationError("x")) == 2);
    CHECK(exit_code(ParseError("x")) == 2);
    CHECK(exit_code(IoError("x")) == 2);
    CHECK(exit_code(NumericDomainError("x")) == 3);
    CHECK(exit_code(GenerationError("x")) == 3);
    CHECK(exit_code(std::runtime_error("x")) == 3);
}

TEST_CASE("log level") {
    ::setenv("STGR_LOG_LEVEL", "debug", 1);
    CHECK(log_level_from_env() == LogLevel::debug);
    ::setenv("STGR_LOG_LEVEL", "loud", 1);
    CHECK_THROWS_AS(log_level_from_env(), ConfigError);
    ::unsetenv("STGR_LOG_LEVEL");
    CHECK(log_level_from_env() == LogLevel::info);

    std::ostringstream os;
    Log{os, LogLevel::info}.debug("hidden");
    Log{os, LogLevel::info}.info("shown");
    CHECK(os.str() == "shown\n");
}
