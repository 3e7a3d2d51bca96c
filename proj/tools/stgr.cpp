// SPDX-License-Identifier: Apache-2.0
// stgr: generate | train | eval | audit-params | golden
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "stgr/cli/commands.hpp"
#include "stgr/error.hpp"
#include "stgr/tensorcore/checkpoint.hpp"

namespace {

using namespace stgr::cli;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::string out;
};

void add_common(CLI::App* sub, Common& c, bool with_out) {
    sub->add_option("--config", c.config, "run config (JSON); unset keys keep their defaults")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "master seed, overrides the config (default: config seed, 0)");
    sub->add_option("--threads", c.threads, "worker threads, overrides the config (default: 1)")->check(CLI::PositiveNumber);
    if (with_out) sub->add_option("--out", c.out, "output directory")->required();
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? default_run_config() : load_run_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    validate_run_config(cfg);
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic-scene benchmark for graph-based mask selection."};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 success, 1 usage/config, 2 validation, 3 runtime/numeric.\n"
               "STGR_LOG_LEVEL=quiet|info|debug sets verbosity (default info).");

    Common common;

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset (scenes + manifest)");
    std::size_t n = 100;
    add_common(gen, common, true);
    gen->add_option("--n", n, "number of scenes")->capture_default_str();

    auto* trn = app.add_subcommand("train", "train a model, write log and checkpoint");
    std::string data;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    add_common(trn, common, true);
    trn->add_option("--data", data, "dataset directory or manifest")->required();
    trn->add_option("--epochs", epochs, "overrides train.epochs (default: 50); 0 writes the init checkpoint");
    trn->add_option("--lr", lr, "overrides train.optim.lr (default: 1e-4)");

    auto* evl = app.add_subcommand("eval", "k-fold CV per head, or score a stored checkpoint");
    std::string checkpoint;
    std::string heads;
    add_common(evl, common, true);
    evl->add_option("--data", data, "dataset directory or manifest")->required();
    evl->add_option("--checkpoint", checkpoint, "score this model on all scenes instead of running CV");
    evl->add_option("--heads", heads, "comma-separated heads for CV, overrides eval.heads (default: stgr,linear)");

    auto* aud = app.add_subcommand("audit-params", "parameter-count table and trainable fraction");
    add_common(aud, common, false);
    aud->add_option("--checkpoint", checkpoint, "check the table against this checkpoint");

    auto* gld = app.add_subcommand("golden", "SelectionResult record for one scene");
    std::string scene;
    add_common(gld, common, false);
    gld->add_option("--scene", scene, "scene file")->required();
    gld->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    gld->add_option("--out", common.out, "write the record here (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const Log log{std::cout, log_level_from_env()};
        const auto opt_ckpt = checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint);
        if (gen->parsed()) {
            cmd_generate(resolve(common), n, common.out, log);
        } else if (trn->parsed()) {
            RunConfig cfg = resolve(common);
            if (epochs) cfg.train.epochs = *epochs;
            if (lr) cfg.train.optim.lr = *lr;
            cmd_train(cfg, data, common.out, log);
        } else if (evl->parsed()) {
            RunConfig cfg = resolve(common);
            if (!heads.empty()) {
                cfg.heads.clear();
                for (const auto& h : CLI::detail::split(heads, ',')) cfg.heads.push_back(CLI::detail::trim_copy(h));
            }
            cmd_eval(cfg, data, opt_ckpt, common.out, log);
        } else if (aud->parsed()) {
            cmd_audit_params(resolve(common), opt_ckpt, log);
        } else if (gld->parsed()) {
            const std::string record = cmd_golden(resolve(common), scene, checkpoint);
            if (common.out.empty())
                std::cout << record;
            else
                stgr::tensor::write_file_atomic(common.out, record);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e);
    }
    return 0;
}
