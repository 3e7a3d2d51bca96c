// SPDX-License-Identifier: Apache-2.0
#include "stgr/evalharness/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "stgr/error.hpp"

namespace stgr::eval {

using namespace stgr::tensor;
using tvid::Group;

double dsc(const mask::Mask& p, const mask::Mask& g) {
    mask::require_same_grid(p, g);
    const auto denom = mask::area(p) + mask::area(g);
    if (denom == 0) return 1.0;
    return static_cast<double>(2 * mask::intersection_area(p, g)) / static_cast<double>(denom);
}

double iou_metric(const mask::Mask& p, const mask::Mask& g) { return mask::iou(p, g); }

std::vector<std::vector<std::string>> kfold_split(std::span<const std::string> ids, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw ArgumentError("k must be positive");
    if (ids.size() < k) throw ArgumentError(fmt::format("{} ids cannot fill {} folds", ids.size(), k));
    std::vector<std::string> order(ids.begin(), ids.end());
    Rng rng(derive_seed({seed, 0x666f6c64ULL}));
    rng.shuffle(order);
    std::vector<std::vector<std::string>> folds(k);
    const std::size_t base = order.size() / k, extra = order.size() % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t n = base + (f < extra ? 1 : 0);
        folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
    }
    return folds;
}

// --- baselines ----------------------------------------------------------------

LinearHead::LinearHead(std::size_t dim, Rng& rng)
    : w_("linear.weight", tvid::gaussian(rng, dim, 1, 1.0 / std::sqrt(static_cast<double>(dim)))),
      b_("linear.bias", Tensor({1, 1})),
      iou_w_("linear.iou.weight", tvid::gaussian(rng, dim, 1, 1.0 / std::sqrt(static_cast<double>(dim)))),
      iou_b_("linear.iou.bias", Tensor({1, 1})) {}

reason::HeadOutputs LinearHead::forward(Tape& tape, const reason::HeadInputs& in) {
    if (in.features.value().cols() != w_.value.rows())
        throw ShapeError(fmt::format("linear head expects {}-dim features", w_.value.rows()));
    const Var s = sigmoid(add_row(matmul(in.features, tape.param(w_)), tape.param(b_)));
    const Var q = sigmoid(add_row(matmul(in.features, tape.param(iou_w_)), tape.param(iou_b_)));
    return {s, q};
}

void LinearHead::collect(std::vector<tvid::ParamRef>& out) {
    for (auto* p : {&w_, &b_, &iou_w_, &iou_b_}) out.push_back({p, Group::stgr});
}

CosineThresholdHead::CosineThresholdHead()
    : scale_("cosine.scale", Tensor({1, 1}, 10.0)),
      threshold_("cosine.threshold", Tensor({1, 1}, 0.5)),
      iou_scale_("cosine.iou.scale", Tensor({1, 1}, 1.0)),
      iou_bias_("cosine.iou.bias", Tensor({1, 1})) {}

reason::HeadOutputs CosineThresholdHead::forward(Tape& tape, const reason::HeadInputs& in) {
    const Var cos = matmul(row_normalize(in.features), transpose(row_normalize(in.guidance)));
    const Tensor& c = cos.value();
    Tensor pick(c.shape());
    for (std::size_t i = 0; i < c.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c.cols(); ++k)
            if (c(i, k) > c(i, best)) best = k;
        pick(i, best) = 1.0;
    }
    const Var best = matmul(mul(cos, tape.constant(std::move(pick))), tape.constant(Tensor({c.cols(), 1}, 1.0)));
    const Var s = sigmoid(mul(add_row(best, neg(tape.param(threshold_))), tape.param(scale_)));
    const Var q = sigmoid(add_row(mul(best, tape.param(iou_scale_)), tape.param(iou_bias_)));
    return {s, q};
}

void CosineThresholdHead::collect(std::vector<tvid::ParamRef>& out) {
    for (auto* p : {&scale_, &threshold_, &iou_scale_, &iou_bias_}) out.push_back({p, Group::stgr});
}

std::unique_ptr<reason::ScoringHead> make_head(const std::string& kind, const train::ModelConfig& cfg, Rng& rng) {
    if (kind == "stgr") {
        auto sc = cfg.stgr;
        sc.dim = cfg.visual_dim;
        return std::make_unique<reason::StgrHead>(sc, rng);
    }
    if (kind == "linear") return std::make_unique<LinearHead>(cfg.visual_dim, rng);
    if (kind == "cosine-threshold") return std::make_unique<CosineThresholdHead>();
    throw ConfigError(fmt::format("unknown head '{}' (expected stgr, linear or cosine-threshold)", kind));
}

std::unique_ptr<Model> make_model(const train::ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    auto head = make_head(cfg.head, cfg, rng);
    return std::make_unique<Model>(cfg, std::move(head), rng);
}

// --- cross-validation ------------------------------------------------------------

std::uint64_t init_seed(std::uint64_t master) { return derive_seed({master, 0x696e6974ULL}); }
std::uint64_t train_seed(std::uint64_t master) { return derive_seed({master, 0x747261696eULL}); }

double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

FoldReport evaluate(Model& model, std::span<const Scene> scenes, double tau_sel) {
    FoldReport r;
    for (const auto& s : scenes) {
        const auto sel = model.predict(s, tau_sel);
        const mask::Mask truth = s.gt.empty() ? mask::Mask(s.height, s.width) : mask::union_all(s.gt);
        r.scenes.push_back({s.scene_id, iou_metric(sel.merged_mask, truth), dsc(sel.merged_mask, truth)});
    }
    if (!r.scenes.empty()) {
        for (const auto& sc : r.scenes) {
            r.iou_mean += sc.iou;
            r.dsc_mean += sc.dsc;
        }
        r.iou_mean /= static_cast<double>(r.scenes.size());
        r.dsc_mean /= static_cast<double>(r.scenes.size());
    }
    return r;
}

CvReport run_cv(std::span<const Scene> scenes, const train::ModelConfig& model_cfg, const train::TrainConfig& train_cfg,
                const CvConfig& cv) {
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        if (!index.emplace(scenes[i].scene_id, i).second)
            throw ValidationError(fmt::format("duplicate scene id {}", scenes[i].scene_id));
        ids.push_back(scenes[i].scene_id);
    }
    const auto folds = kfold_split(ids, cv.k, cv.seed);
    CvReport report;
    report.head = model_cfg.head;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<bool> held(scenes.size(), false);
        for (const auto& id : folds[f]) held[index.at(id)] = true;
        std::vector<Scene> train_set, test_set;
        for (std::size_t i = 0; i < scenes.size(); ++i) (held[i] ? test_set : train_set).push_back(scenes[i]);

        auto model = make_model(model_cfg, init_seed(cv.seed));
        auto tc = train_cfg;
        tc.seed = train_seed(cv.seed);
        try {
            train::train_loop(*model, train_set, tc);
        } catch (const NumericDomainError& e) {
            throw NumericDomainError(fmt::format("fold {} ({} head): {}", f + 1, model_cfg.head, e.what()));
        }
        FoldReport fr = evaluate(*model, test_set, cv.tau_sel);
        fr.fold = f + 1;
        report.folds.push_back(std::move(fr));
    }
    std::vector<double> d, u;
    for (const auto& fr : report.folds) {
        d.push_back(fr.dsc_mean);
        u.push_back(fr.iou_mean);
    }
    report.dsc_mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    report.iou_mean = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
    report.dsc_std = sample_std(d);
    report.iou_std = sample_std(u);
    return report;
}

// --- reports ---------------------------------------------------------------------

std::string report_json(std::span<const CvReport> reports) {
    if (reports.empty()) throw ArgumentError("no reports to emit");
    nlohmann::ordered_json root;
    root["schema_version"] = 1;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json j;
        j["head"] = r.head;
        auto folds = nlohmann::ordered_json::array();
        for (const auto& f : r.folds) {
            nlohmann::ordered_json fj;
            fj["fold"] = f.fold;
            fj["n_scenes"] = f.scenes.size();
            fj["iou_mean"] = f.iou_mean;
            fj["dsc_mean"] = f.dsc_mean;
            auto sc = nlohmann::ordered_json::array();
            for (const auto& s : f.scenes) sc.push_back({{"scene_id", s.scene_id}, {"iou", s.iou}, {"dsc", s.dsc}});
            fj["scenes"] = std::move(sc);
            folds.push_back(std::move(fj));
        }
        j["folds"] = std::move(folds);
        j["iou_mean"] = r.iou_mean;
        j["iou_std"] = r.iou_std;
        j["dsc_mean"] = r.dsc_mean;
        j["dsc_std"] = r.dsc_std;
        arr.push_back(std::move(j));
    }
    root["reports"] = std::move(arr);
    return root.dump(1) + "\n";
}

std::string report_table(std::span<const CvReport> reports) {
    if (reports.empty()) throw ArgumentError("no reports to emit");
    std::string out = "head\tfold\tIoU_mean\tDSC_mean\tn_scenes\n";
    const CvReport* stgr = nullptr;
    const CvReport* linear = nullptr;
    for (const auto& r : reports) {
        std::size_t total = 0;
        for (const auto& f : r.folds) {
            out += fmt::format("{}\t{}\t{:.6f}\t{:.6f}\t{}\n", r.head, f.fold, f.iou_mean, f.dsc_mean, f.scenes.size());
            total += f.scenes.size();
        }
        out += fmt::format("{}\tall\t{:.6f}±{:.6f}\t{:.6f}±{:.6f}\t{}\n", r.head, r.iou_mean, r.iou_std, r.dsc_mean,
                           r.dsc_std, total);
        if (r.head == "stgr") stgr = &r;
        if (r.head == "linear") linear = &r;
    }
    if (stgr && linear) {
        std::size_t total = 0;
        for (const auto& f : stgr->folds) total += f.scenes.size();
        out += fmt::format("gap(stgr-linear)\tall\t{:+.6f}\t{:+.6f}\t{}\n", stgr->iou_mean - linear->iou_mean,
                           stgr->dsc_mean - linear->dsc_mean, total);
    }
    return out;
}

void emit_report(std::span<const CvReport> reports, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(fmt::format("{}: {}", dir.string(), ec.message()));
    tensor::write_file_atomic(dir / "report.json", report_json(reports));
    tensor::write_file_atomic(dir / "report.tsv", report_table(reports));
}

} // namespace stgr::eval
