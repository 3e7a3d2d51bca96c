// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stgr/training/pipeline.hpp"

namespace stgr::eval {

using synth::Scene;
using train::Model;

/// 2|P ∩ G| / (|P| + |G|); both empty -> 1, one empty -> 0.
double dsc(const mask::Mask& p, const mask::Mask& g);
/// |P ∩ G| / |P ∪ G| with the same conventions.
double iou_metric(const mask::Mask& p, const mask::Mask& g);

/// Deterministic shuffle, then k contiguous folds whose sizes differ by at most one.
std::vector<std::vector<std::string>> kfold_split(std::span<const std::string> ids, std::size_t k, std::uint64_t seed);

// --- baseline heads ---------------------------------------------------------

/// Independent affine + sigmoid on each node feature. Ignores masks and guidance.
class LinearHead final : public reason::ScoringHead {
public:
    LinearHead(std::size_t dim, Rng& rng);
    reason::HeadOutputs forward(tensor::Tape& tape, const reason::HeadInputs& in) override;
    void collect(std::vector<tvid::ParamRef>& out) override;
    std::string kind() const override { return "linear"; }

private:
    tensor::Parameter w_, b_, iou_w_, iou_b_;
};

/// score = sigmoid(scale * (max_k cos(h_i, g_k) - threshold)).
class CosineThresholdHead final : public reason::ScoringHead {
public:
    CosineThresholdHead();
    reason::HeadOutputs forward(tensor::Tape& tape, const reason::HeadInputs& in) override;
    void collect(std::vector<tvid::ParamRef>& out) override;
    std::string kind() const override { return "cosine-threshold"; }

private:
    tensor::Parameter scale_, threshold_, iou_scale_, iou_bias_;
};

/// "stgr", "linear" or "cosine-threshold".
std::unique_ptr<reason::ScoringHead> make_head(const std::string& kind, const train::ModelConfig& cfg, Rng& rng);

/// Fresh model: head first, then encoder and projection, all from one generator.
std::unique_ptr<Model> make_model(const train::ModelConfig& cfg, std::uint64_t seed);

// --- cross-validation -------------------------------------------------------

struct SceneScore {
    std::string scene_id;
    double iou = 0;
    double dsc = 0;
};

struct FoldReport {
    std::size_t fold = 0;
    std::vector<SceneScore> scenes;
    double iou_mean = 0;
    double dsc_mean = 0;
};

struct CvReport {
    std::string head;
    std::vector<FoldReport> folds;
    double iou_mean = 0, iou_std = 0;
    double dsc_mean = 0, dsc_std = 0;
};

/// Scene-level scores of a model's merged selection against the union of GT lesions.
FoldReport evaluate(Model& model, std::span<const Scene> scenes, double tau_sel);

/// Sample standard deviation (n - 1); 0 for fewer than two values.
double sample_std(std::span<const double> v);

struct CvConfig {
    std::size_t k = 5;
    std::uint64_t seed = 0;
    double tau_sel = 0.5;
};

/// Seeds for model init and for the training loop, derived from one master seed.
std::uint64_t init_seed(std::uint64_t master);
std::uint64_t train_seed(std::uint64_t master);

/// Per fold: fresh model, train on the other folds, score the held-out fold. Every
/// fold starts from the same derived init and training seeds, so fold-to-fold spread
/// comes from the data split alone. Fold means are aggregated with the sample std.
CvReport run_cv(std::span<const Scene> scenes, const train::ModelConfig& model_cfg, const train::TrainConfig& train_cfg,
                const CvConfig& cv);

/// Machine-readable report (JSON).
std::string report_json(std::span<const CvReport> reports);
/// Tab-separated table: head, fold, IoU_mean, DSC_mean, n_scenes; one aggregate row
/// per head and a gap row when both stgr and linear are present.
std::string report_table(std::span<const CvReport> reports);

/// Writes report.json and report.tsv into `dir`.
void emit_report(std::span<const CvReport> reports, const std::filesystem::path& dir);

} // namespace stgr::eval
