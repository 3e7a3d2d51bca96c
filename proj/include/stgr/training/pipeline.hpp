// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "stgr/reason/stgr.hpp"
#include "stgr/synthdata/scene.hpp"
#include "stgr/tensorcore/checkpoint.hpp"
#include "stgr/training/losses.hpp"
#include "stgr/training/optim.hpp"

namespace stgr::train {

using reason::ScoringHead;
using synth::Scene;

struct ModelConfig {
    tvid::EncoderConfig encoder;
    std::size_t visual_dim = 64;   // d_v
    std::size_t proj_hidden = 0;   // 0 -> 2 * d_v
    reason::StgrConfig stgr;
    std::string head = "stgr";
    /// Declared sizes of backbones that are not instantiated.
    std::map<std::string, std::uint64_t> virtual_backbones;
};

/// Encoder stub + projection + one scoring head, and the registry over all of them.
class Model {
public:
    Model(const ModelConfig& cfg, std::unique_ptr<ScoringHead> head, Rng& rng);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    struct Forward {
        reason::HeadOutputs head;
        Var guidance;  // [K x d_v]
    };

    /// Guidance comes from the scene when it carries precomputed vectors, otherwise
    /// from encoder + projection over its attribute vectors.
    Forward forward(Tape& tape, const Scene& scene);

    reason::SelectionResult predict(const Scene& scene, double tau_sel);

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& registry() { return registry_; }
    tvid::TextEncoderStub& encoder() { return encoder_; }
    tvid::Projection& projection() { return proj_; }
    ScoringHead& head() { return *head_; }

    tensor::Checkpoint to_checkpoint(std::uint64_t seed) const;
    /// Every registered tensor must be present with a matching shape.
    void load(const tensor::Checkpoint& ckpt);

private:
    ModelConfig cfg_;
    tvid::TextEncoderStub encoder_;
    tvid::Projection proj_;
    std::unique_ptr<ScoringHead> head_;
    ParamRegistry registry_;
};

struct TrainConfig {
    AdamWConfig optim;
    LossWeights loss;
    std::size_t epochs = 50;
    std::size_t batch = 16;
    double match_threshold = 0.5;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct SceneLoss {
    double total = 0, ce = 0, nce = 0, reg = 0;
};

/// Per-scene loss on `tape`. Labels come from the scene or from label_candidates.
Var scene_loss(Model& model, Tape& tape, const Scene& scene, const TrainConfig& cfg, SceneLoss* parts = nullptr);

struct EpochRecord {
    std::size_t epoch = 0;
    std::uint64_t steps = 0;
    double lr = 0;
    SceneLoss loss;  // means over the epoch's scenes
    double trainable_fraction = 0;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::string frozen_digest_before;
    std::string frozen_digest_after;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minibatch AdamW over `scenes`. Shuffling and dropout are keyed to cfg.seed;
/// gradients are reduced in scene order, so the result does not depend on
/// cfg.threads. A non-finite loss throws NumericDomainError naming the scene.
TrainResult train_loop(Model& model, std::span<const Scene> scenes, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

/// One JSON object per line.
std::string epoch_record_json(const EpochRecord& r);

/// Selection F1 of thresholded scores against candidate labels, pooled over scenes.
double selection_f1(Model& model, std::span<const Scene> scenes, double tau_sel, double match_threshold);

} // namespace stgr::train
