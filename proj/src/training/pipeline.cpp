// SPDX-License-Identifier: Apache-2.0
#include "stgr/training/pipeline.hpp"

#include <cmath>
#include <numeric>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "stgr/error.hpp"

namespace stgr::train {

using namespace stgr::tensor;

Model::Model(const ModelConfig& cfg, std::unique_ptr<ScoringHead> head, Rng& rng)
    : cfg_(cfg),
      encoder_(cfg.encoder, rng),
      proj_(cfg.encoder.dim, cfg.proj_hidden ? cfg.proj_hidden : 2 * cfg.visual_dim, cfg.visual_dim, rng),
      head_(std::move(head)) {
    if (!head_) throw ConfigError("model needs a scoring head");
    std::vector<ParamRef> refs;
    encoder_.collect(refs);
    proj_.collect(refs);
    head_->collect(refs);
    registry_.add_all(refs);
    for (const auto& [name, count] : cfg.virtual_backbones) registry_.declare_virtual(name, count);
}

Model::Forward Model::forward(Tape& tape, const Scene& scene) {
    Var guidance;
    if (scene.guidance) {
        guidance = tape.constant(*scene.guidance);
    } else {
        if (scene.attributes.size() == 0)
            throw ArgumentError(fmt::format("scene {} has neither attributes nor guidance", scene.scene_id));
        guidance = proj_.forward(tape, encoder_.encode_rows(tape, tape.constant(scene.attributes)));
    }
    if (guidance.value().cols() != cfg_.visual_dim)
        throw ConfigError(fmt::format("guidance dim {} does not match d_v {}", guidance.value().cols(), cfg_.visual_dim));
    const Tensor iou = reason::pair_iou_matrix(scene.candidates);
    const reason::HeadInputs in{scene.candidates, iou, tape.constant(scene.features), guidance};
    return Forward{head_->forward(tape, in), guidance};
}

reason::SelectionResult Model::predict(const Scene& scene, double tau_sel) {
    Tape tape(Mode::eval);
    const auto out = forward(tape, scene);
    const auto& s = out.head.scores.value().data();
    const auto& q = out.head.predicted_iou.value().data();
    return reason::select_candidates(scene.candidates, {s.begin(), s.end()}, {q.begin(), q.end()}, tau_sel);
}

Checkpoint Model::to_checkpoint(std::uint64_t seed) const {
    Checkpoint c;
    c.seed = seed;
    for (const auto& e : registry_.entries()) c.tensors.push_back({e.param->name, e.param->value});
    return c;
}

void Model::load(const Checkpoint& ckpt) {
    for (const auto& e : registry_.entries()) {
        const Tensor* t = ckpt.find(e.param->name);
        if (!t) throw ValidationError(fmt::format("checkpoint lacks tensor {}", e.param->name));
        if (t->shape() != e.param->value.shape())
            throw ValidationError(fmt::format("checkpoint tensor {} has shape {}, model expects {}", e.param->name,
                                              shape_string(t->shape()), shape_string(e.param->value.shape())));
    }
    for (const auto& e : registry_.entries()) e.param->value = *ckpt.find(e.param->name);
}

Var scene_loss(Model& model, Tape& tape, const Scene& scene, const TrainConfig& cfg, SceneLoss* parts) {
    CandidateLabels lab;
    if (scene.labels && scene.true_iou) {
        lab.labels = *scene.labels;
        lab.true_iou = *scene.true_iou;
    } else {
        lab = label_candidates(scene.candidates, scene.gt, cfg.match_threshold);
    }
    const auto out = model.forward(tape, scene);
    LossParts lp{selection_ce_loss(out.head.scores, lab.labels), std::nullopt,
                 iou_regression_loss(out.head.predicted_iou, lab.true_iou)};

    const auto d = scene.features.cols();
    std::vector<double> pos(d, 0.0);
    std::vector<double> negs;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const double* row = scene.features.data().data() + i * d;
        if (lab.labels[i]) {
            ++n_pos;
            for (std::size_t j = 0; j < d; ++j) pos[j] += row[j];
        } else {
            negs.insert(negs.end(), row, row + d);
        }
    }
    if (n_pos > 0 && cfg.loss.nce != 0.0) {
        for (auto& v : pos) v /= static_cast<double>(n_pos);
        std::optional<Var> neg_var;
        if (!negs.empty()) {
            const std::size_t rows = negs.size() / d;
            neg_var = tape.constant(Tensor({rows, d}, std::move(negs)));
        }
        lp.nce = info_nce_loss(out.guidance, tape.constant(Tensor({1, d}, std::move(pos))), neg_var, cfg.loss.tau_nce);
    }
    const Var total = total_loss(lp, cfg.loss);
    if (parts) {
        parts->ce = lp.ce.value().item();
        parts->nce = lp.nce ? lp.nce->value().item() : 0.0;
        parts->reg = lp.reg.value().item();
        parts->total = total.value().item();
    }
    return total;
}

namespace {

struct SceneResult {
    SceneLoss loss;
    std::vector<ParamGrad> grads;
    std::exception_ptr error;
};

void run_parallel(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) job(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace

TrainResult train_loop(Model& model, std::span<const Scene> scenes, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    if (scenes.empty()) throw ArgumentError("training set is empty");
    if (cfg.batch == 0) throw ConfigError("batch must be positive");
    auto& registry = model.registry();
    TrainResult result;
    result.frozen_digest_before = sha256_hex(registry.serialize_frozen());

    const std::size_t n = scenes.size();
    const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
    AdamW opt(registry, cfg.optim, per_epoch * cfg.epochs);
    const auto trainable = registry.trainable();

    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffler(derive_seed({cfg.seed, 0x73687566ULL, epoch}));
        shuffler.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch + 1;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t lo = b * cfg.batch, hi = std::min(n, lo + cfg.batch);
            const std::uint64_t step = opt.steps();
            std::vector<SceneResult> res(hi - lo);
            run_parallel(hi - lo, cfg.threads, [&](std::size_t j) {
                const std::size_t idx = order[lo + j];
                try {
                    Tape tape(Mode::train, DropoutKey{cfg.seed, step, idx});
                    const Var loss = scene_loss(model, tape, scenes[idx], cfg, &res[j].loss);
                    res[j].grads = tape.gradients(loss);
                } catch (...) {
                    res[j].error = std::current_exception();
                }
            });
            for (std::size_t j = 0; j < res.size(); ++j) {
                if (!res[j].error) continue;
                try {
                    std::rethrow_exception(res[j].error);
                } catch (const NumericDomainError& e) {
                    throw NumericDomainError(fmt::format("epoch {} step {} scene {}: {}", epoch + 1, step + 1,
                                                         scenes[order[lo + j]].scene_id, e.what()));
                }
            }

            std::unordered_map<const Parameter*, Tensor> sum;
            for (auto* p : trainable) sum.emplace(p, Tensor(p->value.shape()));
            for (const auto& r : res) {
                rec.loss.total += r.loss.total;
                rec.loss.ce += r.loss.ce;
                rec.loss.nce += r.loss.nce;
                rec.loss.reg += r.loss.reg;
                for (const auto& g : r.grads) {
                    auto acc = sum.at(g.param).data();
                    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.grad[i];
                }
            }
            const double inv = 1.0 / static_cast<double>(res.size());
            std::vector<ParamGrad> grads;
            grads.reserve(trainable.size());
            for (auto* p : trainable) {
                Tensor& t = sum.at(p);
                for (auto& v : t.data()) v *= inv;
                grads.push_back({p, std::move(t)});
            }
            rec.lr = opt.current_lr();
            opt.step(grads);
        }
        const double inv = 1.0 / static_cast<double>(n);
        rec.loss.total *= inv;
        rec.loss.ce *= inv;
        rec.loss.nce *= inv;
        rec.loss.reg *= inv;
        rec.steps = opt.steps();
        rec.trainable_fraction = registry.trainable_fraction();
        result.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    result.frozen_digest_after = sha256_hex(registry.serialize_frozen());
    return result;
}

std::string epoch_record_json(const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["steps"] = r.steps;
    j["lr"] = r.lr;
    j["loss"] = r.loss.total;
    j["loss_ce"] = r.loss.ce;
    j["loss_nce"] = r.loss.nce;
    j["loss_reg"] = r.loss.reg;
    j["trainable_fraction"] = r.trainable_fraction;
    return j.dump();
}

double selection_f1(Model& model, std::span<const Scene> scenes, double tau_sel, double match_threshold) {
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (const auto& s : scenes) {
        const auto labels = s.labels ? *s.labels : label_candidates(s.candidates, s.gt, match_threshold).labels;
        const auto r = model.predict(s, tau_sel);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const bool sel = r.scores[i] > tau_sel;
            tp += sel && labels[i];
            fp += sel && !labels[i];
            fn += !sel && labels[i];
        }
    }
    if (tp + fp + fn == 0) return 1.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

} // namespace stgr::train
