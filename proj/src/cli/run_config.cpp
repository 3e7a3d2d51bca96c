// SPDX-License-Identifier: Apache-2.0
#include "stgr/cli/run_config.hpp"

#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "stgr/error.hpp"
#include "stgr/tensorcore/checkpoint.hpp"

namespace stgr::cli {

using json = nlohmann::ordered_json;

namespace {

std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
}

// One visitor drives both directions so the key set cannot drift between them.
template <typename V>
void visit_synth(V& v, synth::PhantomConfig& c) {
    v("height", c.height);
    v("width", c.width);
    v("lesion_classes", c.lesion_classes);
    v("lesions_min", c.lesions_min);
    v("lesions_max", c.lesions_max);
    v("off_target_rate", c.off_target_rate);
    v("lesion_radius_min", c.lesion_radius_min);
    v("lesion_radius_max", c.lesion_radius_max);
    v("confounders_min", c.confounders_min);
    v("confounders_max", c.confounders_max);
    v("overlap_intensity", c.overlap_intensity);
    v("candidates_min", c.candidates_min);
    v("candidates_max", c.candidates_max);
    v("target_copies", c.target_copies);
    v("jitter_px", c.jitter_px);
    v("spurious_rate", c.spurious_rate);
    v("feature_dim", c.feature_dim);
    v("text_dim", c.text_dim);
    v("attributes_min", c.attributes_min);
    v("attributes_max", c.attributes_max);
    v("class_cosine", c.class_cosine);
    v("confounder_cosine", c.confounder_cosine);
    v("structure_noise", c.structure_noise);
    v("feature_noise", c.feature_noise);
    v("attribute_noise", c.attribute_noise);
    v("prototype_seed", c.prototype_seed);
}

template <typename V>
void visit_encoder(V& v, tvid::EncoderConfig& c) {
    v("vocab", c.vocab);
    v("max_len", c.max_len);
    v("dim", c.dim);
    v("blocks", c.blocks);
    v("heads", c.heads);
    v("soft_tokens", c.soft_tokens);
    v("layernorm_eps", c.layernorm_eps);
    v.section("lora", [&](V& l) {
        l("rank", c.lora.rank);
        l("alpha", c.lora.alpha);
        l("dropout", c.lora.dropout);
    });
}

template <typename V>
void visit_model(V& v, train::ModelConfig& c) {
    v("head", c.head);
    v("visual_dim", c.visual_dim);
    v("proj_hidden", c.proj_hidden);
    v.section("encoder", [&](V& e) { visit_encoder(e, c.encoder); });
    v.section("stgr", [&](V& s) {
        s("layers", c.stgr.layers);
        s("heads", c.stgr.heads);
        s("adapter_dim", c.stgr.adapter_dim);
        s("head_hidden", c.stgr.head_hidden);
        s("layernorm_eps", c.stgr.layernorm_eps);
        s("edge_top_k", c.stgr.edge_top_k);
    });
    v("virtual_backbones", c.virtual_backbones);
}

template <typename V>
void visit_train(V& v, train::TrainConfig& c) {
    v("epochs", c.epochs);
    v("batch", c.batch);
    v("match_threshold", c.match_threshold);
    v.section("optim", [&](V& o) {
        o("lr", c.optim.lr);
        o("beta1", c.optim.beta1);
        o("beta2", c.optim.beta2);
        o("eps", c.optim.eps);
        o("weight_decay", c.optim.weight_decay);
        o("lr_min_ratio", c.optim.lr_min_ratio);
        o("max_grad_norm", c.optim.max_grad_norm);
    });
    v.section("loss", [&](V& l) {
        l("ce", c.loss.ce);
        l("nce", c.loss.nce);
        l("reg", c.loss.reg);
        l("tau_nce", c.loss.tau_nce);
    });
}

template <typename V>
void visit_all(V& v, RunConfig& c) {
    v("seed", c.seed);
    v("threads", c.threads);
    v.section("synth", [&](V& s) { visit_synth(s, c.synth); });
    v.section("model", [&](V& m) { visit_model(m, c.model); });
    v.section("train", [&](V& t) { visit_train(t, c.train); });
    v.section("eval", [&](V& e) {
        e("k", c.cv.k);
        e("tau_sel", c.cv.tau_sel);
        e("heads", c.heads);
    });
}

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(fmt::format("{}: expected an object", path_.empty() ? "$" : path_));
    }

    template <typename T>
    void operator()(const char* key, T& out) {
        const auto it = j_.find(key);
        seen_.insert(key);
        if (it == j_.end()) return;
        read(*it, join(path_, key), out);
    }

    template <typename F>
    void section(const char* key, F&& f) {
        const auto it = j_.find(key);
        seen_.insert(key);
        if (it == j_.end()) return;
        Reader sub(*it, join(path_, key));
        f(sub);
        sub.finish();
    }

    void finish() const {
        for (const auto& [k, _] : j_.items())
            if (!seen_.count(k)) throw ConfigError(fmt::format("unknown config key '{}'", join(path_, k)));
    }

private:
    template <typename T>
        requires std::is_unsigned_v<T>
    static void read(const json& v, const std::string& path, T& out) {
        if (!v.is_number_unsigned()) throw ConfigError(fmt::format("{}: expected a non-negative integer", path));
        const auto x = v.get<std::uint64_t>();
        if (x > std::numeric_limits<T>::max()) throw ConfigError(fmt::format("{}: value {} out of range", path, x));
        out = static_cast<T>(x);
    }
    static void read(const json& v, const std::string& path, double& out) {
        if (!v.is_number()) throw ConfigError(fmt::format("{}: expected a number", path));
        out = v.get<double>();
    }
    static void read(const json& v, const std::string& path, std::string& out) {
        if (!v.is_string()) throw ConfigError(fmt::format("{}: expected a string", path));
        out = v.get<std::string>();
    }
    static void read(const json& v, const std::string& path, std::vector<std::string>& out) {
        if (!v.is_array()) throw ConfigError(fmt::format("{}: expected an array of strings", path));
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::string s;
            read(v[i], fmt::format("{}[{}]", path, i), s);
            out.push_back(std::move(s));
        }
    }
    static void read(const json& v, const std::string& path, std::map<std::string, std::uint64_t>& out) {
        if (!v.is_object()) throw ConfigError(fmt::format("{}: expected an object of counts", path));
        out.clear();
        for (const auto& [k, x] : v.items()) read(x, join(path, k), out[k]);
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

class Writer {
public:
    json out = json::object();

    template <typename T>
    void operator()(const char* key, T& value) {
        out[key] = value;
    }

    template <typename F>
    void section(const char* key, F&& f) {
        Writer sub;
        f(sub);
        out[key] = std::move(sub.out);
    }
};

void require(bool ok, std::string_view key, std::string_view what) {
    if (!ok) throw ConfigError(fmt::format("{}: {}", key, what));
}

} // namespace

RunConfig default_run_config() {
    RunConfig c;
    c.model.virtual_backbones = {
        {"llama3_v_8b", 8'030'261'248ULL},
        {"grounding_dino_swin_t", 172'249'090ULL},
        {"medsam_vit_b", 93'735'472ULL},
        {"dinov2_vit_l14", 304'368'640ULL},
    };
    return c;
}

RunConfig run_config_from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("config is not valid JSON: {}", e.what()));
    }
    RunConfig c = default_run_config();
    Reader r(j, "");
    visit_all(r, c);
    r.finish();
    validate_run_config(c);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    try {
        return run_config_from_json(tensor::read_file(path));
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

std::string run_config_to_json(const RunConfig& cfg) {
    RunConfig copy = cfg;
    Writer w;
    visit_all(w, copy);
    return w.out.dump(2) + "\n";
}

void validate_run_config(const RunConfig& c) {
    require(c.threads >= 1, "threads", "must be at least 1");
    try {
        synth::validate_config(c.synth);
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("synth: {}", e.what()));
    }

    const auto& m = c.model;
    require(m.head == "stgr" || m.head == "linear" || m.head == "cosine-threshold", "model.head",
            "expected stgr, linear or cosine-threshold");
    require(m.visual_dim > 0, "model.visual_dim", "must be positive");
    require(m.visual_dim == c.synth.feature_dim, "model.visual_dim", "must equal synth.feature_dim");
    require(m.encoder.dim == c.synth.text_dim, "model.encoder.dim", "must equal synth.text_dim");
    require(m.encoder.dim > 0 && m.encoder.heads > 0 && m.encoder.dim % m.encoder.heads == 0, "model.encoder.heads",
            "must divide model.encoder.dim");
    require(m.encoder.vocab > 0, "model.encoder.vocab", "must be positive");
    require(m.encoder.soft_tokens >= 1 && m.encoder.soft_tokens <= m.encoder.max_len, "model.encoder.soft_tokens",
            "must be in [1, max_len]");
    require(m.encoder.layernorm_eps > 0, "model.encoder.layernorm_eps", "must be positive");
    require(m.encoder.lora.rank > 0, "model.encoder.lora.rank", "must be positive");
    require(m.encoder.lora.alpha > 0, "model.encoder.lora.alpha", "must be positive");
    require(m.encoder.lora.dropout >= 0 && m.encoder.lora.dropout < 1, "model.encoder.lora.dropout", "must be in [0, 1)");
    require(m.stgr.heads > 0 && m.visual_dim % m.stgr.heads == 0, "model.stgr.heads", "must divide model.visual_dim");
    require(m.stgr.adapter_dim > 0, "model.stgr.adapter_dim", "must be positive");
    require(m.stgr.layernorm_eps > 0, "model.stgr.layernorm_eps", "must be positive");

    const auto& t = c.train;
    require(t.batch > 0, "train.batch", "must be positive");
    require(t.match_threshold > 0 && t.match_threshold <= 1, "train.match_threshold", "must be in (0, 1]");
    require(t.optim.lr >= 0, "train.optim.lr", "must be non-negative");
    require(t.optim.beta1 >= 0 && t.optim.beta1 < 1, "train.optim.beta1", "must be in [0, 1)");
    require(t.optim.beta2 >= 0 && t.optim.beta2 < 1, "train.optim.beta2", "must be in [0, 1)");
    require(t.optim.eps > 0, "train.optim.eps", "must be positive");
    require(t.optim.weight_decay >= 0, "train.optim.weight_decay", "must be non-negative");
    require(t.optim.lr_min_ratio >= 0 && t.optim.lr_min_ratio <= 1, "train.optim.lr_min_ratio", "must be in [0, 1]");
    require(t.optim.max_grad_norm >= 0, "train.optim.max_grad_norm", "must be non-negative (0 disables)");
    require(t.loss.ce >= 0, "train.loss.ce", "must be non-negative");
    require(t.loss.nce >= 0, "train.loss.nce", "must be non-negative");
    require(t.loss.reg >= 0, "train.loss.reg", "must be non-negative");
    require(t.loss.tau_nce > 0, "train.loss.tau_nce", "must be positive");

    require(c.cv.k >= 2, "eval.k", "must be at least 2");
    require(c.cv.tau_sel >= 0 && c.cv.tau_sel <= 1, "eval.tau_sel", "must be in [0, 1]");
    require(!c.heads.empty(), "eval.heads", "must name at least one head");
    for (const auto& h : c.heads)
        require(h == "stgr" || h == "linear" || h == "cosine-threshold", "eval.heads",
                fmt::format("unknown head '{}'", h));
}

train::TrainConfig effective_train_config(const RunConfig& cfg) {
    train::TrainConfig t = cfg.train;
    t.seed = eval::train_seed(cfg.seed);
    t.threads = cfg.threads;
    return t;
}

} // namespace stgr::cli
