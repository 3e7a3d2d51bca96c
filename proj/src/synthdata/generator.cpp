// SPDX-License-Identifier: Apache-2.0
#include "stgr/synthdata/generator.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "stgr/error.hpp"
#include "stgr/training/losses.hpp"

namespace stgr::synth {

using mask::Mask;
using tensor::Tensor;

namespace {

using Bitmap = std::vector<std::uint8_t>;
using Vec = std::vector<double>;

constexpr int kMaxAttempts = 200;

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError(fmt::format("phantom config: {} {}", field, why));
}

Vec gaussian_vec(Rng& rng, std::size_t d, double norm) {
    Vec v(d);
    const double s = norm / std::sqrt(static_cast<double>(d));
    for (auto& x : v) x = s * rng.normal();
    return v;
}

Vec unit_vec(Rng& rng, std::size_t d) {
    Vec v = gaussian_vec(rng, d, 1.0);
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (auto& x : v) x /= n;
    return v;
}

/// Gram-Schmidt over Gaussian draws.
std::vector<Vec> orthonormal(Rng& rng, std::size_t count, std::size_t d) {
    std::vector<Vec> basis;
    while (basis.size() < count) {
        Vec v = gaussian_vec(rng, d, 1.0);
        for (const auto& b : basis) {
            double dot = 0;
            for (std::size_t i = 0; i < d; ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
        }
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        if (n < 1e-6) continue;
        for (auto& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    return basis;
}

Vec combine(double a, const Vec& x, double b, const Vec& y) {
    Vec out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

// --- shapes ---------------------------------------------------------------

struct Ellipse {
    double cy, cx, ry, rx, angle;
};

struct Arc {
    double oy, ox, radius, thickness, phi, span;
};

struct Shape {
    enum Kind { ellipse, arc } kind;
    Ellipse e{};
    Arc a{};
};

Bitmap rasterize(const Shape& s, std::uint32_t h, std::uint32_t w) {
    Bitmap b(std::size_t{h} * w, 0);
    if (s.kind == Shape::ellipse) {
        const auto& e = s.e;
        const double c = std::cos(e.angle), sn = std::sin(e.angle);
        for (std::uint32_t y = 0; y < h; ++y)
            for (std::uint32_t x = 0; x < w; ++x) {
                const double dx = x - e.cx, dy = y - e.cy;
                const double u = (dx * c + dy * sn) / e.rx;
                const double v = (-dx * sn + dy * c) / e.ry;
                b[std::size_t{y} * w + x] = u * u + v * v <= 1.0;
            }
    } else {
        const auto& a = s.a;
        const double lo = a.radius - a.thickness / 2, hi = a.radius + a.thickness / 2;
        for (std::uint32_t y = 0; y < h; ++y)
            for (std::uint32_t x = 0; x < w; ++x) {
                const double dx = x - a.ox, dy = y - a.oy;
                const double r2 = dx * dx + dy * dy;
                if (r2 < lo * lo || r2 > hi * hi) continue;
                double d = std::atan2(dy, dx) - a.phi;
                d = std::remainder(d, 2 * std::numbers::pi);
                b[std::size_t{y} * w + x] = std::abs(d) <= a.span / 2;
            }
    }
    return b;
}

std::uint64_t count(const Bitmap& b) {
    std::uint64_t n = 0;
    for (auto v : b) n += v;
    return n;
}

bool touches(const Bitmap& a, const Bitmap& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && b[i]) return true;
    return false;
}

/// Shift and radius perturbation of up to `px` pixels.
Shape jitter(const Shape& s, Rng& rng, double px) {
    if (px <= 0) return s;
    Shape out = s;
    if (s.kind == Shape::ellipse) {
        out.e.cy += rng.uniform(-px, px);
        out.e.cx += rng.uniform(-px, px);
        out.e.ry = std::max(1.5, s.e.ry + rng.uniform(-px, px) / 2);
        out.e.rx = std::max(1.5, s.e.rx + rng.uniform(-px, px) / 2);
    } else {
        out.a.oy += rng.uniform(-px, px);
        out.a.ox += rng.uniform(-px, px);
        out.a.thickness = std::max(2.0, s.a.thickness + rng.uniform(-px, px) / 2);
    }
    return out;
}

struct Structure {
    enum Role { target, off_target, confounder } role;
    Shape shape;
    Bitmap bits;
    Vec feature;  // prototype + instance noise
};

} // namespace

void validate_config(const PhantomConfig& c) {
    require(c.height >= 32 && c.width >= 32, "height/width", "must be at least 32");
    require(c.lesion_classes >= 1, "lesion_classes", "must be at least 1");
    require(c.lesions_min >= 1 && c.lesions_min <= c.lesions_max, "lesions_min/lesions_max", "must satisfy 1 <= min <= max");
    require(c.confounders_min <= c.confounders_max, "confounders_min/confounders_max", "must satisfy min <= max");
    require(c.candidates_min >= 1 && c.candidates_min <= c.candidates_max, "candidates_min/candidates_max",
            "must satisfy 1 <= min <= max");
    require(c.attributes_min >= 1 && c.attributes_min <= c.attributes_max, "attributes_min/attributes_max",
            "must satisfy 1 <= min <= max");
    require(c.lesion_radius_min >= 2 && c.lesion_radius_min <= c.lesion_radius_max, "lesion_radius_min/max",
            "must satisfy 2 <= min <= max");
    require(2 * c.lesion_radius_max + 4 < std::min(c.height, c.width), "lesion_radius_max", "does not fit the grid");
    for (auto [name, p] : {std::pair{"off_target_rate", c.off_target_rate}, {"overlap_intensity", c.overlap_intensity},
                           {"spurious_rate", c.spurious_rate}})
        require(p >= 0 && p <= 1, name, "must be in [0, 1]");
    require(c.target_copies >= 1, "target_copies", "must be at least 1");
    require(c.jitter_px >= 0, "jitter_px", "must be non-negative");
    require(c.class_cosine >= 0 && c.class_cosine < 1, "class_cosine", "must be in [0, 1)");
    require(c.confounder_cosine >= 0 && c.confounder_cosine * c.confounder_cosine <= c.class_cosine,
            "confounder_cosine", "squared must not exceed class_cosine");
    require(c.feature_dim >= c.lesion_classes + 4, "feature_dim", "must exceed lesion_classes + 3");
    require(c.text_dim >= 1, "text_dim", "must be positive");
    require(c.structure_noise >= 0 && c.feature_noise >= 0 && c.attribute_noise >= 0, "noise levels",
            "must be non-negative");
}

Prototypes make_prototypes(const PhantomConfig& cfg) {
    validate_config(cfg);
    Rng rng(derive_seed({cfg.prototype_seed, 0x70726f746fULL}));
    const auto C = cfg.lesion_classes;
    const auto basis = orthonormal(rng, C + 4, cfg.feature_dim);
    Prototypes p;
    const double beta = cfg.class_cosine, rho = cfg.confounder_cosine;
    for (std::size_t c = 0; c < C; ++c) p.lesion.push_back(combine(std::sqrt(beta), basis[0], std::sqrt(1 - beta), basis[1 + c]));
    const double shared = beta > 0 ? rho / std::sqrt(beta) : 0.0;
    for (std::size_t t = 0; t < 2; ++t)
        p.confounder.push_back(combine(shared, basis[0], std::sqrt(std::max(0.0, 1 - shared * shared)), basis[1 + C + t]));
    p.background = basis[C + 3];
    p.text.resize(C);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < cfg.attributes_max; ++k) p.text[c].push_back(unit_vec(rng, cfg.text_dim));
    return p;
}

namespace {

Shape random_lesion(const PhantomConfig& cfg, Rng& rng) {
    Shape s{Shape::ellipse};
    const double r = cfg.lesion_radius_max + 2;
    s.e.cy = rng.uniform(r, cfg.height - 1 - r);
    s.e.cx = rng.uniform(r, cfg.width - 1 - r);
    s.e.ry = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
    s.e.rx = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
    s.e.angle = rng.uniform(0, std::numbers::pi);
    return s;
}

/// Vessel (thin long ellipse) or rib (arc band), optionally through (cy, cx).
Shape random_confounder(const PhantomConfig& cfg, Rng& rng, bool through, double cy, double cx) {
    Shape s{};
    if (!through) {
        cy = rng.uniform(0, cfg.height - 1);
        cx = rng.uniform(0, cfg.width - 1);
    }
    const double scale = std::min(cfg.height, cfg.width) / 128.0;
    if (rng.bernoulli(0.5)) {
        s.kind = Shape::ellipse;
        s.e.cy = cy;
        s.e.cx = cx;
        s.e.rx = rng.uniform(18, 34) * scale;
        s.e.ry = rng.uniform(1.6, 2.8);
        s.e.angle = rng.uniform(0, std::numbers::pi);
        if (through) {
            // slide along the axis so the lesion is crossed off-centre
            const double t = rng.uniform(-0.5, 0.5) * s.e.rx;
            s.e.cx += t * std::cos(s.e.angle);
            s.e.cy += t * std::sin(s.e.angle);
        }
    } else {
        s.kind = Shape::arc;
        s.a.radius = rng.uniform(40, 80) * scale;
        s.a.thickness = rng.uniform(4, 7);
        const double phi = rng.uniform(-std::numbers::pi, std::numbers::pi);
        s.a.oy = cy - s.a.radius * std::sin(phi);
        s.a.ox = cx - s.a.radius * std::cos(phi);
        s.a.phi = phi + (through ? rng.uniform(-0.2, 0.2) : 0.0);
        s.a.span = rng.uniform(0.6, 1.0);
    }
    return s;
}

Shape random_blob(const PhantomConfig& cfg, Rng& rng) {
    Shape s{Shape::ellipse};
    s.e.ry = rng.uniform(3, cfg.lesion_radius_max);
    s.e.rx = rng.uniform(3, cfg.lesion_radius_max);
    const double r = std::max(s.e.ry, s.e.rx) + 1;
    s.e.cy = rng.uniform(r, cfg.height - 1 - r);
    s.e.cx = rng.uniform(r, cfg.width - 1 - r);
    s.e.angle = rng.uniform(0, std::numbers::pi);
    return s;
}

Vec noisy(const Vec& proto, Rng& rng, double noise) {
    const Vec n = gaussian_vec(rng, proto.size(), noise);
    Vec out(proto.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = proto[i] + n[i];
    return out;
}

} // namespace

Scene generate_scene(const PhantomConfig& cfg, std::uint64_t seed, const std::string& scene_id) {
    const Prototypes protos = make_prototypes(cfg);
    Rng rng(seed);
    const auto H = cfg.height, W = cfg.width;
    const auto C = cfg.lesion_classes;

    const std::size_t target_class = rng.below(C);
    const auto n_lesions = static_cast<std::size_t>(rng.range(cfg.lesions_min, cfg.lesions_max));
    std::vector<Structure> structs;
    for (std::size_t i = 0; i < n_lesions; ++i) {
        std::size_t cls = target_class;
        if (i > 0 && C > 1 && rng.bernoulli(cfg.off_target_rate)) cls = (target_class + 1 + rng.below(C - 1)) % C;
        Structure s{cls == target_class ? Structure::target : Structure::off_target, {}, {}, {}};
        int attempt = 0;
        for (; attempt < kMaxAttempts; ++attempt) {
            s.shape = random_lesion(cfg, rng);
            // keep lesions apart with a one-pixel margin
            Shape grown = s.shape;
            grown.e.rx += 2;
            grown.e.ry += 2;
            const Bitmap halo = rasterize(grown, H, W);
            bool clear = true;
            for (const auto& o : structs) clear = clear && !touches(halo, o.bits);
            if (clear) break;
        }
        if (attempt == kMaxAttempts)
            throw GenerationError(fmt::format("scene seed {}: no room for lesion {} of {} without overlapping another lesion",
                                              seed, i + 1, n_lesions));
        s.bits = rasterize(s.shape, H, W);
        s.feature = noisy(protos.lesion[cls], rng, cfg.structure_noise);
        structs.push_back(std::move(s));
    }

    const auto n_conf = static_cast<std::size_t>(rng.range(cfg.confounders_min, cfg.confounders_max));
    for (std::size_t i = 0; i < n_conf; ++i) {
        const bool through = rng.bernoulli(cfg.overlap_intensity);
        const auto& host = structs[rng.below(n_lesions)].shape.e;
        Structure s{Structure::confounder, {}, {}, {}};
        int attempt = 0;
        for (; attempt < kMaxAttempts; ++attempt) {
            s.shape = random_confounder(cfg, rng, through, host.cy, host.cx);
            s.bits = rasterize(s.shape, H, W);
            if (count(s.bits) < 40) continue;
            if (through) break;
            bool clear = true;
            for (std::size_t j = 0; j < n_lesions; ++j) clear = clear && !touches(s.bits, structs[j].bits);
            if (clear) break;
        }
        if (attempt == kMaxAttempts)
            throw GenerationError(fmt::format("scene seed {}: could not place confounder {} ({})", seed, i + 1,
                                              through ? "crossing a lesion" : "clear of every lesion"));
        s.feature = noisy(protos.confounder[s.shape.kind == Shape::arc ? 1 : 0], rng, cfg.structure_noise);
        structs.push_back(std::move(s));
    }

    // Candidate pool: jittered copies of true structures plus spurious blobs.
    struct Pending {
        Bitmap bits;
        int priority;  // lower survives trimming
    };
    std::vector<Pending> pool;
    for (const auto& s : structs) {
        const std::size_t copies = s.role == Structure::target ? cfg.target_copies : 1;
        for (std::size_t c = 0; c < copies; ++c) {
            Bitmap b;
            for (int attempt = 0; attempt < kMaxAttempts && count(b) == 0; ++attempt)
                b = rasterize(jitter(s.shape, rng, cfg.jitter_px), H, W);
            if (count(b) == 0) throw GenerationError(fmt::format("scene seed {}: jittered copy left the grid", seed));
            pool.push_back({std::move(b), c == 0 ? 0 : 1});
        }
    }
    std::size_t spurious = 0;
    for (int k = 0; k < 2; ++k) spurious += rng.bernoulli(cfg.spurious_rate);
    while (pool.size() + spurious < cfg.candidates_min) ++spurious;
    for (std::size_t k = 0; k < spurious; ++k) pool.push_back({rasterize(random_blob(cfg, rng), H, W), 2});
    std::stable_sort(pool.begin(), pool.end(), [](const Pending& a, const Pending& b) { return a.priority < b.priority; });
    if (pool.size() > cfg.candidates_max) pool.resize(cfg.candidates_max);
    rng.shuffle(pool);

    Scene scene;
    scene.scene_id = scene_id.empty() ? fmt::format("scene-{:016x}", seed) : scene_id;
    scene.height = H;
    scene.width = W;
    scene.seed = seed;
    const auto d = cfg.feature_dim;
    scene.features = Tensor({pool.size(), d});
    const Vec bg = noisy(protos.background, rng, cfg.structure_noise);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& cand = pool[i].bits;
        const double total = static_cast<double>(count(cand));
        Vec f(d, 0.0);
        std::vector<std::uint8_t> covered(cand.size(), 0);
        for (const auto& s : structs) {
            std::uint64_t overlap = 0;
            for (std::size_t p = 0; p < cand.size(); ++p) {
                if (cand[p] && s.bits[p]) {
                    ++overlap;
                    covered[p] = 1;
                }
            }
            const double wgt = static_cast<double>(overlap) / total;
            for (std::size_t j = 0; j < d; ++j) f[j] += wgt * s.feature[j];
        }
        const double bg_w = static_cast<double>(count(cand) - count(covered)) / total;
        const Vec n = gaussian_vec(rng, d, cfg.feature_noise);
        for (std::size_t j = 0; j < d; ++j) scene.features(i, j) = f[j] + bg_w * bg[j] + n[j];
        scene.candidates.push_back(Mask::from_bitmap(H, W, cand));
    }
    for (const auto& s : structs)
        if (s.role == Structure::target) scene.gt.push_back(Mask::from_bitmap(H, W, s.bits));

    const auto k = static_cast<std::size_t>(rng.range(cfg.attributes_min, cfg.attributes_max));
    scene.attributes = Tensor({k, cfg.text_dim});
    for (std::size_t a = 0; a < k; ++a) {
        const Vec v = noisy(protos.text[target_class][a], rng, cfg.attribute_noise);
        for (std::size_t j = 0; j < cfg.text_dim; ++j) scene.attributes(a, j) = v[j];
    }
    auto lab = train::label_candidates(scene.candidates, scene.gt, 0.5);
    scene.labels = std::move(lab.labels);
    scene.true_iou = std::move(lab.true_iou);
    validate_scene(scene);
    return scene;
}

std::vector<Scene> generate_scenes(const PhantomConfig& cfg, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ArgumentError("n_scenes must be at least 1");
    std::vector<Scene> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(generate_scene(cfg, derive_seed({seed, i}), fmt::format("scene-{:05d}", i)));
    return out;
}

} // namespace stgr::synth
