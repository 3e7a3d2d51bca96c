// SPDX-License-Identifier: Apache-2.0
#include "stgr/tvid/tvid.hpp"

#include <cmath>

#include <fmt/format.h>

#include "stgr/error.hpp"

namespace stgr::tvid {

using namespace stgr::tensor;

const char* group_name(Group g) {
    switch (g) {
    case Group::backbone_stub: return "backbone-stub";
    case Group::lora: return "lora";
    case Group::adapter: return "adapter";
    case Group::proj: return "proj";
    case Group::stgr: return "stgr";
    }
    return "?";
}

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double std) {
    Tensor t({rows, cols});
    // + 0.0 turns the -0.0 of a zero std into +0.0
    for (auto& v : t.data()) v = std * rng.normal() + 0.0;
    return t;
}

Tensor stack_attributes(std::span<const AttributeVector> attrs) {
    if (attrs.empty()) throw ArgumentError("no attribute vectors");
    const auto d = attrs[0].values.size();
    Tensor out({attrs.size(), d});
    for (std::size_t k = 0; k < attrs.size(); ++k) {
        if (attrs[k].values.size() != d) throw ShapeError("attribute vectors differ in length");
        for (std::size_t j = 0; j < d; ++j) out(k, j) = attrs[k].values[j];
    }
    return out;
}

// --- LoraLinear ------------------------------------------------------------

LoraLinear::LoraLinear(std::string name, std::size_t in, std::size_t out, const LoraConfig& cfg, Rng& rng)
    : scaling_(cfg.alpha / static_cast<double>(cfg.rank)),
      dropout_(cfg.dropout),
      weight_(name + ".weight", gaussian(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))), false),
      bias_(name + ".bias", Tensor({1, out}), false),
      down_(name + ".lora_down", gaussian(rng, in, cfg.rank, 0.02)),
      up_(name + ".lora_up", Tensor({cfg.rank, out})) {
    if (cfg.rank == 0) throw ConfigError("lora rank must be positive");
}

Var LoraLinear::forward(Var x, std::uint64_t dropout_layer) {
    Tape& t = x.tape();
    const Var base = add_row(matmul(x, t.param(weight_)), t.param(bias_));
    const Var low = matmul(matmul(dropout(x, dropout_, dropout_layer), t.param(down_)), t.param(up_));
    return add(base, scale(low, scaling_));
}

Tensor LoraLinear::effective_weight() const {
    Tensor w = weight_.value;
    const Tensor delta = kernels::matmul(down_.value, up_.value);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += scaling_ * delta[i];
    return w;
}

void LoraLinear::collect(std::vector<ParamRef>& out) {
    out.push_back({&weight_, Group::backbone_stub});
    out.push_back({&bias_, Group::backbone_stub});
    out.push_back({&down_, Group::lora});
    out.push_back({&up_, Group::lora});
}

// --- TextEncoderStub -------------------------------------------------------

TextEncoderStub::TextEncoderStub(const EncoderConfig& cfg, Rng& rng)
    : cfg_(cfg),
      token_embedding_("encoder.token_embedding", gaussian(rng, cfg.vocab, cfg.dim, 1.0), false),
      position_embedding_("encoder.position_embedding", gaussian(rng, cfg.max_len, cfg.dim, 0.5), false),
      final_gain_("encoder.final_norm.gain", Tensor({1, cfg.dim}, 1.0), false),
      final_bias_("encoder.final_norm.bias", Tensor({1, cfg.dim}), false) {
    if (cfg.dim % cfg.heads != 0) throw ConfigError("encoder dim must be divisible by heads");
    if (cfg.soft_tokens == 0 || cfg.soft_tokens > cfg.max_len) throw ConfigError("soft_tokens must be in [1, max_len]");
    const auto d = cfg.dim;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    blocks_.reserve(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const auto p = fmt::format("encoder.block{}", b);
        blocks_.push_back(Block{
            Parameter(p + ".ln1.gain", Tensor({1, d}, 1.0), false),
            Parameter(p + ".ln1.bias", Tensor({1, d}), false),
            LoraLinear(p + ".attn.q", d, d, cfg.lora, rng),
            LoraLinear(p + ".attn.k", d, d, cfg.lora, rng),
            LoraLinear(p + ".attn.v", d, d, cfg.lora, rng),
            LoraLinear(p + ".attn.o", d, d, cfg.lora, rng),
            Parameter(p + ".ln2.gain", Tensor({1, d}, 1.0), false),
            Parameter(p + ".ln2.bias", Tensor({1, d}), false),
            Parameter(p + ".ffn.w1", gaussian(rng, d, 2 * d, s), false),
            Parameter(p + ".ffn.b1", Tensor({1, 2 * d}), false),
            Parameter(p + ".ffn.w2", gaussian(rng, 2 * d, d, s / std::sqrt(2.0)), false),
            Parameter(p + ".ffn.b2", Tensor({1, d}), false),
        });
    }
}

Var TextEncoderStub::run_stack(Tape& tape, Var x) {
    const auto d = cfg_.dim;
    const auto dh = d / cfg_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        auto& blk = blocks_[b];
        const std::uint64_t layer = 100 + 4 * b;
        const Var h = layernorm(x, tape.param(blk.ln1_gain), tape.param(blk.ln1_bias), cfg_.layernorm_eps);
        const Var q = blk.q.forward(h, layer + 0);
        const Var k = blk.k.forward(h, layer + 1);
        const Var v = blk.v.forward(h, layer + 2);
        std::vector<Var> heads;
        for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
            const Var qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            const Var kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            const Var vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            const Var attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
            heads.push_back(matmul(attn, vh));
        }
        x = add(x, blk.o.forward(concat_cols(heads), layer + 3));
        const Var h2 = layernorm(x, tape.param(blk.ln2_gain), tape.param(blk.ln2_bias), cfg_.layernorm_eps);
        const Var ff = add_row(matmul(gelu(add_row(matmul(h2, tape.param(blk.ffn_w1)), tape.param(blk.ffn_b1))),
                                      tape.param(blk.ffn_w2)),
                               tape.param(blk.ffn_b2));
        x = add(x, ff);
    }
    const Var out = layernorm(x, tape.param(final_gain_), tape.param(final_bias_), cfg_.layernorm_eps);
    return mean_rows(out);
}

Var TextEncoderStub::encode_tokens(Tape& tape, std::span<const int> tokens) {
    if (tokens.empty()) throw ArgumentError("empty token sequence");
    if (tokens.size() > cfg_.max_len)
        throw ArgumentError(fmt::format("token sequence of length {} exceeds max_len {}", tokens.size(), cfg_.max_len));
    const Var table = tape.param(token_embedding_);
    std::vector<Var> rows;
    for (int tok : tokens) {
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg_.vocab)
            throw ArgumentError(fmt::format("token id {} outside vocabulary of {}", tok, cfg_.vocab));
        rows.push_back(slice_rows(table, static_cast<std::size_t>(tok), static_cast<std::size_t>(tok) + 1));
    }
    const Var x = add(concat_rows(rows), slice_rows(tape.param(position_embedding_), 0, tokens.size()));
    return run_stack(tape, x);
}

Var TextEncoderStub::encode_embedded(Tape& tape, Var embedded) {
    if (embedded.value().size() != cfg_.dim)
        throw ShapeError(fmt::format("attribute vector has {} values, encoder expects {}", embedded.value().size(),
                                     cfg_.dim));
    const Var positions = slice_rows(tape.param(position_embedding_), 0, cfg_.soft_tokens);
    return run_stack(tape, add_row(positions, embedded));
}

Var TextEncoderStub::encode_rows(Tape& tape, Var attributes) {
    const auto k = attributes.value().rows();
    if (k == 0) throw ArgumentError("no attributes to encode");
    std::vector<Var> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(encode_embedded(tape, slice_rows(attributes, i, i + 1)));
    return concat_rows(out);
}

void TextEncoderStub::collect(std::vector<ParamRef>& out) {
    out.push_back({&token_embedding_, Group::backbone_stub});
    out.push_back({&position_embedding_, Group::backbone_stub});
    for (auto& blk : blocks_) {
        out.push_back({&blk.ln1_gain, Group::backbone_stub});
        out.push_back({&blk.ln1_bias, Group::backbone_stub});
        blk.q.collect(out);
        blk.k.collect(out);
        blk.v.collect(out);
        blk.o.collect(out);
        out.push_back({&blk.ln2_gain, Group::backbone_stub});
        out.push_back({&blk.ln2_bias, Group::backbone_stub});
        out.push_back({&blk.ffn_w1, Group::backbone_stub});
        out.push_back({&blk.ffn_b1, Group::backbone_stub});
        out.push_back({&blk.ffn_w2, Group::backbone_stub});
        out.push_back({&blk.ffn_b2, Group::backbone_stub});
    }
    out.push_back({&final_gain_, Group::backbone_stub});
    out.push_back({&final_bias_, Group::backbone_stub});
}

std::vector<Parameter*> TextEncoderStub::frozen_parameters() {
    std::vector<ParamRef> refs;
    collect(refs);
    std::vector<Parameter*> out;
    for (const auto& r : refs)
        if (r.group == Group::backbone_stub) out.push_back(r.param);
    return out;
}

std::vector<LoraLinear*> TextEncoderStub::adapters() {
    std::vector<LoraLinear*> out;
    for (auto& blk : blocks_) {
        out.push_back(&blk.q);
        out.push_back(&blk.k);
        out.push_back(&blk.v);
        out.push_back(&blk.o);
    }
    return out;
}

std::vector<AttributeVector> encode_attributes(const std::vector<std::vector<int>>& tokenized,
                                               TextEncoderStub& encoder) {
    if (tokenized.empty()) throw ArgumentError("encode_attributes: no attributes");
    std::vector<AttributeVector> out;
    for (std::size_t k = 0; k < tokenized.size(); ++k) {
        Tape tape(Mode::eval);
        const Tensor& v = encoder.encode_tokens(tape, tokenized[k]).value();
        out.push_back({std::vector<double>(v.data().begin(), v.data().end()), static_cast<int>(k)});
    }
    return out;
}

// --- Projection ------------------------------------------------------------

Projection::Projection(std::size_t text_dim, std::size_t hidden, std::size_t visual_dim, Rng& rng)
    : w1_("proj.w1", gaussian(rng, text_dim, hidden, 1.0 / std::sqrt(static_cast<double>(text_dim)))),
      b1_("proj.b1", Tensor({1, hidden})),
      w2_("proj.w2", gaussian(rng, hidden, visual_dim, 1.0 / std::sqrt(static_cast<double>(hidden)))),
      b2_("proj.b2", Tensor({1, visual_dim})) {}

Var Projection::forward(Tape& tape, Var latents) {
    if (latents.value().cols() != in_dim())
        throw ConfigError(fmt::format("projection expects {}-dim latents, got {}", in_dim(), latents.value().cols()));
    const Var h = gelu(add_row(matmul(latents, tape.param(w1_)), tape.param(b1_)));
    return add_row(matmul(h, tape.param(w2_)), tape.param(b2_));
}

void Projection::collect(std::vector<ParamRef>& out) {
    for (auto* p : {&w1_, &b1_, &w2_, &b2_}) out.push_back({p, Group::proj});
}

GuidanceSet project_guidance(std::span<const AttributeVector> attrs, Projection& proj, std::size_t visual_dim) {
    if (proj.out_dim() != visual_dim)
        throw ConfigError(fmt::format("projection produces {}-dim guidance, configured d_v is {}", proj.out_dim(),
                                      visual_dim));
    const Tensor stacked = stack_attributes(attrs);
    Tape tape(Mode::eval);
    return GuidanceSet{proj.forward(tape, tape.constant(stacked)).value()};
}

} // namespace stgr::tvid
