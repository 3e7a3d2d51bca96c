// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stgr/rng.hpp"
#include "stgr/tensorcore/ops.hpp"

namespace stgr::tvid {

using tensor::Parameter;
using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

/// Registry group tags shared by all trainable modules.
enum class Group { backbone_stub, lora, adapter, proj, stgr };

const char* group_name(Group g);

struct ParamRef {
    Parameter* param;
    Group group;
};

/// Latent text vector for one attribute of an instruction.
struct AttributeVector {
    std::vector<double> values;
    int attribute_id = 0;
};

/// K guidance vectors in visual space, one per row.
struct GuidanceSet {
    Tensor vectors;  // [K x d_v]

    std::size_t count() const { return vectors.rows(); }
    std::size_t dim() const { return vectors.cols(); }
};

struct LoraConfig {
    std::size_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;
};

/// Frozen dense projection x W + b with a trainable low-rank update.
///
/// The effective weight is W + (alpha / r) * down * up. `up` starts at zero, so the
/// layer reproduces the frozen projection exactly until the first optimizer step.
class LoraLinear {
public:
    LoraLinear(std::string name, std::size_t in, std::size_t out, const LoraConfig& cfg, Rng& rng);

    Var forward(Var x, std::uint64_t dropout_layer);

    /// W + scaling * down * up as a plain matrix.
    Tensor effective_weight() const;

    double scaling() const { return scaling_; }
    Parameter& weight() { return weight_; }
    Parameter& bias() { return bias_; }
    Parameter& down() { return down_; }
    Parameter& up() { return up_; }

    void collect(std::vector<ParamRef>& out);

private:
    double scaling_;
    double dropout_;
    Parameter weight_;  // [in x out], frozen
    Parameter bias_;    // [1 x out], frozen
    Parameter down_;    // [in x r]
    Parameter up_;      // [r x out]
};

struct EncoderConfig {
    std::size_t vocab = 64;
    std::size_t max_len = 16;
    std::size_t dim = 32;  // d_t
    std::size_t blocks = 2;
    std::size_t heads = 4;
    std::size_t soft_tokens = 4;
    double layernorm_eps = 1e-5;
    LoraConfig lora;
};

/// Frozen stand-in for the instruction-following language model.
///
/// A pre-norm transformer stack over token embeddings; every attention projection
/// (q, k, v, o) is a LoraLinear. Token-id sequences go through a frozen embedding
/// table. Attribute vectors that arrive pre-embedded (scene files) are expanded into
/// `soft_tokens` positions by adding the frozen positional table, so attention still
/// mixes several positions. The output is the mean of the final normed positions.
class TextEncoderStub {
public:
    TextEncoderStub(const EncoderConfig& cfg, Rng& rng);
    TextEncoderStub(const TextEncoderStub&) = delete;
    TextEncoderStub& operator=(const TextEncoderStub&) = delete;

    const EncoderConfig& config() const { return cfg_; }

    /// [1 x d_t] latent vector for one token sequence.
    Var encode_tokens(Tape& tape, std::span<const int> tokens);

    /// [1 x d_t] latent vector for one pre-embedded attribute ([1 x d_t]).
    Var encode_embedded(Tape& tape, Var embedded);

    /// [K x d_t] latents for K pre-embedded attributes ([K x d_t]).
    Var encode_rows(Tape& tape, Var attributes);

    void collect(std::vector<ParamRef>& out);

    /// Base tensors (everything except LoRA factors).
    std::vector<Parameter*> frozen_parameters();
    std::vector<LoraLinear*> adapters();

private:
    struct Block {
        Parameter ln1_gain, ln1_bias;
        LoraLinear q, k, v, o;
        Parameter ln2_gain, ln2_bias;
        Parameter ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    Var run_stack(Tape& tape, Var x);

    EncoderConfig cfg_;
    Parameter token_embedding_;
    Parameter position_embedding_;
    std::vector<Block> blocks_;
    Parameter final_gain_, final_bias_;
};

/// One latent vector per attribute. Deterministic in eval mode.
std::vector<AttributeVector> encode_attributes(const std::vector<std::vector<int>>& tokenized,
                                               TextEncoderStub& encoder);

/// Two-layer perceptron mapping text latents into visual space:
/// g = gelu(v W1 + b1) W2 + b2, applied to each attribute independently.
class Projection {
public:
    Projection(std::size_t text_dim, std::size_t hidden, std::size_t visual_dim, Rng& rng);
    Projection(const Projection&) = delete;
    Projection& operator=(const Projection&) = delete;

    /// [K x d_t] -> [K x d_v].
    Var forward(Tape& tape, Var latents);

    std::size_t in_dim() const { return w1_.value.rows(); }
    std::size_t out_dim() const { return w2_.value.cols(); }

    Parameter& w1() { return w1_; }
    Parameter& b1() { return b1_; }
    Parameter& w2() { return w2_; }
    Parameter& b2() { return b2_; }

    void collect(std::vector<ParamRef>& out);

private:
    Parameter w1_, b1_, w2_, b2_;
};

/// Projects attribute latents into guidance vectors. Throws ConfigError when the
/// latents do not match the projection input or the projection does not produce
/// `visual_dim` outputs.
GuidanceSet project_guidance(std::span<const AttributeVector> attrs, Projection& proj, std::size_t visual_dim);

/// Stacks attribute vectors into a [K x d] matrix.
Tensor stack_attributes(std::span<const AttributeVector> attrs);

/// N(0, std^2) matrix.
Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double std);

} // namespace stgr::tvid
