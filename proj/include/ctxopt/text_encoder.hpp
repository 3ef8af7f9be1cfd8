// Frozen Transformer text encoder: token + positional embeddings, pre-LN
// attention/MLP blocks with a causal mask, final layernorm read at the EOS
// row, linear projection to the feature space. Weights never train here;
// gradients flow only into whatever feeds the input embedding rows.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctxopt/tensor.hpp"
#include "ctxopt/tokenizer.hpp"

namespace ctxopt {

struct EncoderConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t d_model = 64;
    std::size_t embed_dim = 32; // output feature width
    std::size_t seq_len = 32;   // token cap, positional table height
    std::size_t vocab_size = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
    bool operator==(const EncoderConfig&) const = default;
};

struct EncoderBlock {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_in, mlp_in_bias, mlp_out, mlp_out_bias;
};

struct TextFeature {
    Tensor vector;      // [embed_dim]
    std::string source; // prompt text or a synthetic identity
};

class EncoderWeights {
public:
    // Deterministic Gaussian init, every tensor frozen. Per-tensor scale:
    // token embeddings 0.02, positional 0.01, attention/MLP inputs 1/sqrt(fan_in),
    // residual-writing projections additionally 1/sqrt(2*layers), layernorms
    // identity, biases zero.
    static EncoderWeights init_frozen(std::uint64_t seed, const EncoderConfig& config);

    static EncoderWeights load(const std::string& path);
    void save(const std::string& path) const;

    const EncoderConfig& config() const { return config_; }
    const Tensor& token_embedding() const { return token_embedding_; }
    const Tensor& positional_embedding() const { return positional_embedding_; }
    const std::vector<EncoderBlock>& blocks() const { return blocks_; }
    const Tensor& final_ln_gain() const { return final_ln_gain_; }
    const Tensor& final_ln_bias() const { return final_ln_bias_; }
    const Tensor& text_projection() const { return text_projection_; }

    void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    // fnv1a64 over all tensor payloads in manifest order; changes iff any
    // weight value changes.
    std::uint64_t fingerprint() const;

private:
    EncoderWeights() = default;
    EncoderConfig config_;
    Tensor token_embedding_;      // [V x d]
    Tensor positional_embedding_; // [L x d]
    std::vector<EncoderBlock> blocks_;
    Tensor final_ln_gain_, final_ln_bias_;
    Tensor text_projection_; // [d x e]
};

// Runs the full block stack over [L x d] embeddings and projects the EOS row.
// Differentiable w.r.t. embeds; this is the training gradient path.
TextFeature encode_sequence(const Tensor& embeds, std::size_t eos_index,
                            const EncoderWeights& weights, std::string source = {});

// encode + embed_lookup + encode_sequence.
TextFeature encode_text(const std::string& text, const Vocabulary& vocab,
                        const EncoderWeights& weights);

} // namespace ctxopt
