#include "ctxopt/text_encoder.hpp"

#include <cmath>

#include "ctxopt/tensor_file.hpp"

namespace ctxopt {

namespace {

Tensor seeded_randn(Shape shape, std::uint64_t seed, const std::string& name, float sigma) {
    Rng rng(seed ^ fnv1a64(name));
    return Tensor::randn(std::move(shape), rng, sigma);
}

} // namespace

void EncoderConfig::validate() const {
    if (layers == 0 || heads == 0 || d_model == 0 || embed_dim == 0 || seq_len < 3 ||
        vocab_size == 0)
        throw ConfigError("encoder config fields must be positive (seq_len >= 3)");
    if (d_model % heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"layers", layers},   {"heads", heads},     {"d_model", d_model},
            {"embed_dim", embed_dim}, {"seq_len", seq_len}, {"vocab_size", vocab_size}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    try {
        c.layers = j.at("layers").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.seq_len = j.at("seq_len").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed encoder config: ") + e.what());
    }
    return c;
}

EncoderWeights EncoderWeights::init_frozen(std::uint64_t seed, const EncoderConfig& config) {
    config.validate();
    EncoderWeights w;
    w.config_ = config;
    const std::size_t d = config.d_model, e = config.embed_dim;
    const std::size_t hidden = 4 * d;
    const float in_scale = 1.0f / std::sqrt(static_cast<float>(d));
    const float res_scale = in_scale / std::sqrt(2.0f * static_cast<float>(config.layers));
    const float mlp_out_scale = 1.0f / std::sqrt(static_cast<float>(hidden)) /
                                std::sqrt(2.0f * static_cast<float>(config.layers));

    w.token_embedding_ = seeded_randn({config.vocab_size, d}, seed, "token_embedding", 0.02f);
    w.positional_embedding_ = seeded_randn({config.seq_len, d}, seed, "positional_embedding", 0.01f);

    for (std::size_t i = 0; i < config.layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        EncoderBlock b;
        b.ln1_gain = Tensor::full({d}, 1.0f);
        b.ln1_bias = Tensor::zeros({d});
        b.wq = seeded_randn({d, d}, seed, p + "attn.wq", in_scale);
        b.bq = Tensor::zeros({d});
        b.wk = seeded_randn({d, d}, seed, p + "attn.wk", in_scale);
        b.bk = Tensor::zeros({d});
        b.wv = seeded_randn({d, d}, seed, p + "attn.wv", in_scale);
        b.bv = Tensor::zeros({d});
        b.wo = seeded_randn({d, d}, seed, p + "attn.wo", res_scale);
        b.bo = Tensor::zeros({d});
        b.ln2_gain = Tensor::full({d}, 1.0f);
        b.ln2_bias = Tensor::zeros({d});
        b.mlp_in = seeded_randn({d, hidden}, seed, p + "mlp.w_in", in_scale);
        b.mlp_in_bias = Tensor::zeros({hidden});
        b.mlp_out = seeded_randn({hidden, d}, seed, p + "mlp.w_out", mlp_out_scale);
        b.mlp_out_bias = Tensor::zeros({d});
        w.blocks_.push_back(std::move(b));
    }

    w.final_ln_gain_ = Tensor::full({d}, 1.0f);
    w.final_ln_bias_ = Tensor::zeros({d});
    w.text_projection_ = seeded_randn({d, e}, seed, "text_projection", in_scale);
    return w;
}

void EncoderWeights::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    fn("token_embedding", token_embedding_);
    fn("positional_embedding", positional_embedding_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        const EncoderBlock& b = blocks_[i];
        fn(p + "ln1.gain", b.ln1_gain);
        fn(p + "ln1.bias", b.ln1_bias);
        fn(p + "attn.wq", b.wq);
        fn(p + "attn.bq", b.bq);
        fn(p + "attn.wk", b.wk);
        fn(p + "attn.bk", b.bk);
        fn(p + "attn.wv", b.wv);
        fn(p + "attn.bv", b.bv);
        fn(p + "attn.wo", b.wo);
        fn(p + "attn.bo", b.bo);
        fn(p + "ln2.gain", b.ln2_gain);
        fn(p + "ln2.bias", b.ln2_bias);
        fn(p + "mlp.w_in", b.mlp_in);
        fn(p + "mlp.b_in", b.mlp_in_bias);
        fn(p + "mlp.w_out", b.mlp_out);
        fn(p + "mlp.b_out", b.mlp_out_bias);
    }
    fn("final_ln.gain", final_ln_gain_);
    fn("final_ln.bias", final_ln_bias_);
    fn("text_projection", text_projection_);
}

std::uint64_t EncoderWeights::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for_each_tensor([&](const std::string& name, const Tensor& t) {
        h ^= fnv1a64(name);
        h *= 0x100000001b3ull;
        h ^= fnv1a64(t.data().data(), t.data().size() * sizeof(float));
        h *= 0x100000001b3ull;
    });
    return h;
}

void EncoderWeights::save(const std::string& path) const {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for_each_tensor([&](const std::string& name, const Tensor& t) {
        tensors.emplace_back(name, t);
    });
    nlohmann::json meta;
    meta["kind"] = "encoder";
    meta["config"] = config_.to_json();
    save_tensor_file(path, meta, tensors);
}

EncoderWeights EncoderWeights::load(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    if (!tf.meta.contains("kind") || tf.meta["kind"] != "encoder")
        throw DataError("not an encoder weight file: " + path);
    EncoderConfig config = EncoderConfig::from_json(tf.meta.at("config"));
    config.validate();

    EncoderWeights w;
    w.config_ = config;
    const std::size_t d = config.d_model;
    auto grab = [&](const std::string& name, Shape expect) {
        const Tensor& t = tf.find(name);
        if (t.shape() != expect)
            throw DataError("tensor '" + name + "' has shape " + shape_str(t.shape()) +
                            ", expected " + shape_str(expect));
        return t;
    };
    w.token_embedding_ = grab("token_embedding", {config.vocab_size, d});
    w.positional_embedding_ = grab("positional_embedding", {config.seq_len, d});
    for (std::size_t i = 0; i < config.layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        EncoderBlock b;
        b.ln1_gain = grab(p + "ln1.gain", {d});
        b.ln1_bias = grab(p + "ln1.bias", {d});
        b.wq = grab(p + "attn.wq", {d, d});
        b.bq = grab(p + "attn.bq", {d});
        b.wk = grab(p + "attn.wk", {d, d});
        b.bk = grab(p + "attn.bk", {d});
        b.wv = grab(p + "attn.wv", {d, d});
        b.bv = grab(p + "attn.bv", {d});
        b.wo = grab(p + "attn.wo", {d, d});
        b.bo = grab(p + "attn.bo", {d});
        b.ln2_gain = grab(p + "ln2.gain", {d});
        b.ln2_bias = grab(p + "ln2.bias", {d});
        b.mlp_in = grab(p + "mlp.w_in", {d, 4 * d});
        b.mlp_in_bias = grab(p + "mlp.b_in", {4 * d});
        b.mlp_out = grab(p + "mlp.w_out", {4 * d, d});
        b.mlp_out_bias = grab(p + "mlp.b_out", {d});
        w.blocks_.push_back(std::move(b));
    }
    w.final_ln_gain_ = grab("final_ln.gain", {d});
    w.final_ln_bias_ = grab("final_ln.bias", {d});
    w.text_projection_ = grab("text_projection", {d, config.embed_dim});
    return w;
}

TextFeature encode_sequence(const Tensor& embeds, std::size_t eos_index,
                            const EncoderWeights& weights, std::string source) {
    const EncoderConfig& cfg = weights.config();
    if (embeds.rank() != 2 || embeds.shape()[0] != cfg.seq_len ||
        embeds.shape()[1] != cfg.d_model)
        throw ShapeError("encode_sequence: embeddings must be " +
                         std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.d_model) +
                         ", got " + shape_str(embeds.shape()));
    if (eos_index >= cfg.seq_len)
        throw ContractError("encode_sequence: eos_index " + std::to_string(eos_index) +
                            " out of range [0, " + std::to_string(cfg.seq_len) + ")");

    Tensor x = add(embeds, weights.positional_embedding());
    for (const EncoderBlock& b : weights.blocks()) {
        Tensor h = layernorm(x, b.ln1_gain, b.ln1_bias);
        Tensor q = add_rowvec(matmul(h, b.wq), b.bq);
        Tensor k = add_rowvec(matmul(h, b.wk), b.bk);
        Tensor v = add_rowvec(matmul(h, b.wv), b.bv);
        Tensor att = attention(q, k, v, cfg.heads, /*causal=*/true);
        x = add(x, add_rowvec(matmul(att, b.wo), b.bo));

        Tensor h2 = layernorm(x, b.ln2_gain, b.ln2_bias);
        Tensor m = gelu(add_rowvec(matmul(h2, b.mlp_in), b.mlp_in_bias));
        x = add(x, add_rowvec(matmul(m, b.mlp_out), b.mlp_out_bias));
    }
    Tensor normed = layernorm(x, weights.final_ln_gain(), weights.final_ln_bias());
    Tensor feature = vecmat(take_row(normed, eos_index), weights.text_projection());
    return TextFeature{feature, std::move(source)};
}

TextFeature encode_text(const std::string& text, const Vocabulary& vocab,
                        const EncoderWeights& weights) {
    if (vocab.size() != weights.config().vocab_size)
        throw ConfigError("vocabulary size " + std::to_string(vocab.size()) +
                          " does not match encoder vocab_size " +
                          std::to_string(weights.config().vocab_size));
    const TokenSequence seq = encode(text, vocab, weights.config().seq_len);
    const Tensor embeds = embed_lookup(seq, weights.token_embedding());
    return encode_sequence(embeds, seq.eos_index, weights, text);
}

} // namespace ctxopt
