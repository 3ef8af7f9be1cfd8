#include "ctxopt/prompt.hpp"

#include <algorithm>

#include "ctxopt/tensor_file.hpp"

namespace ctxopt {

const char* to_string(Placement p) {
    return p == Placement::kEnd ? "end" : "mid";
}
const char* to_string(Sharing s) {
    return s == Sharing::kUnified ? "unified" : "csc";
}
const char* to_string(ContextInit i) {
    return i == ContextInit::kRandom ? "random" : "manual";
}

Placement placement_from_string(const std::string& s) {
    if (s == "end") return Placement::kEnd;
    if (s == "mid") return Placement::kMid;
    throw ConfigError("unknown placement '" + s + "' (expected end|mid)");
}

Sharing sharing_from_string(const std::string& s) {
    if (s == "unified") return Sharing::kUnified;
    if (s == "csc") return Sharing::kClassSpecific;
    throw ConfigError("unknown sharing '" + s + "' (expected unified|csc)");
}

ContextInit context_init_from_string(const std::string& s) {
    if (s == "random") return ContextInit::kRandom;
    if (s == "manual") return ContextInit::kManual;
    throw ConfigError("unknown context init '" + s + "' (expected random|manual)");
}

void PromptConfig::validate() const {
    if (context_len == 0) throw ConfigError("context length must be >= 1");
    if (init == ContextInit::kManual && init_text.empty())
        throw ConfigError("manual context init requires init text");
    if (init_sigma <= 0.0f) throw ConfigError("context init sigma must be positive");
}

nlohmann::json PromptConfig::to_json() const {
    return {{"context_len", context_len}, {"placement", to_string(placement)},
            {"sharing", to_string(sharing)}, {"init", to_string(init)},
            {"init_sigma", init_sigma},     {"init_text", init_text}};
}

PromptConfig PromptConfig::from_json(const nlohmann::json& j) {
    PromptConfig c;
    try {
        c.context_len = j.at("context_len").get<std::size_t>();
        c.placement = placement_from_string(j.at("placement").get<std::string>());
        c.sharing = sharing_from_string(j.at("sharing").get<std::string>());
        c.init = context_init_from_string(j.at("init").get<std::string>());
        if (j.contains("init_sigma")) c.init_sigma = j.at("init_sigma").get<float>();
        if (j.contains("init_text")) c.init_text = j.at("init_text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed prompt config: ") + e.what());
    }
    c.validate();
    return c;
}

ClassNameTable ClassNameTable::from(const std::vector<std::string>& names,
                                    const Vocabulary& vocab) {
    if (names.size() < 2) throw ConfigError("need at least 2 class names");
    ClassNameTable t;
    t.names = names;
    for (const std::string& name : names) {
        std::vector<int> ids = vocab.subword_ids(name);
        if (ids.empty())
            throw ConfigError("class name '" + name + "' tokenizes to zero subwords");
        t.subwords.push_back(std::move(ids));
    }
    return t;
}

std::size_t ClassNameTable::max_subwords() const {
    std::size_t m = 0;
    for (const auto& ids : subwords) m = std::max(m, ids.size());
    return m;
}

ContextBank ContextBank::init(const PromptConfig& config, const Vocabulary& vocab,
                              const Tensor& word_embeddings, std::size_t num_classes,
                              std::uint64_t seed) {
    config.validate();
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (word_embeddings.rank() != 2) throw ShapeError("word embeddings must be [V x d]");
    const std::size_t m = config.context_len;
    const std::size_t d = word_embeddings.cols();

    std::vector<float> init_rows; // one [M x d] block
    if (config.init == ContextInit::kManual) {
        const std::vector<int> ids = vocab.subword_ids(config.init_text);
        if (ids.size() != m)
            throw ConfigError("manual init text '" + config.init_text + "' tokenizes to " +
                              std::to_string(ids.size()) + " subwords, expected " +
                              std::to_string(m));
        init_rows.reserve(m * d);
        for (int id : ids) {
            const float* row = &word_embeddings.data()[static_cast<std::size_t>(id) * d];
            init_rows.insert(init_rows.end(), row, row + d);
        }
    }

    ContextBank bank;
    bank.config_ = config;
    bank.num_classes_ = num_classes;
    if (config.sharing == Sharing::kUnified) {
        if (config.init == ContextInit::kManual) {
            bank.vectors_ = Tensor::from_data({m, d}, std::move(init_rows), true);
        } else {
            Rng rng(seed);
            bank.vectors_ = Tensor::randn({m, d}, rng, config.init_sigma, true);
        }
    } else {
        if (config.init == ContextInit::kManual) {
            std::vector<float> all;
            all.reserve(num_classes * m * d);
            for (std::size_t k = 0; k < num_classes; ++k)
                all.insert(all.end(), init_rows.begin(), init_rows.end());
            bank.vectors_ = Tensor::from_data({num_classes, m, d}, std::move(all), true);
        } else {
            Rng rng(seed);
            bank.vectors_ = Tensor::randn({num_classes, m, d}, rng, config.init_sigma, true);
        }
    }
    return bank;
}

Tensor ContextBank::context_for_class(std::size_t class_index) const {
    if (class_index >= num_classes_)
        throw ContractError("class index " + std::to_string(class_index) + " out of range [0, " +
                            std::to_string(num_classes_) + ")");
    if (config_.sharing == Sharing::kUnified) return vectors_;
    const std::size_t m = config_.context_len;
    return slice_rows(vectors_, class_index * m, (class_index + 1) * m);
}

void ContextBank::save(const std::string& path) const {
    nlohmann::json meta;
    meta["kind"] = "context";
    meta["prompt"] = config_.to_json();
    meta["classes"] = num_classes_;
    save_tensor_file(path, meta, {{"context", vectors_}});
}

ContextBank ContextBank::load(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    if (!tf.meta.contains("kind") || tf.meta["kind"] != "context")
        throw DataError("not a context checkpoint: " + path);
    ContextBank bank;
    bank.config_ = PromptConfig::from_json(tf.meta.at("prompt"));
    bank.num_classes_ = tf.meta.at("classes").get<std::size_t>();
    bank.vectors_ = tf.find("context");
    bank.vectors_.set_requires_grad(true);

    const std::size_t m = bank.config_.context_len;
    const Shape& s = bank.vectors_.shape();
    const bool unified_ok = bank.config_.sharing == Sharing::kUnified && s.size() == 2 &&
                            s[0] == m;
    const bool csc_ok = bank.config_.sharing == Sharing::kClassSpecific && s.size() == 3 &&
                        s[0] == bank.num_classes_ && s[1] == m;
    if (!unified_ok && !csc_ok)
        throw DataError("context tensor shape " + shape_str(s) +
                        " does not match its prompt config");
    return bank;
}

AssembledPrompt assemble(const ContextBank& bank, std::size_t class_index,
                         const ClassNameTable& names, const Tensor& word_embeddings,
                         const Vocabulary& vocab, std::size_t seq_len) {
    if (class_index >= names.size())
        throw ContractError("assemble: class index out of range");
    const std::size_t m = bank.config().context_len;
    const std::vector<int>& cls_ids = names.subwords[class_index];
    const std::size_t used = 1 + m + cls_ids.size() + 1; // SOS + ctx + class + EOS
    if (used > seq_len)
        throw ConfigError("assembled prompt needs " + std::to_string(used) +
                          " positions but the sequence cap is " + std::to_string(seq_len));

    Tensor ctx = bank.context_for_class(class_index);
    Tensor sos = gather_rows(word_embeddings, {vocab.sos_id()});
    Tensor cls = gather_rows(word_embeddings, cls_ids);
    Tensor eos = gather_rows(word_embeddings, {vocab.eos_id()});

    std::vector<Tensor> parts;
    if (bank.config().placement == Placement::kEnd) {
        parts = {sos, ctx, cls, eos};
    } else {
        const std::size_t lead = (m + 1) / 2; // ceil(M/2) before the class
        parts = {sos, slice_rows(ctx, 0, lead), cls, slice_rows(ctx, lead, m), eos};
    }
    if (used < seq_len) {
        std::vector<int> pad_ids(seq_len - used, vocab.pad_id());
        parts.push_back(gather_rows(word_embeddings, pad_ids));
    }

    AssembledPrompt out;
    out.embeddings = concat_rows(parts);
    out.eos_index = used - 1;
    return out;
}

std::vector<TextFeature> class_weights(const ContextBank& bank, const ClassNameTable& names,
                                       const Vocabulary& vocab, const EncoderWeights& encoder) {
    if (names.size() != bank.num_classes())
        throw ContractError("class table size " + std::to_string(names.size()) +
                            " does not match bank classes " +
                            std::to_string(bank.num_classes()));
    std::vector<TextFeature> features;
    features.reserve(names.size());
    for (std::size_t i = 0; i < names.size(); ++i) {
        AssembledPrompt prompt = assemble(bank, i, names, encoder.token_embedding(), vocab,
                                          encoder.config().seq_len);
        features.push_back(
            encode_sequence(prompt.embeddings, prompt.eos_index, encoder, names.names[i]));
    }
    return features;
}

} // namespace ctxopt
