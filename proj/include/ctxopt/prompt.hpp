// Learnable context vectors and prompt assembly. The context bank is the
// only trainable tensor in a context-optimization run; prompts are built as
// embedding sequences [SOS, context/class rows, EOS, PAD...] and fed straight
// to the encoder, so gradients flow from the loss back into the bank rows.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxopt/tensor.hpp"
#include "ctxopt/text_encoder.hpp"
#include "ctxopt/tokenizer.hpp"

namespace ctxopt {

enum class Placement { kEnd, kMid };
enum class Sharing { kUnified, kClassSpecific };
enum class ContextInit { kRandom, kManual };

const char* to_string(Placement p);
const char* to_string(Sharing s);
const char* to_string(ContextInit i);
Placement placement_from_string(const std::string& s);
Sharing sharing_from_string(const std::string& s);
ContextInit context_init_from_string(const std::string& s);

struct PromptConfig {
    std::size_t context_len = 16; // number of context tokens
    Placement placement = Placement::kEnd;
    Sharing sharing = Sharing::kUnified;
    ContextInit init = ContextInit::kRandom;
    float init_sigma = 0.02f;
    std::string init_text = "a photo of a"; // used by manual init

    void validate() const;
    nlohmann::json to_json() const;
    static PromptConfig from_json(const nlohmann::json& j);
};

// Class-name strings with their precomputed subword ids.
struct ClassNameTable {
    std::vector<std::string> names;
    std::vector<std::vector<int>> subwords;

    static ClassNameTable from(const std::vector<std::string>& names, const Vocabulary& vocab);
    std::size_t size() const { return names.size(); }
    std::size_t max_subwords() const;
};

class ContextBank {
public:
    // RANDOM: seeded N(0, sigma^2). MANUAL: init_text must tokenize to exactly
    // context_len subwords; their embedding rows are copied (replicated per
    // class when class-specific).
    static ContextBank init(const PromptConfig& config, const Vocabulary& vocab,
                            const Tensor& word_embeddings, std::size_t num_classes,
                            std::uint64_t seed);

    const PromptConfig& config() const { return config_; }
    std::size_t num_classes() const { return num_classes_; }
    std::size_t context_dim() const { return vectors_.cols(); }
    std::size_t param_count() const { return vectors_.numel(); }

    // The trainable tensor: [M x d] unified, [K x M x d] class-specific.
    Tensor& vectors() { return vectors_; }
    const Tensor& vectors() const { return vectors_; }

    // Context rows for one class; shares storage (unified) or routes
    // gradients into the class block (class-specific).
    Tensor context_for_class(std::size_t class_index) const;

    void save(const std::string& path) const;
    static ContextBank load(const std::string& path);

private:
    ContextBank() = default;
    PromptConfig config_;
    std::size_t num_classes_ = 0;
    Tensor vectors_;
};

struct AssembledPrompt {
    Tensor embeddings; // [L x d]
    std::size_t eos_index = 0;
};

// Builds the prompt embedding sequence for one class. END placement puts the
// class subwords after the context; MID splits the context ceil(M/2) before /
// floor(M/2) after the class. eos_index is placement-invariant.
AssembledPrompt assemble(const ContextBank& bank, std::size_t class_index,
                         const ClassNameTable& names, const Tensor& word_embeddings,
                         const Vocabulary& vocab, std::size_t seq_len);

// One encoder pass per class; each returned feature is differentiable w.r.t.
// the bank.
std::vector<TextFeature> class_weights(const ContextBank& bank, const ClassNameTable& names,
                                       const Vocabulary& vocab, const EncoderWeights& encoder);

} // namespace ctxopt
