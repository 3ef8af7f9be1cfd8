// Byte-level BPE tokenizer. The vocabulary holds 256 byte tokens, three
// specials (SOS/EOS/PAD) and greedily learned pair merges. Text is
// lower-cased and whitespace-split; alphanumeric runs go through the merge
// rules, every other byte stays a bare byte token.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctxopt/error.hpp"
#include "ctxopt/tensor.hpp"

namespace ctxopt {

// SOS + subwords + EOS, padded to a fixed length.
struct TokenSequence {
    std::vector<int> ids;
    std::size_t eos_index = 0;
};

class Vocabulary {
public:
    static constexpr std::size_t kNumByteTokens = 256;
    static constexpr std::size_t kNumSpecials = 3;

    struct Merge {
        int left = 0;
        int right = 0;
        int result = 0;
    };

    // Greedy most-frequent-pair merges over the corpus until target_size
    // tokens exist or no pair remains. Deterministic: ties break toward the
    // lexicographically smaller (left, right) id pair.
    static Vocabulary build(const std::vector<std::string>& corpus, std::size_t target_size);

    static Vocabulary from_json(const nlohmann::json& j);
    static Vocabulary load_json(const std::string& path);
    nlohmann::json to_json() const;
    void save_json(const std::string& path) const;

    std::size_t size() const { return tokens_.size(); }
    int sos_id() const { return sos_; }
    int eos_id() const { return eos_; }
    int pad_id() const { return pad_; }
    bool is_special(int id) const { return id == sos_ || id == eos_ || id == pad_; }
    const std::string& token(int id) const;
    std::optional<int> find(const std::string& token) const;
    const std::vector<Merge>& merges() const { return merges_; }

    // Merge-rule application over one pre-token (raw bytes, already lower-cased).
    std::vector<int> word_ids(const std::string& word) const;

    // Subword ids for arbitrary text, unframed (no SOS/EOS/PAD).
    std::vector<int> subword_ids(const std::string& text) const;

    // Human-readable token form: printable ASCII verbatim, other bytes \xNN.
    std::string printable_token(int id) const;

private:
    Vocabulary() = default;
    void rebuild_index();

    std::vector<std::string> tokens_;
    std::vector<Merge> merges_;
    std::map<std::string, int> token_index_;
    std::map<std::pair<int, int>, std::pair<int, int>> merge_rank_; // (l,r) -> (rank, result)
    int sos_ = 0, eos_ = 0, pad_ = 0;
};

// Default sequence cap when none is configured.
inline constexpr std::size_t kDefaultSequenceCap = 77;

// Lower-cases, splits, applies merges, frames with SOS/EOS and pads to cap.
// Overflow subwords are dropped silently (a process-wide counter records it).
TokenSequence encode(const std::string& text, const Vocabulary& vocab,
                     std::size_t cap = kDefaultSequenceCap);

std::uint64_t encode_truncation_count();
void reset_encode_truncation_count();

// Row gather of the sequence ids from a [V x d] embedding table.
Tensor embed_lookup(const TokenSequence& seq, const Tensor& word_embeddings);

// Lower-case + whitespace normalization + alnum/punctuation splitting, shared
// by vocabulary building and encoding. Exposed for tests.
std::vector<std::string> pretokenize(const std::string& text);

} // namespace ctxopt
