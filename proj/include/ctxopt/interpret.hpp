// Nearest-vocabulary-word readout of learned context vectors: exhaustive
// Euclidean scan over the embedding table, specials excluded, ties broken by
// token id. Indirect and advisory by nature — the vectors live in a
// continuous space the vocabulary only samples.
#pragma once

#include <string>
#include <vector>

#include "ctxopt/prompt.hpp"
#include "ctxopt/tokenizer.hpp"

namespace ctxopt {

struct SlotNeighbor {
    int token_id = 0;
    double distance = 0.0; // full precision; rendered to 4 decimals
};

struct NearestWordReport {
    bool class_specific = false;
    // per_class[c][m] = ranked neighbors for context slot m; a single
    // pseudo-class row when the context is unified.
    std::vector<std::vector<std::vector<SlotNeighbor>>> per_class;
    std::vector<std::string> class_names; // empty for unified

    nlohmann::json to_json(const Vocabulary& vocab) const;
    std::string render_text(const Vocabulary& vocab) const;
};

// top_n is clamped to the number of non-special tokens; top_n = vocabulary
// size therefore returns every candidate exactly once.
NearestWordReport nearest_words(const ContextBank& bank, const Tensor& word_embeddings,
                                const Vocabulary& vocab, std::size_t top_n,
                                const std::vector<std::string>& class_names = {});

} // namespace ctxopt
