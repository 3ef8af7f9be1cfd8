#include "ctxopt/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ctxopt {

namespace {

std::vector<SlotNeighbor> rank_slot(const float* slot, const Tensor& table,
                                    const Vocabulary& vocab, std::size_t top_n) {
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    std::vector<SlotNeighbor> all;
    all.reserve(v);
    for (std::size_t id = 0; id < v; ++id) {
        if (vocab.is_special(static_cast<int>(id))) continue;
        double ss = 0.0;
        const float* row = &table.data()[id * d];
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = double(slot[j]) - double(row[j]);
            ss += diff * diff;
        }
        all.push_back({static_cast<int>(id), std::sqrt(ss)});
    }
    std::sort(all.begin(), all.end(), [](const SlotNeighbor& a, const SlotNeighbor& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return a.token_id < b.token_id;
    });
    if (all.size() > top_n) all.resize(top_n);
    return all;
}

} // namespace

NearestWordReport nearest_words(const ContextBank& bank, const Tensor& word_embeddings,
                                const Vocabulary& vocab, std::size_t top_n,
                                const std::vector<std::string>& class_names) {
    if (word_embeddings.rank() != 2)
        throw ShapeError("nearest_words: embedding table must be [V x d]");
    if (word_embeddings.cols() != bank.context_dim())
        throw ShapeError("nearest_words: embedding width " +
                         std::to_string(word_embeddings.cols()) +
                         " does not match context width " +
                         std::to_string(bank.context_dim()));
    if (static_cast<std::size_t>(word_embeddings.shape()[0]) != vocab.size())
        throw ShapeError("nearest_words: table rows do not match the vocabulary");
    if (top_n == 0) throw ConfigError("nearest_words: top_n must be positive");

    const std::size_t m = bank.config().context_len;
    const std::size_t d = bank.context_dim();
    const bool csc = bank.config().sharing == Sharing::kClassSpecific;
    const std::size_t groups = csc ? bank.num_classes() : 1;

    NearestWordReport report;
    report.class_specific = csc;
    if (csc) report.class_names = class_names;
    for (std::size_t c = 0; c < groups; ++c) {
        std::vector<std::vector<SlotNeighbor>> slots;
        slots.reserve(m);
        for (std::size_t s = 0; s < m; ++s) {
            const float* slot = &bank.vectors().data()[(c * m + s) * d];
            slots.push_back(rank_slot(slot, word_embeddings, vocab, top_n));
        }
        report.per_class.push_back(std::move(slots));
    }
    return report;
}

nlohmann::json NearestWordReport::to_json(const Vocabulary& vocab) const {
    nlohmann::json j;
    j["sharing"] = class_specific ? "csc" : "unified";
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        nlohmann::json slots = nlohmann::json::array();
        for (const auto& slot : per_class[c]) {
            nlohmann::json ranked = nlohmann::json::array();
            for (const SlotNeighbor& n : slot)
                ranked.push_back({{"id", n.token_id},
                                  {"token", vocab.printable_token(n.token_id)},
                                  {"distance", n.distance}});
            slots.push_back(std::move(ranked));
        }
        nlohmann::json entry;
        entry["slots"] = std::move(slots);
        if (class_specific && c < class_names.size()) entry["class"] = class_names[c];
        classes.push_back(std::move(entry));
    }
    j["classes"] = std::move(classes);
    return j;
}

std::string NearestWordReport::render_text(const Vocabulary& vocab) const {
    std::ostringstream os;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        if (class_specific) {
            os << "class " << c;
            if (c < class_names.size()) os << " (" << class_names[c] << ")";
            os << ":\n";
        }
        for (std::size_t s = 0; s < per_class[c].size(); ++s) {
            os << (class_specific ? "  " : "") << "slot " << (s + 1) << ":";
            for (const SlotNeighbor& n : per_class[c][s]) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), " (%.4f)", n.distance);
                os << " " << vocab.printable_token(n.token_id) << buf;
            }
            os << "\n";
        }
    }
    return os.str();
}

} // namespace ctxopt
