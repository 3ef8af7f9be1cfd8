#include "ctxopt/tokenizer.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <sstream>

namespace ctxopt {

namespace {

std::atomic<std::uint64_t> g_truncations{0};

const char* kSosToken = "<|startoftext|>";
const char* kEosToken = "<|endoftext|>";
const char* kPadToken = "<|pad|>";

bool is_space_byte(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_word_byte(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
}

std::string lowercase(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

// token string <-> JSON display form: each byte maps to codepoint U+00..U+FF
std::string bytes_to_display(const std::string& raw) {
    std::string out;
    for (unsigned char c : raw) {
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back(static_cast<char>(0xC0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        }
    }
    return out;
}

std::string display_to_bytes(const std::string& display) {
    std::string out;
    for (std::size_t i = 0; i < display.size();) {
        const unsigned char c = static_cast<unsigned char>(display[i]);
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
            i += 1;
        } else if ((c & 0xE0) == 0xC0 && i + 1 < display.size()) {
            const unsigned char c2 = static_cast<unsigned char>(display[i + 1]);
            const unsigned int cp = (static_cast<unsigned int>(c & 0x1F) << 6) | (c2 & 0x3F);
            if (cp > 0xFF) throw DataError("vocabulary token contains codepoint > 0xFF");
            out.push_back(static_cast<char>(cp));
            i += 2;
        } else {
            throw DataError("vocabulary token is not valid token encoding");
        }
    }
    return out;
}

} // namespace

std::vector<std::string> pretokenize(const std::string& text) {
    const std::string lower = lowercase(text);
    std::vector<std::string> pieces;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            pieces.push_back(word);
            word.clear();
        }
    };
    for (unsigned char c : lower) {
        if (is_space_byte(c)) {
            flush();
        } else if (is_word_byte(c)) {
            word.push_back(static_cast<char>(c));
        } else {
            flush();
            pieces.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return pieces;
}

// ---- Vocabulary ------------------------------------------------------------

void Vocabulary::rebuild_index() {
    token_index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
        token_index_.emplace(tokens_[i], static_cast<int>(i));
    merge_rank_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
        const Merge& m = merges_[r];
        merge_rank_.emplace(std::make_pair(m.left, m.right),
                            std::make_pair(static_cast<int>(r), m.result));
    }
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw ContractError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::find(const std::string& token) const {
    auto it = token_index_.find(token);
    if (it == token_index_.end()) return std::nullopt;
    return it->second;
}

std::string Vocabulary::printable_token(int id) const {
    if (id == sos_ || id == eos_ || id == pad_) return token(id);
    std::string out;
    for (unsigned char c : token(id)) {
        if (c >= 0x20 && c < 0x7F) {
            out.push_back(static_cast<char>(c));
        } else {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t target_size) {
    const std::size_t floor_size = kNumByteTokens + kNumSpecials;
    if (target_size < floor_size)
        throw ConfigError("vocabulary target size " + std::to_string(target_size) +
                          " below minimum " + std::to_string(floor_size));

    Vocabulary v;
    v.tokens_.reserve(target_size);
    for (std::size_t b = 0; b < kNumByteTokens; ++b)
        v.tokens_.push_back(std::string(1, static_cast<char>(b)));
    v.sos_ = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(kSosToken);
    v.eos_ = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(kEosToken);
    v.pad_ = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(kPadToken);

    // word frequencies over alphanumeric runs; punctuation stays byte tokens
    std::map<std::string, long long> word_freq;
    bool any_piece = false;
    for (const std::string& doc : corpus) {
        for (const std::string& piece : pretokenize(doc)) {
            any_piece = true;
            if (piece.size() >= 1 && is_word_byte(static_cast<unsigned char>(piece[0])))
                ++word_freq[piece];
        }
    }
    if (corpus.empty() || !any_piece)
        throw ConfigError("vocabulary corpus is empty");

    struct WordSymbols {
        std::vector<int> ids;
        long long freq;
    };
    std::vector<WordSymbols> words;
    words.reserve(word_freq.size());
    for (const auto& [w, f] : word_freq) {
        WordSymbols ws;
        ws.freq = f;
        for (unsigned char c : w) ws.ids.push_back(static_cast<int>(c));
        words.push_back(std::move(ws));
    }

    while (v.tokens_.size() < target_size) {
        std::map<std::pair<int, int>, long long> pair_freq;
        for (const WordSymbols& ws : words)
            for (std::size_t i = 0; i + 1 < ws.ids.size(); ++i)
                pair_freq[{ws.ids[i], ws.ids[i + 1]}] += ws.freq;
        if (pair_freq.empty()) break;

        std::pair<int, int> best = pair_freq.begin()->first;
        long long best_count = pair_freq.begin()->second;
        for (const auto& [p, c] : pair_freq) {
            if (c > best_count) { // map order already yields the smallest pair on ties
                best = p;
                best_count = c;
            }
        }

        const std::string merged = v.tokens_[static_cast<std::size_t>(best.first)] +
                                   v.tokens_[static_cast<std::size_t>(best.second)];
        int result_id;
        auto existing = std::find(v.tokens_.begin(), v.tokens_.end(), merged);
        if (existing != v.tokens_.end()) {
            result_id = static_cast<int>(existing - v.tokens_.begin());
        } else {
            result_id = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(merged);
        }
        v.merges_.push_back({best.first, best.second, result_id});

        for (WordSymbols& ws : words) {
            std::vector<int>& ids = ws.ids;
            std::vector<int> out;
            out.reserve(ids.size());
            for (std::size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == best.first && ids[i + 1] == best.second) {
                    out.push_back(result_id);
                    i += 2;
                } else {
                    out.push_back(ids[i]);
                    i += 1;
                }
            }
            ids = std::move(out);
        }
    }

    v.rebuild_index();
    return v;
}

std::vector<int> Vocabulary::word_ids(const std::string& word) const {
    std::vector<int> ids;
    ids.reserve(word.size());
    for (unsigned char c : word) ids.push_back(static_cast<int>(c));
    while (ids.size() > 1) {
        int best_rank = -1;
        std::pair<int, int> best_pair{0, 0};
        int best_result = 0;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            auto it = merge_rank_.find({ids[i], ids[i + 1]});
            if (it == merge_rank_.end()) continue;
            if (best_rank < 0 || it->second.first < best_rank) {
                best_rank = it->second.first;
                best_pair = it->first;
                best_result = it->second.second;
            }
        }
        if (best_rank < 0) break;
        std::vector<int> out;
        out.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size();) {
            if (i + 1 < ids.size() && ids[i] == best_pair.first && ids[i + 1] == best_pair.second) {
                out.push_back(best_result);
                i += 2;
            } else {
                out.push_back(ids[i]);
                i += 1;
            }
        }
        ids = std::move(out);
    }
    return ids;
}

std::vector<int> Vocabulary::subword_ids(const std::string& text) const {
    std::vector<int> ids;
    for (const std::string& piece : pretokenize(text)) {
        if (is_word_byte(static_cast<unsigned char>(piece[0]))) {
            const std::vector<int> w = word_ids(piece);
            ids.insert(ids.end(), w.begin(), w.end());
        } else {
            ids.push_back(static_cast<int>(static_cast<unsigned char>(piece[0])));
        }
    }
    return ids;
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["specials"] = {{"sos", sos_}, {"eos", eos_}, {"pad", pad_}};
    nlohmann::json toks = nlohmann::json::array();
    for (const std::string& t : tokens_) toks.push_back(bytes_to_display(t));
    j["tokens"] = std::move(toks);
    nlohmann::json ms = nlohmann::json::array();
    for (const Merge& m : merges_) ms.push_back({m.left, m.right, m.result});
    j["merges"] = std::move(ms);
    return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    Vocabulary v;
    try {
        if (j.at("version").get<int>() != 1) throw DataError("unsupported vocabulary version");
        v.sos_ = j.at("specials").at("sos").get<int>();
        v.eos_ = j.at("specials").at("eos").get<int>();
        v.pad_ = j.at("specials").at("pad").get<int>();
        for (const auto& t : j.at("tokens"))
            v.tokens_.push_back(display_to_bytes(t.get<std::string>()));
        for (const auto& m : j.at("merges")) {
            if (!m.is_array() || m.size() != 3) throw DataError("malformed merge entry");
            v.merges_.push_back({m[0].get<int>(), m[1].get<int>(), m[2].get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed vocabulary json: ") + e.what());
    }

    const int n = static_cast<int>(v.tokens_.size());
    if (v.sos_ == v.eos_ || v.eos_ == v.pad_ || v.sos_ == v.pad_)
        throw DataError("vocabulary specials must be distinct");
    for (int id : {v.sos_, v.eos_, v.pad_})
        if (id < 0 || id >= n) throw DataError("vocabulary special id out of range");
    for (const Merge& m : v.merges_) {
        if (m.left < 0 || m.left >= n || m.right < 0 || m.right >= n || m.result < 0 ||
            m.result >= n)
            throw DataError("merge rule references unknown token id");
        if (v.tokens_[static_cast<std::size_t>(m.result)] !=
            v.tokens_[static_cast<std::size_t>(m.left)] +
                v.tokens_[static_cast<std::size_t>(m.right)])
            throw DataError("merge rule result does not match its parts");
    }

    v.rebuild_index();
    if (v.token_index_.size() != v.tokens_.size())
        throw DataError("vocabulary tokens are not unique");
    return v;
}

Vocabulary Vocabulary::load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("cannot parse vocabulary file: ") + e.what());
    }
    return from_json(j);
}

void Vocabulary::save_json(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file: " + path);
    out << to_json().dump(2) << "\n";
}

// ---- encode ------------------------------------------------------------------

TokenSequence encode(const std::string& text, const Vocabulary& vocab, std::size_t cap) {
    if (cap < 3) throw ConfigError("sequence cap must be at least 3 (SOS + token + EOS)");
    std::vector<int> ids = vocab.subword_ids(text);
    if (ids.empty()) throw DataError("encode: text is empty after normalization");

    if (ids.size() > cap - 2) {
        ids.resize(cap - 2);
        g_truncations.fetch_add(1, std::memory_order_relaxed);
    }

    TokenSequence seq;
    seq.ids.reserve(cap);
    seq.ids.push_back(vocab.sos_id());
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
    seq.eos_index = seq.ids.size();
    seq.ids.push_back(vocab.eos_id());
    seq.ids.resize(cap, vocab.pad_id());
    return seq;
}

std::uint64_t encode_truncation_count() {
    return g_truncations.load(std::memory_order_relaxed);
}

void reset_encode_truncation_count() {
    g_truncations.store(0, std::memory_order_relaxed);
}

Tensor embed_lookup(const TokenSequence& seq, const Tensor& word_embeddings) {
    return gather_rows(word_embeddings, seq.ids);
}

} // namespace ctxopt
