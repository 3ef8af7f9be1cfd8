#include "ctxopt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

#include "ctxopt/error.hpp"
#include "ctxopt/rng.hpp"

namespace ctxopt {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'D', 'A', 'T', 'A', '0'};

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

std::string f32_block_le(const std::vector<float>& v) {
    std::string out;
    out.reserve(v.size() * 4);
    for (float f : v) {
        const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    return out;
}

std::string i32_block_le(const std::vector<int>& v) {
    std::string out;
    out.reserve(v.size() * 4);
    for (int x : v) {
        const std::uint32_t bits = static_cast<std::uint32_t>(x);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    return out;
}

} // namespace

ImageFeature FeatureDataset::feature(std::size_t index) const {
    if (index >= size()) throw ContractError("feature index out of range");
    std::vector<float> row(features.begin() + index * dim, features.begin() + (index + 1) * dim);
    return ImageFeature{Tensor::from_data({dim}, std::move(row)), labels[index]};
}

void FeatureDataset::validate() const {
    const std::size_t n = labels.size();
    if (dim == 0) throw DataError("dataset has zero feature width");
    if (features.size() != n * dim)
        throw DataError("feature block holds " + std::to_string(features.size()) +
                        " values, expected " + std::to_string(n * dim));
    if (class_names.size() < 2) throw DataError("dataset declares fewer than 2 classes");
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_names.size())
            throw DataError("label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " exceeds the " +
                            std::to_string(class_names.size()) + " declared class names");
    for (float f : features)
        if (!std::isfinite(f)) throw DataError("dataset contains non-finite feature values");

    std::set<std::size_t> seen;
    auto check_split = [&](const std::vector<std::size_t>& split, const char* name) {
        for (std::size_t idx : split) {
            if (idx >= n)
                throw DataError(std::string(name) + " split index " + std::to_string(idx) +
                                " out of range");
            if (!seen.insert(idx).second)
                throw DataError("splits overlap at index " + std::to_string(idx));
        }
    };
    check_split(train_indices, "train");
    check_split(val_indices, "val");
    check_split(test_indices, "test");
    if (test_indices.empty()) throw DataError("test split is empty");
}

FewShotSplit sample_shots(const FeatureDataset& ds, int shots, std::uint64_t seed,
                          bool allow_any_shots) {
    static const std::set<int> kProtocolShots = {1, 2, 4, 8, 16};
    if (shots <= 0) throw ConfigError("shots must be positive");
    if (!allow_any_shots && !kProtocolShots.count(shots))
        throw ConfigError("shots=" + std::to_string(shots) +
                          " is outside the protocol set {1,2,4,8,16}; pass allow-any-shots to "
                          "override");

    std::vector<std::vector<std::size_t>> per_class(ds.num_classes());
    for (std::size_t idx : ds.train_indices)
        per_class[static_cast<std::size_t>(ds.labels[idx])].push_back(idx);

    FewShotSplit split;
    split.shots = shots;
    split.seed = seed;
    Rng rng(seed);
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        auto& pool = per_class[c];
        if (pool.size() < static_cast<std::size_t>(shots))
            throw DataError("class '" + ds.class_names[c] + "' has only " +
                            std::to_string(pool.size()) + " training examples, need " +
                            std::to_string(shots));
        std::sort(pool.begin(), pool.end());
        rng.shuffle(pool);
        split.indices.insert(split.indices.end(), pool.begin(),
                             pool.begin() + static_cast<std::size_t>(shots));
    }
    return split;
}

void save_dataset(const FeatureDataset& ds, const std::string& path) {
    ds.validate();
    nlohmann::json header;
    header["version"] = 1;
    header["count"] = ds.size();
    header["dim"] = ds.dim;
    header["class_names"] = ds.class_names;
    header["template"] = ds.template_text;
    header["splits"] = {{"train", ds.train_indices},
                        {"val", ds.val_indices},
                        {"test", ds.test_indices}};
    const std::string header_str = header.dump();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u64_le(out, header_str.size());
    out += header_str;
    out += f32_block_le(ds.features);
    out += i32_block_le(ds.labels);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write failed: " + path);
}

FeatureDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open dataset: " + path);
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
        throw DataError("not a dataset file (bad magic): " + path);

    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
    const std::uint64_t header_len = get_u64_le(bytes + 8);
    if (16 + header_len > raw.size()) throw DataError("truncated dataset header: " + path);

    FeatureDataset ds;
    std::size_t count = 0;
    try {
        nlohmann::json header = nlohmann::json::parse(raw.substr(16, header_len));
        if (header.at("version").get<int>() != 1)
            throw DataError("unsupported dataset version in: " + path);
        count = header.at("count").get<std::size_t>();
        ds.dim = header.at("dim").get<std::size_t>();
        ds.class_names = header.at("class_names").get<std::vector<std::string>>();
        ds.template_text = header.at("template").get<std::string>();
        ds.train_indices = header.at("splits").at("train").get<std::vector<std::size_t>>();
        ds.val_indices = header.at("splits").at("val").get<std::vector<std::size_t>>();
        ds.test_indices = header.at("splits").at("test").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed dataset header: ") + e.what());
    }

    const std::size_t payload_start = 16 + static_cast<std::size_t>(header_len);
    const std::size_t feat_bytes = count * ds.dim * 4;
    const std::size_t label_bytes = count * 4;
    if (payload_start + feat_bytes + label_bytes != raw.size())
        throw DataError("dataset payload size mismatch (truncated or padded): " + path);

    ds.features.resize(count * ds.dim);
    for (std::size_t i = 0; i < ds.features.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(bytes[payload_start + i * 4 + b]) << (8 * b);
        ds.features[i] = std::bit_cast<float>(bits);
    }
    ds.labels.resize(count);
    const std::size_t label_start = payload_start + feat_bytes;
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(bytes[label_start + i * 4 + b]) << (8 * b);
        ds.labels[i] = static_cast<int>(bits);
    }

    ds.validate();
    ds.feature_checksum = fnv1a64(raw.data() + payload_start, feat_bytes);
    return ds;
}

const std::vector<std::string>& synthetic_name_pool() {
    static const std::vector<std::string> kPool = {
        "dog",   "cat",   "car",   "tree",  "fish",  "bird",  "boat",  "horse",
        "apple", "chair", "cloud", "river", "stone", "wolf",  "plane", "train",
        "house", "mouse", "tiger", "piano", "robot", "table", "whale", "zebra"};
    return kPool;
}

std::vector<std::string> builtin_corpus() {
    std::vector<std::string> corpus;
    for (const std::string& name : synthetic_name_pool()) {
        corpus.push_back("a photo of a " + name + ".");
        corpus.push_back("a bad photo of the " + name + ".");
        corpus.push_back("a photo of the small " + name + ".");
        corpus.push_back("a photo of the large " + name + ".");
        corpus.push_back("a photo of a " + name + ", a type of pet.");
        corpus.push_back("a photo of a person doing " + name + ".");
        corpus.push_back("a centered photo of " + name + " texture.");
        corpus.push_back("a photo of " + name + ", a type of food.");
    }
    return corpus;
}

FeatureDataset make_synthetic(std::size_t classes, std::size_t dim, std::size_t per_class,
                              float margin, float noise_sigma, std::uint64_t seed) {
    if (classes < 2) throw ConfigError("need at least 2 classes");
    if (dim == 0) throw ConfigError("feature dim must be positive");
    if (!(margin > 0.0f)) throw ConfigError("margin must be positive");
    if (noise_sigma < 0.0f) throw ConfigError("noise sigma must be non-negative");
    if (per_class < 4) throw ConfigError("need at least 4 samples per class");
    if (classes > synthetic_name_pool().size())
        throw ConfigError("class count " + std::to_string(classes) +
                          " exceeds the name pool of " +
                          std::to_string(synthetic_name_pool().size()));

    Rng rng(seed);
    const float max_cos = 1.0f - margin;

    auto random_unit = [&] {
        std::vector<float> v(dim);
        double ss = 0.0;
        for (float& x : v) {
            x = static_cast<float>(rng.normal());
            ss += double(x) * double(x);
        }
        const double norm = std::sqrt(ss);
        for (float& x : v) x = static_cast<float>(double(x) / norm);
        return v;
    };

    // rejection-sample separated class directions
    std::vector<std::vector<float>> dirs;
    std::size_t attempts = 0;
    const std::size_t max_attempts = 500 * classes;
    while (dirs.size() < classes) {
        if (++attempts > max_attempts)
            throw ConfigError("could not place " + std::to_string(classes) +
                              " class directions with margin " + std::to_string(margin) +
                              " in dimension " + std::to_string(dim));
        std::vector<float> cand = random_unit();
        bool ok = true;
        for (const auto& d : dirs) {
            double cos = 0.0;
            for (std::size_t j = 0; j < dim; ++j) cos += double(d[j]) * double(cand[j]);
            if (cos > max_cos) {
                ok = false;
                break;
            }
        }
        if (ok) dirs.push_back(std::move(cand));
    }

    FeatureDataset ds;
    ds.dim = dim;
    ds.class_names.assign(synthetic_name_pool().begin(),
                          synthetic_name_pool().begin() + static_cast<long>(classes));

    const std::size_t train_n = per_class / 2;
    const std::size_t val_n = per_class / 4;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t s = 0; s < per_class; ++s) {
            std::vector<float> x(dim);
            if (noise_sigma == 0.0f) {
                x = dirs[c];
            } else {
                double ss = 0.0;
                for (std::size_t j = 0; j < dim; ++j) {
                    x[j] = dirs[c][j] + static_cast<float>(rng.normal(0.0, noise_sigma));
                    ss += double(x[j]) * double(x[j]);
                }
                const double norm = std::sqrt(ss);
                for (float& v : x) v = static_cast<float>(double(v) / norm);
            }
            const std::size_t idx = ds.labels.size();
            ds.features.insert(ds.features.end(), x.begin(), x.end());
            ds.labels.push_back(static_cast<int>(c));
            if (s < train_n) ds.train_indices.push_back(idx);
            else if (s < train_n + val_n) ds.val_indices.push_back(idx);
            else ds.test_indices.push_back(idx);
        }
    }

    ds.validate();
    const std::string block = f32_block_le(ds.features);
    ds.feature_checksum = fnv1a64(block.data(), block.size());
    return ds;
}

} // namespace ctxopt
