#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctxopt/data.hpp"
#include "ctxopt/tokenizer.hpp"

using namespace ctxopt;

TEST_CASE("synthetic dataset basics") {
    FeatureDataset ds = make_synthetic(8, 32, 40, 0.3f, 0.15f, 1);
    CHECK(ds.size() == 8 * 40);
    CHECK(ds.num_classes() == 8);
    CHECK(ds.train_indices.size() == 8 * 20);
    CHECK(ds.val_indices.size() == 8 * 10);
    CHECK(ds.test_indices.size() == 8 * 10);
    CHECK(ds.template_text == "a photo of a [CLASS].");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < 32; ++j) norm += double(ds.features[i * 32 + j]) *
                                                     double(ds.features[i * 32 + j]);
        CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-5);
    }
}

TEST_CASE("synthetic generation is seeded") {
    FeatureDataset a = make_synthetic(4, 16, 12, 0.3f, 0.1f, 7);
    FeatureDataset b = make_synthetic(4, 16, 12, 0.3f, 0.1f, 7);
    CHECK(a.features == b.features);
    CHECK(a.labels == b.labels);
    CHECK(a.feature_checksum == b.feature_checksum);
    FeatureDataset c = make_synthetic(4, 16, 12, 0.3f, 0.1f, 8);
    CHECK(a.feature_checksum != c.feature_checksum);
}

TEST_CASE("noise-free synthetic features sit on their class direction") {
    FeatureDataset ds = make_synthetic(3, 8, 8, 0.3f, 0.0f, 5);
    // every sample of a class is identical, so a nearest-direction rule is exact
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<float> first;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (static_cast<std::size_t>(ds.labels[i]) != c) continue;
            std::vector<float> row(ds.features.begin() + i * 8, ds.features.begin() + (i + 1) * 8);
            if (first.empty()) first = row;
            CHECK(row == first);
        }
    }
}

TEST_CASE("class directions respect the margin") {
    const std::size_t k = 8, e = 32;
    FeatureDataset ds = make_synthetic(k, e, 8, 0.3f, 0.0f, 3);
    // exhaustive pairwise check over the (noise-free) class directions
    std::vector<std::vector<float>> dirs(k);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto c = static_cast<std::size_t>(ds.labels[i]);
        if (dirs[c].empty())
            dirs[c].assign(ds.features.begin() + i * e, ds.features.begin() + (i + 1) * e);
    }
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = a + 1; b < k; ++b) {
            double cos = 0.0;
            for (std::size_t j = 0; j < e; ++j) cos += double(dirs[a][j]) * double(dirs[b][j]);
            CHECK(cos < 0.7);
        }
}

TEST_CASE("infeasible margins are rejected") {
    CHECK_THROWS_AS(make_synthetic(20, 2, 8, 1.9f, 0.1f, 1), ConfigError);
    CHECK_THROWS_AS(make_synthetic(1, 8, 8, 0.3f, 0.1f, 1), ConfigError);
    CHECK_THROWS_AS(make_synthetic(4, 8, 8, -0.1f, 0.1f, 1), ConfigError);
    CHECK_THROWS_AS(make_synthetic(100, 32, 8, 0.3f, 0.1f, 1), ConfigError);
}

TEST_CASE("synthetic class names tokenize under the bundled vocabulary") {
    Vocabulary vocab = Vocabulary::build(builtin_corpus(), 512);
    FeatureDataset ds = make_synthetic(8, 16, 8, 0.3f, 0.1f, 2);
    for (const std::string& name : ds.class_names) {
        std::vector<int> ids = vocab.subword_ids(name);
        CHECK(ids.size() == 1); // pool words merge fully
    }
    // template phrase words do too
    CHECK(vocab.subword_ids("a photo of a").size() == 4);
}

TEST_CASE("sample_shots is balanced, seeded and protocol-checked") {
    FeatureDataset ds = make_synthetic(10, 16, 40, 0.2f, 0.1f, 4);
    FewShotSplit s16 = sample_shots(ds, 16, 11);
    CHECK(s16.indices.size() == 160);
    std::vector<int> per_class(10, 0);
    for (std::size_t idx : s16.indices) per_class[static_cast<std::size_t>(ds.labels[idx])]++;
    for (int c : per_class) CHECK(c == 16);
    // drawn from the train split without replacement
    std::set<std::size_t> train(ds.train_indices.begin(), ds.train_indices.end());
    std::set<std::size_t> unique(s16.indices.begin(), s16.indices.end());
    CHECK(unique.size() == s16.indices.size());
    for (std::size_t idx : s16.indices) CHECK(train.count(idx) == 1);

    FewShotSplit again = sample_shots(ds, 16, 11);
    CHECK(again.indices == s16.indices);
    FewShotSplit other = sample_shots(ds, 16, 12);
    CHECK(other.indices != s16.indices);

    CHECK_THROWS_AS(sample_shots(ds, 5, 1), ConfigError);
    CHECK_NOTHROW(sample_shots(ds, 5, 1, /*allow_any_shots=*/true));
}

TEST_CASE("sample_shots names the class that runs dry") {
    FeatureDataset ds = make_synthetic(4, 16, 8, 0.3f, 0.1f, 4); // 4 train per class
    try {
        sample_shots(ds, 8, 1);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(ds.class_names[0]) != std::string::npos);
    }
}

TEST_CASE("dataset file round trip is bit-exact") {
    FeatureDataset ds = make_synthetic(5, 8, 12, 0.3f, 0.2f, 9);
    const std::string path = "dataset_roundtrip_test.ctxd";
    save_dataset(ds, path);
    FeatureDataset loaded = load_dataset(path);
    CHECK(loaded.features == ds.features);
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.class_names == ds.class_names);
    CHECK(loaded.train_indices == ds.train_indices);
    CHECK(loaded.feature_checksum == ds.feature_checksum);

    const std::string path2 = "dataset_roundtrip_test2.ctxd";
    save_dataset(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("malformed dataset files are rejected whole") {
    FeatureDataset ds = make_synthetic(3, 8, 8, 0.3f, 0.2f, 9);
    const std::string path = "dataset_badfile_test.ctxd";
    save_dataset(ds, path);
    std::string raw;
    {
        std::ifstream f(path, std::ios::binary);
        raw.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    }

    SUBCASE("truncated payload") {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(raw.data(), static_cast<std::streamsize>(raw.size() - 10));
        f.close();
        CHECK_THROWS_AS(load_dataset(path), DataError);
    }
    SUBCASE("bad magic") {
        raw[0] = 'X';
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(raw.data(), static_cast<std::streamsize>(raw.size()));
        f.close();
        CHECK_THROWS_AS(load_dataset(path), DataError);
    }
    SUBCASE("label out of range") {
        // last 4 bytes are the last label; overwrite with 3 (only 3 classes: 0..2)
        raw[raw.size() - 4] = 3;
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(raw.data(), static_cast<std::streamsize>(raw.size()));
        f.close();
        CHECK_THROWS_AS(load_dataset(path), DataError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("validate catches inconsistent datasets") {
    FeatureDataset ds = make_synthetic(3, 8, 8, 0.3f, 0.2f, 9);
    SUBCASE("label beyond declared names") {
        ds.labels[0] = 3;
        CHECK_THROWS_AS(ds.validate(), DataError);
    }
    SUBCASE("overlapping splits") {
        ds.val_indices.push_back(ds.train_indices[0]);
        CHECK_THROWS_AS(ds.validate(), DataError);
    }
    SUBCASE("empty test split") {
        ds.test_indices.clear();
        CHECK_THROWS_AS(ds.validate(), DataError);
    }
    SUBCASE("non-finite features") {
        ds.features[5] = std::nanf("");
        CHECK_THROWS_AS(ds.validate(), DataError);
    }
}
