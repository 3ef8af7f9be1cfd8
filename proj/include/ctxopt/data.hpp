// Labeled feature datasets: ingestion of precomputed image features, seeded
// class-balanced few-shot subsampling, and a synthetic cluster generator for
// desk-scale verification runs.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxopt/classifier.hpp"
#include "ctxopt/tensor.hpp"

namespace ctxopt {

struct FeatureDataset {
    std::size_t dim = 0;        // feature width
    std::vector<float> features; // row-major [N x dim]
    std::vector<int> labels;     // N entries, each < class_names.size()
    std::vector<std::string> class_names;
    std::vector<std::size_t> train_indices, val_indices, test_indices;
    std::string template_text = "a photo of a [CLASS].";
    std::uint64_t feature_checksum = 0; // fnv1a64 over the serialized feature block

    std::size_t size() const { return labels.size(); }
    std::size_t num_classes() const { return class_names.size(); }
    ImageFeature feature(std::size_t index) const;
    void validate() const;
};

// Class-balanced subsample of the train split: exactly `shots` indices per
// class, drawn without replacement.
struct FewShotSplit {
    int shots = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> indices; // grouped by class, K * shots entries
};

// The protocol allows 1, 2, 4, 8 or 16 shots; anything else needs
// allow_any_shots. Deterministic for a fixed seed; looks at indices only.
FewShotSplit sample_shots(const FeatureDataset& ds, int shots, std::uint64_t seed,
                          bool allow_any_shots = false);

// Single-file format: magic, u64 little-endian header length, JSON header
// (counts, dim, class names, template, splits), float32 feature block,
// int32 label block. Documented byte-exactly in the README.
void save_dataset(const FeatureDataset& ds, const std::string& path);
FeatureDataset load_dataset(const std::string& path);

// Unit-sphere class clusters: seeded random directions with pairwise cosine
// separation >= margin (cos <= 1 - margin), per-sample Gaussian noise then
// re-normalization. Class names come from the bundled word pool so they
// tokenize under the bundled vocabulary. Samples split 50/25/25 per class
// into train/val/test.
FeatureDataset make_synthetic(std::size_t classes, std::size_t dim, std::size_t per_class,
                              float margin, float noise_sigma, std::uint64_t seed);

// Fixed English word pool used for synthetic class names.
const std::vector<std::string>& synthetic_name_pool();

// Default corpus for vocabulary building: covers the name pool and the
// hand-crafted template words, so every one of them merges to a single token.
std::vector<std::string> builtin_corpus();

} // namespace ctxopt
