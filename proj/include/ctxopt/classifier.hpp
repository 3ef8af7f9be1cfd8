// Cosine-similarity temperature-softmax head. Zero-shot, learned-context and
// the text-side baselines all classify through this one operation; only the
// source of the class weight vectors differs.
#pragma once

#include <vector>

#include "ctxopt/tensor.hpp"
#include "ctxopt/text_encoder.hpp"

namespace ctxopt {

class Temperature {
public:
    Temperature() = default;
    explicit Temperature(float tau) : tau_(tau) {
        if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
    }
    float value() const { return tau_; }

private:
    float tau_ = 0.01f; // logit scale 100
};

struct ImageFeature {
    Tensor vector; // [e]
    int label = -1;
};

// cos(w_i, f) / tau for every class; differentiable through the weights.
Tensor predict_logits(const ImageFeature& f, const std::vector<TextFeature>& weights,
                      Temperature tau = Temperature());

// softmax over predict_logits; sums to one, invariant to the scale of f.
Tensor predict(const ImageFeature& f, const std::vector<TextFeature>& weights,
               Temperature tau = Temperature());

// -log probs[label]; reporting-path counterpart of cross_entropy_logits.
float cross_entropy(const Tensor& probs, int label);

// Per class: L2-normalize each prompt's feature, average, re-normalize.
// A single prompt (or bitwise-identical duplicates) passes through unchanged,
// so duplicate templates cannot perturb predictions numerically.
std::vector<TextFeature> ensemble_weights(
    const std::vector<std::vector<TextFeature>>& per_prompt_weights);

// Alternative ensembling route: classify with each prompt's weights and
// average the posteriors. Bitwise-identical rows collapse to a single one.
Tensor predict_prob_ensemble(const ImageFeature& f,
                             const std::vector<std::vector<TextFeature>>& per_prompt_weights,
                             Temperature tau = Temperature());

} // namespace ctxopt
