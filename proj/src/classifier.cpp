#include "ctxopt/classifier.hpp"

#include <cmath>

namespace ctxopt {

Tensor predict_logits(const ImageFeature& f, const std::vector<TextFeature>& weights,
                      Temperature tau) {
    if (weights.empty()) throw ContractError("predict: no class weights");
    if (f.vector.rank() != 1) throw ShapeError("predict: image feature must be rank-1");
    const std::size_t e = f.vector.numel();
    for (const TextFeature& w : weights)
        if (w.vector.rank() != 1 || w.vector.numel() != e)
            throw ShapeError("predict: class weight length mismatch");

    const Tensor f_hat = l2_normalize(f.vector);
    const float inv_tau = 1.0f / tau.value();
    std::vector<Tensor> logits;
    logits.reserve(weights.size());
    for (const TextFeature& w : weights)
        logits.push_back(scale(dot(l2_normalize(w.vector), f_hat), inv_tau));
    return stack_scalars(logits);
}

Tensor predict(const ImageFeature& f, const std::vector<TextFeature>& weights, Temperature tau) {
    return softmax(predict_logits(f, weights, tau));
}

float cross_entropy(const Tensor& probs, int label) {
    if (probs.rank() != 1) throw ShapeError("cross_entropy: probabilities must be rank-1");
    if (label < 0 || static_cast<std::size_t>(label) >= probs.numel())
        throw ContractError("cross_entropy: label " + std::to_string(label) +
                            " out of range [0, " + std::to_string(probs.numel()) + ")");
    const float p = probs.at(static_cast<std::size_t>(label));
    if (!(p >= 0.0f) || !std::isfinite(p))
        throw NumericError("cross_entropy: invalid probability");
    return -std::log(p);
}

Tensor predict_prob_ensemble(const ImageFeature& f,
                             const std::vector<std::vector<TextFeature>>& per_prompt_weights,
                             Temperature tau) {
    const std::size_t p = per_prompt_weights.size();
    if (p == 0) throw ContractError("predict_prob_ensemble: need at least one prompt");
    for (const auto& row : per_prompt_weights)
        if (row.size() != per_prompt_weights[0].size())
            throw ShapeError("predict_prob_ensemble: ragged prompt rows");

    // all rows bitwise identical -> single-prompt path, exactly
    bool all_same = true;
    for (std::size_t i = 1; i < p && all_same; ++i)
        for (std::size_t c = 0; c < per_prompt_weights[i].size() && all_same; ++c)
            all_same = per_prompt_weights[i][c].vector.data() ==
                       per_prompt_weights[0][c].vector.data();
    if (all_same) return predict(f, per_prompt_weights[0], tau);

    const std::size_t k = per_prompt_weights[0].size();
    std::vector<double> acc(k, 0.0);
    for (const auto& row : per_prompt_weights) {
        const Tensor probs = predict(f, row, tau);
        for (std::size_t c = 0; c < k; ++c) acc[c] += probs.at(c);
    }
    std::vector<float> mean(k);
    for (std::size_t c = 0; c < k; ++c)
        mean[c] = static_cast<float>(acc[c] / static_cast<double>(p));
    return Tensor::from_data({k}, std::move(mean));
}

std::vector<TextFeature> ensemble_weights(
    const std::vector<std::vector<TextFeature>>& per_prompt_weights) {
    const std::size_t p = per_prompt_weights.size();
    if (p == 0) throw ContractError("ensemble_weights: need at least one prompt");
    const std::size_t k = per_prompt_weights[0].size();
    for (const auto& row : per_prompt_weights)
        if (row.size() != k) throw ShapeError("ensemble_weights: ragged prompt rows");
    if (p == 1) return per_prompt_weights[0];

    std::vector<TextFeature> out;
    out.reserve(k);
    for (std::size_t c = 0; c < k; ++c) {
        bool all_same = true;
        for (std::size_t i = 1; i < p && all_same; ++i)
            all_same = per_prompt_weights[i][c].vector.data() ==
                       per_prompt_weights[0][c].vector.data();
        if (all_same) {
            out.push_back(per_prompt_weights[0][c]);
            continue;
        }
        const std::size_t e = per_prompt_weights[0][c].vector.numel();
        std::vector<double> acc(e, 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            Tensor unit = l2_normalize(per_prompt_weights[i][c].vector);
            for (std::size_t j = 0; j < e; ++j) acc[j] += unit.at(j);
        }
        std::vector<float> avg(e);
        for (std::size_t j = 0; j < e; ++j)
            avg[j] = static_cast<float>(acc[j] / static_cast<double>(p));
        Tensor merged = l2_normalize(Tensor::from_data({e}, std::move(avg)));
        out.push_back(TextFeature{merged, "ensemble:" + std::to_string(p)});
    }
    return out;
}

} // namespace ctxopt
