// Training loops and baselines: context optimization through the frozen
// encoder, zero-shot templates (with optional ensembling), linear probe on
// raw features, and the text-side bias / transformation-layer baselines.
// Every method classifies through the same cosine head except the linear
// probe, which scores raw logits.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctxopt/classifier.hpp"
#include "ctxopt/data.hpp"
#include "ctxopt/prompt.hpp"

namespace ctxopt {

struct TrainConfig {
    float base_lr = 0.002f;
    float warmup_lr = 1e-5f; // epoch 1 only
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    float tau = 0.05f;          // cosine-head temperature, frozen during training
    std::size_t batch_size = 0;            // 0 = full batch up to 256 samples, else 32
    std::optional<std::size_t> max_epochs; // unset = derive from shots
    std::uint64_t seed = 1;

    // {16:200, 8:200, 4:100, 2:100, 1:50}; off-protocol counts round up to
    // the nearest bracket.
    static std::size_t epochs_for_shots(int shots);
    std::size_t epochs(int shots) const {
        return max_epochs ? *max_epochs : epochs_for_shots(shots);
    }

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Constant warmup through epoch 1, then cosine decay to zero over the rest.
struct Schedule {
    float base_lr = 0.002f;
    float warmup_lr = 1e-5f;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 0;

    // Valid for step in [0, total_steps]; the endpoint evaluates to zero.
    float lr_at(std::size_t step) const;
};

struct RunResult {
    std::string method;
    int shots = 0;
    std::uint64_t seed = 0;
    double test_accuracy = 0.0;
    std::size_t epochs = 0;
    std::size_t steps_per_epoch = 0;
    std::vector<float> loss_trace; // one entry per optimization step
    std::string config_fingerprint;
    std::string checkpoint_path; // empty when nothing was saved

    nlohmann::json to_json() const;
};

// SGD with momentum; weight decay is added to the gradient. step() applies
// the update and then zeroes the gradients — nothing else ever clears them.
class SgdMomentum {
public:
    SgdMomentum(std::vector<Tensor> params, float momentum, float weight_decay);
    std::size_t param_count() const;
    void step(float lr);

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
    float momentum_;
    float weight_decay_;
};

// Top-1 accuracy of the cosine head over the full test split.
double eval_accuracy(const std::vector<TextFeature>& weights, const FeatureDataset& ds,
                     Temperature tau = Temperature());

// Class weights for a trained context bank (no tape).
std::vector<TextFeature> bank_class_weights(const ContextBank& bank, const FeatureDataset& ds,
                                            const Vocabulary& vocab,
                                            const EncoderWeights& encoder);

// "[CLASS]" substitution; the placeholder must be present.
std::string substitute_template(const std::string& template_text, const std::string& class_name);

// One feature per class from hand-crafted templates; multiple templates are
// merged with ensemble_weights.
std::vector<TextFeature> zero_shot_weights(const FeatureDataset& ds, const Vocabulary& vocab,
                                           const EncoderWeights& encoder,
                                           const std::vector<std::string>& templates);

// How multiple templates combine: one merged weight per class (default), or
// per-template classifiers whose posteriors are averaged.
enum class EnsembleMode { kEmbeddings, kProbabilities };
const char* to_string(EnsembleMode m);
EnsembleMode ensemble_mode_from_string(const std::string& s);

// Top-1 accuracy of the probability-averaging route.
double eval_accuracy_prob_ensemble(const std::vector<std::vector<TextFeature>>& per_prompt,
                                   const FeatureDataset& ds, Temperature tau = Temperature());

struct CoopRun {
    RunResult result;
    ContextBank bank;
};

// Learns the context bank with SGD + the warmup/cosine schedule. The encoder
// stays byte-identical (checked); the bank is the only trainable tensor.
CoopRun train_coop(const FeatureDataset& ds, const FewShotSplit& split,
                   const PromptConfig& prompt_config, const Vocabulary& vocab,
                   const EncoderWeights& encoder, const TrainConfig& config);

// Zero-shot evaluation; no training.
RunResult zero_shot(const FeatureDataset& ds, const Vocabulary& vocab,
                    const EncoderWeights& encoder, const std::vector<std::string>& templates,
                    EnsembleMode mode = EnsembleMode::kEmbeddings);

// Shared bias vector added to every zero-shot class weight; only the bias
// trains. At init predictions equal zero-shot exactly.
RunResult train_text_bias(const FeatureDataset& ds, const FewShotSplit& split,
                          const Vocabulary& vocab, const EncoderWeights& encoder,
                          const TrainConfig& config);

// Identity-initialized linear map applied to the zero-shot class weights.
RunResult train_text_transform(const FeatureDataset& ds, const FewShotSplit& split,
                               const Vocabulary& vocab, const EncoderWeights& encoder,
                               const TrainConfig& config);

// Multinomial logistic regression on raw features, full-batch gradient
// descent, L2 penalty chosen on the val split.
RunResult train_linear_probe(const FeatureDataset& ds, const FewShotSplit& split,
                             const TrainConfig& config);

// True when the moving average of per-epoch losses never rises by more than
// `tolerance` between consecutive windows.
bool loss_trend_nonincreasing(const std::vector<float>& loss_trace, std::size_t steps_per_epoch,
                              std::size_t window_epochs = 10, double tolerance = 0.05);

} // namespace ctxopt
