#include "ctxopt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace ctxopt {

namespace {

std::string fingerprint_hex(const nlohmann::json& j) {
    const std::string dump = j.dump();
    std::ostringstream os;
    os << std::hex << fnv1a64(dump);
    return os.str();
}

std::size_t auto_batch(std::size_t n, std::size_t configured) {
    if (configured) return std::min(configured, n);
    return n <= 256 ? n : 32;
}

std::vector<ImageFeature> gather_features(const FeatureDataset& ds,
                                          const std::vector<std::size_t>& indices) {
    std::vector<ImageFeature> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices) out.push_back(ds.feature(idx));
    return out;
}

// mean cross-entropy of the cosine head over one batch, built per sample so
// training and evaluation share the predict path exactly
Tensor head_batch_loss(const std::vector<ImageFeature>& batch,
                       const std::vector<TextFeature>& weights, Temperature tau) {
    std::vector<Tensor> losses;
    losses.reserve(batch.size());
    for (const ImageFeature& f : batch)
        losses.push_back(cross_entropy_logits(predict_logits(f, weights, tau), f.label));
    return mean(stack_scalars(losses));
}

void check_census(std::size_t got, std::size_t expected, const char* method) {
    if (got != expected)
        throw RunError(std::string(method) + ": parameter census " + std::to_string(got) +
                       " does not match the expected " + std::to_string(expected) +
                       "; refusing to start");
}

std::vector<std::size_t> epoch_order(const FewShotSplit& split, std::size_t epoch,
                                     std::size_t batch, std::uint64_t seed) {
    std::vector<std::size_t> order(split.indices.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (batch < order.size()) {
        Rng rng(seed * 0x9e3779b97f4a7c15ull + epoch + 1);
        rng.shuffle(order);
    }
    return order;
}

} // namespace

std::size_t TrainConfig::epochs_for_shots(int shots) {
    if (shots >= 8) return 200;
    if (shots >= 2) return 100;
    return 50;
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j = {{"base_lr", base_lr},   {"warmup_lr", warmup_lr},
                        {"momentum", momentum}, {"weight_decay", weight_decay},
                        {"tau", tau},           {"batch_size", batch_size},
                        {"seed", seed}};
    if (max_epochs) j["max_epochs"] = *max_epochs;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        if (j.contains("base_lr")) c.base_lr = j.at("base_lr").get<float>();
        if (j.contains("warmup_lr")) c.warmup_lr = j.at("warmup_lr").get<float>();
        if (j.contains("momentum")) c.momentum = j.at("momentum").get<float>();
        if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<float>();
        if (j.contains("tau")) c.tau = j.at("tau").get<float>();
        if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
        if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<std::size_t>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed train config: ") + e.what());
    }
    if (c.tau <= 0.0f) throw ConfigError("tau must be positive");
    return c;
}

float Schedule::lr_at(std::size_t step) const {
    if (step > total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond the budget of " +
                            std::to_string(total_steps));
    if (step < warmup_steps) return warmup_lr;
    const std::size_t span = total_steps - warmup_steps;
    if (span == 0) return 0.0f;
    const double t = static_cast<double>(step - warmup_steps);
    const double frac = (1.0 + std::cos(std::numbers::pi_v<double> * t / double(span))) / 2.0;
    return static_cast<float>(base_lr * frac);
}

nlohmann::json RunResult::to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["shots"] = shots;
    j["seed"] = seed;
    j["test_accuracy"] = test_accuracy;
    j["epochs"] = epochs;
    j["steps_per_epoch"] = steps_per_epoch;
    j["loss_trace"] = loss_trace;
    j["config_fingerprint"] = config_fingerprint;
    j["checkpoint"] = checkpoint_path;
    return j;
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, float momentum, float weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const Tensor& p : params_) {
        if (!p.requires_grad())
            throw ContractError("optimizer parameter does not require grad");
        velocity_.emplace_back(p.numel(), 0.0f);
    }
}

std::size_t SgdMomentum::param_count() const {
    std::size_t n = 0;
    for (const Tensor& p : params_) n += p.numel();
    return n;
}

void SgdMomentum::step(float lr) {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        const std::vector<float>& g = p.grad();
        std::vector<float>& v = velocity_[pi];
        std::vector<float>& w = p.mutable_data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const float grad = g[i] + weight_decay_ * w[i];
            v[i] = momentum_ * v[i] + grad;
            w[i] -= lr * v[i];
        }
        p.zero_grad();
    }
}

double eval_accuracy(const std::vector<TextFeature>& weights, const FeatureDataset& ds,
                     Temperature tau) {
    if (ds.test_indices.empty()) throw ContractError("eval: test split is empty");
    std::size_t correct = 0;
    for (std::size_t idx : ds.test_indices) {
        const ImageFeature f = ds.feature(idx);
        const Tensor probs = predict(f, weights, tau);
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < probs.numel(); ++c)
            if (probs.at(c) > probs.at(argmax)) argmax = c;
        correct += static_cast<int>(argmax) == f.label;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.test_indices.size());
}

std::vector<TextFeature> bank_class_weights(const ContextBank& bank, const FeatureDataset& ds,
                                            const Vocabulary& vocab,
                                            const EncoderWeights& encoder) {
    const ClassNameTable names = ClassNameTable::from(ds.class_names, vocab);
    return class_weights(bank, names, vocab, encoder);
}

std::string substitute_template(const std::string& template_text,
                                const std::string& class_name) {
    const std::string placeholder = "[CLASS]";
    const std::size_t pos = template_text.find(placeholder);
    if (pos == std::string::npos)
        throw ConfigError("template '" + template_text + "' has no [CLASS] placeholder");
    std::string out = template_text;
    out.replace(pos, placeholder.size(), class_name);
    return out;
}

std::vector<TextFeature> zero_shot_weights(const FeatureDataset& ds, const Vocabulary& vocab,
                                           const EncoderWeights& encoder,
                                           const std::vector<std::string>& templates) {
    if (templates.empty()) throw ConfigError("zero-shot needs at least one template");
    std::vector<std::vector<TextFeature>> per_prompt;
    per_prompt.reserve(templates.size());
    for (const std::string& tmpl : templates) {
        std::vector<TextFeature> row;
        row.reserve(ds.num_classes());
        for (const std::string& name : ds.class_names)
            row.push_back(encode_text(substitute_template(tmpl, name), vocab, encoder));
        per_prompt.push_back(std::move(row));
    }
    return ensemble_weights(per_prompt);
}

CoopRun train_coop(const FeatureDataset& ds, const FewShotSplit& split,
                   const PromptConfig& prompt_config, const Vocabulary& vocab,
                   const EncoderWeights& encoder, const TrainConfig& config) {
    const ClassNameTable names = ClassNameTable::from(ds.class_names, vocab);
    const std::size_t d = encoder.config().d_model;
    if (prompt_config.context_len + names.max_subwords() + 2 > encoder.config().seq_len)
        throw ConfigError("context length " + std::to_string(prompt_config.context_len) +
                          " plus the longest class name does not fit the sequence cap");

    ContextBank bank = ContextBank::init(prompt_config, vocab, encoder.token_embedding(),
                                         ds.num_classes(), config.seed);
    SgdMomentum opt({bank.vectors()}, config.momentum, config.weight_decay);
    const std::size_t expected =
        prompt_config.sharing == Sharing::kUnified
            ? prompt_config.context_len * d
            : ds.num_classes() * prompt_config.context_len * d;
    check_census(opt.param_count(), expected, "coop");

    const std::uint64_t encoder_before = encoder.fingerprint();
    const std::vector<ImageFeature> train_features = gather_features(ds, split.indices);
    const Temperature tau(config.tau);

    const std::size_t n = train_features.size();
    const std::size_t batch = auto_batch(n, config.batch_size);
    const std::size_t steps_per_epoch = (n + batch - 1) / batch;
    const std::size_t epochs = config.epochs(split.shots);
    const Schedule sched{config.base_lr, config.warmup_lr, steps_per_epoch,
                         epochs * steps_per_epoch};

    RunResult result;
    result.method = "coop";
    result.shots = split.shots;
    result.seed = config.seed;
    result.epochs = epochs;
    result.steps_per_epoch = steps_per_epoch;
    result.config_fingerprint = fingerprint_hex(
        {{"train", config.to_json()}, {"prompt", prompt_config.to_json()}, {"shots", split.shots}});

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(split, epoch, batch, config.seed);
        for (std::size_t start = 0; start < n; start += batch, ++step) {
            std::vector<ImageFeature> minibatch;
            minibatch.reserve(batch);
            for (std::size_t i = start; i < std::min(start + batch, n); ++i)
                minibatch.push_back(train_features[order[i]]);

            Tape tape;
            Tensor loss;
            try {
                const std::vector<TextFeature> weights =
                    class_weights(bank, names, vocab, encoder);
                loss = head_batch_loss(minibatch, weights, tau);
            } catch (const NumericError& e) {
                throw RunError("coop: diverged at step " + std::to_string(step) + ": " +
                               e.what());
            }
            if (!std::isfinite(loss.item()))
                throw RunError("coop: loss diverged at step " + std::to_string(step));
            backward(loss);
            opt.step(sched.lr_at(step));
            result.loss_trace.push_back(loss.item());
        }
    }

    if (encoder.fingerprint() != encoder_before)
        throw RunError("coop: frozen encoder weights changed during training");

    result.test_accuracy = eval_accuracy(class_weights(bank, names, vocab, encoder), ds, tau);
    return CoopRun{std::move(result), std::move(bank)};
}

const char* to_string(EnsembleMode m) {
    return m == EnsembleMode::kEmbeddings ? "embeddings" : "probabilities";
}

EnsembleMode ensemble_mode_from_string(const std::string& s) {
    if (s == "embeddings") return EnsembleMode::kEmbeddings;
    if (s == "probabilities") return EnsembleMode::kProbabilities;
    throw ConfigError("unknown ensemble mode '" + s + "' (expected embeddings|probabilities)");
}

double eval_accuracy_prob_ensemble(const std::vector<std::vector<TextFeature>>& per_prompt,
                                   const FeatureDataset& ds, Temperature tau) {
    if (ds.test_indices.empty()) throw ContractError("eval: test split is empty");
    std::size_t correct = 0;
    for (std::size_t idx : ds.test_indices) {
        const ImageFeature f = ds.feature(idx);
        const Tensor probs = predict_prob_ensemble(f, per_prompt, tau);
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < probs.numel(); ++c)
            if (probs.at(c) > probs.at(argmax)) argmax = c;
        correct += static_cast<int>(argmax) == f.label;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.test_indices.size());
}

RunResult zero_shot(const FeatureDataset& ds, const Vocabulary& vocab,
                    const EncoderWeights& encoder, const std::vector<std::string>& templates,
                    EnsembleMode mode) {
    RunResult result;
    result.method = templates.size() > 1 ? "ensemble" : "zeroshot";
    result.config_fingerprint =
        fingerprint_hex({{"templates", templates}, {"mode", to_string(mode)}});
    if (mode == EnsembleMode::kEmbeddings || templates.size() <= 1) {
        result.test_accuracy =
            eval_accuracy(zero_shot_weights(ds, vocab, encoder, templates), ds);
    } else {
        std::vector<std::vector<TextFeature>> per_prompt;
        for (const std::string& tmpl : templates)
            per_prompt.push_back(zero_shot_weights(ds, vocab, encoder, {tmpl}));
        result.test_accuracy = eval_accuracy_prob_ensemble(per_prompt, ds);
    }
    return result;
}

namespace {

enum class TextHead { kBias, kTransform };

RunResult train_text_head(const FeatureDataset& ds, const FewShotSplit& split,
                          const Vocabulary& vocab, const EncoderWeights& encoder,
                          const TrainConfig& config, TextHead kind) {
    const std::size_t e = encoder.config().embed_dim;
    const char* method = kind == TextHead::kBias ? "text-bias" : "text-transform";

    // frozen zero-shot weights from the dataset's hand-crafted template
    const std::vector<TextFeature> zs =
        zero_shot_weights(ds, vocab, encoder, {ds.template_text});

    Tensor param;
    if (kind == TextHead::kBias) {
        param = Tensor::zeros({e}, /*requires_grad=*/true);
    } else {
        std::vector<float> eye(e * e, 0.0f);
        for (std::size_t i = 0; i < e; ++i) eye[i * e + i] = 1.0f;
        param = Tensor::from_data({e, e}, std::move(eye), /*requires_grad=*/true);
    }

    SgdMomentum opt({param}, config.momentum, config.weight_decay);
    check_census(opt.param_count(), kind == TextHead::kBias ? e : e * e, method);

    auto adapted_weights = [&] {
        std::vector<TextFeature> w;
        w.reserve(zs.size());
        for (const TextFeature& z : zs) {
            Tensor v = kind == TextHead::kBias ? add(z.vector, param) : matvec(param, z.vector);
            w.push_back(TextFeature{v, z.source});
        }
        return w;
    };

    const std::vector<ImageFeature> train_features = gather_features(ds, split.indices);
    const Temperature tau(config.tau);
    const std::size_t n = train_features.size();
    const std::size_t batch = auto_batch(n, config.batch_size);
    const std::size_t steps_per_epoch = (n + batch - 1) / batch;
    const std::size_t epochs = config.epochs(split.shots);
    const Schedule sched{config.base_lr, config.warmup_lr, steps_per_epoch,
                         epochs * steps_per_epoch};

    RunResult result;
    result.method = method;
    result.shots = split.shots;
    result.seed = config.seed;
    result.epochs = epochs;
    result.steps_per_epoch = steps_per_epoch;
    result.config_fingerprint =
        fingerprint_hex({{"train", config.to_json()}, {"method", method}, {"shots", split.shots}});

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(split, epoch, batch, config.seed);
        for (std::size_t start = 0; start < n; start += batch, ++step) {
            std::vector<ImageFeature> minibatch;
            for (std::size_t i = start; i < std::min(start + batch, n); ++i)
                minibatch.push_back(train_features[order[i]]);

            Tape tape;
            Tensor loss;
            try {
                loss = head_batch_loss(minibatch, adapted_weights(), tau);
            } catch (const NumericError& e) {
                throw RunError(std::string(method) + ": diverged at step " +
                               std::to_string(step) + ": " + e.what());
            }
            if (!std::isfinite(loss.item()))
                throw RunError(std::string(method) + ": loss diverged at step " +
                               std::to_string(step));
            backward(loss);
            opt.step(sched.lr_at(step));
            result.loss_trace.push_back(loss.item());
        }
    }

    result.test_accuracy = eval_accuracy(adapted_weights(), ds, tau);
    return result;
}

double linear_logit_accuracy(const Tensor& w, const Tensor& b, const FeatureDataset& ds,
                             const std::vector<std::size_t>& indices) {
    if (indices.empty()) return 0.0;
    const std::size_t k = w.shape()[0], e = w.shape()[1];
    std::size_t correct = 0;
    for (std::size_t idx : indices) {
        double best = -1e300;
        std::size_t argmax = 0;
        for (std::size_t c = 0; c < k; ++c) {
            double z = b.at(c);
            for (std::size_t j = 0; j < e; ++j)
                z += double(w.at(c * e + j)) * double(ds.features[idx * e + j]);
            if (z > best) {
                best = z;
                argmax = c;
            }
        }
        correct += static_cast<int>(argmax) == ds.labels[idx];
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

} // namespace

RunResult train_text_bias(const FeatureDataset& ds, const FewShotSplit& split,
                          const Vocabulary& vocab, const EncoderWeights& encoder,
                          const TrainConfig& config) {
    return train_text_head(ds, split, vocab, encoder, config, TextHead::kBias);
}

RunResult train_text_transform(const FeatureDataset& ds, const FewShotSplit& split,
                               const Vocabulary& vocab, const EncoderWeights& encoder,
                               const TrainConfig& config) {
    return train_text_head(ds, split, vocab, encoder, config, TextHead::kTransform);
}

RunResult train_linear_probe(const FeatureDataset& ds, const FewShotSplit& split,
                             const TrainConfig& config) {
    const std::size_t k = ds.num_classes();
    const std::size_t e = ds.dim;
    const std::size_t n = split.indices.size();

    // constant design matrix over the few-shot sample
    std::vector<float> xdata;
    xdata.reserve(n * e);
    std::vector<int> labels;
    labels.reserve(n);
    for (std::size_t idx : split.indices) {
        xdata.insert(xdata.end(), ds.features.begin() + idx * e,
                     ds.features.begin() + (idx + 1) * e);
        labels.push_back(ds.labels[idx]);
    }
    const Tensor x = Tensor::from_data({n, e}, std::move(xdata));

    const std::vector<float> lambdas = {0.0f, 1e-4f, 1e-3f, 1e-2f, 1e-1f};
    const std::size_t iterations = 500;
    const float lr = 0.5f;

    RunResult result;
    result.method = "linear-probe";
    result.shots = split.shots;
    result.seed = config.seed;
    result.epochs = iterations;
    result.steps_per_epoch = 1;
    result.config_fingerprint = fingerprint_hex(
        {{"train", config.to_json()}, {"method", "linear-probe"}, {"shots", split.shots}});

    double best_val = -1.0;
    Tensor best_w, best_b;
    std::vector<float> best_trace;
    for (float lambda : lambdas) {
        Tensor w = Tensor::zeros({k, e}, /*requires_grad=*/true);
        Tensor b = Tensor::zeros({k}, /*requires_grad=*/true);
        SgdMomentum opt({w, b}, /*momentum=*/0.0f, /*weight_decay=*/0.0f);
        check_census(opt.param_count(), k * (e + 1), "linear-probe");

        std::vector<float> trace;
        trace.reserve(iterations);
        for (std::size_t it = 0; it < iterations; ++it) {
            Tape tape;
            Tensor logits = add_rowvec(matmul(x, transpose(w)), b);
            Tensor loss = cross_entropy_rows(logits, labels);
            if (lambda > 0.0f) loss = add(loss, scale(sum(mul(w, w)), lambda));
            if (!std::isfinite(loss.item()))
                throw RunError("linear-probe: loss diverged at iteration " + std::to_string(it));
            backward(loss);
            opt.step(lr);
            trace.push_back(loss.item());
        }

        const double val_acc = ds.val_indices.empty()
                                   ? linear_logit_accuracy(w, b, ds, split.indices)
                                   : linear_logit_accuracy(w, b, ds, ds.val_indices);
        if (val_acc > best_val) {
            best_val = val_acc;
            best_w = w;
            best_b = b;
            best_trace = std::move(trace);
        }
    }

    result.loss_trace = std::move(best_trace);
    result.test_accuracy = linear_logit_accuracy(best_w, best_b, ds, ds.test_indices);
    return result;
}

bool loss_trend_nonincreasing(const std::vector<float>& loss_trace, std::size_t steps_per_epoch,
                              std::size_t window_epochs, double tolerance) {
    if (steps_per_epoch == 0 || loss_trace.empty()) return true;
    std::vector<double> per_epoch;
    for (std::size_t start = 0; start < loss_trace.size(); start += steps_per_epoch) {
        double acc = 0.0;
        const std::size_t end = std::min(start + steps_per_epoch, loss_trace.size());
        for (std::size_t i = start; i < end; ++i) acc += loss_trace[i];
        per_epoch.push_back(acc / double(end - start));
    }
    if (per_epoch.size() <= window_epochs) return true;
    std::vector<double> windows;
    for (std::size_t i = 0; i + window_epochs <= per_epoch.size(); ++i) {
        double acc = 0.0;
        for (std::size_t j = i; j < i + window_epochs; ++j) acc += per_epoch[j];
        windows.push_back(acc / double(window_epochs));
    }
    for (std::size_t i = 1; i < windows.size(); ++i)
        if (windows[i] > windows[i - 1] * (1.0 + tolerance)) return false;
    return true;
}

} // namespace ctxopt
