// ctxopt: dataset generation/ingestion, vocabulary and encoder management,
// training/evaluation sweeps, and context-vector interpretation.
//
// Exit codes: 0 success, 2 config error, 3 data/format error, 4 run error.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ctxopt/data.hpp"
#include "ctxopt/experiment.hpp"
#include "ctxopt/interpret.hpp"
#include "ctxopt/tensor_file.hpp"

using namespace ctxopt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRun = 4;

std::uint64_t env_seed_or(std::uint64_t fallback) {
    const char* env = std::getenv("CTXOPT_SEED");
    if (!env || !*env) return fallback;
    try {
        return std::stoull(env);
    } catch (const std::exception&) {
        throw ConfigError("CTXOPT_SEED is not a number: " + std::string(env));
    }
}

std::vector<std::string> read_corpus_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    if (lines.empty()) throw DataError("corpus file is empty: " + path);
    return lines;
}

int cmd_synth(std::size_t classes, std::size_t dim, std::size_t per_class, float margin,
              float noise, std::optional<std::uint64_t> seed, const std::string& out) {
    const std::uint64_t s = seed ? *seed : env_seed_or(1);
    FeatureDataset ds = make_synthetic(classes, dim, per_class, margin, noise, s);
    save_dataset(ds, out);
    std::printf("wrote %s: %zu samples, %zu classes, dim %zu, checksum %016llx\n", out.c_str(),
                ds.size(), ds.num_classes(), ds.dim,
                static_cast<unsigned long long>(ds.feature_checksum));
    return kExitOk;
}

int cmd_ingest(const std::string& input, const std::string& out) {
    FeatureDataset ds = load_dataset(input); // full validation happens here
    std::printf("%s: %zu samples, %zu classes, dim %zu, splits %zu/%zu/%zu, checksum %016llx\n",
                input.c_str(), ds.size(), ds.num_classes(), ds.dim, ds.train_indices.size(),
                ds.val_indices.size(), ds.test_indices.size(),
                static_cast<unsigned long long>(ds.feature_checksum));
    if (!out.empty()) {
        save_dataset(ds, out);
        std::printf("re-saved to %s\n", out.c_str());
    }
    return kExitOk;
}

int cmd_vocab(const std::string& corpus_path, std::size_t size, const std::string& out) {
    const std::vector<std::string> corpus =
        corpus_path.empty() ? builtin_corpus() : read_corpus_file(corpus_path);
    Vocabulary vocab = Vocabulary::build(corpus, size);
    vocab.save_json(out);
    std::printf("wrote %s: %zu tokens, %zu merges\n", out.c_str(), vocab.size(),
                vocab.merges().size());
    return kExitOk;
}

int cmd_init_encoder(const std::string& vocab_path, std::size_t layers, std::size_t heads,
                     std::size_t d_model, std::size_t embed_dim, std::size_t seq_len,
                     std::optional<std::uint64_t> seed, const std::string& out) {
    Vocabulary vocab = Vocabulary::load_json(vocab_path);
    EncoderConfig cfg;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.d_model = d_model;
    cfg.embed_dim = embed_dim;
    cfg.seq_len = seq_len;
    cfg.vocab_size = vocab.size();
    const std::uint64_t s = seed ? *seed : env_seed_or(1);
    EncoderWeights w = EncoderWeights::init_frozen(s, cfg);
    w.save(out);
    std::printf("wrote %s: %zu layers, d_model %zu, embed_dim %zu, fingerprint %016llx\n",
                out.c_str(), layers, d_model, embed_dim,
                static_cast<unsigned long long>(w.fingerprint()));
    return kExitOk;
}

int cmd_run(const ExperimentSpec& spec, std::size_t jobs, bool dry_run) {
    ExperimentOutcome outcome = run_experiment(spec, jobs, dry_run);
    if (dry_run) {
        std::printf("spec ok: %zu methods x %zu shots x %zu seeds\n", spec.methods.size(),
                    spec.shots.size(), spec.seeds.size());
        return kExitOk;
    }
    std::printf("%s", outcome.results_csv.c_str());
    std::printf("artifacts: %s\n", outcome.run_dir.c_str());
    if (!outcome.all_ok) {
        for (const CellResult& cell : outcome.cells)
            if (!cell.ok())
                std::fprintf(stderr, "cell %s/%d/%llu failed: %s\n", cell.method.c_str(),
                             cell.shots, static_cast<unsigned long long>(cell.seed),
                             cell.error.c_str());
        return kExitRun;
    }
    return kExitOk;
}

int cmd_eval(const std::string& dataset, const std::string& vocab_path,
             const std::string& encoder_path, const std::string& checkpoint,
             const std::string& template_text) {
    FeatureDataset ds = load_dataset(dataset);
    Vocabulary vocab = Vocabulary::load_json(vocab_path);
    EncoderWeights enc = EncoderWeights::load(encoder_path);
    double accuracy = 0.0;
    if (!checkpoint.empty()) {
        ContextBank bank = ContextBank::load(checkpoint);
        if (bank.num_classes() != ds.num_classes() &&
            bank.config().sharing == Sharing::kClassSpecific)
            throw ConfigError("checkpoint class count does not match the dataset");
        accuracy = eval_accuracy(bank_class_weights(bank, ds, vocab, enc), ds);
    } else {
        const std::string tmpl = template_text.empty() ? ds.template_text : template_text;
        accuracy = eval_accuracy(zero_shot_weights(ds, vocab, enc, {tmpl}), ds);
    }
    std::printf("accuracy %.6f\n", accuracy);
    return kExitOk;
}

int cmd_interpret(const std::string& checkpoint, const std::string& vocab_path,
                  const std::string& encoder_path, std::size_t top_n,
                  const std::string& dataset, const std::string& json_out) {
    ContextBank bank = ContextBank::load(checkpoint);
    Vocabulary vocab = Vocabulary::load_json(vocab_path);
    EncoderWeights enc = EncoderWeights::load(encoder_path);
    std::vector<std::string> names;
    if (!dataset.empty()) names = load_dataset(dataset).class_names;
    NearestWordReport report =
        nearest_words(bank, enc.token_embedding(), vocab, top_n, names);
    std::printf("%s", report.render_text(vocab).c_str());
    if (!json_out.empty()) {
        std::ofstream out(json_out);
        if (!out) throw DataError("cannot write report: " + json_out);
        out << report.to_json(vocab).dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_export_plot_csv(const std::vector<std::string>& inputs, const std::string& out) {
    const std::string pivot = pivot_results_csv(inputs);
    if (out.empty()) {
        std::printf("%s", pivot.c_str());
    } else {
        std::ofstream f(out, std::ios::binary);
        if (!f) throw DataError("cannot write: " + out);
        f << pivot;
        std::printf("wrote %s\n", out.c_str());
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"context-vector optimization for a frozen text encoder"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic feature dataset");
    std::size_t sy_classes = 8, sy_dim = 32, sy_per_class = 80;
    float sy_margin = 0.3f, sy_noise = 0.15f;
    std::optional<std::uint64_t> sy_seed;
    std::string sy_out;
    synth->add_option("--classes", sy_classes, "number of classes");
    synth->add_option("--dim", sy_dim, "feature width");
    synth->add_option("--per-class", sy_per_class, "samples per class");
    synth->add_option("--margin", sy_margin, "minimum pairwise cosine separation");
    synth->add_option("--noise", sy_noise, "per-component Gaussian noise sigma");
    synth->add_option("--seed", sy_seed, "generation seed (default: CTXOPT_SEED or 1)");
    synth->add_option("--out", sy_out, "output dataset file")->required();

    // ingest
    auto* ingest = app.add_subcommand("ingest", "validate (and optionally re-save) a dataset");
    std::string in_input, in_out;
    ingest->add_option("input", in_input, "dataset file")->required();
    ingest->add_option("--out", in_out, "canonical re-save path");

    // vocab
    auto* vocab = app.add_subcommand("vocab", "build a byte-pair vocabulary");
    std::string vo_corpus, vo_out;
    std::size_t vo_size = 512;
    vocab->add_option("--corpus", vo_corpus, "corpus file, one document per line "
                                             "(default: bundled corpus)");
    vocab->add_option("--size", vo_size, "target vocabulary size");
    vocab->add_option("--out", vo_out, "output vocabulary json")->required();

    // init-encoder
    auto* initenc = app.add_subcommand("init-encoder", "create frozen encoder weights");
    std::string ie_vocab, ie_out;
    std::size_t ie_layers = 2, ie_heads = 4, ie_d = 64, ie_e = 32, ie_seq = 24;
    std::optional<std::uint64_t> ie_seed;
    initenc->add_option("--vocab", ie_vocab, "vocabulary json")->required();
    initenc->add_option("--layers", ie_layers, "transformer blocks");
    initenc->add_option("--heads", ie_heads, "attention heads");
    initenc->add_option("--d-model", ie_d, "model width");
    initenc->add_option("--embed-dim", ie_e, "output feature width");
    initenc->add_option("--seq-len", ie_seq, "token cap");
    initenc->add_option("--seed", ie_seed, "init seed (default: CTXOPT_SEED or 1)");
    initenc->add_option("--out", ie_out, "output weight file")->required();

    // run
    auto* run = app.add_subcommand("run", "execute an experiment spec");
    std::string run_spec_path;
    std::vector<std::string> run_methods;
    std::vector<int> run_shots;
    std::vector<std::uint64_t> run_seeds;
    std::string run_out;
    std::size_t run_jobs = 1;
    bool run_dry = false;
    std::optional<std::size_t> run_ctx_len, run_epochs, run_batch;
    std::string run_placement, run_sharing, run_init, run_init_text;
    std::optional<float> run_lr, run_tau;
    bool run_allow_any_shots = false;
    run->add_option("--spec", run_spec_path, "experiment spec json")->required();
    run->add_flag("--allow-any-shots", run_allow_any_shots,
                  "accept shot counts outside {1,2,4,8,16}");
    run->add_option("--methods", run_methods, "override: methods to run");
    run->add_option("--shots", run_shots, "override: shot counts");
    run->add_option("--seeds", run_seeds, "override: seeds");
    run->add_option("--out", run_out, "override: output directory");
    run->add_option("--jobs", run_jobs, "parallel cells");
    run->add_flag("--dry-run", run_dry, "validate the spec graph and exit");
    run->add_option("--ctx-len", run_ctx_len, "override: context length");
    run->add_option("--placement", run_placement, "override: end|mid");
    run->add_option("--sharing", run_sharing, "override: unified|csc");
    run->add_option("--init", run_init, "override: random|manual");
    run->add_option("--init-text", run_init_text, "override: manual init phrase");
    run->add_option("--epochs", run_epochs, "override: epoch budget");
    run->add_option("--batch", run_batch, "override: batch size (0 = auto)");
    run->add_option("--lr", run_lr, "override: base learning rate");
    run->add_option("--tau", run_tau, "override: temperature");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or template");
    std::string ev_ds, ev_vocab, ev_enc, ev_ckpt, ev_tmpl;
    eval->add_option("--dataset", ev_ds, "dataset file")->required();
    eval->add_option("--vocab", ev_vocab, "vocabulary json")->required();
    eval->add_option("--encoder", ev_enc, "encoder weights")->required();
    eval->add_option("--checkpoint", ev_ckpt, "learned-context checkpoint");
    eval->add_option("--template", ev_tmpl, "zero-shot template (default: dataset template)");

    // interpret
    auto* interp = app.add_subcommand("interpret", "nearest words for learned context vectors");
    std::string it_ckpt, it_vocab, it_enc, it_ds, it_json;
    std::size_t it_topn = 3;
    interp->add_option("--checkpoint", it_ckpt, "learned-context checkpoint")->required();
    interp->add_option("--vocab", it_vocab, "vocabulary json")->required();
    interp->add_option("--encoder", it_enc, "encoder weights")->required();
    interp->add_option("--top-n", it_topn, "alternates per slot");
    interp->add_option("--dataset", it_ds, "dataset (for class names)");
    interp->add_option("--json", it_json, "also write a json report here");

    // export-plot-csv
    auto* plot = app.add_subcommand("export-plot-csv", "pivot results for plotting");
    std::vector<std::string> pl_inputs;
    std::string pl_out;
    plot->add_option("results", pl_inputs, "results.csv files")->required();
    plot->add_option("--out", pl_out, "output csv (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (synth->parsed())
            return cmd_synth(sy_classes, sy_dim, sy_per_class, sy_margin, sy_noise, sy_seed,
                             sy_out);
        if (ingest->parsed()) return cmd_ingest(in_input, in_out);
        if (vocab->parsed()) return cmd_vocab(vo_corpus, vo_size, vo_out);
        if (initenc->parsed())
            return cmd_init_encoder(ie_vocab, ie_layers, ie_heads, ie_d, ie_e, ie_seq, ie_seed,
                                    ie_out);
        if (run->parsed()) {
            ExperimentSpec spec = ExperimentSpec::load(run_spec_path);
            if (!run_methods.empty()) spec.methods = run_methods;
            if (!run_shots.empty()) spec.shots = run_shots;
            if (!run_seeds.empty()) spec.seeds = run_seeds;
            else if (spec.seeds.empty()) spec.seeds = {env_seed_or(1)};
            if (!run_out.empty()) spec.output_dir = run_out;
            if (run_ctx_len) spec.prompt.context_len = *run_ctx_len;
            if (!run_placement.empty()) spec.prompt.placement = placement_from_string(run_placement);
            if (!run_sharing.empty()) spec.prompt.sharing = sharing_from_string(run_sharing);
            if (!run_init.empty()) spec.prompt.init = context_init_from_string(run_init);
            if (!run_init_text.empty()) spec.prompt.init_text = run_init_text;
            if (run_epochs) spec.train.max_epochs = *run_epochs;
            if (run_batch) spec.train.batch_size = *run_batch;
            if (run_lr) spec.train.base_lr = *run_lr;
            if (run_tau) spec.train.tau = *run_tau;
            if (run_allow_any_shots) spec.allow_any_shots = true;
            return cmd_run(spec, run_jobs, run_dry);
        }
        if (eval->parsed()) return cmd_eval(ev_ds, ev_vocab, ev_enc, ev_ckpt, ev_tmpl);
        if (interp->parsed())
            return cmd_interpret(it_ckpt, it_vocab, it_enc, it_topn, it_ds, it_json);
        if (plot->parsed()) return cmd_export_plot_csv(pl_inputs, pl_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const Error& e) {
        std::fprintf(stderr, "run error: %s\n", e.what());
        return kExitRun;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRun;
    }
    return kExitOk;
}
