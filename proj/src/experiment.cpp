#include "ctxopt/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "ctxopt/data.hpp"

namespace fs = std::filesystem;

namespace ctxopt {

const std::vector<std::string> kKnownMethods = {"coop",         "zeroshot",  "ensemble",
                                                "linear-probe", "text-bias", "text-transform"};

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j) {
    ExperimentSpec s;
    try {
        s.dataset_path = j.at("dataset").get<std::string>();
        s.vocab_path = j.at("vocab").get<std::string>();
        s.encoder_path = j.at("encoder").get<std::string>();
        if (j.contains("methods")) s.methods = j.at("methods").get<std::vector<std::string>>();
        if (j.contains("shots")) s.shots = j.at("shots").get<std::vector<int>>();
        if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("output")) s.output_dir = j.at("output").get<std::string>();
        if (j.contains("prompt")) s.prompt = PromptConfig::from_json(j.at("prompt"));
        if (j.contains("train")) s.train = TrainConfig::from_json(j.at("train"));
        if (j.contains("templates"))
            s.templates = j.at("templates").get<std::vector<std::string>>();
        if (j.contains("ensemble_mode"))
            s.ensemble_mode = ensemble_mode_from_string(j.at("ensemble_mode").get<std::string>());
        if (j.contains("allow_any_shots")) s.allow_any_shots = j.at("allow_any_shots").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment spec: ") + e.what());
    }
    return s;
}

ExperimentSpec ExperimentSpec::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open experiment spec: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("cannot parse experiment spec: ") + e.what());
    }
    return from_json(j);
}

nlohmann::json ExperimentSpec::to_json() const {
    return {{"dataset", dataset_path},
            {"vocab", vocab_path},
            {"encoder", encoder_path},
            {"methods", methods},
            {"shots", shots},
            {"seeds", seeds},
            {"output", output_dir},
            {"prompt", prompt.to_json()},
            {"train", train.to_json()},
            {"templates", templates},
            {"ensemble_mode", to_string(ensemble_mode)},
            {"allow_any_shots", allow_any_shots}};
}

std::string ExperimentSpec::hash() const {
    std::ostringstream os;
    os << std::hex << fnv1a64(to_json().dump());
    return os.str();
}

namespace {

struct LoadedInputs {
    FeatureDataset ds;
    Vocabulary vocab;
    EncoderWeights encoder;
    std::vector<std::string> templates;          // zero-shot template (single)
    std::vector<std::string> ensemble_templates; // >= 1 templates for ensembling
};

LoadedInputs validate_and_load(const ExperimentSpec& spec) {
    if (spec.methods.empty()) throw ConfigError("experiment spec lists no methods");
    for (const std::string& m : spec.methods)
        if (std::find(kKnownMethods.begin(), kKnownMethods.end(), m) == kKnownMethods.end())
            throw ConfigError("unknown method '" + m + "'");
    if (spec.shots.empty()) throw ConfigError("experiment spec lists no shot counts");
    if (spec.seeds.empty()) throw ConfigError("experiment spec lists no seeds");
    spec.prompt.validate();

    LoadedInputs in{load_dataset(spec.dataset_path), Vocabulary::load_json(spec.vocab_path),
                    EncoderWeights::load(spec.encoder_path),
                    {},
                    {}};
    if (in.vocab.size() != in.encoder.config().vocab_size)
        throw ConfigError("vocabulary size does not match the encoder's vocab_size");
    if (in.ds.dim != in.encoder.config().embed_dim)
        throw ConfigError("dataset feature width " + std::to_string(in.ds.dim) +
                          " does not match encoder embed_dim " +
                          std::to_string(in.encoder.config().embed_dim));

    const std::string base_template =
        spec.templates.empty() ? in.ds.template_text : spec.templates.front();
    in.templates = {base_template};
    if (spec.templates.size() > 1) {
        in.ensemble_templates = spec.templates;
    } else {
        // stock variants; all their words are in the bundled corpus
        in.ensemble_templates = {base_template, "a bad photo of a [CLASS].",
                                 "a photo of the small [CLASS].",
                                 "a photo of the large [CLASS]."};
    }
    for (const std::string& t : in.ensemble_templates)
        (void)substitute_template(t, "probe"); // placeholder check

    const bool runs_prompts =
        std::find(spec.methods.begin(), spec.methods.end(), "coop") != spec.methods.end();
    if (runs_prompts) {
        const ClassNameTable names = ClassNameTable::from(in.ds.class_names, in.vocab);
        if (spec.prompt.context_len + names.max_subwords() + 2 > in.encoder.config().seq_len)
            throw ConfigError("prompt does not fit the encoder sequence length");
    }
    bool any_sampled = false;
    for (const std::string& m : spec.methods)
        any_sampled = any_sampled || (m != "zeroshot" && m != "ensemble");
    if (any_sampled)
        for (int s : spec.shots)
            (void)sample_shots(in.ds, s, 1, spec.allow_any_shots); // feasibility probe
    return in;
}

std::string format_accuracy(double a) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", a);
    return buf;
}

CellResult run_cell(const ExperimentSpec& spec, const LoadedInputs& in, const std::string& method,
                    int shots, std::uint64_t seed, const fs::path& cell_dir) {
    CellResult cell;
    cell.method = method;
    cell.shots = shots;
    cell.seed = seed;
    try {
        TrainConfig tc = spec.train;
        tc.seed = seed;
        if (method == "coop") {
            const FewShotSplit split = sample_shots(in.ds, shots, seed, spec.allow_any_shots);
            CoopRun run = train_coop(in.ds, split, spec.prompt, in.vocab, in.encoder, tc);
            fs::create_directories(cell_dir);
            const fs::path ckpt = cell_dir / "context.ctxw";
            run.bank.save(ckpt.string());
            cell.result = std::move(run.result);
            cell.result.checkpoint_path = ckpt.string();
        } else if (method == "zeroshot") {
            cell.result = zero_shot(in.ds, in.vocab, in.encoder, in.templates);
        } else if (method == "ensemble") {
            cell.result =
                zero_shot(in.ds, in.vocab, in.encoder, in.ensemble_templates, spec.ensemble_mode);
        } else if (method == "linear-probe") {
            const FewShotSplit split = sample_shots(in.ds, shots, seed, spec.allow_any_shots);
            cell.result = train_linear_probe(in.ds, split, tc);
        } else if (method == "text-bias") {
            const FewShotSplit split = sample_shots(in.ds, shots, seed, spec.allow_any_shots);
            cell.result = train_text_bias(in.ds, split, in.vocab, in.encoder, tc);
        } else if (method == "text-transform") {
            const FewShotSplit split = sample_shots(in.ds, shots, seed, spec.allow_any_shots);
            cell.result = train_text_transform(in.ds, split, in.vocab, in.encoder, tc);
        }
        cell.result.method = method;
        cell.result.shots = shots;
        cell.result.seed = seed;

        fs::create_directories(cell_dir);
        std::ofstream out(cell_dir / "result.json");
        out << cell.result.to_json().dump(2) << "\n";
    } catch (const Error& e) {
        cell.error = e.what();
    }
    return cell;
}

} // namespace

ExperimentOutcome run_experiment(const ExperimentSpec& spec, std::size_t jobs, bool dry_run) {
    const LoadedInputs in = validate_and_load(spec);

    ExperimentOutcome outcome;
    const fs::path run_dir = fs::path(spec.output_dir) / "runs" / spec.hash();
    outcome.run_dir = run_dir.string();
    outcome.dry_run = dry_run;
    if (dry_run) return outcome;

    fs::create_directories(run_dir);
    {
        std::ofstream spec_out(run_dir / "spec.json");
        spec_out << spec.to_json().dump(2) << "\n";
    }

    struct CellKey {
        std::string method;
        int shots;
        std::uint64_t seed;
    };
    std::vector<CellKey> keys;
    for (const std::string& m : spec.methods)
        for (int s : spec.shots)
            for (std::uint64_t seed : spec.seeds) keys.push_back({m, s, seed});

    outcome.cells.resize(keys.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= keys.size()) return;
            const CellKey& k = keys[i];
            const fs::path cell_dir =
                run_dir / k.method / std::to_string(k.shots) / std::to_string(k.seed);
            outcome.cells[i] = run_cell(spec, in, k.method, k.shots, k.seed, cell_dir);
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min(jobs, keys.size()); ++t)
            pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    const std::string dataset_name = fs::path(spec.dataset_path).stem().string();
    std::ostringstream csv;
    csv << "dataset,method,shots,seed,accuracy\n";
    for (const std::string& m : spec.methods) {
        for (int s : spec.shots) {
            double sum = 0.0;
            std::size_t n = 0;
            for (const CellResult& cell : outcome.cells) {
                if (cell.method != m || cell.shots != s) continue;
                if (!cell.ok()) {
                    outcome.all_ok = false;
                    continue;
                }
                csv << dataset_name << "," << m << "," << s << "," << cell.seed << ","
                    << format_accuracy(cell.result.test_accuracy) << "\n";
                sum += cell.result.test_accuracy;
                ++n;
            }
            if (n > 0)
                csv << dataset_name << "," << m << "," << s << ",mean,"
                    << format_accuracy(sum / double(n)) << "\n";
        }
    }
    outcome.results_csv = csv.str();
    {
        std::ofstream csv_out(run_dir / "results.csv", std::ios::binary);
        csv_out << outcome.results_csv;
    }

    nlohmann::json summary;
    summary["spec_hash"] = spec.hash();
    nlohmann::json failures = nlohmann::json::array();
    for (const CellResult& cell : outcome.cells)
        if (!cell.ok())
            failures.push_back({{"method", cell.method},
                                {"shots", cell.shots},
                                {"seed", cell.seed},
                                {"error", cell.error}});
    summary["failures"] = std::move(failures);
    {
        std::ofstream sum_out(run_dir / "summary.json");
        sum_out << summary.dump(2) << "\n";
    }
    return outcome;
}

std::string pivot_results_csv(const std::vector<std::string>& results_csv_paths) {
    // (shots, method) -> accuracy taken from the "mean" rows
    std::map<int, std::map<std::string, double>> table;
    std::set<std::string> methods;
    for (const std::string& path : results_csv_paths) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open results csv: " + path);
        std::string line;
        if (!std::getline(in, line) || line != "dataset,method,shots,seed,accuracy")
            throw DataError("unexpected results csv header in: " + path);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> fields;
            std::stringstream ss(line);
            std::string field;
            while (std::getline(ss, field, ',')) fields.push_back(field);
            if (fields.size() != 5) throw DataError("malformed results row: " + line);
            if (fields[3] != "mean") continue;
            const int shots = std::stoi(fields[2]);
            table[shots][fields[1]] = std::stod(fields[4]);
            methods.insert(fields[1]);
        }
    }
    std::ostringstream out;
    out << "shots";
    for (const std::string& m : methods) out << "," << m;
    out << "\n";
    for (const auto& [shots, row] : table) {
        out << shots;
        for (const std::string& m : methods) {
            out << ",";
            auto it = row.find(m);
            if (it != row.end()) out << format_accuracy(it->second);
        }
        out << "\n";
    }
    return out.str();
}

} // namespace ctxopt
