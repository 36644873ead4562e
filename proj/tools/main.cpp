#include "convscm/dataio.hpp"
#include "convscm/error.hpp"
#include "convscm/evaluation.hpp"
#include "convscm/model.hpp"
#include "convscm/simgen.hpp"
#include "convscm/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace convscm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitAssert = 2;
constexpr int kExitUsage = 64;

std::string read_text(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw DataError("cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + p.string());
    os << text;
}

// Records what a command consumed and produced. Written next to its outputs; no wall-clock fields.
class Provenance {
public:
    Provenance(std::string command, int argc, char** argv) : command_(std::move(command)) {
        for (int i = 1; i < argc; ++i) args_.push_back(argv[i]);
    }

    void seed(std::uint64_t s) { seed_ = s; }
    void config(const std::string& json_text) { config_ = json::parse(json_text); }
    void input(const fs::path& p) { add(inputs_, p); }
    void output(const fs::path& p) { add(outputs_, p); }
    void note(const std::string& key, json value) { notes_[key] = std::move(value); }

    void write(const fs::path& p) const {
        json j{{"command", command_}, {"args", args_}, {"seed", seed_ ? json(*seed_) : json(nullptr)},
               {"config", config_}, {"inputs", inputs_}, {"outputs", outputs_}, {"results", notes_}};
        write_text(p, j.dump(2) + "\n");
    }

private:
    static void add(json& table, const fs::path& p) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(p))
                if (e.is_regular_file() && e.path().filename() != "provenance.json") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) table[f.string()] = sha256_file(f);
        } else {
            table[p.string()] = sha256_file(p);
        }
    }

    std::string command_;
    std::vector<std::string> args_;
    std::optional<std::uint64_t> seed_;
    json config_ = nullptr;
    json inputs_ = json::object();
    json outputs_ = json::object();
    json notes_ = json::object();
};

// Applies dotted key=value overrides (value parsed as JSON, else taken as a string).
std::string apply_overrides(const std::string& base, const std::vector<std::string>& sets) {
    json j = json::parse(base);
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ContractError("override '" + s + "' must look like key=value");
        const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        json* node = &j;
        std::string::size_type start = 0;
        for (;;) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot - start);
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
    return j.dump(2);
}

TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed) {
    std::string text = path.empty() ? TrainConfig{}.to_json() : read_text(path);
    text = apply_overrides(text, sets);
    TrainConfig cfg = TrainConfig::from_json(text);
    if (seed) cfg.seed = *seed;
    return cfg;
}

fs::path checkpoint_path(const fs::path& p) { return fs::is_directory(p) ? p / "model.ckpt" : p; }

const std::vector<Dialogue>& pick_split(const DatasetSplits& s, const std::string& name) {
    if (name == "train") return s.train;
    if (name == "eval") return s.eval;
    if (name == "test") return s.test;
    throw ContractError("unknown split '" + name + "'");
}

std::vector<Matrix> scores_of(const std::vector<DialoguePrediction>& preds) {
    std::vector<Matrix> out;
    for (const auto& p : preds) out.push_back(p.pair_scores);
    return out;
}

json discrim_json(const DiscriminabilityResult& r) {
    return {{"pos_f1", r.pos_f1}, {"neg_f1", r.neg_f1}, {"gap", r.gap()}, {"pos_count", r.pos_count}, {"neg_count", r.neg_count}};
}

std::vector<double> read_score_column(const fs::path& p, const std::string& column) {
    std::istringstream is(read_text(p));
    std::string line;
    std::vector<double> out;
    std::optional<std::size_t> col;
    std::size_t lineno = 0;
    auto split = [](const std::string& l) {
        std::vector<std::string> cells;
        std::stringstream ss(l);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        return cells;
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split(line);
        if (!col) {
            try {
                std::size_t used = 0;
                std::stod(cells.at(0), &used);
                if (used != cells[0].size()) throw std::invalid_argument("header");
                if (!column.empty()) throw DataError(p.string() + ": no header row to find column '" + column + "'");
                col = 0;
            } catch (const std::invalid_argument&) {
                const auto it = column.empty() ? cells.begin() : std::find(cells.begin(), cells.end(), column);
                if (it == cells.end()) throw DataError(p.string() + ": no column '" + column + "'");
                col = static_cast<std::size_t>(it - cells.begin());
                continue;
            }
        }
        try {
            out.push_back(std::stod(cells.at(*col)));
        } catch (const std::exception&) {
            throw DataError(p.string() + ":" + std::to_string(lineno) + ": not a number");
        }
    }
    return out;
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"Causal modelling of conversations: data generation, training and evaluation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    std::optional<std::uint64_t> seed;
    std::string config_path;
    std::vector<std::string> overrides;
    std::string prov_path;
    std::function<int()> action;
    std::string command;

    auto common = [&](CLI::App* sub, bool with_config) {
        sub->add_option("--seed", seed, "Root seed; every sub-seed is derived from it");
        sub->add_option("--provenance", prov_path, "Provenance record path");
        if (with_config) {
            sub->add_option("--config", config_path, "Training config JSON")->check(CLI::ExistingFile);
            sub->add_option("--set", overrides, "Config override key=value (dotted keys for model.*)");
        }
    };

    // gen-synthetic
    std::string out_dir, storage = "inline", kind = "synthetic";
    auto* gen = app.add_subcommand("gen-synthetic", "Generate the synthetic train/eval/test splits");
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--storage", storage, "Embedding storage")->check(CLI::IsMember({"inline", "sidecar"}));
    gen->add_option("--kind", kind, "Dataset kind")->check(CLI::IsMember({"synthetic", "confounded"}));
    std::optional<std::size_t> gen_train, gen_eval, gen_test, gen_dim;
    gen->add_option("--train", gen_train, "Train dialogues (default 833, confounded 1381)");
    gen->add_option("--eval", gen_eval, "Eval dialogues (default 47, confounded 100)");
    gen->add_option("--test", gen_test, "Test dialogues (default 225, confounded 200)");
    gen->add_option("--dim", gen_dim, "Embedding width (default 50)")->check(CLI::PositiveNumber);
    common(gen, false);
    gen->callback([&] {
        command = "gen-synthetic";
        action = [&] {
            const std::uint64_t s = seed.value_or(0);
            auto sized = [&](auto spec) {
                spec.train_size = gen_train.value_or(spec.train_size);
                spec.eval_size = gen_eval.value_or(spec.eval_size);
                spec.test_size = gen_test.value_or(spec.test_size);
                spec.dim = gen_dim.value_or(spec.dim);
                return spec;
            };
            const DatasetSplits data = kind == "synthetic" ? generate_synthetic_dataset(sized(SyntheticSpec{}), s)
                                                           : generate_confounded_dataset(sized(ConfoundedSpec{}), s);
            const auto store = storage == "sidecar" ? EmbeddingStorage::sidecar : EmbeddingStorage::inline_rows;
            const Manifest m = write_splits(data, out_dir, s, store);
            Provenance prov(command, argc, argv);
            prov.seed(s);
            prov.output(out_dir);
            prov.note("content_hash", m.content_hash);
            prov.write(prov_path.empty() ? fs::path(out_dir) / "provenance.json" : fs::path(prov_path));
            std::printf("wrote %zu/%zu/%zu dialogues to %s (content %s)\n", data.train.size(), data.eval.size(),
                        data.test.size(), out_dir.c_str(), m.content_hash.c_str());
            return kExitOk;
        };
    });

    // simgen
    std::string backend_kind = "canned", script_path, journal_path, endpoint, model_name;
    std::size_t concurrency = 4, sim_train = 1381, sim_eval = 100, sim_test = 200, sim_dim = 50;
    auto* sim = app.add_subcommand("simgen", "Generate skeleton-controlled dialogues through a chat backend");
    sim->add_option("--out", out_dir, "Output directory")->required();
    sim->add_option("--backend", backend_kind, "Chat backend")->check(CLI::IsMember({"canned", "http"}));
    sim->add_option("--script", script_path, "Canned responses JSON object keyed skeleton/turn")->check(CLI::ExistingFile);
    sim->add_option("--journal", journal_path, "Transcript journal (default OUT/journal.jsonl)");
    sim->add_option("--concurrency", concurrency, "In-flight requests")->check(CLI::PositiveNumber);
    sim->add_option("--train", sim_train, "Train dialogues");
    sim->add_option("--eval", sim_eval, "Eval dialogues");
    sim->add_option("--test", sim_test, "Test dialogues");
    sim->add_option("--dim", sim_dim, "Fallback embedding width")->check(CLI::PositiveNumber);
    sim->add_option("--endpoint", endpoint, "Chat-completion URL (http backend)");
    sim->add_option("--model", model_name, "Model name (http backend)");
    common(sim, false);
    sim->callback([&] {
        command = "simgen";
        action = [&] {
            const std::uint64_t s = seed.value_or(0);
            std::unique_ptr<ChatBackend> backend;
            if (backend_kind == "canned") {
                std::map<std::string, std::string> script = default_canned_script();
                if (!script_path.empty()) script = json::parse(read_text(script_path)).get<std::map<std::string, std::string>>();
                backend = std::make_unique<CannedBackend>(std::move(script));
            } else {
                HttpBackendConfig hc;
                if (!endpoint.empty()) hc.url = endpoint;
                if (!model_name.empty()) hc.model = model_name;
                backend = make_http_backend(hc);
            }
            fs::create_directories(out_dir);
            Journal journal(journal_path.empty() ? fs::path(out_dir) / "journal.jsonl" : fs::path(journal_path));
            SimulatedBatchConfig cfg;
            cfg.train_size = sim_train;
            cfg.eval_size = sim_eval;
            cfg.test_size = sim_test;
            cfg.concurrency = concurrency;
            cfg.options.embedding_dim = sim_dim;
            const SimulatedBatch batch = generate_simulated_dataset(cfg, default_personas(), *backend, s, &journal);
            const Manifest m = write_splits(batch.splits, out_dir, s, EmbeddingStorage::inline_rows);
            Provenance prov(command, argc, argv);
            prov.seed(s);
            if (!script_path.empty()) prov.input(script_path);
            prov.output(out_dir);
            prov.note("discarded", batch.discarded);
            prov.note("content_hash", m.content_hash);
            prov.write(prov_path.empty() ? fs::path(out_dir) / "provenance.json" : fs::path(prov_path));
            std::printf("wrote %zu/%zu/%zu dialogues to %s, %zu discarded\n", batch.splits.train.size(),
                        batch.splits.eval.size(), batch.splits.test.size(), out_dir.c_str(), batch.discarded.size());
            return kExitOk;
        };
    });

    // train
    std::string data_dir, ckpt;
    std::size_t runs = 1;
    auto* tr = app.add_subcommand("train", "Train a model (or a multi-seed batch with --runs)");
    tr->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--ckpt", ckpt, "Output directory for checkpoints and logs")->required();
    tr->add_option("--runs", runs, "Independent seeded runs; >1 reports mean±std")->check(CLI::PositiveNumber);
    common(tr, true);
    tr->callback([&] {
        command = "train";
        action = [&] {
            const TrainConfig cfg = load_train_config(config_path, overrides, seed);
            const DatasetSplits data = read_splits(data_dir);
            fs::create_directories(ckpt);
            const fs::path dir(ckpt);
            write_text(dir / "train_config.json", cfg.to_json() + "\n");
            Provenance prov(command, argc, argv);
            prov.seed(cfg.seed);
            prov.config(cfg.to_json());
            prov.input(fs::path(data_dir) / "manifest.json");
            if (runs > 1) {
                MultiRunOptions mo;
                mo.runs = runs;
                const MultiRunResult r = multi_run(data, cfg, mo);
                r.write_csv(dir / "runs.csv");
                std::printf("%s\n", r.table_row().c_str());
                prov.note("table_row", r.table_row());
            } else {
                TrainHooks hooks;
                hooks.on_epoch = [](const EpochRecord& e) {
                    std::fprintf(stderr, "epoch %zu loss %.4f eval ECE F1 %.2f\n", e.epoch, e.total, e.eval_ece_f1);
                };
                const TrainResult r = train(data.train, data.eval, cfg, hooks);
                save_checkpoint(r.best, dir / "model.ckpt");
                save_checkpoint(r.last, dir / "last.ckpt");
                r.history.write_csv(dir / "history.csv");
                prov.note("best_epoch", r.best_epoch);
                std::printf("best epoch %zu, eval ECE F1 %.2f\n", r.best_epoch,
                            r.history.epochs.empty() ? 0.0 : r.history.epochs[r.best_epoch ? r.best_epoch - 1 : 0].eval_ece_f1);
            }
            prov.output(dir);
            prov.write(prov_path.empty() ? dir / "provenance.json" : fs::path(prov_path));
            return kExitOk;
        };
    });

    // eval
    std::string task = "all", split = "test", report_path, strength_csv;
    bool do_assert = false;
    double min_ece = 78.0, min_ice = 90.0, threshold = 0.5;
    auto* ev = app.add_subcommand("eval", "Score a checkpoint: ECE and/or ICE F1");
    ev->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--ckpt", ckpt, "Checkpoint file or training directory")->required()->check(CLI::ExistingPath);
    ev->add_option("--task", task, "Metric")->check(CLI::IsMember({"ece", "ice", "all"}));
    ev->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "eval", "test"}));
    ev->add_option("--threshold", threshold, "Pair decision threshold")->check(CLI::Range(0.0, 1.0));
    ev->add_option("--report", report_path, "Report JSON path")->required();
    ev->add_option("--strength-csv", strength_csv, "Also export row-normalized causal strength");
    ev->add_flag("--assert", do_assert, "Exit 2 when a metric misses its threshold");
    ev->add_option("--min-ece", min_ece, "ECE F1 threshold for --assert");
    ev->add_option("--min-ice", min_ice, "ICE F1 threshold for --assert");
    common(ev, false);
    ev->callback([&] {
        command = "eval";
        action = [&] {
            const VgaeModel model = load_checkpoint(checkpoint_path(ckpt));
            const DatasetSplits data = read_splits(data_dir);
            const auto& ds = pick_split(data, split);
            const auto preds = predict_all(model, ds);
            EvalReport rep;
            rep.threshold = threshold;
            rep.candidate_rule = to_string(CandidateRule::automatic);
            std::vector<std::string> failures;
            if (task != "ice") {
                rep.ece_f1 = ece_scores(preds, ds, threshold).f1;
                if (do_assert && rep.ece_f1 < min_ece) failures.push_back("ECE F1 below " + std::to_string(min_ece));
            }
            if (task != "ece") {
                const IceResult ice = ice_scores(model, preds, ds);
                rep.ice_f1 = ice.f1;
                rep.interpretable = ice.interpretable;
                if (do_assert && (ice.f1 < min_ice || !ice.interpretable))
                    failures.push_back("ICE F1 below " + std::to_string(min_ice) + " or not interpretable");
            }
            write_text(report_path, rep.to_json() + "\n");
            Provenance prov(command, argc, argv);
            prov.config(config_to_json(model.config()));
            prov.input(checkpoint_path(ckpt));
            prov.input(fs::path(data_dir) / "manifest.json");
            if (!strength_csv.empty()) {
                write_strength_csv(preds, ds, strength_csv);
                prov.output(strength_csv);
            }
            prov.output(report_path);
            prov.note("failures", failures);
            prov.write(prov_path.empty() ? fs::path(report_path + ".provenance.json") : fs::path(prov_path));
            std::printf("%s\n", rep.to_json().c_str());
            if (!failures.empty()) {
                for (const auto& f : failures) std::fprintf(stderr, "assert failed: %s\n", f.c_str());
                return kExitAssert;
            }
            return kExitOk;
        };
    });

    // discrim
    std::string construction = "all";
    auto* di = app.add_subcommand("discrim", "Causal discriminability: positive vs constructed negative pairs");
    di->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    di->add_option("--ckpt", ckpt, "Checkpoint file or training directory")->required()->check(CLI::ExistingPath);
    di->add_option("--construction", construction, "Negative construction")
        ->check(CLI::IsMember({"reversal", "chain", "common_cause", "all"}));
    di->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "eval", "test"}));
    di->add_option("--threshold", threshold, "Pair decision threshold")->check(CLI::Range(0.0, 1.0));
    di->add_option("--report", report_path, "Report JSON path")->required();
    common(di, false);
    di->callback([&] {
        command = "discrim";
        action = [&] {
            const VgaeModel model = load_checkpoint(checkpoint_path(ckpt));
            const DatasetSplits data = read_splits(data_dir);
            const auto& ds = pick_split(data, split);
            const auto scores = scores_of(predict_all(model, ds));
            json out = json::object();
            const std::vector<Construction> all{Construction::reversal, Construction::chain, Construction::common_cause};
            for (Construction c : all) {
                if (construction != "all" && construction != to_string(c)) continue;
                try {
                    out[to_string(c)] = discrim_json(discriminability(scores, ds, c, threshold));
                } catch (const ContractError& e) {
                    if (construction != "all") throw;
                    out[to_string(c)] = {{"skipped", e.what()}};
                }
            }
            out["threshold"] = threshold;
            write_text(report_path, out.dump(2) + "\n");
            Provenance prov(command, argc, argv);
            prov.input(checkpoint_path(ckpt));
            prov.input(fs::path(data_dir) / "manifest.json");
            prov.output(report_path);
            prov.write(prov_path.empty() ? fs::path(report_path + ".provenance.json") : fs::path(prov_path));
            std::printf("%s\n", out.dump(2).c_str());
            return kExitOk;
        };
    });

    // confound
    std::string baseline;
    auto* co = app.add_subcommand("confound", "Count spurious (U4, U2) predictions on Chain I dialogues");
    co->add_option("--data", data_dir, "Dataset directory with skeleton tags")->required()->check(CLI::ExistingDirectory);
    co->add_option("--ckpt", ckpt, "Checkpoint file or training directory")->required()->check(CLI::ExistingPath);
    co->add_option("--baseline", baseline, "Second checkpoint to compare")->check(CLI::ExistingPath);
    co->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "eval", "test"}));
    co->add_option("--threshold", threshold, "Pair decision threshold")->check(CLI::Range(0.0, 1.0));
    co->add_option("--report", report_path, "Report JSON path")->required();
    common(co, false);
    co->callback([&] {
        command = "confound";
        action = [&] {
            const DatasetSplits data = read_splits(data_dir);
            const auto& ds = pick_split(data, split);
            auto count = [&](const std::string& path) {
                return confounder_errors(scores_of(predict_all(load_checkpoint(checkpoint_path(path)), ds)), ds, threshold);
            };
            json out{{"model", count(ckpt)}, {"threshold", threshold}};
            Provenance prov(command, argc, argv);
            prov.input(checkpoint_path(ckpt));
            if (!baseline.empty()) {
                out["baseline"] = count(baseline);
                prov.input(checkpoint_path(baseline));
            }
            write_text(report_path, out.dump(2) + "\n");
            prov.input(fs::path(data_dir) / "manifest.json");
            prov.output(report_path);
            prov.write(prov_path.empty() ? fs::path(report_path + ".provenance.json") : fs::path(prov_path));
            std::printf("%s\n", out.dump(2).c_str());
            return kExitOk;
        };
    });

    // project
    std::string out_csv;
    std::vector<std::size_t> snap_epochs{1, 60};
    auto* pr = app.add_subcommand("project", "Train with latent snapshots and export a 2-D PCA projection");
    pr->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    pr->add_option("--out", out_csv, "Projection CSV path")->required();
    pr->add_option("--epochs", snap_epochs, "Snapshot epochs (0 = before training)")->delimiter(',');
    pr->add_option("--split", split, "Dialogues to snapshot")->check(CLI::IsMember({"train", "eval", "test"}));
    common(pr, true);
    pr->callback([&] {
        command = "project";
        action = [&] {
            const TrainConfig cfg = load_train_config(config_path, overrides, seed);
            const DatasetSplits data = read_splits(data_dir);
            TrainHooks hooks;
            hooks.snapshot_set = &pick_split(data, split);
            hooks.snapshot_epochs = snap_epochs;
            const TrainResult r = train(data.train, data.eval, cfg, hooks);
            write_projection_csv(latent_projection_export(r.snapshots), out_csv);
            json sil = json::object();
            for (const auto& s : r.snapshots) {
                const double v = silhouette(pca_project(s.rows).coords, s.labels);
                sil[std::to_string(s.epoch)] = v;
                std::printf("epoch %zu silhouette %.4f\n", s.epoch, v);
            }
            Provenance prov(command, argc, argv);
            prov.seed(cfg.seed);
            prov.config(cfg.to_json());
            prov.input(fs::path(data_dir) / "manifest.json");
            prov.output(out_csv);
            prov.note("silhouette", sil);
            prov.write(prov_path.empty() ? fs::path(out_csv + ".provenance.json") : fs::path(prov_path));
            return kExitOk;
        };
    });

    // ttest
    std::string a_path, b_path, column, tt_out;
    double alpha = 0.05;
    auto* tt = app.add_subcommand("ttest", "Paired two-sided t-test between two score files");
    tt->add_option("--a", a_path, "Scores of system A (one per line, or CSV with header)")->required()->check(CLI::ExistingFile);
    tt->add_option("--b", b_path, "Scores of system B")->required()->check(CLI::ExistingFile);
    tt->add_option("--column", column, "CSV column to compare");
    tt->add_option("--alpha", alpha, "Significance level")->check(CLI::Range(0.0, 1.0));
    tt->add_option("--out", tt_out, "Result JSON path");
    common(tt, false);
    tt->callback([&] {
        command = "ttest";
        action = [&] {
            const auto a = read_score_column(a_path, column);
            const auto b = read_score_column(b_path, column);
            const TTestResult r = paired_t_test(a, b, alpha);
            const json out{{"t", r.t}, {"p", r.p}, {"dof", r.dof}, {"mean_diff", r.mean_diff},
                           {"significant", r.significant}, {"degenerate", r.degenerate}, {"alpha", alpha}};
            std::printf("t = %.6g\np = %.6g\ndof = %zu\nmean_diff = %.6g\nsignificant = %s%s\n", r.t, r.p, r.dof,
                        r.mean_diff, r.significant ? "yes" : "no", r.degenerate ? " (zero-variance differences)" : "");
            if (!tt_out.empty() || !prov_path.empty()) {
                Provenance prov(command, argc, argv);
                prov.input(a_path);
                prov.input(b_path);
                prov.note("ttest", out);
                if (!tt_out.empty()) {
                    write_text(tt_out, out.dump(2) + "\n");
                    prov.output(tt_out);
                }
                prov.write(prov_path.empty() ? fs::path(tt_out + ".provenance.json") : fs::path(prov_path));
            }
            return kExitOk;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }
    return action();
}

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitContract;
    }
}
