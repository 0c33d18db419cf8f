#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "decouple/checkpoint.hpp"
#include "decouple/corpus.hpp"
#include "decouple/error.hpp"
#include "decouple/evaluation.hpp"
#include "decouple/experiment.hpp"
#include "decouple/random.hpp"
#include "decouple/synth.hpp"
#include "decouple/trainer.hpp"
#include "decouple/verify.hpp"

#ifndef DECOUPLE_VERSION
#define DECOUPLE_VERSION "0.0.0"
#endif

namespace decouple::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string now_iso(bool fixed) {
    if (fixed) {
        return "1970-01-01T00:00:00Z";
    }
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hex(std::uint64_t h) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

/// Options shared by every subcommand.
struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool fixed_timestamp = false;
};

/// Defaults, then the config file, then flags. DECOUPLE_SEED stands in for a
/// seed only when neither the file nor the command line provides one.
ExperimentConfig resolve_config(const Common& c) {
    ExperimentConfig cfg;
    bool file_seed = false;
    if (!c.config_path.empty()) {
        const auto text = read_text(c.config_path);
        try {
            file_seed = json::parse(text).contains("seed");
        } catch (const json::exception& e) {
            throw ConfigError(c.config_path + ": " + e.what());
        }
        cfg.merge_json(text);
    }
    if (c.seed) {
        cfg.set_seed(*c.seed);
    } else if (!file_seed) {
        if (const char* env = std::getenv("DECOUPLE_SEED"); env != nullptr && *env != '\0') {
            char* end = nullptr;
            const auto v = std::strtoull(env, &end, 10);
            if (*end != '\0') {
                throw ConfigError(std::string("DECOUPLE_SEED is not an unsigned integer: ") + env);
            }
            cfg.set_seed(v);
        }
    }
    cfg.validate();
    return cfg;
}

/// Run record, rewritten atomically at start and at the end of a run.
class Manifest {
public:
    Manifest(std::string command, const std::vector<std::string>& argv, const Common& c, const ExperimentConfig& cfg)
        : dir_(c.out), fixed_(c.fixed_timestamp) {
        doc_["command"] = std::move(command);
        doc_["argv"] = argv;
        doc_["tool_version"] = DECOUPLE_VERSION;
        doc_["seed"] = cfg.synth.seed;
        doc_["config"] = ordered_json::parse(cfg.to_json());
        doc_["inputs"] = ordered_json::object();
        doc_["outputs"] = ordered_json::object();
        doc_["started_at"] = now_iso(fixed_);
        doc_["finished_at"] = nullptr;
        doc_["status"] = "running";
    }

    void input(const fs::path& path) { doc_["inputs"][path.generic_string()] = hex(file_hash(path)); }
    void output(const fs::path& path) {
        doc_["outputs"][fs::relative(path, dir_).generic_string()] = hex(file_hash(path));
    }
    void outputs_under(const fs::path& dir) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().filename() != "manifest.json") {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            output(f);
        }
    }
    void set(const std::string& key, ordered_json value) { doc_[key] = std::move(value); }

    void write() const {
        fs::create_directories(dir_);
        write_file_atomic(dir_ / "manifest.json", doc_.dump(2) + "\n");
    }
    void finish(const std::string& status) {
        doc_["status"] = status;
        doc_["finished_at"] = now_iso(fixed_);
        write();
    }

private:
    fs::path dir_;
    bool fixed_;
    ordered_json doc_;
};

/// "auto" picks personachat when the first record of the file carries a
/// knowledge field and plain otherwise.
Schema resolve_schema(const std::string& name, const fs::path& file) {
    if (name != "auto") {
        return parse_schema(name);
    }
    std::ifstream in(file, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto record = json::parse(line, nullptr, false);
        return record.is_object() && record.contains("knowledge") ? Schema::PersonaChatLike : Schema::Plain;
    }
    return Schema::Plain;
}

struct Dataset {
    Vocabulary vocab;
    Corpus train, valid, test;
    std::vector<Example> train_examples, valid_examples, test_examples;
    std::vector<TokenSeq> knowledge_collection;
};

/// Loads a dataset directory: train.jsonl (required), valid.jsonl and
/// test.jsonl (optional), vocab.txt and knowledge.txt (optional). Without
/// vocab.txt the vocabulary is rebuilt from train.jsonl.
Dataset load_dataset(const fs::path& dir, const std::string& schema_name, std::size_t vocab_size,
                     Manifest& manifest) {
    const auto train_path = dir / "train.jsonl";
    if (!fs::exists(train_path)) {
        throw IoError("dataset directory has no train.jsonl: " + dir.string());
    }
    const Schema schema = resolve_schema(schema_name, train_path);
    Dataset d;
    const auto train_text = read_dialogues(train_path, schema);
    manifest.input(train_path);
    if (fs::exists(dir / "vocab.txt")) {
        d.vocab = Vocabulary::load(dir / "vocab.txt");
        manifest.input(dir / "vocab.txt");
    } else {
        d.vocab = build_vocab(corpus_texts(train_text), vocab_size + special::kCount);
    }
    d.train = encode_corpus(train_text, d.vocab, "train");
    d.train_examples = make_examples(d.train.dialogues);
    for (auto [name, corpus, examples] : {std::tuple{"valid", &d.valid, &d.valid_examples},
                                          std::tuple{"test", &d.test, &d.test_examples}}) {
        const auto path = dir / (std::string(name) + ".jsonl");
        if (fs::exists(path)) {
            *corpus = load_dialogues(path, schema, d.vocab);
            *examples = make_examples(corpus->dialogues);
            manifest.input(path);
        }
    }
    if (fs::exists(dir / "knowledge.txt")) {
        for (const auto& s : read_knowledge_file(dir / "knowledge.txt")) {
            d.knowledge_collection.push_back(d.vocab.encode_tokens(s));
        }
        manifest.input(dir / "knowledge.txt");
    } else {
        d.knowledge_collection = d.train.knowledge.sentences;
    }
    return d;
}

void write_synthetic(const SplitData& data, const fs::path& dir) {
    fs::create_directories(dir);
    write_dialogues(dir / "train.jsonl", data.train_text.dialogues);
    write_dialogues(dir / "valid.jsonl", data.valid_text.dialogues);
    write_dialogues(dir / "test.jsonl", data.test_text.dialogues);
    write_knowledge_file(dir / "knowledge.txt", data.train_text.knowledge);
    data.vocab.save(dir / "vocab.txt");
}

ModelConfig model_for(const ExperimentConfig& cfg, const Vocabulary& vocab) {
    ModelConfig m = cfg.model;
    m.vocab_size = vocab.size();
    m.validate();
    return m;
}

ordered_json overlap_json(const OverlapStats& s) {
    return {{"recall", s.recall}, {"precision", s.precision}, {"f1", s.f1}};
}

void add_common(CLI::App* sub, Common& c, const std::string& default_out) {
    sub->add_option("--config", c.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "master seed (falls back to DECOUPLE_SEED)");
    c.out = default_out;
    sub->add_option("--out", c.out, "output directory")->capture_default_str();
    sub->add_flag("--fixed-timestamp", c.fixed_timestamp, "write the epoch instead of wall-clock timestamps");
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Knowledge decoupling for dialogue response generation"};
    app.name("decouple");
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", DECOUPLE_VERSION);

    Common common;
    std::string data_dir = "data";
    std::string schema_name = "auto";
    std::string method_name_opt;
    std::vector<std::string> method_list;
    std::string lm_path;
    std::string checkpoint_path;
    std::string lengths_csv;
    std::string split = "test";
    bool skip_calibration = false;
    std::string data_file;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic train/valid/test dataset");
    add_common(gen, common, "data");

    auto* pre = app.add_subcommand("pretrain-lm", "pretrain and freeze the knowledge LM");
    add_common(pre, common, "runs/pretrain-lm");

    auto* train = app.add_subcommand("train", "train one method");
    add_common(train, common, "runs/train");
    train->add_option("--method", method_name_opt, "decoupling|full|tenlen|vanilla|reallm")->required();
    train->add_option("--lm", lm_path, "frozen knowledge LM checkpoint (decoupling)")->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "knowledge-gap sweep of one checkpoint");
    add_common(eval, common, "runs/eval");
    eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--lengths", lengths_csv, "knowledge lengths, e.g. 0,2,4,full");
    eval->add_option("--method", method_name_opt, "method tag written into the report");
    eval->add_option("--split", split, "valid|test")->check(CLI::IsMember({"valid", "test"}))->capture_default_str();

    for (auto* sub : {pre, train, eval}) {
        sub->add_option("--data", data_dir, "dataset directory")->capture_default_str();
        sub->add_option("--schema", schema_name, "auto|plain|personachat|wow")->capture_default_str();
    }

    auto* sweep = app.add_subcommand("sweep", "generate data, train every method, evaluate and report");
    add_common(sweep, common, "runs/sweep");
    sweep->add_option("--method", method_list, "restrict to these methods (repeatable)");
    sweep->add_option("--lengths", lengths_csv, "knowledge lengths, e.g. 0,2,4,full");

    auto* ver = app.add_subcommand("verify", "run the oracle suite and print a JSON report");
    add_common(ver, common, "runs/verify");
    ver->add_flag("--skip-calibration", skip_calibration, "skip the hits@1 chance-level check");

    auto* overlap = app.add_subcommand("overlap-stats", "unigram overlap between history and knowledge");
    add_common(overlap, common, "runs/overlap-stats");
    overlap->add_option("--data", data_file, "JSONL dialogue file; default sweeps the synthetic leak rate");
    overlap->add_option("--schema", schema_name, "auto|plain|personachat|wow")->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::CallForVersion&) {
        out << DECOUPLE_VERSION << "\n";
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        if (!app.get_subcommands().empty()) {
            err << app.get_subcommands().front()->help();
        } else {
            err << app.help();
        }
        return kUsage;
    }

    auto* cmd = app.get_subcommands().front();
    const std::string command = cmd->get_name();
    auto progress = [&](const std::string& msg) { err << "[" << command << "] " << msg << std::endl; };

    std::optional<Manifest> manifest;
    try {
        ExperimentConfig cfg = resolve_config(common);
        if (!lengths_csv.empty()) {
            cfg.eval.lengths = parse_lengths(lengths_csv);
        }
        if (!method_list.empty()) {
            cfg.methods.clear();
            for (const auto& m : method_list) {
                cfg.methods.push_back(parse_method(m));
            }
        }
        const fs::path out_dir = common.out;
        manifest.emplace(command, args, common, cfg);
        manifest->write();

        if (cmd == gen) {
            const auto data = prepare_synthetic(cfg);
            write_synthetic(data, out_dir);
            const auto stats = knowledge_overlap_stats(data.train.dialogues);
            ordered_json summary{{"train_dialogues", data.train.dialogues.size()},
                                 {"valid_dialogues", data.valid.dialogues.size()},
                                 {"test_dialogues", data.test.dialogues.size()},
                                 {"knowledge_sentences", data.train.knowledge.sentences.size()},
                                 {"vocab_size", data.vocab.size()},
                                 {"overlap", overlap_json(stats)}};
            out << summary.dump(2) << "\n";
            manifest->outputs_under(out_dir);
        } else if (cmd == pre) {
            const auto d = load_dataset(data_dir, schema_name, cfg.synth.vocab_size, *manifest);
            if (d.knowledge_collection.empty()) {
                throw ConfigError("pretrain-lm needs a knowledge collection: no 'knowledge' in train.jsonl and no "
                                  "knowledge.txt");
            }
            const auto model = model_for(cfg, d.vocab);
            progress("training on " + std::to_string(d.knowledge_collection.size()) + " sentences");
            const auto lm = pretrain_knowledge_lm(d.knowledge_collection, model, cfg.lm, d.valid.knowledge.sentences);
            fs::create_directories(out_dir);
            save_checkpoint(out_dir / "lm.ckpt", lm.params, d.vocab.hash());
            ordered_json summary{{"heldout_ppl", lm.heldout_ppl},
                                 {"heldout", d.valid.knowledge.sentences.empty() ? "train" : "valid"},
                                 {"final_loss", lm.losses.empty() ? 0.0 : lm.losses.back()},
                                 {"parameters", lm.params.size()}};
            write_file_atomic(out_dir / "lm.json", summary.dump(2) + "\n");
            out << summary.dump(2) << "\n";
            manifest->outputs_under(out_dir);
        } else if (cmd == train) {
            const Method method = parse_method(method_name_opt);
            const auto d = load_dataset(data_dir, schema_name, cfg.synth.vocab_size, *manifest);
            const auto tc = cfg.train_for(method);
            std::optional<Parameters> lm;
            if (!lm_path.empty()) {
                lm = load_checkpoint(lm_path, d.vocab.hash());
                lm->freeze();
                manifest->input(lm_path);
            }
            check_method_data(tc, d.train_examples, lm ? &*lm : nullptr);
            const auto model = model_for(cfg, d.vocab);
            fs::create_directories(out_dir);
            d.vocab.save(out_dir / "vocab.txt");
            RunOptions ro{out_dir, d.vocab.hash(), common.fixed_timestamp, {}};
            ro.on_log = [&](const TrainLogRecord& r) {
                if (r.valid_ppl) {
                    progress("step " + std::to_string(r.step) + " valid ppl " + std::to_string(*r.valid_ppl));
                }
            };
            const auto run = run_training({d.train_examples, d.valid_examples}, model, tc, lm ? &*lm : nullptr, ro);
            ordered_json summary{{"method", method_name(method)},
                                 {"best_step", run.best_step},
                                 {"best_valid_ppl", run.best_valid_ppl},
                                 {"initial_valid_ppl", run.initial_valid_ppl},
                                 {"steps", run.log.size()}};
            out << summary.dump(2) << "\n";
            manifest->outputs_under(out_dir);
        } else if (cmd == eval) {
            const auto d = load_dataset(data_dir, schema_name, cfg.synth.vocab_size, *manifest);
            const auto params = load_checkpoint(checkpoint_path, d.vocab.hash());
            manifest->input(checkpoint_path);
            const auto& all = split == "valid" ? d.valid_examples : d.test_examples;
            if (all.empty()) {
                throw ConfigError("eval: dataset has no " + split + ".jsonl");
            }
            std::vector<Example> examples = all;
            if (cfg.eval.max_examples > 0 && examples.size() > cfg.eval.max_examples) {
                examples.resize(cfg.eval.max_examples);
            }
            SweepOptions so{HitsOptions{cfg.eval.n_candidates, cfg.eval.seed, false}, cfg.eval.max_decode_len};
            const std::string tag = method_name_opt.empty() ? "model" : method_name_opt;
            EvalReport report;
            report.curves = gap_sweep(params, examples, cfg.eval.lengths, cfg.eval.metrics, so, tag, split);
            emit_report(report, out_dir, common.fixed_timestamp);
            out << read_text(out_dir / "curves.csv");
            manifest->outputs_under(out_dir);
        } else if (cmd == sweep) {
            const auto data = prepare_synthetic(cfg);
            write_synthetic(data, out_dir / "data");
            for (const auto* f : {"train.jsonl", "valid.jsonl", "test.jsonl"}) {
                manifest->input(out_dir / "data" / f);
            }
            progress("train " + std::to_string(data.train_examples.size()) + " examples, test " +
                     std::to_string(data.test_examples.size()) + ", vocab " + std::to_string(data.vocab.size()));
            const auto result = run_sweep(cfg, data, out_dir, common.fixed_timestamp, progress);
            ordered_json methods = ordered_json::array();
            for (const auto& m : result.methods) {
                methods.push_back({{"method", method_name(m.method)},
                                   {"best_step", m.best_step},
                                   {"best_valid_ppl", m.best_valid_ppl},
                                   {"seconds", common.fixed_timestamp ? 0.0 : m.seconds}});
            }
            manifest->set("methods", methods);
            out << read_text(out_dir / "report" / "curves.csv");
            manifest->outputs_under(out_dir);
        } else if (cmd == ver) {
            std::uint64_t seed = common.seed.value_or(cfg.synth.seed);
            const auto results = run_verify_suite(seed, !skip_calibration);
            const auto report = verify_report_json(results);
            fs::create_directories(out_dir);
            write_file_atomic(out_dir / "verify.json", report.dump(2) + "\n");
            out << report.dump(2) << "\n";
            manifest->outputs_under(out_dir);
            const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
            manifest->finish(ok ? "ok" : "failed");
            return ok ? kOk : kFailure;
        } else if (cmd == overlap) {
            ordered_json report;
            if (!data_file.empty()) {
                const auto text = read_dialogues(data_file, resolve_schema(schema_name, data_file));
                manifest->input(data_file);
                const auto vocab = build_vocab(corpus_texts(text), std::numeric_limits<std::size_t>::max() / 2);
                const auto corpus = encode_corpus(text, vocab);
                report["dataset"] = data_file;
                report["dialogues"] = corpus.dialogues.size();
                report["overlap"] = overlap_json(knowledge_overlap_stats(corpus.dialogues));
            } else {
                ordered_json rows = ordered_json::array();
                for (double h : {0.0, 0.25, 0.5, 0.75, 1.0}) {
                    SynthConfig sc = cfg.synth;
                    sc.history_leak_rate = h;
                    const auto text = synthesize_corpus(sc);
                    const auto vocab = build_vocab(corpus_texts(text), sc.vocab_size + special::kCount);
                    const auto corpus = encode_corpus(text, vocab);
                    auto row = overlap_json(knowledge_overlap_stats(corpus.dialogues));
                    row["history_leak_rate"] = h;
                    rows.push_back(row);
                }
                report["dataset"] = "synthetic";
                report["grid"] = rows;
            }
            fs::create_directories(out_dir);
            write_file_atomic(out_dir / "overlap.json", report.dump(2) + "\n");
            out << report.dump(2) << "\n";
            manifest->outputs_under(out_dir);
        }
        manifest->finish("ok");
        return kOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        if (manifest) {
            manifest->finish("config error");
        }
        return kConfig;
    } catch (const ValidationError& e) {
        err << "data error: " << e.what() << "\n";
        if (manifest) {
            manifest->finish("data error");
        }
        return kData;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        if (manifest) {
            manifest->finish("io error");
        }
        return kIo;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        if (manifest) {
            manifest->finish("failed");
        }
        return kFailure;
    }
}

}  // namespace decouple::cli
