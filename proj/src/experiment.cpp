#include "decouple/experiment.hpp"

#include <chrono>

#include <json.hpp>

#include "decouple/checkpoint.hpp"
#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

template <typename T>
void take(const json& obj, const char* section, const char* key, T& out) {
    if (!obj.contains(key)) {
        return;
    }
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string(section) + "." + key + " has the wrong type");
    }
}

void reject_unknown(const json& obj, const char* section, std::initializer_list<const char*> known) {
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* k : known) {
            ok = ok || key == k;
        }
        if (!ok) {
            throw ConfigError(std::string("unknown field '") + section + "." + key + "'");
        }
    }
}

const json& section_object(const json& root, const char* name) {
    const auto& s = root.at(name);
    if (!s.is_object()) {
        throw ConfigError(std::string("config section '") + name + "' must be an object");
    }
    return s;
}

std::vector<Example> head(const std::vector<Example>& v, std::size_t n) {
    if (n == 0 || n >= v.size()) {
        return v;
    }
    return std::vector<Example>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    train.batch_size = 16;
    train.learning_rate = 2e-3;
    train.max_steps = 3000;
    train.eval_every = 500;
    train.valid_examples = 300;
    lm.batch_size = 32;
    lm.learning_rate = 2e-3;
    lm.max_steps = 600;
    lm.valid_examples = 0;
}

void ExperimentConfig::validate() const {
    synth.validate();
    train.validate();
    lm.validate();
    if (valid_dialogues == 0 || test_dialogues == 0) {
        throw ConfigError("splits: valid and test need at least one dialogue");
    }
    if (methods.empty()) {
        throw ConfigError("methods: at least one method is required");
    }
    if (eval.metrics.empty()) {
        throw ConfigError("eval.metrics: empty metric set");
    }
    for (const auto& [name, text] : method_overrides) {
        parse_method(name);
        parse_train_config(text, train);
    }
    ModelConfig m = model;
    m.vocab_size = special::kCount + 1;
    m.validate();
}

void ExperimentConfig::merge_json(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (!root.is_object()) {
        throw ConfigError("config: expected a JSON object");
    }
    reject_unknown(root, "",
                   {"seed", "synth", "splits", "model", "train", "lm", "eval", "methods", "method_overrides"});
    if (root.contains("seed")) {
        std::uint64_t seed = 0;
        take(root, "", "seed", seed);
        set_seed(seed);
    }
    if (root.contains("synth")) {
        const auto& s = section_object(root, "synth");
        reject_unknown(s, "synth",
                       {"vocab_size", "dialogues", "turns", "knowledge_sentences", "leak_rate", "history_leak_rate",
                        "seed", "topics", "values_per_topic", "distractor_rate", "response_noise_tokens"});
        take(s, "synth", "vocab_size", synth.vocab_size);
        take(s, "synth", "dialogues", synth.dialogues);
        take(s, "synth", "turns", synth.turns);
        take(s, "synth", "knowledge_sentences", synth.knowledge_sentences);
        take(s, "synth", "leak_rate", synth.leak_rate);
        take(s, "synth", "history_leak_rate", synth.history_leak_rate);
        take(s, "synth", "seed", synth.seed);
        take(s, "synth", "topics", synth.topics);
        take(s, "synth", "values_per_topic", synth.values_per_topic);
        take(s, "synth", "distractor_rate", synth.distractor_rate);
        take(s, "synth", "response_noise_tokens", synth.response_noise_tokens);
    }
    if (root.contains("splits")) {
        const auto& s = section_object(root, "splits");
        reject_unknown(s, "splits", {"valid_dialogues", "test_dialogues"});
        take(s, "splits", "valid_dialogues", valid_dialogues);
        take(s, "splits", "test_dialogues", test_dialogues);
    }
    if (root.contains("model")) {
        const auto& s = section_object(root, "model");
        reject_unknown(s, "model", {"width", "layers", "heads", "max_len", "classification_head"});
        take(s, "model", "width", model.width);
        take(s, "model", "layers", model.layers);
        take(s, "model", "heads", model.heads);
        take(s, "model", "max_len", model.max_len);
        take(s, "model", "classification_head", model.classification_head);
    }
    if (root.contains("train")) {
        train = parse_train_config(section_object(root, "train").dump(), train);
    }
    if (root.contains("lm")) {
        lm = parse_train_config(section_object(root, "lm").dump(), lm);
    }
    if (root.contains("eval")) {
        const auto& s = section_object(root, "eval");
        reject_unknown(s, "eval", {"lengths", "metrics", "n_candidates", "max_examples", "max_decode_len", "seed"});
        if (s.contains("lengths")) {
            const auto& l = s.at("lengths");
            if (l.is_string()) {
                eval.lengths = parse_lengths(l.get<std::string>());
            } else if (l.is_array()) {
                std::string csv;
                for (const auto& item : l) {
                    csv += (csv.empty() ? "" : ",") + (item.is_string() ? item.get<std::string>() : item.dump());
                }
                eval.lengths = parse_lengths(csv);
            } else {
                throw ConfigError("eval.lengths must be a string or an array");
            }
        }
        if (s.contains("metrics")) {
            std::vector<std::string> names;
            take(s, "eval", "metrics", names);
            eval.metrics.clear();
            for (const auto& n : names) {
                eval.metrics.insert(parse_metric(n));
            }
        }
        take(s, "eval", "n_candidates", eval.n_candidates);
        take(s, "eval", "max_examples", eval.max_examples);
        take(s, "eval", "max_decode_len", eval.max_decode_len);
        take(s, "eval", "seed", eval.seed);
    }
    if (root.contains("methods")) {
        std::vector<std::string> names;
        take(root, "", "methods", names);
        methods.clear();
        for (const auto& n : names) {
            methods.push_back(parse_method(n));
        }
    }
    if (root.contains("method_overrides")) {
        const auto& s = section_object(root, "method_overrides");
        for (const auto& [name, value] : s.items()) {
            parse_method(name);
            if (!value.is_object()) {
                throw ConfigError("method_overrides." + name + " must be an object");
            }
            method_overrides[name] = value.dump();
        }
    }
    validate();
}

std::string ExperimentConfig::to_json() const {
    ordered_json j;
    j["synth"] = {{"vocab_size", synth.vocab_size},
                  {"dialogues", synth.dialogues},
                  {"turns", synth.turns},
                  {"knowledge_sentences", synth.knowledge_sentences},
                  {"leak_rate", synth.leak_rate},
                  {"history_leak_rate", synth.history_leak_rate},
                  {"seed", synth.seed},
                  {"topics", synth.topics},
                  {"values_per_topic", synth.values_per_topic},
                  {"distractor_rate", synth.distractor_rate},
                  {"response_noise_tokens", synth.response_noise_tokens}};
    j["splits"] = {{"valid_dialogues", valid_dialogues}, {"test_dialogues", test_dialogues}};
    j["model"] = {{"width", model.width},
                  {"layers", model.layers},
                  {"heads", model.heads},
                  {"max_len", model.max_len},
                  {"classification_head", model.classification_head}};
    j["train"] = ordered_json::parse(dump_train_config(train));
    j["lm"] = ordered_json::parse(dump_train_config(lm));
    std::vector<std::string> lengths;
    for (auto L : eval.lengths) {
        lengths.push_back(length_label(L));
    }
    std::vector<std::string> metrics;
    for (auto m : eval.metrics) {
        metrics.push_back(metric_name(m));
    }
    j["eval"] = {{"lengths", lengths},
                 {"metrics", metrics},
                 {"n_candidates", eval.n_candidates},
                 {"max_examples", eval.max_examples},
                 {"max_decode_len", eval.max_decode_len},
                 {"seed", eval.seed}};
    std::vector<std::string> names;
    for (auto m : methods) {
        names.push_back(method_name(m));
    }
    j["methods"] = names;
    ordered_json overrides = ordered_json::object();
    for (const auto& [name, text] : method_overrides) {
        overrides[name] = ordered_json::parse(text);
    }
    j["method_overrides"] = overrides;
    return j.dump(2);
}

void ExperimentConfig::set_seed(std::uint64_t seed) {
    synth.seed = seed;
    train.seed = mix_seed(seed, 1);
    lm.seed = mix_seed(seed, 2);
    eval.seed = mix_seed(seed, 3);
}

TrainConfig ExperimentConfig::train_for(Method m) const {
    TrainConfig c = train;
    if (auto it = method_overrides.find(method_name(m)); it != method_overrides.end()) {
        c = parse_train_config(it->second, c);
    }
    c.method = m;
    return c;
}

SplitData prepare_synthetic(const ExperimentConfig& cfg) {
    SplitData d;
    SynthConfig sc = cfg.synth;
    d.train_text = synthesize_corpus(sc);
    sc.dialogues = cfg.valid_dialogues;
    sc.seed = mix_seed(cfg.synth.seed, 0x7a11dULL);
    d.valid_text = synthesize_corpus(sc);
    sc.dialogues = cfg.test_dialogues;
    sc.seed = mix_seed(cfg.synth.seed, 0x7e57ULL);
    d.test_text = synthesize_corpus(sc);
    d.vocab = build_vocab(corpus_texts(d.train_text), cfg.synth.vocab_size + special::kCount);
    d.train = encode_corpus(d.train_text, d.vocab, "train");
    d.valid = encode_corpus(d.valid_text, d.vocab, "valid");
    d.test = encode_corpus(d.test_text, d.vocab, "test");
    d.train_examples = make_examples(d.train.dialogues);
    d.valid_examples = make_examples(d.valid.dialogues);
    d.test_examples = make_examples(d.test.dialogues);
    return d;
}

const GapCurve& find_curve(const EvalReport& report, const std::string& method, const std::string& metric) {
    for (const auto& c : report.curves) {
        if (c.method == method && c.metric == metric) {
            return c;
        }
    }
    throw ValidationError("no " + metric + " curve for method " + method);
}

SweepResult run_sweep(const ExperimentConfig& cfg, const SplitData& data, const std::filesystem::path& out_dir,
                      bool fixed_timestamp, const Progress& progress) {
    cfg.validate();
    auto say = [&](const std::string& msg) {
        if (progress) {
            progress(msg);
        }
    };
    ModelConfig model = cfg.model;
    model.vocab_size = data.vocab.size();
    const std::uint64_t vhash = data.vocab.hash();
    const bool write = !out_dir.empty();
    if (write) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) {
            throw IoError("cannot create " + out_dir.string());
        }
    }

    SweepResult result;
    auto t0 = std::chrono::steady_clock::now();
    say("pretraining knowledge LM on " + std::to_string(data.train.knowledge.sentences.size()) + " sentences");
    const LmResult lm = pretrain_knowledge_lm(data.train.knowledge.sentences, model, cfg.lm,
                                              data.valid.knowledge.sentences);
    result.lm_heldout_ppl = lm.heldout_ppl;
    if (write) {
        save_checkpoint(out_dir / "lm.ckpt", lm.params, vhash);
    }
    say("knowledge LM held-out ppl " + std::to_string(lm.heldout_ppl) + " (" + std::to_string(seconds_since(t0)) +
        "s)");

    const auto test = head(data.test_examples, cfg.eval.max_examples);
    const bool test_has_knowledge =
        std::all_of(test.begin(), test.end(), [](const Example& e) { return e.has_knowledge; });
    SweepOptions sweep;
    sweep.hits = HitsOptions{cfg.eval.n_candidates, cfg.eval.seed, false};
    sweep.max_decode_len = cfg.eval.max_decode_len;

    result.report.scalars["knowledge_lm.heldout_ppl"] = lm.heldout_ppl;
    if (test_has_knowledge) {
        result.report.scalars["knowledge_ppl.pz"] = knowledge_lm_ppl(lm.params, test, false);
    }

    const TrainData train_data{data.train_examples, data.valid_examples};
    for (Method m : cfg.methods) {
        const auto name = method_name(m);
        const TrainConfig tc = cfg.train_for(m);
        say("training " + name + " for " + std::to_string(tc.max_steps) + " steps");
        t0 = std::chrono::steady_clock::now();
        RunOptions ro;
        if (write) {
            ro.out_dir = out_dir / name;
        }
        ro.vocab_hash = vhash;
        ro.fixed_timestamp = fixed_timestamp;
        const auto run = run_training(train_data, model, tc, &lm.params, ro);
        MethodOutcome outcome{m, run.initial_valid_ppl, run.best_valid_ppl, run.best_step, seconds_since(t0)};
        say(name + ": valid ppl " + std::to_string(run.initial_valid_ppl) + " -> " +
            std::to_string(run.best_valid_ppl) + " (" + std::to_string(outcome.seconds) + "s)");

        t0 = std::chrono::steady_clock::now();
        auto curves = gap_sweep(run.best, test, cfg.eval.lengths, cfg.eval.metrics, sweep, name, "synthetic");
        for (auto& c : curves) {
            result.report.curves.push_back(std::move(c));
        }
        result.report.scalars["valid_ppl." + name] = run.best_valid_ppl;
        if (test_has_knowledge && (m == Method::Decoupling || m == Method::RealLm)) {
            result.report.scalars["knowledge_ppl." + name] = knowledge_lm_ppl(run.best, test, true);
        }
        say(name + ": evaluated (" + std::to_string(seconds_since(t0)) + "s)");
        result.methods.push_back(outcome);
    }
    if (write) {
        emit_report(result.report, out_dir / "report", fixed_timestamp);
    }
    return result;
}

}  // namespace decouple
