#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "decouple/corpus.hpp"
#include "decouple/evaluation.hpp"
#include "decouple/synth.hpp"
#include "decouple/trainer.hpp"
#include "decouple/vocab.hpp"

namespace decouple {

struct EvalConfig {
    std::vector<std::size_t> lengths = default_lengths();
    std::set<Metric> metrics{Metric::Ppl, Metric::Hits1, Metric::F1};
    std::size_t n_candidates = 20;
    std::size_t max_examples = 500;  // 0: whole test split
    std::size_t max_decode_len = 16;
    std::uint64_t seed = 7;
};

/// Everything a synthetic sweep needs. Loaded from one JSON file with the
/// sections "synth", "splits", "model", "train", "lm", "eval" and "methods".
/// A top-level "seed" applies set_seed before the sections are read.
struct ExperimentConfig {
    SynthConfig synth;
    std::size_t valid_dialogues = 500;
    std::size_t test_dialogues = 500;
    ModelConfig model;  // vocab_size is taken from the data
    TrainConfig train;
    TrainConfig lm;
    EvalConfig eval;
    std::vector<Method> methods{Method::Full, Method::TenLen, Method::Vanilla, Method::Decoupling, Method::RealLm};
    /// Per-method overrides of `train`, as JSON objects.
    std::map<std::string, std::string> method_overrides;

    ExperimentConfig();
    void validate() const;
    /// Applies every section present in the JSON text on top of this config.
    void merge_json(const std::string& text);
    std::string to_json() const;
    /// Sets every seed from one master seed.
    void set_seed(std::uint64_t seed);
    TrainConfig train_for(Method m) const;
};

struct SplitData {
    Vocabulary vocab;
    TextCorpus train_text, valid_text, test_text;
    Corpus train, valid, test;
    std::vector<Example> train_examples, valid_examples, test_examples;
};

/// Train, valid and test splits from independent generator seeds; the
/// vocabulary comes from the training split.
SplitData prepare_synthetic(const ExperimentConfig& cfg);

struct MethodOutcome {
    Method method;
    double initial_valid_ppl = 0.0;
    double best_valid_ppl = 0.0;
    std::size_t best_step = 0;
    double seconds = 0.0;
};

struct SweepResult {
    EvalReport report;
    std::vector<MethodOutcome> methods;
    double lm_heldout_ppl = 0.0;
};

using Progress = std::function<void(const std::string&)>;

/// Pretrains P_Z, trains every configured method in order, sweeps the test
/// split and writes the report. Artifacts go under `out_dir` when non-empty.
SweepResult run_sweep(const ExperimentConfig& cfg, const SplitData& data, const std::filesystem::path& out_dir,
                      bool fixed_timestamp, const Progress& progress = {});

/// The curve of one metric for a method; throws when absent.
const GapCurve& find_curve(const EvalReport& report, const std::string& method, const std::string& metric);

}  // namespace decouple
