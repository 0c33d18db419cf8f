#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "decouple/corpus.hpp"
#include "decouple/optimizer.hpp"
#include "decouple/params.hpp"
#include "decouple/seqmodel.hpp"

namespace decouple {

enum class Method { Decoupling, Full, TenLen, Vanilla, RealLm };
enum class KnowledgeMode { Full, TenLenWindow, None };
enum class RewardMode { ExactProbability, PerTokenNormalized };

Method parse_method(const std::string& name);
std::string method_name(Method m);
RewardMode parse_reward_mode(const std::string& name);
std::string reward_mode_name(RewardMode m);

struct TrainConfig {
    Method method = Method::Decoupling;
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 0.5;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    Schedule schedule = Schedule::Cosine;
    double warmup_frac = 0.05;
    double clip_norm = 1.0;
    std::size_t max_steps = 0;  // 0: derived from epochs
    std::size_t epochs = 1;
    std::size_t z_max_len = 12;
    double sample_temperature = 1.0;
    RewardMode reward_mode = RewardMode::PerTokenNormalized;
    bool baseline = true;
    double baseline_decay = 0.9;
    std::uint64_t seed = 1;
    double classification_weight = 0.0;
    std::size_t window_length = 10;
    std::size_t eval_every = 0;       // 0: validate only at the end
    std::size_t valid_examples = 0;   // 0: whole validation split

    void validate() const;
};

/// Overrides fields of `base` with the keys present in a JSON object.
/// Unknown keys and ill-typed values raise ConfigError.
TrainConfig parse_train_config(const std::string& json_text, TrainConfig base = {});
std::string dump_train_config(const TrainConfig& cfg);

struct TrainLogRecord {
    std::size_t step = 0;
    double nll = 0.0;             // mean per-token response NLL
    double reward = 0.0;          // mean reward over the batch
    double kl = 0.0;              // mean summed stepwise KL of sampled z
    double knowledge_nll = 0.0;   // mean per-token NLL of paired knowledge (RealLM)
    double grad_norm_phi = 0.0;
    double grad_norm_sigma = 0.0;
    double learning_rate = 0.0;
    double wall_time = 0.0;
    bool skipped = false;
    std::optional<double> valid_ppl;
};

std::string log_record_json(const TrainLogRecord& r);

/// Gradients of one step before the optimizer sees them. `phi` already
/// carries alpha; `sigma` carries beta and gamma.
struct StepGradients {
    Gradient phi;
    Gradient sigma;
    TrainLogRecord log;
    std::vector<SampleResult> samples;
    std::vector<double> rewards;

    explicit StepGradients(const Parameters& p) : phi(p), sigma(p) {}
};

// Gradient kernels. Each accumulates into `grad` and returns the loss it differentiated.

/// weight * (-log P(y | x, z) / |y|).
double response_nll_gradient(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                             Speaker speaker, const TokenSeq& y, double weight, Gradient& grad,
                             std::vector<double>* token_logprobs = nullptr);

struct SigmaPathTerms {
    double logprob = 0.0;  // log P_sigma(z | x)
    double kl = 0.0;       // sum of stepwise KL to the knowledge LM
};

/// Gradient of  -score_coef * log P_sigma(z | x) + gamma * sum_t KL_t.
/// `reserve` is the knowledge room used when the history had to be
/// truncated for sampling, so both see the same context. `lm` may be null
/// when gamma is 0.
SigmaPathTerms sigma_path_gradient(const Parameters& params, const Parameters* lm,
                                   const std::vector<Utterance>& history, const TokenSeq& z, bool terminated,
                                   double score_coef, double gamma, std::size_t reserve, Gradient& grad);

/// weight * (-log P_sigma(s + EOS | x)) summed over sentences, normalised by their token count.
double knowledge_nll_gradient(const Parameters& params, const std::vector<Utterance>& history,
                              const std::vector<TokenSeq>& sentences, double weight, Gradient& grad);

/// Gold-vs-distractor cross-entropy on the classification head.
double classification_gradient(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                               Speaker speaker, const TokenSeq& gold, const TokenSeq& distractor, double weight,
                               Gradient& grad);

/// Knowledge each baseline conditions on.
TokenSeq mode_knowledge(const Example& ex, KnowledgeMode mode, std::size_t window, std::uint64_t seed);

StepGradients mle_gradients(const Parameters& params, std::span<const Example> batch, KnowledgeMode mode,
                            const TrainConfig& cfg, std::uint64_t seed);
StepGradients decoupling_gradients(const Parameters& params, const Parameters& lm, std::span<const Example> batch,
                                   const TrainConfig& cfg, double baseline, std::uint64_t seed);
StepGradients reallm_gradients(const Parameters& params, std::span<const Example> batch, const TrainConfig& cfg,
                               std::uint64_t seed);

/// Everything the training loop mutates.
class TrainState {
public:
    TrainState(Parameters params, const TrainConfig& cfg, std::size_t total_steps);

    Parameters params;
    Adam optimizer;
    double baseline = 0.0;
    bool baseline_ready = false;
    std::size_t step = 0;
    std::chrono::steady_clock::time_point start;

    std::uint64_t step_seed(const TrainConfig& cfg) const;
};

TrainLogRecord mle_step(TrainState& state, std::span<const Example> batch, KnowledgeMode mode, const TrainConfig& cfg);
TrainLogRecord decoupling_step(TrainState& state, const Parameters& lm, std::span<const Example> batch,
                               const TrainConfig& cfg);
TrainLogRecord reallm_step(TrainState& state, std::span<const Example> batch, const TrainConfig& cfg);

struct LmResult {
    Parameters params;  // frozen
    double heldout_ppl = 0.0;
    std::vector<double> losses;
};

/// Next-token NLL training of the knowledge LM on [KNOW sentence EOS].
/// Perplexity is reported on `heldout`, or on Z itself when that is empty.
LmResult pretrain_knowledge_lm(const std::vector<TokenSeq>& Z, const ModelConfig& model, const TrainConfig& cfg,
                               const std::vector<TokenSeq>& heldout = {});

/// Per-token perplexity of sentences (plus EOS) under a knowledge LM with no history.
double knowledge_sentence_ppl(const Parameters& lm, const std::vector<TokenSeq>& sentences);

struct TrainData {
    std::vector<Example> train;
    std::vector<Example> valid;
};

struct RunOptions {
    std::filesystem::path out_dir;  // empty: no files
    std::uint64_t vocab_hash = 0;
    bool fixed_timestamp = false;
    std::function<void(const TrainLogRecord&)> on_log;
};

struct RunResult {
    Parameters best;
    std::size_t best_step = 0;
    double best_valid_ppl = 0.0;
    double initial_valid_ppl = 0.0;
    std::vector<TrainLogRecord> log;
};

/// Throws ConfigError when the method's data requirements are unmet.
void check_method_data(const TrainConfig& cfg, std::span<const Example> train, const Parameters* lm);

/// Knowledge length used for validation PPL of a method.
std::size_t validation_length(Method m);

RunResult run_training(const TrainData& data, const ModelConfig& model, const TrainConfig& cfg,
                       const Parameters* lm, const RunOptions& options = {});

}  // namespace decouple
