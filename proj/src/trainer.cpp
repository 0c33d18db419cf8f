#include "decouple/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "decouple/checkpoint.hpp"
#include "decouple/error.hpp"
#include "decouple/evaluation.hpp"
#include "decouple/random.hpp"
#include "decouple/transformer.hpp"

namespace decouple {

namespace {

using nlohmann::json;

constexpr double kLogFloor = -30.0;

std::vector<int> slots(std::size_t first, std::size_t count) {
    std::vector<int> out(count);
    std::iota(out.begin(), out.end(), static_cast<int>(first));
    return out;
}

// Teacher-forced cross-entropy over `targets` predicted at consecutive slots
// starting at `first`. dlogits receives weight * d(sum NLL)/dlogits.
double cross_entropy_rows(const RowMat& logits, const TokenSeq& targets, double weight, RowMat& dlogits,
                          std::vector<double>* token_logprobs) {
    dlogits.resize(logits.rows(), logits.cols());
    double nll = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const Eigen::RowVectorXd lp = log_softmax(logits.row(r));
        const TokenId t = targets[static_cast<std::size_t>(r)];
        nll -= lp(t);
        if (token_logprobs) {
            token_logprobs->push_back(lp(t));
        }
        dlogits.row(r) = weight * lp.array().exp();
        dlogits(r, t) -= weight;
    }
    return nll;
}

EncodedExample knowledge_layout(const std::vector<Utterance>& history, const TokenSeq& body, std::size_t reserve,
                                std::size_t max_len) {
    TokenSeq room = body;
    if (room.size() < reserve) {
        room.resize(reserve, special::kPad);
    }
    EncodeRequest req;
    req.history = &history;
    req.knowledge = &room;
    req.open_knowledge = true;
    auto ex = encode_example(req, max_len);
    const std::size_t keep = *ex.knowledge_start + body.size();
    ex.seq.tokens.resize(keep);
    ex.seq.tags.resize(keep);
    ex.seq.positions.resize(keep);
    ex.length = keep;
    return ex;
}

template <typename T>
T get_field(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("train config: field '") + key + "' has the wrong type");
    }
}

std::vector<std::size_t> batch_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    return order;
}

void finish_log(TrainState& state, TrainLogRecord& log, bool fixed_time) {
    log.wall_time = fixed_time ? 0.0
                               : std::chrono::duration<double>(std::chrono::steady_clock::now() - state.start).count();
}

TrainLogRecord apply(TrainState& state, StepGradients& g) {
    TrainLogRecord log = g.log;
    log.step = state.step;
    log.grad_norm_phi = g.phi.norm();
    log.grad_norm_sigma = g.sigma.norm();
    log.learning_rate = state.optimizer.learning_rate_at(state.optimizer.steps_taken());
    Gradient total = std::move(g.phi);
    total.add(g.sigma);
    if (!total.finite() || !std::isfinite(log.nll)) {
        log.skipped = true;
    } else {
        state.optimizer.step(state.params, total);
    }
    ++state.step;
    finish_log(state, log, false);
    return log;
}

}  // namespace

Method parse_method(const std::string& name) {
    if (name == "decoupling") return Method::Decoupling;
    if (name == "full") return Method::Full;
    if (name == "tenlen") return Method::TenLen;
    if (name == "vanilla") return Method::Vanilla;
    if (name == "reallm") return Method::RealLm;
    throw ConfigError("unknown method '" + name + "' (expected decoupling, full, tenlen, vanilla or reallm)");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Decoupling: return "decoupling";
        case Method::Full: return "full";
        case Method::TenLen: return "tenlen";
        case Method::Vanilla: return "vanilla";
        case Method::RealLm: return "reallm";
    }
    return "?";
}

RewardMode parse_reward_mode(const std::string& name) {
    if (name == "exact-probability") return RewardMode::ExactProbability;
    if (name == "per-token-normalized") return RewardMode::PerTokenNormalized;
    throw ConfigError("unknown reward mode '" + name + "' (expected exact-probability or per-token-normalized)");
}

std::string reward_mode_name(RewardMode m) {
    return m == RewardMode::ExactProbability ? "exact-probability" : "per-token-normalized";
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0)) fail("alpha, beta and gamma must be non-negative");
    if (batch_size < 1) fail("batch_size must be at least 1");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) fail("warmup_frac must lie in [0, 1)");
    if (!(clip_norm >= 0.0)) fail("clip_norm must be non-negative");
    if (max_steps == 0 && epochs == 0) fail("one of max_steps or epochs must be positive");
    if (z_max_len < 1) fail("z_max_len must be at least 1");
    if (!(sample_temperature > 0.0)) fail("sample_temperature must be positive");
    if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) fail("baseline_decay must lie in [0, 1)");
    if (!(classification_weight >= 0.0)) fail("classification_weight must be non-negative");
    if (window_length < 1) fail("window_length must be at least 1");
}

TrainConfig parse_train_config(const std::string& json_text, TrainConfig base) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("train config: expected a JSON object");
    }
    TrainConfig c = base;
    for (const auto& [key, value] : j.items()) {
        const char* k = key.c_str();
        if (key == "method") c.method = parse_method(get_field<std::string>(j, k));
        else if (key == "alpha") c.alpha = get_field<double>(j, k);
        else if (key == "beta") c.beta = get_field<double>(j, k);
        else if (key == "gamma") c.gamma = get_field<double>(j, k);
        else if (key == "batch_size") c.batch_size = get_field<std::size_t>(j, k);
        else if (key == "learning_rate") c.learning_rate = get_field<double>(j, k);
        else if (key == "schedule") c.schedule = parse_schedule(get_field<std::string>(j, k));
        else if (key == "warmup_frac") c.warmup_frac = get_field<double>(j, k);
        else if (key == "clip_norm") c.clip_norm = get_field<double>(j, k);
        else if (key == "max_steps") c.max_steps = get_field<std::size_t>(j, k);
        else if (key == "epochs") c.epochs = get_field<std::size_t>(j, k);
        else if (key == "z_max_len") c.z_max_len = get_field<std::size_t>(j, k);
        else if (key == "sample_temperature") c.sample_temperature = get_field<double>(j, k);
        else if (key == "reward_mode") c.reward_mode = parse_reward_mode(get_field<std::string>(j, k));
        else if (key == "baseline") c.baseline = get_field<bool>(j, k);
        else if (key == "baseline_decay") c.baseline_decay = get_field<double>(j, k);
        else if (key == "seed") c.seed = get_field<std::uint64_t>(j, k);
        else if (key == "classification_weight") c.classification_weight = get_field<double>(j, k);
        else if (key == "window_length") c.window_length = get_field<std::size_t>(j, k);
        else if (key == "eval_every") c.eval_every = get_field<std::size_t>(j, k);
        else if (key == "valid_examples") c.valid_examples = get_field<std::size_t>(j, k);
        else throw ConfigError("train config: unknown field '" + key + "'");
    }
    c.validate();
    return c;
}

std::string dump_train_config(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["method"] = method_name(c.method);
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["gamma"] = c.gamma;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["schedule"] = schedule_name(c.schedule);
    j["warmup_frac"] = c.warmup_frac;
    j["clip_norm"] = c.clip_norm;
    j["max_steps"] = c.max_steps;
    j["epochs"] = c.epochs;
    j["z_max_len"] = c.z_max_len;
    j["sample_temperature"] = c.sample_temperature;
    j["reward_mode"] = reward_mode_name(c.reward_mode);
    j["baseline"] = c.baseline;
    j["baseline_decay"] = c.baseline_decay;
    j["seed"] = c.seed;
    j["classification_weight"] = c.classification_weight;
    j["window_length"] = c.window_length;
    j["eval_every"] = c.eval_every;
    j["valid_examples"] = c.valid_examples;
    return j.dump(2);
}

std::string log_record_json(const TrainLogRecord& r) {
    nlohmann::ordered_json j;
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    j["step"] = r.step;
    j["nll"] = num(r.nll);
    j["reward"] = num(r.reward);
    j["kl"] = num(r.kl);
    j["knowledge_nll"] = num(r.knowledge_nll);
    j["grad_norm_phi"] = num(r.grad_norm_phi);
    j["grad_norm_sigma"] = num(r.grad_norm_sigma);
    j["learning_rate"] = r.learning_rate;
    j["wall_time"] = r.wall_time;
    j["skipped"] = r.skipped;
    if (r.valid_ppl) {
        j["valid_ppl"] = num(*r.valid_ppl);
    }
    return j.dump();
}

double response_nll_gradient(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                             Speaker speaker, const TokenSeq& y, double weight, Gradient& grad,
                             std::vector<double>* token_logprobs) {
    if (y.empty()) {
        throw ValidationError("empty response");
    }
    EncodeRequest req;
    req.history = &history;
    req.knowledge = &z;
    req.response = &y;
    req.response_speaker = speaker;
    const auto ex = encode_example(req, params.config().max_len);
    ForwardCache cache;
    forward(params, ex.seq, slots(*ex.response_start - 1, y.size()), cache);
    const double n = static_cast<double>(y.size());
    RowMat dlogits;
    const double nll = cross_entropy_rows(cache.logits, y, weight / n, dlogits, token_logprobs) / n;
    if (weight != 0.0) {
        backward(params, ex.seq, cache, dlogits, 0.0, grad);
    }
    return nll;
}

SigmaPathTerms sigma_path_gradient(const Parameters& params, const Parameters* lm,
                                   const std::vector<Utterance>& history, const TokenSeq& z, bool terminated,
                                   double score_coef, double gamma, std::size_t reserve, Gradient& grad) {
    SigmaPathTerms terms;
    const std::size_t steps = z.size() + (terminated ? 1 : 0);
    if (steps == 0) {
        return terms;
    }
    if (gamma > 0.0 && lm == nullptr) {
        throw ConfigError("KL penalty requested without a knowledge LM");
    }
    if (lm && lm->config().vocab_size != params.config().vocab_size) {
        throw ConfigError("knowledge LM vocabulary differs from the model's");
    }
    const TokenSeq body(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(steps - 1));
    const auto ex = knowledge_layout(history, body, reserve, params.config().max_len);
    ForwardCache cache;
    forward(params, ex.seq, slots(*ex.knowledge_start - 1, steps), cache);

    RowMat lm_lp;
    if (lm) {
        const std::vector<Utterance> none;
        const auto lex = knowledge_layout(none, body, 0, lm->config().max_len);
        ForwardCache lcache;
        forward(*lm, lex.seq, slots(*lex.knowledge_start - 1, steps), lcache);
        lm_lp.resize(lcache.logits.rows(), lcache.logits.cols());
        for (Eigen::Index r = 0; r < lm_lp.rows(); ++r) {
            lm_lp.row(r) = log_softmax(lcache.logits.row(r));
        }
    }

    RowMat dlogits = RowMat::Zero(cache.logits.rows(), cache.logits.cols());
    for (std::size_t s = 0; s < steps; ++s) {
        const auto r = static_cast<Eigen::Index>(s);
        const Eigen::RowVectorXd lp = log_softmax(cache.logits.row(r));
        const Eigen::RowVectorXd p = lp.array().exp();
        const TokenId tok = s < z.size() ? z[s] : special::kEos;
        terms.logprob += lp(tok);
        dlogits.row(r) = score_coef * p;
        dlogits(r, tok) -= score_coef;
        if (lm) {
            const Eigen::RowVectorXd diff = lp - lm_lp.row(r);
            const double kl = (p.array() * diff.array()).sum();
            terms.kl += kl;
            dlogits.row(r).array() += gamma * p.array() * (diff.array() - kl);
        }
    }
    if (score_coef != 0.0 || gamma != 0.0) {
        backward(params, ex.seq, cache, dlogits, 0.0, grad);
    }
    return terms;
}

double knowledge_nll_gradient(const Parameters& params, const std::vector<Utterance>& history,
                              const std::vector<TokenSeq>& sentences, double weight, Gradient& grad) {
    if (sentences.empty()) {
        throw ValidationError("missing paired knowledge");
    }
    std::size_t total = 0;
    for (const auto& s : sentences) {
        total += s.size() + 1;
    }
    const double n = static_cast<double>(total);
    double nll = 0.0;
    for (const auto& s : sentences) {
        TokenSeq target = s;
        target.push_back(special::kEos);
        const TokenSeq body(s);
        const auto ex = knowledge_layout(history, body, 0, params.config().max_len);
        ForwardCache cache;
        forward(params, ex.seq, slots(*ex.knowledge_start - 1, target.size()), cache);
        RowMat dlogits;
        nll += cross_entropy_rows(cache.logits, target, weight / n, dlogits, nullptr);
        if (weight != 0.0) {
            backward(params, ex.seq, cache, dlogits, 0.0, grad);
        }
    }
    return nll / n;
}

double classification_gradient(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                               Speaker speaker, const TokenSeq& gold, const TokenSeq& distractor, double weight,
                               Gradient& grad) {
    if (!params.config().classification_head) {
        throw ConfigError("classification loss needs a model with a classification head");
    }
    struct Pass {
        EncodedExample ex;
        ForwardCache cache;
    };
    std::array<Pass, 2> pass;
    const std::array<const TokenSeq*, 2> ys{&gold, &distractor};
    for (std::size_t k = 0; k < 2; ++k) {
        EncodeRequest req;
        req.history = &history;
        req.knowledge = &z;
        req.response = ys[k];
        req.response_speaker = speaker;
        pass[k].ex = encode_example(req, params.config().max_len);
        forward(params, pass[k].ex.seq, {}, pass[k].cache);
    }
    const double a = pass[0].cache.cls_logit;
    const double b = pass[1].cache.cls_logit;
    const double mx = std::max(a, b);
    const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    const double pa = std::exp(a - lse);
    const double pb = std::exp(b - lse);
    if (weight != 0.0) {
        const RowMat none(0, static_cast<Eigen::Index>(params.config().vocab_size));
        backward(params, pass[0].ex.seq, pass[0].cache, none, weight * (pa - 1.0), grad);
        backward(params, pass[1].ex.seq, pass[1].cache, none, weight * pb, grad);
    }
    return lse - a;
}

TokenSeq mode_knowledge(const Example& ex, KnowledgeMode mode, std::size_t window, std::uint64_t seed) {
    if (mode == KnowledgeMode::None) {
        return {};
    }
    if (!ex.has_knowledge) {
        throw ValidationError("example has no knowledge but the training mode needs it");
    }
    if (mode == KnowledgeMode::Full) {
        return ex.knowledge;
    }
    return random_knowledge_window(ex.knowledge, window, seed);
}

namespace {

void maybe_classify(const Parameters& params, std::span<const Example> batch, std::size_t i, const TokenSeq& z,
                    const TrainConfig& cfg, Gradient& grad) {
    if (cfg.classification_weight <= 0.0 || batch.size() < 2) {
        return;
    }
    const auto& ex = batch[i];
    const auto& other = batch[(i + 1) % batch.size()].response;
    if (other == ex.response) {
        return;
    }
    const double m = static_cast<double>(batch.size());
    classification_gradient(params, ex.history, z, ex.response_speaker, ex.response, other,
                            cfg.classification_weight / m, grad);
}

void require_batch(std::span<const Example> batch) {
    if (batch.empty()) {
        throw ConfigError("empty batch");
    }
}

}  // namespace

StepGradients mle_gradients(const Parameters& params, std::span<const Example> batch, KnowledgeMode mode,
                            const TrainConfig& cfg, std::uint64_t seed) {
    require_batch(batch);
    StepGradients g(params);
    const double m = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        const auto z = mode_knowledge(ex, mode, cfg.window_length, mix_seed(seed, i));
        g.log.nll += response_nll_gradient(params, ex.history, z, ex.response_speaker, ex.response, 1.0 / m, g.phi);
        maybe_classify(params, batch, i, z, cfg, g.phi);
    }
    g.log.nll /= m;
    return g;
}

StepGradients decoupling_gradients(const Parameters& params, const Parameters& lm, std::span<const Example> batch,
                                   const TrainConfig& cfg, double baseline, std::uint64_t seed) {
    require_batch(batch);
    if (!lm.frozen()) {
        throw ConfigError("decoupling: the knowledge LM must be frozen");
    }
    StepGradients g(params);
    const double m = static_cast<double>(batch.size());
    const double b = cfg.baseline ? baseline : 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        auto sample = sample_knowledge(params, ex.history, cfg.z_max_len, cfg.sample_temperature, mix_seed(seed, i));
        std::vector<double> lps;
        const double nll = response_nll_gradient(params, ex.history, sample.tokens, ex.response_speaker, ex.response,
                                                 cfg.alpha / m, g.phi, &lps);
        const double log_reward = cfg.reward_mode == RewardMode::PerTokenNormalized
                                      ? -nll
                                      : std::accumulate(lps.begin(), lps.end(), 0.0);
        // Detached: enters the sigma path only as a constant coefficient.
        const double reward = std::exp(std::max(log_reward, kLogFloor));
        const auto terms = sigma_path_gradient(params, &lm, ex.history, sample.tokens, sample.terminated,
                                               cfg.beta * (reward - b) / m, cfg.gamma / m, cfg.z_max_len, g.sigma);
        maybe_classify(params, batch, i, sample.tokens, cfg, g.phi);
        g.log.nll += nll;
        g.log.reward += reward;
        g.log.kl += terms.kl;
        g.rewards.push_back(reward);
        g.samples.push_back(std::move(sample));
    }
    g.log.nll /= m;
    g.log.reward /= m;
    g.log.kl /= m;
    return g;
}

StepGradients reallm_gradients(const Parameters& params, std::span<const Example> batch, const TrainConfig& cfg,
                               std::uint64_t seed) {
    require_batch(batch);
    StepGradients g(params);
    const double m = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& ex = batch[i];
        if (!ex.has_knowledge || ex.knowledge_sentences.empty()) {
            throw ValidationError("reallm: example without paired knowledge");
        }
        g.log.knowledge_nll += knowledge_nll_gradient(params, ex.history, ex.knowledge_sentences, cfg.beta / m, g.sigma);
        auto sample = sample_knowledge(params, ex.history, cfg.z_max_len, cfg.sample_temperature, mix_seed(seed, i));
        g.log.nll += response_nll_gradient(params, ex.history, sample.tokens, ex.response_speaker, ex.response,
                                           cfg.alpha / m, g.phi);
        maybe_classify(params, batch, i, sample.tokens, cfg, g.phi);
        g.samples.push_back(std::move(sample));
    }
    g.log.nll /= m;
    g.log.knowledge_nll /= m;
    return g;
}

TrainState::TrainState(Parameters p, const TrainConfig& cfg, std::size_t total_steps)
    : params(std::move(p)),
      optimizer(params.size(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm, cfg.warmup_frac,
                                          cfg.schedule, total_steps}),
      start(std::chrono::steady_clock::now()) {}

std::uint64_t TrainState::step_seed(const TrainConfig& cfg) const { return mix_seed(cfg.seed, 0x5eed0000ULL + step); }

TrainLogRecord mle_step(TrainState& state, std::span<const Example> batch, KnowledgeMode mode, const TrainConfig& cfg) {
    auto g = mle_gradients(state.params, batch, mode, cfg, state.step_seed(cfg));
    return apply(state, g);
}

TrainLogRecord decoupling_step(TrainState& state, const Parameters& lm, std::span<const Example> batch,
                               const TrainConfig& cfg) {
    auto g = decoupling_gradients(state.params, lm, batch, cfg, state.baseline, state.step_seed(cfg));
    const double mean_reward = g.log.reward;
    auto log = apply(state, g);
    if (cfg.baseline && std::isfinite(mean_reward)) {
        state.baseline = state.baseline_ready
                             ? cfg.baseline_decay * state.baseline + (1.0 - cfg.baseline_decay) * mean_reward
                             : mean_reward;
        state.baseline_ready = true;
    }
    return log;
}

TrainLogRecord reallm_step(TrainState& state, std::span<const Example> batch, const TrainConfig& cfg) {
    auto g = reallm_gradients(state.params, batch, cfg, state.step_seed(cfg));
    return apply(state, g);
}

double knowledge_sentence_ppl(const Parameters& lm, const std::vector<TokenSeq>& sentences) {
    if (sentences.empty()) {
        throw ValidationError("knowledge perplexity of an empty collection");
    }
    const std::vector<Utterance> none;
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : sentences) {
        nll -= knowledge_logprob(lm, none, s, true).total;
        tokens += s.size() + 1;
    }
    return std::exp(nll / static_cast<double>(tokens));
}

LmResult pretrain_knowledge_lm(const std::vector<TokenSeq>& Z, const ModelConfig& model, const TrainConfig& cfg,
                               const std::vector<TokenSeq>& heldout) {
    if (Z.empty()) {
        throw ConfigError("pretrain_knowledge_lm: empty knowledge collection");
    }
    cfg.validate();
    model.validate();
    const std::size_t m = std::min(cfg.batch_size, Z.size());
    const std::size_t per_epoch = (Z.size() + m - 1) / m;
    const std::size_t total = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * per_epoch;
    TrainState state(init_params(model, mix_seed(cfg.seed, 0x4c4dULL)), cfg, total);
    Rng rng(mix_seed(cfg.seed, 0x4c4d0001ULL));
    std::vector<std::size_t> order;
    std::size_t cursor = Z.size();
    const std::vector<Utterance> none;
    LmResult result{Parameters(model), 0.0, {}};
    for (std::size_t step = 0; step < total; ++step) {
        if (cursor + m > Z.size()) {
            order = batch_order(Z.size(), rng);
            cursor = 0;
        }
        StepGradients g(state.params);
        for (std::size_t k = 0; k < m; ++k) {
            const std::vector<TokenSeq> one{Z[order[cursor + k]]};
            g.log.nll += knowledge_nll_gradient(state.params, none, one, 1.0 / static_cast<double>(m), g.phi);
        }
        cursor += m;
        g.log.nll /= static_cast<double>(m);
        result.losses.push_back(g.log.nll);
        apply(state, g);
    }
    result.params = std::move(state.params);
    result.params.freeze();
    result.heldout_ppl = knowledge_sentence_ppl(result.params, heldout.empty() ? Z : heldout);
    return result;
}

void check_method_data(const TrainConfig& cfg, std::span<const Example> train, const Parameters* lm) {
    if (train.empty()) {
        throw ConfigError("training split is empty");
    }
    const bool needs_knowledge =
        cfg.method == Method::Full || cfg.method == Method::TenLen || cfg.method == Method::RealLm;
    if (needs_knowledge) {
        for (const auto& ex : train) {
            if (!ex.has_knowledge || ex.knowledge_sentences.empty()) {
                throw ConfigError("method " + method_name(cfg.method) +
                                  " needs the 'knowledge' field on every training dialogue");
            }
        }
    }
    if (cfg.method == Method::Decoupling) {
        if (lm == nullptr) {
            throw ConfigError("method decoupling needs a pretrained knowledge LM");
        }
        if (!lm->frozen()) {
            throw ConfigError("the knowledge LM must be frozen");
        }
    }
    if (cfg.classification_weight > 0.0 && train.size() < 2) {
        throw ConfigError("classification loss needs at least two training examples");
    }
}

std::size_t validation_length(Method m) {
    return (m == Method::Full || m == Method::TenLen) ? kFullKnowledge : 0;
}

RunResult run_training(const TrainData& data, const ModelConfig& model, const TrainConfig& cfg,
                       const Parameters* lm, const RunOptions& options) {
    cfg.validate();
    model.validate();
    check_method_data(cfg, data.train, lm);
    if (lm && lm->config().vocab_size != model.vocab_size) {
        throw ConfigError("knowledge LM vocabulary differs from the model's");
    }
    if (cfg.classification_weight > 0.0 && !model.classification_head) {
        throw ConfigError("classification_weight > 0 needs model.classification_head");
    }

    const std::vector<Example>& vsrc = data.valid.empty() ? data.train : data.valid;
    const std::size_t vcount = cfg.valid_examples > 0 ? std::min(cfg.valid_examples, vsrc.size()) : vsrc.size();
    const std::span<const Example> valid(vsrc.data(), vcount);
    const std::size_t vlen = validation_length(cfg.method);
    if (vlen > 0) {
        for (const auto& ex : valid) {
            if (!ex.has_knowledge) {
                throw ConfigError("validation split lacks the 'knowledge' field needed by " + method_name(cfg.method));
            }
        }
    }

    const std::size_t n = data.train.size();
    const std::size_t m = std::min(cfg.batch_size, n);
    const std::size_t per_epoch = (n + m - 1) / m;
    const std::size_t total = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * per_epoch;

    TrainState state(init_params(model, mix_seed(cfg.seed, 0x1417ULL)), cfg, total);
    RunResult result{state.params, 0, 0.0, 0.0, {}};
    result.initial_valid_ppl = perplexity(state.params, valid, vlen);
    result.best_valid_ppl = result.initial_valid_ppl;

    std::ofstream log_file;
    if (!options.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(options.out_dir, ec);
        log_file.open(options.out_dir / "train.jsonl", std::ios::trunc);
        if (!log_file) {
            throw IoError("cannot write " + (options.out_dir / "train.jsonl").string());
        }
    }

    Rng rng(mix_seed(cfg.seed, 0xba7c4ULL));
    std::vector<std::size_t> order;
    std::size_t cursor = n;
    std::vector<Example> batch;
    for (std::size_t step = 0; step < total; ++step) {
        if (cursor + m > n) {
            order = batch_order(n, rng);
            cursor = 0;
        }
        batch.clear();
        for (std::size_t k = 0; k < m; ++k) {
            batch.push_back(data.train[order[cursor + k]]);
        }
        cursor += m;

        TrainLogRecord rec;
        switch (cfg.method) {
            case Method::Decoupling: rec = decoupling_step(state, *lm, batch, cfg); break;
            case Method::Full: rec = mle_step(state, batch, KnowledgeMode::Full, cfg); break;
            case Method::TenLen: rec = mle_step(state, batch, KnowledgeMode::TenLenWindow, cfg); break;
            case Method::Vanilla: rec = mle_step(state, batch, KnowledgeMode::None, cfg); break;
            case Method::RealLm: rec = reallm_step(state, batch, cfg); break;
        }
        if (options.fixed_timestamp) {
            rec.wall_time = 0.0;
        }

        const bool eval_now = step + 1 == total || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        if (eval_now) {
            const double ppl = perplexity(state.params, valid, vlen);
            rec.valid_ppl = ppl;
            const bool better = ppl < result.best_valid_ppl || result.best_step == 0;
            if (better) {
                result.best_valid_ppl = ppl;
                result.best = state.params;
                result.best_step = step + 1;
            }
            if (!options.out_dir.empty()) {
                save_checkpoint(options.out_dir / ("step-" + std::to_string(step + 1) + ".ckpt"), state.params,
                                options.vocab_hash);
                if (better) {
                    save_checkpoint(options.out_dir / "best.ckpt", state.params, options.vocab_hash);
                }
            }
        }
        if (log_file) {
            log_file << log_record_json(rec) << '\n';
        }
        if (options.on_log) {
            options.on_log(rec);
        }
        result.log.push_back(std::move(rec));
    }
    return result;
}

}  // namespace decouple
