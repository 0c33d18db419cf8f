#include <doctest.h>

#include <cmath>
#include <numeric>

#include "decouple/error.hpp"
#include "decouple/evaluation.hpp"
#include "decouple/oracle.hpp"
#include "decouple/synth.hpp"
#include "decouple/trainer.hpp"
#include "helpers.hpp"

using namespace decouple;

namespace {

std::vector<Example> toy_batch() {
    std::vector<Example> out;
    for (int i = 0; i < 4; ++i) {
        Example ex;
        const auto a = static_cast<TokenId>(8 + i);
        ex.history = {{Speaker::A, {a, 12, 13}}, {Speaker::B, {14, 15}}, {Speaker::A, {static_cast<TokenId>(9 + i)}}};
        ex.response = {static_cast<TokenId>(10 + i % 3), 12, special::kEos};
        ex.knowledge_sentences = {{a, 13}, {14, static_cast<TokenId>(11 + i % 2)}};
        ex.knowledge = concat_knowledge(ex.knowledge_sentences);
        ex.has_knowledge = true;
        out.push_back(ex);
    }
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_abs(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

template <typename Loss>
double oracle_fd(const Loss& loss, const Parameters& p, const Gradient& g) {
    return oracle::finite_difference_check(loss, p.values(), g.values(), 1e-3, 200, 5).max_rel_error;
}

struct SmallData {
    std::vector<Example> train, valid;
    std::vector<TokenSeq> knowledge;
    std::size_t vocab = 0;
};

SmallData small_synthetic(std::size_t dialogues, std::uint64_t seed = 1) {
    SynthConfig sc;
    sc.dialogues = dialogues;
    sc.seed = seed;
    const auto text = synthesize_corpus(sc);
    sc.seed = seed + 100;
    sc.dialogues = 60;
    const auto vtext = synthesize_corpus(sc);
    const auto vocab = build_vocab(corpus_texts(text), sc.vocab_size);
    const auto c = encode_corpus(text, vocab);
    SmallData d;
    d.train = make_examples(c.dialogues);
    d.valid = make_examples(encode_corpus(vtext, vocab).dialogues);
    d.knowledge = c.knowledge.sentences;
    d.vocab = vocab.size();
    return d;
}

ModelConfig small_model(std::size_t vocab) {
    ModelConfig m;
    m.vocab_size = vocab;
    m.width = 16;
    m.layers = 1;
    m.heads = 2;
    m.max_len = 64;
    return m;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config parsing rejects unknown keys and round-trips") {
    CHECK_THROWS_AS(parse_train_config(R"({"alpah": 1})"), ConfigError);
    CHECK_THROWS_AS(parse_train_config(R"({"gamma": "x"})"), ConfigError);
    CHECK_THROWS_AS(parse_train_config(R"({"gamma": -1})"), ConfigError);
    auto c = parse_train_config(R"({"method": "reallm", "gamma": 0.25, "batch_size": 3, "schedule": "linear"})");
    CHECK(c.method == Method::RealLm);
    CHECK(c.gamma == 0.25);
    const auto back = parse_train_config(dump_train_config(c));
    CHECK(dump_train_config(back) == dump_train_config(c));
    CHECK_THROWS_AS(parse_method("dcvae"), ConfigError);
}

TEST_CASE("mle loss is the batch mean of per-token NLL") {
    const auto p = testing::rough_params(testing::tiny_config(), 21);
    const auto batch = toy_batch();
    TrainConfig cfg;
    const auto g = mle_gradients(p, batch, KnowledgeMode::Full, cfg, 5);
    double expected = 0.0;
    for (const auto& ex : batch) {
        expected -= response_logprob(p, ex.history, ex.knowledge, ex.response_speaker, ex.response).total /
                    static_cast<double>(ex.response.size());
    }
    expected /= static_cast<double>(batch.size());
    CHECK(std::abs(g.log.nll - expected) < 1e-9);
}

TEST_CASE("mode none never lets knowledge into the input") {
    const auto batch = toy_batch();
    CHECK(mode_knowledge(batch[0], KnowledgeMode::None, 10, 1).empty());
    CHECK(mode_knowledge(batch[0], KnowledgeMode::Full, 10, 1) == batch[0].knowledge);
    const auto p = testing::rough_params(testing::tiny_config(), 22);
    TrainConfig cfg;
    auto stripped = batch;
    for (auto& ex : stripped) {
        ex.knowledge_sentences.clear();
        ex.knowledge.clear();
        ex.has_knowledge = false;
    }
    const auto a = mle_gradients(p, batch, KnowledgeMode::None, cfg, 1);
    const auto b = mle_gradients(p, stripped, KnowledgeMode::None, cfg, 1);
    CHECK(max_abs_diff(a.phi.values(), b.phi.values()) == 0.0);
}

TEST_CASE("finite differences on the response NLL gradient") {
    const auto cfg = testing::tiny_config();
    const auto p = testing::rough_params(cfg, 23);
    const auto ex = toy_batch()[1];
    Gradient g(p);
    response_nll_gradient(p, ex.history, ex.knowledge, ex.response_speaker, ex.response, 1.0, g);
    auto loss = [&](std::span<const double> w) {
        Parameters q(cfg);
        std::copy(w.begin(), w.end(), q.mutable_values().begin());
        return -response_logprob(q, ex.history, ex.knowledge, ex.response_speaker, ex.response).total /
               static_cast<double>(ex.response.size());
    };
    const auto r = oracle_fd(loss, p, g);
    CHECK(r < 1e-4);
}

TEST_CASE("decoupling with beta = gamma = 0 reduces to mle on the sampled z") {
    const auto mcfg = testing::tiny_config();
    const auto p = testing::rough_params(mcfg, 24);
    auto lm = testing::rough_params(mcfg, 25);
    lm.freeze();
    const auto batch = toy_batch();
    TrainConfig cfg;
    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    const auto g = decoupling_gradients(p, lm, batch, cfg, 0.0, 9);
    Gradient ref(p);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        response_nll_gradient(p, batch[i].history, g.samples[i].tokens, batch[i].response_speaker, batch[i].response,
                              1.0 / static_cast<double>(batch.size()), ref);
    }
    CHECK(max_abs_diff(g.phi.values(), ref.values()) < 1e-12);
    CHECK(max_abs(g.sigma.values()) == 0.0);
}

TEST_CASE("alpha = beta = 0 isolates the KL penalty") {
    const auto mcfg = testing::tiny_config();
    const auto p = testing::rough_params(mcfg, 26);
    auto lm = testing::rough_params(mcfg, 27);
    lm.freeze();
    const auto batch = toy_batch();
    TrainConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.gamma = 0.7;
    const auto g = decoupling_gradients(p, lm, batch, cfg, 0.0, 10);
    CHECK(max_abs(g.phi.values()) == 0.0);
    Gradient ref(p);
    const double m = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        sigma_path_gradient(p, &lm, batch[i].history, g.samples[i].tokens, g.samples[i].terminated, 0.0,
                            cfg.gamma / m, cfg.z_max_len, ref);
    }
    CHECK(max_abs_diff(g.sigma.values(), ref.values()) < 1e-12);
    CHECK(max_abs(g.sigma.values()) > 0.0);
    CHECK(g.log.kl >= 0.0);
}

TEST_CASE("reward enters the sigma path only as a coefficient") {
    const auto mcfg = testing::tiny_config();
    const auto p = testing::rough_params(mcfg, 28);
    auto lm = testing::rough_params(mcfg, 29);
    lm.freeze();
    const auto batch = toy_batch();
    TrainConfig cfg;
    cfg.alpha = 0.0;
    cfg.gamma = 0.0;
    const double baseline = 0.01;
    const auto g = decoupling_gradients(p, lm, batch, cfg, baseline, 11);
    Gradient ref(p);
    const double m = static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double r = std::exp(response_logprob(p, batch[i].history, g.samples[i].tokens, Speaker::B,
                                                   batch[i].response)
                                      .total /
                                  static_cast<double>(batch[i].response.size()));
        CHECK(std::abs(r - g.rewards[i]) < 1e-12);
        sigma_path_gradient(p, nullptr, batch[i].history, g.samples[i].tokens, g.samples[i].terminated,
                            (r - baseline) / m, 0.0, cfg.z_max_len, ref);
    }
    CHECK(max_abs_diff(g.sigma.values(), ref.values()) < 1e-12);
}

TEST_CASE("decoupling refuses an unfrozen knowledge LM") {
    const auto p = init_params(testing::tiny_config(), 1);
    const auto lm = init_params(testing::tiny_config(), 2);
    CHECK_THROWS_AS(decoupling_gradients(p, lm, toy_batch(), TrainConfig{}, 0.0, 1), ConfigError);
}

TEST_CASE("RealLM supervision loss is the NLL of the paired knowledge") {
    const auto p = testing::rough_params(testing::tiny_config(), 30);
    const auto ex = toy_batch()[2];
    Gradient g(p);
    const double loss = knowledge_nll_gradient(p, ex.history, ex.knowledge_sentences, 1.0, g);
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& s : ex.knowledge_sentences) {
        nll -= knowledge_logprob(p, ex.history, s, true).total;
        n += s.size() + 1;
    }
    CHECK(std::abs(loss - nll / static_cast<double>(n)) < 1e-9);
}

TEST_CASE("RealLM phi path does not see the supervision term") {
    const auto p = testing::rough_params(testing::tiny_config(), 31);
    const auto batch = toy_batch();
    auto other = batch;
    for (auto& ex : other) {
        ex.knowledge_sentences = {{15, 15, 15}};
        ex.knowledge = concat_knowledge(ex.knowledge_sentences);
    }
    TrainConfig cfg;
    const auto a = reallm_gradients(p, batch, cfg, 4);
    const auto b = reallm_gradients(p, other, cfg, 4);
    CHECK(max_abs_diff(a.phi.values(), b.phi.values()) == 0.0);
    CHECK(max_abs_diff(a.sigma.values(), b.sigma.values()) > 0.0);
}

TEST_CASE("knowledge LM on one repeated sentence converges to perplexity one") {
    const std::vector<TokenSeq> Z(8, TokenSeq{9, 10, 11, 12});
    TrainConfig cfg;
    cfg.max_steps = 150;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    const auto lm = pretrain_knowledge_lm(Z, testing::tiny_config(), cfg);
    CHECK(lm.params.frozen());
    CHECK(lm.heldout_ppl < 1.05);
    CHECK(lm.heldout_ppl >= 1.0);
}

TEST_CASE("knowledge LM loss falls over the first hundred steps") {
    const auto d = small_synthetic(200);
    TrainConfig cfg;
    cfg.max_steps = 100;
    cfg.batch_size = 16;
    cfg.learning_rate = 3e-3;
    const auto lm = pretrain_knowledge_lm(d.knowledge, small_model(d.vocab), cfg);
    REQUIRE(lm.losses.size() == 100);
    // Ten-step window means, each below the last.
    double prev = 1e9;
    for (std::size_t w = 0; w < 10; ++w) {
        const double mean = std::accumulate(lm.losses.begin() + static_cast<long>(10 * w),
                                            lm.losses.begin() + static_cast<long>(10 * w + 10), 0.0) /
                            10.0;
        CHECK(mean < prev);
        prev = mean;
    }
}

TEST_CASE("RealLM memorizes a single-sentence corpus") {
    auto batch = toy_batch();
    for (auto& ex : batch) {
        ex.knowledge_sentences = {{13, 14, 15}};
        ex.knowledge = concat_knowledge(ex.knowledge_sentences);
    }
    TrainConfig cfg;
    cfg.method = Method::RealLm;
    cfg.max_steps = 200;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    cfg.z_max_len = 6;
    TrainState state(init_params(testing::tiny_config(), 3), cfg, cfg.max_steps);
    for (std::size_t s = 0; s < cfg.max_steps; ++s) {
        reallm_step(state, batch, cfg);
    }
    for (const auto& ex : batch) {
        const auto z = sample_knowledge(state.params, ex.history, 6, 0.0, 0);
        CHECK(z.tokens == TokenSeq{13, 14, 15});
        CHECK(z.terminated);
    }
}

TEST_CASE("knowledge-requiring methods reject knowledge-free data") {
    auto batch = toy_batch();
    for (auto& ex : batch) {
        ex.has_knowledge = false;
        ex.knowledge_sentences.clear();
        ex.knowledge.clear();
    }
    for (Method m : {Method::Full, Method::TenLen, Method::RealLm}) {
        TrainConfig cfg;
        cfg.method = m;
        try {
            check_method_data(cfg, batch, nullptr);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("knowledge") != std::string::npos);
        }
    }
    TrainConfig dec;
    dec.method = Method::Decoupling;
    CHECK_THROWS_AS(check_method_data(dec, batch, nullptr), ConfigError);
    TrainConfig van;
    van.method = Method::Vanilla;
    CHECK_NOTHROW(check_method_data(van, batch, nullptr));
}

TEST_CASE("vanilla runs on a knowledge-free dataset") {
    auto d = small_synthetic(40);
    for (auto* split : {&d.train, &d.valid}) {
        for (auto& ex : *split) {
            ex.has_knowledge = false;
            ex.knowledge_sentences.clear();
            ex.knowledge.clear();
        }
    }
    TrainConfig cfg;
    cfg.method = Method::Vanilla;
    cfg.max_steps = 5;
    const auto run = run_training({d.train, d.valid}, small_model(d.vocab), cfg, nullptr);
    CHECK(run.log.size() == 5);
    CHECK(std::isfinite(run.best_valid_ppl));
}

TEST_CASE("two runs with the same seed give identical checkpoints") {
    const auto d = small_synthetic(40);
    TrainConfig cfg;
    cfg.method = Method::Full;
    cfg.max_steps = 6;
    cfg.eval_every = 3;
    testing::TempDir a("run-a"), b("run-b");
    RunOptions oa{a.path(), 7, true, {}}, ob{b.path(), 7, true, {}};
    const auto ra = run_training({d.train, d.valid}, small_model(d.vocab), cfg, nullptr, oa);
    const auto rb = run_training({d.train, d.valid}, small_model(d.vocab), cfg, nullptr, ob);
    CHECK(ra.best == rb.best);
    CHECK(testing::read_text(a / "best.ckpt") == testing::read_text(b / "best.ckpt"));
    CHECK(testing::read_text(a / "train.jsonl") == testing::read_text(b / "train.jsonl"));
}

TEST_CASE("decoupling halves the untrained validation perplexity") {
    const auto d = small_synthetic(300);
    const auto model = small_model(d.vocab);
    TrainConfig lmcfg;
    lmcfg.max_steps = 60;
    lmcfg.learning_rate = 3e-3;
    const auto lm = pretrain_knowledge_lm(d.knowledge, model, lmcfg);
    TrainConfig cfg;
    cfg.method = Method::Decoupling;
    cfg.max_steps = 120;
    cfg.learning_rate = 3e-3;
    cfg.z_max_len = 6;
    const auto run = run_training({d.train, d.valid}, model, cfg, &lm.params);
    CHECK(run.best_valid_ppl < 0.5 * run.initial_valid_ppl);
    for (const auto& r : run.log) CHECK(r.kl >= 0.0);
}

}
