#include <doctest.h>

#include <cmath>
#include <set>

#include "decouple/error.hpp"
#include "decouple/evaluation.hpp"
#include "decouple/synth.hpp"
#include "decouple/trainer.hpp"
#include "helpers.hpp"

using namespace decouple;

namespace {

Example one_example(TokenSeq response) {
    Example ex;
    ex.history = {{Speaker::A, {9, 10}}};
    ex.response = std::move(response);
    return ex;
}

std::vector<Example> synthetic_examples(std::size_t dialogues, std::size_t noise, std::size_t& vocab_size) {
    SynthConfig sc;
    sc.dialogues = dialogues;
    sc.response_noise_tokens = noise;
    const auto text = synthesize_corpus(sc);
    const auto vocab = build_vocab(corpus_texts(text), sc.vocab_size);
    vocab_size = vocab.size();
    return make_examples(encode_corpus(text, vocab).dialogues);
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("perplexity hand cases") {
    const auto cfg = testing::tiny_config(12);
    auto ex = one_example({8});
    CHECK(std::abs(perplexity(testing::bias_model(cfg, {{8, 0.25}}), std::span(&ex, 1), 0) - 4.0) < 1e-9);
    ex = one_example({8, 9});
    CHECK(std::abs(perplexity(testing::bias_model(cfg, {{8, 0.5}, {9, 0.125}}), std::span(&ex, 1), 0) - 4.0) < 1e-9);
    CHECK(std::abs(perplexity(testing::bias_model(cfg, {}), std::span(&ex, 1), 0) - 12.0) < 1e-9);
}

TEST_CASE("perplexity counts response tokens only") {
    const auto p = testing::rough_params(testing::tiny_config(), 40);
    std::vector<Example> data{one_example({11, 12, special::kEos}), one_example({13, special::kEos})};
    data[1].history.push_back({Speaker::B, {14, 15, 8}});
    data[1].history.push_back({Speaker::A, {9}});
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& ex : data) {
        nll -= response_logprob(p, ex.history, {}, ex.response_speaker, ex.response).total;
        n += ex.response.size();
    }
    CHECK(perplexity(p, data, 0) == doctest::Approx(std::exp(nll / static_cast<double>(n))).epsilon(1e-12));
    CHECK_THROWS_AS(perplexity(p, std::span<const Example>(), 0), ValidationError);
}

TEST_CASE("unigram F1 hand cases and symmetry") {
    const TokenSeq a{20, 21}, b{21, 22}, c{20, 21, 22};
    CHECK(unigram_f1(c, c) == 100.0);
    CHECK(unigram_f1(a, b) == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(unigram_f1({}, c) == 0.0);
    CHECK(unigram_f1(a, c) == doctest::Approx(unigram_f1(c, a)).epsilon(1e-15));
    CHECK(unigram_f1({20, special::kEos}, {20}) == 100.0);
}

TEST_CASE("gap variance") {
    GapCurve flat{"ppl", "m", "d", {{0, 3.0}, {4, 3.0}, {kFullKnowledge, 3.0}}};
    CHECK(gap_variance(flat) == 0.0);
    GapCurve two{"ppl", "m", "d", {{0, 10.0}, {kFullKnowledge, 20.0}}};
    CHECK(gap_variance(two) == doctest::Approx(25.0).epsilon(1e-15));

    GapCurve c{"ppl", "m", "d", {{0, 7.0}, {2, 4.5}, {4, 9.25}, {kFullKnowledge, 1.0}}};
    GapCurve scaled = c, shuffled = c;
    for (auto& pt : scaled.points) pt.second *= 3.0;
    CHECK(gap_variance(scaled) == doctest::Approx(9.0 * gap_variance(c)).epsilon(1e-12));
    shuffled.points[0].second = 1.0;
    shuffled.points[3].second = 9.25;
    shuffled.points[2].second = 7.0;
    CHECK(gap_variance(shuffled) == doctest::Approx(gap_variance(c)).epsilon(1e-12));
    CHECK_THROWS(gap_variance(GapCurve{"ppl", "m", "d", {{0, 1.0}}}));
}

TEST_CASE("length labels") {
    CHECK(parse_lengths("full,0,4,4,2") == std::vector<std::size_t>{0, 2, 4, kFullKnowledge});
    CHECK(length_label(kFullKnowledge) == "full");
    CHECK_THROWS_AS(parse_length("-1"), ConfigError);
    CHECK(default_lengths().size() == 9);
}

TEST_CASE("uniform scorer hits at chance") {
    std::size_t vocab = 0;
    auto data = synthetic_examples(1000, 3, vocab);
    data.resize(2000);
    ModelConfig cfg = testing::tiny_config(vocab);
    const auto flat = testing::bias_model(cfg, {});
    const double hits = hits_at_1(flat, data, 0, HitsOptions{20, 3, false});
    // Binomial(2000, 0.05): 3 standard deviations is about 1.46 points.
    CHECK(std::abs(hits - 5.0) < 1.47);
}

TEST_CASE("candidate sets") {
    std::size_t vocab = 0;
    auto data = synthetic_examples(200, 3, vocab);
    const auto pool = response_pool(data);
    std::size_t gold = 0;
    const auto a = build_candidates(data[5], pool, 20, 9, gold);
    REQUIRE(a.size() == 20);
    CHECK(a[gold] == data[5].response);
    CHECK(std::set<TokenSeq>(a.begin(), a.end()).size() == 20);
    std::size_t gold2 = 0;
    CHECK(build_candidates(data[5], pool, 20, 9, gold2) == a);
    CHECK(gold2 == gold);

    Example listed = data[0];
    listed.candidates = {{30, special::kEos}, data[0].response, {31, special::kEos}, {32, special::kEos}};
    listed.gold_index = 1;
    const auto b = build_candidates(listed, pool, 3, 1, gold);
    REQUIRE(b.size() == 3);
    CHECK(b[gold] == data[0].response);
    CHECK(std::count(b.begin(), b.end(), data[0].response) == 1);

    CHECK_THROWS(build_candidates(data[0], {data[0].response}, 5, 1, gold));
}

TEST_CASE("sweep endpoints match individually computed metrics") {
    std::size_t vocab = 0;
    auto data = synthetic_examples(30, 0, vocab);
    const auto p = testing::rough_params(testing::tiny_config(vocab, 8), 41, 0.05);
    const SweepOptions opts{HitsOptions{5, 2, false}, 6};
    const auto curves = gap_sweep(p, data, {0, kFullKnowledge}, {Metric::Ppl, Metric::Hits1, Metric::F1}, opts);
    REQUIRE(curves.size() == 3);
    for (const auto& c : curves) {
        REQUIRE(c.points.size() == 2);
        for (const auto& [L, v] : c.points) {
            double direct = 0.0;
            if (c.metric == "ppl") direct = perplexity(p, data, L);
            if (c.metric == "hits1") direct = hits_at_1(p, data, L, opts.hits);
            if (c.metric == "f1") direct = corpus_f1(p, data, L, opts.max_decode_len);
            CHECK(v == direct);
        }
    }
    // L = 0 is the same as stripping knowledge from the data.
    auto stripped = data;
    for (auto& ex : stripped) {
        ex.knowledge.clear();
        ex.knowledge_sentences.clear();
        ex.has_knowledge = false;
    }
    CHECK(perplexity(p, stripped, 0) == curves[0].points[0].second);
    CHECK_THROWS(gap_sweep(p, data, {2, kFullKnowledge}, {Metric::Ppl}, opts));
}

TEST_CASE("memorized toy corpus ranks gold first") {
    std::size_t vocab = 0;
    auto data = synthetic_examples(40, 2, vocab);
    std::vector<Example> ten;
    std::set<TokenSeq> seen;
    for (const auto& ex : data) {
        if (seen.insert(ex.response).second) ten.push_back(ex);
        if (ten.size() == 10) break;
    }
    REQUIRE(ten.size() == 10);
    TrainConfig cfg;
    cfg.max_steps = 300;
    cfg.batch_size = 10;
    cfg.learning_rate = 1e-2;
    ModelConfig model = testing::tiny_config(vocab, 32);
    model.max_len = 96;
    TrainState state(init_params(model, 5), cfg, cfg.max_steps);
    for (std::size_t s = 0; s < cfg.max_steps; ++s) {
        mle_step(state, ten, KnowledgeMode::Full, cfg);
    }
    CHECK(hits_at_1(state.params, ten, kFullKnowledge, HitsOptions{5, 1, false}) == 100.0);
}

TEST_CASE("knowledge LM perplexity") {
    std::size_t vocab = 0;
    auto data = synthetic_examples(20, 0, vocab);
    const auto cfg = testing::tiny_config(vocab);
    // A model that ignores its inputs scores conditionally and unconditionally alike.
    const auto flat = testing::bias_model(cfg, {{10, 0.3}});
    CHECK(knowledge_lm_ppl(flat, data, true) == doctest::Approx(knowledge_lm_ppl(flat, data, false)).epsilon(1e-12));

    const TokenSeq sentence = data[0].knowledge_sentences[0];
    for (auto& ex : data) {
        ex.knowledge_sentences = {sentence};
        ex.knowledge = sentence;
    }
    TrainConfig lmcfg;
    lmcfg.max_steps = 150;
    lmcfg.batch_size = 4;
    lmcfg.learning_rate = 1e-2;
    const auto lm = pretrain_knowledge_lm({sentence}, cfg, lmcfg);
    const double ppl = knowledge_lm_ppl(lm.params, data, false);
    CHECK(ppl >= 1.0);
    CHECK(ppl < 1.05);
}

TEST_CASE("report files round-trip and are byte-stable") {
    testing::TempDir a("rep-a"), b("rep-b");
    EvalReport r;
    r.curves.push_back({"ppl", "full", "synthetic", {{0, 12.345678901234567}, {4, 9.5}, {kFullKnowledge, 1.0 / 3.0}}});
    r.curves.push_back({"ppl", "vanilla", "synthetic", {{0, 11.0}, {4, 11.0}, {kFullKnowledge, 11.25}}});
    r.curves.push_back({"f1", "full", "synthetic", {{0, 40.0}, {4, 45.0}, {kFullKnowledge, 52.5}}});
    r.scalars["knowledge_ppl.pz"] = 4.25;
    emit_report(r, a.path(), true);
    emit_report(r, b.path(), true);
    for (const auto* f : {"curves.csv", "summary.json", "ppl.svg", "f1.svg"}) {
        CHECK(testing::read_text(a / f) == testing::read_text(b / f));
        CHECK_FALSE(testing::read_text(a / f).empty());
    }
    const auto back = read_curves_csv(a / "curves.csv");
    REQUIRE(back.size() == r.curves.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].metric == r.curves[i].metric);
        CHECK(back[i].method == r.curves[i].method);
        CHECK(back[i].dataset == r.curves[i].dataset);
        CHECK(back[i].points == r.curves[i].points);
    }
}

TEST_CASE("empty metric set fails without writing anything") {
    testing::TempDir dir("rep-empty");
    const auto out = dir / "report";
    CHECK_THROWS(emit_report(EvalReport{}, out, true));
    CHECK_FALSE(std::filesystem::exists(out / "curves.csv"));
    CHECK_FALSE(std::filesystem::exists(out / "summary.json"));

    std::size_t vocab = 0;
    auto data = synthetic_examples(5, 0, vocab);
    const auto p = init_params(testing::tiny_config(vocab), 1);
    CHECK_THROWS(gap_sweep(p, data, {0, kFullKnowledge}, {}, SweepOptions{}));

    EvalReport bad;
    bad.curves.push_back({"ppl", "a,b", "d", {{0, 1.0}, {kFullKnowledge, 2.0}}});
    CHECK_THROWS(emit_report(bad, out, true));
    CHECK_FALSE(std::filesystem::exists(out / "curves.csv"));
}

}
