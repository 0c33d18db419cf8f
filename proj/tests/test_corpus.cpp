#include <doctest.h>

#include <algorithm>
#include <set>

#include "decouple/corpus.hpp"
#include "decouple/error.hpp"
#include "decouple/synth.hpp"
#include "decouple/vocab.hpp"
#include "helpers.hpp"

using namespace decouple;

TEST_SUITE("corpus") {

TEST_CASE("vocab from a tiny corpus holds every token plus the reserved ids") {
    const auto v = build_vocab({"a b", "a"}, 10);
    CHECK(v.size() == special::kCount + 2);
    CHECK(v.contains("a"));
    CHECK(v.contains("b"));
    CHECK(v.id("a") == special::kCount);  // more frequent first
    CHECK(v.token(special::kPad) != v.token(special::kUnk));
}

TEST_CASE("capacity one keeps the most frequent token and maps the rest to UNK") {
    const auto v = build_vocab({"x x x y"}, 1);
    CHECK(v.regular_size() == 1);
    CHECK(v.id("x") == special::kCount);
    CHECK(v.id("y") == special::kUnk);
    CHECK(v.encode("x y z") == TokenSeq{special::kCount, special::kUnk, special::kUnk});
}

TEST_CASE("equal counts break ties lexicographically") {
    const auto v = build_vocab({"beta alpha"}, 10);
    CHECK(v.id("alpha") < v.id("beta"));
}

TEST_CASE("decode after encode is the identity on in-vocabulary text") {
    const auto v = build_vocab({"Hello, world! how are you?"}, 100);
    const std::string text = "hello , world ! how are you ?";
    CHECK(v.decode(v.encode(text)) == text);
    CHECK(tokenize("Hi,there") == std::vector<std::string>{"hi", ",", "there"});
}

TEST_CASE("vocabulary save and load round-trip with the same hash") {
    testing::TempDir dir("vocab");
    const auto v = build_vocab({"c b a a"}, 10);
    v.save(dir / "vocab.txt");
    const auto w = Vocabulary::load(dir / "vocab.txt");
    CHECK(w.hash() == v.hash());
    CHECK(w.id("a") == v.id("a"));
}

TEST_CASE("minimal persona record loads with one knowledge sentence") {
    testing::TempDir dir("load");
    testing::write_text(dir / "d.jsonl",
                        R"({"knowledge":["i have a dog"],"utterances":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"hello"}]})"
                        "\n");
    const auto text = read_dialogues(dir / "d.jsonl", Schema::PersonaChatLike);
    REQUIRE(text.dialogues.size() == 1);
    REQUIRE(text.dialogues[0].knowledge.has_value());
    CHECK(text.dialogues[0].knowledge->size() == 1);
    CHECK(text.knowledge.size() == 1);
}

TEST_CASE("plain schema leaves knowledge absent and the collection empty") {
    testing::TempDir dir("plain");
    testing::write_text(dir / "d.jsonl",
                        R"({"utterances":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"hello"}]})"
                        "\n");
    const auto vocab = build_vocab({"hi hello"}, 10);
    const auto c = load_dialogues(dir / "d.jsonl", Schema::Plain, vocab);
    REQUIRE(c.dialogues.size() == 1);
    CHECK_FALSE(c.dialogues[0].knowledge.has_value());
    CHECK(c.knowledge.sentences.empty());
    const auto ex = make_examples(c.dialogues);
    REQUIRE(ex.size() == 1);
    CHECK_FALSE(ex[0].has_knowledge);
}

TEST_CASE("gold missing from its candidate list names the dialogue") {
    testing::TempDir dir("cands");
    testing::write_text(
        dir / "d.jsonl",
        R"({"knowledge":["k"],"utterances":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"yo"}]})"
        "\n"
        R"({"knowledge":["k"],"utterances":[{"speaker":"A","text":"hi"},{"speaker":"B","text":"yo"}],"candidates":{"1":["a","b"]}})"
        "\n");
    try {
        read_dialogues(dir / "d.jsonl", Schema::PersonaChatLike);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("dialogue 1") != std::string::npos);
        CHECK(msg.find(":2") != std::string::npos);
    }
}

TEST_CASE("malformed JSON reports the line number") {
    testing::TempDir dir("bad");
    testing::write_text(dir / "d.jsonl", "{\"utterances\": [}\n");
    CHECK_THROWS_AS(read_dialogues(dir / "d.jsonl", Schema::Plain), ValidationError);
}

TEST_CASE("written dialogues read back unchanged") {
    testing::TempDir dir("rt");
    SynthConfig sc;
    sc.dialogues = 20;
    const auto text = synthesize_corpus(sc);
    write_dialogues(dir / "d.jsonl", text.dialogues);
    const auto back = read_dialogues(dir / "d.jsonl", Schema::PersonaChatLike);
    REQUIRE(back.dialogues.size() == text.dialogues.size());
    for (std::size_t i = 0; i < text.dialogues.size(); ++i) {
        CHECK(back.dialogues[i].utterances == text.dialogues[i].utterances);
        CHECK(back.dialogues[i].knowledge == text.dialogues[i].knowledge);
    }
}

namespace {

/// Fraction of responses containing a content token of their dialogue's knowledge.
double response_leak_rate(const TextCorpus& c, const SynthLexicon& lex) {
    std::size_t hits = 0, total = 0;
    for (const auto& d : c.dialogues) {
        std::set<std::string> know;
        for (const auto& s : *d.knowledge) {
            for (const auto& t : s) {
                if (lex.is_content(t)) know.insert(t);
            }
        }
        for (std::size_t i = 1; i < d.utterances.size(); i += 2) {
            ++total;
            const auto& u = d.utterances[i];
            hits += std::any_of(u.begin(), u.end(), [&](const auto& t) { return know.count(t) > 0; });
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("response leak frequency matches the configured rate") {
    SynthConfig sc;
    sc.dialogues = 5000;
    sc.leak_rate = 0.8;
    const auto lex = SynthLexicon::make(sc);
    const double chance = static_cast<double>(sc.knowledge_sentences) / (sc.topics * sc.values_per_topic);
    const double rate = response_leak_rate(synthesize_corpus(sc), lex);
    CHECK(std::abs(rate - 0.8) <= 0.02);

    sc.leak_rate = 0.0;
    const double base = response_leak_rate(synthesize_corpus(sc), lex);
    CHECK(std::abs(base - chance) < 0.01);
}

TEST_CASE("full leak rates put knowledge in every response and every history") {
    SynthConfig sc;
    sc.dialogues = 200;
    sc.leak_rate = 1.0;
    sc.history_leak_rate = 1.0;
    const auto lex = SynthLexicon::make(sc);
    const auto c = synthesize_corpus(sc);
    CHECK(response_leak_rate(c, lex) == 1.0);
    const auto vocab = build_vocab(corpus_texts(c), 1000);
    for (const auto& ex : make_examples(encode_corpus(c, vocab).dialogues)) {
        TokenSeq x;
        for (const auto& u : ex.history) x.insert(x.end(), u.tokens.begin(), u.tokens.end());
        CHECK(unigram_overlap(x, ex.knowledge) > 0);
    }
}

TEST_CASE("same seed gives byte-identical corpora") {
    testing::TempDir dir("seed");
    SynthConfig sc;
    sc.dialogues = 100;
    write_dialogues(dir / "a.jsonl", synthesize_corpus(sc).dialogues);
    write_dialogues(dir / "b.jsonl", synthesize_corpus(sc).dialogues);
    CHECK(testing::read_text(dir / "a.jsonl") == testing::read_text(dir / "b.jsonl"));
    sc.seed = 2;
    write_dialogues(dir / "c.jsonl", synthesize_corpus(sc).dialogues);
    CHECK(testing::read_text(dir / "a.jsonl") != testing::read_text(dir / "c.jsonl"));
}

TEST_CASE("overlap recall is non-decreasing in the history leak rate") {
    double last = -1.0;
    for (double h : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        SynthConfig sc;
        sc.dialogues = 500;
        sc.history_leak_rate = h;
        const auto c = synthesize_corpus(sc);
        const auto vocab = build_vocab(corpus_texts(c), 1000);
        const auto stats = knowledge_overlap_stats(encode_corpus(c, vocab).dialogues);
        CHECK(stats.recall >= last);
        last = stats.recall;
    }
}

namespace {

Dialogue pair_dialogue(const TokenSeq& x, const TokenSeq& z) {
    Dialogue d;
    d.utterances = {{Speaker::A, x}, {Speaker::B, {40}}};
    d.knowledge = std::vector<TokenSeq>{z};
    return d;
}

}  // namespace

TEST_CASE("overlap stats hand cases") {
    auto s = knowledge_overlap_stats({pair_dialogue({10, 11, 12}, {10, 11, 12})});
    CHECK(s.recall == doctest::Approx(100.0));
    CHECK(s.precision == doctest::Approx(100.0));
    CHECK(s.f1 == doctest::Approx(100.0));

    s = knowledge_overlap_stats({pair_dialogue({10, 11, 12, 13}, {10, 11})});
    CHECK(s.recall == doctest::Approx(100.0));
    CHECK(s.precision == doctest::Approx(50.0));
    CHECK(s.f1 == doctest::Approx(200.0 / 3.0));
    CHECK(s.f1 == doctest::Approx(2 * s.precision * s.recall / (s.precision + s.recall)));

    s = knowledge_overlap_stats({pair_dialogue({10, 11}, {20, 21})});
    CHECK(s.recall == 0.0);
    CHECK(s.precision == 0.0);
    CHECK(s.f1 == 0.0);

    // Symmetric multisets give equal precision and recall.
    s = knowledge_overlap_stats({pair_dialogue({10, 11, 20}, {10, 11, 21})});
    CHECK(s.precision == doctest::Approx(s.recall));
}

TEST_CASE("knowledge prefix endpoints and nesting") {
    TokenSeq z(15);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<TokenId>(20 + i);
    CHECK(knowledge_prefix(z, 0).empty());
    CHECK(knowledge_prefix(z, 15) == z);
    CHECK(knowledge_prefix(z, 100) == z);
    CHECK(knowledge_prefix(z, 10) == TokenSeq(z.begin(), z.begin() + 10));
    for (std::size_t a = 0; a <= 16; ++a) {
        for (std::size_t b = a; b <= 16; ++b) {
            const auto pa = knowledge_prefix(z, a), pb = knowledge_prefix(z, b);
            CHECK(std::equal(pa.begin(), pa.end(), pb.begin()));
        }
    }
}

TEST_CASE("ten-token windows") {
    TokenSeq z10(10), z12(12);
    for (std::size_t i = 0; i < 12; ++i) {
        if (i < 10) z10[i] = static_cast<TokenId>(20 + i);
        z12[i] = static_cast<TokenId>(20 + i);
    }
    CHECK(random_knowledge_window(z10, 10, 5) == z10);
    std::map<TokenId, int> starts;
    const int draws = 30000;
    for (int s = 0; s < draws; ++s) {
        const auto w = random_knowledge_window(z12, 10, static_cast<std::uint64_t>(s));
        REQUIRE(w.size() == 10);
        CHECK(w == TokenSeq(z12.begin() + (w[0] - 20), z12.begin() + (w[0] - 20) + 10));
        ++starts[w[0]];
    }
    CHECK(starts.size() == 3);
    for (const auto& [first, n] : starts) {
        CHECK(first <= 22);
        // Binomial(30000, 1/3): 4 standard deviations is about 326.
        CHECK(std::abs(n - draws / 3) < 330);
    }
    CHECK(random_knowledge_window(z12, 10, 77) == random_knowledge_window(z12, 10, 77));
}

TEST_CASE("knowledge sentences are joined with the separator in order") {
    CHECK(concat_knowledge({{10, 11}, {12}}) == TokenSeq{10, 11, special::kSep, 12});
    CHECK(concat_knowledge({}).empty());
}

}
