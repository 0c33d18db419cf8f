#include "decouple/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

namespace {

std::string numbered(const char* prefix, std::size_t i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
    return buf;
}

}  // namespace

void SynthConfig::validate() const {
    auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
    if (!rate_ok(leak_rate) || !rate_ok(history_leak_rate) || !rate_ok(distractor_rate)) {
        throw ConfigError("synth: rates must lie in [0, 1]");
    }
    if (dialogues == 0 || turns < 2 || turns % 2 != 0) {
        throw ConfigError("synth: need at least one dialogue and an even number (>= 2) of turns");
    }
    if (topics == 0 || values_per_topic == 0) {
        throw ConfigError("synth: topics and values_per_topic must be positive");
    }
    if (knowledge_sentences == 0 || knowledge_sentences > topics) {
        throw ConfigError("synth: knowledge_sentences must be in [1, topics]");
    }
    const auto lexicon = SynthLexicon::make(*this);
    if (lexicon.fillers.size() < 8) {
        throw ConfigError("synth: vocab_size too small for topics x values_per_topic");
    }
}

SynthLexicon SynthLexicon::make(const SynthConfig& cfg) {
    SynthLexicon lex;
    lex.templates = {"my", "is", "i", "like", "do", "you", "what", "?", "."};
    for (std::size_t t = 0; t < cfg.topics; ++t) {
        lex.topics.push_back(numbered("topic", t, 2));
        std::vector<std::string> vals;
        for (std::size_t v = 0; v < cfg.values_per_topic; ++v) {
            vals.push_back(numbered("val", t * cfg.values_per_topic + v, 4));
        }
        lex.values.push_back(std::move(vals));
    }
    const std::size_t used = special::kCount + lex.templates.size() + cfg.topics * (1 + cfg.values_per_topic);
    const std::size_t fillers = cfg.vocab_size > used ? cfg.vocab_size - used : 0;
    for (std::size_t i = 0; i < fillers; ++i) {
        lex.fillers.push_back(numbered("w", i, 3));
    }
    return lex;
}

bool SynthLexicon::is_content(const std::string& token) const {
    return token.rfind("val", 0) == 0 || token.rfind("topic", 0) == 0;
}

TextCorpus synthesize_corpus(const SynthConfig& cfg) {
    cfg.validate();
    const auto lex = SynthLexicon::make(cfg);
    const std::size_t all_values = cfg.topics * cfg.values_per_topic;
    auto value_at = [&](std::size_t flat) -> const std::string& {
        return lex.values[flat / cfg.values_per_topic][flat % cfg.values_per_topic];
    };

    TextCorpus corpus;
    std::set<std::vector<std::string>> seen;
    corpus.dialogues.reserve(cfg.dialogues);
    for (std::size_t di = 0; di < cfg.dialogues; ++di) {
        Rng rng(mix_seed(cfg.seed, di));
        TextDialogue d;

        std::vector<std::size_t> topic_order(cfg.topics);
        for (std::size_t t = 0; t < cfg.topics; ++t) {
            topic_order[t] = t;
        }
        rng.shuffle(topic_order);
        std::vector<std::vector<std::string>> facts;
        std::vector<std::string> fact_values;
        for (std::size_t k = 0; k < cfg.knowledge_sentences; ++k) {
            const auto topic = topic_order[k];
            const auto& value = lex.values[topic][rng.below(cfg.values_per_topic)];
            facts.push_back({"my", lex.topics[topic], "is", value});
            fact_values.push_back(value);
        }

        for (std::size_t round = 0; round < cfg.turns / 2; ++round) {
            const auto active = rng.below(cfg.knowledge_sentences);

            std::vector<std::string> question;
            const auto n_fill = 2 + rng.below(3);
            for (std::size_t i = 0; i < n_fill; ++i) {
                question.push_back(lex.fillers[rng.below(lex.fillers.size())]);
            }
            if (rng.bernoulli(cfg.distractor_rate)) {
                question.insert(question.end(), {"i", "like", value_at(rng.below(all_values)), "."});
            }
            if (rng.bernoulli(cfg.history_leak_rate)) {
                question.insert(question.end(), {"do", "you", "like", fact_values[active], "?"});
            } else {
                question.insert(question.end(), {"what", "do", "you", "like", "?"});
            }

            std::vector<std::string> answer{"i", "like"};
            if (rng.bernoulli(cfg.leak_rate)) {
                answer.push_back(fact_values[active]);
            } else {
                answer.push_back(value_at(rng.below(all_values)));
            }
            for (std::size_t i = 0; i < cfg.response_noise_tokens; ++i) {
                answer.push_back(lex.fillers[rng.below(lex.fillers.size())]);
            }
            answer.push_back(".");

            d.speakers.push_back(Speaker::A);
            d.utterances.push_back(std::move(question));
            d.speakers.push_back(Speaker::B);
            d.utterances.push_back(std::move(answer));
        }

        for (const auto& f : facts) {
            if (seen.insert(f).second) {
                corpus.knowledge.push_back(f);
            }
        }
        d.knowledge = std::move(facts);
        corpus.dialogues.push_back(std::move(d));
    }
    return corpus;
}

}  // namespace decouple
