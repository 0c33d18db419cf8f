#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "decouple/corpus.hpp"

namespace decouple {

/// Generator settings for the synthetic persona-style corpus.
///
/// Each dialogue carries `knowledge_sentences` facts of the form
/// "my <topic> is <value>". A-turns are filler chatter that, with probability
/// `history_leak_rate`, ask about the value of the fact the next B-turn uses.
/// B-turns state "i like <value> ." where the value is copied from that fact
/// with probability `leak_rate` and drawn uniformly from all values otherwise.
struct SynthConfig {
    std::size_t vocab_size = 500;
    std::size_t dialogues = 5000;
    std::size_t turns = 4;  // utterances per dialogue, even
    std::size_t knowledge_sentences = 3;
    double leak_rate = 0.8;
    double history_leak_rate = 0.5;
    std::uint64_t seed = 1;

    std::size_t topics = 20;
    std::size_t values_per_topic = 10;
    /// Probability an A-turn also mentions an unrelated value of its own.
    double distractor_rate = 0.5;
    /// Extra filler tokens appended to every B-turn before the final period.
    std::size_t response_noise_tokens = 0;

    void validate() const;
};

/// Word classes of the generated language.
struct SynthLexicon {
    std::vector<std::string> templates;
    std::vector<std::string> topics;
    std::vector<std::vector<std::string>> values;  // [topic][value]
    std::vector<std::string> fillers;

    static SynthLexicon make(const SynthConfig& cfg);
    bool is_content(const std::string& token) const;
};

/// Deterministic under cfg.seed; knowledge collection is the deduplicated union.
TextCorpus synthesize_corpus(const SynthConfig& cfg);

}  // namespace decouple
