#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "decouple/vocab.hpp"

namespace decouple {

enum class Speaker { A, B };

/// One dialogue as it appears on disk, already tokenized but not yet mapped to ids.
struct TextDialogue {
    std::vector<Speaker> speakers;
    std::vector<std::vector<std::string>> utterances;
    std::optional<std::vector<std::vector<std::string>>> knowledge;
    /// Response utterance index -> candidate token lists (gold included once).
    std::map<std::size_t, std::vector<std::vector<std::string>>> candidates;
};

struct Utterance {
    Speaker speaker = Speaker::A;
    TokenSeq tokens;
};

struct Dialogue {
    std::vector<Utterance> utterances;
    std::optional<std::vector<TokenSeq>> knowledge;
    std::map<std::size_t, std::vector<TokenSeq>> candidates;
};

struct KnowledgeCollection {
    std::vector<TokenSeq> sentences;
    std::string source;
};

enum class Schema { PersonaChatLike, WowLike, Plain };

Schema parse_schema(const std::string& name);

struct TextCorpus {
    std::vector<TextDialogue> dialogues;
    /// Union of all knowledge sentences, deduplicated, first-seen order.
    std::vector<std::vector<std::string>> knowledge;
};

struct Corpus {
    std::vector<Dialogue> dialogues;
    KnowledgeCollection knowledge;
};

/// Reads and validates a JSONL dataset. Malformed lines raise ValidationError
/// carrying the line number; a candidate list without exactly one gold copy
/// raises ValidationError naming the dialogue.
TextCorpus read_dialogues(const std::filesystem::path& path, Schema schema);

/// Writes dialogues in the same JSONL format read_dialogues accepts.
void write_dialogues(const std::filesystem::path& path, const std::vector<TextDialogue>& dialogues);

/// Reads a knowledge collection file (one sentence per line).
std::vector<std::vector<std::string>> read_knowledge_file(const std::filesystem::path& path);
void write_knowledge_file(const std::filesystem::path& path,
                          const std::vector<std::vector<std::string>>& sentences);

/// Every string a vocabulary should cover (utterances, knowledge, candidates).
std::vector<std::string> corpus_texts(const TextCorpus& corpus);

Dialogue encode_dialogue(const TextDialogue& dialogue, const Vocabulary& vocab);
Corpus encode_corpus(const TextCorpus& corpus, const Vocabulary& vocab, std::string source = "");

/// read_dialogues followed by encode_corpus.
Corpus load_dialogues(const std::filesystem::path& path, Schema schema, const Vocabulary& vocab);

/// Knowledge sentences joined with the separator token, in corpus order.
TokenSeq concat_knowledge(const std::vector<TokenSeq>& sentences);

/// First min(length, z.size()) tokens.
TokenSeq knowledge_prefix(const TokenSeq& z, std::size_t length);

/// Contiguous window of min(length, z.size()) tokens with a uniformly drawn start.
TokenSeq random_knowledge_window(const TokenSeq& z, std::size_t length, std::uint64_t seed);

struct OverlapStats {
    double recall = 0.0;
    double precision = 0.0;
    double f1 = 0.0;
};

/// Multiset unigram overlap counts, reserved ids ignored.
std::size_t unigram_overlap(const TokenSeq& a, const TokenSeq& b);

/// Micro-averaged overlap between each response's history x and the dialogue's
/// knowledge z: recall = overlap/|z|, precision = overlap/|x|, in percent.
OverlapStats knowledge_overlap_stats(const std::vector<Dialogue>& dialogues);

/// A (history, response) pair with its dialogue's knowledge. Responses are the
/// B-speaker turns; the response carries a trailing EOS.
struct Example {
    std::vector<Utterance> history;
    Speaker response_speaker = Speaker::B;
    TokenSeq response;
    std::vector<TokenSeq> knowledge_sentences;
    TokenSeq knowledge;  // concat_knowledge(knowledge_sentences)
    bool has_knowledge = false;
    std::vector<TokenSeq> candidates;  // each with trailing EOS; empty when absent
    std::size_t gold_index = 0;
};

std::vector<Example> make_examples(const std::vector<Dialogue>& dialogues);

}  // namespace decouple
