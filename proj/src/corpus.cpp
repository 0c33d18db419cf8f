#include "decouple/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) {
            out.push_back(' ');
        }
        out += tokens[i];
    }
    return out;
}

std::vector<std::string> tokenize_nonempty(const json& value, const std::string& what) {
    if (!value.is_string()) {
        throw ValidationError(what + " must be a string");
    }
    auto tokens = tokenize(value.get<std::string>());
    if (tokens.empty()) {
        throw ValidationError(what + " is empty after tokenization");
    }
    return tokens;
}

TextDialogue parse_record(const json& record, Schema schema) {
    if (!record.is_object()) {
        throw ValidationError("record is not a JSON object");
    }
    TextDialogue d;
    const auto utts = record.find("utterances");
    if (utts == record.end() || !utts->is_array() || utts->empty()) {
        throw ValidationError("missing or empty \"utterances\"");
    }
    for (std::size_t i = 0; i < utts->size(); ++i) {
        const auto& u = (*utts)[i];
        if (!u.is_object() || !u.contains("speaker") || !u.contains("text")) {
            throw ValidationError("utterance " + std::to_string(i) + " needs speaker and text");
        }
        const auto spk = u.at("speaker").get<std::string>();
        Speaker speaker;
        if (spk == "A") {
            speaker = Speaker::A;
        } else if (spk == "B") {
            speaker = Speaker::B;
        } else {
            throw ValidationError("utterance " + std::to_string(i) + ": unknown speaker \"" + spk + "\"");
        }
        const Speaker expected = (i % 2 == 0) ? Speaker::A : Speaker::B;
        if (speaker != expected) {
            throw ValidationError("utterance " + std::to_string(i) + ": speakers must alternate starting with A");
        }
        d.speakers.push_back(speaker);
        d.utterances.push_back(tokenize_nonempty(u.at("text"), "utterance " + std::to_string(i)));
    }

    if (schema != Schema::Plain) {
        const auto know = record.find("knowledge");
        if (know == record.end() || !know->is_array() || know->empty()) {
            throw ValidationError("schema requires a non-empty \"knowledge\" list");
        }
        std::vector<std::vector<std::string>> sentences;
        for (std::size_t i = 0; i < know->size(); ++i) {
            sentences.push_back(tokenize_nonempty((*know)[i], "knowledge " + std::to_string(i)));
        }
        d.knowledge = std::move(sentences);
    }

    if (const auto cands = record.find("candidates"); cands != record.end()) {
        if (!cands->is_object()) {
            throw ValidationError("\"candidates\" must be an object keyed by turn index");
        }
        for (const auto& [key, list] : cands->items()) {
            std::size_t turn = 0;
            try {
                std::size_t used = 0;
                turn = std::stoul(key, &used);
                if (used != key.size()) {
                    throw std::invalid_argument(key);
                }
            } catch (const std::exception&) {
                throw ValidationError("candidate key \"" + key + "\" is not a turn index");
            }
            if (turn >= d.utterances.size()) {
                throw ValidationError("candidate key " + key + " is past the last utterance");
            }
            if (!list.is_array() || list.size() < 2) {
                throw ValidationError("candidate list for turn " + key + " needs at least 2 entries");
            }
            std::vector<std::vector<std::string>> options;
            for (std::size_t i = 0; i < list.size(); ++i) {
                options.push_back(tokenize_nonempty(list[i], "candidate " + key + "/" + std::to_string(i)));
            }
            const auto gold_count = std::count(options.begin(), options.end(), d.utterances[turn]);
            if (gold_count != 1) {
                throw ValidationError("gold response for turn " + key + " appears " +
                                      std::to_string(gold_count) + " times in its candidate list");
            }
            d.candidates.emplace(turn, std::move(options));
        }
    }
    return d;
}

}  // namespace

Schema parse_schema(const std::string& name) {
    if (name == "personachat-like" || name == "personachat") {
        return Schema::PersonaChatLike;
    }
    if (name == "wow-like" || name == "wow") {
        return Schema::WowLike;
    }
    if (name == "plain") {
        return Schema::Plain;
    }
    throw ConfigError("unknown dataset schema: " + name);
}

TextCorpus read_dialogues(const std::filesystem::path& path, Schema schema) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open dataset: " + path.string());
    }
    TextCorpus corpus;
    std::set<std::vector<std::string>> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        TextDialogue d;
        try {
            d = parse_record(json::parse(line), schema);
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + " (dialogue " +
                                  std::to_string(corpus.dialogues.size()) + "): " + e.what());
        }
        if (d.knowledge) {
            for (const auto& s : *d.knowledge) {
                if (seen.insert(s).second) {
                    corpus.knowledge.push_back(s);
                }
            }
        }
        corpus.dialogues.push_back(std::move(d));
    }
    return corpus;
}

void write_dialogues(const std::filesystem::path& path, const std::vector<TextDialogue>& dialogues) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write dataset: " + path.string());
    }
    for (const auto& d : dialogues) {
        json record;
        json utts = json::array();
        for (std::size_t i = 0; i < d.utterances.size(); ++i) {
            utts.push_back({{"speaker", d.speakers[i] == Speaker::A ? "A" : "B"}, {"text", join(d.utterances[i])}});
        }
        record["utterances"] = std::move(utts);
        if (d.knowledge) {
            json know = json::array();
            for (const auto& s : *d.knowledge) {
                know.push_back(join(s));
            }
            record["knowledge"] = std::move(know);
        }
        if (!d.candidates.empty()) {
            json cands = json::object();
            for (const auto& [turn, list] : d.candidates) {
                json arr = json::array();
                for (const auto& c : list) {
                    arr.push_back(join(c));
                }
                cands[std::to_string(turn)] = std::move(arr);
            }
            record["candidates"] = std::move(cands);
        }
        out << record.dump() << '\n';
    }
    if (!out) {
        throw IoError("failed writing dataset: " + path.string());
    }
}

std::vector<std::vector<std::string>> read_knowledge_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open knowledge file: " + path.string());
    }
    std::vector<std::vector<std::string>> sentences;
    std::set<std::vector<std::string>> seen;
    std::string line;
    while (std::getline(in, line)) {
        auto tokens = tokenize(line);
        if (!tokens.empty() && seen.insert(tokens).second) {
            sentences.push_back(std::move(tokens));
        }
    }
    return sentences;
}

void write_knowledge_file(const std::filesystem::path& path,
                          const std::vector<std::vector<std::string>>& sentences) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write knowledge file: " + path.string());
    }
    for (const auto& s : sentences) {
        out << join(s) << '\n';
    }
}

std::vector<std::string> corpus_texts(const TextCorpus& corpus) {
    std::vector<std::string> texts;
    for (const auto& d : corpus.dialogues) {
        for (const auto& u : d.utterances) {
            texts.push_back(join(u));
        }
        if (d.knowledge) {
            for (const auto& s : *d.knowledge) {
                texts.push_back(join(s));
            }
        }
        for (const auto& [turn, list] : d.candidates) {
            for (const auto& c : list) {
                texts.push_back(join(c));
            }
        }
    }
    for (const auto& s : corpus.knowledge) {
        texts.push_back(join(s));
    }
    return texts;
}

Dialogue encode_dialogue(const TextDialogue& dialogue, const Vocabulary& vocab) {
    Dialogue d;
    for (std::size_t i = 0; i < dialogue.utterances.size(); ++i) {
        d.utterances.push_back({dialogue.speakers[i], vocab.encode_tokens(dialogue.utterances[i])});
    }
    if (dialogue.knowledge) {
        std::vector<TokenSeq> sentences;
        for (const auto& s : *dialogue.knowledge) {
            sentences.push_back(vocab.encode_tokens(s));
        }
        d.knowledge = std::move(sentences);
    }
    for (const auto& [turn, list] : dialogue.candidates) {
        std::vector<TokenSeq> encoded;
        for (const auto& c : list) {
            encoded.push_back(vocab.encode_tokens(c));
        }
        d.candidates.emplace(turn, std::move(encoded));
    }
    return d;
}

Corpus encode_corpus(const TextCorpus& corpus, const Vocabulary& vocab, std::string source) {
    Corpus out;
    out.dialogues.reserve(corpus.dialogues.size());
    for (const auto& d : corpus.dialogues) {
        out.dialogues.push_back(encode_dialogue(d, vocab));
    }
    std::set<TokenSeq> seen;
    for (const auto& s : corpus.knowledge) {
        auto ids = vocab.encode_tokens(s);
        if (!ids.empty() && seen.insert(ids).second) {
            out.knowledge.sentences.push_back(std::move(ids));
        }
    }
    out.knowledge.source = std::move(source);
    return out;
}

Corpus load_dialogues(const std::filesystem::path& path, Schema schema, const Vocabulary& vocab) {
    return encode_corpus(read_dialogues(path, schema), vocab, path.filename().string());
}

TokenSeq concat_knowledge(const std::vector<TokenSeq>& sentences) {
    TokenSeq out;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        if (i > 0) {
            out.push_back(special::kSep);
        }
        out.insert(out.end(), sentences[i].begin(), sentences[i].end());
    }
    return out;
}

TokenSeq knowledge_prefix(const TokenSeq& z, std::size_t length) {
    const auto n = std::min(length, z.size());
    return TokenSeq(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(n));
}

TokenSeq random_knowledge_window(const TokenSeq& z, std::size_t length, std::uint64_t seed) {
    if (length == 0) {
        throw ConfigError("random_knowledge_window: length must be at least 1");
    }
    if (z.empty()) {
        return {};
    }
    const auto n = std::min(length, z.size());
    Rng rng(seed);
    const auto start = rng.below(z.size() - n + 1);
    return TokenSeq(z.begin() + static_cast<std::ptrdiff_t>(start),
                    z.begin() + static_cast<std::ptrdiff_t>(start + n));
}

std::size_t unigram_overlap(const TokenSeq& a, const TokenSeq& b) {
    std::unordered_map<TokenId, std::size_t> counts;
    for (TokenId t : a) {
        if (t >= special::kCount) {
            ++counts[t];
        }
    }
    std::size_t overlap = 0;
    for (TokenId t : b) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    return overlap;
}

namespace {

std::size_t count_regular(const TokenSeq& s) {
    return static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [](TokenId t) { return t >= special::kCount; }));
}

}  // namespace

OverlapStats knowledge_overlap_stats(const std::vector<Dialogue>& dialogues) {
    std::size_t overlap = 0;
    std::size_t x_total = 0;
    std::size_t z_total = 0;
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        const auto& d = dialogues[i];
        if (!d.knowledge) {
            throw ValidationError("knowledge_overlap_stats: dialogue " + std::to_string(i) + " has no knowledge");
        }
        const TokenSeq z = concat_knowledge(*d.knowledge);
        TokenSeq x;
        for (std::size_t t = 0; t < d.utterances.size(); ++t) {
            if (t > 0 && d.utterances[t].speaker == Speaker::B) {
                overlap += unigram_overlap(x, z);
                x_total += count_regular(x);
                z_total += count_regular(z);
            }
            x.insert(x.end(), d.utterances[t].tokens.begin(), d.utterances[t].tokens.end());
        }
    }
    OverlapStats s;
    if (z_total > 0) {
        s.recall = 100.0 * static_cast<double>(overlap) / static_cast<double>(z_total);
    }
    if (x_total > 0) {
        s.precision = 100.0 * static_cast<double>(overlap) / static_cast<double>(x_total);
    }
    if (s.recall + s.precision > 0.0) {
        s.f1 = 2.0 * s.recall * s.precision / (s.recall + s.precision);
    }
    return s;
}

std::vector<Example> make_examples(const std::vector<Dialogue>& dialogues) {
    std::vector<Example> out;
    for (const auto& d : dialogues) {
        for (std::size_t t = 1; t < d.utterances.size(); ++t) {
            if (d.utterances[t].speaker != Speaker::B) {
                continue;
            }
            Example ex;
            ex.history.assign(d.utterances.begin(), d.utterances.begin() + static_cast<std::ptrdiff_t>(t));
            ex.response_speaker = d.utterances[t].speaker;
            ex.response = d.utterances[t].tokens;
            ex.response.push_back(special::kEos);
            if (d.knowledge) {
                ex.knowledge_sentences = *d.knowledge;
                ex.knowledge = concat_knowledge(*d.knowledge);
                ex.has_knowledge = true;
            }
            if (auto it = d.candidates.find(t); it != d.candidates.end()) {
                for (std::size_t c = 0; c < it->second.size(); ++c) {
                    TokenSeq cand = it->second[c];
                    if (cand == d.utterances[t].tokens) {
                        ex.gold_index = c;
                    }
                    cand.push_back(special::kEos);
                    ex.candidates.push_back(std::move(cand));
                }
            }
            out.push_back(std::move(ex));
        }
    }
    return out;
}

}  // namespace decouple
