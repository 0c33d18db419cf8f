#include "decouple/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

namespace {

const char* const kReservedNames[special::kCount] = {
    "<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<know>", "<spk_a>", "<spk_b>"};

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            out.push_back(std::move(current));
            current.clear();
        }
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) != 0) {
            flush();
        } else if (is_word_byte(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            out.emplace_back(1, ch);
        }
    }
    flush();
    return out;
}

Vocabulary::Vocabulary() {
    for (const char* name : kReservedNames) {
        add(name);
    }
}

void Vocabulary::add(std::string token) {
    const auto id = static_cast<TokenId>(tokens_.size());
    index_.emplace(token, id);
    tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                   std::size_t max_size) {
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    Vocabulary vocab;
    for (const auto& [token, count] : ranked) {
        if (vocab.regular_size() >= max_size) {
            break;
        }
        if (!vocab.contains(token)) {
            vocab.add(token);
        }
    }
    return vocab;
}

TokenId Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? special::kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        return tokens_[special::kUnk];
    }
    return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
    return index_.find(std::string(token)) != index_.end();
}

TokenSeq Vocabulary::encode(std::string_view text) const { return encode_tokens(tokenize(text)); }

TokenSeq Vocabulary::encode_tokens(const std::vector<std::string>& tokens) const {
    TokenSeq ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        ids.push_back(id(t));
    }
    return ids;
}

std::string Vocabulary::decode(const TokenSeq& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i > 0) {
            out.push_back(' ');
        }
        out += token(ids[i]);
    }
    return out;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
        h = fnv1a(t.data(), t.size(), h);
        const char nul = '\0';
        h = fnv1a(&nul, 1, h);
    }
    return h;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write vocabulary: " + path.string());
    }
    for (std::size_t i = special::kCount; i < tokens_.size(); ++i) {
        out << tokens_[i] << '\n';
    }
    if (!out) {
        throw IoError("failed writing vocabulary: " + path.string());
    }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read vocabulary: " + path.string());
    }
    Vocabulary vocab;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || vocab.contains(line)) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": empty or duplicate vocabulary entry");
        }
        vocab.add(line);
    }
    return vocab;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size) {
    if (corpus.empty()) {
        throw ConfigError("build_vocab: corpus is empty");
    }
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& text : corpus) {
        for (auto& tok : tokenize(text)) {
            ++counts[tok];
        }
    }
    return Vocabulary::from_counts(counts, max_size);
}

}  // namespace decouple
