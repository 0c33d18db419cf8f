#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace decouple {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Ids reserved at the front of every vocabulary.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kKnow = 5;
inline constexpr TokenId kSpeakerA = 6;
inline constexpr TokenId kSpeakerB = 7;
inline constexpr TokenId kCount = 8;
}  // namespace special

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token. Bytes >= 0x80 are treated as word characters.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
public:
    Vocabulary();

    /// Builds from already-tokenized text. Tokens are ranked by frequency,
    /// ties broken lexicographically; at most max_size non-reserved entries.
    static Vocabulary from_counts(const std::unordered_map<std::string, std::size_t>& counts,
                                  std::size_t max_size);

    TokenId id(std::string_view token) const;
    const std::string& token(TokenId id) const;
    bool contains(std::string_view token) const;

    TokenSeq encode(std::string_view text) const;
    TokenSeq encode_tokens(const std::vector<std::string>& tokens) const;
    /// Joins with single spaces. Reserved ids render as their marker names.
    std::string decode(const TokenSeq& ids) const;

    std::size_t size() const { return tokens_.size(); }
    std::size_t regular_size() const { return tokens_.size() - special::kCount; }

    /// Stable hash of the ordered token list; recorded in checkpoints.
    std::uint64_t hash() const;

    /// One regular token per line; line i holds id kCount + i.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    void add(std::string token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Counts tokens over raw strings and builds a vocabulary. Throws ConfigError
/// on an empty corpus.
Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size);

}  // namespace decouple
