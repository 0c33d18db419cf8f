#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "decouple/corpus.hpp"
#include "decouple/params.hpp"
#include "decouple/transformer.hpp"

namespace decouple {

/// Encoded model input laid out as [HISTORY][KNOWLEDGE?][RESPONSE?].
///
/// HISTORY is BOS followed by speaker-marked utterances; KNOWLEDGE opens with
/// the KNOW marker; RESPONSE opens with the responder's speaker marker.
/// Positions restart at 0 in every segment. Attention is strictly causal.
struct EncodedExample {
    Sequence seq;
    std::size_t length = 0;                      // non-PAD prefix length
    std::optional<std::size_t> knowledge_start;  // index of first knowledge token
    std::optional<std::size_t> response_start;   // index of first response token

    /// Position whose logits predict the token at index i.
    static int predictor_of(std::size_t i) { return static_cast<int>(i) - 1; }
};

struct EncodeRequest {
    const std::vector<Utterance>* history = nullptr;  // may be null / empty (knowledge LM layout)
    const TokenSeq* knowledge = nullptr;
    /// Emit the KNOW marker even when the knowledge is empty (sampling layout).
    bool open_knowledge = false;
    const TokenSeq* response = nullptr;
    Speaker response_speaker = Speaker::B;
};

/// Builds the example; drops the oldest history utterances when the result
/// would exceed max_len. Throws ValidationError when even that cannot fit.
EncodedExample encode_example(const EncodeRequest& req, std::size_t max_len);

/// Appends PAD slots up to `total` (testing and batching helper).
void pad_to(EncodedExample& ex, std::size_t total);

/// Next-token log-distributions for every non-PAD position (rows) over the vocabulary.
RowMat forward_logprobs(const Parameters& params, const EncodedExample& example);

struct ResponseScore {
    double total = 0.0;
    std::vector<double> per_token;
};

/// log P(y | x, z) as a sum over response tokens. Empty z drops the knowledge
/// segment entirely, giving log P(y | x).
ResponseScore response_logprob(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                               Speaker speaker, const TokenSeq& y);

struct SampleResult {
    TokenSeq tokens;                 // excludes the terminating EOS
    bool terminated = false;         // stopped at EOS rather than max_len
    std::vector<double> step_logprobs;  // one per emitted token, EOS included
    double total_logprob = 0.0;
    std::vector<Eigen::RowVectorXd> step_distributions;  // filled when requested
};

/// Ancestral sampling of a knowledge sequence under KNOWLEDGE tags.
/// Temperature 0 is greedy decoding. Log-probs are those of the model at
/// temperature 1 for the emitted tokens.
SampleResult sample_knowledge(const Parameters& params, const std::vector<Utterance>& history, std::size_t max_len,
                              double temperature, std::uint64_t seed, bool keep_distributions = false);

/// log P(z | x) of a knowledge sequence, plus the EOS step when `terminated`.
ResponseScore knowledge_logprob(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                                bool terminated);

/// Per-step KL(P_sigma(. | x, z_<t) || P_Z(. | z_<t)) along z, over the full vocabulary.
/// The EOS step is included when `terminated`.
std::vector<double> stepwise_kl(const Parameters& sigma, const Parameters& lm, const std::vector<Utterance>& history,
                                const TokenSeq& z, bool terminated);

struct RankResult {
    std::vector<std::size_t> order;  // best first
    std::vector<double> scores;
    bool hit = false;
};

/// Scores each candidate by length-normalised log P(c | x, z) (or the
/// classification-head logit when `use_head`). Ties go to the lower index.
RankResult rank_candidates(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                           Speaker speaker, const std::vector<TokenSeq>& candidates, std::size_t gold_index,
                           bool use_head = false);

/// Greedy response decoding, stopping at EOS or `max_len` tokens (EOS not returned).
TokenSeq greedy_response(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                         Speaker speaker, std::size_t max_len);

/// The two roles of the shared model. Both references name the same object.
struct Roles {
    const Parameters& knowledge_generator;
    const Parameters& response_generator;
};

inline Roles make_roles(const Parameters& shared) { return Roles{shared, shared}; }

}  // namespace decouple
