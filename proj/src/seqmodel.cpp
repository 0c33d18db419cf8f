#include "decouple/seqmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

namespace {

TokenId speaker_token(Speaker s) { return s == Speaker::A ? special::kSpeakerA : special::kSpeakerB; }

void push(EncodedExample& ex, TokenId token, StateTag tag, int pos) {
    ex.seq.tokens.push_back(token);
    ex.seq.tags.push_back(tag);
    ex.seq.positions.push_back(pos);
}

std::vector<int> range_positions(std::size_t first, std::size_t count) {
    std::vector<int> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<int>(first + i);
    }
    return out;
}

// Runs the decoder over every slot of an encoded prefix; returns the logits at the last slot.
Eigen::RowVectorXd prime(IncrementalDecoder& dec, const EncodedExample& ex) {
    Eigen::RowVectorXd logits;
    for (std::size_t i = 0; i < ex.length; ++i) {
        logits = dec.step(ex.seq.tokens[i], ex.seq.tags[i], ex.seq.positions[i]);
    }
    return logits;
}

std::size_t argmax(const Eigen::RowVectorXd& v) {
    Eigen::Index best = 0;
    v.maxCoeff(&best);
    return static_cast<std::size_t>(best);
}

}  // namespace

EncodedExample encode_example(const EncodeRequest& req, std::size_t max_len) {
    const std::size_t z_len = req.knowledge ? req.knowledge->size() : 0;
    const bool has_knowledge = req.open_knowledge || z_len > 0;
    const std::size_t tail = (has_knowledge ? 1 + z_len : 0) + (req.response ? 1 + req.response->size() : 0);

    std::size_t first_utt = 0;
    const std::size_t n_utt = req.history ? req.history->size() : 0;
    auto history_len = [&](std::size_t from) {
        if (from >= n_utt) {
            return std::size_t{0};
        }
        std::size_t n = 1;  // BOS
        for (std::size_t i = from; i < n_utt; ++i) {
            n += 1 + (*req.history)[i].tokens.size();
        }
        return n;
    };
    while (first_utt < n_utt && history_len(first_utt) + tail > max_len) {
        ++first_utt;
    }
    if (history_len(first_utt) + tail > max_len) {
        throw ValidationError("encode_example: knowledge + response (" + std::to_string(tail) +
                              " slots) exceed max_len " + std::to_string(max_len));
    }

    EncodedExample ex;
    if (first_utt < n_utt) {
        int pos = 0;
        push(ex, special::kBos, StateTag::History, pos++);
        for (std::size_t i = first_utt; i < n_utt; ++i) {
            const auto& u = (*req.history)[i];
            push(ex, speaker_token(u.speaker), StateTag::History, pos++);
            for (TokenId t : u.tokens) {
                push(ex, t, StateTag::History, pos++);
            }
        }
    }
    if (has_knowledge) {
        int pos = 0;
        push(ex, special::kKnow, StateTag::Knowledge, pos++);
        ex.knowledge_start = ex.seq.size();
        if (req.knowledge) {
            for (TokenId t : *req.knowledge) {
                push(ex, t, StateTag::Knowledge, pos++);
            }
        }
    }
    if (req.response) {
        int pos = 0;
        push(ex, speaker_token(req.response_speaker), StateTag::Response, pos++);
        ex.response_start = ex.seq.size();
        for (TokenId t : *req.response) {
            push(ex, t, StateTag::Response, pos++);
        }
    }
    ex.length = ex.seq.size();
    return ex;
}

void pad_to(EncodedExample& ex, std::size_t total) {
    int pos = 0;
    while (ex.seq.size() < total) {
        push(ex, special::kPad, StateTag::Pad, pos++);
    }
}

RowMat forward_logprobs(const Parameters& params, const EncodedExample& example) {
    ForwardCache cache;
    const auto outs = range_positions(0, example.length);
    forward(params, example.seq, outs, cache);
    RowMat out(cache.logits.rows(), cache.logits.cols());
    for (Eigen::Index r = 0; r < cache.logits.rows(); ++r) {
        out.row(r) = log_softmax(cache.logits.row(r));
    }
    return out;
}

ResponseScore response_logprob(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                               Speaker speaker, const TokenSeq& y) {
    if (y.empty()) {
        throw ValidationError("response_logprob: empty response");
    }
    EncodeRequest req;
    req.history = &history;
    req.knowledge = &z;
    req.response = &y;
    req.response_speaker = speaker;
    const auto ex = encode_example(req, params.config().max_len);
    const auto outs = range_positions(*ex.response_start - 1, y.size());
    ForwardCache cache;
    forward(params, ex.seq, outs, cache);
    ResponseScore score;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const auto lp = log_softmax(cache.logits.row(static_cast<Eigen::Index>(i)));
        score.per_token.push_back(lp(y[i]));
        score.total += score.per_token.back();
    }
    return score;
}

SampleResult sample_knowledge(const Parameters& params, const std::vector<Utterance>& history, std::size_t max_len,
                              double temperature, std::uint64_t seed, bool keep_distributions) {
    if (max_len == 0) {
        throw ConfigError("sample_knowledge: max_len must be at least 1");
    }
    if (temperature < 0.0) {
        throw ConfigError("sample_knowledge: temperature must be non-negative");
    }
    EncodeRequest req;
    req.history = &history;
    req.open_knowledge = true;
    // Reserve room for the sampled tokens so the prefix never has to shift.
    TokenSeq room(max_len, special::kPad);
    req.knowledge = &room;
    auto probe = encode_example(req, params.config().max_len);
    probe.length = *probe.knowledge_start;

    IncrementalDecoder dec(params);
    Eigen::RowVectorXd logits = prime(dec, probe);
    Rng rng(seed);
    SampleResult out;
    for (std::size_t step = 0; step < max_len; ++step) {
        const Eigen::RowVectorXd lp = log_softmax(logits);
        std::size_t token;
        if (temperature == 0.0) {
            token = argmax(lp);
        } else {
            const Eigen::RowVectorXd scaled = lp / temperature;
            const Eigen::RowVectorXd w = (scaled.array() - scaled.maxCoeff()).exp();
            token = rng.categorical(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())));
        }
        out.step_logprobs.push_back(lp(static_cast<Eigen::Index>(token)));
        out.total_logprob += out.step_logprobs.back();
        if (keep_distributions) {
            out.step_distributions.push_back(lp.array().exp());
        }
        if (static_cast<TokenId>(token) == special::kEos) {
            out.terminated = true;
            break;
        }
        out.tokens.push_back(static_cast<TokenId>(token));
        if (step + 1 < max_len) {
            logits = dec.step(static_cast<TokenId>(token), StateTag::Knowledge, static_cast<int>(step + 1));
        }
    }
    return out;
}

ResponseScore knowledge_logprob(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                                bool terminated) {
    TokenSeq target = z;
    if (terminated) {
        target.push_back(special::kEos);
    }
    if (target.empty()) {
        return {};
    }
    EncodeRequest req;
    req.history = &history;
    req.knowledge = &target;
    req.open_knowledge = true;
    const auto ex = encode_example(req, params.config().max_len);
    const auto outs = range_positions(*ex.knowledge_start - 1, target.size());
    ForwardCache cache;
    forward(params, ex.seq, outs, cache);
    ResponseScore score;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const auto lp = log_softmax(cache.logits.row(static_cast<Eigen::Index>(i)));
        score.per_token.push_back(lp(target[i]));
        score.total += score.per_token.back();
    }
    return score;
}

std::vector<double> stepwise_kl(const Parameters& sigma, const Parameters& lm, const std::vector<Utterance>& history,
                                const TokenSeq& z, bool terminated) {
    if (sigma.config().vocab_size != lm.config().vocab_size) {
        throw ConfigError("stepwise_kl: knowledge LM vocabulary differs from the model's");
    }
    const std::size_t steps = z.size() + (terminated ? 1 : 0);
    if (steps == 0) {
        throw ValidationError("stepwise_kl: empty knowledge sequence");
    }
    const TokenSeq body(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(steps - 1));
    const std::vector<Utterance> none;

    auto distributions = [&](const Parameters& p, const std::vector<Utterance>& hist) {
        EncodeRequest req;
        req.history = &hist;
        req.knowledge = &body;
        req.open_knowledge = true;
        const auto ex = encode_example(req, p.config().max_len);
        ForwardCache cache;
        forward(p, ex.seq, range_positions(*ex.knowledge_start - 1, steps), cache);
        RowMat lp(cache.logits.rows(), cache.logits.cols());
        for (Eigen::Index r = 0; r < lp.rows(); ++r) {
            lp.row(r) = log_softmax(cache.logits.row(r));
        }
        return lp;
    };
    const RowMat lp_sigma = distributions(sigma, history);
    const RowMat lp_lm = distributions(lm, none);
    std::vector<double> kl(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        const auto r = static_cast<Eigen::Index>(s);
        kl[s] = (lp_sigma.row(r).array().exp() * (lp_sigma.row(r) - lp_lm.row(r)).array()).sum();
    }
    return kl;
}

RankResult rank_candidates(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                           Speaker speaker, const std::vector<TokenSeq>& candidates, std::size_t gold_index,
                           bool use_head) {
    if (candidates.size() < 2) {
        throw ValidationError("rank_candidates: need at least two candidates");
    }
    if (gold_index >= candidates.size()) {
        throw ValidationError("rank_candidates: gold index out of range");
    }
    if (use_head && !params.config().classification_head) {
        throw ConfigError("rank_candidates: model has no classification head");
    }
    RankResult result;
    result.scores.resize(candidates.size());
    if (use_head) {
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            if (candidates[c].empty()) {
                throw ValidationError("rank_candidates: empty candidate");
            }
            EncodeRequest req;
            req.history = &history;
            req.knowledge = &z;
            req.response = &candidates[c];
            req.response_speaker = speaker;
            const auto ex = encode_example(req, params.config().max_len);
            ForwardCache cache;
            forward(params, ex.seq, {}, cache);
            result.scores[c] = cache.cls_logit;
        }
    } else {
        const TokenSeq empty;
        EncodeRequest req;
        req.history = &history;
        req.knowledge = &z;
        req.response = &empty;
        req.response_speaker = speaker;
        std::size_t longest = 0;
        for (const auto& c : candidates) {
            if (c.empty()) {
                throw ValidationError("rank_candidates: empty candidate");
            }
            longest = std::max(longest, c.size());
        }
        TokenSeq room(longest, special::kPad);
        req.response = &room;
        auto prefix = encode_example(req, params.config().max_len);
        prefix.length = *prefix.response_start;
        IncrementalDecoder base(params);
        const Eigen::RowVectorXd first = prime(base, prefix);
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            IncrementalDecoder dec = base;
            Eigen::RowVectorXd logits = first;
            double total = 0.0;
            const auto& cand = candidates[c];
            for (std::size_t i = 0; i < cand.size(); ++i) {
                total += log_softmax(logits)(cand[i]);
                if (i + 1 < cand.size()) {
                    logits = dec.step(cand[i], StateTag::Response, static_cast<int>(i + 1));
                }
            }
            result.scores[c] = total / static_cast<double>(cand.size());
        }
    }
    result.order.resize(candidates.size());
    std::iota(result.order.begin(), result.order.end(), 0);
    std::stable_sort(result.order.begin(), result.order.end(),
                     [&](std::size_t a, std::size_t b) { return result.scores[a] > result.scores[b]; });
    result.hit = result.order.front() == gold_index;
    return result;
}

TokenSeq greedy_response(const Parameters& params, const std::vector<Utterance>& history, const TokenSeq& z,
                         Speaker speaker, std::size_t max_len) {
    TokenSeq room(max_len, special::kPad);
    EncodeRequest req;
    req.history = &history;
    req.knowledge = &z;
    req.response = &room;
    req.response_speaker = speaker;
    auto prefix = encode_example(req, params.config().max_len);
    prefix.length = *prefix.response_start;
    IncrementalDecoder dec(params);
    Eigen::RowVectorXd logits = prime(dec, prefix);
    TokenSeq out;
    for (std::size_t i = 0; i < max_len; ++i) {
        const auto token = static_cast<TokenId>(argmax(logits));
        if (token == special::kEos) {
            break;
        }
        out.push_back(token);
        if (i + 1 < max_len) {
            logits = dec.step(token, StateTag::Response, static_cast<int>(i + 1));
        }
    }
    return out;
}

}  // namespace decouple
