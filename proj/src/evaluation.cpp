#include "decouple/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "decouple/error.hpp"
#include "decouple/random.hpp"
#include "decouple/seqmodel.hpp"

namespace decouple {

namespace {

bool is_reserved(TokenId t) { return t >= 0 && t < special::kCount; }

void require_nonempty(std::span<const Example> data, const char* what) {
    if (data.empty()) {
        throw ValidationError(std::string(what) + ": empty dataset");
    }
}

}  // namespace

std::string length_label(std::size_t length) {
    return length == kFullKnowledge ? "full" : std::to_string(length);
}

std::size_t parse_length(const std::string& label) {
    if (label == "full") {
        return kFullKnowledge;
    }
    if (label.empty() || !std::all_of(label.begin(), label.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw ConfigError("invalid knowledge length '" + label + "' (expected an integer or 'full')");
    }
    return static_cast<std::size_t>(std::stoull(label));
}

std::vector<std::size_t> parse_lengths(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
                   item.end());
        out.push_back(parse_length(item));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (out.empty()) {
        throw ConfigError("empty length list");
    }
    return out;
}

std::vector<std::size_t> default_lengths() { return {0, 2, 4, 6, 8, 10, 15, 20, kFullKnowledge}; }

std::string metric_name(Metric m) {
    switch (m) {
        case Metric::Ppl: return "ppl";
        case Metric::Hits1: return "hits1";
        case Metric::F1: return "f1";
    }
    return "?";
}

Metric parse_metric(const std::string& name) {
    if (name == "ppl") return Metric::Ppl;
    if (name == "hits1") return Metric::Hits1;
    if (name == "f1") return Metric::F1;
    throw ConfigError("unknown metric '" + name + "' (expected ppl, hits1 or f1)");
}

TokenSeq visible_knowledge(const Example& ex, std::size_t length) {
    if (length == 0) {
        return {};
    }
    if (!ex.has_knowledge) {
        throw ValidationError("knowledge length " + length_label(length) + " requested on an example without knowledge");
    }
    return knowledge_prefix(ex.knowledge, length);
}

double perplexity(const Parameters& params, std::span<const Example> data, std::size_t length) {
    require_nonempty(data, "perplexity");
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& ex : data) {
        const auto z = visible_knowledge(ex, length);
        nll -= response_logprob(params, ex.history, z, ex.response_speaker, ex.response).total;
        tokens += ex.response.size();
    }
    return std::exp(nll / static_cast<double>(tokens));
}

std::vector<TokenSeq> response_pool(std::span<const Example> data) {
    std::vector<TokenSeq> pool;
    std::set<TokenSeq> seen;
    for (const auto& ex : data) {
        if (seen.insert(ex.response).second) {
            pool.push_back(ex.response);
        }
    }
    return pool;
}

std::vector<TokenSeq> build_candidates(const Example& ex, const std::vector<TokenSeq>& pool, std::size_t n,
                                       std::uint64_t seed, std::size_t& gold_index) {
    if (n < 2) {
        throw ConfigError("hits@1 needs at least 2 candidates");
    }
    if (!ex.candidates.empty()) {
        if (ex.candidates.size() < n) {
            throw ValidationError("example has " + std::to_string(ex.candidates.size()) + " candidates, " +
                                  std::to_string(n) + " requested");
        }
        // Gold plus the first n-1 distractors, in list order.
        std::vector<TokenSeq> out;
        std::size_t distractors = 0;
        for (std::size_t c = 0; c < ex.candidates.size(); ++c) {
            if (c == ex.gold_index) {
                gold_index = out.size();
                out.push_back(ex.candidates[c]);
            } else if (distractors + 1 < n) {
                out.push_back(ex.candidates[c]);
                ++distractors;
            }
        }
        return out;
    }
    std::size_t distinct_others = pool.size();
    if (std::find(pool.begin(), pool.end(), ex.response) != pool.end()) {
        --distinct_others;
    }
    if (distinct_others + 1 < n) {
        throw ValidationError("split has " + std::to_string(distinct_others + 1) + " distinct responses, " +
                              std::to_string(n) + " candidates requested");
    }
    Rng rng(seed);
    std::set<std::size_t> chosen;
    std::vector<TokenSeq> distractors;
    while (distractors.size() + 1 < n) {
        const auto i = rng.below(pool.size());
        if (pool[i] == ex.response || !chosen.insert(i).second) {
            continue;
        }
        distractors.push_back(pool[i]);
    }
    gold_index = rng.below(n);
    distractors.insert(distractors.begin() + static_cast<std::ptrdiff_t>(gold_index), ex.response);
    return distractors;
}

double hits_at_1(const Parameters& params, std::span<const Example> data, std::size_t length,
                 const HitsOptions& options) {
    require_nonempty(data, "hits_at_1");
    const auto pool = response_pool(data);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& ex = data[i];
        std::size_t gold = 0;
        const auto cands = build_candidates(ex, pool, options.n_candidates, mix_seed(options.seed, i), gold);
        const auto z = visible_knowledge(ex, length);
        if (rank_candidates(params, ex.history, z, ex.response_speaker, cands, gold, options.use_head).hit) {
            ++hits;
        }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(data.size());
}

double unigram_f1(const TokenSeq& prediction, const TokenSeq& reference) {
    std::map<TokenId, long> pred;
    std::map<TokenId, long> ref;
    long n_pred = 0;
    long n_ref = 0;
    for (TokenId t : prediction) {
        if (!is_reserved(t)) {
            ++pred[t];
            ++n_pred;
        }
    }
    for (TokenId t : reference) {
        if (!is_reserved(t)) {
            ++ref[t];
            ++n_ref;
        }
    }
    if (n_pred == 0 || n_ref == 0) {
        return 0.0;
    }
    long overlap = 0;
    for (const auto& [t, c] : pred) {
        if (auto it = ref.find(t); it != ref.end()) {
            overlap += std::min(c, it->second);
        }
    }
    if (overlap == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(overlap) / static_cast<double>(n_pred);
    const double r = static_cast<double>(overlap) / static_cast<double>(n_ref);
    return 100.0 * 2.0 * p * r / (p + r);
}

double corpus_f1(const Parameters& params, std::span<const Example> data, std::size_t length,
                 std::size_t max_decode_len) {
    require_nonempty(data, "corpus_f1");
    double total = 0.0;
    for (const auto& ex : data) {
        const auto z = visible_knowledge(ex, length);
        const auto pred = greedy_response(params, ex.history, z, ex.response_speaker, max_decode_len);
        total += unigram_f1(pred, ex.response);
    }
    return total / static_cast<double>(data.size());
}

std::vector<GapCurve> gap_sweep(const Parameters& params, std::span<const Example> data,
                                const std::vector<std::size_t>& lengths, const std::set<Metric>& metrics,
                                const SweepOptions& options, const std::string& method, const std::string& dataset) {
    if (std::find(lengths.begin(), lengths.end(), 0) == lengths.end() ||
        std::find(lengths.begin(), lengths.end(), kFullKnowledge) == lengths.end()) {
        throw ConfigError("gap_sweep: lengths must include 0 and full");
    }
    if (metrics.empty()) {
        throw ConfigError("gap_sweep: empty metric set");
    }
    std::vector<std::size_t> grid = lengths;
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

    std::vector<GapCurve> curves;
    for (Metric m : metrics) {
        GapCurve c;
        c.metric = metric_name(m);
        c.method = method;
        c.dataset = dataset;
        for (std::size_t L : grid) {
            double v = 0.0;
            switch (m) {
                case Metric::Ppl: v = perplexity(params, data, L); break;
                case Metric::Hits1: v = hits_at_1(params, data, L, options.hits); break;
                case Metric::F1: v = corpus_f1(params, data, L, options.max_decode_len); break;
            }
            c.points.emplace_back(L, v);
        }
        curves.push_back(std::move(c));
    }
    return curves;
}

double gap_variance(const GapCurve& curve) {
    if (curve.points.size() < 2) {
        throw ValidationError("gap_variance: need at least two points");
    }
    double mean = 0.0;
    for (const auto& p : curve.points) {
        mean += p.second;
    }
    mean /= static_cast<double>(curve.points.size());
    double var = 0.0;
    for (const auto& p : curve.points) {
        var += (p.second - mean) * (p.second - mean);
    }
    return var / static_cast<double>(curve.points.size());
}

double knowledge_lm_ppl(const Parameters& params, std::span<const Example> data, bool conditional) {
    require_nonempty(data, "knowledge_lm_ppl");
    const std::vector<Utterance> none;
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& ex : data) {
        if (!ex.has_knowledge || ex.knowledge_sentences.empty()) {
            throw ValidationError("knowledge_lm_ppl: example without paired knowledge");
        }
        for (const auto& s : ex.knowledge_sentences) {
            nll -= knowledge_logprob(params, conditional ? ex.history : none, s, true).total;
            tokens += s.size() + 1;
        }
    }
    return std::exp(nll / static_cast<double>(tokens));
}

}  // namespace decouple
