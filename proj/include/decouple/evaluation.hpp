#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "decouple/corpus.hpp"
#include "decouple/params.hpp"

namespace decouple {

/// Knowledge length meaning "the whole knowledge sequence".
inline constexpr std::size_t kFullKnowledge = std::numeric_limits<std::size_t>::max();

std::string length_label(std::size_t length);
std::size_t parse_length(const std::string& label);
/// Parses "0,2,4,full".
std::vector<std::size_t> parse_lengths(const std::string& csv);
std::vector<std::size_t> default_lengths();

enum class Metric { Ppl, Hits1, F1 };
std::string metric_name(Metric m);
Metric parse_metric(const std::string& name);

/// Knowledge visible to the model for an example at a given length.
TokenSeq visible_knowledge(const Example& ex, std::size_t length);

/// exp(mean NLL per response token) with knowledge truncated to `length`.
double perplexity(const Parameters& params, std::span<const Example> data, std::size_t length);

struct HitsOptions {
    std::size_t n_candidates = 20;
    std::uint64_t seed = 0;
    bool use_head = false;
};

/// Candidate set for one example: the dataset's list when present, otherwise
/// n-1 distinct distractors drawn from `pool`. The gold slot is randomised.
std::vector<TokenSeq> build_candidates(const Example& ex, const std::vector<TokenSeq>& pool, std::size_t n,
                                       std::uint64_t seed, std::size_t& gold_index);

/// Distinct responses of a split, in first-seen order.
std::vector<TokenSeq> response_pool(std::span<const Example> data);

/// Percentage of examples whose gold candidate ranks first.
double hits_at_1(const Parameters& params, std::span<const Example> data, std::size_t length,
                 const HitsOptions& options);

/// Multiset unigram F1 in percent, reserved ids ignored.
double unigram_f1(const TokenSeq& prediction, const TokenSeq& reference);

/// Mean per-example F1 of greedy responses.
double corpus_f1(const Parameters& params, std::span<const Example> data, std::size_t length,
                 std::size_t max_decode_len = 16);

struct GapCurve {
    std::string metric;
    std::string method;
    std::string dataset;
    std::vector<std::pair<std::size_t, double>> points;  // sorted by length, full last
};

struct SweepOptions {
    HitsOptions hits;
    std::size_t max_decode_len = 16;
};

/// One curve per requested metric. `lengths` must contain 0 and kFullKnowledge.
std::vector<GapCurve> gap_sweep(const Parameters& params, std::span<const Example> data,
                                const std::vector<std::size_t>& lengths, const std::set<Metric>& metrics,
                                const SweepOptions& options, const std::string& method = "",
                                const std::string& dataset = "");

/// Population variance of the curve's values.
double gap_variance(const GapCurve& curve);

/// PPL of each paired knowledge sentence (plus EOS) under the model, given the
/// example's history when `conditional`, or with no context otherwise.
double knowledge_lm_ppl(const Parameters& params, std::span<const Example> data, bool conditional);

struct EvalReport {
    std::vector<GapCurve> curves;
    /// Extra scalars for the summary (e.g. knowledge-LM perplexities), keyed by name.
    std::map<std::string, double> scalars;
};

/// Writes curves.csv, summary.json and one <metric>.svg per metric. Everything
/// is validated before the first file is written. With `fixed_timestamp` the
/// output bytes depend only on the report.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir, bool fixed_timestamp);

/// Parses a curves.csv produced by emit_report.
std::vector<GapCurve> read_curves_csv(const std::filesystem::path& path);

}  // namespace decouple
