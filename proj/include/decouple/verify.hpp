#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace decouple {

struct CheckResult {
    std::string name;
    bool passed = false;
    double seconds = 0.0;
    std::uint64_t seed = 0;
    nlohmann::ordered_json details;
};

/// Sequence KL against the stepwise sum over random table pairs.
CheckResult check_kl_chain(std::uint64_t seed, std::size_t pairs = 120);

/// Score-function estimator: enumeration, Monte-Carlo and baseline invariance.
CheckResult check_score_function(std::uint64_t seed, std::size_t mc_samples = 100000);

/// Finite differences on the response NLL, the KL penalty and the score term
/// of a 16-token, width-8 model.
CheckResult check_model_gradients(std::uint64_t seed, std::size_t coordinates = 200, double eps = 1e-3);

/// Residual bound on x-z independent joints (asserted), dependent joints
/// (observed only) and the lemma on informative joints.
CheckResult check_residual_bound(std::uint64_t seed, std::size_t joints = 50);

/// Two forms of I(X;Z) and their edge cases.
CheckResult check_mutual_information(std::uint64_t seed);

/// Hand-computed PPL and unigram-F1 cases.
CheckResult check_metric_hand_cases();

/// Untrained-model hits@1 at chance with 20 and 100 candidates.
CheckResult check_hits_calibration(std::uint64_t seed, std::size_t trials = 2000);

/// Every check above, in a fixed order.
std::vector<CheckResult> run_verify_suite(std::uint64_t seed, bool include_calibration = true);

nlohmann::ordered_json verify_report_json(const std::vector<CheckResult>& results);

}  // namespace decouple
