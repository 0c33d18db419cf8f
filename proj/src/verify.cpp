#include "decouple/verify.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "decouple/evaluation.hpp"
#include "decouple/oracle.hpp"
#include "decouple/random.hpp"
#include "decouple/synth.hpp"
#include "decouple/trainer.hpp"

namespace decouple {

namespace {

using nlohmann::ordered_json;
namespace orc = oracle;

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

CheckResult make_result(const char* name, std::uint64_t seed) {
    CheckResult r;
    r.name = name;
    r.seed = seed;
    r.details = ordered_json::object();
    return r;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

double max_abs(const std::vector<double>& a) {
    double m = 0.0;
    for (double v : a) {
        m = std::max(m, std::abs(v));
    }
    return m;
}

orc::TabularPolicy random_policy(std::size_t vocab, std::size_t steps, Rng& rng) {
    orc::TabularPolicy p;
    p.vocab = vocab;
    p.steps = steps;
    p.logits.resize(vocab + (steps == 2 ? vocab * vocab : 0));
    for (double& l : p.logits) {
        l = rng.normal();
    }
    return p;
}

orc::RewardFn table_reward(const orc::TabularPolicy& p, Rng& rng) {
    std::vector<double> table(p.outcomes());
    for (double& r : table) {
        r = rng.uniform();
    }
    const std::size_t vocab = p.vocab;
    return [table, vocab](std::span<const std::size_t> z) {
        std::size_t idx = 0;
        for (std::size_t t : z) {
            idx = idx * vocab + t;
        }
        return table[idx];
    };
}

Parameters perturbed_model(const ModelConfig& cfg, std::uint64_t seed, double scale) {
    Parameters p = init_params(cfg, seed);
    Rng rng(mix_seed(seed, 77));
    for (double& w : p.mutable_values()) {
        w += scale * rng.normal();
    }
    return p;
}

Parameters from_values(const ModelConfig& cfg, std::span<const double> w) {
    Parameters p(cfg);
    auto dst = p.mutable_values();
    std::copy(w.begin(), w.end(), dst.begin());
    return p;
}

}  // namespace

CheckResult check_kl_chain(std::uint64_t seed, std::size_t pairs) {
    Timer timer;
    auto res = make_result("kl_chain_bound", seed);
    bool ok = pairs >= 100;
    double worst_excess = -INFINITY;  // sequence_kl - stepwise_sum
    double worst_len1 = 0.0;
    double max_gap = 0.0;
    std::size_t holds = 0;
    for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t vocab = 2 + i % 3;
        const std::size_t length = 1 + (i / 3) % 4;
        const auto p = orc::AutoregressiveTable::random(vocab, length, mix_seed(seed, 2 * i));
        const auto q = orc::AutoregressiveTable::random(vocab, length, mix_seed(seed, 2 * i + 1));
        const auto r = orc::exact_sequence_kl(p, q);
        const double excess = r.sequence_kl - r.stepwise_sum;
        worst_excess = std::max(worst_excess, excess);
        max_gap = std::max(max_gap, std::abs(excess));
        if (r.sequence_kl <= r.stepwise_sum + 1e-9) {
            ++holds;
        } else {
            ok = false;
        }
        if (length == 1) {
            worst_len1 = std::max(worst_len1, std::abs(excess));
            if (std::abs(excess) > 1e-9) {
                ok = false;
            }
        }
    }
    const auto same = orc::AutoregressiveTable::random(3, 3, mix_seed(seed, 999));
    const auto self = orc::exact_sequence_kl(same, same);
    const bool identical_zero = std::abs(self.sequence_kl) < 1e-12 && std::abs(self.stepwise_sum) < 1e-12;
    ok = ok && identical_zero;
    res.details["pairs"] = pairs;
    res.details["bound_holds"] = holds;
    res.details["max_sequence_minus_stepwise"] = worst_excess;
    res.details["max_abs_gap"] = max_gap;
    res.details["max_abs_gap_length1"] = worst_len1;
    res.details["identical_tables_zero"] = identical_zero;
    res.passed = ok;
    res.seconds = timer.seconds();
    return res;
}

CheckResult check_score_function(std::uint64_t seed, std::size_t mc_samples) {
    Timer timer;
    auto res = make_result("score_function_estimator", seed);
    Rng rng(seed);
    bool ok = true;

    const std::vector<std::pair<std::size_t, std::size_t>> shapes{{2, 1}, {3, 1}, {4, 1}, {2, 2}, {3, 2}};
    double worst_enum = 0.0;
    double worst_baseline = 0.0;
    ordered_json mc = ordered_json::array();
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        const auto policy = random_policy(shapes[k].first, shapes[k].second, rng);
        const auto reward = table_reward(policy, rng);
        // Monte-Carlo on one single-step and one two-step policy.
        const bool run_mc = k == 1 || k == 3;
        const auto plain = orc::reinforce_gradient_check(policy, reward, run_mc ? mc_samples : 1, mix_seed(seed, k));
        const auto shifted = orc::reinforce_gradient_check(policy, reward, 1, mix_seed(seed, k), 0.7);
        worst_enum = std::max(worst_enum, plain.max_enum_error);
        const double base_err = std::max(max_abs_diff(shifted.score_function, plain.score_function),
                                         max_abs_diff(shifted.score_function, plain.exact));
        worst_baseline = std::max(worst_baseline, base_err);
        ok = ok && plain.enumeration_ok && base_err <= 1e-8;
        if (run_mc) {
            ok = ok && plain.monte_carlo_ok;
            mc.push_back({{"vocab", policy.vocab},
                          {"steps", policy.steps},
                          {"samples", mc_samples},
                          {"max_sigma", plain.max_mc_sigma},
                          {"within_3se", plain.monte_carlo_ok}});
        }
    }

    // Constant reward: the gradient of the expectation vanishes.
    const auto flat_policy = random_policy(3, 2, rng);
    const auto flat = orc::reinforce_gradient_check(
        flat_policy, [](std::span<const std::size_t>) { return 2.5; }, 1, seed);
    const double flat_err = std::max(max_abs(flat.exact), max_abs(flat.score_function));
    ok = ok && flat_err <= 1e-12;

    // Two outcomes with rewards {1, 0}: d p / d logit_0 = p (1 - p).
    orc::TabularPolicy two;
    two.vocab = 2;
    two.steps = 1;
    two.logits = {0.4, -0.3};
    const double p0 = 1.0 / (1.0 + std::exp(-0.7));
    const auto bin = orc::reinforce_gradient_check(
        two, [](std::span<const std::size_t> z) { return z[0] == 0 ? 1.0 : 0.0; }, 1, seed);
    const double bin_err = std::abs(bin.exact[0] - p0 * (1.0 - p0));
    ok = ok && bin_err <= 1e-12 && bin.enumeration_ok;

    res.details["policies"] = shapes.size();
    res.details["max_enumeration_error"] = worst_enum;
    res.details["max_baseline_shift_error"] = worst_baseline;
    res.details["monte_carlo"] = mc;
    res.details["constant_reward_max_gradient"] = flat_err;
    res.details["two_outcome_error"] = bin_err;
    res.passed = ok;
    res.seconds = timer.seconds();
    return res;
}

CheckResult check_model_gradients(std::uint64_t seed, std::size_t coordinates, double eps) {
    Timer timer;
    auto res = make_result("model_gradients", seed);
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.width = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_len = 40;
    cfg.classification_head = true;
    const Parameters model = perturbed_model(cfg, mix_seed(seed, 1), 0.3);
    Parameters lm = perturbed_model(cfg, mix_seed(seed, 2), 0.3);
    lm.freeze();

    const std::vector<Utterance> history{{Speaker::A, {8, 9, 10, 11}}, {Speaker::B, {12, 13, 14}}};
    const TokenSeq z{9, 15, special::kSep, 10, 11};
    const TokenSeq y{12, 8, special::kEos};
    const TokenSeq distractor{13, 13, 15, special::kEos};
    const std::vector<TokenSeq> sentences{{9, 15}, {10, 11, 14}};
    const double gamma = 0.5;

    struct Term {
        const char* name;
        std::function<double(const Parameters&, Gradient&, double)> eval;  // weight 0: value only
    };
    const std::vector<Term> terms{
        {"response_nll",
         [&](const Parameters& p, Gradient& g, double w) {
             return w * response_nll_gradient(p, history, z, Speaker::A, y, w, g);
         }},
        {"kl_penalty",
         [&](const Parameters& p, Gradient& g, double w) {
             return w * gamma * sigma_path_gradient(p, &lm, history, z, true, 0.0, w * gamma, 0, g).kl;
         }},
        {"score_term",
         [&](const Parameters& p, Gradient& g, double w) {
             return -w * sigma_path_gradient(p, nullptr, history, z, true, w, 0.0, 0, g).logprob;
         }},
        {"knowledge_nll",
         [&](const Parameters& p, Gradient& g, double w) {
             return w * knowledge_nll_gradient(p, history, sentences, w, g);
         }},
        {"classification",
         [&](const Parameters& p, Gradient& g, double w) {
             return w * classification_gradient(p, history, z, Speaker::A, y, distractor, w, g);
         }},
    };

    bool ok = coordinates >= 200;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        Gradient analytic(model);
        terms[k].eval(model, analytic, 1.0);
        auto loss = [&](std::span<const double> w) {
            const Parameters p = from_values(cfg, w);
            Gradient scratch(p);
            return terms[k].eval(p, scratch, 1.0);
        };
        const auto rep = orc::finite_difference_check(loss, model.values(), analytic.values(), eps, coordinates,
                                                      mix_seed(seed, 100 + k));
        const bool term_ok = rep.max_rel_error < 1e-4;
        ok = ok && term_ok;
        res.details[terms[k].name] = {{"coordinates", rep.coordinates},
                                      {"max_rel_error", rep.max_rel_error},
                                      {"max_abs_error", rep.max_abs_error},
                                      {"max_rel_error_two_point", rep.max_rel_error_central},
                                      {"passed", term_ok}};
    }
    res.details["eps"] = eps;
    res.details["parameters"] = model.size();
    res.passed = ok;
    res.seconds = timer.seconds();
    return res;
}

CheckResult check_residual_bound(std::uint64_t seed, std::size_t joints) {
    Timer timer;
    auto res = make_result("residual_bound", seed);
    bool ok = joints >= 50;

    std::size_t holds = 0;
    std::size_t informative = 0;
    std::size_t lemma = 0;
    std::size_t best_response = 0;
    std::size_t triples = 0;
    double max_violation = -INFINITY;
    double max_gap = 0.0;
    for (std::size_t i = 0; i < joints; ++i) {
        const auto j = orc::random_joint(3, 3, 3, mix_seed(seed, i), true);
        const auto r = orc::residual_bound_check(j);
        triples += r.checked;
        max_violation = std::max(max_violation, r.max_violation);
        max_gap = std::max(max_gap, r.max_gap);
        holds += r.bound_holds ? 1 : 0;
        ok = ok && r.bound_holds;
        if (r.z_informative) {
            ++informative;
            lemma += r.lemma_holds ? 1 : 0;
            best_response += r.best_response_holds ? 1 : 0;
            ok = ok && r.lemma_holds && r.best_response_holds;
        }
    }

    // z independent of (x, y): residual and bound both vanish.
    orc::DiscreteJoint indep(3, 3, 3);
    {
        const auto a = orc::random_joint(3, 3, 1, mix_seed(seed, 5000), false);
        const auto b = orc::random_joint(1, 1, 3, mix_seed(seed, 5001), false);
        for (std::size_t x = 0; x < 3; ++x)
            for (std::size_t y = 0; y < 3; ++y)
                for (std::size_t z = 0; z < 3; ++z) indep.at(x, y, z) = a.at(x, y, 0) * b.at(0, 0, z);
    }
    const auto ri = orc::residual_bound_check(indep);
    const bool indep_equal = ri.bound_holds && ri.max_gap <= 1e-9 && !ri.z_informative;
    ok = ok && indep_equal;

    // z copies y and x is independent of both: residual is -log P(y|x) > 0.
    orc::DiscreteJoint copy(3, 3, 3);
    {
        const auto a = orc::random_joint(3, 1, 1, mix_seed(seed, 5002), false);
        const auto b = orc::random_joint(1, 3, 1, mix_seed(seed, 5003), false);
        for (std::size_t x = 0; x < 3; ++x)
            for (std::size_t y = 0; y < 3; ++y) copy.at(x, y, y) = a.at(x, 0, 0) * b.at(0, y, 0);
    }
    const auto rc = orc::residual_bound_check(copy);
    ok = ok && rc.bound_holds && rc.max_gap <= 1e-9 && rc.z_informative && rc.lemma_holds && rc.best_response_holds;

    // Dependent x and z: observed, not asserted.
    std::size_t dep_holds = 0;
    double dep_worst = -INFINITY;
    for (std::size_t i = 0; i < joints; ++i) {
        const auto r = orc::residual_bound_check(orc::random_joint(3, 3, 3, mix_seed(seed, 10000 + i), false));
        dep_holds += r.bound_holds ? 1 : 0;
        dep_worst = std::max(dep_worst, r.max_violation);
    }

    res.details["joints"] = joints;
    res.details["triples_checked"] = triples;
    res.details["bound_holds"] = holds;
    res.details["max_bound_minus_residual"] = max_violation;
    res.details["max_abs_gap"] = max_gap;
    res.details["informative_joints"] = informative;
    res.details["lemma_likelihood_holds"] = lemma;
    res.details["lemma_best_response_holds"] = best_response;
    res.details["z_independent_equality"] = indep_equal;
    res.details["z_copies_y_bound_holds"] = rc.bound_holds;
    res.details["dependent_suite"] = {{"joints", joints},
                                      {"bound_holds", dep_holds},
                                      {"max_bound_minus_residual", dep_worst},
                                      {"asserted", false}};
    res.passed = ok;
    res.seconds = timer.seconds();
    return res;
}

CheckResult check_mutual_information(std::uint64_t seed) {
    Timer timer;
    auto res = make_result("mutual_information", seed);
    const std::vector<double> indep{0.06, 0.14, 0.24, 0.56};  // (0.2, 0.8) x (0.3, 0.7)
    const auto mi_indep = orc::mutual_information(indep, 2, 2);
    const std::vector<double> copy{0.5, 0.0, 0.0, 0.5};
    const auto mi_copy = orc::mutual_information(copy, 2, 2);
    const auto j = orc::random_joint(4, 1, 4, seed, false);
    std::vector<double> xz(16);
    for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t z = 0; z < 4; ++z) xz[x * 4 + z] = j.at(x, 0, z);
    const auto mi_rand = orc::mutual_information(xz, 4, 4);
    const bool ok = std::abs(mi_indep.direct) < 1e-12 && std::abs(mi_copy.direct - std::numbers::ln2) < 1e-12 &&
                    mi_rand.forms_agree && mi_rand.direct >= 0.0;
    res.details["independent"] = mi_indep.direct;
    res.details["copied_bit"] = mi_copy.direct;
    res.details["random_direct"] = mi_rand.direct;
    res.details["random_kl_form"] = mi_rand.kl_form;
    res.passed = ok;
    res.seconds = timer.seconds();
    return res;
}

CheckResult check_metric_hand_cases() {
    Timer timer;
    auto res = make_result("metric_hand_cases", 0);
    // With every weight zero the logits equal the output bias at every position.
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.width = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.max_len = 16;
    auto fixed_model = [&](const std::vector<std::pair<TokenId, double>>& probs) {
        Parameters p(cfg);
        auto w = p.mutable_values();
        double rest = 1.0;
        for (const auto& pr : probs) rest -= pr.second;
        const double other = rest / static_cast<double>(cfg.vocab_size - probs.size());
        for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
            w[p.layout().b_out + t] = std::log(other);
        }
        for (const auto& [t, pr] : probs) {
            w[p.layout().b_out + static_cast<std::size_t>(t)] = std::log(pr);
        }
        return p;
    };
    Example ex;
    ex.history = {{Speaker::A, {9, 10}}};

    ex.response = {8};
    const double one = perplexity(fixed_model({{8, 0.25}}), std::span(&ex, 1), 0);
    ex.response = {8, 9};
    const double two = perplexity(fixed_model({{8, 0.5}, {9, 0.125}}), std::span(&ex, 1), 0);
    const double uniform = perplexity(fixed_model({}), std::span(&ex, 1), 0);

    const TokenSeq a{20, 21}, b{21, 22}, c{20, 21, 22};
    const double f_same = unigram_f1(c, c);
    const double f_half = unigram_f1(a, b);
    const double f_empty = unigram_f1({}, c);
    const double f_sym = std::abs(unigram_f1(a, c) - unigram_f1(c, a));

    GapCurve curve{"ppl", "", "", {{0, 10.0}, {kFullKnowledge, 20.0}}};
    const double var = gap_variance(curve);

    const bool ok = std::abs(one - 4.0) < 1e-9 && std::abs(two - 4.0) < 1e-9 && std::abs(uniform - 12.0) < 1e-9 &&
                    f_same == 100.0 && std::abs(f_half - 50.0) < 1e-12 && f_empty == 0.0 && f_sym < 1e-12 &&
                    std::abs(var - 25.0) < 1e-12;
    res.details["ppl_single_token"] = one;
    res.details["ppl_two_tokens"] = two;
    res.details["ppl_uniform_v12"] = uniform;
    res.details["f1_identical"] = f_same;
    res.details["f1_half_overlap"] = f_half;
    res.details["f1_empty_prediction"] = f_empty;
    res.details["gap_variance_10_20"] = var;
    res.passed = ok;
    res.seconds = timer.seconds();
    return res;
}

CheckResult check_hits_calibration(std::uint64_t seed, std::size_t trials) {
    Timer timer;
    auto res = make_result("hits_calibration", seed);
    SynthConfig sc;
    sc.dialogues = (trials + 1) / 2;
    sc.turns = 4;
    sc.response_noise_tokens = 3;
    sc.seed = mix_seed(seed, 31);
    const auto text = synthesize_corpus(sc);
    const auto vocab = build_vocab(corpus_texts(text), sc.vocab_size);
    const auto corpus = encode_corpus(text, vocab);
    auto examples = make_examples(corpus.dialogues);
    examples.resize(std::min(examples.size(), trials));

    ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.width = 16;
    mc.layers = 2;
    mc.heads = 2;
    const Parameters untrained = init_params(mc, mix_seed(seed, 32));

    HitsOptions h20{20, mix_seed(seed, 33), false};
    HitsOptions h100{100, mix_seed(seed, 34), false};
    const double hits20 = hits_at_1(untrained, examples, 0, h20);
    const double hits100 = hits_at_1(untrained, examples, 0, h100);
    res.details["trials"] = examples.size();
    res.details["hits1_20"] = hits20;
    res.details["hits1_100"] = hits100;
    res.details["range_20"] = {3.0, 7.0};
    res.details["range_100"] = {0.4, 1.8};
    res.passed = examples.size() >= 2000 && hits20 >= 3.0 && hits20 <= 7.0 && hits100 >= 0.4 && hits100 <= 1.8;
    res.seconds = timer.seconds();
    return res;
}

std::vector<CheckResult> run_verify_suite(std::uint64_t seed, bool include_calibration) {
    std::vector<CheckResult> out;
    out.push_back(check_kl_chain(mix_seed(seed, 1)));
    out.push_back(check_score_function(mix_seed(seed, 2)));
    out.push_back(check_model_gradients(mix_seed(seed, 3)));
    out.push_back(check_residual_bound(mix_seed(seed, 4)));
    out.push_back(check_mutual_information(mix_seed(seed, 5)));
    out.push_back(check_metric_hand_cases());
    if (include_calibration) {
        out.push_back(check_hits_calibration(mix_seed(seed, 6)));
    }
    return out;
}

nlohmann::ordered_json verify_report_json(const std::vector<CheckResult>& results) {
    ordered_json j;
    bool all = true;
    ordered_json checks = ordered_json::array();
    for (const auto& r : results) {
        all = all && r.passed;
        checks.push_back({{"name", r.name},
                          {"passed", r.passed},
                          {"seed", r.seed},
                          {"seconds", r.seconds},
                          {"details", r.details}});
    }
    j["passed"] = all;
    j["checks"] = checks;
    return j;
}

}  // namespace decouple
