#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace decouple::oracle {

/// Exact joint P(x, y, z) over small finite alphabets.
struct DiscreteJoint {
    std::size_t nx = 0, ny = 0, nz = 0;
    std::vector<double> p;  // index (x * ny + y) * nz + z

    DiscreteJoint() = default;
    DiscreteJoint(std::size_t nx_, std::size_t ny_, std::size_t nz_)
        : nx(nx_), ny(ny_), nz(nz_), p(nx_ * ny_ * nz_, 0.0) {}

    double& at(std::size_t x, std::size_t y, std::size_t z) { return p[(x * ny + y) * nz + z]; }
    double at(std::size_t x, std::size_t y, std::size_t z) const { return p[(x * ny + y) * nz + z]; }

    double px(std::size_t x) const;
    double pz(std::size_t z) const;
    double pxy(std::size_t x, std::size_t y) const;
    double pxz(std::size_t x, std::size_t z) const;

    /// Entries non-negative and summing to 1 within 1e-12; throws otherwise.
    void validate() const;
};

/// Random joint with every entry >= min_prob (rejection). With
/// `xz_independent` the joint is built as P(x) P(z) P(y | x, z).
DiscreteJoint random_joint(std::size_t nx, std::size_t ny, std::size_t nz, std::uint64_t seed, bool xz_independent,
                           double min_prob = 1e-6);

/// Fixed-length autoregressive distribution over vocab^length sequences,
/// stored as one conditional per prefix.
class AutoregressiveTable {
public:
    AutoregressiveTable(std::size_t vocab, std::size_t length);

    std::size_t vocab() const { return vocab_; }
    std::size_t length() const { return length_; }

    std::span<double> conditional(std::span<const std::size_t> prefix);
    std::span<const double> conditional(std::span<const std::size_t> prefix) const;

    double sequence_prob(std::span<const std::size_t> seq) const;
    void validate() const;

    static AutoregressiveTable random(std::size_t vocab, std::size_t length, std::uint64_t seed,
                                      double min_prob = 1e-6);

private:
    std::size_t index(std::span<const std::size_t> prefix) const;

    std::size_t vocab_;
    std::size_t length_;
    std::vector<std::size_t> level_offset_;
    std::vector<double> table_;
};

struct SequenceKlReport {
    double sequence_kl = 0.0;
    double stepwise_sum = 0.0;
    bool bound_holds = false;  // sequence_kl <= stepwise_sum + 1e-9
};

/// Enumerates every sequence. Throws std::invalid_argument when vocab^length > 1e6
/// or the tables disagree in shape.
SequenceKlReport exact_sequence_kl(const AutoregressiveTable& p, const AutoregressiveTable& q);

/// Softmax policy over one or two steps; the second step's logits depend on the first token.
struct TabularPolicy {
    std::size_t vocab = 2;
    std::size_t steps = 1;
    std::vector<double> logits;  // vocab (+ vocab * vocab when steps == 2)

    std::vector<double> step_probs(std::size_t step, std::size_t previous) const;
    double prob(std::span<const std::size_t> z) const;
    /// Gradient of log prob(z) with respect to the logits.
    std::vector<double> grad_log_prob(std::span<const std::size_t> z) const;
    std::size_t outcomes() const;
    std::vector<std::size_t> outcome(std::size_t index) const;
};

using RewardFn = std::function<double(std::span<const std::size_t>)>;

struct ReinforceReport {
    std::vector<double> exact;           // d/dtheta E[reward], by Jacobian of the enumerated expectation
    std::vector<double> score_function;  // E[(reward - baseline) grad log p], enumerated
    std::vector<double> monte_carlo;
    std::vector<double> monte_carlo_stderr;
    double max_enum_error = 0.0;     // |exact - score_function|
    double max_mc_sigma = 0.0;       // worst |mc - exact| / stderr
    bool enumeration_ok = false;     // max_enum_error <= 1e-8
    bool monte_carlo_ok = false;     // within 3 standard errors on every coordinate
};

ReinforceReport reinforce_gradient_check(const TabularPolicy& policy, const RewardFn& reward,
                                         std::size_t mc_samples, std::uint64_t seed, double baseline = 0.0);

struct FiniteDifferenceReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    double max_rel_error_central = 0.0;  // two-point stencil, for comparison
    std::size_t coordinates = 0;
};

/// Fourth-order central differences (f(x-2e), f(x-e), f(x+e), f(x+2e)) on a
/// random subset of coordinates; relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
/// Throws std::runtime_error when the loss is not reproducible at a fixed point.
FiniteDifferenceReport finite_difference_check(const std::function<double(std::span<const double>)>& loss,
                                               std::span<const double> params,
                                               std::span<const double> analytic, double eps,
                                               std::size_t coordinates, std::uint64_t seed,
                                               double scale_floor = 1e-6);

struct ResidualReport {
    std::size_t checked = 0;
    std::size_t skipped_zero_mass = 0;
    double max_violation = 0.0;  // max over triples of (bound - residual), <= 0 when the bound holds
    double max_gap = 0.0;        // max |residual - bound|
    bool bound_holds = false;
    double xz_dependence = 0.0;  // max |P(x,z) - P(x)P(z)|
    // Lemma: the best model with z beats the best model without it.
    double expected_ll_with_z = 0.0;
    double expected_ll_without_z = 0.0;
    double conditional_mi_yz = 0.0;  // I(Y;Z|X)
    bool z_informative = false;
    bool lemma_holds = false;         // strict likelihood gain whenever z is informative
    bool best_response_holds = false;  // E_z max_y P(y|x,z) >= max_y P(y|x) for every x
};

/// The optimal models are the exact conditionals of `joint`.
ResidualReport residual_bound_check(const DiscreteJoint& joint, double slack = 1e-9);

struct MutualInformation {
    double direct = 0.0;   // E log p(x,z) / (p(x) p(z))
    double kl_form = 0.0;  // E_x KL(p(z|x) || p(z))
    bool forms_agree = false;
};

/// `joint_xz` is row-major nx x nz.
MutualInformation mutual_information(std::span<const double> joint_xz, std::size_t nx, std::size_t nz);

}  // namespace decouple::oracle
