#include "decouple/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "decouple/random.hpp"

namespace decouple::oracle {

namespace {

// Uniform draw from the probability simplex (normalised exponentials).
std::vector<double> random_simplex(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    double total = 0.0;
    for (auto& x : v) {
        double u = rng.uniform();
        while (u <= 0.0) {
            u = rng.uniform();
        }
        x = -std::log(u);
        total += x;
    }
    for (auto& x : v) {
        x /= total;
    }
    return v;
}

std::vector<double> random_simplex_floor(Rng& rng, std::size_t n, double min_prob) {
    for (;;) {
        auto v = random_simplex(rng, n);
        if (std::all_of(v.begin(), v.end(), [&](double x) { return x >= min_prob; })) {
            return v;
        }
    }
}

std::vector<double> softmax(std::span<const double> logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        s += p[i];
    }
    for (auto& x : p) {
        x /= s;
    }
    return p;
}

}  // namespace

double DiscreteJoint::px(std::size_t x) const {
    double s = 0.0;
    for (std::size_t y = 0; y < ny; ++y) {
        for (std::size_t z = 0; z < nz; ++z) {
            s += at(x, y, z);
        }
    }
    return s;
}

double DiscreteJoint::pz(std::size_t z) const {
    double s = 0.0;
    for (std::size_t x = 0; x < nx; ++x) {
        for (std::size_t y = 0; y < ny; ++y) {
            s += at(x, y, z);
        }
    }
    return s;
}

double DiscreteJoint::pxy(std::size_t x, std::size_t y) const {
    double s = 0.0;
    for (std::size_t z = 0; z < nz; ++z) {
        s += at(x, y, z);
    }
    return s;
}

double DiscreteJoint::pxz(std::size_t x, std::size_t z) const {
    double s = 0.0;
    for (std::size_t y = 0; y < ny; ++y) {
        s += at(x, y, z);
    }
    return s;
}

void DiscreteJoint::validate() const {
    if (p.size() != nx * ny * nz || p.empty()) {
        throw std::invalid_argument("DiscreteJoint: table size does not match alphabets");
    }
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) {
            throw std::invalid_argument("DiscreteJoint: negative or NaN entry");
        }
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw std::invalid_argument("DiscreteJoint: entries do not sum to 1");
    }
}

DiscreteJoint random_joint(std::size_t nx, std::size_t ny, std::size_t nz, std::uint64_t seed, bool xz_independent,
                           double min_prob) {
    Rng rng(seed);
    DiscreteJoint j(nx, ny, nz);
    for (;;) {
        if (xz_independent) {
            const auto px = random_simplex(rng, nx);
            const auto pz = random_simplex(rng, nz);
            for (std::size_t x = 0; x < nx; ++x) {
                for (std::size_t z = 0; z < nz; ++z) {
                    const auto py = random_simplex(rng, ny);
                    for (std::size_t y = 0; y < ny; ++y) {
                        j.at(x, y, z) = px[x] * pz[z] * py[y];
                    }
                }
            }
        } else {
            j.p = random_simplex(rng, nx * ny * nz);
        }
        if (std::all_of(j.p.begin(), j.p.end(), [&](double v) { return v >= min_prob; })) {
            break;
        }
    }
    // Renormalise away accumulated round-off.
    const double total = std::accumulate(j.p.begin(), j.p.end(), 0.0);
    for (auto& v : j.p) {
        v /= total;
    }
    return j;
}

AutoregressiveTable::AutoregressiveTable(std::size_t vocab, std::size_t length) : vocab_(vocab), length_(length) {
    if (vocab < 1 || length < 1) {
        throw std::invalid_argument("AutoregressiveTable: vocab and length must be >= 1");
    }
    std::size_t offset = 0;
    std::size_t level = 1;
    for (std::size_t k = 0; k < length; ++k) {
        level_offset_.push_back(offset);
        offset += level;
        level *= vocab;
    }
    table_.assign(offset * vocab, 1.0 / static_cast<double>(vocab));
}

std::size_t AutoregressiveTable::index(std::span<const std::size_t> prefix) const {
    if (prefix.size() >= length_) {
        throw std::out_of_range("AutoregressiveTable: prefix too long");
    }
    std::size_t code = 0;
    for (auto t : prefix) {
        if (t >= vocab_) {
            throw std::out_of_range("AutoregressiveTable: token out of range");
        }
        code = code * vocab_ + t;
    }
    return (level_offset_[prefix.size()] + code) * vocab_;
}

std::span<double> AutoregressiveTable::conditional(std::span<const std::size_t> prefix) {
    return std::span<double>(table_).subspan(index(prefix), vocab_);
}

std::span<const double> AutoregressiveTable::conditional(std::span<const std::size_t> prefix) const {
    return std::span<const double>(table_).subspan(index(prefix), vocab_);
}

double AutoregressiveTable::sequence_prob(std::span<const std::size_t> seq) const {
    double p = 1.0;
    for (std::size_t k = 0; k < seq.size(); ++k) {
        p *= conditional(seq.first(k))[seq[k]];
    }
    return p;
}

void AutoregressiveTable::validate() const {
    for (std::size_t i = 0; i < table_.size(); i += vocab_) {
        double s = 0.0;
        for (std::size_t v = 0; v < vocab_; ++v) {
            if (!(table_[i + v] >= 0.0)) {
                throw std::invalid_argument("AutoregressiveTable: negative entry");
            }
            s += table_[i + v];
        }
        if (std::abs(s - 1.0) > 1e-12) {
            throw std::invalid_argument("AutoregressiveTable: conditional does not sum to 1");
        }
    }
}

AutoregressiveTable AutoregressiveTable::random(std::size_t vocab, std::size_t length, std::uint64_t seed,
                                                double min_prob) {
    AutoregressiveTable t(vocab, length);
    Rng rng(seed);
    for (std::size_t i = 0; i < t.table_.size(); i += vocab) {
        const auto row = random_simplex_floor(rng, vocab, min_prob);
        std::copy(row.begin(), row.end(), t.table_.begin() + static_cast<std::ptrdiff_t>(i));
    }
    return t;
}

SequenceKlReport exact_sequence_kl(const AutoregressiveTable& p, const AutoregressiveTable& q) {
    if (p.vocab() != q.vocab() || p.length() != q.length()) {
        throw std::invalid_argument("exact_sequence_kl: tables differ in shape");
    }
    const double count = std::pow(static_cast<double>(p.vocab()), static_cast<double>(p.length()));
    if (count > 1e6) {
        throw std::invalid_argument("exact_sequence_kl: enumeration too large");
    }
    const std::size_t V = p.vocab();
    const std::size_t N = p.length();
    SequenceKlReport r;

    // Sequence level: enumerate every full sequence.
    std::vector<std::size_t> seq(N, 0);
    for (;;) {
        const double ps = p.sequence_prob(seq);
        const double qs = q.sequence_prob(seq);
        if (ps > 0.0) {
            r.sequence_kl += ps * std::log(ps / qs);
        }
        std::size_t k = N;
        while (k > 0 && ++seq[k - 1] == V) {
            seq[k - 1] = 0;
            --k;
        }
        if (k == 0) {
            break;
        }
    }

    // Step level: every prefix, weighted by its probability under p.
    std::vector<std::size_t> prefix;
    std::function<void(double)> visit = [&](double weight) {
        const auto pc = p.conditional(prefix);
        const auto qc = q.conditional(prefix);
        double kl = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            if (pc[v] > 0.0) {
                kl += pc[v] * std::log(pc[v] / qc[v]);
            }
        }
        r.stepwise_sum += weight * kl;
        if (prefix.size() + 1 < N) {
            for (std::size_t v = 0; v < V; ++v) {
                prefix.push_back(v);
                visit(weight * pc[v]);
                prefix.pop_back();
            }
        }
    };
    visit(1.0);
    r.bound_holds = r.sequence_kl <= r.stepwise_sum + 1e-9;
    return r;
}

std::vector<double> TabularPolicy::step_probs(std::size_t step, std::size_t previous) const {
    if (step == 0) {
        return softmax(std::span<const double>(logits).first(vocab));
    }
    return softmax(std::span<const double>(logits).subspan(vocab + previous * vocab, vocab));
}

std::size_t TabularPolicy::outcomes() const { return steps == 1 ? vocab : vocab * vocab; }

std::vector<std::size_t> TabularPolicy::outcome(std::size_t index) const {
    if (steps == 1) {
        return {index};
    }
    return {index / vocab, index % vocab};
}

double TabularPolicy::prob(std::span<const std::size_t> z) const {
    double p = step_probs(0, 0)[z[0]];
    if (steps == 2) {
        p *= step_probs(1, z[0])[z[1]];
    }
    return p;
}

std::vector<double> TabularPolicy::grad_log_prob(std::span<const std::size_t> z) const {
    std::vector<double> g(logits.size(), 0.0);
    const auto p1 = step_probs(0, 0);
    for (std::size_t j = 0; j < vocab; ++j) {
        g[j] = (j == z[0] ? 1.0 : 0.0) - p1[j];
    }
    if (steps == 2) {
        const auto p2 = step_probs(1, z[0]);
        for (std::size_t j = 0; j < vocab; ++j) {
            g[vocab + z[0] * vocab + j] = (j == z[1] ? 1.0 : 0.0) - p2[j];
        }
    }
    return g;
}

ReinforceReport reinforce_gradient_check(const TabularPolicy& policy, const RewardFn& reward, std::size_t mc_samples,
                                         std::uint64_t seed, double baseline) {
    const std::size_t V = policy.vocab;
    const std::size_t n = policy.logits.size();
    if (policy.steps < 1 || policy.steps > 2 || n != (policy.steps == 1 ? V : V + V * V)) {
        throw std::invalid_argument("reinforce_gradient_check: malformed policy");
    }
    ReinforceReport rep;
    rep.exact.assign(n, 0.0);
    rep.score_function.assign(n, 0.0);

    // (a) differentiate E[r] = sum_z p(z) r(z) through the softmax Jacobians.
    const auto p1 = policy.step_probs(0, 0);
    if (policy.steps == 1) {
        for (std::size_t j = 0; j < V; ++j) {
            for (std::size_t i = 0; i < V; ++i) {
                const std::size_t z[1] = {i};
                rep.exact[j] += reward(z) * p1[i] * ((i == j ? 1.0 : 0.0) - p1[j]);
            }
        }
    } else {
        std::vector<double> inner(V, 0.0);  // R_a = sum_b p2(b|a) r(a,b)
        for (std::size_t a = 0; a < V; ++a) {
            const auto p2 = policy.step_probs(1, a);
            for (std::size_t b = 0; b < V; ++b) {
                const std::size_t z[2] = {a, b};
                const double r = reward(z);
                inner[a] += p2[b] * r;
                for (std::size_t j = 0; j < V; ++j) {
                    rep.exact[V + a * V + j] += p1[a] * r * p2[b] * ((b == j ? 1.0 : 0.0) - p2[j]);
                }
            }
        }
        for (std::size_t j = 0; j < V; ++j) {
            for (std::size_t a = 0; a < V; ++a) {
                rep.exact[j] += inner[a] * p1[a] * ((a == j ? 1.0 : 0.0) - p1[j]);
            }
        }
    }

    // (b) expectation of the score-function estimator, enumerated.
    for (std::size_t o = 0; o < policy.outcomes(); ++o) {
        const auto z = policy.outcome(o);
        const double w = policy.prob(z) * (reward(z) - baseline);
        const auto g = policy.grad_log_prob(z);
        for (std::size_t j = 0; j < n; ++j) {
            rep.score_function[j] += w * g[j];
        }
    }

    // (c) Monte-Carlo estimate with per-coordinate standard errors.
    Rng rng(seed);
    std::vector<double> sum(n, 0.0), sum_sq(n, 0.0);
    for (std::size_t s = 0; s < mc_samples; ++s) {
        std::vector<std::size_t> z{rng.categorical(p1)};
        if (policy.steps == 2) {
            z.push_back(rng.categorical(policy.step_probs(1, z[0])));
        }
        const double w = reward(z) - baseline;
        const auto g = policy.grad_log_prob(z);
        for (std::size_t j = 0; j < n; ++j) {
            const double v = w * g[j];
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    rep.monte_carlo.resize(n);
    rep.monte_carlo_stderr.resize(n);
    rep.monte_carlo_ok = mc_samples > 1;
    const auto m = static_cast<double>(mc_samples);
    for (std::size_t j = 0; j < n; ++j) {
        rep.max_enum_error = std::max(rep.max_enum_error, std::abs(rep.exact[j] - rep.score_function[j]));
        if (mc_samples == 0) {
            continue;
        }
        const double mean = sum[j] / m;
        const double var = std::max(0.0, (sum_sq[j] / m - mean * mean) * m / std::max(1.0, m - 1.0));
        rep.monte_carlo[j] = mean;
        rep.monte_carlo_stderr[j] = std::sqrt(var / m);
        const double err = std::abs(mean - rep.exact[j]);
        const double se = rep.monte_carlo_stderr[j];
        if (se > 0.0) {
            rep.max_mc_sigma = std::max(rep.max_mc_sigma, err / se);
            if (err > 3.0 * se) {
                rep.monte_carlo_ok = false;
            }
        } else if (err > 1e-12) {
            rep.monte_carlo_ok = false;
        }
    }
    rep.enumeration_ok = rep.max_enum_error <= 1e-8;
    return rep;
}

FiniteDifferenceReport finite_difference_check(const std::function<double(std::span<const double>)>& loss,
                                               std::span<const double> params, std::span<const double> analytic,
                                               double eps, std::size_t coordinates, std::uint64_t seed,
                                               double scale_floor) {
    if (analytic.size() != params.size()) {
        throw std::invalid_argument("finite_difference_check: gradient size mismatch");
    }
    std::vector<double> x(params.begin(), params.end());
    const double base1 = loss(x);
    const double base2 = loss(x);
    if (base1 != base2) {
        throw std::runtime_error("finite_difference_check: loss is not deterministic at a fixed point");
    }
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    const std::size_t count = std::min(coordinates, idx.size());
    for (std::size_t i = 0; i < count; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    }
    FiniteDifferenceReport rep;
    rep.coordinates = count;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = idx[i];
        const double orig = x[c];
        auto at = [&](double offset) {
            x[c] = orig + offset;
            return loss(x);
        };
        const double up = at(eps), down = at(-eps), up2 = at(2.0 * eps), down2 = at(-2.0 * eps);
        x[c] = orig;
        const double central = (up - down) / (2.0 * eps);
        const double numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
        auto rel = [&](double n) {
            return std::abs(n - analytic[c]) / std::max({std::abs(n), std::abs(analytic[c]), scale_floor});
        };
        rep.max_abs_error = std::max(rep.max_abs_error, std::abs(numeric - analytic[c]));
        rep.max_rel_error = std::max(rep.max_rel_error, rel(numeric));
        rep.max_rel_error_central = std::max(rep.max_rel_error_central, rel(central));
    }
    return rep;
}

ResidualReport residual_bound_check(const DiscreteJoint& joint, double slack) {
    joint.validate();
    ResidualReport rep;
    rep.bound_holds = true;
    rep.max_violation = -std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < joint.nx; ++x) {
        for (std::size_t z = 0; z < joint.nz; ++z) {
            rep.xz_dependence =
                std::max(rep.xz_dependence, std::abs(joint.pxz(x, z) - joint.px(x) * joint.pz(z)));
        }
    }
    for (std::size_t x = 0; x < joint.nx; ++x) {
        const double px = joint.px(x);
        for (std::size_t y = 0; y < joint.ny; ++y) {
            const double pxy = joint.pxy(x, y);
            for (std::size_t z = 0; z < joint.nz; ++z) {
                const double pxyz = joint.at(x, y, z);
                const double pxz = joint.pxz(x, z);
                const double pz = joint.pz(z);
                if (pxyz <= 0.0 || pxz <= 0.0 || pxy <= 0.0 || pz <= 0.0) {
                    ++rep.skipped_zero_mass;
                    continue;
                }
                ++rep.checked;
                const double residual = std::log(pxyz / pxz) - std::log(pxy / px);
                const double bound = std::log(pxyz / (pxy * pz));
                rep.max_violation = std::max(rep.max_violation, bound - residual);
                rep.max_gap = std::max(rep.max_gap, std::abs(residual - bound));
                if (bound > residual + slack) {
                    rep.bound_holds = false;
                }
                rep.expected_ll_with_z += pxyz * std::log(pxyz / pxz);
                rep.expected_ll_without_z += pxyz * std::log(pxy / px);
            }
        }
    }
    rep.conditional_mi_yz = rep.expected_ll_with_z - rep.expected_ll_without_z;
    rep.z_informative = rep.conditional_mi_yz > 1e-9;
    rep.lemma_holds = !rep.z_informative || rep.expected_ll_with_z > rep.expected_ll_without_z;

    rep.best_response_holds = true;
    for (std::size_t x = 0; x < joint.nx; ++x) {
        const double px = joint.px(x);
        if (px <= 0.0) {
            continue;
        }
        double best_without = 0.0;
        for (std::size_t y = 0; y < joint.ny; ++y) {
            best_without = std::max(best_without, joint.pxy(x, y) / px);
        }
        double expected_best_with = 0.0;
        for (std::size_t z = 0; z < joint.nz; ++z) {
            const double pxz = joint.pxz(x, z);
            if (pxz <= 0.0) {
                continue;
            }
            double best = 0.0;
            for (std::size_t y = 0; y < joint.ny; ++y) {
                best = std::max(best, joint.at(x, y, z) / pxz);
            }
            expected_best_with += (pxz / px) * best;
        }
        if (expected_best_with + 1e-12 < best_without) {
            rep.best_response_holds = false;
        }
    }
    if (rep.checked == 0) {
        rep.max_violation = 0.0;
    }
    return rep;
}

MutualInformation mutual_information(std::span<const double> joint_xz, std::size_t nx, std::size_t nz) {
    if (joint_xz.size() != nx * nz) {
        throw std::invalid_argument("mutual_information: table size mismatch");
    }
    std::vector<double> px(nx, 0.0), pz(nz, 0.0);
    for (std::size_t x = 0; x < nx; ++x) {
        for (std::size_t z = 0; z < nz; ++z) {
            px[x] += joint_xz[x * nz + z];
            pz[z] += joint_xz[x * nz + z];
        }
    }
    MutualInformation mi;
    for (std::size_t x = 0; x < nx; ++x) {
        for (std::size_t z = 0; z < nz; ++z) {
            const double p = joint_xz[x * nz + z];
            if (p > 0.0) {
                mi.direct += p * std::log(p / (px[x] * pz[z]));
            }
        }
    }
    for (std::size_t x = 0; x < nx; ++x) {
        if (px[x] <= 0.0) {
            continue;
        }
        double kl = 0.0;
        for (std::size_t z = 0; z < nz; ++z) {
            const double cond = joint_xz[x * nz + z] / px[x];
            if (cond > 0.0) {
                kl += cond * std::log(cond / pz[z]);
            }
        }
        mi.kl_form += px[x] * kl;
    }
    mi.forms_agree = std::abs(mi.direct - mi.kl_form) <= 1e-12;
    return mi;
}

}  // namespace decouple::oracle
