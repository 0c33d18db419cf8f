#include "decouple/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "decouple/error.hpp"

namespace decouple {

Schedule parse_schedule(const std::string& name) {
    if (name == "constant") return Schedule::Constant;
    if (name == "linear") return Schedule::Linear;
    if (name == "cosine") return Schedule::Cosine;
    throw ConfigError("unknown schedule '" + name + "' (expected constant, linear or cosine)");
}

std::string schedule_name(Schedule s) {
    switch (s) {
        case Schedule::Constant: return "constant";
        case Schedule::Linear: return "linear";
        case Schedule::Cosine: return "cosine";
    }
    return "?";
}

Adam::Adam(std::size_t n_params, const AdamConfig& cfg) : cfg_(cfg), m_(n_params, 0.0), v_(n_params, 0.0) {
    if (cfg.learning_rate <= 0.0 || cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0) {
        throw ConfigError("adam: invalid hyperparameters");
    }
    if (cfg.warmup_frac < 0.0 || cfg.warmup_frac >= 1.0) {
        throw ConfigError("adam: warmup fraction must lie in [0, 1)");
    }
    cfg_.total_steps = std::max<std::size_t>(cfg.total_steps, 1);
}

double Adam::learning_rate_at(std::size_t step) const {
    const double total = static_cast<double>(cfg_.total_steps);
    const double warmup = std::floor(cfg_.warmup_frac * total);
    const double s = static_cast<double>(step);
    if (s < warmup) {
        return cfg_.learning_rate * (s + 1.0) / warmup;
    }
    const double progress = std::clamp((s - warmup) / std::max(1.0, total - warmup), 0.0, 1.0);
    switch (cfg_.schedule) {
        case Schedule::Constant: return cfg_.learning_rate;
        case Schedule::Linear: return cfg_.learning_rate * (1.0 - 0.9 * progress);
        case Schedule::Cosine:
            return cfg_.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    return cfg_.learning_rate;
}

double Adam::step(Parameters& params, Gradient& grad) {
    if (grad.size() != m_.size()) {
        throw ConfigError("adam: gradient size does not match optimizer state");
    }
    auto w = params.mutable_values();
    const double norm = grad.norm();
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
        grad.scale(cfg_.clip_norm / norm);
    }
    const double lr = learning_rate_at(t_);
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto g = grad.values();
    for (std::size_t i = 0; i < m_.size(); ++i) {
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g[i];
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
    return norm;
}

}  // namespace decouple
