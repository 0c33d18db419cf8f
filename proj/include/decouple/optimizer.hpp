#pragma once

#include <string>
#include <vector>

#include "decouple/params.hpp"

namespace decouple {

enum class Schedule { Constant, Linear, Cosine };

Schedule parse_schedule(const std::string& name);
std::string schedule_name(Schedule s);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;     // 0 disables clipping
    double warmup_frac = 0.05;  // fraction of total steps with linear warmup
    Schedule schedule = Schedule::Cosine;
    std::size_t total_steps = 1;
};

/// Adam with global-norm gradient clipping and a warmup + decay schedule.
class Adam {
public:
    Adam(std::size_t n_params, const AdamConfig& cfg);

    double learning_rate_at(std::size_t step) const;

    /// Clips `grad` in place and applies one update. Returns the pre-clip norm.
    double step(Parameters& params, Gradient& grad);

    std::size_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

}  // namespace decouple
