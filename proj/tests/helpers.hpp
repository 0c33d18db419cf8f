#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "decouple/params.hpp"
#include "decouple/random.hpp"
#include "decouple/vocab.hpp"

namespace testing {

/// Directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("decouple-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline decouple::ModelConfig tiny_config(std::size_t vocab = 16, std::size_t width = 8, bool head = false) {
    decouple::ModelConfig c;
    c.vocab_size = vocab;
    c.width = width;
    c.layers = 2;
    c.heads = 2;
    c.max_len = 48;
    c.classification_head = head;
    return c;
}

/// Random weights with a larger spread than the default init so that
/// attention patterns and gradients are far from trivial.
inline decouple::Parameters rough_params(const decouple::ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
    auto p = decouple::init_params(cfg, seed);
    decouple::Rng rng(decouple::mix_seed(seed, 99));
    for (auto& w : p.mutable_values()) {
        w += scale * rng.normal();
    }
    return p;
}

/// All weights zero except the output bias, so every position predicts the
/// same distribution: `probs` for the listed tokens, the rest shared equally.
inline decouple::Parameters bias_model(const decouple::ModelConfig& cfg,
                                       const std::vector<std::pair<decouple::TokenId, double>>& probs) {
    decouple::Parameters p(cfg);
    auto w = p.mutable_values();
    double rest = 1.0;
    for (const auto& pr : probs) rest -= pr.second;
    const double other = rest / static_cast<double>(cfg.vocab_size - probs.size());
    for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
        w[p.layout().b_out + t] = other > 0.0 ? std::log(other) : -200.0;
    }
    for (const auto& [t, pr] : probs) {
        w[p.layout().b_out + static_cast<std::size_t>(t)] = std::log(pr);
    }
    return p;
}

}  // namespace testing
