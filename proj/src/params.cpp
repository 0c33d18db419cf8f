#include "decouple/params.hpp"

#include <cmath>

#include "decouple/error.hpp"
#include "decouple/random.hpp"

namespace decouple {

void ModelConfig::validate() const {
    if (vocab_size == 0 || width == 0 || layers == 0 || heads == 0 || max_len == 0 || state_tags == 0) {
        throw ConfigError("model config: all dimensions must be >= 1");
    }
    if (width % heads != 0) {
        throw ConfigError("model config: width must be divisible by heads");
    }
    if (state_tags < kStateTagCount) {
        throw ConfigError("model config: state_tags must cover HISTORY/KNOWLEDGE/RESPONSE/PAD");
    }
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
    const std::size_t d = cfg.width;
    const std::size_t f = cfg.ffn_width();
    std::size_t at = 0;
    auto take = [&](std::size_t n) {
        const auto off = at;
        at += n;
        return off;
    };
    tok_emb = take(cfg.vocab_size * d);
    pos_emb = take(cfg.max_len * d);
    state_emb = take(cfg.state_tags * d);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        Layer L{};
        L.ln1_g = take(d);
        L.ln1_b = take(d);
        L.w_qkv = take(d * 3 * d);
        L.b_qkv = take(3 * d);
        L.w_o = take(d * d);
        L.b_o = take(d);
        L.ln2_g = take(d);
        L.ln2_b = take(d);
        L.w_fc = take(d * f);
        L.b_fc = take(f);
        L.w_proj = take(f * d);
        L.b_proj = take(d);
        layers.push_back(L);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    w_out = take(d * cfg.vocab_size);
    b_out = take(cfg.vocab_size);
    if (cfg.classification_head) {
        cls_w = take(d);
        cls_b = take(1);
    }
    total = at;
}

Parameters::Parameters(const ModelConfig& cfg) : config_(cfg), layout_((cfg.validate(), cfg)), values_(layout_.total, 0.0) {}

std::span<double> Parameters::mutable_values() {
    if (frozen_) {
        throw FrozenError("parameters are frozen");
    }
    return values_;
}

double Gradient::norm() const {
    double s = 0.0;
    for (double v : values_) {
        s += v * v;
    }
    return std::sqrt(s);
}

bool Gradient::finite() const {
    for (double v : values_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

void Gradient::scale(double s) {
    for (double& v : values_) {
        v *= s;
    }
}

void Gradient::add(const Gradient& other, double weight) {
    for (std::size_t i = 0; i < values_.size(); ++i) {
        values_[i] += weight * other.values_[i];
    }
}

Parameters init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Parameters params(cfg);
    auto w = params.mutable_values();
    const auto& lay = params.layout();
    Rng rng(seed);
    constexpr double kStd = 0.02;
    const double proj_std = kStd / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    auto fill_normal = [&](std::size_t off, std::size_t n, double stddev) {
        for (std::size_t i = 0; i < n; ++i) {
            w[off + i] = stddev * rng.normal();
        }
    };
    auto fill_const = [&](std::size_t off, std::size_t n, double value) {
        for (std::size_t i = 0; i < n; ++i) {
            w[off + i] = value;
        }
    };
    const std::size_t d = cfg.width;
    const std::size_t f = cfg.ffn_width();
    fill_normal(lay.tok_emb, cfg.vocab_size * d, kStd);
    fill_normal(lay.pos_emb, cfg.max_len * d, kStd);
    fill_normal(lay.state_emb, cfg.state_tags * d, kStd);
    for (const auto& L : lay.layers) {
        fill_const(L.ln1_g, d, 1.0);
        fill_normal(L.w_qkv, d * 3 * d, kStd);
        fill_normal(L.w_o, d * d, proj_std);
        fill_const(L.ln2_g, d, 1.0);
        fill_normal(L.w_fc, d * f, kStd);
        fill_normal(L.w_proj, f * d, proj_std);
    }
    fill_const(lay.lnf_g, d, 1.0);
    fill_normal(lay.w_out, d * cfg.vocab_size, kStd);
    if (cfg.classification_head) {
        fill_normal(lay.cls_w, d, kStd);
    }
    return params;
}

}  // namespace decouple
