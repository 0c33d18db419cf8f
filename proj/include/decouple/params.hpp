#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace decouple {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;
/// Flat weight storage. A fixed base alignment keeps vectorised reductions
/// over mapped blocks identical from one allocation to the next.
using AlignedValues = std::vector<double, Eigen::aligned_allocator<double>>;

/// Dialogue-state tag carried by every input position. One parameter set
/// plays the knowledge-generator role on KNOWLEDGE positions and the
/// response-generator role on RESPONSE positions.
enum class StateTag : std::int8_t { History = 0, Knowledge = 1, Response = 2, Pad = 3 };

inline constexpr std::size_t kStateTagCount = 4;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t width = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t max_len = 64;
    std::size_t state_tags = kStateTagCount;
    bool classification_head = false;

    std::size_t ffn_width() const { return 4 * width; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Offsets of every weight block inside the flat parameter vector.
struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
        std::size_t ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };
    std::size_t tok_emb = 0;
    std::size_t pos_emb = 0;
    std::size_t state_emb = 0;
    std::vector<Layer> layers;
    std::size_t lnf_g = 0;
    std::size_t lnf_b = 0;
    std::size_t w_out = 0;
    std::size_t b_out = 0;
    std::size_t cls_w = 0;
    std::size_t cls_b = 0;
    std::size_t total = 0;

    explicit ParamLayout(const ModelConfig& cfg);
};

/// All weights of the shared model, stored contiguously.
class Parameters {
public:
    explicit Parameters(const ModelConfig& cfg);

    const ModelConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }

    std::span<const double> values() const { return values_; }
    /// Throws FrozenError once freeze() has been called.
    std::span<double> mutable_values();

    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }

    const double* data() const { return values_.data(); }

    ConstMatMap mat(std::size_t offset, std::size_t rows, std::size_t cols) const {
        return ConstMatMap(values_.data() + offset, static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(cols));
    }
    ConstVecMap vec(std::size_t offset, std::size_t n) const {
        return ConstVecMap(values_.data() + offset, static_cast<Eigen::Index>(n));
    }

    bool operator==(const Parameters& other) const {
        return config_ == other.config_ && values_ == other.values_;
    }

private:
    ModelConfig config_;
    ParamLayout layout_;
    AlignedValues values_;
    bool frozen_ = false;
};

/// Gradient buffer with the same layout as Parameters.
class Gradient {
public:
    explicit Gradient(const Parameters& params) : values_(params.size(), 0.0) {}
    explicit Gradient(std::size_t n) : values_(n, 0.0) {}

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    void zero() { std::fill(values_.begin(), values_.end(), 0.0); }
    double norm() const;
    bool finite() const;
    void scale(double s);
    void add(const Gradient& other, double weight = 1.0);

    MatMap mat(std::size_t offset, std::size_t rows, std::size_t cols) {
        return MatMap(values_.data() + offset, static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
    }
    VecMap vec(std::size_t offset, std::size_t n) {
        return VecMap(values_.data() + offset, static_cast<Eigen::Index>(n));
    }

private:
    AlignedValues values_;
};

/// Gaussian init (std 0.02, residual projections scaled by depth), unit
/// LayerNorm gains, zero biases. Deterministic under seed.
Parameters init_params(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace decouple
