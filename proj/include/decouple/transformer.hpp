#pragma once

#include <span>
#include <vector>

#include "decouple/params.hpp"
#include "decouple/vocab.hpp"

namespace decouple {

/// Model input: one token, state tag and within-segment position per slot.
struct Sequence {
    std::vector<TokenId> tokens;
    std::vector<StateTag> tags;
    std::vector<int> positions;

    std::size_t size() const { return tokens.size(); }
};

/// Activations retained by forward() for the backward pass.
struct ForwardCache {
    struct Layer {
        RowMat x_in, ln1_xhat, h1, qkv, att_out, x_mid, ln2_xhat, h2, fc_pre, fc_act;
        Eigen::VectorXd ln1_rstd, ln2_rstd;
        std::vector<RowMat> att;  // per head, T x T
    };
    std::vector<Layer> layers;
    RowMat x_final, lnf_xhat, hf;
    Eigen::VectorXd lnf_rstd;
    std::vector<int> out_positions;
    RowMat logits;  // one row per out position
    double cls_logit = 0.0;
};

/// Causal forward pass. Logits are produced only for `out_positions`; the
/// classification logit (when the head exists) reads the last position.
/// Keys tagged PAD are never attended to except by themselves.
void forward(const Parameters& params, const Sequence& seq, std::span<const int> out_positions,
             ForwardCache& cache);

/// Accumulates into `grad` the gradient of sum(dlogits . logits) + d_cls * cls_logit.
void backward(const Parameters& params, const Sequence& seq, const ForwardCache& cache,
              const RowMat& dlogits, double d_cls, Gradient& grad);

/// Token-at-a-time inference with cached keys and values.
class IncrementalDecoder {
public:
    explicit IncrementalDecoder(const Parameters& params);

    /// Appends one position and returns the next-token logits computed there.
    Eigen::RowVectorXd step(TokenId token, StateTag tag, int position);
    std::size_t length() const { return length_; }

private:
    const Parameters& params_;
    std::vector<RowMat> keys_;
    std::vector<RowMat> values_;
    std::vector<StateTag> tags_;
    std::size_t length_ = 0;
};

/// Numerically stable log-softmax of one row.
Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& logits);

}  // namespace decouple
