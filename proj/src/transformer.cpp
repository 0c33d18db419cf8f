#include "decouple/transformer.hpp"

#include <cmath>

#include "decouple/error.hpp"

namespace decouple {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void layer_norm(const RowMat& x, const ConstVecMap& g, const ConstVecMap& b, RowMat& xhat,
                Eigen::VectorXd& rstd, RowMat& y) {
    const auto rows = x.rows();
    const auto d = static_cast<double>(x.cols());
    xhat.resize(rows, x.cols());
    y.resize(rows, x.cols());
    rstd.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double mean = x.row(r).sum() / d;
        const double var = (x.row(r).array() - mean).square().sum() / d;
        rstd(r) = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
        y.row(r) = xhat.row(r).cwiseProduct(g) + b;
    }
}

// dy -> dx given cached xhat/rstd; accumulates parameter grads.
void layer_norm_backward(const RowMat& dy, const RowMat& xhat, const Eigen::VectorXd& rstd,
                         const ConstVecMap& g, VecMap dg, VecMap db, RowMat& dx) {
    const auto rows = dy.rows();
    const auto d = static_cast<double>(dy.cols());
    dx.resize(rows, dy.cols());
    for (Eigen::Index r = 0; r < rows; ++r) {
        dg += dy.row(r).cwiseProduct(xhat.row(r));
        db += dy.row(r);
        const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(g);
        const double mean_dxhat = dxhat.sum() / d;
        const double mean_dxhat_xhat = dxhat.dot(xhat.row(r)) / d;
        dx.row(r) = rstd(r) * (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat).matrix();
    }
}

bool attendable(const Sequence& seq, Eigen::Index query, Eigen::Index key) {
    return key == query || (key < query && seq.tags[static_cast<std::size_t>(key)] != StateTag::Pad);
}

}  // namespace

Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& logits) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return (logits.array() - lse).matrix();
}

void forward(const Parameters& params, const Sequence& seq, std::span<const int> out_positions,
             ForwardCache& cache) {
    const auto& cfg = params.config();
    const auto& lay = params.layout();
    const auto T = static_cast<Eigen::Index>(seq.size());
    const auto d = static_cast<Eigen::Index>(cfg.width);
    const auto H = static_cast<Eigen::Index>(cfg.heads);
    const Eigen::Index hd = d / H;
    const auto F = static_cast<Eigen::Index>(cfg.ffn_width());
    const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (seq.size() == 0) {
        throw ValidationError("forward: empty sequence");
    }
    if (seq.size() > cfg.max_len) {
        throw ValidationError("forward: sequence length " + std::to_string(seq.size()) +
                              " exceeds max_len " + std::to_string(cfg.max_len));
    }

    const auto tok = params.mat(lay.tok_emb, cfg.vocab_size, cfg.width);
    const auto pos = params.mat(lay.pos_emb, cfg.max_len, cfg.width);
    const auto st = params.mat(lay.state_emb, cfg.state_tags, cfg.width);

    RowMat x(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto i = static_cast<std::size_t>(t);
        const TokenId id = seq.tokens[i];
        const int p = seq.positions[i];
        if (id < 0 || id >= V || p < 0 || static_cast<std::size_t>(p) >= cfg.max_len) {
            throw ValidationError("forward: token or position out of range");
        }
        x.row(t) = tok.row(id) + pos.row(p) + st.row(static_cast<int>(seq.tags[i]));
    }

    cache.layers.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& L = lay.layers[l];
        auto& c = cache.layers[l];
        c.x_in = x;
        layer_norm(x, params.vec(L.ln1_g, cfg.width), params.vec(L.ln1_b, cfg.width), c.ln1_xhat, c.ln1_rstd, c.h1);
        c.qkv.noalias() = c.h1 * params.mat(L.w_qkv, cfg.width, 3 * cfg.width);
        c.qkv.rowwise() += params.vec(L.b_qkv, 3 * cfg.width);

        c.att.resize(static_cast<std::size_t>(H));
        c.att_out.resize(T, d);
        for (Eigen::Index h = 0; h < H; ++h) {
            const auto q = c.qkv.middleCols(h * hd, hd);
            const auto k = c.qkv.middleCols(d + h * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
            RowMat& a = c.att[static_cast<std::size_t>(h)];
            a.noalias() = (q * k.transpose()) * scale;
            for (Eigen::Index i = 0; i < T; ++i) {
                double m = -std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < T; ++j) {
                    if (attendable(seq, i, j)) {
                        m = std::max(m, a(i, j));
                    }
                }
                double sum = 0.0;
                for (Eigen::Index j = 0; j < T; ++j) {
                    if (attendable(seq, i, j)) {
                        a(i, j) = std::exp(a(i, j) - m);
                        sum += a(i, j);
                    } else {
                        a(i, j) = 0.0;
                    }
                }
                a.row(i) /= sum;
            }
            c.att_out.middleCols(h * hd, hd).noalias() = a * v;
        }
        RowMat y = c.att_out * params.mat(L.w_o, cfg.width, cfg.width);
        y.rowwise() += params.vec(L.b_o, cfg.width);
        x += y;
        c.x_mid = x;

        layer_norm(x, params.vec(L.ln2_g, cfg.width), params.vec(L.ln2_b, cfg.width), c.ln2_xhat, c.ln2_rstd, c.h2);
        c.fc_pre.noalias() = c.h2 * params.mat(L.w_fc, cfg.width, cfg.ffn_width());
        c.fc_pre.rowwise() += params.vec(L.b_fc, cfg.ffn_width());
        c.fc_act = c.fc_pre.unaryExpr([](double v) { return gelu(v); });
        RowMat z = c.fc_act * params.mat(L.w_proj, cfg.ffn_width(), cfg.width);
        z.rowwise() += params.vec(L.b_proj, cfg.width);
        x += z;
    }
    (void)F;

    cache.x_final = x;
    layer_norm(x, params.vec(lay.lnf_g, cfg.width), params.vec(lay.lnf_b, cfg.width), cache.lnf_xhat, cache.lnf_rstd,
               cache.hf);

    cache.out_positions.assign(out_positions.begin(), out_positions.end());
    const auto R = static_cast<Eigen::Index>(out_positions.size());
    RowMat gathered(R, d);
    for (Eigen::Index r = 0; r < R; ++r) {
        const int p = out_positions[static_cast<std::size_t>(r)];
        if (p < 0 || p >= T) {
            throw ValidationError("forward: output position out of range");
        }
        gathered.row(r) = cache.hf.row(p);
    }
    cache.logits.noalias() = gathered * params.mat(lay.w_out, cfg.width, cfg.vocab_size);
    cache.logits.rowwise() += params.vec(lay.b_out, cfg.vocab_size);

    cache.cls_logit = 0.0;
    if (cfg.classification_head) {
        cache.cls_logit = cache.hf.row(T - 1).dot(params.vec(lay.cls_w, cfg.width)) + params.data()[lay.cls_b];
    }
}

void backward(const Parameters& params, const Sequence& seq, const ForwardCache& cache, const RowMat& dlogits,
              double d_cls, Gradient& grad) {
    const auto& cfg = params.config();
    const auto& lay = params.layout();
    const auto T = static_cast<Eigen::Index>(seq.size());
    const auto d = static_cast<Eigen::Index>(cfg.width);
    const auto H = static_cast<Eigen::Index>(cfg.heads);
    const Eigen::Index hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto R = static_cast<Eigen::Index>(cache.out_positions.size());

    if (dlogits.rows() != R || dlogits.cols() != static_cast<Eigen::Index>(cfg.vocab_size)) {
        throw ValidationError("backward: dlogits shape does not match forward outputs");
    }

    RowMat dhf = RowMat::Zero(T, d);
    if (R > 0) {
        RowMat gathered(R, d);
        for (Eigen::Index r = 0; r < R; ++r) {
            gathered.row(r) = cache.hf.row(cache.out_positions[static_cast<std::size_t>(r)]);
        }
        grad.mat(lay.w_out, cfg.width, cfg.vocab_size).noalias() += gathered.transpose() * dlogits;
        grad.vec(lay.b_out, cfg.vocab_size) += dlogits.colwise().sum();
        const RowMat dg = dlogits * params.mat(lay.w_out, cfg.width, cfg.vocab_size).transpose();
        for (Eigen::Index r = 0; r < R; ++r) {
            dhf.row(cache.out_positions[static_cast<std::size_t>(r)]) += dg.row(r);
        }
    }
    if (cfg.classification_head && d_cls != 0.0) {
        grad.vec(lay.cls_w, cfg.width) += d_cls * cache.hf.row(T - 1);
        grad.values()[lay.cls_b] += d_cls;
        dhf.row(T - 1) += d_cls * params.vec(lay.cls_w, cfg.width);
    }

    RowMat dx;
    layer_norm_backward(dhf, cache.lnf_xhat, cache.lnf_rstd, params.vec(lay.lnf_g, cfg.width),
                        grad.vec(lay.lnf_g, cfg.width), grad.vec(lay.lnf_b, cfg.width), dx);

    for (std::size_t li = cfg.layers; li-- > 0;) {
        const auto& L = lay.layers[li];
        const auto& c = cache.layers[li];

        // feed-forward block
        grad.mat(L.w_proj, cfg.ffn_width(), cfg.width).noalias() += c.fc_act.transpose() * dx;
        grad.vec(L.b_proj, cfg.width) += dx.colwise().sum();
        RowMat dfc = dx * params.mat(L.w_proj, cfg.ffn_width(), cfg.width).transpose();
        dfc.array() *= c.fc_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
        grad.mat(L.w_fc, cfg.width, cfg.ffn_width()).noalias() += c.h2.transpose() * dfc;
        grad.vec(L.b_fc, cfg.ffn_width()) += dfc.colwise().sum();
        const RowMat dh2 = dfc * params.mat(L.w_fc, cfg.width, cfg.ffn_width()).transpose();
        RowMat dln2;
        layer_norm_backward(dh2, c.ln2_xhat, c.ln2_rstd, params.vec(L.ln2_g, cfg.width),
                            grad.vec(L.ln2_g, cfg.width), grad.vec(L.ln2_b, cfg.width), dln2);
        dx += dln2;

        // attention block
        grad.mat(L.w_o, cfg.width, cfg.width).noalias() += c.att_out.transpose() * dx;
        grad.vec(L.b_o, cfg.width) += dx.colwise().sum();
        const RowMat datt_out = dx * params.mat(L.w_o, cfg.width, cfg.width).transpose();
        RowMat dqkv = RowMat::Zero(T, 3 * d);
        for (Eigen::Index h = 0; h < H; ++h) {
            const RowMat& a = c.att[static_cast<std::size_t>(h)];
            const auto q = c.qkv.middleCols(h * hd, hd);
            const auto k = c.qkv.middleCols(d + h * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
            const auto dout = datt_out.middleCols(h * hd, hd);
            const RowMat da = dout * v.transpose();
            dqkv.middleCols(2 * d + h * hd, hd).noalias() += a.transpose() * dout;
            RowMat ds = a.cwiseProduct(da);
            const Eigen::VectorXd row_dot = ds.rowwise().sum();
            ds -= a.cwiseProduct(row_dot.replicate(1, T));
            ds *= scale;
            dqkv.middleCols(h * hd, hd).noalias() += ds * k;
            dqkv.middleCols(d + h * hd, hd).noalias() += ds.transpose() * q;
        }
        grad.mat(L.w_qkv, cfg.width, 3 * cfg.width).noalias() += c.h1.transpose() * dqkv;
        grad.vec(L.b_qkv, 3 * cfg.width) += dqkv.colwise().sum();
        const RowMat dh1 = dqkv * params.mat(L.w_qkv, cfg.width, 3 * cfg.width).transpose();
        RowMat dln1;
        layer_norm_backward(dh1, c.ln1_xhat, c.ln1_rstd, params.vec(L.ln1_g, cfg.width),
                            grad.vec(L.ln1_g, cfg.width), grad.vec(L.ln1_b, cfg.width), dln1);
        dx += dln1;
    }

    auto dtok = grad.mat(lay.tok_emb, cfg.vocab_size, cfg.width);
    auto dpos = grad.mat(lay.pos_emb, cfg.max_len, cfg.width);
    auto dst = grad.mat(lay.state_emb, cfg.state_tags, cfg.width);
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto i = static_cast<std::size_t>(t);
        dtok.row(seq.tokens[i]) += dx.row(t);
        dpos.row(seq.positions[i]) += dx.row(t);
        dst.row(static_cast<int>(seq.tags[i])) += dx.row(t);
    }
}

IncrementalDecoder::IncrementalDecoder(const Parameters& params) : params_(params) {
    const auto& cfg = params.config();
    keys_.assign(cfg.layers, RowMat(static_cast<Eigen::Index>(cfg.max_len), static_cast<Eigen::Index>(cfg.width)));
    values_.assign(cfg.layers, RowMat(static_cast<Eigen::Index>(cfg.max_len), static_cast<Eigen::Index>(cfg.width)));
}

Eigen::RowVectorXd IncrementalDecoder::step(TokenId token, StateTag tag, int position) {
    const auto& cfg = params_.config();
    const auto& lay = params_.layout();
    const auto d = static_cast<Eigen::Index>(cfg.width);
    const auto H = static_cast<Eigen::Index>(cfg.heads);
    const Eigen::Index hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (length_ >= cfg.max_len) {
        throw ValidationError("decoder: sequence exceeds max_len");
    }
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size || position < 0 ||
        static_cast<std::size_t>(position) >= cfg.max_len) {
        throw ValidationError("decoder: token or position out of range");
    }
    const auto t = static_cast<Eigen::Index>(length_);
    tags_.push_back(tag);

    RowMat x = params_.mat(lay.tok_emb, cfg.vocab_size, cfg.width).row(token) +
               params_.mat(lay.pos_emb, cfg.max_len, cfg.width).row(position) +
               params_.mat(lay.state_emb, cfg.state_tags, cfg.width).row(static_cast<int>(tag));
    RowMat xhat, h, tmp;
    Eigen::VectorXd rstd;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& L = lay.layers[l];
        layer_norm(x, params_.vec(L.ln1_g, cfg.width), params_.vec(L.ln1_b, cfg.width), xhat, rstd, h);
        RowMat qkv = h * params_.mat(L.w_qkv, cfg.width, 3 * cfg.width);
        qkv += params_.vec(L.b_qkv, 3 * cfg.width);
        keys_[l].row(t) = qkv.middleCols(d, d);
        values_[l].row(t) = qkv.middleCols(2 * d, d);
        RowMat att_out(1, d);
        for (Eigen::Index hh = 0; hh < H; ++hh) {
            const auto q = qkv.middleCols(hh * hd, hd);
            Eigen::RowVectorXd s(t + 1);
            double m = -std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j <= t; ++j) {
                const bool ok = j == t || tags_[static_cast<std::size_t>(j)] != StateTag::Pad;
                s(j) = ok ? (q.array() * keys_[l].block(j, hh * hd, 1, hd).array()).sum() * scale
                          : -std::numeric_limits<double>::infinity();
                if (ok) {
                    m = std::max(m, s(j));
                }
            }
            s = (s.array() - m).exp().matrix();
            s /= s.sum();
            att_out.middleCols(hh * hd, hd) = s * values_[l].block(0, hh * hd, t + 1, hd);
        }
        tmp = att_out * params_.mat(L.w_o, cfg.width, cfg.width);
        x += tmp + params_.vec(L.b_o, cfg.width);
        layer_norm(x, params_.vec(L.ln2_g, cfg.width), params_.vec(L.ln2_b, cfg.width), xhat, rstd, h);
        RowMat fc = h * params_.mat(L.w_fc, cfg.width, cfg.ffn_width());
        fc += params_.vec(L.b_fc, cfg.ffn_width());
        fc = fc.unaryExpr([](double v) { return gelu(v); });
        tmp = fc * params_.mat(L.w_proj, cfg.ffn_width(), cfg.width);
        x += tmp + params_.vec(L.b_proj, cfg.width);
    }
    layer_norm(x, params_.vec(lay.lnf_g, cfg.width), params_.vec(lay.lnf_b, cfg.width), xhat, rstd, h);
    Eigen::RowVectorXd logits = h * params_.mat(lay.w_out, cfg.width, cfg.vocab_size);
    logits += params_.vec(lay.b_out, cfg.vocab_size);
    ++length_;
    return logits;
}

}  // namespace decouple
