#pragma once

#include "trnet/attention.hpp"
#include "trnet/common.hpp"
#include "trnet/conv3d.hpp"
#include "trnet/sampling.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace trnet {

struct ModelConfig {
    Index cube_side = 29;                               // N
    Index max_seq_len = 30;                             // L
    std::array<Index, 4> conv_filters = {16, 32, 64, 128};
    Index num_encoders = 12;                            // T
    Index num_heads = 8;
    Index ffn_hidden = 0;                               // 0 -> 4*embed_dim
    Index num_classes = 2;
    // Eq.-style residual wiring: default FFN(LN(Z' + Z_prev)); the alternative
    // reading FFN(LN(Z') + Z_prev) sits behind this switch.
    bool alt_ffn_input = false;
    bool final_layer_norm = false;

    /// Spatial size after four same-padding conv + 2x pooling stages.
    Index feature_side() const {
        Index s = cube_side;
        for (int i = 0; i < 4; ++i) s /= 2;
        return s;
    }
    Index feature_channels() const { return conv_filters[3]; }
    Index embed_dim() const {
        const Index h = feature_side();
        return feature_channels() * h * h * h;
    }
    Index ffn_hidden_dim() const { return ffn_hidden > 0 ? ffn_hidden : 4 * embed_dim(); }
};

inline void validate(const ModelConfig& cfg) {
    if (cfg.feature_side() < 1)
        throw config_error("model: cube_side " + std::to_string(cfg.cube_side) +
                           " too small for four pooling stages");
    for (int i = 1; i < 4; ++i)
        if (cfg.conv_filters[static_cast<std::size_t>(i)] !=
            2 * cfg.conv_filters[static_cast<std::size_t>(i - 1)])
            throw config_error("model: conv_filters must double at each stage");
    if (cfg.conv_filters[0] < 1) throw config_error("model: conv_filters must be positive");
    if (cfg.num_encoders < 1) throw config_error("model: num_encoders must be >= 1");
    if (cfg.embed_dim() % cfg.num_heads != 0)
        throw config_error("model: embed_dim must be divisible by num_heads");
    if (cfg.max_seq_len < 1) throw config_error("model: max_seq_len must be >= 1");
    if (cfg.num_classes < 2) throw config_error("model: num_classes must be >= 2");
}

template <class S>
struct EncoderParams {
    MatrixX<S> ln1_scale, ln1_shift;    // (D x 1)
    MatrixX<S> ln2_scale, ln2_shift;    // (D x 1)
    MatrixX<S> wq, wk, wv, wo;          // (D x D)
    MatrixX<S> ffn_w1, ffn_b1;          // (D x F), (F x 1)
    MatrixX<S> ffn_w2, ffn_b2;          // (F x D), (D x 1)
};

/// All learnable quantities. Every tensor is reachable through for_each under
/// a canonical name, which fixes the checkpoint layout.
template <class S>
struct ModelParams {
    ModelConfig config;
    std::array<MatrixX<S>, 4> conv_w;   // ((C_in*27) x C_out)
    std::array<MatrixX<S>, 4> conv_b;   // (C_out x 1)
    MatrixX<S> order_embeddings;        // (L x D)
    std::vector<EncoderParams<S>> encoders;
    MatrixX<S> final_ln_scale, final_ln_shift;  // (D x 1), only if final_layer_norm
    MatrixX<S> cls_w;                   // (D x num_classes)
    MatrixX<S> cls_b;                   // (num_classes x 1)

    template <class F>
    void for_each(F&& f) {
        for (int i = 0; i < 4; ++i) {
            const std::string p = "conv" + std::to_string(i + 1);
            f(p + ".weight", conv_w[static_cast<std::size_t>(i)]);
            f(p + ".bias", conv_b[static_cast<std::size_t>(i)]);
        }
        f("order_embeddings", order_embeddings);
        for (std::size_t t = 0; t < encoders.size(); ++t) {
            const std::string p = "encoder" + std::to_string(t + 1);
            auto& e = encoders[t];
            f(p + ".ln1.scale", e.ln1_scale);
            f(p + ".ln1.shift", e.ln1_shift);
            f(p + ".msa.wq", e.wq);
            f(p + ".msa.wk", e.wk);
            f(p + ".msa.wv", e.wv);
            f(p + ".msa.wo", e.wo);
            f(p + ".ln2.scale", e.ln2_scale);
            f(p + ".ln2.shift", e.ln2_shift);
            f(p + ".ffn.w1", e.ffn_w1);
            f(p + ".ffn.b1", e.ffn_b1);
            f(p + ".ffn.w2", e.ffn_w2);
            f(p + ".ffn.b2", e.ffn_b2);
        }
        if (config.final_layer_norm) {
            f("final_ln.scale", final_ln_scale);
            f("final_ln.shift", final_ln_shift);
        }
        f("classifier.weight", cls_w);
        f("classifier.bias", cls_b);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each(
            [&](const std::string& name, MatrixX<S>& m) { f(name, const_cast<const MatrixX<S>&>(m)); });
    }
};

/// Same shapes as `like`, all zeros; used for gradients and optimizer state.
template <class S>
ModelParams<S> zeros_like(const ModelParams<S>& like) {
    ModelParams<S> out;
    out.config = like.config;
    out.encoders.resize(like.encoders.size());
    auto it = [&]() {
        std::vector<const MatrixX<S>*> src;
        like.for_each([&](const std::string&, const MatrixX<S>& m) { src.push_back(&m); });
        std::size_t i = 0;
        out.for_each([&](const std::string&, MatrixX<S>& m) {
            m.setZero(src[i]->rows(), src[i]->cols());
            ++i;
        });
    };
    it();
    return out;
}

/// Fan-in scaled Gaussian weights, small-noise order embeddings, identity LN.
template <class S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    std::mt19937_64 rng(seed);
    auto gauss = [&rng](MatrixX<S>& m, double std_dev) {
        std::normal_distribution<double> n(0.0, std_dev);
        for (Index j = 0; j < m.cols(); ++j)
            for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<S>(n(rng));
    };
    ModelParams<S> p;
    p.config = cfg;
    Index c_in = 1;
    for (int i = 0; i < 4; ++i) {
        const Index c_out = cfg.conv_filters[static_cast<std::size_t>(i)];
        p.conv_w[static_cast<std::size_t>(i)].resize(c_in * 27, c_out);
        gauss(p.conv_w[static_cast<std::size_t>(i)], std::sqrt(2.0 / static_cast<double>(c_in * 27)));
        p.conv_b[static_cast<std::size_t>(i)] = MatrixX<S>::Zero(c_out, 1);
        c_in = c_out;
    }
    const Index d = cfg.embed_dim();
    const Index f = cfg.ffn_hidden_dim();
    p.order_embeddings.resize(cfg.max_seq_len, d);
    gauss(p.order_embeddings, 0.02);
    p.encoders.resize(static_cast<std::size_t>(cfg.num_encoders));
    for (auto& e : p.encoders) {
        e.ln1_scale = MatrixX<S>::Ones(d, 1);
        e.ln1_shift = MatrixX<S>::Zero(d, 1);
        e.ln2_scale = MatrixX<S>::Ones(d, 1);
        e.ln2_shift = MatrixX<S>::Zero(d, 1);
        const double w_std = std::sqrt(1.0 / static_cast<double>(d));
        e.wq.resize(d, d);
        e.wk.resize(d, d);
        e.wv.resize(d, d);
        e.wo.resize(d, d);
        gauss(e.wq, w_std);
        gauss(e.wk, w_std);
        gauss(e.wv, w_std);
        gauss(e.wo, w_std);
        e.ffn_w1.resize(d, f);
        gauss(e.ffn_w1, std::sqrt(2.0 / static_cast<double>(d)));
        e.ffn_b1 = MatrixX<S>::Zero(f, 1);
        e.ffn_w2.resize(f, d);
        gauss(e.ffn_w2, std::sqrt(2.0 / static_cast<double>(f)));
        e.ffn_b2 = MatrixX<S>::Zero(d, 1);
    }
    if (cfg.final_layer_norm) {
        p.final_ln_scale = MatrixX<S>::Ones(d, 1);
        p.final_ln_shift = MatrixX<S>::Zero(d, 1);
    }
    p.cls_w.resize(d, cfg.num_classes);
    gauss(p.cls_w, std::sqrt(1.0 / static_cast<double>(d)));
    p.cls_b = MatrixX<S>::Zero(cfg.num_classes, 1);
    return p;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

template <class S>
struct CnnCache {
    std::array<ConvStageCache<S>, 4> stages;
};

/// Four conv substructures, then row-major flatten of (C x H x H x H):
/// feature[c*H^3 + s] = pooled(s, c).
template <class S>
VectorX<S> cnn_forward(const Volume<S>& cube, const ModelParams<S>& params, CnnCache<S>* cache) {
    const ModelConfig& cfg = params.config;
    if (cube.n0 != cfg.cube_side || cube.n1 != cfg.cube_side || cube.n2 != cfg.cube_side)
        throw config_error("cnn_forward: cube side does not match model config");
    MatrixX<S> cur = cube.data;  // (N^3 x 1)
    Index d = cfg.cube_side;
    for (int i = 0; i < 4; ++i) {
        cur = conv_stage_forward(cur, d, params.conv_w[static_cast<std::size_t>(i)],
                                 params.conv_b[static_cast<std::size_t>(i)],
                                 cache != nullptr ? &cache->stages[static_cast<std::size_t>(i)]
                                                  : nullptr);
        d /= 2;
    }
    const Index h3 = d * d * d;  // d is now H
    VectorX<S> feat(cfg.embed_dim());
    for (Index c = 0; c < cur.cols(); ++c) feat.segment(c * h3, h3) = cur.col(c);
    return feat;
}

template <class S>
void cnn_backward(const VectorX<S>& dfeat, const ModelParams<S>& params, const CnnCache<S>& cache,
                  ModelParams<S>& grads) {
    const ModelConfig& cfg = params.config;
    const Index h = cfg.feature_side();
    const Index h3 = h * h * h;
    MatrixX<S> dcur(h3, cfg.feature_channels());
    for (Index c = 0; c < dcur.cols(); ++c) dcur.col(c) = dfeat.segment(c * h3, h3);
    for (int i = 3; i >= 0; --i)
        dcur = conv_stage_backward(dcur, cache.stages[static_cast<std::size_t>(i)],
                                   params.conv_w[static_cast<std::size_t>(i)],
                                   grads.conv_w[static_cast<std::size_t>(i)],
                                   grads.conv_b[static_cast<std::size_t>(i)], i == 0);
}

/// Z_0[i] = x_i + o_i.
template <class S>
MatrixX<S> embed_sequence(const MatrixX<S>& features, const MatrixX<S>& order_embeddings) {
    if (features.rows() > order_embeddings.rows())
        throw runtime_failure("embed_sequence: sequence length " +
                              std::to_string(features.rows()) + " exceeds max_seq_len " +
                              std::to_string(order_embeddings.rows()));
    return features + order_embeddings.topRows(features.rows());
}

template <class S>
struct EncoderCache {
    LayerNormCache<S> ln1;
    MsaCache<S> msa;
    LayerNormCache<S> ln2;
    FfnCache<S> ffn;
};

/// Z' = MSA(LN1(Z_prev)); Z = FFN(ffn_in) + Z' + Z_prev where ffn_in is
/// LN2(Z' + Z_prev) by default, or LN2(Z') + Z_prev with alt_ffn_input.
template <class S>
MatrixX<S> encoder_forward(const MatrixX<S>& z_prev, const EncoderParams<S>& e,
                           const ModelConfig& cfg, const Mask& mask, EncoderCache<S>* cache) {
    MatrixX<S> a = layer_norm_forward(z_prev, e.ln1_scale, e.ln1_shift,
                                      cache != nullptr ? &cache->ln1 : nullptr);
    MatrixX<S> zp = msa_forward(a, e.wq, e.wk, e.wv, e.wo, cfg.num_heads, mask,
                                cache != nullptr ? &cache->msa : nullptr);
    MatrixX<S> ffn_in;
    if (cfg.alt_ffn_input)
        ffn_in = layer_norm_forward(zp, e.ln2_scale, e.ln2_shift,
                                    cache != nullptr ? &cache->ln2 : nullptr) +
                 z_prev;
    else
        ffn_in = layer_norm_forward(MatrixX<S>(zp + z_prev), e.ln2_scale, e.ln2_shift,
                                    cache != nullptr ? &cache->ln2 : nullptr);
    MatrixX<S> f = ffn_forward(ffn_in, e.ffn_w1, e.ffn_b1, e.ffn_w2, e.ffn_b2,
                               cache != nullptr ? &cache->ffn : nullptr);
    return f + zp + z_prev;
}

template <class S>
struct EncoderGrads {
    EncoderParams<S>* g;
};

template <class S>
MatrixX<S> encoder_backward(const MatrixX<S>& dz, const EncoderCache<S>& cache,
                            const EncoderParams<S>& e, const ModelConfig& cfg,
                            EncoderParams<S>& g) {
    MatrixX<S> dz_prev = dz;
    MatrixX<S> dzp = dz;
    MatrixX<S> dffn_in = ffn_backward(dz, cache.ffn, e.ffn_w1, e.ffn_w2, g.ffn_w1, g.ffn_b1,
                                      g.ffn_w2, g.ffn_b2);
    if (cfg.alt_ffn_input) {
        dz_prev += dffn_in;
        dzp += layer_norm_backward(dffn_in, cache.ln2, e.ln2_scale, g.ln2_scale, g.ln2_shift);
    } else {
        MatrixX<S> dsum =
            layer_norm_backward(dffn_in, cache.ln2, e.ln2_scale, g.ln2_scale, g.ln2_shift);
        dzp += dsum;
        dz_prev += dsum;
    }
    MatrixX<S> da = msa_backward(dzp, cache.msa, e.wq, e.wk, e.wv, e.wo, cfg.num_heads,
                                 MsaGrads<S>{&g.wq, &g.wk, &g.wv, &g.wo});
    dz_prev += layer_norm_backward(da, cache.ln1, e.ln1_scale, g.ln1_scale, g.ln1_shift);
    return dz_prev;
}

/// Numerically stable row softmax via max subtraction.
template <class S>
MatrixX<S> softmax_rows(const MatrixX<S>& logits) {
    MatrixX<S> p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const S m = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - m).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

/// Per-position class probabilities aligned to a VolumeSequence.
struct PredictionSequence {
    MatrixX<double> probs;              // (l x num_classes), rows sum to 1
    std::vector<Index> center_indices;
    std::string source_id;

    std::vector<std::uint8_t> labels() const {
        std::vector<std::uint8_t> out(static_cast<std::size_t>(probs.rows()));
        for (Index i = 0; i < probs.rows(); ++i) out[static_cast<std::size_t>(i)] = probs(i, 1) > 0.5;
        return out;
    }
};

template <class S>
struct ForwardCache {
    std::vector<CnnCache<S>> cnn;        // per cube
    MatrixX<S> features;                 // (l x D)
    MatrixX<S> z0;
    std::vector<EncoderCache<S>> enc;
    LayerNormCache<S> final_ln;
    MatrixX<S> z_final;                  // classifier input
    MatrixX<S> probs;
};

template <class S>
MatrixX<S> classify(const MatrixX<S>& z, const MatrixX<S>& cls_w, const MatrixX<S>& cls_b) {
    MatrixX<S> logits = z * cls_w;
    logits.rowwise() += cls_b.col(0).transpose();
    return softmax_rows(logits);
}

/// Full TR-Net forward: per-cube CNN -> order embedding -> T encoders ->
/// per-position softmax classifier.
template <class S>
MatrixX<S> model_forward(const std::vector<Volume<S>>& cubes, const ModelParams<S>& params,
                         const Mask& mask = {}, ForwardCache<S>* cache = nullptr) {
    const ModelConfig& cfg = params.config;
    const Index l = static_cast<Index>(cubes.size());
    if (l < 1) throw runtime_failure("model_forward: empty sequence");
    MatrixX<S> features(l, cfg.embed_dim());
    if (cache != nullptr) cache->cnn.resize(static_cast<std::size_t>(l));
    for (Index i = 0; i < l; ++i)
        features.row(i) = cnn_forward(cubes[static_cast<std::size_t>(i)], params,
                                      cache != nullptr ? &cache->cnn[static_cast<std::size_t>(i)]
                                                       : nullptr)
                              .transpose();
    MatrixX<S> z = embed_sequence(features, params.order_embeddings);
    if (cache != nullptr) {
        cache->features = features;
        cache->z0 = z;
        cache->enc.resize(params.encoders.size());
    }
    for (std::size_t t = 0; t < params.encoders.size(); ++t)
        z = encoder_forward(z, params.encoders[t], cfg, mask,
                            cache != nullptr ? &cache->enc[t] : nullptr);
    if (cfg.final_layer_norm)
        z = layer_norm_forward(z, params.final_ln_scale, params.final_ln_shift,
                               cache != nullptr ? &cache->final_ln : nullptr);
    MatrixX<S> probs = classify(z, params.cls_w, params.cls_b);
    if (cache != nullptr) {
        cache->z_final = std::move(z);
        cache->probs = probs;
    }
    return probs;
}

template <class S>
PredictionSequence model_forward(const VolumeSequence<S>& seq, const ModelParams<S>& params) {
    PredictionSequence out;
    out.probs = model_forward(seq.cubes, params).template cast<double>();
    out.center_indices = seq.center_indices;
    out.source_id = seq.source_id;
    return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

inline constexpr double kLogFloor = 1e-12;

/// Mean over valid positions of class-weighted negative log-probability of
/// the true class.
template <class S>
double sequence_nll(const MatrixX<S>& probs, const std::vector<std::uint8_t>& labels,
                    const Mask& mask, const std::array<double, 2>& class_weights,
                    Index* n_valid = nullptr) {
    if (static_cast<Index>(labels.size()) != probs.rows())
        throw runtime_failure("loss: labels not aligned with predictions");
    double sum = 0;
    Index n = 0;
    for (Index i = 0; i < probs.rows(); ++i) {
        if (!mask_valid_at(mask, i)) continue;
        const int y = labels[static_cast<std::size_t>(i)] ? 1 : 0;
        const double p = std::max(static_cast<double>(probs(i, y)), kLogFloor);
        sum += -class_weights[static_cast<std::size_t>(y)] * std::log(p);
        ++n;
    }
    if (n_valid != nullptr) *n_valid = n;
    return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

template <class S>
struct SequenceBatchItem {
    const std::vector<Volume<S>>* cubes;
    const std::vector<std::uint8_t>* labels;
    Mask mask;  // empty = all valid
};

/// Exact gradients of the batch loss (mean weighted NLL over all valid
/// positions in the batch) with respect to every parameter. Returns the loss.
template <class S>
double model_gradients(const std::vector<SequenceBatchItem<S>>& batch,
                       const ModelParams<S>& params,
                       const std::array<double, 2>& class_weights, ModelParams<S>& grads) {
    const ModelConfig& cfg = params.config;
    // Count valid positions first: the loss normalizer spans the whole batch.
    Index n_total = 0;
    for (const auto& item : batch)
        for (Index i = 0; i < static_cast<Index>(item.labels->size()); ++i)
            if (mask_valid_at(item.mask, i)) ++n_total;
    if (n_total == 0) throw runtime_failure("model_gradients: no valid positions in batch");

    double loss_sum = 0;
    for (const auto& item : batch) {
        ForwardCache<S> cache;
        MatrixX<S> probs = model_forward(*item.cubes, params, item.mask, &cache);
        const Index l = probs.rows();
        if (static_cast<Index>(item.labels->size()) != l)
            throw runtime_failure("model_gradients: labels not aligned with sequence");
        for (Index i = 0; i < l; ++i) {
            if (!mask_valid_at(item.mask, i)) continue;
            const int y = (*item.labels)[static_cast<std::size_t>(i)] ? 1 : 0;
            const double p = std::max(static_cast<double>(probs(i, y)), kLogFloor);
            loss_sum += -class_weights[static_cast<std::size_t>(y)] * std::log(p);
        }

        // d(loss)/d(logits) for softmax cross-entropy: w/n * (p - onehot).
        MatrixX<S> dlogits = MatrixX<S>::Zero(l, cfg.num_classes);
        for (Index i = 0; i < l; ++i) {
            if (!mask_valid_at(item.mask, i)) continue;
            const int y = (*item.labels)[static_cast<std::size_t>(i)] ? 1 : 0;
            const S w = static_cast<S>(class_weights[static_cast<std::size_t>(y)] /
                                       static_cast<double>(n_total));
            dlogits.row(i) = probs.row(i) * w;
            dlogits(i, y) -= w;
        }

        grads.cls_w.noalias() += cache.z_final.transpose() * dlogits;
        grads.cls_b.col(0) += dlogits.colwise().sum().transpose();
        MatrixX<S> dz = dlogits * params.cls_w.transpose();
        if (cfg.final_layer_norm)
            dz = layer_norm_backward(dz, cache.final_ln, params.final_ln_scale,
                                     grads.final_ln_scale, grads.final_ln_shift);
        for (std::size_t t = params.encoders.size(); t-- > 0;)
            dz = encoder_backward(dz, cache.enc[t], params.encoders[t], cfg,
                                  grads.encoders[t]);
        // Z_0 = X + O: gradient splits identically.
        grads.order_embeddings.topRows(l) += dz;
        for (Index i = 0; i < l; ++i)
            cnn_backward(VectorX<S>(dz.row(i).transpose()), params,
                         cache.cnn[static_cast<std::size_t>(i)], grads);
        if (!std::isfinite(loss_sum))
            throw runtime_failure("model_gradients: non-finite loss");
    }
    return loss_sum / static_cast<double>(n_total);
}

}  // namespace trnet
