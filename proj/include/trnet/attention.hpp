#pragma once

#include "trnet/common.hpp"

#include <cstdint>
#include <limits>
#include <vector>

namespace trnet {

using Mask = std::vector<std::uint8_t>;  // empty = all positions valid

inline bool mask_valid_at(const Mask& mask, Index i) {
    return mask.empty() || mask[static_cast<std::size_t>(i)] != 0;
}

// ---------------------------------------------------------------------------
// Layer normalization (row-wise, learned scale and shift)
// ---------------------------------------------------------------------------

template <class S>
struct LayerNormCache {
    MatrixX<S> xhat;      // normalized rows
    VectorX<S> inv_std;   // per row
};

inline constexpr double kLayerNormEps = 1e-6;

template <class S>
MatrixX<S> layer_norm_forward(const MatrixX<S>& x, const MatrixX<S>& scale,
                              const MatrixX<S>& shift, LayerNormCache<S>* cache) {
    const Index rows = x.rows(), cols = x.cols();
    MatrixX<S> xhat(rows, cols);
    VectorX<S> inv_std(rows);
    for (Index i = 0; i < rows; ++i) {
        const S mean = x.row(i).mean();
        const S var = (x.row(i).array() - mean).square().sum() / static_cast<S>(cols);
        const S is = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
        xhat.row(i) = ((x.row(i).array() - mean) * is).matrix();
        inv_std[i] = is;
    }
    MatrixX<S> y = xhat;
    y.array().rowwise() *= scale.col(0).transpose().array();
    y.array().rowwise() += shift.col(0).transpose().array();
    if (cache != nullptr) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

template <class S>
MatrixX<S> layer_norm_backward(const MatrixX<S>& dy, const LayerNormCache<S>& cache,
                               const MatrixX<S>& scale, MatrixX<S>& dscale, MatrixX<S>& dshift) {
    const Index rows = dy.rows(), cols = dy.cols();
    dshift.col(0) += dy.colwise().sum().transpose();
    dscale.col(0) += dy.cwiseProduct(cache.xhat).colwise().sum().transpose();
    MatrixX<S> dxhat = dy;
    dxhat.array().rowwise() *= scale.col(0).transpose().array();
    MatrixX<S> dx(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        const S m1 = dxhat.row(i).mean();
        const S m2 = dxhat.row(i).cwiseProduct(cache.xhat.row(i)).mean();
        dx.row(i) = (cache.inv_std[i] *
                     (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2))
                        .matrix();
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Multi-headed self-attention (bidirectional)
// ---------------------------------------------------------------------------

template <class S>
struct MsaCache {
    MatrixX<S> a;                   // input (post-LN)
    MatrixX<S> q, k, v;             // (l x D), heads packed in column blocks
    std::vector<MatrixX<S>> attn;   // per head (l x l) softmax rows
    MatrixX<S> concat;              // (l x D) head outputs before W_O
};

/// scores = Q_h K_h^T / sqrt(d); masked columns get -inf before the row
/// softmax; output = concat_h(softmax(scores) V_h) W_O.
template <class S>
MatrixX<S> msa_forward(const MatrixX<S>& a, const MatrixX<S>& wq, const MatrixX<S>& wk,
                       const MatrixX<S>& wv, const MatrixX<S>& wo, Index num_heads,
                       const Mask& mask, MsaCache<S>* cache) {
    const Index l = a.rows();
    const Index dim = a.cols();
    if (dim % num_heads != 0) throw config_error("msa: embed dim not divisible by num_heads");
    if (!mask.empty()) {
        bool any = false;
        for (Index i = 0; i < l; ++i) any = any || mask_valid_at(mask, i);
        if (!any) throw runtime_failure("msa: mask excludes every position");
    }
    const Index dh = dim / num_heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

    MatrixX<S> q = a * wq, k = a * wk, v = a * wv;
    MatrixX<S> concat(l, dim);
    std::vector<MatrixX<S>> attn(static_cast<std::size_t>(num_heads));
    for (Index h = 0; h < num_heads; ++h) {
        auto qh = q.middleCols(h * dh, dh);
        auto kh = k.middleCols(h * dh, dh);
        auto vh = v.middleCols(h * dh, dh);
        MatrixX<S> scores = qh * kh.transpose() * inv_sqrt;
        if (!mask.empty())
            for (Index j = 0; j < l; ++j)
                if (!mask_valid_at(mask, j))
                    scores.col(j).setConstant(-std::numeric_limits<S>::infinity());
        MatrixX<S> p(l, l);
        for (Index i = 0; i < l; ++i) {
            const S m = scores.row(i).maxCoeff();
            p.row(i) = (scores.row(i).array() - m).exp().matrix();
            p.row(i) /= p.row(i).sum();
        }
        concat.middleCols(h * dh, dh).noalias() = p * vh;
        attn[static_cast<std::size_t>(h)] = std::move(p);
    }
    MatrixX<S> y = concat * wo;
    if (cache != nullptr) {
        cache->a = a;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->concat = std::move(concat);
    }
    return y;
}

template <class S>
struct MsaGrads {
    MatrixX<S>*dwq, *dwk, *dwv, *dwo;
};

template <class S>
MatrixX<S> msa_backward(const MatrixX<S>& dy, const MsaCache<S>& cache, const MatrixX<S>& wq,
                        const MatrixX<S>& wk, const MatrixX<S>& wv, const MatrixX<S>& wo,
                        Index num_heads, MsaGrads<S> grads) {
    const Index l = dy.rows();
    const Index dim = dy.cols();
    const Index dh = dim / num_heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

    grads.dwo->noalias() += cache.concat.transpose() * dy;
    MatrixX<S> dconcat = dy * wo.transpose();

    MatrixX<S> dq(l, dim), dk(l, dim), dv(l, dim);
    for (Index h = 0; h < num_heads; ++h) {
        const MatrixX<S>& p = cache.attn[static_cast<std::size_t>(h)];
        auto vh = cache.v.middleCols(h * dh, dh);
        auto doh = dconcat.middleCols(h * dh, dh);
        MatrixX<S> dp = doh * vh.transpose();
        dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
        // softmax backward, row-wise
        MatrixX<S> ds(l, l);
        for (Index i = 0; i < l; ++i) {
            const S dot = dp.row(i).cwiseProduct(p.row(i)).sum();
            ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
        }
        ds *= inv_sqrt;
        dq.middleCols(h * dh, dh).noalias() = ds * cache.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = ds.transpose() * cache.q.middleCols(h * dh, dh);
    }
    grads.dwq->noalias() += cache.a.transpose() * dq;
    grads.dwk->noalias() += cache.a.transpose() * dk;
    grads.dwv->noalias() += cache.a.transpose() * dv;
    MatrixX<S> da = dq * wq.transpose();
    da.noalias() += dk * wk.transpose();
    da.noalias() += dv * wv.transpose();
    return da;
}

// ---------------------------------------------------------------------------
// Feed-forward network: Linear -> ReLU -> Linear
// ---------------------------------------------------------------------------

template <class S>
struct FfnCache {
    MatrixX<S> input;
    MatrixX<S> hidden;  // post-ReLU
};

template <class S>
MatrixX<S> ffn_forward(const MatrixX<S>& x, const MatrixX<S>& w1, const MatrixX<S>& b1,
                       const MatrixX<S>& w2, const MatrixX<S>& b2, FfnCache<S>* cache) {
    MatrixX<S> h = x * w1;
    h.rowwise() += b1.col(0).transpose();
    h = h.cwiseMax(S(0));
    MatrixX<S> y = h * w2;
    y.rowwise() += b2.col(0).transpose();
    if (cache != nullptr) {
        cache->input = x;
        cache->hidden = std::move(h);
    }
    return y;
}

template <class S>
MatrixX<S> ffn_backward(const MatrixX<S>& dy, const FfnCache<S>& cache, const MatrixX<S>& w1,
                        const MatrixX<S>& w2, MatrixX<S>& dw1, MatrixX<S>& db1, MatrixX<S>& dw2,
                        MatrixX<S>& db2) {
    dw2.noalias() += cache.hidden.transpose() * dy;
    db2.col(0) += dy.colwise().sum().transpose();
    MatrixX<S> dh = dy * w2.transpose();
    dh = dh.cwiseProduct((cache.hidden.array() > S(0)).template cast<S>().matrix());
    dw1.noalias() += cache.input.transpose() * dh;
    db1.col(0) += dh.colwise().sum().transpose();
    return dh * w1.transpose();
}

}  // namespace trnet
