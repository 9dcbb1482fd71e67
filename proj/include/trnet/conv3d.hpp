#pragma once

#include "trnet/common.hpp"

#include <algorithm>
#include <vector>

namespace trnet {

// 3x3x3 convolution with same (zero) padding, expressed as im2col + GEMM.
// Feature maps are stored as (d^3 x C) matrices: one column per channel,
// spatial index s = (z*d + y)*d + x.

/// col(:, c*27 + k) = channel c shifted by kernel offset k, zeros outside.
template <class S>
void im2col_3x3x3(const MatrixX<S>& in, Index d, MatrixX<S>& col) {
    const Index channels = in.cols();
    col.setZero(d * d * d, channels * 27);
    for (Index c = 0; c < channels; ++c) {
        for (Index dz = -1; dz <= 1; ++dz)
            for (Index dy = -1; dy <= 1; ++dy)
                for (Index dx = -1; dx <= 1; ++dx) {
                    const Index k = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
                    auto dst = col.col(c * 27 + k);
                    const auto src = in.col(c);
                    const Index x_lo = std::max<Index>(0, -dx);
                    const Index x_hi = std::min<Index>(d, d - dx);
                    if (x_hi <= x_lo) continue;
                    for (Index z = std::max<Index>(0, -dz); z < std::min<Index>(d, d - dz); ++z)
                        for (Index y = std::max<Index>(0, -dy); y < std::min<Index>(d, d - dy);
                             ++y) {
                            const Index s_dst = (z * d + y) * d + x_lo;
                            const Index s_src = ((z + dz) * d + (y + dy)) * d + x_lo + dx;
                            dst.segment(s_dst, x_hi - x_lo) = src.segment(s_src, x_hi - x_lo);
                        }
                }
    }
}

/// Adjoint of im2col_3x3x3: scatters column gradients back onto channels.
template <class S>
void col2im_3x3x3(const MatrixX<S>& col, Index d, MatrixX<S>& out) {
    const Index channels = col.cols() / 27;
    out.setZero(d * d * d, channels);
    for (Index c = 0; c < channels; ++c) {
        auto dst = out.col(c);
        for (Index dz = -1; dz <= 1; ++dz)
            for (Index dy = -1; dy <= 1; ++dy)
                for (Index dx = -1; dx <= 1; ++dx) {
                    const Index k = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
                    const auto src = col.col(c * 27 + k);
                    const Index x_lo = std::max<Index>(0, -dx);
                    const Index x_hi = std::min<Index>(d, d - dx);
                    if (x_hi <= x_lo) continue;
                    for (Index z = std::max<Index>(0, -dz); z < std::min<Index>(d, d - dz); ++z)
                        for (Index y = std::max<Index>(0, -dy); y < std::min<Index>(d, d - dy);
                             ++y) {
                            const Index s_dst = ((z + dz) * d + (y + dy)) * d + x_lo + dx;
                            const Index s_src = (z * d + y) * d + x_lo;
                            dst.segment(s_dst, x_hi - x_lo) += src.segment(s_src, x_hi - x_lo);
                        }
                }
    }
}

template <class S>
struct ConvStageCache {
    MatrixX<S> input;    // (d^3 x C_in)
    MatrixX<S> act;      // post-ReLU, pre-pool (d^3 x C_out)
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> argmax;  // (h^3 x C_out)
    Index d = 0, h = 0;
};

/// 2x2x2 max pooling with floor division; trailing slabs on odd sizes are
/// discarded. Argmax indices are spatial indices into the input.
template <class S>
void maxpool2(const MatrixX<S>& in, Index d, MatrixX<S>& out,
              Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>& argmax) {
    const Index h = d / 2;
    const Index channels = in.cols();
    out.resize(h * h * h, channels);
    argmax.resize(h * h * h, channels);
    for (Index c = 0; c < channels; ++c)
        for (Index z = 0; z < h; ++z)
            for (Index y = 0; y < h; ++y)
                for (Index x = 0; x < h; ++x) {
                    S best = in((2 * z * d + 2 * y) * d + 2 * x, c);
                    Index best_s = (2 * z * d + 2 * y) * d + 2 * x;
                    for (Index a = 0; a < 2; ++a)
                        for (Index b = 0; b < 2; ++b)
                            for (Index e = 0; e < 2; ++e) {
                                const Index s = ((2 * z + a) * d + (2 * y + b)) * d + 2 * x + e;
                                if (in(s, c) > best) {
                                    best = in(s, c);
                                    best_s = s;
                                }
                            }
                    const Index o = (z * h + y) * h + x;
                    out(o, c) = best;
                    argmax(o, c) = static_cast<int>(best_s);
                }
}

/// One CNN substructure: conv(3x3x3, same) -> ReLU -> maxpool(2x2x2).
/// w is ((C_in*27) x C_out), b is (C_out x 1).
template <class S>
MatrixX<S> conv_stage_forward(const MatrixX<S>& in, Index d, const MatrixX<S>& w,
                              const MatrixX<S>& b, ConvStageCache<S>* cache) {
    MatrixX<S> col;
    im2col_3x3x3(in, d, col);
    MatrixX<S> act = col * w;
    act.rowwise() += b.col(0).transpose();
    act = act.cwiseMax(S(0));
    MatrixX<S> pooled;
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> argmax;
    maxpool2(act, d, pooled, argmax);
    if (cache != nullptr) {
        cache->input = in;
        cache->act = std::move(act);
        cache->argmax = std::move(argmax);
        cache->d = d;
        cache->h = d / 2;
    }
    return pooled;
}

/// Backward through one substructure. Accumulates into dw/db; returns the
/// gradient with respect to the stage input unless skip_dinput.
template <class S>
MatrixX<S> conv_stage_backward(const MatrixX<S>& dpooled, const ConvStageCache<S>& cache,
                               const MatrixX<S>& w, MatrixX<S>& dw, MatrixX<S>& db,
                               bool skip_dinput = false) {
    const Index d = cache.d;
    MatrixX<S> dact = MatrixX<S>::Zero(d * d * d, dpooled.cols());
    for (Index c = 0; c < dpooled.cols(); ++c)
        for (Index o = 0; o < dpooled.rows(); ++o)
            dact(cache.argmax(o, c), c) += dpooled(o, c);
    dact = dact.cwiseProduct((cache.act.array() > S(0)).template cast<S>().matrix());

    MatrixX<S> col;
    im2col_3x3x3(cache.input, d, col);
    dw.noalias() += col.transpose() * dact;
    db.col(0) += dact.colwise().sum().transpose();
    if (skip_dinput) return MatrixX<S>();
    MatrixX<S> dcol = dact * w.transpose();
    MatrixX<S> din;
    col2im_3x3x3(dcol, d, din);
    return din;
}

}  // namespace trnet
