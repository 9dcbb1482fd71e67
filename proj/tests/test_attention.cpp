#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trnet/attention.hpp"
#include "trnet/model.hpp"

#include <random>

using namespace trnet;

namespace {

MatrixX<double> random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    MatrixX<double> m(r, c);
    for (Index j = 0; j < c; ++j)
        for (Index i = 0; i < r; ++i) m(i, j) = n(rng);
    return m;
}

/// Scalar-arithmetic brute force of single-head attention for l=2, D=2:
/// every score, softmax and weighted sum written out term by term.
MatrixX<double> brute_force_attention_2x2(const MatrixX<double>& x, const MatrixX<double>& wq,
                                          const MatrixX<double>& wk, const MatrixX<double>& wv,
                                          const MatrixX<double>& wo) {
    auto dot = [](double a0, double a1, double b0, double b1) { return a0 * b0 + a1 * b1; };
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            q[i][j] = x(i, 0) * wq(0, j) + x(i, 1) * wq(1, j);
            k[i][j] = x(i, 0) * wk(0, j) + x(i, 1) * wk(1, j);
            v[i][j] = x(i, 0) * wv(0, j) + x(i, 1) * wv(1, j);
        }
    const double inv = 1.0 / std::sqrt(2.0);
    MatrixX<double> out(2, 2);
    for (int i = 0; i < 2; ++i) {
        const double s0 = dot(q[i][0], q[i][1], k[0][0], k[0][1]) * inv;
        const double s1 = dot(q[i][0], q[i][1], k[1][0], k[1][1]) * inv;
        const double m = std::max(s0, s1);
        const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
        const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
        const double o0 = p0 * v[0][0] + p1 * v[1][0];
        const double o1 = p0 * v[0][1] + p1 * v[1][1];
        out(i, 0) = o0 * wo(0, 0) + o1 * wo(1, 0);
        out(i, 1) = o0 * wo(0, 1) + o1 * wo(1, 1);
    }
    return out;
}

}  // namespace

TEST_CASE("msa l=2 D=2 single head matches the brute-force oracle") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_matrix(2, 2, rng);
        auto wq = random_matrix(2, 2, rng), wk = random_matrix(2, 2, rng);
        auto wv = random_matrix(2, 2, rng), wo = random_matrix(2, 2, rng);
        auto got = msa_forward(x, wq, wk, wv, wo, 1, {}, static_cast<MsaCache<double>*>(nullptr));
        auto expected = brute_force_attention_2x2(x, wq, wk, wv, wo);
        CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("msa l=1 attends only to itself") {
    std::mt19937_64 rng(23);
    const Index d = 4;
    auto x = random_matrix(1, d, rng);
    auto wq = random_matrix(d, d, rng), wk = random_matrix(d, d, rng);
    auto wv = random_matrix(d, d, rng), wo = random_matrix(d, d, rng);
    MsaCache<double> cache;
    auto got = msa_forward(x, wq, wk, wv, wo, 2, {}, &cache);
    for (const auto& p : cache.attn) CHECK(p(0, 0) == doctest::Approx(1.0));
    MatrixX<double> expected = (x * wv) * wo;
    CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("attention rows sum to 1 over valid positions") {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 100; ++trial) {
        const Index l = 1 + static_cast<Index>(rng() % 8);
        const Index d = 8;
        auto x = random_matrix(l, d, rng, 2.0);
        auto wq = random_matrix(d, d, rng), wk = random_matrix(d, d, rng);
        auto wv = random_matrix(d, d, rng), wo = random_matrix(d, d, rng);
        Mask mask;
        if (trial % 3 == 0 && l > 1) {
            mask.assign(static_cast<std::size_t>(l), 1);
            mask[0] = 0;
        }
        MsaCache<double> cache;
        msa_forward(x, wq, wk, wv, wo, 2, mask, &cache);
        for (const auto& p : cache.attn)
            for (Index i = 0; i < l; ++i) {
                CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
                CHECK(p.row(i).minCoeff() >= 0.0);
                for (Index j = 0; j < l; ++j)
                    if (!mask_valid_at(mask, j)) CHECK(p(i, j) == 0.0);
            }
    }
}

TEST_CASE("msa rejects an all-masked input") {
    std::mt19937_64 rng(31);
    auto x = random_matrix(2, 2, rng);
    auto w = random_matrix(2, 2, rng);
    Mask mask{0, 0};
    CHECK_THROWS_AS(msa_forward(x, w, w, w, w, 1, mask, static_cast<MsaCache<double>*>(nullptr)),
                    runtime_failure);
}

TEST_CASE("layer norm rows have mean ~0 and variance ~1 before scale/shift") {
    std::mt19937_64 rng(37);
    auto x = random_matrix(16, 64, rng, 3.0);
    MatrixX<double> scale = MatrixX<double>::Ones(64, 1);
    MatrixX<double> shift = MatrixX<double>::Zero(64, 1);
    auto y = layer_norm_forward(x, scale, shift, static_cast<LayerNormCache<double>*>(nullptr));
    for (Index i = 0; i < y.rows(); ++i) {
        CHECK(std::abs(y.row(i).mean()) <= 1e-6);
        const double var = (y.row(i).array() - y.row(i).mean()).square().sum() / 64.0;
        CHECK(std::abs(var - 1.0) <= 1e-5);
    }
}

TEST_CASE("zero-weight encoder is the identity map exactly") {
    ModelConfig cfg;
    cfg.cube_side = 16;
    cfg.conv_filters = {4, 8, 16, 32};
    cfg.num_heads = 1;
    cfg.ffn_hidden = 16;
    cfg.num_encoders = 1;
    auto params = init_params<double>(cfg, 1);
    auto& e = params.encoders[0];
    e.wq.setZero();
    e.wk.setZero();
    e.wv.setZero();
    e.wo.setZero();
    e.ffn_w1.setZero();
    e.ffn_w2.setZero();

    std::mt19937_64 rng(41);
    auto z = random_matrix(5, cfg.embed_dim(), rng);
    auto out = encoder_forward(z, e, cfg, {}, static_cast<EncoderCache<double>*>(nullptr));
    CHECK(out == z);
}

TEST_CASE("encoder stack preserves shape at every stage") {
    ModelConfig cfg;
    cfg.cube_side = 16;
    cfg.conv_filters = {4, 8, 16, 32};
    cfg.num_heads = 4;
    cfg.num_encoders = 12;
    cfg.max_seq_len = 30;
    auto params = init_params<double>(cfg, 2);
    std::mt19937_64 rng(43);
    MatrixX<double> z = random_matrix(30, cfg.embed_dim(), rng);
    for (const auto& e : params.encoders) {
        z = encoder_forward(z, e, cfg, {}, static_cast<EncoderCache<double>*>(nullptr));
        CHECK(z.rows() == 30);
        CHECK(z.cols() == cfg.embed_dim());
    }
}

TEST_CASE("alternative residual wiring differs from the default") {
    ModelConfig cfg;
    cfg.cube_side = 16;
    cfg.conv_filters = {4, 8, 16, 32};
    cfg.num_heads = 1;
    cfg.num_encoders = 1;
    auto params = init_params<double>(cfg, 3);
    std::mt19937_64 rng(47);
    auto z = random_matrix(4, cfg.embed_dim(), rng);
    auto a = encoder_forward(z, params.encoders[0], cfg, {},
                             static_cast<EncoderCache<double>*>(nullptr));
    cfg.alt_ffn_input = true;
    auto b = encoder_forward(z, params.encoders[0], cfg, {},
                             static_cast<EncoderCache<double>*>(nullptr));
    CHECK((a - b).cwiseAbs().maxCoeff() > 1e-6);
}
