#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_helpers.hpp"
#include "trnet/model.hpp"

#include <algorithm>
#include <random>

using namespace trnet;
using namespace trnet::testing;

TEST_CASE("shape chain: N=29 defaults give H=1, C=128, D=128") {
    ModelConfig cfg;  // defaults
    // oracle: floor(s/2) per stage
    Index s = 29;
    for (int i = 0; i < 4; ++i) s /= 2;
    CHECK(s == 1);
    CHECK(cfg.feature_side() == 1);
    CHECK(cfg.feature_channels() == 128);
    CHECK(cfg.embed_dim() == 128);
}

TEST_CASE("cnn_forward: all-zero cube with zero biases gives all-zero features") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 1);
    Volume<double> cube(16, 16, 16);
    auto feat = cnn_forward(cube, params, static_cast<CnnCache<double>*>(nullptr));
    CHECK(feat.size() == cfg.embed_dim());
    CHECK(feat.isZero());
}

TEST_CASE("cnn rejects cubes too small for four pooling stages") {
    ModelConfig cfg;
    cfg.cube_side = 8;
    CHECK_THROWS_AS(validate(cfg), config_error);
}

TEST_CASE("model config invariants") {
    ModelConfig cfg;
    cfg.conv_filters = {16, 32, 64, 100};
    CHECK_THROWS_AS(validate(cfg), config_error);
    cfg = ModelConfig{};
    cfg.num_heads = 7;  // 128 % 7 != 0
    CHECK_THROWS_AS(validate(cfg), config_error);
}

TEST_CASE("embed_sequence") {
    std::mt19937_64 rng(3);
    const Index l = 4, d = 8;
    MatrixX<double> feats(l, d), emb(6, d);
    std::normal_distribution<double> n;
    for (Index j = 0; j < d; ++j) {
        for (Index i = 0; i < l; ++i) feats(i, j) = n(rng);
        for (Index i = 0; i < 6; ++i) emb(i, j) = n(rng);
    }
    SUBCASE("zero embeddings -> features unchanged") {
        CHECK(embed_sequence(feats, MatrixX<double>(MatrixX<double>::Zero(6, d))) == feats);
    }
    SUBCASE("zero features -> first l embeddings") {
        CHECK(embed_sequence(MatrixX<double>(MatrixX<double>::Zero(l, d)), emb) ==
              emb.topRows(l));
    }
    SUBCASE("sum and shape") {
        auto z0 = embed_sequence(feats, emb);
        CHECK(z0.rows() == l);
        CHECK(z0.cols() == d);
        CHECK(z0 == feats + emb.topRows(l));
    }
    SUBCASE("too-long sequence rejected") {
        MatrixX<double> big = MatrixX<double>::Zero(7, d);
        CHECK_THROWS_AS(embed_sequence(big, emb), runtime_failure);
    }
}

TEST_CASE("classify") {
    SUBCASE("zero weights -> uniform probabilities") {
        MatrixX<double> z = MatrixX<double>::Random(5, 8);
        auto probs = classify(z, MatrixX<double>(MatrixX<double>::Zero(8, 2)),
                              MatrixX<double>(MatrixX<double>::Zero(2, 1)));
        for (Index i = 0; i < 5; ++i) {
            CHECK(probs(i, 0) == doctest::Approx(0.5));
            CHECK(probs(i, 1) == doctest::Approx(0.5));
        }
    }
    SUBCASE("extreme logits stay finite") {
        MatrixX<double> logits(1, 2);
        logits << 1000.0, 0.0;
        auto probs = softmax_rows(logits);
        CHECK(std::isfinite(probs(0, 0)));
        CHECK(probs(0, 0) == doctest::Approx(1.0));
        CHECK(probs(0, 1) == doctest::Approx(0.0));
    }
}

TEST_CASE("model_forward returns one prediction pair per cube") {
    auto cfg = tiny_config(2, 1, 30);
    auto params = init_params<double>(cfg, 5);
    std::mt19937_64 rng(7);
    for (Index l : {1, 2, 5}) {
        std::vector<Volume<double>> cubes;
        for (Index i = 0; i < l; ++i) cubes.push_back(random_cube<double>(16, rng));
        auto probs = model_forward(cubes, params);
        CHECK(probs.rows() == l);
        CHECK(probs.cols() == 2);
        for (Index i = 0; i < l; ++i)
            CHECK(probs.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("model_forward is deterministic") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 11);
    std::mt19937_64 rng(13);
    std::vector<Volume<double>> cubes{random_cube<double>(16, rng), random_cube<double>(16, rng)};
    auto a = model_forward(cubes, params);
    auto b = model_forward(cubes, params);
    CHECK(a == b);
}

TEST_CASE("permutation equivariance with zero order embeddings") {
    auto cfg = tiny_config(2, 1, 8);
    auto params = init_params<double>(cfg, 17);
    params.order_embeddings.setZero();
    std::mt19937_64 rng(19);
    std::vector<Volume<double>> cubes;
    for (int i = 0; i < 5; ++i) cubes.push_back(random_cube<double>(16, rng));
    auto base = model_forward(cubes, params);

    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<Volume<double>> permuted;
    for (auto p : perm) permuted.push_back(cubes[p]);
    auto out = model_forward(permuted, params);
    double max_diff = 0;
    for (std::size_t i = 0; i < perm.size(); ++i)
        max_diff = std::max(max_diff,
                            (out.row(static_cast<Index>(i)) -
                             base.row(static_cast<Index>(perm[i]))).cwiseAbs().maxCoeff());
    CHECK(max_diff <= 1e-5);
}

TEST_CASE("distinct order embeddings break permutation equivariance") {
    auto cfg = tiny_config(2, 1, 8);
    auto params = init_params<double>(cfg, 17);
    params.order_embeddings = MatrixX<double>::Random(8, cfg.embed_dim());  // distinct rows
    // moderate readout scale: large enough that positional differences reach the
    // probabilities, small enough that the softmax does not saturate
    params.cls_w = 0.05 * MatrixX<double>::Random(cfg.embed_dim(), 2);
    std::mt19937_64 rng(19);
    std::vector<Volume<double>> cubes;
    for (int i = 0; i < 5; ++i) cubes.push_back(random_cube<double>(16, rng));
    auto base = model_forward(cubes, params);

    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<Volume<double>> permuted;
    for (auto p : perm) permuted.push_back(cubes[p]);
    auto out = model_forward(permuted, params);
    double max_diff = 0;
    for (std::size_t i = 0; i < perm.size(); ++i)
        max_diff = std::max(max_diff,
                            (out.row(static_cast<Index>(i)) -
                             base.row(static_cast<Index>(perm[i]))).cwiseAbs().maxCoeff());
    CHECK(max_diff > 1e-3);
}

TEST_CASE("gradient of unused order-embedding rows is zero") {
    auto cfg = tiny_config(2, 1, 6);
    auto params = init_params<double>(cfg, 23);
    std::mt19937_64 rng(29);
    std::vector<Volume<double>> cubes{random_cube<double>(16, rng), random_cube<double>(16, rng)};
    std::vector<std::uint8_t> labels{0, 1};
    auto grads = zeros_like(params);
    model_gradients<double>({{&cubes, &labels, {}}}, params, {1.0, 1.0}, grads);
    CHECK(grads.order_embeddings.bottomRows(4).isZero());
    CHECK(!grads.order_embeddings.topRows(2).isZero());
}

TEST_CASE("doubling class weights doubles loss and gradients") {
    auto cfg = tiny_config(1, 1, 4);
    auto params = init_params<double>(cfg, 31);
    std::mt19937_64 rng(37);
    std::vector<Volume<double>> cubes{random_cube<double>(16, rng), random_cube<double>(16, rng),
                                      random_cube<double>(16, rng)};
    std::vector<std::uint8_t> labels{0, 1, 0};
    auto g1 = zeros_like(params);
    auto g2 = zeros_like(params);
    const double l1 = model_gradients<double>({{&cubes, &labels, {}}}, params, {1.0, 1.0}, g1);
    const double l2 = model_gradients<double>({{&cubes, &labels, {}}}, params, {2.0, 2.0}, g2);
    CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-9));
    CHECK((g2.cls_w - 2.0 * g1.cls_w).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((g2.conv_w[0] - 2.0 * g1.conv_w[0]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("masked positions contribute no loss and no gradient") {
    auto cfg = tiny_config(1, 1, 4);
    auto params = init_params<double>(cfg, 41);
    std::mt19937_64 rng(43);
    std::vector<Volume<double>> cubes{random_cube<double>(16, rng), random_cube<double>(16, rng)};
    std::vector<std::uint8_t> labels_a{0, 1};
    Mask mask{1, 0};

    std::vector<std::uint8_t> labels_b{0, 0};  // masked label differs; must not matter
    auto ga = zeros_like(params);
    auto gb = zeros_like(params);
    const double la = model_gradients<double>({{&cubes, &labels_a, mask}}, params, {1.0, 1.0}, ga);
    const double lb = model_gradients<double>({{&cubes, &labels_b, mask}}, params, {1.0, 1.0}, gb);
    CHECK(la == doctest::Approx(lb).epsilon(1e-12));
    CHECK((ga.cls_w - gb.cls_w).cwiseAbs().maxCoeff() < 1e-12);
}
