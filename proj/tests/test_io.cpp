#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_helpers.hpp"
#include "trnet/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

using namespace trnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("trnet_io_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("container roundtrip preserves meta and every array bit-exactly") {
    TempDir dir;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    Container c;
    c.meta["kind"] = "unit_test";
    c.meta["note"] = json{{"nested", true}, {"x", 3}};
    MatrixX<float> mf(7, 3);
    MatrixX<double> md(2, 9);
    for (Index i = 0; i < mf.size(); ++i) mf.data()[i] = static_cast<float>(n(rng));
    for (Index i = 0; i < md.size(); ++i) md.data()[i] = n(rng);
    put_matrix(c, "a.f32", mf);
    put_matrix(c, "b.f64", md);
    put_u8(c, "flags", {0, 1, 1, 0, 255});
    put_i64(c, "idx", {0, 5, 10, -3});
    put_f64(c, "vals", {1.5, -2.25, 0.0});

    const fs::path file = dir.path / "round.trnb";
    write_container(file, c);
    Container r = read_container(file);

    CHECK(r.meta == c.meta);
    CHECK(get_matrix<float>(r, "a.f32") == mf);
    CHECK(get_matrix<double>(r, "b.f64") == md);
    CHECK(get_u8(r, "flags") == std::vector<std::uint8_t>{0, 1, 1, 0, 255});
    CHECK(get_i64(r, "idx") == std::vector<Index>{0, 5, 10, -3});
    CHECK(get_f64(r, "vals") == std::vector<double>{1.5, -2.25, 0.0});
    CHECK_THROWS_AS(r.get("missing"), runtime_failure);

    SUBCASE("writes are byte-stable") {
        const std::string first = slurp(file);
        write_container(file, c);
        CHECK(slurp(file) == first);
    }
    SUBCASE("corrupted magic is rejected") {
        std::string bytes = slurp(file);
        bytes[0] = 'X';
        const fs::path bad = dir.path / "bad.trnb";
        std::ofstream(bad, std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_container(bad), runtime_failure);
    }
}

TEST_CASE("phantom roundtrip") {
    TempDir dir;
    PhantomConfig cfg;
    cfg.centerline_length = 60;
    cfg.id = "cl_io_0";
    cfg.seed = 99;
    cfg.plaques.push_back({20, 15, 0.7, PlaqueKind::calcified, PlaqueProfile::smooth});
    auto img = generate_phantom<float>(cfg);

    const fs::path file = dir.path / "phantom.trnb";
    save_phantom(file, img, cfg);
    PhantomConfig loaded_cfg;
    auto back = load_phantom(file, &loaded_cfg);

    CHECK(back.intensities.n0 == img.intensities.n0);
    CHECK(back.intensities.n1 == img.intensities.n1);
    CHECK(back.intensities.n2 == img.intensities.n2);
    CHECK(back.intensities.data == img.intensities.data);
    CHECK(back.narrowing == img.narrowing);
    CHECK(back.labels == img.labels);
    CHECK(back.id == img.id);
    CHECK(back.background == img.background);
    CHECK(loaded_cfg.plaques.size() == 1);
    CHECK(loaded_cfg.plaques[0].start == 20);
    CHECK(loaded_cfg.plaques[0].max_narrowing == 0.7);
    CHECK(loaded_cfg.plaques[0].kind == PlaqueKind::calcified);
    CHECK(loaded_cfg.seed == 99);

    SUBCASE("wrong kind is rejected") {
        Container c;
        c.meta["kind"] = "checkpoint";
        write_container(dir.path / "wrong.trnb", c);
        CHECK_THROWS_AS(load_phantom(dir.path / "wrong.trnb"), runtime_failure);
    }
}

TEST_CASE("sequence source roundtrip") {
    TempDir dir;
    PhantomConfig pcfg;
    pcfg.centerline_length = 150;
    pcfg.id = "cl_io_1";
    pcfg.plaques.push_back({60, 20, 0.8, PlaqueKind::non_calcified, PlaqueProfile::rectangular});
    auto img = generate_phantom<float>(pcfg);

    SamplingConfig scfg;
    scfg.seed = 4;
    SourceSequences<float> src;
    src.source_id = img.id;
    src.truth = img.labels;
    {
        SamplingConfig clean = scfg;
        clean.jitter_max = 0;
        clean.rotate = false;
        src.eval_seqs = build_sequences(img, clean);
        src.train_seqs = build_sequences(img, scfg);
    }

    const fs::path file = dir.path / "seqs.trnb";
    save_source_sequences(file, src, scfg);
    SamplingConfig loaded_cfg;
    auto back = load_source_sequences(file, &loaded_cfg);

    CHECK(back.source_id == src.source_id);
    CHECK(back.truth == src.truth);
    CHECK(loaded_cfg.seed == 4);
    REQUIRE(back.eval_seqs.size() == src.eval_seqs.size());
    REQUIRE(back.train_seqs.size() == src.train_seqs.size());
    for (std::size_t s = 0; s < src.eval_seqs.size(); ++s) {
        const auto& a = src.eval_seqs[s];
        const auto& b = back.eval_seqs[s];
        REQUIRE(b.length() == a.length());
        CHECK(b.center_indices == a.center_indices);
        CHECK(b.labels == a.labels);
        for (Index i = 0; i < a.length(); ++i)
            CHECK(b.cubes[static_cast<std::size_t>(i)].data ==
                  a.cubes[static_cast<std::size_t>(i)].data);
    }
    for (std::size_t s = 0; s < src.train_seqs.size(); ++s) {
        const auto& a = src.train_seqs[s];
        const auto& b = back.train_seqs[s];
        REQUIRE(b.length() == a.length());
        for (Index i = 0; i < a.length(); ++i)
            CHECK(b.cubes[static_cast<std::size_t>(i)].data ==
                  a.cubes[static_cast<std::size_t>(i)].data);
    }
}

TEST_CASE("checkpoint roundtrip preserves every parameter tensor") {
    TempDir dir;
    auto cfg = testing::tiny_config(2, 1, 4);
    auto params = init_params<float>(cfg, 77);
    CheckpointMeta meta;
    meta.model = cfg;
    meta.seed = 77;
    meta.input_mean = 123.5;
    meta.input_std = 45.25;
    meta.class_weights = {0.6, 3.5};

    const fs::path file = dir.path / "ckpt.trnb";
    save_checkpoint(file, params, meta);
    CheckpointMeta back_meta;
    auto back = load_checkpoint(file, &back_meta);

    std::vector<std::pair<std::string, const MatrixX<float>*>> a, b;
    params.for_each([&](const std::string& n, const MatrixX<float>& m) { a.emplace_back(n, &m); });
    back.for_each([&](const std::string& n, const MatrixX<float>& m) { b.emplace_back(n, &m); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(*a[i].second == *b[i].second);
    }
    CHECK(back_meta.seed == 77);
    CHECK(back_meta.input_mean == 123.5);
    CHECK(back_meta.input_std == 45.25);
    CHECK(back_meta.class_weights[0] == 0.6);
    CHECK(back_meta.class_weights[1] == 3.5);
    CHECK(back_meta.model.cube_side == cfg.cube_side);
    CHECK(back_meta.model.num_encoders == cfg.num_encoders);

    SUBCASE("loaded checkpoint predicts identically") {
        std::mt19937_64 rng(11);
        std::vector<Volume<float>> cubes{testing::random_cube<float>(16, rng),
                                         testing::random_cube<float>(16, rng)};
        CHECK(model_forward(cubes, params) == model_forward(cubes, back));
    }
}

TEST_CASE("config json roundtrips") {
    SUBCASE("model config") {
        ModelConfig c;
        c.conv_filters = {8, 16, 32, 64};
        c.num_encoders = 4;
        c.alt_ffn_input = true;
        auto back = model_config_from_json(to_json(c));
        CHECK(back.conv_filters == c.conv_filters);
        CHECK(back.num_encoders == 4);
        CHECK(back.alt_ffn_input == true);
        CHECK(back.final_layer_norm == c.final_layer_norm);
    }
    SUBCASE("train config") {
        TrainConfig c;
        c.optimizer = Optimizer::sgd_momentum;
        c.class_weights = {0.7, 2.0};
        c.selection_metric = SelectionMetric::acc;
        c.grad_clip = 5.0;
        auto back = train_config_from_json(to_json(c));
        CHECK(back.optimizer == Optimizer::sgd_momentum);
        CHECK(back.class_weights == c.class_weights);
        CHECK(back.selection_metric == SelectionMetric::acc);
        CHECK(back.grad_clip == 5.0);
    }
    SUBCASE("invalid enum strings rejected") {
        CHECK_THROWS_AS(train_config_from_json(json{{"optimizer", "adagrad"}}), config_error);
        CHECK_THROWS_AS(plaque_from_json(json{{"start", 0}, {"length", 1},
                                              {"max_narrowing", 0.5}, {"kind", "soft"}}),
                        config_error);
    }
}
