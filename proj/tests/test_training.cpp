#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_helpers.hpp"
#include "trnet/training.hpp"

#include <random>
#include <set>

using namespace trnet;
using namespace trnet::testing;

namespace {

std::vector<std::string> make_ids(int n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("cl" + std::to_string(i));
    return ids;
}

/// Toy separable dataset: label 1 iff the cube mean is positive. A threshold
/// on mean intensity is a perfect classifier.
SequenceDataset<double> separable_dataset(int n_sources, Index seq_len, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.3);
    SequenceDataset<double> ds;
    for (int s = 0; s < n_sources; ++s) {
        SourceSequences<double> src;
        src.source_id = "cl" + std::to_string(s);
        VolumeSequence<double> seq;
        seq.source_id = src.source_id;
        for (Index i = 0; i < seq_len; ++i) {
            const bool positive = rng() % 2 == 0;
            Volume<double> cube(16, 16, 16);
            for (Index k = 0; k < cube.size(); ++k)
                cube.data[k] = noise(rng) + (positive ? 1.0 : -1.0);
            seq.cubes.push_back(std::move(cube));
            seq.center_indices.push_back(i * 5);
            seq.labels.push_back(positive);
            src.truth.resize(static_cast<std::size_t>(seq_len * 5), 0);
        }
        for (Index i = 0; i < seq_len; ++i)
            for (Index v = i * 5; v < (i + 1) * 5; ++v)
                src.truth[static_cast<std::size_t>(v)] = seq.labels[static_cast<std::size_t>(i)];
        src.eval_seqs.push_back(seq);
        src.train_seqs.push_back(std::move(seq));
        ds.push_back(std::move(src));
    }
    return ds;
}

TrainConfig toy_train_config() {
    TrainConfig t;
    t.epochs = 30;
    t.folds = 5;
    t.batch_size = 4;
    t.learning_rate = 3e-4;
    t.seed = 7;
    return t;
}

}  // namespace

TEST_CASE("split_folds sizes and partition") {
    SUBCASE("609 centerlines over 10 folds -> test folds of 60 or 61") {
        auto plan = split_folds(make_ids(609), 10, 0.10, 3);
        std::size_t total = 0;
        for (const auto& f : plan.folds) {
            CHECK((f.test.size() == 60 || f.test.size() == 61));
            total += f.test.size();
        }
        CHECK(total == 609);
    }
    SUBCASE("10 centerlines over 10 folds -> singleton test folds") {
        auto plan = split_folds(make_ids(10), 10, 0.10, 3);
        for (const auto& f : plan.folds) CHECK(f.test.size() == 1);
    }
    SUBCASE("test folds partition all ids with no duplicates") {
        auto plan = split_folds(make_ids(47), 10, 0.10, 9);
        std::set<std::string> seen;
        for (const auto& f : plan.folds)
            for (const auto& id : f.test) CHECK(seen.insert(id).second);
        CHECK(seen.size() == 47);
    }
    SUBCASE("no leakage between train/val/test within a fold") {
        auto plan = split_folds(make_ids(40), 10, 0.10, 5);
        for (const auto& f : plan.folds) {
            std::set<std::string> all;
            for (const auto& id : f.train) CHECK(all.insert(id).second);
            for (const auto& id : f.val) CHECK(all.insert(id).second);
            for (const auto& id : f.test) CHECK(all.insert(id).second);
            CHECK(all.size() == 40);
            CHECK(f.val.size() == 4);  // 10% of the 36-id pool, rounded
        }
    }
    SUBCASE("fewer centerlines than folds rejected") {
        CHECK_THROWS_AS(split_folds(make_ids(5), 10, 0.10, 1), config_error);
    }
    SUBCASE("deterministic under input order") {
        auto ids = make_ids(30);
        auto a = split_folds(ids, 10, 0.10, 11);
        std::shuffle(ids.begin(), ids.end(), std::mt19937_64(99));
        auto b = split_folds(ids, 10, 0.10, 11);
        for (std::size_t k = 0; k < a.folds.size(); ++k) CHECK(a.folds[k].test == b.folds[k].test);
    }
}

TEST_CASE("loss values") {
    SUBCASE("perfect one-hot predictions -> ~0") {
        MatrixX<double> probs(2, 2);
        probs << 1.0, 0.0, 0.0, 1.0;
        CHECK(loss(probs, {0, 1}, {}, {1.0, 1.0}) <= 1e-9);
    }
    SUBCASE("uniform predictions -> ln 2 per position") {
        MatrixX<double> probs(3, 2);
        probs.setConstant(0.5);
        CHECK(loss(probs, {0, 1, 0}, {}, {1.0, 1.0}) == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("doubling class weights doubles the loss") {
        MatrixX<double> probs(2, 2);
        probs << 0.7, 0.3, 0.2, 0.8;
        const double l1 = loss(probs, {0, 1}, {}, {1.0, 1.0});
        const double l2 = loss(probs, {0, 1}, {}, {2.0, 2.0});
        CHECK(l2 == doctest::Approx(2.0 * l1));
    }
    SUBCASE("zero probability for the true class stays finite") {
        MatrixX<double> probs(1, 2);
        probs << 1.0, 0.0;
        const double l = loss(probs, {1}, {}, {1.0, 1.0});
        CHECK(std::isfinite(l));
        CHECK(l == doctest::Approx(-std::log(1e-12)));
    }
    SUBCASE("masked positions excluded") {
        MatrixX<double> probs(2, 2);
        probs << 0.9, 0.1, 0.5, 0.5;
        CHECK(loss(probs, {0, 1}, Mask{1, 0}, {1.0, 1.0}) ==
              doctest::Approx(-std::log(0.9)));
    }
}

TEST_CASE("train_fold basics") {
    auto ds = separable_dataset(8, 4, 21);
    auto mcfg = tiny_config(1, 1, 4);
    auto tcfg = toy_train_config();

    SUBCASE("epochs=1 returns the single evaluated checkpoint") {
        tcfg.epochs = 1;
        auto train = gather(ds, {"cl0", "cl1", "cl2"}, true);
        auto val = gather(ds, {"cl3"}, false);
        auto res = train_fold(train, val, mcfg, tcfg, 5);
        CHECK(res.log.size() == 1);
        CHECK(res.best_epoch == 1);
    }
    SUBCASE("same seed -> identical training logs") {
        auto train = gather(ds, {"cl0", "cl1", "cl2"}, true);
        auto val = gather(ds, {"cl3"}, false);
        tcfg.epochs = 3;
        auto a = train_fold(train, val, mcfg, tcfg, 5);
        auto b = train_fold(train, val, mcfg, tcfg, 5);
        REQUIRE(a.log.size() == b.log.size());
        for (std::size_t i = 0; i < a.log.size(); ++i) {
            CHECK(a.log[i].train_loss == b.log[i].train_loss);
            CHECK(a.log[i].val_mcc == b.log[i].val_mcc);
        }
    }
    SUBCASE("learning rate 0 leaves parameters at initialization") {
        tcfg.epochs = 2;
        tcfg.learning_rate = 0.0;
        auto train = gather(ds, {"cl0", "cl1"}, true);
        auto val = gather(ds, {"cl2"}, false);
        auto res = train_fold(train, val, mcfg, tcfg, 5);
        auto init = init_params<double>(mcfg, 5);
        bool identical = true;
        std::vector<const MatrixX<double>*> a, b;
        res.best_params.for_each(
            [&](const std::string&, const MatrixX<double>& m) { a.push_back(&m); });
        init.for_each([&](const std::string&, const MatrixX<double>& m) { b.push_back(&m); });
        for (std::size_t i = 0; i < a.size(); ++i) identical = identical && (*a[i] == *b[i]);
        CHECK(identical);
    }
    SUBCASE("checkpoint selection returns the max over the log") {
        tcfg.epochs = 6;
        auto train = gather(ds, {"cl0", "cl1", "cl2", "cl3"}, true);
        auto val = gather(ds, {"cl4"}, false);
        auto res = train_fold(train, val, mcfg, tcfg, 5);
        double best = -2;
        for (const auto& r : res.log) best = std::max(best, r.val_mcc);
        CHECK(res.best_metric == best);
    }
}

TEST_CASE("toy separable dataset converges: val ACC >= 0.95 within 50 epochs") {
    auto ds = separable_dataset(10, 5, 33);
    auto mcfg = tiny_config(1, 1, 5);
    auto tcfg = toy_train_config();
    tcfg.epochs = 50;
    auto train = gather(ds, {"cl0", "cl1", "cl2", "cl3", "cl4", "cl5", "cl6"}, true);
    auto val = gather(ds, {"cl7", "cl8", "cl9"}, false);
    auto res = train_fold(train, val, mcfg, tcfg, 13);
    double best_acc = 0;
    for (const auto& r : res.log) best_acc = std::max(best_acc, r.val_acc);
    CHECK(best_acc >= 0.95);
    // training loss decreases on the separable task
    CHECK(res.log.back().train_loss < res.log.front().train_loss);
}

TEST_CASE("run_cross_validation covers every centerline exactly once") {
    auto ds = separable_dataset(12, 3, 55);
    auto mcfg = tiny_config(1, 1, 3);
    auto tcfg = toy_train_config();
    tcfg.folds = 4;
    tcfg.epochs = 2;
    auto cv = run_cross_validation(ds, mcfg, tcfg);
    CHECK(cv.folds.size() == 4);
    std::set<std::string> predicted;
    for (const auto& f : cv.folds) {
        CHECK(f.ok);
        for (const auto& p : f.test_predictions) CHECK(predicted.insert(p.source_id).second);
    }
    CHECK(predicted.size() == 12);

    // same seed -> identical fold plan
    auto cv2 = run_cross_validation(ds, mcfg, tcfg);
    for (std::size_t k = 0; k < cv.plan.folds.size(); ++k) {
        CHECK(cv.plan.folds[k].test == cv2.plan.folds[k].test);
        CHECK(cv.plan.folds[k].train == cv2.plan.folds[k].train);
    }
}
