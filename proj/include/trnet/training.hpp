#pragma once

#include "trnet/common.hpp"
#include "trnet/evaluation.hpp"
#include "trnet/model.hpp"
#include "trnet/sampling.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace trnet {

enum class Optimizer { sgd_momentum, adaptive_moments };
enum class SelectionMetric { mcc, acc };

struct TrainConfig {
    Index epochs = 200;
    Index folds = 10;
    double val_fraction = 0.10;
    Index batch_size = 8;                    // sequences
    double learning_rate = 1e-4;
    Optimizer optimizer = Optimizer::adaptive_moments;
    double momentum = 0.9;
    std::array<double, 2> class_weights = {0, 0};  // {0,0} -> inverse frequency
    SelectionMetric selection_metric = SelectionMetric::mcc;
    double grad_clip = 0;                    // 0 = off (global L2 norm)
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw config_error("train: epochs must be >= 1");
    if (cfg.folds < 2) throw config_error("train: folds must be >= 2");
    if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0))
        throw config_error("train: val_fraction must lie in (0,1)");
    if (cfg.batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (cfg.learning_rate < 0) throw config_error("train: learning_rate must be >= 0");
}

/// Spec-level loss entry point: weighted NLL averaged over valid positions.
template <class S>
double loss(const MatrixX<S>& predictions, const std::vector<std::uint8_t>& labels,
            const Mask& mask, const std::array<double, 2>& class_weights) {
    return sequence_nll(predictions, labels, mask, class_weights);
}

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

struct FoldSplit {
    std::vector<std::string> train, val, test;
};

struct FoldPlan {
    std::vector<FoldSplit> folds;
};

/// Centerline-level k-fold split. Test folds partition all ids (sizes differ
/// by at most one); validation is val_fraction of the remaining pool
/// (rounded to nearest, at least 1).
inline FoldPlan split_folds(std::vector<std::string> ids, Index folds, double val_fraction,
                            std::uint64_t seed) {
    if (static_cast<Index>(ids.size()) < folds)
        throw config_error("split_folds: fewer centerlines (" + std::to_string(ids.size()) +
                           ") than folds (" + std::to_string(folds) + ")");
    std::sort(ids.begin(), ids.end());  // shuffle from a canonical order
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);

    FoldPlan plan;
    plan.folds.resize(static_cast<std::size_t>(folds));
    const Index n = static_cast<Index>(ids.size());
    const Index base = n / folds, rem = n % folds;
    Index pos = 0;
    for (Index k = 0; k < folds; ++k) {
        const Index size = base + (k < rem ? 1 : 0);
        auto& split = plan.folds[static_cast<std::size_t>(k)];
        split.test.assign(ids.begin() + pos, ids.begin() + pos + size);
        std::vector<std::string> pool;
        pool.insert(pool.end(), ids.begin(), ids.begin() + pos);
        pool.insert(pool.end(), ids.begin() + pos + size, ids.end());
        const Index n_val = std::max<Index>(
            1, static_cast<Index>(std::llround(val_fraction * static_cast<double>(pool.size()))));
        split.val.assign(pool.begin(), pool.begin() + n_val);
        split.train.assign(pool.begin() + n_val, pool.end());
        pos += size;
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Dataset bundle
// ---------------------------------------------------------------------------

/// All sequences from one centerline: a clean stack for evaluation and an
/// augmented stack for training (identical when augmentation is off), plus
/// the full ground-truth label track for tolerance matching.
template <class S>
struct SourceSequences {
    std::string source_id;
    std::vector<VolumeSequence<S>> eval_seqs;
    std::vector<VolumeSequence<S>> train_seqs;
    std::vector<std::uint8_t> truth;
};

template <class S>
using SequenceDataset = std::vector<SourceSequences<S>>;

template <class S>
std::vector<std::string> source_ids(const SequenceDataset<S>& ds) {
    std::vector<std::string> ids;
    ids.reserve(ds.size());
    for (const auto& s : ds) ids.push_back(s.source_id);
    return ids;
}

// ---------------------------------------------------------------------------
// Optimizers (generic over the parameter tree)
// ---------------------------------------------------------------------------

template <class S>
struct OptimizerState {
    ModelParams<S> m, v;  // momentum / first moment, second moment
    std::int64_t step = 0;
};

template <class S>
void apply_update(ModelParams<S>& params, const ModelParams<S>& grads, OptimizerState<S>& state,
                  const TrainConfig& cfg) {
    ++state.step;
    std::vector<MatrixX<S>*> ps, ms, vs;
    std::vector<const MatrixX<S>*> gs;
    params.for_each([&](const std::string&, MatrixX<S>& x) { ps.push_back(&x); });
    grads.for_each([&](const std::string&, const MatrixX<S>& x) { gs.push_back(&x); });
    state.m.for_each([&](const std::string&, MatrixX<S>& x) { ms.push_back(&x); });
    state.v.for_each([&](const std::string&, MatrixX<S>& x) { vs.push_back(&x); });

    const S lr = static_cast<S>(cfg.learning_rate);
    if (cfg.optimizer == Optimizer::sgd_momentum) {
        const S mu = static_cast<S>(cfg.momentum);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            *ms[i] = mu * *ms[i] + *gs[i];
            *ps[i] -= lr * *ms[i];
        }
    } else {
        const S b1 = S(0.9), b2 = S(0.999), eps = S(1e-8);
        const S bc1 = S(1) - static_cast<S>(std::pow(0.9, static_cast<double>(state.step)));
        const S bc2 = S(1) - static_cast<S>(std::pow(0.999, static_cast<double>(state.step)));
        for (std::size_t i = 0; i < ps.size(); ++i) {
            *ms[i] = b1 * *ms[i] + (S(1) - b1) * *gs[i];
            *vs[i] = b2 * *vs[i] + (S(1) - b2) * gs[i]->cwiseProduct(*gs[i]);
            ps[i]->array() -=
                lr * (ms[i]->array() / bc1) / ((vs[i]->array() / bc2).sqrt() + eps);
        }
    }
}

template <class S>
void zero_grads(ModelParams<S>& grads) {
    grads.for_each([](const std::string&, MatrixX<S>& m) { m.setZero(); });
}

template <class S>
double grad_global_norm(const ModelParams<S>& grads) {
    double sq = 0;
    grads.for_each([&](const std::string&, const MatrixX<S>& m) {
        sq += static_cast<double>(m.template cast<double>().squaredNorm());
    });
    return std::sqrt(sq);
}

template <class S>
void scale_grads(ModelParams<S>& grads, double factor) {
    grads.for_each([&](const std::string&, MatrixX<S>& m) { m *= static_cast<S>(factor); });
}

// ---------------------------------------------------------------------------
// Fold training
// ---------------------------------------------------------------------------

struct EpochRecord {
    Index epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_acc = 0;
    double val_mcc = 0;
};

template <class S>
struct FoldTrainResult {
    ModelParams<S> best_params;
    Index best_epoch = 0;
    double best_metric = 0;
    std::vector<EpochRecord> log;
    std::array<double, 2> class_weights = {1, 1};
    double input_mean = 0, input_std = 1;  // standardization applied to cubes
};

template <class S>
void standardize_cubes(std::vector<VolumeSequence<S>>& seqs, double mean, double stddev) {
    const S m = static_cast<S>(mean), inv = static_cast<S>(1.0 / stddev);
    for (auto& seq : seqs)
        for (auto& cube : seq.cubes) cube.data = (cube.data.array() - m) * inv;
}

template <class S>
std::array<double, 2> inverse_frequency_weights(const std::vector<VolumeSequence<S>>& seqs) {
    double n_pos = 0, n_total = 0;
    for (const auto& seq : seqs)
        for (auto l : seq.labels) {
            n_pos += l ? 1 : 0;
            ++n_total;
        }
    const double n_neg = n_total - n_pos;
    std::array<double, 2> w = {1, 1};
    if (n_neg > 0) w[0] = n_total / (2.0 * n_neg);
    if (n_pos > 0) w[1] = n_total / (2.0 * n_pos);
    return w;
}

/// Plain per-point confusion of a prediction set against sequence labels.
template <class S>
ConfusionCounts point_confusion(const std::vector<VolumeSequence<S>>& seqs,
                                const ModelParams<S>& params, double* mean_loss = nullptr,
                                const std::array<double, 2>& weights = {1, 1}) {
    ConfusionCounts c;
    double loss_sum = 0;
    Index n = 0;
    for (const auto& seq : seqs) {
        MatrixX<S> probs = model_forward(seq.cubes, params);
        Index n_valid = 0;
        loss_sum += sequence_nll(probs, seq.labels, {}, weights, &n_valid) *
                    static_cast<double>(n_valid);
        n += n_valid;
        for (Index i = 0; i < probs.rows(); ++i) {
            const bool pred = probs(i, 1) > S(0.5);
            const bool truth = seq.labels[static_cast<std::size_t>(i)] != 0;
            if (pred && truth) ++c.tp;
            else if (pred && !truth) ++c.fp;
            else if (!pred && !truth) ++c.tn;
            else ++c.fn;
        }
    }
    if (mean_loss != nullptr) *mean_loss = n > 0 ? loss_sum / static_cast<double>(n) : 0;
    return c;
}

/// Trains for cfg.epochs epochs, evaluating the selection metric on the
/// validation split after every epoch; keeps the best checkpoint (ties go to
/// the earlier epoch).
template <class S>
FoldTrainResult<S> train_fold(std::vector<VolumeSequence<S>> train_seqs,
                              std::vector<VolumeSequence<S>> val_seqs, const ModelConfig& mcfg,
                              const TrainConfig& tcfg, std::uint64_t fold_seed,
                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    validate(tcfg);
    if (train_seqs.empty() || val_seqs.empty())
        throw config_error("train_fold: empty train or validation split");

    FoldTrainResult<S> result;
    // Standardize inputs with statistics of the training split only.
    {
        double sum = 0, sq = 0, n = 0;
        for (const auto& seq : train_seqs)
            for (const auto& cube : seq.cubes) {
                sum += static_cast<double>(cube.data.template cast<double>().sum());
                sq += static_cast<double>(cube.data.template cast<double>().squaredNorm());
                n += static_cast<double>(cube.data.size());
            }
        result.input_mean = sum / n;
        result.input_std = std::sqrt(std::max(sq / n - result.input_mean * result.input_mean,
                                              1e-12));
        standardize_cubes(train_seqs, result.input_mean, result.input_std);
        standardize_cubes(val_seqs, result.input_mean, result.input_std);
    }
    result.class_weights = (tcfg.class_weights[0] > 0 && tcfg.class_weights[1] > 0)
                               ? tcfg.class_weights
                               : inverse_frequency_weights(train_seqs);

    ModelParams<S> params = init_params<S>(mcfg, fold_seed);
    ModelParams<S> grads = zeros_like(params);
    OptimizerState<S> opt{zeros_like(params), zeros_like(params), 0};
    std::mt19937_64 shuffle_rng(derive_seed(fold_seed, 0xbeef));

    std::vector<std::size_t> order(train_seqs.size());
    std::iota(order.begin(), order.end(), 0);
    double best = -std::numeric_limits<double>::infinity();

    for (Index epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0;
        Index n_batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(tcfg.batch_size)) {
            std::vector<SequenceBatchItem<S>> batch;
            for (std::size_t i = b;
                 i < std::min(order.size(), b + static_cast<std::size_t>(tcfg.batch_size)); ++i)
                batch.push_back({&train_seqs[order[i]].cubes, &train_seqs[order[i]].labels, {}});
            zero_grads(grads);
            epoch_loss += model_gradients(batch, params, result.class_weights, grads);
            if (tcfg.grad_clip > 0) {
                const double norm = grad_global_norm(grads);
                if (norm > tcfg.grad_clip) scale_grads(grads, tcfg.grad_clip / norm);
            }
            apply_update(params, grads, opt, tcfg);
            ++n_batches;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(n_batches);
        ConfusionCounts vc = point_confusion(val_seqs, params, &rec.val_loss,
                                             result.class_weights);
        MetricsReport vm = compute_metrics(vc);
        rec.val_acc = vm.acc.value_or(0);
        rec.val_mcc = vm.mcc;
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);

        const double metric =
            tcfg.selection_metric == SelectionMetric::mcc ? rec.val_mcc : rec.val_acc;
        if (metric > best) {
            best = metric;
            result.best_params = params;
            result.best_epoch = epoch;
            result.best_metric = metric;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

template <class S>
struct FoldResult {
    Index fold = 0;
    bool ok = false;
    std::string error;
    FoldTrainResult<S> trained;
    std::vector<PredictionSequence> test_predictions;  // on clean sequences
};

template <class S>
struct CVResult {
    FoldPlan plan;
    std::vector<FoldResult<S>> folds;
};

template <class S>
std::vector<VolumeSequence<S>> gather(const SequenceDataset<S>& ds,
                                      const std::vector<std::string>& ids, bool augmented) {
    std::vector<VolumeSequence<S>> out;
    for (const auto& id : ids)
        for (const auto& src : ds)
            if (src.source_id == id) {
                const auto& seqs = augmented ? src.train_seqs : src.eval_seqs;
                out.insert(out.end(), seqs.begin(), seqs.end());
            }
    return out;
}

/// Trains every fold, selects on validation, predicts the fold's test split
/// with the selected checkpoint. Pooled predictions cover every centerline
/// exactly once. Fold failures are captured, not propagated.
template <class S>
CVResult<S> run_cross_validation(const SequenceDataset<S>& dataset, const ModelConfig& mcfg,
                                 const TrainConfig& tcfg, Index jobs = 1,
                                 std::function<void(const std::string&)> progress = {}) {
    validate(tcfg);
    validate(mcfg);
    CVResult<S> result;
    result.plan = split_folds(source_ids(dataset), tcfg.folds, tcfg.val_fraction, tcfg.seed);
    result.folds.resize(result.plan.folds.size());

    auto run_one = [&](std::size_t k) {
        FoldResult<S>& fr = result.folds[k];
        fr.fold = static_cast<Index>(k);
        const FoldSplit& split = result.plan.folds[k];
        try {
            auto train = gather(dataset, split.train, true);
            auto val = gather(dataset, split.val, false);
            std::function<void(const EpochRecord&)> on_epoch;
            if (progress)
                on_epoch = [&, k](const EpochRecord& r) {
                    progress("fold " + std::to_string(k + 1) + " epoch " +
                             std::to_string(r.epoch) + "/" + std::to_string(tcfg.epochs) +
                             " train_loss=" + std::to_string(r.train_loss) +
                             " val_loss=" + std::to_string(r.val_loss) +
                             " val_acc=" + std::to_string(r.val_acc) +
                             " val_mcc=" + std::to_string(r.val_mcc));
                };
            fr.trained = train_fold(std::move(train), std::move(val), mcfg, tcfg,
                                    derive_seed(tcfg.seed, k + 1), on_epoch);
            auto test = gather(dataset, split.test, false);
            standardize_cubes(test, fr.trained.input_mean, fr.trained.input_std);
            for (const auto& seq : test)
                fr.test_predictions.push_back(model_forward(seq, fr.trained.best_params));
            fr.ok = true;
            if (progress)
                progress("fold " + std::to_string(k + 1) + "/" +
                         std::to_string(result.plan.folds.size()) + " done (best epoch " +
                         std::to_string(fr.trained.best_epoch) + ")");
        } catch (const std::exception& e) {
            fr.ok = false;
            fr.error = e.what();
            if (progress) progress("fold " + std::to_string(k + 1) + " FAILED: " + fr.error);
        }
    };

    if (jobs <= 1) {
        for (std::size_t k = 0; k < result.folds.size(); ++k) run_one(k);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        const std::size_t n = result.folds.size();
        for (Index j = 0; j < std::min<Index>(jobs, static_cast<Index>(n)); ++j)
            pool.emplace_back([&] {
                for (std::size_t k = next.fetch_add(1); k < n; k = next.fetch_add(1)) run_one(k);
            });
        for (auto& t : pool) t.join();
    }
    return result;
}

}  // namespace trnet
