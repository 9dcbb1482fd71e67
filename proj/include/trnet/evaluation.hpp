#pragma once

#include "trnet/common.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace trnet {

/// Positive class = significant stenosis.
struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

/// Undefined entries (zero denominators) stay unset instead of collapsing to
/// 0 or 1. MCC additionally exposes value 0 plus the flag.
struct MetricsReport {
    std::optional<double> acc, sens, spec, ppv, npv, f1;
    double mcc = 0;
    bool mcc_defined = false;
};

inline MetricsReport compute_metrics(const ConfusionCounts& c) {
    if (c.total() <= 0) throw std::domain_error("compute_metrics: all counts are zero");
    MetricsReport r;
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
    r.acc = (tp + tn) / static_cast<double>(c.total());
    if (c.tp + c.fn > 0) r.sens = tp / (tp + fn);
    if (c.tn + c.fp > 0) r.spec = tn / (tn + fp);
    if (c.tp + c.fp > 0) r.ppv = tp / (tp + fp);
    if (c.tn + c.fn > 0) r.npv = tn / (tn + fn);
    if (r.ppv && r.sens && (*r.ppv + *r.sens) > 0)
        r.f1 = 2.0 * (*r.ppv) * (*r.sens) / (*r.ppv + *r.sens);
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom > 0) {
        r.mcc = (tp * tn - fp * fn) / std::sqrt(denom);
        r.mcc_defined = true;
    }
    return r;
}

/// Boundary-tolerance confusion: a disagreement at a center is forgiven when
/// a matching ground-truth voxel lies strictly closer than `tolerance_voxels`
/// (the center voxel itself always counts). Forgiveness of predicted
/// negatives is symmetric by default and flag-gated.
inline ConfusionCounts tolerant_confusion(const std::vector<std::uint8_t>& predicted,
                                          const std::vector<Index>& centers,
                                          const std::vector<std::uint8_t>& truth,
                                          Index tolerance_voxels = 5,
                                          bool forgive_negatives = true) {
    if (tolerance_voxels < 0)
        throw config_error("tolerant_confusion: tolerance must be >= 0");
    if (predicted.size() != centers.size())
        throw runtime_failure("tolerant_confusion: predictions not aligned with centers");
    const Index n = static_cast<Index>(truth.size());
    const Index radius = std::max<Index>(tolerance_voxels, 1) - 1;  // |v - c| <= radius
    ConfusionCounts counts;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const Index c = centers[i];
        if (c < 0 || c >= n)
            throw runtime_failure("tolerant_confusion: center index outside the centerline");
        const auto nearby = [&](std::uint8_t wanted, Index r) {
            for (Index v = std::max<Index>(0, c - r); v <= std::min<Index>(n - 1, c + r); ++v)
                if (truth[static_cast<std::size_t>(v)] == wanted) return true;
            return false;
        };
        if (predicted[i]) {
            if (nearby(1, radius))
                ++counts.tp;
            else
                ++counts.fp;
        } else {
            if (nearby(0, forgive_negatives ? radius : 0))
                ++counts.tn;
            else
                ++counts.fn;
        }
    }
    return counts;
}

/// Micro-average: pool raw counts across folds, then compute metrics once.
inline MetricsReport aggregate_folds(const std::vector<ConfusionCounts>& folds) {
    if (folds.empty()) throw config_error("aggregate_folds: need at least one fold");
    ConfusionCounts pooled;
    for (const auto& f : folds) pooled += f;
    return compute_metrics(pooled);
}

inline ConfusionCounts pool_counts(const std::vector<ConfusionCounts>& folds) {
    ConfusionCounts pooled;
    for (const auto& f : folds) pooled += f;
    return pooled;
}

}  // namespace trnet
