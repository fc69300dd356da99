#pragma once

// Group-conditional rates and the equalized-odds family of metrics. Binary
// labels and binary sensitive attribute throughout; a = 1 is privileged.
// Undefined quantities (empty subgroup, zero denominator) are std::nullopt.

#include "apod/common.hpp"
#include "apod/data.hpp"

#include <array>
#include <optional>
#include <span>

namespace apod::fairness {

using Rate = std::optional<double>;

template <typename T>
using PerGroupClass = std::array<std::array<T, 2>, 2>;

struct GroupRates {
    // counts[a][y][y_hat]
    std::array<PerGroupClass<std::int64_t>, 2> counts{};
    std::array<Rate, 2> tpr;
    std::array<Rate, 2> fpr;
    PerGroupClass<Rate> acc;          // acc[a][c] = P(y_hat = c | y = c, a)
    PerGroupClass<Rate> centralized;  // acc[a][c] - (acc[0][c] + acc[1][c]) / 2

    /// P(y_hat = c | y, a), nullopt for an empty (a, y) cell.
    Rate rate(int a, int y, int c) const;
    std::int64_t subgroup_size(int a, int y) const { return counts[a][y][0] + counts[a][y][1]; }
};

GroupRates compute_rates(std::span<const int> predictions, std::span<const int> labels,
                         std::span<const int> sensitive);

struct FairnessReport {
    Rate eop;  // TPR_0 / TPR_1
    Rate delta_tpr;
    Rate delta_fpr;
    Rate delta_eo_signed;  // delta_tpr + delta_fpr
    Rate delta_eo_abs;     // |delta_tpr| + |delta_fpr|
    double accuracy = 0.0;
    std::size_t n = 0;
};

FairnessReport report(std::span<const int> predictions, std::span<const int> labels,
                      std::span<const int> sensitive);

/// Fairness on a [0, 1] scale, higher is fairer: 1 - |dEO| for delta_eo,
/// min(EOP, 1/EOP) for eop. Undefined metrics score 0.
double fairness_score(const FairnessReport& r, FairnessMetric metric);

/// The headline number for a metric: |dEO| or EOP.
Rate headline(const FairnessReport& r, FairnessMetric metric);

/// relaxed[a][y] = mean over annotated (a, y) instances of the logit margin
/// f1 - f0: the linear relaxation of P(y_hat = 1 | y, a).
struct RelaxedRates {
    PerGroupClass<Rate> value;
    PerGroupClass<std::int64_t> counts{};
};

RelaxedRates relaxed_rates(const Matrix& logits, std::span<const int> labels,
                           std::span<const int> sensitive);
RelaxedRates relaxed_rates_from_margins(std::span<const double> margins, std::span<const int> labels,
                                        std::span<const int> sensitive);

/// sum_y (relaxed[0][y] - relaxed[1][y])^2 over classes where both groups
/// are non-empty, with its gradient w.r.t. the logits. Not scaled by lambda.
struct RegularizerResult {
    double value = 0.0;
    Matrix grad;
    std::array<bool, 2> term_active{false, false};
    RelaxedRates rates;
};

RegularizerResult rate_gap_regularizer(const Matrix& logits, std::span<const int> labels,
                                       std::span<const int> sensitive);

}  // namespace apod::fairness
