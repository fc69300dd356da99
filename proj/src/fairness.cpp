#include "apod/fairness.hpp"

#include <algorithm>
#include <cmath>

namespace apod::fairness {

namespace {

void check_aligned(std::size_t a, std::size_t b, std::size_t c) {
    if (a != b || b != c) throw ConfigError("predictions, labels and sensitive must be aligned");
}

void check_binary(int v, const char* what) {
    if (v != 0 && v != 1) throw InputError(std::string(what) + " must be 0 or 1");
}

}  // namespace

Rate GroupRates::rate(int a, int y, int c) const {
    const auto total = subgroup_size(a, y);
    if (total == 0) return std::nullopt;
    return static_cast<double>(counts[a][y][c]) / static_cast<double>(total);
}

GroupRates compute_rates(std::span<const int> predictions, std::span<const int> labels,
                         std::span<const int> sensitive) {
    check_aligned(predictions.size(), labels.size(), sensitive.size());
    GroupRates r;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        check_binary(predictions[i], "prediction");
        check_binary(labels[i], "label");
        check_binary(sensitive[i], "sensitive attribute");
        ++r.counts[sensitive[i]][labels[i]][predictions[i]];
    }
    for (int a = 0; a < 2; ++a) {
        r.tpr[a] = r.rate(a, 1, 1);
        r.fpr[a] = r.rate(a, 0, 1);
        for (int c = 0; c < 2; ++c) r.acc[a][c] = r.rate(a, c, c);
    }
    for (int c = 0; c < 2; ++c) {
        if (!r.acc[0][c] || !r.acc[1][c]) continue;
        const double mid = (*r.acc[0][c] + *r.acc[1][c]) / 2.0;
        for (int a = 0; a < 2; ++a) r.centralized[a][c] = *r.acc[a][c] - mid;
    }
    return r;
}

FairnessReport report(std::span<const int> predictions, std::span<const int> labels,
                      std::span<const int> sensitive) {
    const GroupRates g = compute_rates(predictions, labels, sensitive);
    FairnessReport out;
    out.n = labels.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
    out.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());

    if (g.tpr[0] && g.tpr[1]) {
        out.delta_tpr = *g.tpr[0] - *g.tpr[1];
        if (*g.tpr[1] > 0.0) out.eop = *g.tpr[0] / *g.tpr[1];
    }
    if (g.fpr[0] && g.fpr[1]) out.delta_fpr = *g.fpr[0] - *g.fpr[1];
    if (out.delta_tpr && out.delta_fpr) {
        out.delta_eo_signed = *out.delta_tpr + *out.delta_fpr;
        out.delta_eo_abs = std::abs(*out.delta_tpr) + std::abs(*out.delta_fpr);
    }
    return out;
}

double fairness_score(const FairnessReport& r, FairnessMetric metric) {
    if (metric == FairnessMetric::eop) {
        if (!r.eop) return 0.0;
        const double e = *r.eop;
        if (e <= 0.0) return 0.0;
        return std::min(e, 1.0 / e);
    }
    if (!r.delta_eo_abs) return 0.0;
    return std::max(0.0, 1.0 - *r.delta_eo_abs);
}

Rate headline(const FairnessReport& r, FairnessMetric metric) {
    return metric == FairnessMetric::eop ? r.eop : r.delta_eo_abs;
}

RelaxedRates relaxed_rates_from_margins(std::span<const double> margins, std::span<const int> labels,
                                        std::span<const int> sensitive) {
    check_aligned(margins.size(), labels.size(), sensitive.size());
    RelaxedRates out;
    PerGroupClass<double> sums{};
    for (std::size_t i = 0; i < margins.size(); ++i) {
        check_binary(labels[i], "label");
        check_binary(sensitive[i], "sensitive attribute");
        sums[sensitive[i]][labels[i]] += margins[i];
        ++out.counts[sensitive[i]][labels[i]];
    }
    for (int a = 0; a < 2; ++a) {
        for (int y = 0; y < 2; ++y) {
            if (out.counts[a][y] > 0) out.value[a][y] = sums[a][y] / static_cast<double>(out.counts[a][y]);
        }
    }
    return out;
}

RelaxedRates relaxed_rates(const Matrix& logits, std::span<const int> labels,
                           std::span<const int> sensitive) {
    if (logits.cols() != 2) throw ConfigError("relaxed rates need two-class logits");
    std::vector<double> margins(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        margins[static_cast<std::size_t>(i)] = logits(i, 1) - logits(i, 0);
    }
    return relaxed_rates_from_margins(margins, labels, sensitive);
}

RegularizerResult rate_gap_regularizer(const Matrix& logits, std::span<const int> labels,
                                       std::span<const int> sensitive) {
    RegularizerResult out;
    out.rates = relaxed_rates(logits, labels, sensitive);
    out.grad = Matrix::Zero(logits.rows(), logits.cols());
    PerGroupClass<double> coef{};  // d value / d margin_i for i in (a, y)
    for (int y = 0; y < 2; ++y) {
        const auto& p0 = out.rates.value[0][y];
        const auto& p1 = out.rates.value[1][y];
        if (!p0 || !p1) continue;
        out.term_active[y] = true;
        const double gap = *p0 - *p1;
        out.value += gap * gap;
        coef[0][y] = 2.0 * gap / static_cast<double>(out.rates.counts[0][y]);
        coef[1][y] = -2.0 * gap / static_cast<double>(out.rates.counts[1][y]);
    }
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double c = coef[sensitive[k]][labels[k]];
        out.grad(i, 1) = c;
        out.grad(i, 0) = -c;
    }
    return out;
}

}  // namespace apod::fairness
