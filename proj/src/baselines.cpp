#include "apod/baselines.hpp"

#include "apod/fairness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace apod::baselines {

namespace {

std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

template <typename T>
std::vector<T> gather(std::span<const T> v, std::span<const std::size_t> rows) {
    std::vector<T> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(v[r]);
    return out;
}

}  // namespace

std::vector<double> train_vanilla(mitigation::FairClassifier& classifier, const data::TabularDataset& dataset,
                                  const mitigation::TrainConfig& config, Rng& rng) {
    auto history = mitigation::pretrain(classifier, dataset, config, rng);
    classifier.frozen_body = false;
    return history;
}

double ce_head_epoch(nn::DenseNet& head, const mitigation::TrainingPool& pool, int batch_size,
                     nn::AdamState& adam, Rng& rng) {
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    const std::size_t n = pool.labels.size();
    head.set_mode(nn::Mode::train);
    const auto order = shuffled_order(n, rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
        const auto stop = std::min(n, start + static_cast<std::size_t>(batch_size));
        const std::span<const std::size_t> rows(order.data() + start, stop - start);
        auto fwd = head.forward(gather_rows(pool.embeddings, rows), &rng);
        auto ce = nn::softmax_cross_entropy(fwd.output, gather<int>(pool.labels, rows));
        loss_sum += ce.loss * static_cast<double>(rows.size());
        nn::adam_step(head, head.backward(fwd.cache, ce.grad), adam);
    }
    return n ? loss_sum / static_cast<double>(n) : 0.0;
}

void dro_update_weights(DroState& state, const std::array<double, 2>& group_losses,
                        const std::array<bool, 2>& present) {
    for (int a = 0; a < 2; ++a) {
        if (present[a]) state.q[a] *= std::exp(state.eta_q * group_losses[a]);
    }
    const double total = state.q[0] + state.q[1];
    state.q[0] /= total;
    state.q[1] = 1.0 - state.q[0];
}

std::vector<double> train_group_dro(mitigation::FairClassifier& classifier, const mitigation::TrainingPool& pool,
                                    std::span<const int> sensitive, DroState& state,
                                    const mitigation::TrainConfig& config, Rng& rng) {
    const std::size_t n = pool.labels.size();
    if (sensitive.size() != n) throw ConfigError("group DRO: sensitive labels not aligned with pool");
    const auto n1 = static_cast<std::size_t>(std::count(sensitive.begin(), sensitive.end(), 1));
    if (n1 == 0 || n1 == n) throw ConfigError("group DRO: a sensitive group is empty");
    if (config.batch_size <= 0) throw ConfigError("batch size must be positive");

    auto& head = classifier.task_head;
    head.set_mode(nn::Mode::train);
    auto adam = nn::AdamState::for_net(head, {.lr = config.lr});
    std::vector<double> history;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_order(n, rng);
        double objective_sum = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const auto stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            const std::span<const std::size_t> rows(order.data() + start, stop - start);
            const auto y = gather<int>(pool.labels, rows);
            const auto a = gather<int>(sensitive, rows);
            auto fwd = head.forward(gather_rows(pool.embeddings, rows), &rng);
            const Vector ce = nn::per_instance_cross_entropy(fwd.output, y);

            std::array<double, 2> sum{0.0, 0.0};
            std::array<std::size_t, 2> count{0, 0};
            for (std::size_t i = 0; i < rows.size(); ++i) {
                sum[a[i]] += ce(static_cast<Eigen::Index>(i));
                ++count[a[i]];
            }
            const std::array<bool, 2> present{count[0] > 0, count[1] > 0};
            const std::array<double, 2> mean{present[0] ? sum[0] / static_cast<double>(count[0]) : 0.0,
                                             present[1] ? sum[1] / static_cast<double>(count[1]) : 0.0};
            dro_update_weights(state, mean, present);

            std::vector<double> w(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                w[i] = state.q[a[i]] / static_cast<double>(count[a[i]]);
            }
            auto loss = nn::weighted_cross_entropy(fwd.output, y, w);
            if (!std::isfinite(loss.loss)) throw NumericError("group DRO: loss diverged");
            objective_sum += loss.loss * static_cast<double>(rows.size());
            nn::adam_step(head, head.backward(fwd.cache, loss.grad), adam);
        }
        history.push_back(objective_sum / static_cast<double>(n));
    }
    return history;
}

double lff_weight(double biased_loss, double debiased_loss) {
    const double total = biased_loss + debiased_loss;
    if (total <= 0.0) return 0.5;
    return biased_loss / total;
}

std::vector<double> train_lff(LffState& state, const mitigation::TrainingPool& pool,
                              const mitigation::TrainConfig& config, Rng& rng) {
    if (config.batch_size <= 0) throw ConfigError("batch size must be positive");
    const std::size_t n = pool.labels.size();
    state.biased.set_mode(nn::Mode::train);
    state.debiased.set_mode(nn::Mode::train);
    auto adam_b = nn::AdamState::for_net(state.biased, {.lr = config.lr});
    auto adam_d = nn::AdamState::for_net(state.debiased, {.lr = config.lr});
    std::vector<double> history;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_order(n, rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const auto stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            const std::span<const std::size_t> rows(order.data() + start, stop - start);
            const Matrix x = gather_rows(pool.embeddings, rows);
            const auto y = gather<int>(pool.labels, rows);
            auto fwd_b = state.biased.forward(x, &rng);
            auto fwd_d = state.debiased.forward(x, &rng);

            const auto target = state.use_true_label ? y : nn::argmax_rows(fwd_b.output);
            const Vector lb = nn::per_instance_cross_entropy(fwd_b.output, target);
            const Vector ld = nn::per_instance_cross_entropy(fwd_d.output, target);
            std::vector<double> w(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const auto k = static_cast<Eigen::Index>(i);
                w[i] = lff_weight(lb(k), ld(k)) / static_cast<double>(rows.size());
            }

            auto gce = nn::generalized_cross_entropy(fwd_b.output, y, state.q_gce);
            auto wce = nn::weighted_cross_entropy(fwd_d.output, target, w);
            if (!std::isfinite(gce.loss) || !std::isfinite(wce.loss)) throw NumericError("LfF: loss diverged");
            loss_sum += wce.loss * static_cast<double>(rows.size());
            nn::adam_step(state.biased, state.biased.backward(fwd_b.cache, gce.grad), adam_b);
            nn::adam_step(state.debiased, state.debiased.backward(fwd_d.cache, wce.grad), adam_d);
        }
        history.push_back(loss_sum / static_cast<double>(n));
    }
    return history;
}

double fal_objective(double alpha, double accuracy, double fairness_before, double fairness_after) {
    return alpha * accuracy + (1.0 - alpha) * (fairness_after - fairness_before);
}

void fit_head_on_annotated(nn::DenseNet& head, const FalContext& ctx, std::span<const InstanceId> ids,
                           const mitigation::TrainConfig& config, Rng& rng) {
    if (ids.empty() || config.epochs <= 0) return;
    mitigation::TrainingPool pool;
    pool.embeddings.resize(static_cast<Eigen::Index>(ids.size()), ctx.embeddings->cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        pool.embeddings.row(static_cast<Eigen::Index>(i)) = ctx.embeddings->row(ids[i]);
        pool.labels.push_back(ctx.labels[static_cast<std::size_t>(ids[i])]);
    }
    auto adam = nn::AdamState::for_net(head, {.lr = config.lr});
    for (int e = 0; e < config.epochs; ++e) ce_head_epoch(head, pool, config.batch_size, adam, rng);
}

FalScore fal_select(const nn::DenseNet& head, const FalContext& ctx,
                    std::span<const InstanceId> unannotated, const FalConfig& config, Rng& rng) {
    if (unannotated.empty()) throw selection::SelectionError("FAL: unannotated pool is empty");
    if (config.alpha < 0.0 || config.alpha > 1.0) throw ConfigError("FAL alpha must be in [0, 1]");

    std::vector<InstanceId> candidates(unannotated.begin(), unannotated.end());
    const auto take = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(config.max_candidates));
    for (std::size_t k = 0; k < take; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, candidates.size() - 1);
        std::swap(candidates[k], candidates[pick(rng)]);
    }
    candidates.resize(take);
    std::sort(candidates.begin(), candidates.end());

    auto evaluate = [&](const nn::DenseNet& h) {
        const auto preds = nn::argmax_rows(h.predict(ctx.val_embeddings));
        return fairness::report(preds, ctx.val_labels, ctx.val_proxy_sensitive);
    };
    const double fair_before = fairness::fairness_score(evaluate(head), FairnessMetric::delta_eo);

    const mitigation::TrainConfig probe{config.probe_epochs, config.retrain.batch_size, config.retrain.lr};
    FalScore best;
    best.score = -std::numeric_limits<double>::infinity();
    for (auto id : candidates) {
        nn::DenseNet trial = head;
        std::vector<InstanceId> ids = ctx.annotated;
        ids.push_back(id);
        fit_head_on_annotated(trial, ctx, ids, probe, rng);
        const auto rep = evaluate(trial);
        const double fair_after = fairness::fairness_score(rep, FairnessMetric::delta_eo);
        const double score = fal_objective(config.alpha, rep.accuracy, fair_before, fair_after);
        if (score > best.score) best = {id, rep.accuracy, fair_after - fair_before, score};
    }
    return best;
}

std::vector<InstanceId> ssbm_annotate(data::SensitiveOracle& oracle, data::AnnotationLedger& ledger,
                                      std::span<const InstanceId> train_ids, Rng& rng) {
    std::vector<InstanceId> pool;
    for (auto id : train_ids) {
        if (!ledger.contains(id)) pool.push_back(id);
    }
    std::vector<InstanceId> chosen;
    const auto take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(ledger.remaining()));
    for (std::size_t k = 0; k < take; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
        std::swap(pool[k], pool[pick(rng)]);
        oracle.reveal(ledger, pool[k]);
        chosen.push_back(pool[k]);
    }
    return chosen;
}

}  // namespace apod::baselines
