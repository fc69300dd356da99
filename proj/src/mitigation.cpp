#include "apod/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace apod::mitigation {

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

std::vector<int> gather(std::span<const int> v, std::span<const std::size_t> rows) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(v[r]);
    return out;
}

std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

void require_finite(double loss, const char* stage) {
    if (!std::isfinite(loss)) throw NumericError(std::string(stage) + ": loss diverged (non-finite)");
}

}  // namespace

FairClassifier FairClassifier::create(const ClassifierArch& arch, Rng& rng) {
    if (arch.input_dim <= 0 || arch.embedding_dim <= 0 || arch.hidden_dim <= 0) {
        throw ConfigError("classifier dimensions must be positive");
    }
    if (arch.head_layers < 1) throw ConfigError("task head needs at least one layer");
    FairClassifier c;
    const std::vector<int> body_dims{arch.input_dim, arch.embedding_dim};
    c.body = nn::DenseNet::mlp(body_dims, nn::Activation::relu, nn::Activation::relu, 0.0, rng);
    std::vector<int> head_dims{arch.embedding_dim};
    for (int k = 1; k < arch.head_layers; ++k) head_dims.push_back(arch.hidden_dim);
    head_dims.push_back(2);
    c.task_head = nn::DenseNet::mlp(head_dims, nn::Activation::relu, nn::Activation::identity,
                                    arch.dropout, rng);
    const std::vector<int> a_dims{arch.embedding_dim, 2};
    c.sensitive_head = nn::DenseNet::mlp(a_dims, nn::Activation::relu, nn::Activation::identity,
                                         arch.dropout, rng);
    return c;
}

std::vector<int> FairClassifier::predict(const Matrix& features) const {
    return nn::argmax_rows(task_logits(features));
}

std::vector<double> pretrain(FairClassifier& classifier, const Matrix& features,
                             std::span<const int> labels, const TrainConfig& config, Rng& rng) {
    if (classifier.frozen_body) throw StateError("pretrain called on a frozen body");
    if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
        throw ConfigError("pretrain: features and labels are not aligned");
    }
    if (config.batch_size <= 0) throw ConfigError("batch size must be positive");
    auto body_adam = nn::AdamState::for_net(classifier.body, {.lr = config.lr});
    auto head_adam = nn::AdamState::for_net(classifier.task_head, {.lr = config.lr});
    classifier.body.set_mode(nn::Mode::train);
    classifier.task_head.set_mode(nn::Mode::train);

    std::vector<double> history;
    const std::size_t n = labels.size();
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_order(n, rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const auto stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            const std::span<const std::size_t> rows(order.data() + start, stop - start);
            const Matrix x = gather_rows(features, rows);
            const auto y = gather(labels, rows);
            auto body_fwd = classifier.body.forward(x, &rng);
            auto head_fwd = classifier.task_head.forward(body_fwd.output, &rng);
            auto ce = nn::softmax_cross_entropy(head_fwd.output, y);
            require_finite(ce.loss, "pretrain");
            loss_sum += ce.loss * static_cast<double>(rows.size());
            auto head_grads = classifier.task_head.backward(head_fwd.cache, ce.grad);
            auto body_grads = classifier.body.backward(body_fwd.cache, head_grads.input);
            nn::adam_step(classifier.task_head, head_grads, head_adam);
            nn::adam_step(classifier.body, body_grads, body_adam);
        }
        history.push_back(n ? loss_sum / static_cast<double>(n) : 0.0);
    }
    classifier.frozen_body = true;
    return history;
}

std::vector<double> pretrain(FairClassifier& classifier, const data::TabularDataset& dataset,
                             const TrainConfig& config, Rng& rng) {
    const auto ids = dataset.ids(data::Split::train);
    return pretrain(classifier, dataset.rows(ids), dataset.labels_of(ids), config, rng);
}

CompositeLoss pod_objective(const nn::DenseNet& head, const TrainingPool& pool,
                            const AnnotatedSet& annotated, double lambda, Rng* rng) {
    CompositeLoss out;
    auto fwd = head.forward(pool.embeddings, rng);
    auto ce = nn::softmax_cross_entropy(fwd.output, pool.labels);
    out.ce = ce.loss;
    out.grads = head.backward(fwd.cache, ce.grad);
    if (lambda != 0.0 && annotated.size() > 0) {
        auto afwd = head.forward(annotated.embeddings, rng);
        auto reg = fairness::rate_gap_regularizer(afwd.output, annotated.labels, annotated.sensitive);
        out.reg = reg.value;
        out.term_active = reg.term_active;
        auto rgrads = head.backward(afwd.cache, reg.grad);
        rgrads *= lambda;
        out.grads += rgrads;
    }
    out.total = out.ce + lambda * out.reg;
    return out;
}

EpochLoss pod_epoch(nn::DenseNet& head, const TrainingPool& pool, const AnnotatedSet& annotated,
                    const PodConfig& config, nn::AdamState& adam, Rng& rng) {
    if (config.batch_size <= 0) throw ConfigError("batch size must be positive");
    if (config.lambda < 0.0) throw ConfigError("lambda must be non-negative");
    const std::size_t n = pool.labels.size();
    if (n == 0) throw ConfigError("pod_epoch: empty training pool");
    head.set_mode(nn::Mode::train);

    EpochLoss out;
    const auto order = shuffled_order(n, rng);
    double ce_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
        const auto stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
        const std::span<const std::size_t> rows(order.data() + start, stop - start);
        const Matrix x = gather_rows(pool.embeddings, rows);
        const auto y = gather(pool.labels, rows);
        auto fwd = head.forward(x, &rng);
        auto ce = nn::softmax_cross_entropy(fwd.output, y);
        require_finite(ce.loss, "pod_epoch");
        ce_sum += ce.loss * static_cast<double>(rows.size());
        auto grads = head.backward(fwd.cache, ce.grad);

        const bool last = stop == n;
        if (last && config.lambda != 0.0 && annotated.size() > 0) {
            auto afwd = head.forward(annotated.embeddings, &rng);
            auto reg = fairness::rate_gap_regularizer(afwd.output, annotated.labels, annotated.sensitive);
            out.reg_term = reg.value;
            out.term_active = reg.term_active;
            auto rgrads = head.backward(afwd.cache, reg.grad);
            rgrads *= config.lambda;
            grads += rgrads;
        }
        nn::adam_step(head, grads, adam);
    }
    out.ce_term = ce_sum / static_cast<double>(n);
    out.total = out.ce_term + config.lambda * out.reg_term;
    return out;
}

std::vector<EpochLoss> run_pod(FairClassifier& classifier, const TrainingPool& pool,
                               const AnnotatedSet& annotated, const PodConfig& config, Rng& rng) {
    if (!classifier.frozen_body) throw StateError("POD requires a frozen, pretrained body");
    auto adam = nn::AdamState::for_net(classifier.task_head, {.lr = config.lr});
    std::vector<EpochLoss> history;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        history.push_back(pod_epoch(classifier.task_head, pool, annotated, config, adam, rng));
        if (history.size() >= 2) {
            const double delta = history[history.size() - 2].total - history.back().total;
            if (std::abs(delta) < config.early_stop_tol) break;
        }
    }
    const auto& last = history.empty() ? EpochLoss{} : history.back();
    if (config.lambda != 0.0 && annotated.size() > 0 && !(last.term_active[0] && last.term_active[1])) {
        log_info("POD: a subgroup of the annotated set is empty; its rate-gap term was dropped");
    }
    return history;
}

std::vector<double> train_sensitive_head(FairClassifier& classifier, const AnnotatedSet& annotated,
                                         const TrainConfig& config, Rng& rng) {
    if (!classifier.frozen_body) throw StateError("sensitive head training requires a frozen body");
    const std::size_t n = annotated.size();
    if (n == 0) throw StateError("sensitive head training needs at least one annotation");
    const bool single_class = std::all_of(annotated.sensitive.begin(), annotated.sensitive.end(),
                                          [&](int a) { return a == annotated.sensitive.front(); });
    if (single_class && config.epochs > 0) {
        log_warning("annotated set holds a single sensitive group; proxy predictions will be constant");
    }
    auto& head = classifier.sensitive_head;
    head.set_mode(nn::Mode::train);
    auto adam = nn::AdamState::for_net(head, {.lr = config.lr});
    std::vector<double> history;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_order(n, rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const auto stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            const std::span<const std::size_t> rows(order.data() + start, stop - start);
            auto fwd = head.forward(gather_rows(annotated.embeddings, rows), &rng);
            auto ce = nn::softmax_cross_entropy(fwd.output, gather(annotated.sensitive, rows));
            require_finite(ce.loss, "train_sensitive_head");
            loss_sum += ce.loss * static_cast<double>(rows.size());
            nn::adam_step(head, head.backward(fwd.cache, ce.grad), adam);
        }
        history.push_back(loss_sum / static_cast<double>(n));
    }
    return history;
}

std::vector<int> proxy_sensitive(const FairClassifier& classifier, const Matrix& embeddings) {
    return nn::argmax_rows(classifier.sensitive_head.predict(embeddings));
}

HeadSelection head_selection(std::span<const HeadCheckpoint> checkpoints, const Matrix& val_embeddings,
                             std::span<const int> val_labels, std::span<const int> val_proxy_sensitive,
                             FairnessMetric metric) {
    if (checkpoints.empty()) throw StateError("head_selection: no checkpoints");
    HeadSelection out;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < checkpoints.size(); ++k) {
        const auto preds = nn::argmax_rows(checkpoints[k].task_head.predict(val_embeddings));
        const auto rep = fairness::report(preds, val_labels, val_proxy_sensitive);
        CheckpointScore s;
        s.iteration = checkpoints[k].iteration;
        s.accuracy = rep.accuracy;
        s.fairness = fairness::fairness_score(rep, metric);
        s.score = s.accuracy + s.fairness;
        if (s.score > best) {
            best = s.score;
            out.index = k;
        }
        out.scores.push_back(s);
    }
    return out;
}

}  // namespace apod::mitigation
