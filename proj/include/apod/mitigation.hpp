#pragma once

// Fairness-regularized training of the task head on a frozen body, plus the
// sensitive-attribute proxy head and checkpoint selection.

#include "apod/common.hpp"
#include "apod/data.hpp"
#include "apod/fairness.hpp"
#include "apod/nn.hpp"

#include <span>
#include <vector>

namespace apod::mitigation {

struct ClassifierArch {
    int input_dim = 0;
    int embedding_dim = 64;
    int hidden_dim = 32;
    int head_layers = 2;  // linear layers in the task head
    double dropout = 0.5;
};

/// Body f_b (perceptron, ReLU embedding), task head f_h (MLP, two logits) and
/// sensitive head f_a (perceptron, two logits).
struct FairClassifier {
    nn::DenseNet body;
    nn::DenseNet task_head;
    nn::DenseNet sensitive_head;
    bool frozen_body = false;

    static FairClassifier create(const ClassifierArch& arch, Rng& rng);

    int embedding_dim() const { return body.output_dim(); }
    Matrix embed(const Matrix& features) const { return body.predict(features); }
    Matrix task_logits(const Matrix& features) const { return task_head.predict(embed(features)); }
    std::vector<int> predict(const Matrix& features) const;
};

struct TrainConfig {
    int epochs = 10;
    int batch_size = 256;
    double lr = 1e-3;
};

struct PodConfig {
    double lambda = 1.0;
    int epochs = 10;
    int batch_size = 256;
    double lr = 1e-3;
    double early_stop_tol = 1e-6;
};

/// Joint cross-entropy training of body and task head, then freezes the body.
/// Returns the mean loss of each epoch.
std::vector<double> pretrain(FairClassifier& classifier, const Matrix& features,
                             std::span<const int> labels, const TrainConfig& config, Rng& rng);
std::vector<double> pretrain(FairClassifier& classifier, const data::TabularDataset& dataset,
                             const TrainConfig& config, Rng& rng);

/// Every train instance, embedded by the frozen body.
struct TrainingPool {
    Matrix embeddings;
    std::vector<int> labels;
};

/// Annotated instances with their revealed sensitive attribute.
struct AnnotatedSet {
    Matrix embeddings;
    std::vector<int> labels;
    std::vector<int> sensitive;

    std::size_t size() const { return labels.size(); }
};

struct EpochLoss {
    double ce_term = 0.0;
    double reg_term = 0.0;
    double total = 0.0;
    std::array<bool, 2> term_active{false, false};
};

/// Full-batch value and head gradient of
///   mean CE over the pool + lambda * sum_y (p0(y,1) - p1(y,1))^2
/// with the relaxed rates taken over the annotated set.
struct CompositeLoss {
    double ce = 0.0;
    double reg = 0.0;
    double total = 0.0;
    std::array<bool, 2> term_active{false, false};
    nn::Gradients grads;
};

CompositeLoss pod_objective(const nn::DenseNet& head, const TrainingPool& pool,
                            const AnnotatedSet& annotated, double lambda, Rng* rng = nullptr);

/// One epoch over the pool in shuffled mini-batches. The regularizer is
/// evaluated on the whole annotated set and its gradient joins the last
/// mini-batch of the epoch. lambda == 0 skips it entirely.
EpochLoss pod_epoch(nn::DenseNet& head, const TrainingPool& pool, const AnnotatedSet& annotated,
                    const PodConfig& config, nn::AdamState& adam, Rng& rng);

/// Up to config.epochs POD epochs with a fresh optimizer; stops early once
/// the epoch loss changes by less than early_stop_tol.
std::vector<EpochLoss> run_pod(FairClassifier& classifier, const TrainingPool& pool,
                               const AnnotatedSet& annotated, const PodConfig& config, Rng& rng);

/// Cross-entropy of f_a on the annotated set. Returns per-epoch mean loss.
std::vector<double> train_sensitive_head(FairClassifier& classifier, const AnnotatedSet& annotated,
                                         const TrainConfig& config, Rng& rng);

std::vector<int> proxy_sensitive(const FairClassifier& classifier, const Matrix& embeddings);

struct HeadCheckpoint {
    int iteration = 0;
    nn::DenseNet task_head;
};

struct CheckpointScore {
    int iteration = 0;
    double accuracy = 0.0;
    double fairness = 0.0;
    double score = 0.0;
};

struct HeadSelection {
    std::size_t index = 0;
    std::vector<CheckpointScore> scores;
};

/// argmax of accuracy + fairness score on validation, fairness measured with
/// proxy sensitive labels. Ties go to the earliest checkpoint.
HeadSelection head_selection(std::span<const HeadCheckpoint> checkpoints, const Matrix& val_embeddings,
                             std::span<const int> val_labels, std::span<const int> val_proxy_sensitive,
                             FairnessMetric metric);

}  // namespace apod::mitigation
