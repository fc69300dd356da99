#pragma once

// Comparison trainers. All of them work on the frozen pretrained body and
// train task heads on its embeddings, like POD does.

#include "apod/common.hpp"
#include "apod/data.hpp"
#include "apod/mitigation.hpp"
#include "apod/nn.hpp"
#include "apod/selection.hpp"

#include <array>
#include <span>
#include <vector>

namespace apod::baselines {

/// Joint body + head cross-entropy training; the body stays trainable.
std::vector<double> train_vanilla(mitigation::FairClassifier& classifier, const data::TabularDataset& dataset,
                                  const mitigation::TrainConfig& config, Rng& rng);

/// One plain cross-entropy epoch of a head over the pool in shuffled
/// mini-batches. Returns the mean loss.
double ce_head_epoch(nn::DenseNet& head, const mitigation::TrainingPool& pool, int batch_size,
                     nn::AdamState& adam, Rng& rng);

// ---------------------------------------------------------------- Group DRO

struct DroState {
    std::array<double, 2> q{0.5, 0.5};
    double eta_q = 0.01;
};

/// Exponentiated-gradient ascent on the group weights followed by
/// renormalization. Groups flagged absent keep their weight unscaled.
void dro_update_weights(DroState& state, const std::array<double, 2>& group_losses,
                        const std::array<bool, 2>& present = {true, true});

/// Trains the task head on the q-weighted per-group mean losses. `sensitive`
/// is aligned with pool rows (full annotation of the pool).
std::vector<double> train_group_dro(mitigation::FairClassifier& classifier, const mitigation::TrainingPool& pool,
                                    std::span<const int> sensitive, DroState& state,
                                    const mitigation::TrainConfig& config, Rng& rng);

// ---------------------------------------------------------------------- LfF

struct LffState {
    nn::DenseNet biased;
    nn::DenseNet debiased;
    double q_gce = 2.5;
    bool use_true_label = false;  // false: pseudo-label from the biased model
};

/// l_b / (l_b + l_d), 0.5 when both are zero.
double lff_weight(double biased_loss, double debiased_loss);

/// Simultaneous per-batch updates: the biased head on GCE, the debiased head
/// on cross-entropy re-weighted by lff_weight. Returns per-epoch debiased loss.
std::vector<double> train_lff(LffState& state, const mitigation::TrainingPool& pool,
                              const mitigation::TrainConfig& config, Rng& rng);

// ---------------------------------------------------------------------- FAL

struct FalConfig {
    double alpha = 0.5;
    int max_candidates = 50;
    int probe_epochs = 1;
    mitigation::TrainConfig retrain{};
};

/// What FAL needs to score candidates: the annotated training set and a
/// validation split with proxy sensitive labels.
struct FalContext {
    const Matrix* embeddings = nullptr;  // one row per dataset instance
    std::span<const int> labels;         // per dataset instance
    std::vector<InstanceId> annotated;
    Matrix val_embeddings;
    std::vector<int> val_labels;
    std::vector<int> val_proxy_sensitive;
};

struct FalScore {
    InstanceId id = -1;
    double accuracy = 0.0;
    double fairness_gain = 0.0;
    double score = 0.0;
};

/// Candidate objective alpha * acc + (1 - alpha) * (F_after - F_before).
double fal_objective(double alpha, double accuracy, double fairness_before, double fairness_after);

/// Head trained by cross-entropy on the annotated instances only.
void fit_head_on_annotated(nn::DenseNet& head, const FalContext& ctx, std::span<const InstanceId> ids,
                           const mitigation::TrainConfig& config, Rng& rng);

/// Scores up to max_candidates random unannotated instances by probing a
/// short fine-tune with each one added, returns the best (ties: smallest id).
FalScore fal_select(const nn::DenseNet& head, const FalContext& ctx,
                    std::span<const InstanceId> unannotated, const FalConfig& config, Rng& rng);

// --------------------------------------------------------------------- SSBM

/// Spends the whole remaining budget at once, uniformly at random over the
/// unannotated train pool. Returns the ids in reveal order.
std::vector<InstanceId> ssbm_annotate(data::SensitiveOracle& oracle, data::AnnotationLedger& ledger,
                                      std::span<const InstanceId> train_ids, Rng& rng);

}  // namespace apod::baselines
