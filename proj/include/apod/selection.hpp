#pragma once

// Which unannotated instance to send for sensitive-attribute annotation next.
//
// Every function takes an embedding matrix with one row per dataset instance
// (row index == InstanceId) and, where needed, per-instance label /
// prediction vectors indexed the same way. Ties are broken by the smallest
// instance id and, for subgroups, by the order (0,0), (0,1), (1,0), (1,1).

#include "apod/common.hpp"
#include "apod/data.hpp"
#include "apod/fairness.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace apod::selection {

struct SelectionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GroupChoice {
    int a = 0;
    int c = 0;
    double centralized = 0.0;
};

struct Choice {
    InstanceId id = -1;
    std::optional<GroupChoice> group;
    double distance = 0.0;  // max-min distance where applicable
    bool fallback = false;  // worst subgroup was empty, a later one was used
};

/// The annotated / unannotated partition of the train pool plus the proxy
/// sensitive labels predicted for the unannotated part.
struct SelectionState {
    std::vector<InstanceId> annotated;
    std::vector<InstanceId> unannotated;  // ascending
    std::vector<int> proxy;               // indexed by InstanceId, -1 = none
    std::uint64_t proxy_version = 0;
    std::optional<Choice> last_choice;

    static SelectionState from_ledger(std::span<const InstanceId> train_ids,
                                      const data::AnnotationLedger& ledger, std::size_t dataset_size);

    void refresh_proxy(std::span<const InstanceId> ids, std::span<const int> values, std::uint64_t version);
    void annotate(InstanceId id);
};

/// Centralized accuracy p*_a(c,c) = p_a(c,c) - mean over groups of p_.(c,c),
/// ranked ascending. Subgroups without a defined accuracy are left out; when
/// only one group of a class is defined it is centred on itself.
std::vector<GroupChoice> rank_groups(const fairness::PerGroupClass<fairness::Rate>& accuracy);

/// Accuracy of `predictions` on each proxy subgroup U_a^c of the unannotated
/// pool.
fairness::PerGroupClass<fairness::Rate> proxy_subgroup_accuracy(const SelectionState& state,
                                                                std::span<const int> predictions,
                                                                std::span<const int> labels);

/// Subgroup with the worst centralized accuracy on the unannotated pool.
/// Throws SelectionError if every subgroup is empty.
GroupChoice group_select(const SelectionState& state, std::span<const int> predictions,
                         std::span<const int> labels);

/// Unannotated members of U_a^c under the proxy labels, ascending.
std::vector<InstanceId> subgroup_members(const SelectionState& state, std::span<const int> labels,
                                         int a, int c);

double euclidean(const Matrix& embeddings, InstanceId i, InstanceId j);

struct MaxMin {
    InstanceId id = -1;
    double distance = 0.0;
};

/// argmax over candidates of the distance to the nearest annotated instance.
MaxMin max_min_select(std::span<const InstanceId> candidates, std::span<const InstanceId> annotated,
                      const Matrix& embeddings);

/// max over pool of min distance to the annotated set.
double coverage_radius(std::span<const InstanceId> pool, std::span<const InstanceId> annotated,
                       const Matrix& embeddings);

struct CoverageStats {
    double delta_all = 0.0;
    std::array<double, 2> delta_group{0.0, 0.0};
};

/// Coverage over the whole pool and over each sensitive group of it.
/// `pool_groups` is aligned with `pool`.
CoverageStats coverage(std::span<const InstanceId> pool, std::span<const int> pool_groups,
                       std::span<const InstanceId> annotated, const Matrix& embeddings);

/// Group selection then max-min individual selection within the chosen
/// subgroup, falling back to the next-worst non-empty subgroup.
Choice ais_select(const SelectionState& state, std::span<const int> predictions,
                  std::span<const int> labels, const Matrix& embeddings);

/// Individual selection restricted to U_a^c.
Choice individual_select(const SelectionState& state, std::span<const int> labels, GroupChoice group,
                         const Matrix& embeddings);

Choice select_random(const SelectionState& state, Rng& rng);

/// -p1 log2 p1 - p0 log2 p0 with 0 log 0 = 0.
double binary_entropy(double p1);

/// Highest predictive entropy; `logits` has one row per dataset instance.
Choice select_uncertainty(const SelectionState& state, const Matrix& logits);

/// Max-min over the whole unannotated pool.
Choice select_coreset(const SelectionState& state, const Matrix& embeddings);

/// Uniform draw inside the worst subgroup (group selection alone).
Choice select_group_only(const SelectionState& state, std::span<const int> predictions,
                         std::span<const int> labels, Rng& rng);

/// Max-min over the whole pool (individual selection alone).
Choice select_individual_only(const SelectionState& state, const Matrix& embeddings);

}  // namespace apod::selection
