#include "apod/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace apod::selection {

namespace {

constexpr std::array<std::pair<int, int>, 4> kSubgroupOrder{{{0, 0}, {0, 1}, {1, 0}, {1, 1}}};

int proxy_of(const SelectionState& state, InstanceId id) {
    const int p = state.proxy.at(static_cast<std::size_t>(id));
    if (p < 0) throw StateError("no proxy sensitive label for instance " + std::to_string(id));
    return p;
}

}  // namespace

SelectionState SelectionState::from_ledger(std::span<const InstanceId> train_ids,
                                           const data::AnnotationLedger& ledger, std::size_t dataset_size) {
    SelectionState s;
    s.annotated = ledger.all_ids();
    for (auto id : train_ids) {
        if (!ledger.contains(id)) s.unannotated.push_back(id);
    }
    std::sort(s.unannotated.begin(), s.unannotated.end());
    s.proxy.assign(dataset_size, -1);
    return s;
}

void SelectionState::refresh_proxy(std::span<const InstanceId> ids, std::span<const int> values,
                                   std::uint64_t version) {
    if (ids.size() != values.size()) throw ConfigError("refresh_proxy: ids and values not aligned");
    std::fill(proxy.begin(), proxy.end(), -1);
    for (std::size_t k = 0; k < ids.size(); ++k) proxy.at(static_cast<std::size_t>(ids[k])) = values[k];
    proxy_version = version;
}

void SelectionState::annotate(InstanceId id) {
    auto it = std::lower_bound(unannotated.begin(), unannotated.end(), id);
    if (it == unannotated.end() || *it != id) {
        throw StateError("instance " + std::to_string(id) + " is not in the unannotated pool");
    }
    unannotated.erase(it);
    annotated.push_back(id);
}

std::vector<GroupChoice> rank_groups(const fairness::PerGroupClass<fairness::Rate>& accuracy) {
    std::vector<GroupChoice> ranked;
    for (auto [a, c] : kSubgroupOrder) {
        const auto& mine = accuracy[a][c];
        if (!mine) continue;
        const auto& other = accuracy[1 - a][c];
        const double center = other ? (*mine + *other) / 2.0 : *mine;
        ranked.push_back({a, c, *mine - center});
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const GroupChoice& l, const GroupChoice& r) { return l.centralized < r.centralized; });
    return ranked;
}

fairness::PerGroupClass<fairness::Rate> proxy_subgroup_accuracy(const SelectionState& state,
                                                                std::span<const int> predictions,
                                                                std::span<const int> labels) {
    fairness::PerGroupClass<std::int64_t> total{}, correct{};
    for (auto id : state.unannotated) {
        const auto k = static_cast<std::size_t>(id);
        const int a = proxy_of(state, id);
        const int c = labels[k];
        ++total[a][c];
        correct[a][c] += predictions[k] == c;
    }
    fairness::PerGroupClass<fairness::Rate> acc;
    for (int a = 0; a < 2; ++a) {
        for (int c = 0; c < 2; ++c) {
            if (total[a][c] > 0) acc[a][c] = static_cast<double>(correct[a][c]) / static_cast<double>(total[a][c]);
        }
    }
    return acc;
}

GroupChoice group_select(const SelectionState& state, std::span<const int> predictions,
                         std::span<const int> labels) {
    const auto ranked = rank_groups(proxy_subgroup_accuracy(state, predictions, labels));
    if (ranked.empty()) throw SelectionError("group selection: every proxy subgroup is empty");
    return ranked.front();
}

std::vector<InstanceId> subgroup_members(const SelectionState& state, std::span<const int> labels,
                                         int a, int c) {
    std::vector<InstanceId> out;
    for (auto id : state.unannotated) {
        if (proxy_of(state, id) == a && labels[static_cast<std::size_t>(id)] == c) out.push_back(id);
    }
    return out;
}

double euclidean(const Matrix& embeddings, InstanceId i, InstanceId j) {
    return (embeddings.row(i) - embeddings.row(j)).norm();
}

MaxMin max_min_select(std::span<const InstanceId> candidates, std::span<const InstanceId> annotated,
                      const Matrix& embeddings) {
    if (candidates.empty()) throw SelectionError("max-min selection: no candidates");
    if (annotated.empty()) throw SelectionError("max-min selection: annotated set is empty");
    MaxMin best{-1, -1.0};
    for (auto i : candidates) {
        double nearest = std::numeric_limits<double>::infinity();
        for (auto j : annotated) nearest = std::min(nearest, euclidean(embeddings, i, j));
        if (nearest > best.distance || (nearest == best.distance && i < best.id)) best = {i, nearest};
    }
    return best;
}

double coverage_radius(std::span<const InstanceId> pool, std::span<const InstanceId> annotated,
                       const Matrix& embeddings) {
    if (annotated.empty()) throw SelectionError("coverage: annotated set is empty");
    double radius = 0.0;
    for (auto i : pool) {
        double nearest = std::numeric_limits<double>::infinity();
        for (auto j : annotated) nearest = std::min(nearest, euclidean(embeddings, i, j));
        radius = std::max(radius, nearest);
    }
    return radius;
}

CoverageStats coverage(std::span<const InstanceId> pool, std::span<const int> pool_groups,
                       std::span<const InstanceId> annotated, const Matrix& embeddings) {
    if (pool.size() != pool_groups.size()) throw ConfigError("coverage: pool and groups not aligned");
    if (annotated.empty()) throw SelectionError("coverage: annotated set is empty");
    CoverageStats out;
    for (std::size_t k = 0; k < pool.size(); ++k) {
        double nearest = std::numeric_limits<double>::infinity();
        for (auto j : annotated) nearest = std::min(nearest, euclidean(embeddings, pool[k], j));
        out.delta_all = std::max(out.delta_all, nearest);
        auto& g = out.delta_group.at(static_cast<std::size_t>(pool_groups[k]));
        g = std::max(g, nearest);
    }
    return out;
}

Choice individual_select(const SelectionState& state, std::span<const int> labels, GroupChoice group,
                         const Matrix& embeddings) {
    const auto members = subgroup_members(state, labels, group.a, group.c);
    const auto best = max_min_select(members, state.annotated, embeddings);
    return {best.id, group, best.distance, false};
}

Choice ais_select(const SelectionState& state, std::span<const int> predictions,
                  std::span<const int> labels, const Matrix& embeddings) {
    const auto ranked = rank_groups(proxy_subgroup_accuracy(state, predictions, labels));
    if (ranked.empty()) throw SelectionError("AIS: every proxy subgroup is empty");
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        const auto members = subgroup_members(state, labels, ranked[k].a, ranked[k].c);
        if (members.empty()) continue;
        if (k > 0) {
            log_warning("AIS: worst subgroup empty, fell back to rank " + std::to_string(k));
        }
        const auto best = max_min_select(members, state.annotated, embeddings);
        return {best.id, ranked[k], best.distance, k > 0};
    }
    throw SelectionError("AIS: no selectable subgroup");
}

Choice select_random(const SelectionState& state, Rng& rng) {
    if (state.unannotated.empty()) throw SelectionError("random selection: unannotated pool is empty");
    std::uniform_int_distribution<std::size_t> pick(0, state.unannotated.size() - 1);
    return {state.unannotated[pick(rng)], std::nullopt, 0.0, false};
}

double binary_entropy(double p1) {
    auto term = [](double p) { return p > 0.0 ? -p * std::log2(p) : 0.0; };
    return term(p1) + term(1.0 - p1);
}

Choice select_uncertainty(const SelectionState& state, const Matrix& logits) {
    if (state.unannotated.empty()) throw SelectionError("uncertainty selection: unannotated pool is empty");
    Choice best{-1, std::nullopt, -1.0, false};
    for (auto id : state.unannotated) {
        const double z0 = logits(id, 0), z1 = logits(id, 1);
        // softmax p1 = 1 / (1 + exp(z0 - z1))
        const double p1 = 1.0 / (1.0 + std::exp(z0 - z1));
        const double h = binary_entropy(p1);
        if (h > best.distance) best = {id, std::nullopt, h, false};
    }
    return best;
}

Choice select_coreset(const SelectionState& state, const Matrix& embeddings) {
    const auto best = max_min_select(state.unannotated, state.annotated, embeddings);
    return {best.id, std::nullopt, best.distance, false};
}

Choice select_group_only(const SelectionState& state, std::span<const int> predictions,
                         std::span<const int> labels, Rng& rng) {
    const auto ranked = rank_groups(proxy_subgroup_accuracy(state, predictions, labels));
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        const auto members = subgroup_members(state, labels, ranked[k].a, ranked[k].c);
        if (members.empty()) continue;
        std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
        return {members[pick(rng)], ranked[k], 0.0, k > 0};
    }
    throw SelectionError("group-only selection: every proxy subgroup is empty");
}

Choice select_individual_only(const SelectionState& state, const Matrix& embeddings) {
    return select_coreset(state, embeddings);
}

}  // namespace apod::selection
