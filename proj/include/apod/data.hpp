#pragma once

#include "apod/common.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace apod {

enum class FairnessMetric { delta_eo, eop };

FairnessMetric parse_metric(const std::string& s);
const char* metric_name(FairnessMetric m);

}  // namespace apod

namespace apod::data {

enum class Split : std::uint8_t { train, val, test };

const char* split_name(Split s);

struct SplitFractions {
    double train = 0.25;
    double val = 0.25;
    double test = 0.5;
};

enum class ColumnKind { numeric, categorical };

/// Decides the privileged group (a = 1) from the raw sensitive cell.
struct SensitiveRule {
    enum class Kind { equals, greater, greater_equal, less, less_equal };
    Kind kind = Kind::equals;
    std::string value;
    double threshold = 0.0;

    static SensitiveRule parse(const std::string& text);
    int apply(const std::string& cell) const;
};

/// Plain-text key = value descriptor of one tabular benchmark.
///
///   name = adult
///   target = income
///   positive = >50K
///   sensitive = sex
///   sensitive_rule = equals Male        (or: greater 35, ...)
///   missing = ?
///   numeric = age, fnlwgt, ...
///   categorical = workclass, education, ...
///
/// Optional experiment defaults: budget_ratio, metric (delta_eo|eop),
/// embedding_dim, hidden_dim, head_layers.
struct DatasetSchema {
    std::string name;
    std::string target;
    std::string positive_value;
    std::string sensitive;
    SensitiveRule rule;
    std::string missing_token;
    std::vector<std::pair<std::string, ColumnKind>> columns;

    double budget_ratio = 0.004;
    FairnessMetric metric = FairnessMetric::delta_eo;
    int embedding_dim = 64;
    int hidden_dim = 32;
    int head_layers = 2;

    static DatasetSchema parse(std::istream& in);
    static DatasetSchema load(const std::filesystem::path& path);
};

/// Per-column z-score parameters fitted on the train split.
struct Standardizer {
    std::vector<std::string> columns;
    std::vector<double> mean;
    std::vector<double> stddev;
};

struct LoadStats {
    std::size_t rows_read = 0;
    std::size_t rows_rejected_missing = 0;
    std::size_t unknown_categories = 0;
};

class SensitiveOracle;

/// Features, labels and split tags are public. The sensitive attribute is
/// only reachable through SensitiveOracle.
class TabularDataset {
public:
    TabularDataset() = default;
    TabularDataset(std::string name, Matrix features, std::vector<int> labels,
                   std::vector<int> sensitive, std::vector<Split> splits);

    const std::string& name() const { return name_; }
    std::size_t size() const { return labels_.size(); }
    int feature_dim() const { return static_cast<int>(features_.cols()); }

    const Matrix& features() const { return features_; }
    Matrix rows(std::span<const InstanceId> ids) const;
    std::span<const int> labels() const { return labels_; }
    int label(InstanceId id) const { return labels_.at(static_cast<std::size_t>(id)); }
    Split split_of(InstanceId id) const { return splits_.at(static_cast<std::size_t>(id)); }
    std::vector<InstanceId> ids(Split s) const;
    std::vector<int> labels_of(std::span<const InstanceId> ids) const;

    std::vector<std::string> feature_names;
    Standardizer scaler;
    LoadStats stats;

private:
    friend class SensitiveOracle;

    std::string name_;
    Matrix features_;
    std::vector<int> labels_;
    std::vector<int> sensitive_;
    std::vector<Split> splits_;
};

/// Random split of n instances by the given fractions (train and val sizes
/// are floored, test takes the rest).
std::vector<Split> assign_splits(std::size_t n, const SplitFractions& fractions, std::uint64_t seed);

/// Reads a headered comma-separated file. Rows containing the schema's
/// missing token in a used column are rejected; malformed rows throw
/// InputError naming the line.
TabularDataset load_tabular(const std::filesystem::path& path, const DatasetSchema& schema,
                            const SplitFractions& fractions, std::uint64_t split_seed);
TabularDataset load_tabular(std::istream& in, const DatasetSchema& schema,
                            const SplitFractions& fractions, std::uint64_t split_seed);

/// Subgroup order used by the synthetic generator.
enum class Subgroup : int { a0_y1 = 0, a0_y0 = 1, a1_y1 = 2, a1_y0 = 3 };

struct SyntheticConfig {
    std::array<int, 4> counts{50, 1000, 800, 800};
    std::array<std::array<double, 2>, 4> means{{{0.5, -1.0}, {-1.5, -1.0}, {1.5, 1.0}, {-1.5, 1.0}}};
    double spread = 1.0;
    SplitFractions fractions{};
};

/// 2-D Gaussian blob per (a, y) subgroup; deterministic in `seed`.
TabularDataset make_synthetic(const SyntheticConfig& config, std::uint64_t seed);

struct BudgetExhausted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Instances whose sensitive attribute has been revealed. Seed annotations
/// are drawn before the loop and do not count against the budget.
class AnnotationLedger {
public:
    explicit AnnotationLedger(std::int64_t budget = 0);

    std::int64_t budget() const { return budget_; }
    std::int64_t spent() const { return static_cast<std::int64_t>(annotated_.size()); }
    std::int64_t remaining() const { return budget_ - spent(); }
    bool exhausted() const { return spent() >= budget_; }

    const std::vector<InstanceId>& seed_ids() const { return seeds_; }
    const std::vector<InstanceId>& annotated_ids() const { return annotated_; }
    /// Seeds followed by budgeted annotations, in reveal order.
    std::vector<InstanceId> all_ids() const;
    std::size_t size() const { return seeds_.size() + annotated_.size(); }

    bool contains(InstanceId id) const { return values_.contains(id); }
    int sensitive_of(InstanceId id) const;

private:
    friend class SensitiveOracle;
    void record(InstanceId id, int a, bool seed);

    std::int64_t budget_;
    std::vector<InstanceId> seeds_;
    std::vector<InstanceId> annotated_;
    std::unordered_map<InstanceId, int> values_;
};

/// floor(ratio * n_train).
std::int64_t budget_from_ratio(double ratio, std::size_t n_train);

/// Holds the ground-truth sensitive attribute and counts every read by
/// channel. Training and selection only ever see values through a ledger;
/// evaluation reads are restricted to val/test ids.
class SensitiveOracle {
public:
    explicit SensitiveOracle(const TabularDataset& dataset) : dataset_(&dataset) {}

    /// Reveals one train instance into the ledger. Throws BudgetExhausted
    /// when the budget is spent and StateError on a duplicate id.
    int reveal(AnnotationLedger& ledger, InstanceId id);

    /// Initial annotated set: 2 * per_subgroup random train instances from
    /// each class y (labels are public), revealed one by one. Only the drawn
    /// instances are read, so the (a, y) mix of the seeds is itself random.
    std::vector<InstanceId> seed(AnnotationLedger& ledger, int per_subgroup, Rng& rng);

    /// Ground truth for val/test reporting. A train id is an audit
    /// violation and throws StateError.
    std::vector<int> evaluation_values(std::span<const InstanceId> ids);

    /// Ground truth for bound diagnostics (group membership of the train
    /// pool). Never fed back into training or selection.
    std::vector<int> diagnostic_values(std::span<const InstanceId> ids);

    struct Audit {
        std::size_t reveal_reads = 0;
        std::size_t seed_reads = 0;
        std::size_t evaluation_reads = 0;
        std::size_t diagnostic_reads = 0;
        std::size_t violations = 0;
    };
    const Audit& audit() const { return audit_; }

private:
    const TabularDataset* dataset_;
    Audit audit_;
};

}  // namespace apod::data
