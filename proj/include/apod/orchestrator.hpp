#pragma once

// Experiment driver: the annotate / debias loop under a budget, the
// comparison methods, result files and sweeps.

#include "apod/common.hpp"
#include "apod/data.hpp"
#include "apod/fairness.hpp"
#include "apod/mitigation.hpp"
#include "apod/selection.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace apod::orchestrator {

enum class Method { apod, ssbm, pod_rs, pod_al, pod_ca, pod_group_only, pod_individual_only, vanilla, group_dro, lff, fal };

Method parse_method(const std::string& s);
const char* method_name(Method m);
/// Methods that spend an annotation budget through the selection loop.
bool is_budgeted(Method m);
const std::vector<Method>& all_methods();

struct ExperimentConfig {
    std::string dataset = "synthetic";
    std::filesystem::path schema_path;
    std::filesystem::path data_path;
    Method method = Method::apod;
    double lambda = 1.0;
    std::optional<double> budget_ratio;
    std::optional<std::int64_t> budget;  // absolute count, wins over the ratio
    std::vector<std::uint64_t> seeds{0};
    std::vector<double> lambdas;  // sweep only; empty means {lambda}

    int pretrain_epochs = 50;
    int pod_epochs = 10;
    int sensitive_epochs = 10;
    int batch_size = 256;
    double lr = 1e-3;
    double dropout = 0.5;
    double early_stop_tol = 1e-6;
    int seeds_per_subgroup = 2;

    std::optional<FairnessMetric> metric;
    std::optional<int> embedding_dim;
    std::optional<int> hidden_dim;
    std::optional<int> head_layers;

    double alpha = 0.5;  // fal
    int fal_candidates = 50;
    double gce_q = 2.5;  // lff
    bool lff_true_label = false;
    double dro_eta = 0.01;

    std::filesystem::path output_dir;
    bool save_checkpoints = true;
    bool dump_embeddings = false;
    bool trace_bounds = true;
    int jobs = 1;

    data::SyntheticConfig synthetic{};
    data::SplitFractions fractions{};

    /// Sets one field from its key-value spelling. Throws ConfigError on an
    /// unknown key or a malformed value.
    void set(const std::string& key, const std::string& value);
    /// `key = value` lines, `#` comments.
    static ExperimentConfig parse(std::istream& in);
    static ExperimentConfig load(const std::filesystem::path& path);
    void validate() const;
    bool is_synthetic() const { return dataset == "synthetic"; }
};

/// Keys accepted by ExperimentConfig::set, with a short description each.
const std::vector<std::pair<std::string, std::string>>& config_keys();

/// Resolved per-run settings after schema defaults are applied.
struct ResolvedSettings {
    FairnessMetric metric = FairnessMetric::delta_eo;
    mitigation::ClassifierArch arch{};
    std::int64_t budget = 0;
};

data::TabularDataset load_dataset(const ExperimentConfig& config, std::uint64_t seed);
ResolvedSettings resolve(const ExperimentConfig& config, const data::TabularDataset& dataset);

// ----------------------------------------------------------------- traces

/// One reveal inside the loop. `group_a` is the selected sensitive group
/// for group-aware methods and the revealed value otherwise.
struct BoundRecord {
    int iteration = 0;
    int group_a = -1;
    int group_c = -1;
    InstanceId chosen = -1;
    int revealed = -1;
    std::int64_t n_before = 0;  // |{i in S : a_i = group_a}|
    std::int64_t n_after = 0;
    double delta_before = 0.0;  // coverage of the true group_a members of the pool
    double delta_after = 0.0;
    double max_unannotated_loss = 0.0;
};

struct BoundTrace {
    std::vector<BoundRecord> records;
    std::vector<selection::CoverageStats> coverage;  // initial, then after each reveal

    /// Human-readable invariant violations; empty when the trace is sound.
    std::vector<std::string> violations() const;
};

// ---------------------------------------------------------------- results

struct IterationRecord {
    int iteration = 0;
    std::int64_t spent = 0;
    std::size_t annotated = 0;  // |S| including seeds
    std::size_t unannotated = 0;
    fairness::FairnessReport test{};
    std::optional<BoundRecord> bound;
    double coverage_all = 0.0;
    bool fallback = false;
};

struct RunSummary {
    std::string method;
    std::string dataset;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::string status = "ok";
    std::string error;
    std::int64_t budget = 0;
    std::int64_t spent = 0;
    int iterations = 0;
    int selected_iteration = -1;
    fairness::FairnessReport test{};
    FairnessMetric metric = FairnessMetric::delta_eo;
    double seconds = 0.0;
    data::SensitiveOracle::Audit audit{};
};

struct RunResult {
    RunSummary summary;
    std::vector<IterationRecord> iterations;
    BoundTrace trace;
    std::vector<mitigation::CheckpointScore> head_scores;
    std::vector<InstanceId> annotated;  // seeds first, then reveal order
    std::vector<int> final_test_predictions;
    std::uint64_t body_digest_before = 0;
    std::uint64_t body_digest_after = 0;
    std::filesystem::path run_dir;  // empty when nothing was written
};

/// The full pipeline for config.method with the first configured seed
/// overridden by `seed`. Stage failures are caught and reported in
/// summary.status as "failed:<stage>".
RunResult run_method(const ExperimentConfig& config, std::uint64_t seed);
/// run_method with method forced to apod.
RunResult run_apod(ExperimentConfig config, std::uint64_t seed);

// ------------------------------------------------------------ result files

/// One JSON object per line: an "iteration" record per loop iteration, then
/// a "summary" record.
void write_results(std::ostream& out, const RunResult& run);
std::vector<RunSummary> read_summaries(std::istream& in);
std::vector<RunSummary> read_summaries(const std::filesystem::path& path);

/// `# id label split annotated v0 v1 ...` then one line per instance.
void write_embedding_dump(std::ostream& out, const Matrix& embeddings, const data::TabularDataset& dataset,
                          std::span<const InstanceId> annotated);
/// `# id a kind` then one line per annotated instance, in ledger order.
void write_ledger(std::ostream& out, const data::AnnotationLedger& ledger);

// ------------------------------------------------------------------ sweep

struct SweepRow {
    std::string method;
    double lambda = 0.0;
    std::size_t runs = 0;
    std::size_t failed = 0;
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    double eo_abs_mean = 0.0;  // over runs where it is defined
    double eo_abs_std = 0.0;
    double eop_mean = 0.0;
    double eop_std = 0.0;
    std::size_t eop_defined = 0;
};

/// Mean and sample standard deviation (n - 1; 0 for a single run) per
/// (method, lambda), over successful runs. Rows sorted by method then lambda.
std::vector<SweepRow> aggregate(std::span<const RunSummary> runs);

struct SweepResult {
    std::vector<RunResult> runs;  // ordered by (lambda, seed)
    std::vector<SweepRow> table;
};

/// run_method for every (lambda, seed); config.jobs runs execute in
/// parallel. Failed runs are kept and excluded from the table.
SweepResult sweep(const ExperimentConfig& config, std::span<const double> lambdas);

void print_table(std::ostream& out, std::span<const SweepRow> rows);

}  // namespace apod::orchestrator
