#include "apod/orchestrator.hpp"

#include "apod/baselines.hpp"
#include "apod/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

namespace apod::orchestrator {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<Method, const char*>, 11> kMethods{{
    {Method::apod, "apod"},
    {Method::ssbm, "ssbm"},
    {Method::pod_rs, "pod_rs"},
    {Method::pod_al, "pod_al"},
    {Method::pod_ca, "pod_ca"},
    {Method::pod_group_only, "pod_group_only"},
    {Method::pod_individual_only, "pod_individual_only"},
    {Method::vanilla, "vanilla"},
    {Method::group_dro, "group_dro"},
    {Method::lff, "lff"},
    {Method::fal, "fal"},
}};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

Matrix rows_of(const Matrix& m, std::span<const InstanceId> ids) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), m.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(ids[i]);
    return out;
}

json rate_json(const fairness::Rate& r) { return r ? json(*r) : json(nullptr); }

fairness::Rate rate_from(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

std::string run_name(const ExperimentConfig& cfg, std::uint64_t seed) {
    char lam[32];
    std::snprintf(lam, sizeof lam, "%g", cfg.lambda);
    return cfg.dataset + "_" + method_name(cfg.method) + "_lambda" + lam + "_seed" + std::to_string(seed);
}

mitigation::AnnotatedSet annotated_set(const data::AnnotationLedger& ledger, const Matrix& emb,
                                       const data::TabularDataset& dataset) {
    mitigation::AnnotatedSet s;
    const auto ids = ledger.all_ids();
    s.embeddings = rows_of(emb, ids);
    for (auto id : ids) {
        s.labels.push_back(dataset.label(id));
        s.sensitive.push_back(ledger.sensitive_of(id));
    }
    return s;
}

std::int64_t group_count(const data::AnnotationLedger& ledger, int a) {
    std::int64_t n = 0;
    for (auto id : ledger.all_ids()) n += ledger.sensitive_of(id) == a;
    return n;
}

bool uses_proxy_in_loop(Method m) { return m == Method::apod || m == Method::pod_group_only; }

void save_head(const std::filesystem::path& dir, int iteration, const nn::DenseNet& head) {
    char name[32];
    std::snprintf(name, sizeof name, "head_%04d.txt", iteration);
    nn::save_net(head, dir / "checkpoints" / name);
}

struct Sample {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

Sample describe(const std::vector<double>& v) {
    Sample s;
    s.n = v.size();
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

}  // namespace

// ------------------------------------------------------------------ methods

Method parse_method(const std::string& s) {
    for (auto [m, name] : kMethods) {
        if (s == name) return m;
    }
    throw ConfigError("unknown method '" + s + "'");
}

const char* method_name(Method m) {
    for (auto [k, name] : kMethods) {
        if (k == m) return name;
    }
    return "?";
}

bool is_budgeted(Method m) {
    switch (m) {
        case Method::vanilla:
        case Method::group_dro:
        case Method::lff:
            return false;
        default:
            return true;
    }
}

const std::vector<Method>& all_methods() {
    static const std::vector<Method> methods = [] {
        std::vector<Method> v;
        for (auto [m, name] : kMethods) v.push_back(m);
        return v;
    }();
    return methods;
}

// ------------------------------------------------------------------- config

const std::vector<std::pair<std::string, std::string>>& config_keys() {
    static const std::vector<std::pair<std::string, std::string>> keys{
        {"dataset", "dataset name; 'synthetic' uses the built-in generator"},
        {"schema", "dataset schema file"},
        {"data", "dataset CSV file"},
        {"method", "apod|ssbm|pod_rs|pod_al|pod_ca|pod_group_only|pod_individual_only|vanilla|group_dro|lff|fal"},
        {"lambda", "fairness regularization weight"},
        {"lambdas", "comma-separated sweep values"},
        {"budget_ratio", "annotation budget as a fraction of the train split"},
        {"budget", "absolute annotation budget (overrides budget_ratio)"},
        {"seeds", "comma-separated run seeds"},
        {"pretrain_epochs", "joint body + head epochs"},
        {"pod_epochs", "head epochs per debiasing phase"},
        {"sensitive_epochs", "proxy head epochs per retrain"},
        {"batch_size", "mini-batch size"},
        {"lr", "Adam learning rate"},
        {"dropout", "dropout rate of the heads"},
        {"early_stop_tol", "stop a debiasing phase once the epoch loss moves less than this"},
        {"seeds_per_subgroup", "free initial annotations: twice this many random instances per class"},
        {"metric", "delta_eo|eop"},
        {"embedding_dim", "body output width"},
        {"hidden_dim", "task head hidden width"},
        {"head_layers", "linear layers in the task head"},
        {"alpha", "fal accuracy weight"},
        {"fal_candidates", "fal candidates probed per iteration"},
        {"gce_q", "lff generalized cross-entropy exponent"},
        {"lff_true_label", "lff re-weighting uses true labels instead of biased predictions"},
        {"dro_eta", "group DRO weight step size"},
        {"output_dir", "artifact directory (empty: write nothing)"},
        {"save_checkpoints", "write one head checkpoint per iteration"},
        {"dump_embeddings", "write the embedding dump"},
        {"trace_bounds", "record per-group coverage (reads ground truth of the train pool on a diagnostic channel)"},
        {"jobs", "parallel runs in a sweep"},
        {"synthetic_counts", "synthetic subgroup sizes a0y1,a0y0,a1y1,a1y0"},
        {"synthetic_spread", "synthetic blob standard deviation"},
    };
    return keys;
}

void ExperimentConfig::set(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    if (key == "dataset") dataset = v;
    else if (key == "schema") schema_path = v;
    else if (key == "data") data_path = v;
    else if (key == "method") method = parse_method(v);
    else if (key == "lambda") lambda = to_double(key, v);
    else if (key == "lambdas") {
        lambdas.clear();
        for (const auto& item : split_list(v)) lambdas.push_back(to_double(key, item));
    } else if (key == "budget_ratio") budget_ratio = to_double(key, v);
    else if (key == "budget") budget = to_int(key, v);
    else if (key == "seeds") {
        seeds.clear();
        for (const auto& item : split_list(v)) {
            const auto s = to_int(key, item);
            if (s < 0) throw ConfigError("seeds must be non-negative");
            seeds.push_back(static_cast<std::uint64_t>(s));
        }
    } else if (key == "pretrain_epochs") pretrain_epochs = static_cast<int>(to_int(key, v));
    else if (key == "pod_epochs") pod_epochs = static_cast<int>(to_int(key, v));
    else if (key == "sensitive_epochs") sensitive_epochs = static_cast<int>(to_int(key, v));
    else if (key == "batch_size") batch_size = static_cast<int>(to_int(key, v));
    else if (key == "lr") lr = to_double(key, v);
    else if (key == "dropout") dropout = to_double(key, v);
    else if (key == "early_stop_tol") early_stop_tol = to_double(key, v);
    else if (key == "seeds_per_subgroup") seeds_per_subgroup = static_cast<int>(to_int(key, v));
    else if (key == "metric") metric = parse_metric(v);
    else if (key == "embedding_dim") embedding_dim = static_cast<int>(to_int(key, v));
    else if (key == "hidden_dim") hidden_dim = static_cast<int>(to_int(key, v));
    else if (key == "head_layers") head_layers = static_cast<int>(to_int(key, v));
    else if (key == "alpha") alpha = to_double(key, v);
    else if (key == "fal_candidates") fal_candidates = static_cast<int>(to_int(key, v));
    else if (key == "gce_q") gce_q = to_double(key, v);
    else if (key == "lff_true_label") lff_true_label = to_bool(key, v);
    else if (key == "dro_eta") dro_eta = to_double(key, v);
    else if (key == "output_dir") output_dir = v;
    else if (key == "save_checkpoints") save_checkpoints = to_bool(key, v);
    else if (key == "dump_embeddings") dump_embeddings = to_bool(key, v);
    else if (key == "trace_bounds") trace_bounds = to_bool(key, v);
    else if (key == "jobs") jobs = static_cast<int>(to_int(key, v));
    else if (key == "synthetic_counts") {
        const auto items = split_list(v);
        if (items.size() != 4) throw ConfigError("synthetic_counts needs four values");
        for (std::size_t k = 0; k < 4; ++k) synthetic.counts[k] = static_cast<int>(to_int(key, items[k]));
    } else if (key == "synthetic_spread") synthetic.spread = to_double(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse(std::istream& in) {
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse(in);
}

void ExperimentConfig::validate() const {
    if (lambda < 0.0 || !std::isfinite(lambda)) throw ConfigError("lambda must be a non-negative number");
    for (double l : lambdas) {
        if (l < 0.0 || !std::isfinite(l)) throw ConfigError("sweep lambdas must be non-negative");
    }
    if (budget_ratio && !(*budget_ratio > 0.0 && *budget_ratio <= 1.0)) {
        throw ConfigError("budget_ratio must be in (0, 1]");
    }
    if (budget && *budget < 0) throw ConfigError("budget must be non-negative");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (pretrain_epochs < 0 || sensitive_epochs < 0) throw ConfigError("epoch counts must be non-negative");
    if (pod_epochs < 1) throw ConfigError("pod_epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (seeds_per_subgroup < 1) throw ConfigError("seeds_per_subgroup must be at least 1");
    if (embedding_dim && *embedding_dim < 1) throw ConfigError("embedding_dim must be positive");
    if (hidden_dim && *hidden_dim < 1) throw ConfigError("hidden_dim must be positive");
    if (head_layers && *head_layers < 1) throw ConfigError("head_layers must be positive");
    if (method == Method::fal) {
        if (alpha < 0.0 || alpha > 1.0) throw ConfigError("fal needs alpha in [0, 1]");
        if (fal_candidates < 1) throw ConfigError("fal needs fal_candidates >= 1");
    }
    if (method == Method::lff && !(gce_q > 0.0)) throw ConfigError("lff needs gce_q > 0");
    if (method == Method::group_dro && dro_eta < 0.0) throw ConfigError("group_dro needs dro_eta >= 0");
    if (jobs < 1) throw ConfigError("jobs must be at least 1");
    if (!is_synthetic()) {
        if (schema_path.empty()) throw ConfigError("dataset '" + dataset + "' needs a schema path");
        if (data_path.empty()) throw ConfigError("dataset '" + dataset + "' needs a data path");
    }
}

data::TabularDataset load_dataset(const ExperimentConfig& config, std::uint64_t seed) {
    if (config.is_synthetic()) {
        auto sc = config.synthetic;
        sc.fractions = config.fractions;
        return data::make_synthetic(sc, seed);
    }
    const auto schema = data::DatasetSchema::load(config.schema_path);
    return data::load_tabular(config.data_path, schema, config.fractions, seed);
}

ResolvedSettings resolve(const ExperimentConfig& config, const data::TabularDataset& dataset) {
    ResolvedSettings r;
    const auto n_train = dataset.ids(data::Split::train).size();
    r.arch.input_dim = dataset.feature_dim();
    r.arch.dropout = config.dropout;
    if (config.is_synthetic()) {
        r.metric = config.metric.value_or(FairnessMetric::delta_eo);
        r.arch.embedding_dim = config.embedding_dim.value_or(32);
        r.arch.hidden_dim = config.hidden_dim.value_or(32);
        r.arch.head_layers = config.head_layers.value_or(2);
        r.budget = config.budget ? *config.budget
                   : config.budget_ratio ? data::budget_from_ratio(*config.budget_ratio, n_train)
                                         : 30;
    } else {
        const auto schema = data::DatasetSchema::load(config.schema_path);
        r.metric = config.metric.value_or(schema.metric);
        r.arch.embedding_dim = config.embedding_dim.value_or(schema.embedding_dim);
        r.arch.hidden_dim = config.hidden_dim.value_or(schema.hidden_dim);
        r.arch.head_layers = config.head_layers.value_or(schema.head_layers);
        r.budget = config.budget ? *config.budget
                                 : data::budget_from_ratio(config.budget_ratio.value_or(schema.budget_ratio), n_train);
    }
    r.budget = std::min<std::int64_t>(r.budget, static_cast<std::int64_t>(n_train));
    return r;
}

// ------------------------------------------------------------------- traces

std::vector<std::string> BoundTrace::violations() const {
    std::vector<std::string> out;
    for (std::size_t k = 0; k < records.size(); ++k) {
        const auto& r = records[k];
        const std::int64_t expected = r.n_before + (r.revealed == r.group_a ? 1 : 0);
        if (r.n_after != expected) {
            out.push_back("iteration " + std::to_string(r.iteration) + ": N went " + std::to_string(r.n_before) +
                          " -> " + std::to_string(r.n_after));
        }
        if (r.delta_after > r.delta_before) {
            out.push_back("iteration " + std::to_string(r.iteration) + ": coverage of the selected group grew");
        }
        if (k > 0 && records[k - 1].group_a == r.group_a && r.delta_after > records[k - 1].delta_after) {
            out.push_back("iteration " + std::to_string(r.iteration) + ": coverage grew under an unchanged group");
        }
    }
    for (std::size_t k = 1; k < coverage.size(); ++k) {
        const auto& p = coverage[k - 1];
        const auto& c = coverage[k];
        if (c.delta_all > p.delta_all || c.delta_group[0] > p.delta_group[0] || c.delta_group[1] > p.delta_group[1]) {
            out.push_back("coverage increased after reveal " + std::to_string(k));
        }
    }
    return out;
}

// ---------------------------------------------------------------------- run

namespace {

class Runner {
public:
    Runner(const ExperimentConfig& cfg, std::uint64_t seed, RunResult& out, std::string& stage)
        : cfg_(cfg), seed_(seed), out_(out), stage_(stage), train_rng_(seed), select_rng_(seed ^ 0x5851f42d4c957f2dULL) {}

    void run() {
        auto& s = out_.summary;
        stage_ = "load";
        dataset_ = load_dataset(cfg_, seed_);
        settings_ = resolve(cfg_, dataset_);
        s.metric = settings_.metric;
        s.budget = is_budgeted(cfg_.method) ? settings_.budget : 0;
        oracle_.emplace(dataset_);
        if (!cfg_.output_dir.empty()) {
            out_.run_dir = cfg_.output_dir / run_name(cfg_, seed_);
            std::filesystem::create_directories(out_.run_dir / "checkpoints");
        }

        stage_ = "pretrain";
        clf_ = mitigation::FairClassifier::create(settings_.arch, train_rng_);
        mitigation::pretrain(clf_, dataset_, {cfg_.pretrain_epochs, cfg_.batch_size, cfg_.lr}, train_rng_);
        out_.body_digest_before = nn::parameter_digest(clf_.body);
        emb_ = clf_.embed(dataset_.features());
        train_ids_ = dataset_.ids(data::Split::train);
        val_ids_ = dataset_.ids(data::Split::val);
        test_ids_ = dataset_.ids(data::Split::test);
        pool_.embeddings = rows_of(emb_, train_ids_);
        pool_.labels = dataset_.labels_of(train_ids_);
        val_emb_ = rows_of(emb_, val_ids_);
        val_y_ = dataset_.labels_of(val_ids_);
        test_emb_ = rows_of(emb_, test_ids_);
        test_y_ = dataset_.labels_of(test_ids_);
        test_a_ = oracle_->evaluation_values(test_ids_);
        if (!out_.run_dir.empty()) nn::save_net(clf_.body, out_.run_dir / "body.txt");

        const auto m = cfg_.method;
        ledger_ = data::AnnotationLedger(s.budget);
        if (m == Method::vanilla || (is_budgeted(m) && s.budget == 0)) {
            single_record();
        } else if (m == Method::group_dro) {
            run_group_dro();
        } else if (m == Method::lff) {
            run_lff();
        } else if (m == Method::fal) {
            run_fal();
        } else {
            run_loop();
        }

        stage_ = "evaluation";
        out_.body_digest_after = nn::parameter_digest(clf_.body);
        const auto preds = nn::argmax_rows(clf_.task_head.predict(test_emb_));
        s.test = fairness::report(preds, test_y_, test_a_);
        out_.final_test_predictions = preds;
        s.spent = ledger_.spent();
        s.iterations = static_cast<int>(out_.iterations.size());
        out_.annotated = ledger_.all_ids();
        write_artifacts();
    }

private:
    fairness::FairnessReport evaluate(const nn::DenseNet& head) const {
        return fairness::report(nn::argmax_rows(head.predict(test_emb_)), test_y_, test_a_);
    }

    void checkpoint(int iteration) {
        if (!out_.run_dir.empty() && cfg_.save_checkpoints) save_head(out_.run_dir, iteration, clf_.task_head);
    }

    void single_record() {
        IterationRecord rec;
        rec.test = evaluate(clf_.task_head);
        rec.spent = ledger_.spent();
        rec.annotated = ledger_.size();
        rec.unannotated = train_ids_.size() - ledger_.size();
        out_.iterations.push_back(rec);
        out_.summary.selected_iteration = 0;
        checkpoint(0);
    }

    std::int64_t head_epochs() const { return cfg_.pod_epochs * (settings_.budget + 1); }

    void run_group_dro() {
        stage_ = "annotate";
        ledger_ = data::AnnotationLedger(static_cast<std::int64_t>(train_ids_.size()));
        std::vector<int> a;
        for (auto id : train_ids_) a.push_back(oracle_->reveal(ledger_, id));
        stage_ = "train";
        baselines::DroState state;
        state.eta_q = cfg_.dro_eta;
        baselines::train_group_dro(clf_, pool_, a, state,
                                   {static_cast<int>(head_epochs()), cfg_.batch_size, cfg_.lr}, train_rng_);
        single_record();
    }

    void run_lff() {
        stage_ = "train";
        baselines::LffState state{clf_.task_head, clf_.task_head, cfg_.gce_q, cfg_.lff_true_label};
        baselines::train_lff(state, pool_, {static_cast<int>(head_epochs()), cfg_.batch_size, cfg_.lr}, train_rng_);
        clf_.task_head = state.debiased;
        single_record();
    }

    void train_proxy_head() {
        stage_ = "sensitive_head";
        mitigation::train_sensitive_head(clf_, annotated_set(ledger_, emb_, dataset_),
                                         {cfg_.sensitive_epochs, cfg_.batch_size, cfg_.lr}, train_rng_);
    }

    void seed_ledger() {
        stage_ = "seed";
        oracle_->seed(ledger_, cfg_.seeds_per_subgroup, select_rng_);
        if (cfg_.trace_bounds) diag_ = oracle_->diagnostic_values(train_ids_);
        push_coverage();
    }

    void push_coverage() {
        if (!cfg_.trace_bounds) return;
        out_.trace.coverage.push_back(selection::coverage(train_ids_, diag_, ledger_.all_ids(), emb_));
    }

    double current_coverage() const {
        return out_.trace.coverage.empty() ? 0.0 : out_.trace.coverage.back().delta_all;
    }

    /// Everything that happens around one reveal: bound bookkeeping before,
    /// the ledger write, coverage after.
    BoundRecord reveal(int iteration, InstanceId id, int group_a, int group_c, double max_loss) {
        BoundRecord br;
        br.iteration = iteration;
        br.chosen = id;
        br.group_c = group_c;
        br.max_unannotated_loss = max_loss;
        stage_ = "annotate";
        const std::array<std::int64_t, 2> before{group_count(ledger_, 0), group_count(ledger_, 1)};
        const int a = oracle_->reveal(ledger_, id);
        br.revealed = a;
        br.group_a = group_a < 0 ? a : group_a;
        br.n_before = before[br.group_a];
        br.n_after = group_count(ledger_, br.group_a);
        if (cfg_.trace_bounds) {
            br.delta_before = out_.trace.coverage.back().delta_group[br.group_a];
            push_coverage();
            br.delta_after = out_.trace.coverage.back().delta_group[br.group_a];
        }
        out_.trace.records.push_back(br);
        return br;
    }

    double max_unannotated_loss(const Matrix& logits, std::span<const InstanceId> unannotated) const {
        if (unannotated.empty()) return 0.0;
        std::vector<int> y;
        y.reserve(unannotated.size());
        for (auto id : unannotated) y.push_back(dataset_.label(id));
        return nn::per_instance_cross_entropy(rows_of(logits, unannotated), y).maxCoeff();
    }

    void run_loop() {
        const auto m = cfg_.method;
        seed_ledger();
        if (m == Method::ssbm) {
            stage_ = "annotate";
            baselines::ssbm_annotate(*oracle_, ledger_, train_ids_, select_rng_);
            push_coverage();
        }
        auto state = selection::SelectionState::from_ledger(train_ids_, ledger_, dataset_.size());
        auto annotated = annotated_set(ledger_, emb_, dataset_);
        const mitigation::PodConfig pod{cfg_.lambda, cfg_.pod_epochs, cfg_.batch_size, cfg_.lr, cfg_.early_stop_tol};
        std::vector<mitigation::HeadCheckpoint> checkpoints;
        std::uint64_t proxy_version = 0;

        for (int it = 0;; ++it) {
            stage_ = "pod";
            mitigation::run_pod(clf_, pool_, annotated, pod, train_rng_);
            checkpoints.push_back({it, clf_.task_head});
            checkpoint(it);

            IterationRecord rec;
            rec.iteration = it;
            rec.spent = ledger_.spent();
            rec.annotated = state.annotated.size();
            rec.unannotated = state.unannotated.size();
            rec.test = evaluate(clf_.task_head);
            rec.coverage_all = current_coverage();

            const bool done = m == Method::ssbm ? it >= settings_.budget
                                                : ledger_.exhausted() || state.unannotated.empty();
            if (done) {
                out_.iterations.push_back(rec);
                break;
            }
            if (m == Method::ssbm) {
                out_.iterations.push_back(rec);
                continue;
            }

            if (uses_proxy_in_loop(m)) {
                train_proxy_head();
                const auto proxy = mitigation::proxy_sensitive(clf_, rows_of(emb_, state.unannotated));
                state.refresh_proxy(state.unannotated, proxy, ++proxy_version);
            }

            stage_ = "selection";
            const Matrix logits = clf_.task_head.predict(emb_);
            const auto preds = nn::argmax_rows(logits);
            const auto labels = dataset_.labels();
            selection::Choice choice;
            switch (m) {
                case Method::apod: choice = selection::ais_select(state, preds, labels, emb_); break;
                case Method::pod_rs: choice = selection::select_random(state, select_rng_); break;
                case Method::pod_al: choice = selection::select_uncertainty(state, logits); break;
                case Method::pod_ca: choice = selection::select_coreset(state, emb_); break;
                case Method::pod_group_only:
                    choice = selection::select_group_only(state, preds, labels, select_rng_);
                    break;
                case Method::pod_individual_only: choice = selection::select_individual_only(state, emb_); break;
                default: throw StateError("method has no selection loop");
            }
            const double max_loss = max_unannotated_loss(logits, state.unannotated);
            const auto br = reveal(it, choice.id, choice.group ? choice.group->a : -1,
                                   choice.group ? choice.group->c : -1, max_loss);
            state.annotate(choice.id);
            state.last_choice = choice;
            annotated = annotated_set(ledger_, emb_, dataset_);
            rec.bound = br;
            rec.fallback = choice.fallback;
            out_.iterations.push_back(rec);
        }

        train_proxy_head();
        stage_ = "head_selection";
        const auto val_proxy = mitigation::proxy_sensitive(clf_, val_emb_);
        const auto sel = mitigation::head_selection(checkpoints, val_emb_, val_y_, val_proxy, settings_.metric);
        clf_.task_head = checkpoints[sel.index].task_head;
        out_.summary.selected_iteration = checkpoints[sel.index].iteration;
        out_.head_scores = sel.scores;
    }

    void run_fal() {
        seed_ledger();
        auto state = selection::SelectionState::from_ledger(train_ids_, ledger_, dataset_.size());
        baselines::FalConfig fal;
        fal.alpha = cfg_.alpha;
        fal.max_candidates = cfg_.fal_candidates;
        fal.retrain = {cfg_.pod_epochs, cfg_.batch_size, cfg_.lr};
        baselines::FalContext ctx;
        ctx.embeddings = &emb_;
        ctx.labels = dataset_.labels();
        ctx.val_embeddings = val_emb_;
        ctx.val_labels = val_y_;

        stage_ = "train";
        baselines::fit_head_on_annotated(clf_.task_head, ctx, ledger_.all_ids(), fal.retrain, train_rng_);
        for (int it = 0;; ++it) {
            checkpoint(it);
            IterationRecord rec;
            rec.iteration = it;
            rec.spent = ledger_.spent();
            rec.annotated = state.annotated.size();
            rec.unannotated = state.unannotated.size();
            rec.test = evaluate(clf_.task_head);
            rec.coverage_all = current_coverage();
            if (ledger_.exhausted() || state.unannotated.empty()) {
                out_.iterations.push_back(rec);
                break;
            }
            train_proxy_head();
            stage_ = "selection";
            ctx.annotated = ledger_.all_ids();
            ctx.val_proxy_sensitive = mitigation::proxy_sensitive(clf_, val_emb_);
            const auto best = baselines::fal_select(clf_.task_head, ctx, state.unannotated, fal, select_rng_);
            const Matrix logits = clf_.task_head.predict(emb_);
            rec.bound = reveal(it, best.id, -1, -1, max_unannotated_loss(logits, state.unannotated));
            state.annotate(best.id);
            stage_ = "train";
            baselines::fit_head_on_annotated(clf_.task_head, ctx, ledger_.all_ids(), fal.retrain, train_rng_);
            out_.iterations.push_back(rec);
        }
        out_.summary.selected_iteration = out_.iterations.back().iteration;
    }

    void write_artifacts() {
        if (out_.run_dir.empty()) return;
        stage_ = "write";
        std::ofstream ledger_out(out_.run_dir / "ledger.txt");
        write_ledger(ledger_out, ledger_);
        if (cfg_.dump_embeddings) {
            std::ofstream dump(out_.run_dir / "embeddings.txt");
            write_embedding_dump(dump, emb_, dataset_, ledger_.all_ids());
        }
    }

    const ExperimentConfig& cfg_;
    std::uint64_t seed_;
    RunResult& out_;
    std::string& stage_;
    Rng train_rng_;
    Rng select_rng_;

    data::TabularDataset dataset_;
    ResolvedSettings settings_;
    std::optional<data::SensitiveOracle> oracle_;
    data::AnnotationLedger ledger_;
    mitigation::FairClassifier clf_;
    Matrix emb_;
    std::vector<InstanceId> train_ids_, val_ids_, test_ids_;
    mitigation::TrainingPool pool_;
    Matrix val_emb_, test_emb_;
    std::vector<int> val_y_, test_y_, test_a_, diag_;

public:
    const data::SensitiveOracle* oracle() const { return oracle_ ? &*oracle_ : nullptr; }
};

}  // namespace

RunResult run_method(const ExperimentConfig& config, std::uint64_t seed) {
    config.validate();
    RunResult result;
    auto& s = result.summary;
    s.method = method_name(config.method);
    s.dataset = config.dataset;
    s.lambda = config.lambda;
    s.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    std::string stage = "setup";
    Runner runner(config, seed, result, stage);
    try {
        runner.run();
    } catch (const std::exception& e) {
        s.status = "failed:" + stage;
        s.error = e.what();
        log_warning(std::string(s.method) + " seed " + std::to_string(seed) + " failed in " + stage + ": " + e.what());
    }
    if (const auto* oracle = runner.oracle()) s.audit = oracle->audit();
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!result.run_dir.empty()) {
        std::ofstream out(result.run_dir / "results.jsonl");
        write_results(out, result);
    }
    return result;
}

RunResult run_apod(ExperimentConfig config, std::uint64_t seed) {
    config.method = Method::apod;
    return run_method(config, seed);
}

// -------------------------------------------------------------- result files

void write_results(std::ostream& out, const RunResult& run) {
    const auto& s = run.summary;
    for (const auto& it : run.iterations) {
        json j;
        j["record"] = "iteration";
        j["method"] = s.method;
        j["dataset"] = s.dataset;
        j["lambda"] = s.lambda;
        j["seed"] = s.seed;
        j["iteration"] = it.iteration;
        j["spent"] = it.spent;
        j["accuracy"] = it.test.accuracy;
        j["eop"] = rate_json(it.test.eop);
        j["delta_eo_signed"] = rate_json(it.test.delta_eo_signed);
        j["delta_eo_abs"] = rate_json(it.test.delta_eo_abs);
        j["delta_tpr"] = rate_json(it.test.delta_tpr);
        j["delta_fpr"] = rate_json(it.test.delta_fpr);
        j["annotated"] = it.annotated;
        j["unannotated"] = it.unannotated;
        j["delta_cover_all"] = it.coverage_all;
        if (it.bound) {
            j["N_sel_group"] = it.bound->n_after;
            j["delta_cover_group"] = it.bound->delta_after;
            j["chosen_id"] = it.bound->chosen;
            j["selected_a"] = it.bound->group_a;
            j["selected_c"] = it.bound->group_c < 0 ? json(nullptr) : json(it.bound->group_c);
            j["revealed_a"] = it.bound->revealed;
            j["max_unannotated_loss"] = it.bound->max_unannotated_loss;
            j["fallback"] = it.fallback;
        } else {
            j["N_sel_group"] = nullptr;
            j["delta_cover_group"] = nullptr;
        }
        out << j.dump() << '\n';
    }
    json j;
    j["record"] = "summary";
    j["method"] = s.method;
    j["dataset"] = s.dataset;
    j["lambda"] = s.lambda;
    j["seed"] = s.seed;
    j["status"] = s.status;
    j["error"] = s.error;
    j["metric"] = metric_name(s.metric);
    j["budget"] = s.budget;
    j["spent"] = s.spent;
    j["iterations"] = s.iterations;
    j["selected_iteration"] = s.selected_iteration;
    j["accuracy"] = s.test.accuracy;
    j["eop"] = rate_json(s.test.eop);
    j["delta_eo_signed"] = rate_json(s.test.delta_eo_signed);
    j["delta_eo_abs"] = rate_json(s.test.delta_eo_abs);
    j["delta_tpr"] = rate_json(s.test.delta_tpr);
    j["delta_fpr"] = rate_json(s.test.delta_fpr);
    j["n_test"] = s.test.n;
    j["seconds"] = s.seconds;
    j["audit"] = {{"reveal_reads", s.audit.reveal_reads},
                  {"seed_reads", s.audit.seed_reads},
                  {"evaluation_reads", s.audit.evaluation_reads},
                  {"diagnostic_reads", s.audit.diagnostic_reads},
                  {"violations", s.audit.violations}};
    out << j.dump() << '\n';
}

std::vector<RunSummary> read_summaries(std::istream& in) {
    std::vector<RunSummary> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw InputError("results line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("record")) throw InputError("results line " + std::to_string(lineno) + ": no record type");
        if (j.at("record") != "summary") continue;
        try {
            RunSummary s;
            s.method = j.at("method").get<std::string>();
            s.dataset = j.at("dataset").get<std::string>();
            s.lambda = j.at("lambda").get<double>();
            s.seed = j.at("seed").get<std::uint64_t>();
            s.status = j.at("status").get<std::string>();
            s.error = j.value("error", "");
            s.metric = parse_metric(j.at("metric").get<std::string>());
            s.budget = j.at("budget").get<std::int64_t>();
            s.spent = j.at("spent").get<std::int64_t>();
            s.iterations = j.at("iterations").get<int>();
            s.selected_iteration = j.at("selected_iteration").get<int>();
            s.test.accuracy = j.at("accuracy").get<double>();
            s.test.eop = rate_from(j, "eop");
            s.test.delta_eo_signed = rate_from(j, "delta_eo_signed");
            s.test.delta_eo_abs = rate_from(j, "delta_eo_abs");
            s.test.delta_tpr = rate_from(j, "delta_tpr");
            s.test.delta_fpr = rate_from(j, "delta_fpr");
            s.test.n = j.at("n_test").get<std::size_t>();
            s.seconds = j.at("seconds").get<double>();
            if (j.contains("audit")) {
                const auto& a = j.at("audit");
                s.audit.reveal_reads = a.at("reveal_reads").get<std::size_t>();
                s.audit.seed_reads = a.at("seed_reads").get<std::size_t>();
                s.audit.evaluation_reads = a.at("evaluation_reads").get<std::size_t>();
                s.audit.diagnostic_reads = a.at("diagnostic_reads").get<std::size_t>();
                s.audit.violations = a.at("violations").get<std::size_t>();
            }
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw InputError("results line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<RunSummary> read_summaries(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open results file " + path.string());
    return read_summaries(in);
}

void write_embedding_dump(std::ostream& out, const Matrix& embeddings, const data::TabularDataset& dataset,
                          std::span<const InstanceId> annotated) {
    std::vector<bool> is_annotated(dataset.size(), false);
    for (auto id : annotated) is_annotated.at(static_cast<std::size_t>(id)) = true;
    out << "# id label split annotated";
    for (Eigen::Index k = 0; k < embeddings.cols(); ++k) out << " v" << k;
    out << '\n' << std::setprecision(9);
    for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
        out << i << ' ' << dataset.label(i) << ' ' << data::split_name(dataset.split_of(i)) << ' '
            << (is_annotated[static_cast<std::size_t>(i)] ? 1 : 0);
        for (Eigen::Index k = 0; k < embeddings.cols(); ++k) out << ' ' << embeddings(i, k);
        out << '\n';
    }
}

void write_ledger(std::ostream& out, const data::AnnotationLedger& ledger) {
    out << "# id a kind\n";
    for (auto id : ledger.seed_ids()) out << id << ' ' << ledger.sensitive_of(id) << " seed\n";
    for (auto id : ledger.annotated_ids()) out << id << ' ' << ledger.sensitive_of(id) << " budget\n";
}

// -------------------------------------------------------------------- sweep

std::vector<SweepRow> aggregate(std::span<const RunSummary> runs) {
    struct Acc {
        std::size_t runs = 0, failed = 0;
        std::vector<double> acc, eo, eop;
    };
    std::map<std::pair<std::string, double>, Acc> groups;
    for (const auto& r : runs) {
        auto& g = groups[{r.method, r.lambda}];
        ++g.runs;
        if (r.status != "ok") {
            ++g.failed;
            continue;
        }
        g.acc.push_back(r.test.accuracy);
        if (r.test.delta_eo_abs) g.eo.push_back(*r.test.delta_eo_abs);
        if (r.test.eop) g.eop.push_back(*r.test.eop);
    }
    std::vector<SweepRow> rows;
    for (const auto& [key, g] : groups) {
        SweepRow row;
        row.method = key.first;
        row.lambda = key.second;
        row.runs = g.runs;
        row.failed = g.failed;
        const auto acc = describe(g.acc), eo = describe(g.eo), eop = describe(g.eop);
        row.accuracy_mean = acc.mean;
        row.accuracy_std = acc.std;
        row.eo_abs_mean = eo.mean;
        row.eo_abs_std = eo.std;
        row.eop_mean = eop.mean;
        row.eop_std = eop.std;
        row.eop_defined = eop.n;
        rows.push_back(row);
    }
    return rows;
}

SweepResult sweep(const ExperimentConfig& config, std::span<const double> lambdas) {
    config.validate();
    std::vector<double> grid(lambdas.begin(), lambdas.end());
    if (grid.empty()) grid.push_back(config.lambda);
    struct Job {
        double lambda;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (double l : grid) {
        for (auto s : config.seeds) jobs.push_back({l, s});
    }

    SweepResult result;
    result.runs.resize(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < jobs.size(); k = next++) {
            ExperimentConfig c = config;
            c.lambda = jobs[k].lambda;
            result.runs[k] = run_method(c, jobs[k].seed);
            log_info(std::string(method_name(c.method)) + " lambda " + std::to_string(c.lambda) + " seed " +
                     std::to_string(jobs[k].seed) + ": " + result.runs[k].summary.status);
        }
    };
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.jobs), jobs.size());
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }

    std::vector<RunSummary> summaries;
    for (const auto& r : result.runs) summaries.push_back(r.summary);
    result.table = aggregate(summaries);
    return result;
}

void print_table(std::ostream& out, std::span<const SweepRow> rows) {
    out << std::left << std::setw(22) << "method" << std::setw(8) << "lambda" << std::setw(6) << "runs"
        << std::setw(20) << "accuracy" << std::setw(20) << "|dEO|" << "EOP\n";
    out << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        std::ostringstream acc, eo, eop;
        acc << std::fixed << std::setprecision(4) << r.accuracy_mean << " +- " << r.accuracy_std;
        eo << std::fixed << std::setprecision(4) << r.eo_abs_mean << " +- " << r.eo_abs_std;
        eop << std::fixed << std::setprecision(4) << r.eop_mean << " +- " << r.eop_std;
        out << std::setw(22) << r.method << std::setw(8) << std::setprecision(3) << r.lambda << std::setw(6)
            << (r.runs - r.failed) << std::setw(20) << acc.str() << std::setw(20) << eo.str() << eop.str();
        if (r.failed) out << "  (" << r.failed << " failed)";
        out << '\n';
    }
    out.unsetf(std::ios::fixed);
}

}  // namespace apod::orchestrator
