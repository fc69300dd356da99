#include "apod/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace apod {

FairnessMetric parse_metric(const std::string& s) {
    if (s == "delta_eo" || s == "deo") return FairnessMetric::delta_eo;
    if (s == "eop") return FairnessMetric::eop;
    throw ConfigError("unknown fairness metric '" + s + "' (expected delta_eo or eop)");
}

const char* metric_name(FairnessMetric m) {
    return m == FairnessMetric::eop ? "eop" : "delta_eo";
}

}  // namespace apod

namespace apod::data {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, sep)) {
        auto t = trim(item);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

// Comma-separated fields with optional double quotes ("" escapes a quote).
std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            cells.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(trim(cur));
    return cells;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

SensitiveRule SensitiveRule::parse(const std::string& text) {
    std::istringstream ss(text);
    std::string op;
    ss >> op;
    std::string rest;
    std::getline(ss, rest);
    rest = trim(rest);
    SensitiveRule r;
    if (op == "equals") {
        r.kind = Kind::equals;
        r.value = rest;
        return r;
    }
    if (op == "greater") r.kind = Kind::greater;
    else if (op == "greater_equal") r.kind = Kind::greater_equal;
    else if (op == "less") r.kind = Kind::less;
    else if (op == "less_equal") r.kind = Kind::less_equal;
    else throw ConfigError("unknown sensitive_rule '" + text + "'");
    if (!parse_double(rest, r.threshold)) {
        throw ConfigError("sensitive_rule threshold is not a number: '" + rest + "'");
    }
    return r;
}

int SensitiveRule::apply(const std::string& cell) const {
    if (kind == Kind::equals) return cell == value ? 1 : 0;
    double x = 0.0;
    if (!parse_double(cell, x)) throw InputError("sensitive value '" + cell + "' is not numeric");
    switch (kind) {
        case Kind::greater: return x > threshold ? 1 : 0;
        case Kind::greater_equal: return x >= threshold ? 1 : 0;
        case Kind::less: return x < threshold ? 1 : 0;
        case Kind::less_equal: return x <= threshold ? 1 : 0;
        case Kind::equals: break;
    }
    return 0;
}

DatasetSchema DatasetSchema::parse(std::istream& in) {
    DatasetSchema schema;
    std::string line;
    int lineno = 0;
    bool have_rule = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("schema line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "name") schema.name = value;
        else if (key == "target") schema.target = value;
        else if (key == "positive") schema.positive_value = value;
        else if (key == "sensitive") schema.sensitive = value;
        else if (key == "sensitive_rule") {
            schema.rule = SensitiveRule::parse(value);
            have_rule = true;
        } else if (key == "missing") schema.missing_token = value;
        else if (key == "numeric" || key == "categorical") {
            const auto kind = key == "numeric" ? ColumnKind::numeric : ColumnKind::categorical;
            for (auto& c : split_list(value, ',')) schema.columns.emplace_back(std::move(c), kind);
        } else if (key == "budget_ratio") schema.budget_ratio = std::stod(value);
        else if (key == "metric") schema.metric = parse_metric(value);
        else if (key == "embedding_dim") schema.embedding_dim = std::stoi(value);
        else if (key == "hidden_dim") schema.hidden_dim = std::stoi(value);
        else if (key == "head_layers") schema.head_layers = std::stoi(value);
        else throw ConfigError("schema line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (schema.target.empty() || schema.sensitive.empty() || schema.positive_value.empty() || !have_rule) {
        throw ConfigError("schema needs target, positive, sensitive and sensitive_rule");
    }
    if (schema.columns.empty()) throw ConfigError("schema declares no feature columns");
    if (!(schema.budget_ratio > 0.0 && schema.budget_ratio <= 1.0)) {
        throw ConfigError("budget_ratio must be in (0, 1]");
    }
    return schema;
}

DatasetSchema DatasetSchema::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open schema " + path.string());
    return parse(in);
}

TabularDataset::TabularDataset(std::string name, Matrix features, std::vector<int> labels,
                               std::vector<int> sensitive, std::vector<Split> splits)
    : name_(std::move(name)),
      features_(std::move(features)),
      labels_(std::move(labels)),
      sensitive_(std::move(sensitive)),
      splits_(std::move(splits)) {
    const auto n = labels_.size();
    if (static_cast<std::size_t>(features_.rows()) != n || sensitive_.size() != n || splits_.size() != n) {
        throw ConfigError("dataset arrays are not aligned");
    }
    if (!features_.allFinite()) throw InputError("dataset features contain non-finite values");
    for (std::size_t i = 0; i < n; ++i) {
        if ((labels_[i] != 0 && labels_[i] != 1) || (sensitive_[i] != 0 && sensitive_[i] != 1)) {
            throw InputError("labels and sensitive attributes must be binary");
        }
    }
}

Matrix TabularDataset::rows(std::span<const InstanceId> ids) const {
    Matrix out(static_cast<Eigen::Index>(ids.size()), features_.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features_.row(ids[i]);
    return out;
}

std::vector<InstanceId> TabularDataset::ids(Split s) const {
    std::vector<InstanceId> out;
    for (std::size_t i = 0; i < splits_.size(); ++i) {
        if (splits_[i] == s) out.push_back(static_cast<InstanceId>(i));
    }
    return out;
}

std::vector<int> TabularDataset::labels_of(std::span<const InstanceId> ids) const {
    std::vector<int> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(label(id));
    return out;
}

std::vector<Split> assign_splits(std::size_t n, const SplitFractions& f, std::uint64_t seed) {
    if (f.train <= 0.0 || f.val < 0.0 || f.test < 0.0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
        throw ConfigError("split fractions must be non-negative and sum to 1");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::floor(f.train * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::floor(f.val * static_cast<double>(n)));
    std::vector<Split> splits(n, Split::test);
    for (std::size_t k = 0; k < n; ++k) {
        if (k < n_train) splits[order[k]] = Split::train;
        else if (k < n_train + n_val) splits[order[k]] = Split::val;
    }
    return splits;
}

TabularDataset load_tabular(const std::filesystem::path& path, const DatasetSchema& schema,
                            const SplitFractions& fractions, std::uint64_t split_seed) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open data file " + path.string());
    return load_tabular(in, schema, fractions, split_seed);
}

TabularDataset load_tabular(std::istream& in, const DatasetSchema& schema,
                            const SplitFractions& fractions, std::uint64_t split_seed) {
    std::string line;
    if (!std::getline(in, line)) throw InputError("data file is empty");
    const auto header = split_csv_line(line);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < header.size(); ++i) index[header[i]] = i;
    auto column_index = [&](const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("column '" + name + "' not found in header");
        return it->second;
    };
    const std::size_t target_col = column_index(schema.target);
    const std::size_t sensitive_col = column_index(schema.sensitive);
    std::vector<std::size_t> feature_cols;
    for (const auto& [name, kind] : schema.columns) feature_cols.push_back(column_index(name));

    LoadStats stats;
    std::vector<std::vector<std::string>> rows;
    std::vector<int> labels;
    std::vector<int> sensitive;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        ++stats.rows_read;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw InputError("line " + std::to_string(lineno) + ": expected " +
                             std::to_string(header.size()) + " fields, got " +
                             std::to_string(cells.size()));
        }
        bool missing = false;
        if (!schema.missing_token.empty()) {
            missing = cells[target_col] == schema.missing_token ||
                      cells[sensitive_col] == schema.missing_token ||
                      std::any_of(feature_cols.begin(), feature_cols.end(),
                                  [&](std::size_t c) { return cells[c] == schema.missing_token; });
        }
        if (missing || cells[target_col].empty() || cells[sensitive_col].empty()) {
            ++stats.rows_rejected_missing;
            continue;
        }
        for (std::size_t k = 0; k < feature_cols.size(); ++k) {
            double x = 0.0;
            if (schema.columns[k].second == ColumnKind::numeric && !parse_double(cells[feature_cols[k]], x)) {
                throw InputError("line " + std::to_string(lineno) + ": column '" + schema.columns[k].first +
                                 "' is not numeric: '" + cells[feature_cols[k]] + "'");
            }
        }
        labels.push_back(cells[target_col] == schema.positive_value ? 1 : 0);
        try {
            sensitive.push_back(schema.rule.apply(cells[sensitive_col]));
        } catch (const InputError& e) {
            throw InputError("line " + std::to_string(lineno) + ": " + e.what());
        }
        rows.push_back(std::move(cells));
    }
    if (rows.empty()) throw InputError("data file has no usable rows");

    const std::size_t n = rows.size();
    auto splits = assign_splits(n, fractions, split_seed);

    // Fit encoders and scalers on the train split only.
    struct Encoder {
        ColumnKind kind;
        std::vector<std::string> vocab;  // sorted
        double mean = 0.0, stddev = 0.0;
        int offset = 0;
    };
    std::vector<Encoder> encoders;
    int dim = 0;
    Standardizer scaler;
    std::vector<std::string> feature_names;
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
        Encoder e;
        e.kind = schema.columns[k].second;
        e.offset = dim;
        const auto col = feature_cols[k];
        if (e.kind == ColumnKind::categorical) {
            std::set<std::string> values;
            for (std::size_t i = 0; i < n; ++i) {
                if (splits[i] == Split::train) values.insert(rows[i][col]);
            }
            e.vocab.assign(values.begin(), values.end());
            for (const auto& v : e.vocab) feature_names.push_back(schema.columns[k].first + "=" + v);
            dim += static_cast<int>(e.vocab.size());
        } else {
            double sum = 0.0, sumsq = 0.0;
            std::size_t count = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (splits[i] != Split::train) continue;
                double x = 0.0;
                parse_double(rows[i][col], x);
                sum += x;
                ++count;
            }
            e.mean = count ? sum / static_cast<double>(count) : 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (splits[i] != Split::train) continue;
                double x = 0.0;
                parse_double(rows[i][col], x);
                sumsq += (x - e.mean) * (x - e.mean);
            }
            e.stddev = count ? std::sqrt(sumsq / static_cast<double>(count)) : 0.0;
            scaler.columns.push_back(schema.columns[k].first);
            scaler.mean.push_back(e.mean);
            scaler.stddev.push_back(e.stddev);
            feature_names.push_back(schema.columns[k].first);
            dim += 1;
        }
        encoders.push_back(std::move(e));
    }

    Matrix features = Matrix::Zero(static_cast<Eigen::Index>(n), dim);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        for (std::size_t k = 0; k < encoders.size(); ++k) {
            const auto& e = encoders[k];
            const auto& cell = rows[i][feature_cols[k]];
            if (e.kind == ColumnKind::categorical) {
                auto it = std::lower_bound(e.vocab.begin(), e.vocab.end(), cell);
                if (it != e.vocab.end() && *it == cell) {
                    features(r, e.offset + static_cast<int>(it - e.vocab.begin())) = 1.0;
                } else {
                    ++stats.unknown_categories;
                }
            } else {
                double x = 0.0;
                parse_double(cell, x);
                features(r, e.offset) = e.stddev > 0.0 ? (x - e.mean) / e.stddev : 0.0;
            }
        }
    }
    if (stats.unknown_categories > 0) {
        log_warning(std::to_string(stats.unknown_categories) +
                    " categorical values unseen in the train split were encoded as all-zeros");
    }

    TabularDataset ds(schema.name, std::move(features), std::move(labels), std::move(sensitive),
                      std::move(splits));
    ds.feature_names = std::move(feature_names);
    ds.scaler = std::move(scaler);
    ds.stats = stats;
    return ds;
}

TabularDataset make_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
    for (int c : config.counts) {
        if (c < 1) throw ConfigError("synthetic subgroup counts must be >= 1");
    }
    if (!(config.spread > 0.0)) throw ConfigError("synthetic spread must be positive");
    const auto& m = config.means;
    if (m[0] == m[1] || m[2] == m[3]) {
        throw ConfigError("synthetic class means must differ within each group");
    }
    constexpr std::array<int, 4> group_a{0, 0, 1, 1};
    constexpr std::array<int, 4> group_y{1, 0, 1, 0};

    const std::size_t n = static_cast<std::size_t>(
        std::accumulate(config.counts.begin(), config.counts.end(), 0));
    Matrix features(static_cast<Eigen::Index>(n), 2);
    std::vector<int> labels;
    std::vector<int> sensitive;
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, config.spread);
    Eigen::Index row = 0;
    for (int g = 0; g < 4; ++g) {
        for (int k = 0; k < config.counts[static_cast<std::size_t>(g)]; ++k, ++row) {
            features(row, 0) = m[static_cast<std::size_t>(g)][0] + noise(rng);
            features(row, 1) = m[static_cast<std::size_t>(g)][1] + noise(rng);
            labels.push_back(group_y[static_cast<std::size_t>(g)]);
            sensitive.push_back(group_a[static_cast<std::size_t>(g)]);
        }
    }
    auto splits = assign_splits(n, config.fractions, seed ^ 0x9e3779b97f4a7c15ULL);
    TabularDataset ds("synthetic", std::move(features), std::move(labels), std::move(sensitive),
                      std::move(splits));
    ds.feature_names = {"x0", "x1"};
    ds.stats.rows_read = n;
    return ds;
}

AnnotationLedger::AnnotationLedger(std::int64_t budget) : budget_(budget) {
    if (budget < 0) throw ConfigError("annotation budget must be non-negative");
}

std::vector<InstanceId> AnnotationLedger::all_ids() const {
    std::vector<InstanceId> out = seeds_;
    out.insert(out.end(), annotated_.begin(), annotated_.end());
    return out;
}

int AnnotationLedger::sensitive_of(InstanceId id) const {
    auto it = values_.find(id);
    if (it == values_.end()) throw StateError("instance " + std::to_string(id) + " is not annotated");
    return it->second;
}

void AnnotationLedger::record(InstanceId id, int a, bool seed) {
    values_.emplace(id, a);
    (seed ? seeds_ : annotated_).push_back(id);
}

std::int64_t budget_from_ratio(double ratio, std::size_t n_train) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("budget ratio must be in [0, 1]");
    // The epsilon absorbs products like 0.2 * 5 landing just below an integer.
    return static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n_train) + 1e-9));
}

int SensitiveOracle::reveal(AnnotationLedger& ledger, InstanceId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= dataset_->size()) {
        throw InputError("instance id " + std::to_string(id) + " out of range");
    }
    if (dataset_->split_of(id) != Split::train) {
        throw InputError("instance " + std::to_string(id) + " is not in the annotatable train pool");
    }
    if (ledger.contains(id)) {
        throw StateError("instance " + std::to_string(id) + " is already annotated");
    }
    if (ledger.exhausted()) {
        throw BudgetExhausted("annotation budget of " + std::to_string(ledger.budget()) + " exhausted");
    }
    const int a = dataset_->sensitive_[static_cast<std::size_t>(id)];
    ++audit_.reveal_reads;
    ledger.record(id, a, false);
    return a;
}

std::vector<InstanceId> SensitiveOracle::seed(AnnotationLedger& ledger, int per_subgroup, Rng& rng) {
    std::array<std::vector<InstanceId>, 2> pools;
    for (auto id : dataset_->ids(Split::train)) {
        if (!ledger.contains(id)) pools[static_cast<std::size_t>(dataset_->label(id))].push_back(id);
    }
    std::vector<InstanceId> chosen;
    const auto per_class = static_cast<std::size_t>(2 * std::max(per_subgroup, 0));
    for (auto& pool : pools) {
        const auto take = std::min(pool.size(), per_class);
        for (std::size_t k = 0; k < take; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
            std::swap(pool[k], pool[pick(rng)]);
            const int a = dataset_->sensitive_[static_cast<std::size_t>(pool[k])];
            ++audit_.seed_reads;
            ledger.record(pool[k], a, true);
            chosen.push_back(pool[k]);
        }
    }
    return chosen;
}

std::vector<int> SensitiveOracle::evaluation_values(std::span<const InstanceId> ids) {
    std::vector<int> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (dataset_->split_of(id) == Split::train) {
            ++audit_.violations;
            throw StateError("evaluation read of train instance " + std::to_string(id));
        }
        out.push_back(dataset_->sensitive_[static_cast<std::size_t>(id)]);
    }
    audit_.evaluation_reads += ids.size();
    return out;
}

std::vector<int> SensitiveOracle::diagnostic_values(std::span<const InstanceId> ids) {
    std::vector<int> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(dataset_->sensitive_.at(static_cast<std::size_t>(id)));
    audit_.diagnostic_reads += ids.size();
    return out;
}

}  // namespace apod::data
