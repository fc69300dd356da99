#include "apod/data.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>

using namespace apod;
using namespace apod::data;

namespace {

DatasetSchema toy_schema() {
    std::istringstream in(R"(# toy
name = toy
target = outcome
positive = yes
sensitive = age
sensitive_rule = greater 35
missing = ?
numeric = income, constant
categorical = color
budget_ratio = 0.5
metric = eop
)");
    return DatasetSchema::parse(in);
}

std::string toy_csv() {
    std::string s = "outcome,age,income,constant,color\n";
    const char* colors[] = {"red", "blue", "\"green\""};
    for (int i = 0; i < 40; ++i) {
        s += (i % 3 == 0 ? "yes," : "no,") + std::to_string(20 + i) + "," + std::to_string(1000 + 37 * i) + ",5," +
             colors[i % 3] + "\n";
    }
    s += "no,50,?,5,red\n";
    s += "yes,?,10,5,blue\n";
    return s;
}

}  // namespace

TEST_CASE("schema parsing") {
    const auto schema = toy_schema();
    CHECK(schema.target == "outcome");
    CHECK(schema.columns.size() == 3);
    CHECK(schema.metric == FairnessMetric::eop);
    CHECK(schema.rule.apply("36") == 1);
    CHECK(schema.rule.apply("35") == 0);
    std::istringstream bad("target = y\nbogus = 1\n");
    CHECK_THROWS_AS(DatasetSchema::parse(bad), ConfigError);
    CHECK(SensitiveRule::parse("equals Male").apply("Male") == 1);
    CHECK(SensitiveRule::parse("equals Male").apply("Female") == 0);
    CHECK_THROWS_AS(SensitiveRule::parse("between 3"), ConfigError);
}

TEST_CASE("tabular loading: encoding, rejection, standardization") {
    std::istringstream in(toy_csv());
    const auto ds = load_tabular(in, toy_schema(), {}, 3);
    CHECK(ds.stats.rows_read == 42);
    CHECK(ds.stats.rows_rejected_missing == 2);
    CHECK(ds.size() == 40);
    // income, constant, three one-hot colors
    CHECK(ds.feature_dim() == 5);
    CHECK(ds.features().allFinite());

    const auto train = ds.ids(Split::train);
    CHECK(train.size() == 10);
    CHECK(ds.ids(Split::val).size() == 10);
    CHECK(ds.ids(Split::test).size() == 20);

    const Matrix xt = ds.rows(train);
    CHECK(std::abs(xt.col(0).mean()) < 1e-12);
    // constant column maps to zero
    CHECK(ds.features().col(1).cwiseAbs().maxCoeff() == 0.0);
    // each row has exactly one active color
    for (Eigen::Index r = 0; r < ds.features().rows(); ++r) {
        CHECK(ds.features().row(r).tail(3).sum() == doctest::Approx(1.0));
    }
}

TEST_CASE("loading twice is idempotent and scaler ignores test rows") {
    std::istringstream a(toy_csv()), b(toy_csv());
    const auto d1 = load_tabular(a, toy_schema(), {}, 5);
    const auto d2 = load_tabular(b, toy_schema(), {}, 5);
    CHECK(d1.features() == d2.features());

    // perturb every test row's income; train statistics must not move
    std::string csv = toy_csv();
    std::istringstream c(csv);
    const auto base = load_tabular(c, toy_schema(), {}, 5);
    std::stringstream edited;
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    edited << line << '\n';
    int row = 0;
    while (std::getline(lines, line)) {
        if (row < 40 && base.split_of(row) == Split::test) {
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            cells[2] = "999999";
            line = cells[0] + "," + cells[1] + "," + cells[2] + "," + cells[3] + "," + cells[4];
        }
        edited << line << '\n';
        ++row;
    }
    const auto moved = load_tabular(edited, toy_schema(), {}, 5);
    CHECK(moved.scaler.mean == base.scaler.mean);
    CHECK(moved.scaler.stddev == base.scaler.stddev);
}

TEST_CASE("malformed rows name their line") {
    std::istringstream short_row("outcome,age,income,constant,color\nyes,40,1,5\n");
    try {
        load_tabular(short_row, toy_schema(), {}, 0);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::istringstream text_number("outcome,age,income,constant,color\nyes,40,1,5,red\nno,30,abc,5,red\n");
    try {
        load_tabular(text_number, toy_schema(), {}, 0);
        FAIL("expected InputError");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("categories unseen in the train split encode as zeros") {
    std::string csv = "outcome,age,income,constant,color\n";
    for (int i = 0; i < 200; ++i) csv += "no," + std::to_string(30 + i % 20) + ",1,5,red\n";
    csv += "yes,40,1,5,purple\n";
    std::istringstream in(csv);
    // find a split seed where the purple row is not in train
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::istringstream again(csv);
        const auto ds = load_tabular(again, toy_schema(), {}, seed);
        if (ds.split_of(200) == Split::train) continue;
        CHECK(ds.stats.unknown_categories == 1);
        CHECK(ds.features().row(200).tail(ds.feature_dim() - 2).sum() == 0.0);
        return;
    }
    FAIL("no suitable split seed");
}

TEST_CASE("split assignment follows fractions") {
    const auto s = assign_splits(1000, {}, 42);
    CHECK(std::count(s.begin(), s.end(), Split::train) == 250);
    CHECK(std::count(s.begin(), s.end(), Split::val) == 250);
    CHECK(std::count(s.begin(), s.end(), Split::test) == 500);
    CHECK(assign_splits(1000, {}, 42) == s);
    CHECK(assign_splits(1000, {}, 43) != s);
    CHECK_THROWS_AS(assign_splits(10, {0.5, 0.6, 0.1}, 0), ConfigError);
}

TEST_CASE("synthetic generator") {
    SyntheticConfig cfg;
    cfg.counts = {5, 100, 80, 80};
    const auto a = make_synthetic(cfg, 9);
    const auto b = make_synthetic(cfg, 9);
    CHECK(a.size() == 265);
    CHECK(a.features() == b.features());
    CHECK(std::vector<int>(a.labels().begin(), a.labels().end()) ==
          std::vector<int>(b.labels().begin(), b.labels().end()));
    // positives are a small minority of group 0
    SensitiveOracle oracle(a);
    std::vector<InstanceId> all(a.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<InstanceId>(i);
    const auto s = oracle.diagnostic_values(all);
    int g0_pos = 0, g0 = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (s[i] == 0) {
            ++g0;
            g0_pos += a.label(static_cast<InstanceId>(i));
        }
    }
    CHECK(g0 == 105);
    CHECK(g0_pos == 5);
    cfg.counts[0] = 0;
    CHECK_THROWS_AS(make_synthetic(cfg, 1), ConfigError);
}

TEST_CASE("budget from ratio") {
    CHECK(budget_from_ratio(0.004, 7540) == 30);
    CHECK(budget_from_ratio(0.2, 5) == 1);
    CHECK(budget_from_ratio(0.0, 100) == 0);
    CHECK_THROWS_AS(budget_from_ratio(1.5, 10), ConfigError);
}

TEST_CASE("ledger and oracle") {
    SyntheticConfig cfg;
    cfg.counts = {20, 40, 40, 40};
    const auto ds = make_synthetic(cfg, 1);
    SensitiveOracle oracle(ds);
    const auto train = ds.ids(Split::train);
    const auto test = ds.ids(Split::test);

    SUBCASE("reveal counts and refuses past the budget") {
        AnnotationLedger ledger(3);
        oracle.reveal(ledger, train[0]);
        CHECK(ledger.spent() == 1);
        oracle.reveal(ledger, train[1]);
        oracle.reveal(ledger, train[2]);
        CHECK(ledger.exhausted());
        CHECK_THROWS_AS(oracle.reveal(ledger, train[3]), BudgetExhausted);
        CHECK(ledger.spent() == 3);
        CHECK(oracle.audit().reveal_reads == 3);
    }
    SUBCASE("duplicates and non-train ids are rejected") {
        AnnotationLedger ledger(5);
        oracle.reveal(ledger, train[0]);
        CHECK_THROWS_AS(oracle.reveal(ledger, train[0]), StateError);
        CHECK_THROWS_AS(oracle.reveal(ledger, test[0]), InputError);
    }
    SUBCASE("evaluation reads of train ids are violations") {
        CHECK_NOTHROW(oracle.evaluation_values(test));
        const std::vector<InstanceId> bad{train[0]};
        CHECK_THROWS_AS(oracle.evaluation_values(bad), StateError);
        CHECK(oracle.audit().violations == 1);
    }
    SUBCASE("seeds are free, label-stratified and reproducible") {
        AnnotationLedger l1(0), l2(0);
        Rng r1(4), r2(4);
        SensitiveOracle o2(ds);
        const auto s1 = oracle.seed(l1, 2, r1);
        const auto s2 = o2.seed(l2, 2, r2);
        CHECK(s1 == s2);
        CHECK(s1.size() == 8);
        CHECK(l1.spent() == 0);
        CHECK(l1.size() == 8);
        int positives = 0;
        for (auto id : s1) positives += ds.label(id);
        CHECK(positives == 4);
        CHECK(oracle.audit().seed_reads == 8);
        CHECK(std::set<InstanceId>(s1.begin(), s1.end()).size() == 8);
    }
}

TEST_CASE("adult file has the expected row count") {
    const char* env = std::getenv("APOD_ADULT_CSV");
    std::filesystem::path csv = env ? env : APOD_SOURCE_DIR "/data/adult.csv";
    if (!std::filesystem::exists(csv)) {
        MESSAGE("adult.csv not present; skipping");
        return;
    }
    const auto schema = DatasetSchema::load(APOD_SOURCE_DIR "/schemas/adult.schema");
    const auto ds = load_tabular(csv, schema, {}, 0);
    CHECK(ds.size() == 30162);
    CHECK(ds.ids(Split::train).size() == 7540);
    CHECK(budget_from_ratio(schema.budget_ratio, ds.ids(Split::train).size()) == 30);
}
