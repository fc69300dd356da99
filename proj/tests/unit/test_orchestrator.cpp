#include "apod/orchestrator.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace apod;
using namespace apod::orchestrator;

namespace {

ExperimentConfig quick(Method m = Method::apod) {
    ExperimentConfig c;
    c.method = m;
    c.synthetic.counts = {20, 200, 160, 160};
    c.pretrain_epochs = 5;
    c.pod_epochs = 2;
    c.sensitive_epochs = 3;
    c.batch_size = 64;
    c.lr = 5e-3;
    c.budget = 4;
    c.embedding_dim = 8;
    c.hidden_dim = 8;
    return c;
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("apod_unit_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("method names round trip") {
    for (auto m : all_methods()) CHECK(parse_method(method_name(m)) == m);
    CHECK_THROWS_AS(parse_method("nope"), ConfigError);
    CHECK_FALSE(is_budgeted(Method::vanilla));
    CHECK(is_budgeted(Method::fal));
}

TEST_CASE("config parsing and validation") {
    std::istringstream in(R"(# comment
method = pod_rs
lambda = 0.5
seeds = 1, 2, 3
budget = 7
synthetic_counts = 10, 20, 30, 40
)");
    const auto c = ExperimentConfig::parse(in);
    CHECK(c.method == Method::pod_rs);
    CHECK(c.lambda == 0.5);
    CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(*c.budget == 7);
    CHECK(c.synthetic.counts[3] == 40);

    ExperimentConfig bad;
    CHECK_THROWS_AS(bad.set("unknown_key", "1"), ConfigError);
    CHECK_THROWS_AS(bad.set("lambda", "abc"), ConfigError);
    bad.lambda = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    ExperimentConfig tab;
    tab.dataset = "adult";
    CHECK_THROWS_AS(tab.validate(), ConfigError);
    for (const auto& [key, help] : config_keys()) CHECK_FALSE(help.empty());
}

TEST_CASE("budget 1 gives one selection and two POD phases") {
    auto c = quick();
    c.budget = 1;
    c.output_dir = scratch("budget1");
    const auto r = run_method(c, 0);
    REQUIRE(r.summary.status == "ok");
    CHECK(r.summary.spent == 1);
    CHECK(r.iterations.size() == 2);
    CHECK(r.trace.records.size() == 1);
    CHECK(r.head_scores.size() == 2);
    std::size_t heads = 0;
    for (const auto& e : std::filesystem::directory_iterator(r.run_dir / "checkpoints")) heads += e.is_regular_file();
    CHECK(heads == 2);
    CHECK(r.summary.audit.violations == 0);
    CHECK(r.summary.audit.reveal_reads == 1);
}

TEST_CASE("APOD run: frozen body, budget parity, sound trace, artifacts") {
    auto c = quick();
    c.output_dir = scratch("apod");
    c.dump_embeddings = true;
    const auto r = run_method(c, 3);
    REQUIRE(r.summary.status == "ok");
    CHECK(r.body_digest_before == r.body_digest_after);
    CHECK(r.summary.spent == 4);
    CHECK(r.summary.audit.reveal_reads == 4);
    CHECK(r.iterations.size() == 5);
    CHECK(r.trace.violations().empty());
    CHECK(r.trace.coverage.size() == 5);
    for (const auto& rec : r.trace.records) CHECK(rec.n_after >= rec.n_before);
    CHECK(std::set<InstanceId>(r.annotated.begin(), r.annotated.end()).size() == r.annotated.size());

    std::ifstream ledger(r.run_dir / "ledger.txt");
    std::string header;
    std::getline(ledger, header);
    CHECK(header == "# id a kind");
    int budget_rows = 0;
    for (std::string line; std::getline(ledger, line);) budget_rows += line.ends_with(" budget");
    CHECK(budget_rows == 4);

    std::ifstream dump(r.run_dir / "embeddings.txt");
    std::getline(dump, header);
    CHECK(header.starts_with("# id label split annotated v0"));
    std::size_t rows = 0, marked = 0;
    for (std::string line; std::getline(dump, line); ++rows) {
        std::istringstream ls(line);
        long id;
        int label, ann;
        std::string split;
        ls >> id >> label >> split >> ann;
        marked += ann;
    }
    CHECK(rows == 540);
    CHECK(marked == r.annotated.size());
}

TEST_CASE("same seed, same run") {
    const auto a = run_method(quick(), 5);
    const auto b = run_method(quick(), 5);
    CHECK(a.annotated == b.annotated);
    CHECK(a.final_test_predictions == b.final_test_predictions);
}

TEST_CASE("dispatch and aliases") {
    SUBCASE("vanilla and budget 0 take the single-record path") {
        const auto v = run_method(quick(Method::vanilla), 1);
        REQUIRE(v.summary.status == "ok");
        CHECK(v.iterations.size() == 1);
        CHECK(v.summary.spent == 0);
        CHECK(v.summary.audit.seed_reads == 0);
        auto zero = quick(Method::apod);
        zero.budget = 0;
        const auto z = run_method(zero, 1);
        CHECK(z.final_test_predictions == v.final_test_predictions);
    }
    SUBCASE("individual-only equals coreset") {
        const auto a = run_method(quick(Method::pod_individual_only), 2);
        const auto b = run_method(quick(Method::pod_ca), 2);
        CHECK(a.annotated == b.annotated);
        CHECK(a.final_test_predictions == b.final_test_predictions);
    }
    SUBCASE("every method completes with matching budget use") {
        for (auto m : all_methods()) {
            CAPTURE(method_name(m));
            const auto r = run_method(quick(m), 0);
            CHECK(r.summary.status == "ok");
            CHECK(r.summary.audit.violations == 0);
            if (is_budgeted(m)) CHECK(r.summary.spent == 4);
            CHECK(r.summary.audit.reveal_reads == static_cast<std::size_t>(r.summary.spent));
        }
    }
}

TEST_CASE("a failing stage is tagged") {
    auto c = quick();
    c.dataset = "adult";
    c.schema_path = "/nonexistent/adult.schema";
    c.data_path = "/nonexistent/adult.csv";
    const auto r = run_method(c, 0);
    CHECK(r.summary.status == "failed:load");
    CHECK_FALSE(r.summary.error.empty());
}

TEST_CASE("results round trip and offline re-aggregation") {
    auto c = quick(Method::pod_rs);
    c.seeds = {0, 1, 2};
    c.jobs = 2;
    const std::vector<double> lambdas{0.5, 1.0};
    const auto sw = sweep(c, lambdas);
    CHECK(sw.runs.size() == 6);
    REQUIRE(sw.table.size() == 2);
    CHECK(sw.table[0].lambda == 0.5);
    CHECK(sw.table[0].runs == 3);

    std::stringstream file;
    for (const auto& r : sw.runs) write_results(file, r);
    const auto back = read_summaries(file);
    REQUIRE(back.size() == 6);
    const auto again = aggregate(back);
    REQUIRE(again.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
        CHECK(again[k].accuracy_mean == doctest::Approx(sw.table[k].accuracy_mean).epsilon(1e-12));
        CHECK(again[k].eo_abs_std == doctest::Approx(sw.table[k].eo_abs_std).epsilon(1e-9));
    }

    // independent recomputation of the sample standard deviation
    std::vector<double> acc;
    for (const auto& s : back)
        if (s.lambda == 0.5) acc.push_back(s.test.accuracy);
    double mean = 0.0;
    for (double a : acc) mean += a / 3.0;
    double var = 0.0;
    for (double a : acc) var += (a - mean) * (a - mean) / 2.0;
    CHECK(again[0].accuracy_std == doctest::Approx(std::sqrt(var)).epsilon(1e-9));

    std::vector<RunSummary> single{back.front()};
    const auto one = aggregate(single);
    CHECK(one.size() == 1);
    CHECK(one[0].accuracy_std == 0.0);
}

TEST_CASE("trace invariant checker flags a growing radius") {
    BoundTrace t;
    selection::CoverageStats a, b;
    a.delta_all = 1.0;
    b.delta_all = 2.0;
    t.coverage = {a, b};
    CHECK_FALSE(t.violations().empty());
}

TEST_CASE("turning the coverage trace off removes diagnostic reads and changes nothing else") {
    auto on = quick();
    auto off = quick();
    off.trace_bounds = false;
    const auto a = run_method(on, 6);
    const auto b = run_method(off, 6);
    CHECK(a.summary.audit.diagnostic_reads > 0);
    CHECK(b.summary.audit.diagnostic_reads == 0);
    CHECK(b.trace.coverage.empty());
    CHECK(a.annotated == b.annotated);
    CHECK(a.final_test_predictions == b.final_test_predictions);
}
