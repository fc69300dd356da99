#include "apod/fairness.hpp"
#include "apod/orchestrator.hpp"
#include "apod/selection.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace apod;
namespace orch = apod::orchestrator;

namespace {

py::object rate(const fairness::Rate& r) { return r ? py::cast(*r) : py::none(); }

py::dict report_dict(const fairness::FairnessReport& r) {
    py::dict d;
    d["accuracy"] = r.accuracy;
    d["n"] = r.n;
    d["eop"] = rate(r.eop);
    d["delta_tpr"] = rate(r.delta_tpr);
    d["delta_fpr"] = rate(r.delta_fpr);
    d["delta_eo_signed"] = rate(r.delta_eo_signed);
    d["delta_eo_abs"] = rate(r.delta_eo_abs);
    return d;
}

py::list table(const fairness::PerGroupClass<fairness::Rate>& t) {
    py::list out;
    for (int a = 0; a < 2; ++a) out.append(py::make_tuple(rate(t[a][0]), rate(t[a][1])));
    return out;
}

std::string to_config_value(const py::handle& v) {
    if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "true" : "false";
    if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
        std::string s;
        for (auto item : v) s += (s.empty() ? "" : ",") + py::str(item).cast<std::string>();
        return s;
    }
    return py::str(v).cast<std::string>();
}

orch::ExperimentConfig make_config(const py::dict& options) {
    orch::ExperimentConfig cfg;
    for (auto [k, v] : options) cfg.set(k.cast<std::string>(), to_config_value(v));
    cfg.validate();
    return cfg;
}

py::dict summary_dict(const orch::RunSummary& s) {
    py::dict d;
    d["method"] = s.method;
    d["dataset"] = s.dataset;
    d["lambda"] = s.lambda;
    d["seed"] = s.seed;
    d["status"] = s.status;
    d["error"] = s.error;
    d["budget"] = s.budget;
    d["spent"] = s.spent;
    d["iterations"] = s.iterations;
    d["selected_iteration"] = s.selected_iteration;
    d["metric"] = metric_name(s.metric);
    d["seconds"] = s.seconds;
    d["test"] = report_dict(s.test);
    py::dict audit;
    audit["reveal_reads"] = s.audit.reveal_reads;
    audit["seed_reads"] = s.audit.seed_reads;
    audit["evaluation_reads"] = s.audit.evaluation_reads;
    audit["diagnostic_reads"] = s.audit.diagnostic_reads;
    audit["violations"] = s.audit.violations;
    d["audit"] = audit;
    return d;
}

py::dict run_dict(const orch::RunResult& r) {
    py::dict d;
    d["summary"] = summary_dict(r.summary);
    py::list its;
    for (const auto& it : r.iterations) {
        py::dict i;
        i["iteration"] = it.iteration;
        i["spent"] = it.spent;
        i["annotated"] = it.annotated;
        i["unannotated"] = it.unannotated;
        i["delta_cover_all"] = it.coverage_all;
        i["test"] = report_dict(it.test);
        its.append(i);
    }
    d["iterations"] = its;
    d["annotated"] = r.annotated;
    d["coverage"] = [&] {
        std::vector<double> v;
        for (const auto& c : r.trace.coverage) v.push_back(c.delta_all);
        return v;
    }();
    d["trace_violations"] = r.trace.violations();
    d["run_dir"] = r.run_dir.string();
    return d;
}

py::list rows_list(const std::vector<orch::SweepRow>& rows) {
    py::list out;
    for (const auto& r : rows) {
        py::dict d;
        d["method"] = r.method;
        d["lambda"] = r.lambda;
        d["runs"] = r.runs;
        d["failed"] = r.failed;
        d["accuracy_mean"] = r.accuracy_mean;
        d["accuracy_std"] = r.accuracy_std;
        d["eo_abs_mean"] = r.eo_abs_mean;
        d["eo_abs_std"] = r.eo_abs_std;
        d["eop_mean"] = r.eop_mean;
        d["eop_std"] = r.eop_std;
        out.append(d);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_apod, m) {
    m.doc() = "Fairness-aware debiasing with a limited sensitive-attribute annotation budget";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
    py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
    py::register_exception<selection::SelectionError>(m, "SelectionError", PyExc_RuntimeError);

    m.def("set_log_level", [](const std::string& level) {
        if (level == "quiet") set_log_level(LogLevel::quiet);
        else if (level == "warning") set_log_level(LogLevel::warning);
        else if (level == "info") set_log_level(LogLevel::info);
        else throw ConfigError("log level must be quiet, warning or info");
    });

    // fairness
    m.def(
        "fairness_report",
        [](std::vector<int> pred, std::vector<int> y, std::vector<int> a) { return report_dict(fairness::report(pred, y, a)); },
        py::arg("predictions"), py::arg("labels"), py::arg("sensitive"));
    m.def(
        "group_rates",
        [](std::vector<int> pred, std::vector<int> y, std::vector<int> a) {
            const auto r = fairness::compute_rates(pred, y, a);
            py::dict d;
            d["tpr"] = py::make_tuple(rate(r.tpr[0]), rate(r.tpr[1]));
            d["fpr"] = py::make_tuple(rate(r.fpr[0]), rate(r.fpr[1]));
            d["accuracy"] = table(r.acc);
            d["centralized"] = table(r.centralized);
            return d;
        },
        py::arg("predictions"), py::arg("labels"), py::arg("sensitive"));
    m.def(
        "relaxed_rates",
        [](const Matrix& logits, std::vector<int> y, std::vector<int> a) {
            return table(fairness::relaxed_rates(logits, y, a).value);
        },
        py::arg("logits"), py::arg("labels"), py::arg("sensitive"));
    m.def(
        "rate_gap_regularizer",
        [](const Matrix& logits, std::vector<int> y, std::vector<int> a) {
            auto r = fairness::rate_gap_regularizer(logits, y, a);
            return py::make_tuple(r.value, r.grad);
        },
        py::arg("logits"), py::arg("labels"), py::arg("sensitive"),
        "Sum over classes of the squared relaxed rate gap, and its gradient w.r.t. the logits.");

    // selection
    m.def(
        "max_min_select",
        [](std::vector<InstanceId> candidates, std::vector<InstanceId> annotated, const Matrix& embeddings) {
            const auto r = selection::max_min_select(candidates, annotated, embeddings);
            return py::make_tuple(r.id, r.distance);
        },
        py::arg("candidates"), py::arg("annotated"), py::arg("embeddings"));
    m.def(
        "coverage_radius",
        [](std::vector<InstanceId> pool, std::vector<InstanceId> annotated, const Matrix& embeddings) {
            return selection::coverage_radius(pool, annotated, embeddings);
        },
        py::arg("pool"), py::arg("annotated"), py::arg("embeddings"));
    m.def(
        "rank_groups",
        [](const std::vector<std::vector<std::optional<double>>>& acc) {
            if (acc.size() != 2 || acc[0].size() != 2 || acc[1].size() != 2)
                throw ConfigError("accuracy table must be 2 x 2, indexed [a][c]");
            fairness::PerGroupClass<fairness::Rate> t;
            for (int a = 0; a < 2; ++a)
                for (int c = 0; c < 2; ++c) t[a][c] = acc[a][c];
            py::list out;
            for (const auto& g : selection::rank_groups(t)) out.append(py::make_tuple(g.a, g.c, g.centralized));
            return out;
        },
        py::arg("accuracy"), "Subgroups (a, c, centralized accuracy), worst first.");
    m.def("binary_entropy", &selection::binary_entropy, py::arg("p1"));

    // data
    m.def(
        "make_synthetic",
        [](std::array<int, 4> counts, std::uint64_t seed, double spread) {
            data::SyntheticConfig cfg;
            cfg.counts = counts;
            cfg.spread = spread;
            const auto ds = data::make_synthetic(cfg, seed);
            std::vector<InstanceId> all(ds.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<InstanceId>(i);
            std::vector<std::string> split;
            for (auto id : all) split.emplace_back(data::split_name(ds.split_of(id)));
            py::dict d;
            d["features"] = Matrix(ds.features());
            d["labels"] = std::vector<int>(ds.labels().begin(), ds.labels().end());
            d["split"] = split;
            return d;
        },
        py::arg("counts") = std::array<int, 4>{50, 1000, 800, 800}, py::arg("seed") = 0, py::arg("spread") = 1.0,
        "Four Gaussian blobs in subgroup order (a0,y1), (a0,y0), (a1,y1), (a1,y0). Sensitive values stay hidden.");
    m.def("budget_from_ratio", &data::budget_from_ratio, py::arg("ratio"), py::arg("n_train"));

    // pipeline
    m.def("methods", [] {
        std::vector<std::string> out;
        for (auto x : orch::all_methods()) out.emplace_back(orch::method_name(x));
        return out;
    });
    m.def("config_keys", &orch::config_keys);
    m.def(
        "run",
        [](const py::dict& options, std::uint64_t seed) {
            const auto cfg = make_config(options);
            orch::RunResult r;
            {
                py::gil_scoped_release release;
                r = orch::run_method(cfg, seed);
            }
            return run_dict(r);
        },
        py::arg("options") = py::dict(), py::arg("seed") = 0,
        "Run one method. `options` uses the CLI config keys, e.g. {'method': 'apod', 'lambda': 0.5}.");
    m.def(
        "sweep",
        [](const py::dict& options, std::vector<double> lambdas) {
            const auto cfg = make_config(options);
            orch::SweepResult r;
            {
                py::gil_scoped_release release;
                r = orch::sweep(cfg, lambdas);
            }
            py::list runs;
            for (const auto& x : r.runs) runs.append(summary_dict(x.summary));
            py::dict d;
            d["runs"] = runs;
            d["table"] = rows_list(r.table);
            return d;
        },
        py::arg("options"), py::arg("lambdas"));
    m.def(
        "report",
        [](std::vector<std::filesystem::path> files) {
            std::vector<orch::RunSummary> all;
            for (const auto& f : files) {
                auto part = orch::read_summaries(f);
                all.insert(all.end(), part.begin(), part.end());
            }
            return rows_list(orch::aggregate(all));
        },
        py::arg("files"), "Aggregate the summary records of results.jsonl files.");
}
