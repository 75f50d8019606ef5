#pragma once

// Operator-facing layer: run configuration files, result files, and the
// read-only queries (preference, projection, EU, inspect) shared by the CLI
// and the HTTP service.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "experiment.hpp"
#include "kb_io.hpp"
#include "knowledge_base.hpp"
#include "preference.hpp"
#include "random.hpp"
#include "stream.hpp"

namespace ibcl {

/// Simplex tolerance for weights typed by a person or sent by a client.
inline constexpr double kInputSimplexTolerance = 1e-6;
inline constexpr std::size_t kMaxQuerySamples = 100000;

// ---------------------------------------------------------------- run config

struct RunConfig {
    ExperimentConfig experiment;
    std::filesystem::path out_dir;
};

namespace detail {

// Collects every schema problem before giving up.
class ConfigReader {
public:
    const nlohmann::json* field(const nlohmann::json& obj, const std::string& path, const std::string& key,
                                bool required = true) {
        if (!obj.is_object()) return nullptr;
        auto it = obj.find(key);
        if (it == obj.end()) {
            if (required) problems.push_back("missing field: " + join(path, key));
            return nullptr;
        }
        return &*it;
    }

    const nlohmann::json* object(const nlohmann::json& obj, const std::string& path, const std::string& key) {
        const auto* v = field(obj, path, key);
        if (v && !v->is_object()) {
            problems.push_back(join(path, key) + ": expected an object");
            return nullptr;
        }
        return v;
    }

    std::optional<double> number(const nlohmann::json& obj, const std::string& path, const std::string& key,
                                 bool required = true) {
        const auto* v = field(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_number()) {
            problems.push_back(join(path, key) + ": expected a number");
            return std::nullopt;
        }
        return v->get<double>();
    }

    std::optional<std::uint64_t> count(const nlohmann::json& obj, const std::string& path, const std::string& key,
                                       bool required = true) {
        const auto* v = field(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!(v->is_number_unsigned() || (v->is_number_integer() && v->get<long long>() >= 0))) {
            problems.push_back(join(path, key) + ": expected a non-negative integer");
            return std::nullopt;
        }
        return v->get<std::uint64_t>();
    }

    std::optional<std::string> string(const nlohmann::json& obj, const std::string& path, const std::string& key,
                                      bool required = true) {
        const auto* v = field(obj, path, key, required);
        if (!v) return std::nullopt;
        if (!v->is_string()) {
            problems.push_back(join(path, key) + ": expected a string");
            return std::nullopt;
        }
        return v->get<std::string>();
    }

    void check(bool ok, const std::string& what) {
        if (!ok) problems.push_back(what);
    }

    static std::string join(const std::string& path, const std::string& key) {
        return path.empty() ? key : path + "." + key;
    }

    std::vector<std::string> problems;
};

inline std::optional<StreamKind> parse_stream_kind(const std::string& s) {
    if (s == "similar") return StreamKind::similar;
    if (s == "recurring") return StreamKind::recurring;
    if (s == "conflicting") return StreamKind::conflicting;
    return std::nullopt;
}

} // namespace detail

/// Parses a run configuration. Every missing or malformed field is reported
/// in one ValidationError, one problem per line.
inline RunConfig parse_run_config(const nlohmann::json& doc) {
    detail::ConfigReader r;
    RunConfig out;
    ExperimentConfig& cfg = out.experiment;
    if (!doc.is_object()) throw ValidationError("config: expected a JSON object at the top level");

    const auto seed = r.count(doc, "", "seed");
    if (seed) cfg.seed = *seed;

    if (const auto* s = r.object(doc, "", "stream")) {
        const auto type = r.string(*s, "stream", "type");
        if (type && *type == "synthetic") {
            SyntheticStreamSpec spec;
            if (auto v = r.count(*s, "stream", "num_tasks")) spec.num_tasks = *v;
            if (auto v = r.count(*s, "stream", "feature_dim")) spec.feature_dim = *v;
            if (auto v = r.count(*s, "stream", "n_per_task")) spec.n_per_task = *v;
            if (auto v = r.number(*s, "stream", "class_separation", false)) spec.class_separation = *v;
            if (auto v = r.number(*s, "stream", "shift_bound", false)) spec.task_shift_bound = *v;
            if (auto v = r.number(*s, "stream", "mean_radius", false)) spec.mean_radius = *v;
            if (auto v = r.string(*s, "stream", "kind", false)) {
                const auto kind = detail::parse_stream_kind(*v);
                r.check(kind.has_value(), "stream.kind: expected similar, recurring or conflicting");
                if (kind) spec.kind = *kind;
            }
            spec.seed = cfg.seed;
            if (auto v = r.count(*s, "stream", "seed", false)) spec.seed = *v;
            cfg.stream = spec;
        } else if (type && *type == "features") {
            FeatureDirSource src;
            if (auto v = r.string(*s, "stream", "dir")) src.dir = *v;
            if (auto v = r.count(*s, "stream", "num_tasks")) src.num_tasks = *v;
            cfg.stream = src;
        } else if (type) {
            r.check(false, "stream.type: expected \"synthetic\" or \"features\"");
        }
    }

    if (const auto* p = r.object(doc, "", "priors")) {
        const auto m = r.count(*p, "priors", "m");
        if (const auto* stds = r.field(*p, "priors", "stds")) {
            cfg.prior_stds.clear();
            if (!stds->is_array()) {
                r.check(false, "priors.stds: expected an array of numbers");
            } else {
                for (const auto& x : *stds) {
                    if (!x.is_number()) {
                        r.check(false, "priors.stds: expected an array of numbers");
                        break;
                    }
                    cfg.prior_stds.push_back(x.get<double>());
                }
            }
            if (m) r.check(*m == cfg.prior_stds.size(), "priors.m: must equal the number of priors.stds entries");
        }
    }

    if (const auto* t = r.object(doc, "", "train")) {
        if (auto v = r.number(*t, "train", "lr")) cfg.train.learning_rate = *v;
        if (auto v = r.count(*t, "train", "batch")) cfg.train.batch_size = *v;
        if (auto v = r.count(*t, "train", "epochs")) cfg.train.epochs = *v;
        if (auto v = r.count(*t, "train", "mc_samples")) cfg.train.mc_samples = *v;
    }

    if (const auto* d = r.field(doc, "", "d")) {
        if (d->is_string() && d->get<std::string>() == "auto")
            cfg.d.reset();
        else if (d->is_number())
            cfg.d = d->get<double>();
        else
            r.check(false, "d: expected a number or \"auto\"");
    }
    if (auto v = r.number(doc, "", "alpha")) cfg.alpha = *v;
    if (auto v = r.count(doc, "", "K")) cfg.K = *v;
    if (auto v = r.count(doc, "", "models_per_preference")) cfg.models_per_preference = *v;
    if (auto v = r.count(doc, "", "hidden", false)) cfg.hidden_dim = *v;
    if (auto v = r.count(doc, "", "hdr_samples", false)) cfg.hdr_samples = *v;
    if (auto v = r.string(doc, "", "out_dir")) out.out_dir = *v;

    if (r.problems.empty()) {
        try {
            cfg.validate();
        } catch (const ValidationError& e) {
            r.problems.push_back(e.what());
        }
    }
    if (!r.problems.empty()) {
        std::string msg = "config: " + std::to_string(r.problems.size()) + " problem(s)";
        for (const auto& p : r.problems) msg += "\n  " + p;
        throw ValidationError(msg);
    }
    return out;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("config: cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(doc);
}

// --------------------------------------------------------------- run outputs

inline nlohmann::json metrics_to_json(const std::vector<TaskMetrics>& ms) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& m : ms)
        out.push_back({{"task_index", m.task_index},
                       {"avg_acc", m.avg_acc},
                       {"peak_acc", m.peak_acc},
                       {"bwt", m.bwt ? nlohmann::json(*m.bwt) : nlohmann::json(nullptr)}});
    return out;
}

inline nlohmann::json results_to_json(const ExperimentResult& res, const ExperimentConfig& cfg) {
    nlohmann::json acc = nlohmann::json::array();
    for (const auto& row : res.accuracy.acc) {
        nlohmann::json jr = nlohmann::json::array();
        for (const auto& cell : row) {
            nlohmann::json jc = nlohmann::json::array();
            for (const auto& s : cell) jc.push_back({{"max", s.max}, {"mean", s.mean}, {"min", s.min}});
            jr.push_back(std::move(jc));
        }
        acc.push_back(std::move(jr));
    }
    nlohmann::json prefs = nlohmann::json::array();
    for (const auto& list : res.preferences) {
        nlohmann::json jl = nlohmann::json::array();
        for (const auto& w : list) jl.push_back(w.weights());
        prefs.push_back(std::move(jl));
    }
    nlohmann::json metrics;
    for (AccVariant v : {AccVariant::max, AccVariant::mean, AccVariant::min})
        metrics[variant_name(v)] = metrics_to_json(res.metrics(v));
    return {
        {"num_tasks", res.data.size()},
        {"m", res.kb.m()},
        {"alpha", cfg.alpha},
        {"K", cfg.K},
        {"models_per_preference", cfg.models_per_preference},
        {"seed", cfg.seed},
        {"thresholds", res.thresholds},
        {"auto_threshold", res.auto_threshold ? nlohmann::json(*res.auto_threshold) : nlohmann::json(nullptr)},
        {"training_runs", res.training_runs},
        {"buffer_history", res.kb.buffer_history()},
        {"metrics", std::move(metrics)},
        {"accuracy", std::move(acc)},
        {"preferences", std::move(prefs)},
        {"acceptance", res.acceptance},
    };
}

/// metrics.csv: one row per (variant, task).
inline void write_metrics_csv(const ExperimentResult& res, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeError("cannot write " + path.string());
    out << std::setprecision(10);
    out << "variant,task_index,avg_acc,peak_acc,bwt\n";
    for (AccVariant v : {AccVariant::max, AccVariant::mean, AccVariant::min})
        for (const auto& m : res.metrics(v)) {
            out << variant_name(v) << ',' << m.task_index << ',' << m.avg_acc << ',' << m.peak_acc << ',';
            if (m.bwt) out << *m.bwt;
            out << '\n';
        }
    if (!out) throw RuntimeError("write failed for " + path.string());
}

struct RunOutputs {
    std::filesystem::path kb;
    std::filesystem::path metrics;
    std::filesystem::path results;
    std::filesystem::path data_dir;
};

/// kb.json, metrics.csv and results.json in out_dir, plus the task splits
/// under out_dir/data for later queries.
inline RunOutputs write_run_outputs(const ExperimentResult& res, const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw RuntimeError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
    RunOutputs o{cfg.out_dir / "kb.json", cfg.out_dir / "metrics.csv", cfg.out_dir / "results.json",
                 cfg.out_dir / "data"};
    save_kb(res.kb, o.kb.string());
    write_metrics_csv(res, o.metrics);
    std::ofstream(o.results) << results_to_json(res, cfg.experiment).dump(2) << '\n';
    write_stream_dir(res.data, o.data_dir);
    return o;
}

// ------------------------------------------------------------------- queries

/// Read-only state behind the CLI queries and the HTTP service.
struct ServiceState {
    KnowledgeBase kb;
    std::vector<TaskDataset> tests; // empty when no test data was given
    double default_alpha = 0.01;
    std::size_t hdr_samples = kDefaultHdrSamples;
    std::uint64_t training_baseline = training_counter().load();

    std::uint64_t training_runs() const { return training_counter().load() - training_baseline; }
};

inline ServiceState make_service_state(const std::filesystem::path& kb_path,
                                       const std::optional<std::filesystem::path>& data_dir) {
    ServiceState s;
    s.kb = load_kb(kb_path.string());
    if (data_dir && s.kb.num_tasks() > 0) {
        s.tests = load_test_sets(*data_dir, s.kb.num_tasks());
        for (const auto& t : s.tests)
            detail::check_dim(static_cast<Eigen::Index>(s.kb.arch().input_dim), static_cast<Eigen::Index>(t.dim()),
                              "test data");
    }
    s.training_baseline = training_counter().load();
    return s;
}

/// Raised when a query needs at least one learned task.
class NoTasksError : public ValidationError {
public:
    NoTasksError() : ValidationError("knowledge base has no tasks yet") {}
};

/// "0.2,0.8" -> {0.2, 0.8}.
inline std::vector<double> parse_weight_list(const std::string& text) {
    std::vector<double> w;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(cell, &used);
        } catch (const std::exception&) {
            throw ValidationError("weights: '" + cell + "' is not a number");
        }
        if (cell.find_first_not_of(" \t", used) != std::string::npos)
            throw ValidationError("weights: '" + cell + "' is not a number");
        w.push_back(v);
    }
    if (w.empty()) throw ValidationError("weights: empty list");
    return w;
}

/// Exact-simplex check for external input; the weights are not renormalized.
inline Preference checked_preference(const KnowledgeBase& kb, const std::vector<double>& w) {
    if (kb.num_tasks() == 0) throw NoTasksError();
    if (w.size() != kb.num_tasks())
        throw ValidationError("weights: got " + std::to_string(w.size()) + " values for " +
                              std::to_string(kb.num_tasks()) + " tasks");
    return Preference(w, kInputSimplexTolerance);
}

struct QueryParams {
    std::vector<double> weights;
    double alpha = 0.01;
    std::size_t n_samples = 100;
    std::uint64_t seed = 0;
};

struct TaskAccuracy {
    std::size_t task = 0;
    double acc_max = 0.0;
    double acc_mean = 0.0;
    double acc_min = 0.0;
};

struct QueryResult {
    Preference weights;
    double alpha = 0.0;
    std::vector<SlotWeight> beta;
    GaussMixture mixture;
    std::vector<PointId> component_ids;
    double log_threshold = 0.0;
    std::size_t n_samples = 0;
    std::size_t proposals = 0;
    std::vector<TaskAccuracy> per_task;
};

inline void check_query_sizes(double alpha, std::size_t n) {
    require(alpha >= 0.0 && alpha < 1.0, "alpha must lie in [0, 1)");
    require(n >= 1 && n <= kMaxQuerySamples, "n_samples must lie in [1, " + std::to_string(kMaxQuerySamples) + "]");
}

/// Zero-shot answer to one preference: HDR of the preference mixture and the
/// accuracy of models sampled from it on every task's test set.
inline QueryResult run_query(const ServiceState& state, const QueryParams& q) {
    const Preference w = checked_preference(state.kb, q.weights);
    check_query_sizes(q.alpha, q.n_samples);
    QueryResult r;
    r.weights = w;
    r.alpha = q.alpha;
    r.beta = beta_allocation(state.kb, w);
    r.mixture = qhat(state.kb, w);
    for (const auto& s : r.beta)
        if (s.beta > 0.0 &&
            std::find(r.component_ids.begin(), r.component_ids.end(), s.point_id) == r.component_ids.end())
            r.component_ids.push_back(s.point_id);
    std::sort(r.component_ids.begin(), r.component_ids.end());
    const HdrRegion hdr = compute_hdr(r.mixture, q.alpha, state.hdr_samples, derive_seed(q.seed, 0x4d12));
    r.log_threshold = hdr.log_threshold;
    const HdrSamples models = sample_models_from_hdr(hdr, q.n_samples, derive_seed(q.seed, 0x5a3b));
    r.n_samples = models.models.size();
    r.proposals = models.proposals;
    for (std::size_t j = 0; j < state.tests.size(); ++j) {
        TaskAccuracy t{j + 1, 0.0, 0.0, 1.0};
        for (const Vec& theta : models.models) {
            const double a = accuracy(theta, state.tests[j], state.kb.arch());
            t.acc_max = std::max(t.acc_max, a);
            t.acc_min = std::min(t.acc_min, a);
            t.acc_mean += a;
        }
        t.acc_mean /= static_cast<double>(models.models.size());
        r.per_task.push_back(t);
    }
    return r;
}

namespace detail {
// -inf (alpha = 0, whole space) has no JSON number; it is sent as null.
inline nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }
} // namespace detail

inline nlohmann::json query_to_json(const QueryResult& r, const KnowledgeBase& kb) {
    nlohmann::json beta = nlohmann::json::array(), slots = nlohmann::json::array(), comps = nlohmann::json::array();
    for (const auto& s : r.beta) {
        beta.push_back(s.beta);
        slots.push_back({{"task", s.task_index}, {"prior_index", s.prior_index}, {"point_id", s.point_id}, {"beta", s.beta}});
    }
    for (std::size_t i = 0; i < r.component_ids.size(); ++i)
        comps.push_back({{"point_id", r.component_ids[i]},
                         {"task", kb.point(r.component_ids[i]).task_index},
                         {"weight", r.mixture.components()[i].weight}});
    nlohmann::json per_task = nlohmann::json::array();
    for (const auto& t : r.per_task)
        per_task.push_back({{"task", t.task}, {"acc_max", t.acc_max}, {"acc_mean", t.acc_mean}, {"acc_min", t.acc_min}});
    return {
        {"weights", r.weights.weights()},
        {"alpha", r.alpha},
        {"beta", std::move(beta)},
        {"slots", std::move(slots)},
        {"components", std::move(comps)},
        {"log_threshold", detail::finite_or_null(r.log_threshold)},
        {"n_samples", r.n_samples},
        {"proposals", r.proposals},
        {"acceptance_rate", static_cast<double>(r.n_samples) / static_cast<double>(r.proposals)},
        {"per_task", std::move(per_task)},
    };
}

struct ProjectionParams {
    std::size_t x = 0;
    std::size_t y = 1;
    std::vector<double> weights;
    double alpha = 0.01;
    std::size_t n = 500;
    std::uint64_t seed = 0;
};

/// Mixture draws projected on two parameter coordinates, flagged by HDR
/// membership in the full space.
inline nlohmann::json projection(const ServiceState& state, const ProjectionParams& p) {
    const Preference w = checked_preference(state.kb, p.weights);
    check_query_sizes(p.alpha, p.n);
    const std::size_t dim = state.kb.arch().param_count();
    require(p.x < dim && p.y < dim, "projection: coordinates must be < " + std::to_string(dim));
    const GaussMixture mix = qhat(state.kb, w);
    const HdrRegion hdr = compute_hdr(mix, p.alpha, state.hdr_samples, derive_seed(p.seed, 0x4d12));
    MixtureSampler draw(mix, derive_seed(p.seed, 0x9b07));
    nlohmann::json pts = nlohmann::json::array();
    std::size_t inside = 0;
    for (std::size_t i = 0; i < p.n; ++i) {
        const Vec theta = draw();
        const bool in = hdr_contains(hdr, theta);
        inside += in;
        pts.push_back({{"x", theta[static_cast<Eigen::Index>(p.x)]}, {"y", theta[static_cast<Eigen::Index>(p.y)]}, {"inside", in}});
    }
    return {{"points", std::move(pts)},
            {"alpha", p.alpha},
            {"log_threshold", detail::finite_or_null(hdr.log_threshold)},
            {"inside_fraction", static_cast<double>(inside) / static_cast<double>(p.n)}};
}

inline nlohmann::json eu_report(const KnowledgeBase& kb) {
    if (kb.num_tasks() == 0) throw NoTasksError();
    std::vector<double> eu;
    for (std::size_t i = 1; i <= kb.num_tasks(); ++i) eu.push_back(epistemic_uncertainty(kb, i));
    return {{"per_task_eu", eu}, {"suggested_weights", eu_weights(eu).weights()}};
}

inline nlohmann::json arch_to_json(const BnnArchitecture& a) {
    return {{"input", a.input_dim}, {"hidden", a.hidden_dim}, {"output", 1}, {"bias", a.bias}};
}

inline nlohmann::json status_report(const ServiceState& s) {
    return {{"num_tasks", s.kb.num_tasks()},
            {"buffer_history", s.kb.buffer_history()},
            {"m", s.kb.m()},
            {"arch", arch_to_json(s.kb.arch())},
            {"fgcs_diameter", s.kb.stored_count() > 0 ? nlohmann::json(fgcs_diameter(s.kb)) : nlohmann::json(nullptr)},
            {"default_alpha", s.default_alpha},
            {"test_sets", s.tests.size()},
            {"training_runs", s.training_runs()}};
}

// ------------------------------------------------------------------- inspect

inline nlohmann::json inspect_report(const KnowledgeBase& kb) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : kb.tasks())
        tasks.push_back({{"task", t.task_index},
                         {"stored", t.stored.size()},
                         {"substituted", t.substitutions.size()},
                         {"eu", epistemic_uncertainty(kb, t.task_index)}});
    return {{"num_tasks", kb.num_tasks()},
            {"m", kb.m()},
            {"arch", arch_to_json(kb.arch())},
            {"buffer_history", kb.buffer_history()},
            {"tasks", std::move(tasks)},
            {"fgcs_diameter", kb.stored_count() >= 1 ? nlohmann::json(fgcs_diameter(kb)) : nlohmann::json(nullptr)},
            {"suggested_threshold",
             kb.stored_count() >= 2 ? nlohmann::json(suggest_threshold(kb)) : nlohmann::json(nullptr)}};
}

inline std::string inspect_text(const nlohmann::json& rep) {
    std::ostringstream out;
    out << std::setprecision(6);
    const auto& a = rep["arch"];
    out << "tasks: " << rep["num_tasks"] << ", m: " << rep["m"] << ", arch: " << a["input"] << "-" << a["hidden"]
        << "-1" << (a["bias"].get<bool>() ? "" : " (no bias)") << "\n";
    out << "buffer history:";
    for (const auto& b : rep["buffer_history"]) out << ' ' << b;
    out << "\n";
    for (const auto& t : rep["tasks"])
        out << "task " << t["task"] << ": stored " << t["stored"] << ", substituted " << t["substituted"] << ", EU "
            << t["eu"].get<double>() << "\n";
    auto opt = [&](const char* key) {
        const auto& v = rep[key];
        if (v.is_null()) return std::string("n/a");
        std::ostringstream s;
        s << std::setprecision(6) << v.get<double>();
        return s.str();
    };
    out << "FGCS diameter: " << opt("fgcs_diameter") << "\n";
    out << "suggested threshold: " << opt("suggested_threshold") << "\n";
    return out.str();
}

} // namespace ibcl
