#pragma once

// The continual-learning loop: per task, one knowledge-base update, then K
// preferences answered zero-shot from the knowledge base, each evaluated by
// sampling deterministic models from its HDR. Plus the per-task metrics
// computed from the resulting accuracy tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "bnn.hpp"
#include "error.hpp"
#include "knowledge_base.hpp"
#include "preference.hpp"
#include "random.hpp"
#include "stream.hpp"

namespace ibcl {

/// K i.i.d. draws uniform on the simplex (normalized unit exponentials).
inline std::vector<Preference> random_preferences(std::size_t num_tasks, std::size_t K, std::uint64_t seed) {
    require(num_tasks >= 1, "random_preferences: num_tasks must be >= 1");
    require(K >= 1, "random_preferences: K must be >= 1");
    Rng rng(seed);
    std::exponential_distribution<double> expo(1.0);
    std::vector<Preference> out;
    out.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        std::vector<double> w(num_tasks);
        double total = 0.0;
        for (auto& x : w) total += (x = expo(rng));
        for (auto& x : w) x /= total;
        out.emplace_back(std::move(w));
    }
    return out;
}

struct AccuracyStats {
    double max = 0.0;
    double mean = 0.0;
    double min = 0.0;
};

enum class AccVariant { max, mean, min };

inline const char* variant_name(AccVariant v) {
    switch (v) {
    case AccVariant::max: return "max";
    case AccVariant::mean: return "mean";
    case AccVariant::min: return "min";
    }
    return "?";
}

inline double pick(const AccuracyStats& s, AccVariant v) {
    return v == AccVariant::max ? s.max : v == AccVariant::mean ? s.mean : s.min;
}

/// acc[i][j][k]: k-th preference model after task i+1, on task j+1's test set
/// (j <= i; both stored 0-based).
struct AccuracyMatrix {
    std::vector<std::vector<std::vector<AccuracyStats>>> acc;

    std::size_t num_tasks() const noexcept { return acc.size(); }

    /// Scalar slice acc[i][j][k] of one statistic.
    std::vector<std::vector<std::vector<double>>> slice(AccVariant v) const {
        std::vector<std::vector<std::vector<double>>> out(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) {
            out[i].resize(acc[i].size());
            for (std::size_t j = 0; j < acc[i].size(); ++j)
                for (const auto& s : acc[i][j]) out[i][j].push_back(pick(s, v));
        }
        return out;
    }
};

struct TaskMetrics {
    std::size_t task_index = 0;
    double avg_acc = 0.0;
    double peak_acc = 0.0;
    std::optional<double> bwt; // absent for the first task
};

/// Preference-weighted accuracy of task j after task i:
///   sum_k w_ik[j] / W_ij * acc_ijk,   W_ij = sum_k w_ik[j].
/// When every preference puts zero weight on task j the plain mean over k is
/// used.
inline double preference_weighted_acc(const std::vector<double>& acc_k, const std::vector<Preference>& prefs,
                                      std::size_t j) {
    require(acc_k.size() == prefs.size() && !acc_k.empty(), "preference_weighted_acc: shape mismatch");
    double total_w = 0.0, acc = 0.0;
    for (std::size_t k = 0; k < prefs.size(); ++k) {
        total_w += prefs[k].weights().at(j);
        acc += prefs[k].weights().at(j) * acc_k[k];
    }
    if (total_w > 0.0) return acc / total_w;
    double s = 0.0;
    for (double a : acc_k) s += a;
    return s / static_cast<double>(acc_k.size());
}

/// Average, peak and backward transfer per task from acc[i][j][k] (0-based)
/// and the preferences used after each task.
inline std::vector<TaskMetrics> compute_metrics(const std::vector<std::vector<std::vector<double>>>& acc,
                                                const std::vector<std::vector<Preference>>& prefs) {
    require(acc.size() == prefs.size(), "compute_metrics: one preference list per task required");
    const std::size_t n = acc.size();
    std::vector<std::vector<double>> acc_ij(n);
    for (std::size_t i = 0; i < n; ++i) {
        require(acc[i].size() == i + 1, "compute_metrics: row " + std::to_string(i + 1) + " must have " +
                                            std::to_string(i + 1) + " entries");
        for (std::size_t j = 0; j <= i; ++j) {
            for (const auto& w : prefs[i])
                require(w.size() == i + 1, "compute_metrics: preference length mismatch at task " + std::to_string(i + 1));
            acc_ij[i].push_back(preference_weighted_acc(acc[i][j], prefs[i], j));
        }
    }
    std::vector<TaskMetrics> out;
    for (std::size_t i = 0; i < n; ++i) {
        TaskMetrics m;
        m.task_index = i + 1;
        double sum = 0.0;
        m.peak_acc = acc_ij[i].front();
        for (double a : acc_ij[i]) {
            sum += a;
            m.peak_acc = std::max(m.peak_acc, a);
        }
        m.avg_acc = sum / static_cast<double>(i + 1);
        if (i >= 1) {
            double bt = 0.0;
            for (std::size_t j = 0; j < i; ++j) bt += acc_ij[i][j] - acc_ij[j][j];
            m.bwt = bt / static_cast<double>(i);
        }
        out.push_back(m);
    }
    return out;
}

/// Task files task{i}_{train,val,test}.csv in one directory.
struct FeatureDirSource {
    std::string dir;
    std::size_t num_tasks = 0;
};

using StreamSource = std::variant<SyntheticStreamSpec, FeatureDirSource>;

struct ExperimentConfig {
    StreamSource stream = SyntheticStreamSpec{};
    std::size_t hidden_dim = 64;
    std::vector<double> prior_stds{2.0, 2.5, 3.0}; // m = prior_stds.size()
    TrainConfig train;
    std::optional<double> d; // empty: suggest_threshold once two points are stored
    double alpha = 0.01;
    std::size_t K = 10;
    std::size_t models_per_preference = 100;
    std::size_t hdr_samples = kDefaultHdrSamples;
    std::uint64_t seed = 0;
    /// Fixed preferences per task (outer index = task); replaces random draws.
    std::optional<std::vector<std::vector<Preference>>> preferences;

    void validate() const {
        require(!prior_stds.empty(), "ExperimentConfig: need at least one prior (m >= 1)");
        for (double s : prior_stds) require(s > 0.0 && std::isfinite(s), "ExperimentConfig: prior stds must be > 0");
        train.validate();
        if (d) require(!std::isnan(*d) && *d >= 0.0, "ExperimentConfig: d must be >= 0");
        require(alpha >= 0.0 && alpha < 1.0, "ExperimentConfig: alpha must lie in [0, 1)");
        require(K >= 1, "ExperimentConfig: K must be >= 1");
        require(models_per_preference >= 1, "ExperimentConfig: models_per_preference must be >= 1");
        require(hdr_samples >= 1000, "ExperimentConfig: hdr_samples must be >= 1000");
    }
};

struct ExperimentResult {
    KnowledgeBase kb;
    std::vector<TaskSplit> data;
    std::vector<std::vector<Preference>> preferences;
    AccuracyMatrix accuracy;
    std::vector<double> thresholds; // d used at each task
    std::optional<double> auto_threshold;
    std::uint64_t training_runs = 0;
    /// Rejection-sampling acceptance per (task, preference).
    std::vector<std::vector<double>> acceptance;

    std::vector<TaskMetrics> metrics(AccVariant v) const { return compute_metrics(accuracy.slice(v), preferences); }
};

using Logger = std::function<void(const std::string&)>;

inline std::vector<TaskSplit> load_stream(const StreamSource& src) {
    if (const auto* s = std::get_if<SyntheticStreamSpec>(&src)) return gen_synthetic_stream(*s).tasks;
    const auto& f = std::get<FeatureDirSource>(src);
    return load_stream_dir(f.dir, f.num_tasks);
}

/// Runs the whole stream. Exactly m training runs happen per task, however
/// many preferences are evaluated.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const Logger& log = {}) {
    cfg.validate();
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };

    ExperimentResult res;
    res.data = load_stream(cfg.stream);
    const std::size_t num_tasks = res.data.size();
    if (cfg.preferences)
        require(cfg.preferences->size() == num_tasks, "ExperimentConfig: preferences must list one entry per task");

    BnnArchitecture arch{res.data.front().train.dim(), cfg.hidden_dim, true};
    std::vector<DiagGaussian> priors;
    for (double s : cfg.prior_stds) priors.push_back(DiagGaussian::isotropic(static_cast<Eigen::Index>(arch.param_count()), s));
    KnowledgeBase kb(arch, std::move(priors));

    const std::uint64_t runs_before = training_counter().load();
    std::optional<double> d = cfg.d;
    for (std::size_t i = 1; i <= num_tasks; ++i) {
        const double d_now = d.value_or(0.0);
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(cfg.seed, 0x7a5c, i);
        kb = fgcs_update(kb, res.data[i - 1].train, d_now, tc);
        res.thresholds.push_back(d_now);
        const TaskEntry& entry = kb.task(i);
        say("task " + std::to_string(i) + ": stored " + std::to_string(entry.stored.size()) + ", substituted " +
            std::to_string(entry.substitutions.size()) + ", buffer " + std::to_string(kb.buffer_history().back()));
        if (!d && kb.stored_count() >= 2) {
            d = suggest_threshold(kb);
            res.auto_threshold = d;
            say("auto threshold d = " + std::to_string(*d) + " (0.1-quantile of pairwise W2)");
        }

        std::vector<Preference> prefs = cfg.preferences ? (*cfg.preferences)[i - 1]
                                                        : random_preferences(i, cfg.K, derive_seed(cfg.seed, 0x9fe5, i));
        std::vector<std::vector<AccuracyStats>> row(i);
        std::vector<double> accept;
        for (std::size_t k = 0; k < prefs.size(); ++k) {
            const GaussMixture mix = qhat(kb, prefs[k]);
            const HdrRegion hdr = compute_hdr(mix, cfg.alpha, cfg.hdr_samples, derive_seed(cfg.seed, 0x4d12, i, k));
            const HdrSamples models =
                sample_models_from_hdr(hdr, cfg.models_per_preference, derive_seed(cfg.seed, 0x5a3b, i, k));
            accept.push_back(static_cast<double>(models.models.size()) / static_cast<double>(models.proposals));
            for (std::size_t j = 0; j < i; ++j) {
                AccuracyStats st{0.0, 0.0, 1.0};
                for (const Vec& theta : models.models) {
                    const double a = accuracy(theta, res.data[j].test, arch);
                    st.max = std::max(st.max, a);
                    st.min = std::min(st.min, a);
                    st.mean += a;
                }
                st.mean /= static_cast<double>(models.models.size());
                row[j].push_back(st);
            }
        }
        res.accuracy.acc.push_back(std::move(row));
        res.preferences.push_back(std::move(prefs));
        res.acceptance.push_back(std::move(accept));
    }
    res.training_runs = training_counter().load() - runs_before;
    res.kb = std::move(kb);
    return res;
}

} // namespace ibcl
