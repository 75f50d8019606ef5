#pragma once

// Task streams: synthetic Gaussian class-conditional tasks with a bounded
// spread of generating distributions, and CSV feature files for pre-extracted
// real data.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "bnn.hpp"
#include "error.hpp"
#include "gauss.hpp"
#include "random.hpp"

namespace ibcl {

struct TaskSplit {
    TaskDataset train;
    TaskDataset validation;
    TaskDataset test;
};

enum class StreamKind {
    similar,     // every task has its own mean, all within the shift bound
    recurring,   // tasks alternate between two generating distributions
    conflicting, // like `similar`, but the two class means swap on even tasks
};

struct SyntheticStreamSpec {
    std::size_t feature_dim = 2;
    std::size_t num_tasks = 5;
    std::size_t n_per_task = 200;
    double class_separation = 3.0;
    double task_shift_bound = 1.0; // r: bound on pairwise W2 between tasks
    std::uint64_t seed = 0;
    StreamKind kind = StreamKind::similar;
    /// Radius of the ball task means are drawn from; negative means r / 2.
    double mean_radius = -1.0;
};

/// Class-conditional generating distributions of one task, N(mean_c, I).
struct TaskGenerator {
    Vec class_mean[2];

    DiagGaussian component(int label) const {
        return DiagGaussian(class_mean[label], Vec::Ones(class_mean[label].size()));
    }
};

struct SimilarityReport {
    bool ok = true;
    double max_distance = 0.0;
};

/// Largest pairwise W2 between tasks, taken per class-conditional component.
inline SimilarityReport check_task_similarity(const std::vector<TaskGenerator>& tasks, double r) {
    SimilarityReport rep;
    for (std::size_t a = 0; a < tasks.size(); ++a)
        for (std::size_t b = a + 1; b < tasks.size(); ++b)
            for (int c = 0; c < 2; ++c)
                rep.max_distance = std::max(rep.max_distance, w2_distance(tasks[a].component(c), tasks[b].component(c)));
    rep.ok = rep.max_distance <= r;
    return rep;
}

struct SyntheticStream {
    std::vector<TaskSplit> tasks;
    std::vector<TaskGenerator> generators;
};

namespace detail {

inline Vec uniform_in_ball(Rng& rng, std::size_t dim, double radius) {
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    Vec v(static_cast<Eigen::Index>(dim));
    for (auto& x : v) x = normal(rng);
    const double scale = radius * std::pow(unif(rng), 1.0 / static_cast<double>(dim)) / v.norm();
    return v * scale;
}

// Shuffled 60/20/20 split of a labeled sample.
inline TaskSplit split_60_20_20(const TaskDataset& all, Rng& rng) {
    std::vector<std::size_t> idx(all.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n = all.size();
    const std::size_t n_train = (n * 6) / 10;
    const std::size_t n_val = (n * 2) / 10;
    auto take = [&](std::size_t lo, std::size_t hi) {
        return all.subset(std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                                   idx.begin() + static_cast<std::ptrdiff_t>(hi)));
    };
    return TaskSplit{take(0, n_train), take(n_train, n_train + n_val), take(n_train + n_val, n)};
}

} // namespace detail

/// Draws a task stream; deterministic given spec.seed. Throws when the drawn
/// generators violate the shift bound r.
inline SyntheticStream gen_synthetic_stream(const SyntheticStreamSpec& spec) {
    require(spec.feature_dim >= 1, "gen_synthetic_stream: feature_dim must be >= 1");
    require(spec.num_tasks >= 1, "gen_synthetic_stream: num_tasks must be >= 1");
    require(spec.n_per_task >= 5, "gen_synthetic_stream: n_per_task must be >= 5");
    require(spec.task_shift_bound > 0.0, "gen_synthetic_stream: shift bound r must be > 0");
    const double r = spec.task_shift_bound;
    const double radius = spec.mean_radius < 0.0 ? r / 2.0 : spec.mean_radius;
    if (radius > r / 2.0)
        throw ValidationError("gen_synthetic_stream: mean radius " + std::to_string(radius) +
                              " cannot be guaranteed within shift bound " + std::to_string(r));

    Rng rng(derive_seed(spec.seed, 0x57e4));
    std::normal_distribution<double> normal;
    Vec u(static_cast<Eigen::Index>(spec.feature_dim));
    for (auto& x : u) x = normal(rng);
    u.normalize();

    SyntheticStream out;
    Vec recurring_mean[2] = {detail::uniform_in_ball(rng, spec.feature_dim, radius),
                             detail::uniform_in_ball(rng, spec.feature_dim, radius)};
    for (std::size_t t = 0; t < spec.num_tasks; ++t) {
        Vec base = spec.kind == StreamKind::recurring ? recurring_mean[t % 2]
                                                      : detail::uniform_in_ball(rng, spec.feature_dim, radius);
        const bool swap = spec.kind == StreamKind::conflicting && t % 2 == 1;
        TaskGenerator gen;
        gen.class_mean[swap ? 1 : 0] = base;
        gen.class_mean[swap ? 0 : 1] = base + spec.class_separation * u;
        out.generators.push_back(gen);
    }
    const SimilarityReport sim = check_task_similarity(out.generators, r);
    if (!sim.ok)
        throw ValidationError("gen_synthetic_stream: generating distributions are " + std::to_string(sim.max_distance) +
                              " apart, exceeding shift bound " + std::to_string(r));

    for (std::size_t t = 0; t < spec.num_tasks; ++t) {
        Rng task_rng(derive_seed(spec.seed, 0xda7a, t));
        const auto n = static_cast<Eigen::Index>(spec.n_per_task);
        Mat x(n, static_cast<Eigen::Index>(spec.feature_dim));
        Vec y(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int label = static_cast<int>(i % 2);
            y[i] = label;
            for (Eigen::Index d = 0; d < x.cols(); ++d)
                x(i, d) = out.generators[t].class_mean[label][d] + normal(task_rng);
        }
        out.tasks.push_back(detail::split_60_20_20(TaskDataset(std::move(x), std::move(y)), task_rng));
    }
    return out;
}

/// CSV with the label in the first column and features after it. A leading
/// header row is accepted when its first cell is not numeric.
inline TaskDataset load_feature_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("load_feature_csv: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    std::size_t width = 0;
    auto where = [&] { return path + ": row " + std::to_string(line_no) + ": "; };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        bool numeric = true;
        while (std::getline(ss, cell, ',')) {
            const auto b = cell.find_first_not_of(" \t");
            const auto e = cell.find_last_not_of(" \t");
            const std::string trimmed = b == std::string::npos ? std::string() : cell.substr(b, e - b + 1);
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(trimmed.data(), trimmed.data() + trimmed.size(), v);
            if (trimmed.empty() || ec != std::errc() || ptr != trimmed.data() + trimmed.size() || !std::isfinite(v)) {
                numeric = false;
                break;
            }
            cells.push_back(v);
        }
        if (!numeric) {
            if (rows.empty() && width == 0 && line_no == 1) continue; // header
            throw ValidationError(where() + "non-numeric cell");
        }
        if (cells.size() < 2) throw ValidationError(where() + "need a label and at least one feature");
        if (width == 0) width = cells.size();
        if (cells.size() != width)
            throw ValidationError(where() + "expected " + std::to_string(width) + " columns, found " +
                                  std::to_string(cells.size()));
        if (cells[0] != 0.0 && cells[0] != 1.0) throw ValidationError(where() + "label must be 0 or 1");
        rows.push_back(std::move(cells));
    }
    if (rows.empty()) throw ValidationError("load_feature_csv: " + path + " has no data rows");
    Mat x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width - 1));
    Vec y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        y[static_cast<Eigen::Index>(i)] = rows[i][0];
        for (std::size_t d = 1; d < width; ++d)
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d - 1)) = rows[i][d];
    }
    return TaskDataset(std::move(x), std::move(y));
}

inline void write_feature_csv(const TaskDataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw RuntimeError("write_feature_csv: cannot open " + path);
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out << static_cast<int>(data.labels()[r]);
        for (Eigen::Index d = 0; d < data.features().cols(); ++d) out << ',' << data.features()(r, d);
        out << '\n';
    }
}

/// File of one (task, split) pair inside a stream directory; tasks are 1-based.
inline std::filesystem::path task_file(const std::filesystem::path& dir, std::size_t task_index,
                                       const std::string& split) {
    return dir / ("task" + std::to_string(task_index) + "_" + split + ".csv");
}

/// Loads task{i}_{train,val,test}.csv for i = 1..num_tasks and checks that
/// every file has the same feature dimension.
inline std::vector<TaskSplit> load_stream_dir(const std::filesystem::path& dir, std::size_t num_tasks) {
    require(num_tasks >= 1, "load_stream_dir: num_tasks must be >= 1");
    std::vector<TaskSplit> out;
    std::size_t dim = 0;
    auto load = [&](std::size_t t, const std::string& split) {
        TaskDataset d = load_feature_csv(task_file(dir, t, split).string());
        if (dim == 0) dim = d.dim();
        if (d.dim() != dim)
            throw ValidationError("load_stream_dir: " + task_file(dir, t, split).string() + " has " +
                                  std::to_string(d.dim()) + " features, expected " + std::to_string(dim));
        return d;
    };
    for (std::size_t t = 1; t <= num_tasks; ++t) {
        TaskSplit s;
        s.train = load(t, "train");
        s.validation = load(t, "val");
        s.test = load(t, "test");
        out.push_back(std::move(s));
    }
    return out;
}

/// Test split of tasks 1..num_tasks.
inline std::vector<TaskDataset> load_test_sets(const std::filesystem::path& dir, std::size_t num_tasks) {
    std::vector<TaskDataset> out;
    for (std::size_t t = 1; t <= num_tasks; ++t) out.push_back(load_feature_csv(task_file(dir, t, "test").string()));
    return out;
}

inline void write_stream_dir(const std::vector<TaskSplit>& tasks, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        write_feature_csv(tasks[t].train, task_file(dir, t + 1, "train").string());
        write_feature_csv(tasks[t].validation, task_file(dir, t + 1, "val").string());
        write_feature_csv(tasks[t].test, task_file(dir, t + 1, "test").string());
    }
}

} // namespace ibcl
