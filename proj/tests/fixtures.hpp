#pragma once

// Small hand-built knowledge bases and streams shared by the test files.

#include <cmath>
#include <random>
#include <vector>

#include "ibcl/experiment.hpp"
#include "ibcl/knowledge_base.hpp"

namespace fixture {

/// One-parameter model: a single weight, no hidden layer, no bias.
inline ibcl::BnnArchitecture scalar_arch() { return ibcl::BnnArchitecture{1, 0, false}; }

inline ibcl::DiagGaussian g1(double mu, double sd) {
    return ibcl::DiagGaussian(ibcl::Vec::Constant(1, mu), ibcl::Vec::Constant(1, sd));
}

/// Knowledge base over scalar_arch() where task t stores one point per entry
/// of means[t] (sd 1), prior slots numbered in order. Every slot is stored, so
/// m is the size of the first task's list and all lists must share it.
inline ibcl::KnowledgeBase scalar_kb(const std::vector<std::vector<double>>& means, double sd = 1.0) {
    std::vector<ibcl::TaskEntry> tasks;
    std::vector<std::size_t> history;
    ibcl::PointId id = 0;
    std::size_t total = 0;
    for (std::size_t t = 0; t < means.size(); ++t) {
        ibcl::TaskEntry e{t + 1, {}, {}};
        for (std::size_t j = 0; j < means[t].size(); ++j) e.stored.push_back({id++, t + 1, j, g1(means[t][j], sd)});
        total += e.stored.size();
        history.push_back(total);
        tasks.push_back(std::move(e));
    }
    return ibcl::KnowledgeBase::assemble(scalar_arch(), means.front().size(), {}, std::move(tasks),
                                         std::move(history));
}

/// Cheap training settings for tiny synthetic problems.
inline ibcl::TrainConfig quick_train(std::uint64_t seed = 0) { return ibcl::TrainConfig{0.05, 32, 30, 2, seed}; }

inline ibcl::SyntheticStreamSpec small_stream(ibcl::StreamKind kind, std::size_t num_tasks, std::uint64_t seed) {
    ibcl::SyntheticStreamSpec s;
    s.feature_dim = 2;
    s.num_tasks = num_tasks;
    s.n_per_task = 200;
    s.class_separation = 3.0;
    s.task_shift_bound = kind == ibcl::StreamKind::conflicting ? 4.0 : 1.0;
    s.mean_radius = kind == ibcl::StreamKind::conflicting ? 0.5 : -1.0;
    s.seed = seed;
    s.kind = kind;
    return s;
}

inline std::vector<ibcl::DiagGaussian> isotropic_priors(const ibcl::BnnArchitecture& arch,
                                                        const std::vector<double>& stds) {
    std::vector<ibcl::DiagGaussian> out;
    for (double s : stds) out.push_back(ibcl::DiagGaussian::isotropic(static_cast<Eigen::Index>(arch.param_count()), s));
    return out;
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t k, bool with_zeros) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> w(k);
    double total = 0.0;
    for (auto& x : w) {
        x = (with_zeros && rng() % 3 == 0) ? 0.0 : e(rng);
        total += x;
    }
    if (total == 0.0) {
        w[rng() % k] = 1.0;
        return w;
    }
    for (auto& x : w) x /= total;
    return w;
}

inline ibcl::GaussMixture random_mixture(std::mt19937_64& rng, Eigen::Index dim) {
    std::uniform_int_distribution<int> ncomp(1, 5);
    std::normal_distribution<double> n;
    std::uniform_real_distribution<double> sd(0.2, 2.0);
    const int c = ncomp(rng);
    const auto w = random_simplex(rng, static_cast<std::size_t>(c), false);
    std::vector<ibcl::GaussMixture::Component> comps;
    for (int i = 0; i < c; ++i) {
        ibcl::Vec mu(dim), s(dim);
        for (Eigen::Index d = 0; d < dim; ++d) {
            mu[d] = 3.0 * n(rng);
            s[d] = sd(rng);
        }
        comps.push_back({w[static_cast<std::size_t>(i)], ibcl::DiagGaussian(mu, s)});
    }
    return ibcl::GaussMixture(std::move(comps));
}

inline double awkward_double(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, 5);
    std::normal_distribution<double> n;
    switch (pick(rng)) {
    case 0: return n(rng) * 1e-300;
    case 1: return n(rng) * 1e300;
    case 2: return 1.0 / 3.0 + n(rng) * 1e-17;
    default: return n(rng);
    }
}

inline ibcl::DiagGaussian awkward_gaussian(std::mt19937_64& rng, Eigen::Index dim) {
    ibcl::Vec mu(dim), sd(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
        mu[i] = awkward_double(rng);
        sd[i] = std::abs(awkward_double(rng)) + 1e-308;
    }
    return ibcl::DiagGaussian(mu, sd);
}

// Random structurally valid knowledge base: every slot either stores a new
// point or reuses a random earlier one.
inline ibcl::KnowledgeBase random_kb(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> small(0, 3);
    const ibcl::BnnArchitecture arch{1 + small(rng), small(rng), rng() % 2 == 0};
    const auto D = static_cast<Eigen::Index>(arch.param_count());
    const std::size_t m = 1 + small(rng);
    const std::size_t n_tasks = small(rng) + (rng() % 2);
    std::vector<ibcl::DiagGaussian> priors;
    if (n_tasks == 0)
        for (std::size_t j = 0; j < m; ++j) priors.push_back(awkward_gaussian(rng, D));
    std::vector<ibcl::TaskEntry> tasks;
    std::vector<std::size_t> history;
    std::vector<ibcl::PointId> ids;
    ibcl::PointId next = rng() % 5;
    for (std::size_t t = 1; t <= n_tasks; ++t) {
        ibcl::TaskEntry e{t, {}, {}};
        for (std::size_t j = 0; j < m; ++j) {
            if (ids.empty() || t == 1 || rng() % 2 == 0) {
                e.stored.push_back({next, t, j, awkward_gaussian(rng, D)});
                ids.push_back(next);
                next += 1 + rng() % 3;
            } else {
                e.substitutions.push_back({t, j, ids[rng() % ids.size()]});
            }
        }
        history.push_back((history.empty() ? 0 : history.back()) + e.stored.size());
        tasks.push_back(std::move(e));
    }
    return ibcl::KnowledgeBase::assemble(arch, m, std::move(priors), std::move(tasks), std::move(history));
}

} // namespace fixture
