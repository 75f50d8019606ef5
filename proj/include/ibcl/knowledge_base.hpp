#pragma once

// Knowledge base of extreme points of a finitely generated credal set, one
// task at a time. Each task owns m prior slots; a slot either stores a newly
// learned posterior or refers (by id) to an already stored point that was
// within the Wasserstein threshold.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bnn.hpp"
#include "error.hpp"
#include "gauss.hpp"
#include "random.hpp"

namespace ibcl {

using PointId = std::uint64_t;

struct ExtremePoint {
    PointId id = 0;
    std::size_t task_index = 0; // 1-based
    std::size_t prior_index = 0;
    DiagGaussian dist;

    friend bool operator==(const ExtremePoint&, const ExtremePoint&) = default;
};

struct SubstitutionRecord {
    std::size_t task_index = 0;
    std::size_t prior_index = 0;
    PointId reused_point_id = 0;

    friend bool operator==(const SubstitutionRecord&, const SubstitutionRecord&) = default;
};

struct TaskEntry {
    std::size_t task_index = 0;
    std::vector<ExtremePoint> stored;
    std::vector<SubstitutionRecord> substitutions;

    friend bool operator==(const TaskEntry&, const TaskEntry&) = default;
};

class KnowledgeBase {
public:
    KnowledgeBase() = default;

    /// Fresh knowledge base; `priors` are the m initial distributions. They are
    /// dropped once the first task has been learned.
    KnowledgeBase(BnnArchitecture arch, std::vector<DiagGaussian> priors)
        : arch_(arch), m_(priors.size()), priors_(std::move(priors)) {
        arch_.validate();
        require(m_ >= 1, "KnowledgeBase: need at least one prior");
        for (const auto& p : priors_)
            detail::check_dim(static_cast<Eigen::Index>(arch_.param_count()), p.dim(), "KnowledgeBase prior");
    }

    /// Rebuilds a knowledge base from its parts (used by the loader) and checks
    /// every structural invariant.
    static KnowledgeBase assemble(BnnArchitecture arch, std::size_t m, std::vector<DiagGaussian> priors,
                                  std::vector<TaskEntry> tasks, std::vector<std::size_t> buffer_history) {
        KnowledgeBase kb;
        kb.arch_ = arch;
        kb.m_ = m;
        kb.priors_ = std::move(priors);
        kb.tasks_ = std::move(tasks);
        kb.buffer_history_ = std::move(buffer_history);
        for (const auto& t : kb.tasks_)
            for (const auto& p : t.stored) kb.next_id_ = std::max(kb.next_id_, p.id + 1);
        kb.validate();
        return kb;
    }

    const BnnArchitecture& arch() const noexcept { return arch_; }
    std::size_t m() const noexcept { return m_; }
    std::size_t num_tasks() const noexcept { return tasks_.size(); }
    const std::vector<TaskEntry>& tasks() const noexcept { return tasks_; }
    const std::vector<std::size_t>& buffer_history() const noexcept { return buffer_history_; }
    const std::vector<DiagGaussian>& initial_priors() const noexcept { return priors_; }

    const TaskEntry& task(std::size_t task_index) const {
        require(task_index >= 1 && task_index <= tasks_.size(),
                "KnowledgeBase: no task " + std::to_string(task_index));
        return tasks_[task_index - 1];
    }

    /// Stored extreme points across all tasks, in id order.
    std::vector<const ExtremePoint*> stored_points() const {
        std::vector<const ExtremePoint*> out;
        for (const auto& t : tasks_)
            for (const auto& p : t.stored) out.push_back(&p);
        std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id < b->id; });
        return out;
    }

    std::size_t stored_count() const {
        std::size_t n = 0;
        for (const auto& t : tasks_) n += t.stored.size();
        return n;
    }

    const ExtremePoint& point(PointId id) const {
        for (const auto& t : tasks_)
            for (const auto& p : t.stored)
                if (p.id == id) return p;
        throw ValidationError("KnowledgeBase: unknown point id " + std::to_string(id));
    }

    /// Id of the point standing for slot (task, prior_index): the stored
    /// posterior itself or the one it was substituted by.
    PointId effective_point_id(std::size_t task_index, std::size_t prior_index) const {
        const TaskEntry& t = task(task_index);
        for (const auto& p : t.stored)
            if (p.prior_index == prior_index) return p.id;
        for (const auto& s : t.substitutions)
            if (s.prior_index == prior_index) return s.reused_point_id;
        throw ValidationError("KnowledgeBase: slot " + std::to_string(prior_index) + " of task " +
                              std::to_string(task_index) + " does not resolve");
    }

    const DiagGaussian& effective_posterior(std::size_t task_index, std::size_t prior_index) const {
        return point(effective_point_id(task_index, prior_index)).dist;
    }

    /// Prior for slot j of the next task: the j-th effective posterior of the
    /// latest task, or the j-th initial prior before any task.
    const DiagGaussian& chained_prior(std::size_t prior_index) const {
        if (tasks_.empty()) {
            require(priors_.size() == m_, "KnowledgeBase: initial priors unavailable");
            return priors_[prior_index];
        }
        return effective_posterior(tasks_.size(), prior_index);
    }

    void validate() const {
        arch_.validate();
        require(m_ >= 1, "KnowledgeBase: m must be >= 1");
        require(buffer_history_.size() == tasks_.size(), "KnowledgeBase: buffer_history length mismatch");
        const auto D = static_cast<Eigen::Index>(arch_.param_count());
        std::vector<PointId> ids;
        std::size_t cumulative = 0;
        for (std::size_t i = 0; i < tasks_.size(); ++i) {
            const TaskEntry& t = tasks_[i];
            require(t.task_index == i + 1, "KnowledgeBase: task indices must be 1..n in order");
            require(t.stored.size() + t.substitutions.size() == m_,
                    "KnowledgeBase: task " + std::to_string(t.task_index) + " does not have m slots");
            std::vector<bool> seen(m_, false);
            auto mark = [&](std::size_t j) {
                require(j < m_ && !seen[j], "KnowledgeBase: duplicate or out-of-range prior_index in task " +
                                                std::to_string(t.task_index));
                seen[j] = true;
            };
            for (const auto& p : t.stored) {
                mark(p.prior_index);
                require(p.task_index == t.task_index, "KnowledgeBase: point task_index mismatch");
                require(p.dist.dim() == D, "KnowledgeBase: point dimension mismatch");
                ids.push_back(p.id);
            }
            for (const auto& s : t.substitutions) {
                mark(s.prior_index);
                require(s.task_index == t.task_index, "KnowledgeBase: substitution task_index mismatch");
            }
            cumulative += t.stored.size();
            require(buffer_history_[i] == cumulative, "KnowledgeBase: buffer_history inconsistent");
        }
        std::sort(ids.begin(), ids.end());
        require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "KnowledgeBase: duplicate point id");
        for (const auto& t : tasks_)
            for (const auto& s : t.substitutions) {
                require(std::binary_search(ids.begin(), ids.end(), s.reused_point_id),
                        "KnowledgeBase: substitution references missing point " +
                            std::to_string(s.reused_point_id));
                require(point(s.reused_point_id).task_index <= t.task_index,
                        "KnowledgeBase: substitution references a later task");
            }
        if (tasks_.empty()) require(priors_.size() == m_, "KnowledgeBase: empty knowledge base needs m priors");
        for (const auto& p : priors_) require(p.dim() == D, "KnowledgeBase: prior dimension mismatch");
    }

    friend bool operator==(const KnowledgeBase& a, const KnowledgeBase& b) {
        return a.arch_ == b.arch_ && a.m_ == b.m_ && a.priors_ == b.priors_ && a.tasks_ == b.tasks_ &&
               a.buffer_history_ == b.buffer_history_;
    }

private:
    friend KnowledgeBase fgcs_update(const KnowledgeBase&, const TaskDataset&, double, const TrainConfig&);

    BnnArchitecture arch_;
    std::size_t m_ = 0;
    std::vector<DiagGaussian> priors_;
    std::vector<TaskEntry> tasks_;
    std::vector<std::size_t> buffer_history_;
    PointId next_id_ = 0;
};

struct NearestPoint {
    PointId id;
    double distance;
};

/// Exhaustive W2 scan over stored points; ties go to the smallest id.
inline NearestPoint nearest_extreme(const KnowledgeBase& kb, const DiagGaussian& q) {
    const auto points = kb.stored_points();
    require(!points.empty(), "nearest_extreme: knowledge base is empty");
    NearestPoint best{points.front()->id, std::numeric_limits<double>::infinity()};
    for (const ExtremePoint* p : points) {
        const double dist = w2_distance(p->dist, q);
        if (dist < best.distance) best = {p->id, dist};
    }
    return best;
}

namespace detail {
inline std::vector<double> pairwise_w2(const KnowledgeBase& kb) {
    const auto points = kb.stored_points();
    std::vector<double> out;
    for (std::size_t a = 0; a < points.size(); ++a)
        for (std::size_t b = a + 1; b < points.size(); ++b)
            out.push_back(w2_distance(points[a]->dist, points[b]->dist));
    return out;
}

// Quantile with linear interpolation between order statistics at q * (n - 1).
inline double linear_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}
} // namespace detail

/// 0.1-quantile of all pairwise W2 distances among stored points.
inline double suggest_threshold(const KnowledgeBase& kb) {
    require(kb.stored_count() >= 2, "suggest_threshold: need at least two stored points");
    return detail::linear_quantile(detail::pairwise_w2(kb), 0.1);
}

/// Largest pairwise W2 distance among stored points.
inline double fgcs_diameter(const KnowledgeBase& kb) {
    require(kb.stored_count() >= 1, "fgcs_diameter: knowledge base is empty");
    const auto d = detail::pairwise_w2(kb);
    return d.empty() ? 0.0 : *std::max_element(d.begin(), d.end());
}

/// Training configuration used for slot `prior_index` of task `task_index`.
inline TrainConfig slot_train_config(const TrainConfig& cfg, std::size_t task_index, std::size_t prior_index) {
    TrainConfig out = cfg;
    out.seed = derive_seed(cfg.seed, 0xfc65, task_index, prior_index);
    return out;
}

/// One knowledge-base update for a new task. Each of the m slots is trained
/// from the matching effective posterior of the previous task; the result is
/// stored when its W2 distance to every stored point is at least `d`, and
/// otherwise recorded as a substitution by the nearest stored point. The
/// first task stores all m posteriors.
inline KnowledgeBase fgcs_update(const KnowledgeBase& kb, const TaskDataset& data, double d,
                                 const TrainConfig& cfg) {
    require(!std::isnan(d) && d >= 0.0, "fgcs_update: threshold d must be >= 0");
    require(!data.empty(), "fgcs_update: empty dataset");
    detail::check_dim(static_cast<Eigen::Index>(kb.arch().input_dim),
                      static_cast<Eigen::Index>(data.dim()), "fgcs_update");
    cfg.validate();

    const std::size_t task_index = kb.num_tasks() + 1;
    const std::size_t m = kb.m();

    // The m fits are independent; only the store-or-substitute pass below is
    // order dependent.
    std::vector<std::future<DiagGaussian>> fits;
    fits.reserve(m);
    for (std::size_t j = 0; j < m; ++j) {
        const DiagGaussian& prior = kb.chained_prior(j);
        fits.push_back(std::async(std::launch::async, [&, j, prior_ptr = &prior] {
            return train_posterior(*prior_ptr, data, kb.arch(), slot_train_config(cfg, task_index, j));
        }));
    }
    std::vector<DiagGaussian> posteriors;
    posteriors.reserve(m);
    for (auto& f : fits) posteriors.push_back(f.get());

    KnowledgeBase next = kb;
    next.tasks_.push_back(TaskEntry{task_index, {}, {}});
    for (std::size_t j = 0; j < m; ++j) {
        bool store = true;
        NearestPoint nearest{0, 0.0};
        if (task_index > 1) {
            nearest = nearest_extreme(next, posteriors[j]);
            store = nearest.distance >= d;
        }
        TaskEntry& entry = next.tasks_.back();
        if (store)
            entry.stored.push_back(ExtremePoint{next.next_id_++, task_index, j, std::move(posteriors[j])});
        else
            entry.substitutions.push_back(SubstitutionRecord{task_index, j, nearest.id});
    }
    const std::size_t before = next.buffer_history_.empty() ? 0 : next.buffer_history_.back();
    next.buffer_history_.push_back(before + next.tasks_.back().stored.size());
    next.priors_.clear();
    return next;
}

} // namespace ibcl
