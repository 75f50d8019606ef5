#pragma once

// Zero-shot preference adaptation: a probability vector over tasks becomes
// convex-combination weights over the knowledge base's extreme points, the
// resulting Gaussian mixture, and that mixture's highest-density region.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"
#include "gauss.hpp"
#include "knowledge_base.hpp"

namespace ibcl {

inline constexpr double kSimplexTolerance = 1e-9;

/// Trade-off preference: one non-negative weight per task, summing to 1.
/// Zero entries are allowed and exclude the task entirely.
class Preference {
public:
    Preference() = default;

    explicit Preference(std::vector<double> weights, double tolerance = kSimplexTolerance)
        : w_(std::move(weights)) {
        require(!w_.empty(), "Preference: no weights");
        double total = 0.0;
        for (double x : w_) {
            require(std::isfinite(x) && x >= 0.0, "Preference: weights must be finite and non-negative");
            total += x;
        }
        require(std::abs(total - 1.0) <= tolerance, "Preference: weights must sum to 1");
    }

    static Preference indicator(std::size_t num_tasks, std::size_t task_index) {
        require(task_index >= 1 && task_index <= num_tasks, "Preference::indicator: task out of range");
        std::vector<double> w(num_tasks, 0.0);
        w[task_index - 1] = 1.0;
        return Preference(std::move(w));
    }

    const std::vector<double>& weights() const noexcept { return w_; }
    std::size_t size() const noexcept { return w_.size(); }
    /// Weight of 1-based task `task_index`.
    double operator[](std::size_t task_index) const { return w_.at(task_index - 1); }

    /// Task i is weakly preferred to task j.
    bool prefers(std::size_t i, std::size_t j) const { return (*this)[i] >= (*this)[j]; }

    friend bool operator==(const Preference&, const Preference&) = default;

private:
    std::vector<double> w_;
};

/// Number of extreme-point slots per task, in task order.
using SlotLayout = std::vector<std::size_t>;

inline SlotLayout slot_layout(const KnowledgeBase& kb) { return SlotLayout(kb.num_tasks(), kb.m()); }

/// Equal split of each task's weight over that task's slots, flattened task by
/// task: beta = w_k / m_k.
inline std::vector<double> beta_from_preference(const SlotLayout& layout, const Preference& w) {
    require(w.size() == layout.size(), "beta_from_preference: preference has " + std::to_string(w.size()) +
                                           " weights for " + std::to_string(layout.size()) + " tasks");
    std::vector<double> beta;
    for (std::size_t k = 0; k < layout.size(); ++k) {
        require(layout[k] >= 1, "beta_from_preference: task without slots");
        for (std::size_t j = 0; j < layout[k]; ++j)
            beta.push_back(w.weights()[k] / static_cast<double>(layout[k]));
    }
    return beta;
}

/// Group sum per task: the preference equivalent to a slot weighting.
inline Preference preference_from_beta(const SlotLayout& layout, const std::vector<double>& beta,
                                       double tolerance = kSimplexTolerance) {
    const std::size_t slots = std::accumulate(layout.begin(), layout.end(), std::size_t{0});
    require(beta.size() == slots, "preference_from_beta: expected " + std::to_string(slots) + " slot weights");
    double total = 0.0;
    for (double b : beta) {
        require(std::isfinite(b) && b >= 0.0, "preference_from_beta: negative slot weight");
        total += b;
    }
    require(std::abs(total - 1.0) <= tolerance, "preference_from_beta: slot weights must sum to 1");
    std::vector<double> w;
    std::size_t pos = 0;
    for (std::size_t count : layout) {
        double s = 0.0;
        for (std::size_t j = 0; j < count; ++j) s += beta[pos++];
        w.push_back(s);
    }
    return Preference(std::move(w), tolerance);
}

/// Slot weight routed to the point that represents the slot.
struct SlotWeight {
    std::size_t task_index;
    std::size_t prior_index;
    PointId point_id;
    double beta;
};

inline std::vector<SlotWeight> beta_allocation(const KnowledgeBase& kb, const Preference& w) {
    const std::vector<double> beta = beta_from_preference(slot_layout(kb), w);
    std::vector<SlotWeight> out;
    out.reserve(beta.size());
    std::size_t pos = 0;
    for (std::size_t k = 1; k <= kb.num_tasks(); ++k)
        for (std::size_t j = 0; j < kb.m(); ++j)
            out.push_back(SlotWeight{k, j, kb.effective_point_id(k, j), beta[pos++]});
    return out;
}

/// Preference-weighted mixture over the knowledge base. Slots substituted by
/// the same point are merged; zero-weight points are dropped. Components come
/// out in point-id order.
inline GaussMixture qhat(const KnowledgeBase& kb, const Preference& w) {
    require(kb.num_tasks() >= 1, "qhat: knowledge base has no tasks");
    std::map<PointId, double> mass;
    double total = 0.0;
    for (const SlotWeight& s : beta_allocation(kb, w)) {
        if (s.beta <= 0.0) continue;
        mass[s.point_id] += s.beta;
        total += s.beta;
    }
    std::vector<GaussMixture::Component> comps;
    comps.reserve(mass.size());
    // Dividing by the total only absorbs rounding of an already validated simplex.
    for (const auto& [id, beta] : mass) comps.push_back({beta / total, kb.point(id).dist});
    return GaussMixture(std::move(comps));
}

/// Implicit highest-density region {theta : log q(theta) >= log_threshold}.
struct HdrRegion {
    GaussMixture mixture;
    double alpha = 0.0;
    double log_threshold = -std::numeric_limits<double>::infinity();
    std::size_t n_mc = 0;
};

inline constexpr std::size_t kDefaultHdrSamples = 20000;

/// Monte-Carlo HDR: the threshold is the largest value t for which at least a
/// (1 - alpha) fraction of n_mc mixture draws has log-density >= t.
inline HdrRegion compute_hdr(const GaussMixture& mix, double alpha, std::size_t n_mc, std::uint64_t seed) {
    require(alpha >= 0.0 && alpha <= 1.0, "compute_hdr: alpha must lie in [0, 1]");
    require(n_mc >= 1000, "compute_hdr: n_mc must be >= 1000");
    HdrRegion hdr{mix, alpha, -std::numeric_limits<double>::infinity(), n_mc};
    if (alpha == 0.0) return hdr;

    MixtureSampler draw(mix, seed);
    std::vector<double> logq(n_mc);
    for (auto& v : logq) v = mixture_log_density(mix, draw());
    const auto k = std::min(static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n_mc) + 1e-9)), n_mc - 1);
    std::nth_element(logq.begin(), logq.begin() + static_cast<std::ptrdiff_t>(k), logq.end());
    hdr.log_threshold = logq[k];
    return hdr;
}

inline bool hdr_contains(const HdrRegion& hdr, const Vec& theta) {
    return mixture_log_density(hdr.mixture, theta) >= hdr.log_threshold;
}

struct HdrSamples {
    std::vector<Vec> models;
    std::size_t proposals = 0;
};

/// Rejection sampling from the mixture restricted to the region.
inline HdrSamples sample_models_from_hdr(const HdrRegion& hdr, std::size_t n, std::uint64_t seed) {
    require(n >= 1, "sample_models_from_hdr: n must be >= 1");
    require(hdr.alpha < 1.0, "sample_models_from_hdr: alpha = 1 leaves an empty region");
    const auto budget = static_cast<std::size_t>(std::ceil(100.0 * static_cast<double>(n) / (1.0 - hdr.alpha)));
    MixtureSampler draw(hdr.mixture, seed);
    HdrSamples out;
    out.models.reserve(n);
    while (out.models.size() < n) {
        if (out.proposals >= budget)
            throw RuntimeError("sample_models_from_hdr: gave up after " + std::to_string(budget) + " proposals");
        Vec theta = draw();
        ++out.proposals;
        if (hdr_contains(hdr, theta)) out.models.push_back(std::move(theta));
    }
    return out;
}

/// Spread (max - min) of Shannon entropy across a task's effective posteriors.
inline double epistemic_uncertainty(const KnowledgeBase& kb, std::size_t task_index) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t j = 0; j < kb.m(); ++j) {
        const double h = entropy(kb.effective_posterior(task_index, j));
        lo = std::min(lo, h);
        hi = std::max(hi, h);
    }
    return hi - lo;
}

/// Weights that favour tasks with lower epistemic uncertainty:
/// w_s = (sum EU - EU_s) / sum_t (sum EU - EU_t).
inline Preference eu_weights(const std::vector<double>& eu) {
    require(!eu.empty(), "eu_weights: no tasks");
    for (double e : eu) require(std::isfinite(e) && e >= 0.0, "eu_weights: EU values must be non-negative");
    const std::size_t k = eu.size();
    if (k == 1) return Preference({1.0});
    const double total = std::accumulate(eu.begin(), eu.end(), 0.0);
    const double denom = static_cast<double>(k - 1) * total;
    if (denom == 0.0) return Preference(std::vector<double>(k, 1.0 / static_cast<double>(k)));
    std::vector<double> w(k);
    for (std::size_t s = 0; s < k; ++s) w[s] = (total - eu[s]) / denom;
    return Preference(std::move(w));
}

} // namespace ibcl
