#pragma once

// Diagonal Gaussians over a flattened parameter vector and finite mixtures of
// them. Everything is computed in log space; densities over a few thousand
// dimensions underflow otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "random.hpp"

namespace ibcl {

using Vec = Eigen::VectorXd;

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// Independent normal over every coordinate: N(mean, diag(stdev^2)).
class DiagGaussian {
public:
    DiagGaussian() = default;

    DiagGaussian(Vec mean, Vec stdev) : mean_(std::move(mean)), stdev_(std::move(stdev)) {
        require(mean_.size() == stdev_.size(), "DiagGaussian: mean and stdev lengths differ");
        for (Eigen::Index d = 0; d < stdev_.size(); ++d) {
            require(std::isfinite(mean_[d]), "DiagGaussian: non-finite mean");
            require(stdev_[d] > 0.0 && std::isfinite(stdev_[d]),
                    "DiagGaussian: stdev must be positive and finite");
        }
    }

    /// N(0, s^2 I) in `dim` dimensions.
    static DiagGaussian isotropic(Eigen::Index dim, double s, double mean = 0.0) {
        return DiagGaussian(Vec::Constant(dim, mean), Vec::Constant(dim, s));
    }

    const Vec& mean() const noexcept { return mean_; }
    const Vec& stdev() const noexcept { return stdev_; }
    Eigen::Index dim() const noexcept { return mean_.size(); }

    friend bool operator==(const DiagGaussian& a, const DiagGaussian& b) {
        return a.mean_.size() == b.mean_.size() && a.mean_ == b.mean_ && a.stdev_ == b.stdev_;
    }

private:
    Vec mean_;
    Vec stdev_;
};

namespace detail {
inline void check_dim(Eigen::Index a, Eigen::Index b, const char* op) {
    if (a != b)
        throw ValidationError(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                              " vs " + std::to_string(b) + ")");
}
} // namespace detail

inline double log_density(const DiagGaussian& g, const Vec& theta) {
    detail::check_dim(g.dim(), theta.size(), "log_density");
    const Vec z = (theta - g.mean()).cwiseQuotient(g.stdev());
    return -0.5 * kLogTwoPi * static_cast<double>(g.dim()) - g.stdev().array().log().sum() -
           0.5 * z.squaredNorm();
}

/// n i.i.d. draws mean + stdev * eps.
inline std::vector<Vec> sample(const DiagGaussian& g, std::uint64_t seed, std::size_t n) {
    require(n >= 1, "sample: n must be >= 1");
    Rng rng(seed);
    std::normal_distribution<double> normal;
    std::vector<Vec> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec theta(g.dim());
        for (Eigen::Index d = 0; d < g.dim(); ++d)
            theta[d] = g.mean()[d] + g.stdev()[d] * normal(rng);
        out.push_back(std::move(theta));
    }
    return out;
}

/// Closed-form 2-Wasserstein distance between independent normals:
/// sqrt(|mu1 - mu2|^2 + |s1 - s2|^2).
inline double w2_distance(const DiagGaussian& a, const DiagGaussian& b) {
    detail::check_dim(a.dim(), b.dim(), "w2_distance");
    return std::sqrt((a.mean() - b.mean()).squaredNorm() + (a.stdev() - b.stdev()).squaredNorm());
}

/// Differential (Shannon) entropy in nats.
inline double entropy(const DiagGaussian& g) {
    return 0.5 * (kLogTwoPi + 1.0) * static_cast<double>(g.dim()) + g.stdev().array().log().sum();
}

/// Weighted finite mixture of diagonal Gaussians sharing one dimension.
class GaussMixture {
public:
    struct Component {
        double weight;
        DiagGaussian dist;
    };

    GaussMixture() = default;

    explicit GaussMixture(std::vector<Component> components) : components_(std::move(components)) {
        require(!components_.empty(), "GaussMixture: no components");
        double total = 0.0;
        for (const auto& c : components_) {
            require(c.weight >= 0.0 && std::isfinite(c.weight), "GaussMixture: negative weight");
            detail::check_dim(c.dist.dim(), components_.front().dist.dim(), "GaussMixture");
            total += c.weight;
        }
        require(std::abs(total - 1.0) <= 1e-9, "GaussMixture: weights must sum to 1");
    }

    static GaussMixture single(DiagGaussian g) { return GaussMixture({{1.0, std::move(g)}}); }

    const std::vector<Component>& components() const noexcept { return components_; }
    std::size_t size() const noexcept { return components_.size(); }
    Eigen::Index dim() const { return components_.empty() ? 0 : components_.front().dist.dim(); }

private:
    std::vector<Component> components_;
};

/// log sum_c w_c N_c(theta) via log-sum-exp.
inline double mixture_log_density(const GaussMixture& mix, const Vec& theta) {
    detail::check_dim(mix.dim(), theta.size(), "mixture_log_density");
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    terms.reserve(mix.size());
    for (const auto& c : mix.components()) {
        const double t = c.weight > 0.0 ? std::log(c.weight) + log_density(c.dist, theta)
                                        : -std::numeric_limits<double>::infinity();
        terms.push_back(t);
        best = std::max(best, t);
    }
    if (!std::isfinite(best)) return best;
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - best);
    return best + std::log(acc);
}

/// Streaming ancestral sampler: component index by weight, then a draw from
/// that component. Successive calls continue one seeded stream.
class MixtureSampler {
public:
    MixtureSampler(const GaussMixture& mix, std::uint64_t seed) : mix_(&mix), rng_(seed) {
        std::vector<double> w;
        w.reserve(mix.size());
        for (const auto& c : mix.components()) w.push_back(c.weight);
        pick_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }

    Vec operator()() {
        const DiagGaussian& g = mix_->components()[pick_(rng_)].dist;
        Vec theta(g.dim());
        for (Eigen::Index d = 0; d < g.dim(); ++d) theta[d] = g.mean()[d] + g.stdev()[d] * normal_(rng_);
        return theta;
    }

private:
    const GaussMixture* mix_;
    Rng rng_;
    std::discrete_distribution<std::size_t> pick_;
    std::normal_distribution<double> normal_;
};

inline std::vector<Vec> mixture_sample(const GaussMixture& mix, std::uint64_t seed, std::size_t n) {
    require(n >= 1, "mixture_sample: n must be >= 1");
    MixtureSampler draw(mix, seed);
    std::vector<Vec> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(draw());
    return out;
}

} // namespace ibcl
