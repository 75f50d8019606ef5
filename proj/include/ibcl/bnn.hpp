#pragma once

// Mean-field variational inference for a one-hidden-layer Bayesian binary
// classifier (ReLU hidden layer, single sigmoid output). Gradients are
// hand-derived; the parameter vector layout is
//   [W1 (hidden x input, row-major) | b1 | w2 (hidden) | b2]
// and with hidden == 0 the model collapses to logistic regression
//   [w (input) | b].
// Biases are omitted from the layout when `bias` is false.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "gauss.hpp"
#include "random.hpp"

namespace ibcl {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct BnnArchitecture {
    std::size_t input_dim = 512;
    std::size_t hidden_dim = 64;
    bool bias = true;

    static constexpr std::size_t output_dim = 1;

    void validate() const {
        require(input_dim >= 1, "BnnArchitecture: input_dim must be >= 1");
    }

    bool linear() const noexcept { return hidden_dim == 0; }

    std::size_t param_count() const noexcept {
        const std::size_t b = bias ? 1 : 0;
        if (linear()) return input_dim + b;
        return input_dim * hidden_dim + b * hidden_dim + hidden_dim + b;
    }

    // Offsets into the flat parameter vector.
    std::size_t w1_offset() const noexcept { return 0; }
    std::size_t b1_offset() const noexcept { return input_dim * hidden_dim; }
    std::size_t w2_offset() const noexcept {
        return linear() ? 0 : b1_offset() + (bias ? hidden_dim : 0);
    }
    std::size_t b2_offset() const noexcept {
        return linear() ? input_dim : w2_offset() + hidden_dim;
    }

    friend bool operator==(const BnnArchitecture&, const BnnArchitecture&) = default;
};

/// Labeled binary classification data; labels are 0 or 1.
class TaskDataset {
public:
    TaskDataset() = default;

    TaskDataset(Mat features, Vec labels) : x_(std::move(features)), y_(std::move(labels)) {
        require(x_.rows() == y_.size(), "TaskDataset: feature rows and label count differ");
        require(x_.allFinite(), "TaskDataset: non-finite feature value");
        for (Eigen::Index i = 0; i < y_.size(); ++i)
            require(y_[i] == 0.0 || y_[i] == 1.0, "TaskDataset: labels must be 0 or 1");
    }

    const Mat& features() const noexcept { return x_; }
    const Vec& labels() const noexcept { return y_; }
    std::size_t size() const noexcept { return static_cast<std::size_t>(y_.size()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(x_.cols()); }
    bool empty() const noexcept { return y_.size() == 0; }

    TaskDataset subset(const std::vector<std::size_t>& rows) const {
        Mat x(static_cast<Eigen::Index>(rows.size()), x_.cols());
        Vec y(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            x.row(static_cast<Eigen::Index>(r)) = x_.row(static_cast<Eigen::Index>(rows[r]));
            y[static_cast<Eigen::Index>(r)] = y_[static_cast<Eigen::Index>(rows[r])];
        }
        return TaskDataset(std::move(x), std::move(y));
    }

private:
    Mat x_;
    Vec y_;
};

struct TrainConfig {
    double learning_rate = 5e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 50;
    std::size_t mc_samples = 4;
    std::uint64_t seed = 0;

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate),
                "TrainConfig: learning_rate must be > 0");
        require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
        require(epochs >= 1, "TrainConfig: epochs must be >= 1");
        require(mc_samples >= 1, "TrainConfig: mc_samples must be >= 1");
    }
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Inverse of softplus for s > 0.
inline double softplus_inv(double s) { return s + std::log(-std::expm1(-s)); }

/// q(theta) = N(mu, softplus(rho)^2); the unconstrained form the optimizer sees.
struct VariationalPosterior {
    Vec mu;
    Vec rho;

    static VariationalPosterior from_gaussian(const DiagGaussian& g) {
        VariationalPosterior p{g.mean(), Vec(g.dim())};
        for (Eigen::Index d = 0; d < g.dim(); ++d) p.rho[d] = softplus_inv(g.stdev()[d]);
        return p;
    }

    Vec stdev() const { return rho.unaryExpr([](double r) { return softplus(r); }); }

    DiagGaussian to_gaussian() const { return DiagGaussian(mu, stdev()); }
};

/// Closed-form KL(q || p) between diagonal Gaussians.
inline double kl_diag_gauss(const DiagGaussian& q, const DiagGaussian& p) {
    detail::check_dim(q.dim(), p.dim(), "kl_diag_gauss");
    double kl = 0.0;
    for (Eigen::Index d = 0; d < q.dim(); ++d) {
        const double sq = q.stdev()[d], sp = p.stdev()[d];
        const double dm = q.mean()[d] - p.mean()[d];
        kl += std::log(sp / sq) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    return std::max(kl, 0.0);
}

/// Pre-sigmoid outputs for every row of `x` under one weight vector.
inline Vec logits(const Vec& weights, const Mat& x, const BnnArchitecture& arch) {
    detail::check_dim(static_cast<Eigen::Index>(arch.param_count()), weights.size(), "logits");
    detail::check_dim(static_cast<Eigen::Index>(arch.input_dim), x.cols(), "logits");
    const auto I = static_cast<Eigen::Index>(arch.input_dim);
    const auto H = static_cast<Eigen::Index>(arch.hidden_dim);
    const double b2 = arch.bias ? weights[static_cast<Eigen::Index>(arch.b2_offset())] : 0.0;
    if (arch.linear()) return (x * weights.head(I)).array() + b2;
    Eigen::Map<const RowMat> w1(weights.data(), H, I);
    Mat h = x * w1.transpose();
    if (arch.bias) h.rowwise() += weights.segment(static_cast<Eigen::Index>(arch.b1_offset()), H).transpose();
    h = h.cwiseMax(0.0);
    return (h * weights.segment(static_cast<Eigen::Index>(arch.w2_offset()), H)).array() + b2;
}

namespace detail {

// Sum over the batch of log Bernoulli(y | sigmoid(f(x))) and its gradient with
// respect to the flat weight vector (accumulated into `grad`).
inline double loglik_and_grad(const Vec& w, const TaskDataset& batch, const BnnArchitecture& arch,
                              Vec& grad) {
    const Mat& x = batch.features();
    const Vec& y = batch.labels();
    const auto I = static_cast<Eigen::Index>(arch.input_dim);
    const auto H = static_cast<Eigen::Index>(arch.hidden_dim);
    const double b2 = arch.bias ? w[static_cast<Eigen::Index>(arch.b2_offset())] : 0.0;

    Mat h;
    Vec z;
    if (arch.linear()) {
        z = (x * w.head(I)).array() + b2;
    } else {
        Eigen::Map<const RowMat> w1(w.data(), H, I);
        h = x * w1.transpose();
        if (arch.bias) h.rowwise() += w.segment(static_cast<Eigen::Index>(arch.b1_offset()), H).transpose();
        h = h.cwiseMax(0.0);
        z = (h * w.segment(static_cast<Eigen::Index>(arch.w2_offset()), H)).array() + b2;
    }

    double ll = 0.0;
    Vec dz(z.size());
    for (Eigen::Index n = 0; n < z.size(); ++n) {
        ll += y[n] * z[n] - softplus(z[n]);
        dz[n] = y[n] - sigmoid(z[n]);
    }

    if (arch.bias) grad[static_cast<Eigen::Index>(arch.b2_offset())] += dz.sum();
    if (arch.linear()) {
        grad.head(I) += x.transpose() * dz;
        return ll;
    }
    const Vec w2 = w.segment(static_cast<Eigen::Index>(arch.w2_offset()), H);
    grad.segment(static_cast<Eigen::Index>(arch.w2_offset()), H) += h.transpose() * dz;
    Mat dh = dz * w2.transpose();
    dh = dh.cwiseProduct((h.array() > 0.0).cast<double>().matrix());
    Eigen::Map<RowMat> gw1(grad.data(), H, I);
    gw1 += dh.transpose() * x;
    if (arch.bias) grad.segment(static_cast<Eigen::Index>(arch.b1_offset()), H) += dh.colwise().sum().transpose();
    return ll;
}

} // namespace detail

struct ElboGrad {
    double elbo = 0.0;
    Vec grad_mu;
    Vec grad_rho;
};

/// Reparameterized Monte-Carlo ELBO for one minibatch, scaled so that the
/// likelihood term estimates the full-data sum over `total_n` points, together
/// with its exact gradient for the drawn noise. The noise depends only on
/// `seed`, so the returned value is a deterministic function of (mu, rho).
inline ElboGrad elbo_and_grad(const VariationalPosterior& post, const DiagGaussian& prior,
                              const TaskDataset& batch, const BnnArchitecture& arch,
                              std::size_t mc_samples, std::uint64_t seed, std::size_t total_n) {
    const auto D = static_cast<Eigen::Index>(arch.param_count());
    detail::check_dim(D, post.mu.size(), "elbo_and_grad");
    detail::check_dim(D, post.rho.size(), "elbo_and_grad");
    detail::check_dim(D, prior.dim(), "elbo_and_grad");
    detail::check_dim(static_cast<Eigen::Index>(arch.input_dim),
                      static_cast<Eigen::Index>(batch.dim()), "elbo_and_grad");
    require(!batch.empty(), "elbo_and_grad: empty batch");
    require(mc_samples >= 1, "elbo_and_grad: mc_samples must be >= 1");
    require(total_n >= batch.size(), "elbo_and_grad: total_n smaller than batch");
    require(post.mu.allFinite() && post.rho.allFinite(), "elbo_and_grad: non-finite posterior");

    const Vec sigma = post.stdev();
    const Vec dsigma = post.rho.unaryExpr([](double r) { return sigmoid(r); });
    const double scale = static_cast<double>(total_n) / static_cast<double>(batch.size());
    const double inv_s = 1.0 / static_cast<double>(mc_samples);

    ElboGrad out{0.0, Vec::Zero(D), Vec::Zero(D)};
    Rng rng(seed);
    std::normal_distribution<double> normal;
    Vec eps(D), gtheta(D);
    double ll = 0.0;
    for (std::size_t s = 0; s < mc_samples; ++s) {
        for (Eigen::Index d = 0; d < D; ++d) eps[d] = normal(rng);
        const Vec theta = post.mu + sigma.cwiseProduct(eps);
        gtheta.setZero();
        ll += detail::loglik_and_grad(theta, batch, arch, gtheta);
        out.grad_mu += gtheta;
        out.grad_rho += gtheta.cwiseProduct(eps);
    }
    ll *= scale * inv_s;
    out.grad_mu *= scale * inv_s;
    out.grad_rho = out.grad_rho.cwiseProduct(dsigma) * (scale * inv_s);

    const DiagGaussian q(post.mu, sigma);
    const double kl = kl_diag_gauss(q, prior);
    const Vec var_p = prior.stdev().array().square();
    out.grad_mu -= (post.mu - prior.mean()).cwiseQuotient(var_p);
    out.grad_rho -= ((-sigma.cwiseInverse()) + sigma.cwiseQuotient(var_p)).cwiseProduct(dsigma);

    out.elbo = ll - kl;
    return out;
}

/// Process-wide count of completed train_posterior calls. Query paths must
/// leave it untouched.
inline std::atomic<std::uint64_t>& training_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

struct TrainResult {
    DiagGaussian posterior;
    std::vector<double> epoch_mean_elbo;
};

/// Fits q to prior x likelihood by Adam ascent on the ELBO, starting at the
/// prior. Deterministic given cfg.seed.
inline TrainResult train_posterior_traced(const DiagGaussian& prior, const TaskDataset& data,
                                          const BnnArchitecture& arch, const TrainConfig& cfg) {
    arch.validate();
    cfg.validate();
    require(!data.empty(), "train_posterior: empty dataset");
    detail::check_dim(static_cast<Eigen::Index>(arch.param_count()), prior.dim(), "train_posterior");
    detail::check_dim(static_cast<Eigen::Index>(arch.input_dim),
                      static_cast<Eigen::Index>(data.dim()), "train_posterior");

    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    VariationalPosterior post = VariationalPosterior::from_gaussian(prior);
    const Eigen::Index D = post.mu.size();
    Vec m_mu = Vec::Zero(D), v_mu = Vec::Zero(D), m_rho = Vec::Zero(D), v_rho = Vec::Zero(D);

    const std::size_t n = data.size();
    const std::size_t bs = std::min(cfg.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult result;
    result.epoch_mean_elbo.reserve(cfg.epochs);
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0x5eed, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double elbo_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t stop = std::min(start + bs, n);
            const TaskDataset batch = data.subset({order.begin() + static_cast<std::ptrdiff_t>(start),
                                                   order.begin() + static_cast<std::ptrdiff_t>(stop)});
            ++step;
            const ElboGrad eg = elbo_and_grad(post, prior, batch, arch, cfg.mc_samples,
                                              derive_seed(cfg.seed, 0x57e9, step), n);
            if (!std::isfinite(eg.elbo) || !eg.grad_mu.allFinite() || !eg.grad_rho.allFinite())
                throw RuntimeError("train_posterior: non-finite ELBO at step " + std::to_string(step));
            elbo_sum += eg.elbo;
            ++batches;

            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            auto adam = [&](Vec& param, Vec& m, Vec& v, const Vec& g) {
                m = beta1 * m + (1.0 - beta1) * g;
                v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
                param.array() += cfg.learning_rate * (m.array() / c1) /
                                 ((v.array() / c2).sqrt() + adam_eps);
            };
            adam(post.mu, m_mu, v_mu, eg.grad_mu);
            adam(post.rho, m_rho, v_rho, eg.grad_rho);
            if (!post.mu.allFinite() || !post.rho.allFinite())
                throw RuntimeError("train_posterior: diverged at step " + std::to_string(step));
        }
        result.epoch_mean_elbo.push_back(elbo_sum / static_cast<double>(batches));
    }
    result.posterior = post.to_gaussian();
    training_counter().fetch_add(1, std::memory_order_relaxed);
    return result;
}

inline DiagGaussian train_posterior(const DiagGaussian& prior, const TaskDataset& data,
                                    const BnnArchitecture& arch, const TrainConfig& cfg) {
    return train_posterior_traced(prior, data, arch, cfg).posterior;
}

/// One deterministic network drawn from the posterior.
inline Vec sample_model(const DiagGaussian& post, std::uint64_t seed) {
    return sample(post, seed, 1).front();
}

/// Fraction of points classified correctly; sigmoid >= 0.5 (logit >= 0)
/// predicts class 1.
inline double accuracy(const Vec& weights, const TaskDataset& data, const BnnArchitecture& arch) {
    require(!data.empty(), "accuracy: empty dataset");
    const Vec z = logits(weights, data.features(), arch);
    std::size_t correct = 0;
    for (Eigen::Index n = 0; n < z.size(); ++n) {
        const double pred = z[n] >= 0.0 ? 1.0 : 0.0;
        if (pred == data.labels()[n]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

} // namespace ibcl
