#pragma once

#include "ganseg/ops.hpp"

#include <cmath>
#include <random>

namespace ganseg {

enum class Mode { Train, Infer };

namespace detail {

template <typename S>
void require_finite(const Tensor<S>& x, const char* op) {
    if (!x.all_finite()) {
        throw std::invalid_argument(std::string(op) + ": non-finite input");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.2), Tape<S>* tape = nullptr) {
    detail::require_finite(x, "leaky_relu");
    Tensor<S> out(x.shape());
    out.array() = (x.array() > S(0)).select(x.array(), x.array() * slope);
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = out.size();
        auto xv = x.storage();
        out.set_node(tape->record(n, {nx},
                                  [nx, n, xv, slope](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      for (std::int64_t i = 0; i < n; ++i) {
                                          acc[i] += g[i] * ((*xv)[i] > S(0) ? S(1) : slope);
                                      }
                                  }),
                     tape->id());
    }
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    return leaky_relu(x, S(0), tape);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    detail::require_finite(x, "sigmoid");
    Tensor<S> out(x.shape());
    const std::int64_t n = out.size();
    const S* xp = x.data();
    S* yp = out.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const S v = xp[i];
        if (v >= S(0)) {
            yp[i] = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            yp[i] = e / (S(1) + e);
        }
    }
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        auto yv = out.storage();
        out.set_node(tape->record(n, {nx},
                                  [nx, n, yv](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      for (std::int64_t i = 0; i < n; ++i) {
                                          const S y = (*yv)[i];
                                          acc[i] += g[i] * y * (S(1) - y);
                                      }
                                  }),
                     tape->id());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel scale/shift parameters plus running statistics. gamma and beta
/// are trainable; running stats are updated by train-mode forwards only.
template <typename S>
struct BatchNormState {
    Tensor<S> gamma;
    Tensor<S> beta;
    Tensor<S> running_mean;
    Tensor<S> running_var;
    S momentum = S(0.9);
    S eps = S(1e-5);

    BatchNormState() = default;
    explicit BatchNormState(int channels, S momentum_ = S(0.9), S eps_ = S(1e-5))
        : gamma({1, channels, 1, 1}, S(1)),
          beta({1, channels, 1, 1}, S(0)),
          running_mean({1, channels, 1, 1}, S(0)),
          running_var({1, channels, 1, 1}, S(1)),
          momentum(momentum_),
          eps(eps_) {}

    int channels() const { return gamma.shape().c; }
};

/// Train mode normalizes by batch statistics over (N,H,W) per channel and
/// updates running stats as running <- momentum*running + (1-momentum)*batch.
/// Infer mode is a deterministic per-channel affine map from running stats.
template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, BatchNormState<S>& state, Mode mode,
                    Tape<S>* tape = nullptr) {
    const Shape4 xs = x.shape();
    const int C = xs.c;
    if (C != state.channels()) {
        throw std::invalid_argument("batchnorm: input " + xs.str() + " does not match " +
                                    std::to_string(state.channels()) + " channels");
    }
    const std::int64_t m = static_cast<std::int64_t>(xs.n) * xs.h * xs.w;
    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;

    std::vector<S> mu(C), inv_std(C);
    if (mode == Mode::Train) {
        if (m < 2) {
            throw std::invalid_argument(
                "batchnorm: train mode needs at least 2 values per channel, got " +
                std::to_string(m));
        }
        for (int c = 0; c < C; ++c) {
            double s1 = 0.0, s2 = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const S* p = x.data() + x.index(n, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    s1 += p[i];
                    s2 += static_cast<double>(p[i]) * p[i];
                }
            }
            const double mean_c = s1 / static_cast<double>(m);
            const double var_c = std::max(0.0, s2 / static_cast<double>(m) - mean_c * mean_c);
            mu[c] = static_cast<S>(mean_c);
            inv_std[c] = static_cast<S>(1.0 / std::sqrt(var_c + static_cast<double>(state.eps)));
            state.running_mean.data()[c] = state.momentum * state.running_mean.data()[c] +
                                           (S(1) - state.momentum) * static_cast<S>(mean_c);
            state.running_var.data()[c] = state.momentum * state.running_var.data()[c] +
                                          (S(1) - state.momentum) * static_cast<S>(var_c);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[c] = state.running_mean.data()[c];
            inv_std[c] =
                S(1) / std::sqrt(state.running_var.data()[c] + state.eps);
        }
    }

    Tensor<S> out(xs);
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < C; ++c) {
            const S g = state.gamma.data()[c], b = state.beta.data()[c];
            const S* p = x.data() + x.index(n, c, 0, 0);
            S* q = out.data() + out.index(n, c, 0, 0);
            for (std::int64_t i = 0; i < plane; ++i) {
                q[i] = g * (p[i] - mu[c]) * inv_std[c] + b;
            }
        }
    }

    const int nx = detail::node_on(x, tape);
    const int ng = detail::node_on(state.gamma, tape);
    const int nb = detail::node_on(state.beta, tape);
    if (detail::any_recorded({nx, ng, nb})) {
        auto xv = x.storage();
        auto gammav = state.gamma.storage();
        const int N = xs.n;
        const bool train = (mode == Mode::Train);
        out.set_node(tape->record(
            out.size(), {nx, ng, nb},
            [=, mu = std::move(mu), inv_std = std::move(inv_std)](const S* g, Tape<S>& t) {
                for (int c = 0; c < C; ++c) {
                    // per-channel reductions over (N,H,W)
                    double sg = 0.0, sgx = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
                        const S* gp = g + off;
                        const S* xp = xv->data() + off;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            sg += gp[i];
                            sgx += static_cast<double>(gp[i]) * (xp[i] - mu[c]) * inv_std[c];
                        }
                    }
                    if (ng >= 0) t.grad_accum(ng)[c] += static_cast<S>(sgx);
                    if (nb >= 0) t.grad_accum(nb)[c] += static_cast<S>(sg);
                    if (nx >= 0) {
                        S* gx = t.grad_accum(nx);
                        const S gam = (*gammav)[c];
                        const S k = gam * inv_std[c];
                        if (train) {
                            const S mg = static_cast<S>(sg / static_cast<double>(m));
                            const S mgx = static_cast<S>(sgx / static_cast<double>(m));
                            for (int n = 0; n < N; ++n) {
                                const std::int64_t off =
                                    (static_cast<std::int64_t>(n) * C + c) * plane;
                                const S* gp = g + off;
                                const S* xp = xv->data() + off;
                                S* dst = gx + off;
                                for (std::int64_t i = 0; i < plane; ++i) {
                                    const S xhat = (xp[i] - mu[c]) * inv_std[c];
                                    dst[i] += k * (gp[i] - mg - xhat * mgx);
                                }
                            }
                        } else {
                            for (int n = 0; n < N; ++n) {
                                const std::int64_t off =
                                    (static_cast<std::int64_t>(n) * C + c) * plane;
                                const S* gp = g + off;
                                S* dst = gx + off;
                                for (std::int64_t i = 0; i < plane; ++i) dst[i] += k * gp[i];
                            }
                        }
                    }
                }
            }),
            tape->id());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Seeded RNG and parameter initialization
// ---------------------------------------------------------------------------

/// Deterministic RNG used for weight init, dataset shuffles and phantoms.
/// Gaussian samples come from Box-Muller on mt19937_64 uniforms so streams
/// are reproducible across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform() {
        // 53-bit mantissa uniform in [0,1)
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_index(std::uint64_t bound) { return eng_() % bound; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

template <typename S>
Tensor<S> init_normal(Shape4 shape, S mean, S stddev, Rng& rng) {
    Tensor<S> t(shape);
    S* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        p[i] = mean + stddev * static_cast<S>(rng.normal());
    }
    return t;
}

/// normal(mean=0, std=0.02) initialization, deterministic per seed.
template <typename S>
Tensor<S> init_weights(Shape4 shape, std::uint64_t seed, S mean = S(0), S stddev = S(0.02)) {
    Rng rng(seed);
    return init_normal(shape, mean, stddev, rng);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction over a fixed parameter list. Parameters are held
/// as aliasing tensor handles; step() reads each parameter's grad buffer and
/// updates values in place.
template <typename S>
class Adam {
  public:
    Adam(std::vector<Tensor<S>> params, S lr, S beta1 = S(0.5), S beta2 = S(0.999),
         S eps = S(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.emplace_back(p.size(), S(0));
            v_.emplace_back(p.size(), S(0));
        }
    }

    std::int64_t step_count() const { return t_; }
    S learning_rate() const { return lr_; }
    void set_learning_rate(S lr) { lr_ = lr; }
    std::size_t num_params() const { return params_.size(); }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// One update: m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
    /// p <- p - lr * m_hat / (sqrt(v_hat) + eps).
    void step() {
        ++t_;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), t_));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor<S>& p = params_[k];
            const S* g = p.grad_data();
            if (!g) {
                throw std::runtime_error("adam step before any backward: parameter " +
                                         std::to_string(k) + " has no gradient");
            }
            S* m = m_[k].data();
            S* v = v_[k].data();
            S* w = p.data();
            const std::int64_t n = p.size();
            for (std::int64_t i = 0; i < n; ++i) {
                m[i] = beta1_ * m[i] + (S(1) - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (S(1) - beta2_) * g[i] * g[i];
                const S mhat = m[i] / bc1;
                const S vhat = v[i] / bc2;
                w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    // checkpoint access
    std::vector<S>& moment1(std::size_t k) { return m_[k]; }
    std::vector<S>& moment2(std::size_t k) { return v_[k]; }
    void set_step_count(std::int64_t t) { t_ = t; }

  private:
    std::vector<Tensor<S>> params_;
    std::vector<std::vector<S>> m_, v_;
    std::int64_t t_ = 0;
    S lr_, beta1_, beta2_, eps_;
};

}  // namespace ganseg
