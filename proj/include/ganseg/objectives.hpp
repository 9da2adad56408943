#pragma once

#include "ganseg/ops.hpp"

namespace ganseg {

/// Score clamp applied before logs so a saturated discriminator cannot
/// produce -inf.
template <typename S>
constexpr S kScoreEps = S(1e-7);

/// Per-step loss components. g_total == g_adv_loss + alpha * g_l1_loss.
struct LossBundle {
    double d_loss = 0.0;
    double g_adv_loss = 0.0;
    double g_l1_loss = 0.0;
    double g_total = 0.0;
    double alpha = 0.0;
};

/// Discriminator objective: -mean(log D(real)) - mean(log(1 - D(fake))),
/// averaged over all patch positions and batch. Minimized by the D update,
/// which realizes the max-over-D side of the adversarial game.
template <typename S>
Tensor<S> d_loss(const Tensor<S>& real_scores, const Tensor<S>& fake_scores,
                 Tape<S>* tape = nullptr) {
    detail::require_same_shape(real_scores.shape(), fake_scores.shape(), "d_loss");
    if (real_scores.size() == 0) throw std::invalid_argument("d_loss: empty score map");
    const S eps = kScoreEps<S>;
    auto r = clamp(real_scores, eps, S(1) - eps, tape);
    auto f = clamp(fake_scores, eps, S(1) - eps, tape);
    auto real_term = mean(log(r, tape), tape);
    auto fake_term = mean(log(affine(f, S(-1), S(1), tape), tape), tape);
    return neg(add(real_term, fake_term, tape), tape);
}

/// Generator adversarial objective. Default is the non-saturating form
/// -mean(log D(fake)); `saturating` selects the literal +mean(log(1-D(fake)))
/// from the original min-max objective.
template <typename S>
Tensor<S> g_adv_loss(const Tensor<S>& fake_scores, Tape<S>* tape = nullptr,
                     bool saturating = false) {
    if (fake_scores.size() == 0) throw std::invalid_argument("g_adv_loss: empty score map");
    const S eps = kScoreEps<S>;
    auto f = clamp(fake_scores, eps, S(1) - eps, tape);
    if (saturating) {
        return mean(log(affine(f, S(-1), S(1), tape), tape), tape);
    }
    return neg(mean(log(f, tape), tape), tape);
}

/// Mean absolute difference between generated mask and ground truth.
template <typename S>
Tensor<S> l1_loss(const Tensor<S>& generated, const Tensor<S>& ground_truth,
                  Tape<S>* tape = nullptr) {
    detail::require_same_shape(generated.shape(), ground_truth.shape(), "l1_loss");
    return mean(abs(sub(generated, ground_truth, tape), tape), tape);
}

/// Combined generator objective adv + alpha * l1, alpha > 0.
template <typename S>
Tensor<S> g_total(const Tensor<S>& adv, const Tensor<S>& l1, S alpha, Tape<S>* tape = nullptr) {
    if (!(alpha > S(0))) {
        throw std::invalid_argument("g_total: trade-off constant alpha must be positive");
    }
    return add(adv, scale(l1, alpha, tape), tape);
}

}  // namespace ganseg
