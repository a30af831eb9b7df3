#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "microsegnet/core.hpp"

namespace microsegnet {

// Probabilities are clamped to [kProbEpsilon, 1 - kProbEpsilon] before any
// log so a saturated prediction cannot produce -inf.
inline constexpr double kProbEpsilon = 1e-7;

// Loss weights for the four supervision scales, full resolution first:
// 1.0 * AG-BCE(P1) + 0.5 * BCE(P2) + 0.25 * BCE(P3) + 0.125 * BCE(P4).
inline constexpr std::array<double, 4> kScaleLossWeights = {1.0, 0.5, 0.25, 0.125};

inline double clamp_prob(double p) {
    if (p < kProbEpsilon) return kProbEpsilon;
    if (p > 1.0 - kProbEpsilon) return 1.0 - kProbEpsilon;
    return p;
}

namespace detail {

inline void require_same_shape(int pr, int pc, int yr, int yc, const std::string& what) {
    if (pr != yr || pc != yc)
        throw std::invalid_argument(what + ": shape mismatch (" + std::to_string(pr) + "x" +
                                    std::to_string(pc) + " vs " + std::to_string(yr) + "x" +
                                    std::to_string(yc) + ")");
}

}  // namespace detail

// Mean binary cross entropy over all K pixels:
//   -(1/K) sum_i [ y_i log p_i + (1 - y_i) log(1 - p_i) ]
// Accumulated in double, row-major order.
inline double bce(const ProbabilityMap& p, const BinaryMask& y) {
    detail::require_same_shape(p.rows(), p.cols(), y.rows(), y.cols(), "bce");
    const std::size_t k = p.probs.size();
    if (k == 0) throw std::invalid_argument("bce: empty maps");
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double pi = clamp_prob(static_cast<double>(p.probs.data()[i]));
        const double yi = static_cast<double>(y.labels.data()[i]);
        acc += yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi);
    }
    return -acc / static_cast<double>(k);
}

// Annotation-guided BCE: per-pixel weights w_i emphasize hard regions.
//   -(1/K) sum_i w_i [ y_i log p_i + (1 - y_i) log(1 - p_i) ]
// The per-pixel expression and the summation order match bce() exactly, so
// a unit weight map reduces this to bce() bit for bit.
inline double ag_bce(const ProbabilityMap& p, const BinaryMask& y, const WeightMap& w) {
    detail::require_same_shape(p.rows(), p.cols(), y.rows(), y.cols(), "ag_bce");
    detail::require_same_shape(p.rows(), p.cols(), w.rows(), w.cols(), "ag_bce weights");
    const std::size_t k = p.probs.size();
    if (k == 0) throw std::invalid_argument("ag_bce: empty maps");
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double wi = w.weights.data()[i];
        if (wi < 1.0) throw std::invalid_argument("ag_bce: weight < 1 at pixel " + std::to_string(i));
        const double pi = clamp_prob(static_cast<double>(p.probs.data()[i]));
        const double yi = static_cast<double>(y.labels.data()[i]);
        acc += wi * (yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
    }
    return -acc / static_cast<double>(k);
}

// Analytic gradient of ag_bce with respect to each (clamped) probability:
//   d/dp_i = -(1/K) w_i ( y_i / p_i - (1 - y_i) / (1 - p_i) )
inline Array2D<double> ag_bce_grad(const ProbabilityMap& p, const BinaryMask& y,
                                   const WeightMap& w) {
    detail::require_same_shape(p.rows(), p.cols(), y.rows(), y.cols(), "ag_bce_grad");
    detail::require_same_shape(p.rows(), p.cols(), w.rows(), w.cols(), "ag_bce_grad weights");
    const std::size_t k = p.probs.size();
    Array2D<double> g(p.rows(), p.cols());
    for (std::size_t i = 0; i < k; ++i) {
        const double wi = w.weights.data()[i];
        const double pi = clamp_prob(static_cast<double>(p.probs.data()[i]));
        const double yi = static_cast<double>(y.labels.data()[i]);
        g.data()[i] = -(wi * (yi / pi - (1.0 - yi) / (1.0 - pi))) / static_cast<double>(k);
    }
    return g;
}

// Ground truth at the four supervision scales. y2..y4 may be left empty when
// deep supervision is off.
struct MultiScaleTarget {
    BinaryMask y1;
    std::optional<BinaryMask> y2;
    std::optional<BinaryMask> y3;
    std::optional<BinaryMask> y4;
};

struct TrainingLossBreakdown {
    double total = 0.0;
    // Weighted per-scale components as they enter the sum; p2..p4 are zero
    // when deep supervision is disabled.
    double p1 = 0.0, p2 = 0.0, p3 = 0.0, p4 = 0.0;
};

// Combined training loss. With deep supervision:
//   0.125 BCE(P4,Y4) + 0.25 BCE(P3,Y3) + 0.5 BCE(P2,Y2) + 1.0 AG-BCE(P1,Y1,W)
// Without it, AG-BCE(P1,Y1,W) alone. Intermediate heads use plain BCE; the
// weight map applies only at full resolution.
inline TrainingLossBreakdown training_loss(const MultiScalePrediction& pred,
                                           const MultiScaleTarget& target, const WeightMap& w,
                                           bool deep_supervision) {
    TrainingLossBreakdown out;
    detail::require_same_shape(pred.p1.rows(), pred.p1.cols(), target.y1.rows(), target.y1.cols(),
                               "training_loss scale P1");
    out.p1 = kScaleLossWeights[0] * ag_bce(pred.p1, target.y1, w);
    if (!deep_supervision) {
        out.total = out.p1;
        return out;
    }
    const auto check = [](const std::optional<ProbabilityMap>& p,
                          const std::optional<BinaryMask>& y, const char* scale) {
        if (!p || !y)
            throw std::invalid_argument(std::string("training_loss scale ") + scale +
                                        ": missing prediction or target");
        detail::require_same_shape(p->rows(), p->cols(), y->rows(), y->cols(),
                                   std::string("training_loss scale ") + scale);
    };
    check(pred.p2, target.y2, "P2");
    check(pred.p3, target.y3, "P3");
    check(pred.p4, target.y4, "P4");
    out.p2 = kScaleLossWeights[1] * bce(*pred.p2, *target.y2);
    out.p3 = kScaleLossWeights[2] * bce(*pred.p3, *target.y3);
    out.p4 = kScaleLossWeights[3] * bce(*pred.p4, *target.y4);
    out.total = out.p4 + out.p3 + out.p2 + out.p1;
    return out;
}

}  // namespace microsegnet
