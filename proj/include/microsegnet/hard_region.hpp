#pragma once

#include <stdexcept>

#include "microsegnet/core.hpp"
#include "microsegnet/edt.hpp"

namespace microsegnet {

// Hard region = pixels where the expert and non-expert annotations disagree
// (symmetric difference). The easy region is the complement.
inline BinaryMask compute_hard_mask(const BinaryMask& expert, const BinaryMask& nonexpert) {
    if (!expert.labels.same_shape(nonexpert.labels))
        throw std::invalid_argument("compute_hard_mask: shape mismatch");
    BinaryMask hard;
    hard.labels = Array2D<std::uint8_t>(expert.rows(), expert.cols());
    hard.spacing_mm = expert.spacing_mm;
    for (std::size_t i = 0; i < expert.labels.size(); ++i) {
        const std::uint8_t e = expert.labels.data()[i];
        const std::uint8_t n = nonexpert.labels.data()[i];
        hard.labels.data()[i] = static_cast<std::uint8_t>((e == 1) != (n == 1) ? 1 : 0);
    }
    return hard;
}

// Grow the hard region by a Euclidean disc of `px` pixels. Off by default;
// the disagreement band itself is the faithful definition, but thin XOR bands
// can under-weight boundary context.
inline BinaryMask dilate_mask(const BinaryMask& mask, double px) {
    if (px < 0.0) throw std::invalid_argument("dilate_mask: radius must be >= 0");
    if (px == 0.0) return mask;
    const auto d2 = squared_distance_transform(mask.labels);
    BinaryMask out;
    out.labels = Array2D<std::uint8_t>(mask.rows(), mask.cols());
    out.spacing_mm = mask.spacing_mm;
    const double r2 = px * px;
    for (std::size_t i = 0; i < out.labels.size(); ++i)
        out.labels.data()[i] = d2.data()[i] <= r2 ? 1 : 0;
    return out;
}

// Per-pixel weights: w_hard inside the hard region, w_easy elsewhere.
inline WeightMap build_weight_map(const BinaryMask& hard, double w_hard, double w_easy) {
    if (!(w_hard >= w_easy && w_easy >= 1.0))
        throw std::invalid_argument("build_weight_map: need w_hard >= w_easy >= 1");
    WeightMap w;
    w.weights = Array2D<double>(hard.rows(), hard.cols());
    for (std::size_t i = 0; i < hard.labels.size(); ++i)
        w.weights.data()[i] = hard.labels.data()[i] == 1 ? w_hard : w_easy;
    return w;
}

// Fraction of pixels in the hard region.
inline double hard_fraction(const BinaryMask& hard) {
    if (hard.labels.empty()) return 0.0;
    return static_cast<double>(hard.area()) / static_cast<double>(hard.labels.size());
}

}  // namespace microsegnet
