#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "microsegnet/core.hpp"
#include "microsegnet/edt.hpp"

namespace microsegnet {

// Dice coefficient 2|G n P| / (|G| + |P|). Both masks empty -> 1.0 (perfect
// agreement on "nothing there").
inline double dice(const BinaryMask& g, const BinaryMask& p) {
    if (!g.labels.same_shape(p.labels)) throw std::invalid_argument("dice: shape mismatch");
    std::size_t inter = 0, ga = 0, pa = 0;
    for (std::size_t i = 0; i < g.labels.size(); ++i) {
        const bool gi = g.labels.data()[i] == 1;
        const bool pi = p.labels.data()[i] == 1;
        inter += (gi && pi);
        ga += gi;
        pa += pi;
    }
    if (ga + pa == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ga + pa);
}

// Dice restricted to the pixels where region == 1. Restricting to an
// all-ones region recovers plain dice exactly. Used for the hard/easy-region
// breakdown.
inline double dice_in_region(const BinaryMask& g, const BinaryMask& p, const BinaryMask& region) {
    if (!g.labels.same_shape(p.labels) || !g.labels.same_shape(region.labels))
        throw std::invalid_argument("dice_in_region: shape mismatch");
    std::size_t inter = 0, ga = 0, pa = 0;
    for (std::size_t i = 0; i < g.labels.size(); ++i) {
        if (region.labels.data()[i] != 1) continue;
        const bool gi = g.labels.data()[i] == 1;
        const bool pi = p.labels.data()[i] == 1;
        inter += (gi && pi);
        ga += gi;
        pa += pi;
    }
    if (ga + pa == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ga + pa);
}

// Foreground pixels with at least one 4-neighbor that is background or lies
// beyond the image edge.
inline std::vector<std::pair<int, int>> extract_boundary(const BinaryMask& mask) {
    std::vector<std::pair<int, int>> out;
    const int rows = mask.rows(), cols = mask.cols();
    const auto bg = [&](int r, int c) {
        if (r < 0 || r >= rows || c < 0 || c >= cols) return true;  // image edge counts
        return mask.labels(r, c) != 1;
    };
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            if (mask.labels(r, c) != 1) continue;
            if (bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1))
                out.emplace_back(r, c);
        }
    return out;
}

// q-th quantile (q in [0,1]) with linear interpolation between order
// statistics: rank = q*(n-1), value = lerp between the bracketing samples.
inline double percentile_linear(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile_linear: empty sample");
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

struct Hd95Options {
    // false: max of the two directed 95th percentiles (the prevailing
    // convention). true: single 95th percentile over the pooled directed
    // distances from both boundaries.
    bool pooled = false;
    double percentile = 0.95;
};

namespace detail {

// Directed distances from every boundary point of `from` to the nearest
// boundary point of `to`, in millimeters.
inline std::vector<double> directed_boundary_distances(
    const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
    int rows, int cols, const Spacing& sp) {
    Array2D<std::uint8_t> sources(rows, cols, 0);
    for (const auto& [r, c] : to) sources(r, c) = 1;
    const auto d2 = squared_distance_transform(sources, sp.row_mm, sp.col_mm);
    std::vector<double> out;
    out.reserve(from.size());
    for (const auto& [r, c] : from) out.push_back(std::sqrt(d2(r, c)));
    return out;
}

}  // namespace detail

// 95th-percentile Hausdorff distance between the boundaries of G and P in
// millimeters, anisotropic spacing respected. Throws on an empty boundary;
// an empty mask has no surface distance, and neither 0 nor infinity would be
// honest.
inline double hd95(const BinaryMask& g, const BinaryMask& p, const Spacing& spacing,
                   const Hd95Options& opts = {}) {
    if (!g.labels.same_shape(p.labels)) throw std::invalid_argument("hd95: shape mismatch");
    const auto gb = extract_boundary(g);
    const auto pb = extract_boundary(p);
    if (gb.empty() || pb.empty())
        throw std::invalid_argument("hd95: empty boundary (mask has no foreground)");
    auto d_gp = detail::directed_boundary_distances(gb, pb, g.rows(), g.cols(), spacing);
    auto d_pg = detail::directed_boundary_distances(pb, gb, g.rows(), g.cols(), spacing);
    if (opts.pooled) {
        d_gp.insert(d_gp.end(), d_pg.begin(), d_pg.end());
        return percentile_linear(std::move(d_gp), opts.percentile);
    }
    return std::max(percentile_linear(std::move(d_gp), opts.percentile),
                    percentile_linear(std::move(d_pg), opts.percentile));
}

// Threshold a probability map into a prediction mask. p > threshold is
// foreground.
inline BinaryMask binarize(const ProbabilityMap& p, const Spacing& spacing,
                           double threshold = 0.5) {
    BinaryMask out;
    out.labels = Array2D<std::uint8_t>(p.rows(), p.cols());
    out.spacing_mm = spacing;
    for (std::size_t i = 0; i < p.probs.size(); ++i)
        out.labels.data()[i] = p.probs.data()[i] > threshold ? 1 : 0;
    return out;
}

}  // namespace microsegnet
