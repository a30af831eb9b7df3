#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "microsegnet/metrics.hpp"
#include "test_util.hpp"

using namespace microsegnet;
using msn_test::make_mask;
using msn_test::random_mask;

namespace {

// Independent reference for hd95: boundaries by an inline 4-neighbor rule,
// directed distances by exhaustive all-pairs search, same percentile rule.
struct BfBoundary {
    std::vector<std::pair<int, int>> pts;
};

BfBoundary bf_boundary(const BinaryMask& m) {
    BfBoundary b;
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) {
            if (m.labels(r, c) != 1) continue;
            bool edge = r == 0 || r == m.rows() - 1 || c == 0 || c == m.cols() - 1;
            if (!edge) {
                edge = m.labels(r - 1, c) != 1 || m.labels(r + 1, c) != 1 ||
                       m.labels(r, c - 1) != 1 || m.labels(r, c + 1) != 1;
            }
            if (edge) b.pts.emplace_back(r, c);
        }
    return b;
}

std::vector<double> bf_directed(const BfBoundary& from, const BfBoundary& to, const Spacing& sp) {
    std::vector<double> d;
    for (const auto& [ar, ac] : from.pts) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [br, bc] : to.pts) {
            const double dr = (ar - br) * sp.row_mm;
            const double dc = (ac - bc) * sp.col_mm;
            best = std::min(best, dr * dr + dc * dc);
        }
        d.push_back(std::sqrt(best));
    }
    return d;
}

double bf_percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double rank = q * (v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (rank - lo) * (v[lo + 1] - v[lo]);
}

double bf_hd95(const BinaryMask& g, const BinaryMask& p, const Spacing& sp, bool pooled = false) {
    const auto gb = bf_boundary(g), pb = bf_boundary(p);
    auto d1 = bf_directed(gb, pb, sp);
    auto d2 = bf_directed(pb, gb, sp);
    if (pooled) {
        d1.insert(d1.end(), d2.begin(), d2.end());
        return bf_percentile(d1, 0.95);
    }
    return std::max(bf_percentile(d1, 0.95), bf_percentile(d2, 0.95));
}

double bf_exact_hausdorff(const BinaryMask& g, const BinaryMask& p, const Spacing& sp) {
    const auto gb = bf_boundary(g), pb = bf_boundary(p);
    const auto d1 = bf_directed(gb, pb, sp);
    const auto d2 = bf_directed(pb, gb, sp);
    return std::max(*std::max_element(d1.begin(), d1.end()),
                    *std::max_element(d2.begin(), d2.end()));
}

BinaryMask nonempty_random(int rows, int cols, Rng& rng, double p_fg) {
    for (;;) {
        auto m = random_mask(rows, cols, rng, p_fg);
        if (!m.empty_mask()) return m;
    }
}

}  // namespace

TEST_CASE("dice basics", "[metrics]") {
    SECTION("self-overlap of a nonempty mask is 1") {
        const auto g = make_mask(8, 8, [](int r, int c) { return r > 2 && c > 2; });
        REQUIRE(dice(g, g) == 1.0);
    }

    SECTION("2x2 block shifted one column overlaps half") {
        const auto g = make_mask(6, 6, [](int r, int c) { return r >= 2 && r < 4 && c >= 2 && c < 4; });
        const auto p = make_mask(6, 6, [](int r, int c) { return r >= 2 && r < 4 && c >= 3 && c < 5; });
        REQUIRE(dice(g, p) == 0.5);
    }

    SECTION("empty prediction against nonempty truth is 0; both empty is 1") {
        const auto g = make_mask(4, 4, [](int r, int) { return r == 1; });
        const auto none = make_mask(4, 4, [](int, int) { return 0; });
        REQUIRE(dice(g, none) == 0.0);
        REQUIRE(dice(none, none) == 1.0);
    }

    SECTION("symmetric, and matches a direct pixel-count oracle") {
        Rng rng(7);
        for (int trial = 0; trial < 40; ++trial) {
            const auto g = random_mask(16, 16, rng, 0.4);
            const auto p = random_mask(16, 16, rng, 0.4);
            std::size_t inter = 0, ga = 0, pa = 0;
            for (int r = 0; r < 16; ++r)
                for (int c = 0; c < 16; ++c) {
                    inter += (g.labels(r, c) == 1 && p.labels(r, c) == 1);
                    ga += g.labels(r, c) == 1;
                    pa += p.labels(r, c) == 1;
                }
            const double expect = (ga + pa) == 0 ? 1.0 : 2.0 * inter / double(ga + pa);
            REQUIRE(dice(g, p) == expect);
            REQUIRE(dice(g, p) == dice(p, g));
        }
    }

    SECTION("shape mismatch throws") {
        const auto g = make_mask(4, 4, [](int, int) { return 1; });
        const auto p = make_mask(4, 5, [](int, int) { return 1; });
        REQUIRE_THROWS_AS(dice(g, p), std::invalid_argument);
    }
}

TEST_CASE("dice_in_region restriction", "[metrics]") {
    Rng rng(17);
    const auto g = random_mask(12, 12, rng, 0.4);
    const auto p = random_mask(12, 12, rng, 0.4);
    const auto all = make_mask(12, 12, [](int, int) { return 1; });
    REQUIRE(dice_in_region(g, p, all) == dice(g, p));

    const auto empty_region = make_mask(12, 12, [](int, int) { return 0; });
    REQUIRE(dice_in_region(g, p, empty_region) == 1.0);
}

TEST_CASE("extract_boundary neighborhood rule", "[metrics]") {
    SECTION("an isolated pixel is its own boundary") {
        const auto m = make_mask(5, 5, [](int r, int c) { return r == 2 && c == 2; });
        const auto b = extract_boundary(m);
        REQUIRE(b == std::vector<std::pair<int, int>>{{2, 2}});
    }

    SECTION("3x3 solid block keeps its 8 perimeter pixels") {
        const auto m = make_mask(5, 5, [](int r, int c) { return r >= 1 && r <= 3 && c >= 1 && c <= 3; });
        const auto b = extract_boundary(m);
        REQUIRE(b.size() == 8);
        for (const auto& [r, c] : b) REQUIRE_FALSE((r == 2 && c == 2));
    }

    SECTION("an all-ones mask yields the image frame") {
        const auto m = make_mask(4, 6, [](int, int) { return 1; });
        const auto b = extract_boundary(m);
        REQUIRE(b.size() == 2 * 4 + 2 * 6 - 4);
    }

    SECTION("empty mask yields the empty set") {
        const auto m = make_mask(4, 4, [](int, int) { return 0; });
        REQUIRE(extract_boundary(m).empty());
    }
}

TEST_CASE("percentile with linear interpolation", "[metrics]") {
    REQUIRE(percentile_linear({1.0, 2.0, 3.0, 4.0}, 0.5) == 2.5);
    REQUIRE(percentile_linear({5.0}, 0.95) == 5.0);
    std::vector<double> v;
    for (int i = 0; i < 100; ++i) v.push_back(static_cast<double>(i));
    REQUIRE_THAT(percentile_linear(v, 0.95), Catch::Matchers::WithinAbs(94.05, 1e-12));
}

TEST_CASE("hd95 against the exhaustive oracle", "[metrics]") {
    const Spacing sp{0.1, 0.1};

    SECTION("identical masks have zero distance") {
        const auto g = make_mask(10, 10, [](int r, int c) { return r >= 3 && r < 7 && c >= 2 && c < 8; });
        REQUIRE(hd95(g, g, sp) == 0.0);
    }

    SECTION("two single pixels five columns apart at 0.1 mm spacing") {
        const auto g = make_mask(8, 8, [](int r, int c) { return r == 4 && c == 1; });
        const auto p = make_mask(8, 8, [](int r, int c) { return r == 4 && c == 6; });
        REQUIRE_THAT(hd95(g, p, sp), Catch::Matchers::WithinAbs(0.5, 1e-12));
    }

    SECTION("random 16x16 pairs match the all-pairs oracle within 1e-9") {
        Rng rng(23);
        for (int trial = 0; trial < 100; ++trial) {
            const auto g = nonempty_random(16, 16, rng, 0.35);
            const auto p = nonempty_random(16, 16, rng, 0.35);
            const Spacing s{trial % 3 == 0 ? 0.13 : 0.1, trial % 4 == 0 ? 0.07 : 0.1};
            REQUIRE_THAT(hd95(g, p, s), Catch::Matchers::WithinAbs(bf_hd95(g, p, s), 1e-9));
        }
    }

    SECTION("pooled variant matches its oracle") {
        Rng rng(29);
        for (int trial = 0; trial < 20; ++trial) {
            const auto g = nonempty_random(12, 12, rng, 0.4);
            const auto p = nonempty_random(12, 12, rng, 0.4);
            Hd95Options opts;
            opts.pooled = true;
            REQUIRE_THAT(hd95(g, p, sp, opts),
                         Catch::Matchers::WithinAbs(bf_hd95(g, p, sp, true), 1e-9));
        }
    }

    SECTION("never exceeds the exact Hausdorff distance") {
        Rng rng(31);
        for (int trial = 0; trial < 30; ++trial) {
            const auto g = nonempty_random(14, 14, rng, 0.3);
            const auto p = nonempty_random(14, 14, rng, 0.3);
            REQUIRE(hd95(g, p, sp) <= bf_exact_hausdorff(g, p, sp) + 1e-12);
        }
    }

    SECTION("translation of both masks leaves both metrics unchanged") {
        Rng rng(37);
        const auto g0 = make_mask(16, 16, [](int r, int c) { return r >= 3 && r < 8 && c >= 3 && c < 9; });
        const auto p0 = make_mask(16, 16, [](int r, int c) { return r >= 4 && r < 9 && c >= 2 && c < 8; });
        const auto shift = [](const BinaryMask& m, int dr, int dc) {
            return make_mask(16, 16, [&](int r, int c) {
                const int sr = r - dr, sc = c - dc;
                if (sr < 0 || sr >= 16 || sc < 0 || sc >= 16) return 0;
                return static_cast<int>(m.labels(sr, sc));
            });
        };
        const auto g1 = shift(g0, 2, 3), p1 = shift(p0, 2, 3);
        REQUIRE(dice(g0, p0) == dice(g1, p1));
        REQUIRE_THAT(hd95(g0, p0, sp), Catch::Matchers::WithinAbs(hd95(g1, p1, sp), 1e-12));
        (void)rng;
    }

    SECTION("empty boundary is an explicit error") {
        const auto g = make_mask(6, 6, [](int r, int c) { return r == 2 && c == 2; });
        const auto none = make_mask(6, 6, [](int, int) { return 0; });
        REQUIRE_THROWS_WITH(hd95(g, none, sp), Catch::Matchers::ContainsSubstring("empty boundary"));
        REQUIRE_THROWS_WITH(hd95(none, g, sp), Catch::Matchers::ContainsSubstring("empty boundary"));
    }
}

TEST_CASE("binarize threshold behavior", "[metrics]") {
    ProbabilityMap p;
    p.probs = Array2D<float>(2, 2);
    p.probs(0, 0) = 0.4f;
    p.probs(0, 1) = 0.6f;
    p.probs(1, 0) = 0.5f;  // exactly at threshold -> background
    p.probs(1, 1) = 0.9f;
    const auto m = binarize(p, {0.1, 0.1}, 0.5);
    REQUIRE(m.labels(0, 0) == 0);
    REQUIRE(m.labels(0, 1) == 1);
    REQUIRE(m.labels(1, 0) == 0);
    REQUIRE(m.labels(1, 1) == 1);
    const auto strict = binarize(p, {0.1, 0.1}, 0.85);
    REQUIRE(strict.area() == 1);
}
