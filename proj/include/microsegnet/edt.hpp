#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "microsegnet/array2d.hpp"

namespace microsegnet {

namespace detail {

// 1-D squared distance transform over samples at positions i*s (Felzenszwalb
// & Huttenlocher lower-envelope method). f holds squared distances; INF marks
// "no source". Exact: each output is (dq*s)^2 + f[q] for the minimizing q.
inline void edt_1d(const double* f, double* d, int n, double s, int* v, double* z) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    int first = 0;
    while (first < n && f[first] == kInf) ++first;
    if (first == n) {
        for (int q = 0; q < n; ++q) d[q] = kInf;
        return;
    }
    const double s2 = s * s;
    const auto intersect = [&](int q, int p) {
        return ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
    };
    int k = 0;
    v[0] = first;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = first + 1; q < n; ++q) {
        if (f[q] == kInf) continue;
        double sx = intersect(q, v[k]);
        while (sx <= z[k]) {
            --k;
            sx = intersect(q, v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = sx;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = (q - v[k]) * s;
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace detail

// Exact squared Euclidean distance (in millimeters when spacings are in mm)
// from every grid cell to the nearest source cell. Anisotropic spacing is
// respected: dist^2 = (dr*row_sp)^2 + (dc*col_sp)^2. Cells with no source
// anywhere yield +inf.
inline Array2D<double> squared_distance_transform(const Array2D<std::uint8_t>& sources,
                                                  double row_sp = 1.0, double col_sp = 1.0) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    const int rows = sources.rows(), cols = sources.cols();
    Array2D<double> d(rows, cols, kInf);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            if (sources(r, c)) d(r, c) = 0.0;

    const int n = rows > cols ? rows : cols;
    std::vector<double> f(n), out(n), z(n + 1);
    std::vector<int> v(n);

    // pass 1: along columns (row index, spacing row_sp)
    for (int c = 0; c < cols; ++c) {
        for (int r = 0; r < rows; ++r) f[r] = d(r, c);
        detail::edt_1d(f.data(), out.data(), rows, row_sp, v.data(), z.data());
        for (int r = 0; r < rows; ++r) d(r, c) = out[r];
    }
    // pass 2: along rows (col index, spacing col_sp)
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) f[c] = d(r, c);
        detail::edt_1d(f.data(), out.data(), cols, col_sp, v.data(), z.data());
        for (int c = 0; c < cols; ++c) d(r, c) = out[c];
    }
    return d;
}

// Signed distance in pixel units, positive inside the mask, negative outside.
// Magnitude is the Euclidean distance to the nearest cell of the other class.
inline Array2D<double> signed_distance_inside(const Array2D<std::uint8_t>& mask) {
    const int rows = mask.rows(), cols = mask.cols();
    Array2D<std::uint8_t> inv(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) inv(r, c) = mask(r, c) ? 0 : 1;
    const auto d_to_fg = squared_distance_transform(mask);
    const auto d_to_bg = squared_distance_transform(inv);
    Array2D<double> sd(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            sd(r, c) = mask(r, c) ? std::sqrt(d_to_bg(r, c)) : -std::sqrt(d_to_fg(r, c));
    return sd;
}

}  // namespace microsegnet
