#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "microsegnet/core.hpp"
#include "microsegnet/edt.hpp"
#include "microsegnet/image_io.hpp"
#include "microsegnet/rng.hpp"

namespace microsegnet {

// Parameters of the synthetic micro-US-like generator. Images are rendered
// as a polar "half-doughnut" sector (probe below the frame, fan opening
// upward) containing one smooth star-convex bright-rimmed hypoechoic region
// standing in for the prostate.
struct SynthParams {
    int num_cases = 40;             // patients
    int slices_per_case = 6;        // independent 2-D slices per patient
    double shape_irregularity = 0.35;  // [0,1], radial harmonics amplitude
    double artifact_density = 0.3;  // [0,1], calcification spots + acoustic shadows
    // Angular interval (radians, atan2(row,col) convention, about the region
    // center) where the boundary is rendered indistinct, mimicking the
    // prostate-bladder midline.
    double blur_sector_start = -2.6;
    double blur_sector_end = -0.54;
    double noise_level = 0.35;      // [0,1], multiplicative speckle strength
    int image_size = 256;           // rendered side length, before preprocessing
    std::uint64_t seed = 0;
    Spacing spacing_mm{0.1, 0.1};

    std::vector<std::string> validate() const {
        std::vector<std::string> v;
        if (num_cases < 1) v.push_back("num_cases must be >= 1");
        if (slices_per_case < 1) v.push_back("slices_per_case must be >= 1");
        if (shape_irregularity < 0.0 || shape_irregularity > 1.0)
            v.push_back("shape_irregularity must lie in [0,1]");
        if (artifact_density < 0.0 || artifact_density > 1.0)
            v.push_back("artifact_density must lie in [0,1]");
        if (noise_level < 0.0 || noise_level > 1.0) v.push_back("noise_level must lie in [0,1]");
        if (image_size < 32) v.push_back("image_size must be >= 32");
        return v;
    }
    void check() const {
        const auto v = validate();
        if (!v.empty()) throw std::invalid_argument("SynthParams: " + v.front());
    }
};

// Parameters of the simulated non-expert annotator: the expert boundary is
// displaced along its normal by a smooth random field, with extra
// displacement inside the blur sector where even the expert's boundary is
// uncertain.
struct PerturbParams {
    double amplitude_px = 2.0;        // displacement magnitude, pixels
    double correlation_len_px = 12.0; // smoothness of the displacement field
    double hard_sector_gain = 2.5;    // extra displacement inside the sector
    double sector_start = -2.6;       // radians, about the mask centroid
    double sector_end = -0.54;
    std::uint64_t seed = 0;

    void check() const {
        if (amplitude_px < 0.0) throw std::invalid_argument("PerturbParams: amplitude_px < 0");
        if (!(correlation_len_px > 0.0))
            throw std::invalid_argument("PerturbParams: correlation_len_px must be > 0");
        if (hard_sector_gain < 1.0)
            throw std::invalid_argument("PerturbParams: hard_sector_gain must be >= 1");
    }
};

namespace detail {

constexpr double kPi = 3.14159265358979323846;

// Does angle a (radians) fall in the possibly wrapping interval [start,end]?
inline bool angle_in_sector(double a, double start, double end) {
    const auto norm = [](double x) {
        while (x < 0.0) x += 2.0 * kPi;
        while (x >= 2.0 * kPi) x -= 2.0 * kPi;
        return x;
    };
    const double width = norm(end - start);
    return norm(a - start) <= width;
}

// Smooth membership: 1 deep inside the sector, cosine ramp to 0 within
// `feather` radians of either edge.
inline double sector_weight(double a, double start, double end, double feather) {
    const auto norm = [](double x) {
        while (x < 0.0) x += 2.0 * kPi;
        while (x >= 2.0 * kPi) x -= 2.0 * kPi;
        return x;
    };
    const double width = norm(end - start);
    const double t = norm(a - start);
    if (t > width) {
        const double out = std::min(norm(a - end), norm(start - a));
        if (out >= feather) return 0.0;
        return 0.5 * (1.0 + std::cos(kPi * out / feather));
    }
    return 1.0;
}

// Separable Gaussian blur, kernel truncated at 3 sigma, reflect padding.
inline void gaussian_blur_inplace(Array2D<float>& img, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
        sum += v;
    }
    for (auto& k : kernel) k = static_cast<float>(k / sum);

    const int rows = img.rows(), cols = img.cols();
    const auto reflect = [](int i, int n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
        return std::clamp(i, 0, n - 1);
    };
    Array2D<float> tmp(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * img(r, reflect(c + i, cols));
            tmp(r, c) = acc;
        }
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * tmp(reflect(r + i, rows), c);
            img(r, c) = acc;
        }
}

// L2 norm of the separable kernel actually applied, used to renormalize a
// blurred white-noise field back to unit variance analytically.
inline double blur_kernel_l2(double sigma) {
    if (sigma <= 0.0) return 1.0;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    double sum = 0.0, sq = 0.0;
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) {
        v /= sum;
        sq += v * v;
    }
    return sq;  // norm^2 of the 1-D kernel; 2-D separable norm^2 is sq*sq
}

// Smooth noise field with approximately unit variance and correlation
// length ~sigma pixels.
inline Array2D<float> smooth_unit_noise(int rows, int cols, double sigma, Rng& rng) {
    Array2D<float> field(rows, cols);
    for (std::size_t i = 0; i < field.size(); ++i)
        field.data()[i] = static_cast<float>(rng.normal());
    if (sigma > 0.0) {
        gaussian_blur_inplace(field, sigma);
        const double l2sq = blur_kernel_l2(sigma);
        const float scale = static_cast<float>(1.0 / std::sqrt(l2sq * l2sq));
        for (std::size_t i = 0; i < field.size(); ++i) field.data()[i] *= scale;
    }
    return field;
}

// Star-convex radius profile R(phi) = R0 * (1 + irregularity * harmonics).
struct RadiusProfile {
    double r0 = 0.0;
    std::array<double, 4> amp{};    // harmonics k = 2..5
    std::array<double, 4> phase{};

    double operator()(double phi) const {
        double m = 1.0;
        for (int k = 0; k < 4; ++k) m += amp[static_cast<std::size_t>(k)] *
                                         std::cos((k + 2) * phi + phase[static_cast<std::size_t>(k)]);
        return r0 * std::max(0.25, m);
    }
};

}  // namespace detail

// Deterministic rendering of one synthetic slice. `index` enumerates slices
// globally: case = index / slices_per_case, slice = index % slices_per_case.
// The expert mask is the exact rendered region; the non-expert mask is left
// all-zeros for simulate_nonexpert to fill. Throws if no placement keeps the
// region off the image border (and inside the fan) within 100 attempts.
inline CaseRecord generate_case(const SynthParams& params, int index) {
    params.check();
    if (index < 0) throw std::invalid_argument("generate_case: negative index");
    using detail::kPi;

    const int S = params.image_size;
    Rng rng = Rng::for_stream(params.seed, static_cast<std::uint64_t>(index));

    // Fan geometry: probe below the bottom edge, fan opening upward.
    const double probe_r = 1.12 * S;
    const double probe_c = 0.5 * S;
    const double fan_half = 0.9;               // radians each side of straight up
    const double fan_dir = -kPi / 2.0;         // up, in atan2(row, col) convention
    const double r_min = 0.28 * S;
    const double r_max = 1.05 * S;

    // Shape profile, drawn once; only the center jitters between attempts.
    detail::RadiusProfile prof;
    prof.r0 = S * rng.uniform(0.14, 0.24);
    for (int k = 0; k < 4; ++k) {
        prof.amp[static_cast<std::size_t>(k)] =
            params.shape_irregularity * 0.5 * rng.uniform(-1.0, 1.0) / (k + 2);
        prof.phase[static_cast<std::size_t>(k)] = rng.uniform(0.0, 2.0 * kPi);
    }

    double center_r = 0.0, center_c = 0.0;
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        const double rho = r_min + (0.30 + rng.uniform(0.0, 0.25)) * (r_max - r_min);
        const double th = fan_dir + rng.uniform(-0.18, 0.18);
        center_r = probe_r + rho * std::sin(th);
        center_c = probe_c + rho * std::cos(th);

        // The region must stay strictly inside both the frame and the fan.
        bool ok = true;
        for (int a = 0; a < 64 && ok; ++a) {
            const double phi = 2.0 * kPi * a / 64.0;
            const double rr = prof(phi) + 2.0;
            const double br = center_r + rr * std::sin(phi);
            const double bc = center_c + rr * std::cos(phi);
            if (br < 1.0 || br >= S - 1.0 || bc < 1.0 || bc >= S - 1.0) ok = false;
            const double drho = std::hypot(br - probe_r, bc - probe_c);
            const double dth = std::atan2(br - probe_r, bc - probe_c);
            if (drho < r_min + 2.0 || drho > r_max - 2.0) ok = false;
            if (std::abs(dth - fan_dir) > fan_half - 0.02) ok = false;
        }
        placed = ok;
    }
    if (!placed)
        throw std::runtime_error("generate_case: could not place region inside frame after 100 attempts");

    // Artifact inventory, drawn before per-pixel rendering.
    struct Spot {
        double r, c, rho, theta, radius, amp;
        bool shadow;
        double shadow_strength, shadow_width;
    };
    std::vector<Spot> spots;
    const int n_spots = static_cast<int>(std::floor(params.artifact_density * (4.0 + 4.0 * rng.uniform())));
    for (int i = 0; i < n_spots; ++i) {
        Spot s;
        s.theta = fan_dir + rng.uniform(-fan_half * 0.85, fan_half * 0.85);
        s.rho = rng.uniform(r_min + 0.08 * (r_max - r_min), r_max - 0.2 * (r_max - r_min));
        s.r = probe_r + s.rho * std::sin(s.theta);
        s.c = probe_c + s.rho * std::cos(s.theta);
        s.radius = rng.uniform(1.5, 3.5);
        s.amp = rng.uniform(0.35, 0.6);
        s.shadow = rng.uniform() < 0.65;
        s.shadow_strength = rng.uniform(0.3, 0.6);
        s.shadow_width = (s.radius + 1.5) / s.rho;
        spots.push_back(s);
    }

    // Speckle field (always drawn so the stream does not depend on
    // noise_level; only its application is gated).
    Array2D<float> speckle = detail::smooth_unit_noise(S, S, 1.0, rng);

    CaseRecord rec;
    const int case_index = index / params.slices_per_case;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%04d", case_index);
    rec.case_id = buf;
    rec.slice_index = index % params.slices_per_case;

    Array2D<float> img(S, S);
    Array2D<std::uint8_t> mask(S, S, 0);

    for (int r = 0; r < S; ++r) {
        for (int c = 0; c < S; ++c) {
            const double rho = std::hypot(r - probe_r, c - probe_c);
            const double theta = std::atan2(r - probe_r, c - probe_c);
            const bool in_fan =
                rho >= r_min && rho <= r_max && std::abs(theta - fan_dir) <= fan_half;
            if (!in_fan) {
                img(r, c) = 0.05f;
                continue;
            }

            const double phi = std::atan2(r - center_r, c - center_c);
            const double rho_p = std::hypot(r - center_r, c - center_c);
            const double d = prof(phi) - rho_p;  // >= 0 inside the region
            const bool inside = d >= 0.0;
            if (inside) mask(r, c) = 1;

            const double blur_t = detail::sector_weight(phi, params.blur_sector_start,
                                                        params.blur_sector_end, 0.25);
            const double near_band = std::exp(-(d * d) / 36.0);

            double v;
            if (inside) {
                // Hypoechoic interior, slightly brighter toward the capsule.
                const double prox = std::clamp(1.0 - d / (0.5 * prof.r0), 0.0, 1.0);
                v = 0.16 + 0.10 * prox;
                v = v + (0.27 - v) * blur_t * near_band;  // indistinct side creeps up
            } else {
                const double u = (rho - r_min) / (r_max - r_min);
                v = 0.42 + 0.22 * std::exp(-1.8 * u);
                v += 0.06 * std::sin(rho * 0.35 + theta * 3.0);  // faint banding
                // Bright capsule rim, suppressed where the boundary blurs.
                const double rim_gain = 0.30 * (1.0 - 0.92 * blur_t);
                v += rim_gain * std::exp(-(d * d) / (2.5 * 2.5));
                v = std::clamp(v, 0.34, 0.95);
                v = v + (0.36 - v) * blur_t * near_band;  // tissue side creeps down
                v = std::clamp(v, 0.34, 0.95);
            }

            // Calcification spots and their acoustic shadows.
            for (const auto& s : spots) {
                const double dd = std::hypot(r - s.r, c - s.c);
                v += s.amp * std::exp(-(dd * dd) / (s.radius * s.radius));
                if (s.shadow && rho > s.rho + s.radius) {
                    const double dth = theta - s.theta;
                    const double fade = 1.0 - std::exp(-(rho - s.rho - s.radius) / 8.0);
                    v *= 1.0 - s.shadow_strength * fade *
                                   std::exp(-(dth * dth) / (s.shadow_width * s.shadow_width));
                }
            }

            if (params.noise_level > 0.0)
                v *= 1.0 + params.noise_level * 0.5 * static_cast<double>(speckle(r, c));
            img(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

    // Snap intensities to the 8-bit grid so the PNG round trip is exact.
    rec.image.pixels = dequantize_u8(quantize_u8(img));
    rec.image.spacing_mm = params.spacing_mm;
    rec.image.case_id = rec.case_id;
    rec.image.slice_index = rec.slice_index;
    rec.expert_mask.labels = std::move(mask);
    rec.expert_mask.spacing_mm = params.spacing_mm;
    rec.nonexpert_mask.labels = Array2D<std::uint8_t>(S, S, 0);
    rec.nonexpert_mask.spacing_mm = params.spacing_mm;

    // Border contact would clip the region silhouette.
    for (int r = 0; r < S; ++r)
        if (rec.expert_mask.labels(r, 0) || rec.expert_mask.labels(r, S - 1))
            throw std::runtime_error("generate_case: region touches image border");
    for (int c = 0; c < S; ++c)
        if (rec.expert_mask.labels(0, c) || rec.expert_mask.labels(S - 1, c))
            throw std::runtime_error("generate_case: region touches image border");
    return rec;
}

// Displace the expert boundary along its normal by a smooth random field:
// the level set { signed_distance + amplitude * gain(x) * eta(x) > 0 } moves
// the contour locally by about amplitude * gain * eta pixels. gain(x) is
// hard_sector_gain for pixels whose angle about the mask centroid falls in
// the blur sector, 1 elsewhere.
inline BinaryMask simulate_nonexpert(const BinaryMask& expert, const PerturbParams& params) {
    params.check();
    if (expert.empty_mask()) throw std::invalid_argument("simulate_nonexpert: expert mask is empty");
    if (params.amplitude_px == 0.0) return expert;

    const int rows = expert.rows(), cols = expert.cols();
    double cr = 0.0, cc = 0.0, n = 0.0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            if (expert.labels(r, c) == 1) {
                cr += r;
                cc += c;
                n += 1.0;
            }
    cr /= n;
    cc /= n;

    const auto sd = signed_distance_inside(expert.labels);
    Rng rng(params.seed);
    const auto eta = detail::smooth_unit_noise(rows, cols, params.correlation_len_px, rng);

    BinaryMask out;
    out.labels = Array2D<std::uint8_t>(rows, cols);
    out.spacing_mm = expert.spacing_mm;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double a = std::atan2(r - cr, c - cc);
            const double gain =
                detail::angle_in_sector(a, params.sector_start, params.sector_end)
                    ? params.hard_sector_gain
                    : 1.0;
            const double level = sd(r, c) + params.amplitude_px * gain *
                                                static_cast<double>(eta(r, c));
            out.labels(r, c) = level > 0.0 ? 1 : 0;
        }
    return out;
}

// Bilinear resize (half-pixel centers) of a single plane.
inline void bilinear_resize_plane(const float* src, int sh, int sw, float* dst, int th, int tw) {
    const double sr = static_cast<double>(sh) / th;
    const double sc = static_cast<double>(sw) / tw;
    for (int r = 0; r < th; ++r) {
        const double fy = (r + 0.5) * sr - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        int y1 = y0 + 1;
        y0 = std::clamp(y0, 0, sh - 1);
        y1 = std::clamp(y1, 0, sh - 1);
        for (int c = 0; c < tw; ++c) {
            const double fx = (c + 0.5) * sc - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            int x1 = x0 + 1;
            x0 = std::clamp(x0, 0, sw - 1);
            x1 = std::clamp(x1, 0, sw - 1);
            const double v = (1.0 - wy) * ((1.0 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                             wy * ((1.0 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
            dst[r * tw + c] = static_cast<float>(v);
        }
    }
}

// Bilinear resize to target x target followed by min-max normalization to
// [0,1]. Pixel spacing is rescaled by the resize factor. A constant image
// normalizes to all zeros (with a warning) rather than dividing by zero.
inline Image2D preprocess(const Image2D& image, int target) {
    if (target < 8) throw std::invalid_argument("preprocess: target must be >= 8");
    if (image.rows() < 1 || image.cols() < 1) throw std::invalid_argument("preprocess: empty image");
    Image2D out;
    out.case_id = image.case_id;
    out.slice_index = image.slice_index;
    out.pixels = Array2D<float>(target, target);
    bilinear_resize_plane(image.pixels.data(), image.rows(), image.cols(), out.pixels.data(),
                          target, target);
    out.spacing_mm.row_mm = image.spacing_mm.row_mm * static_cast<double>(image.rows()) / target;
    out.spacing_mm.col_mm = image.spacing_mm.col_mm * static_cast<double>(image.cols()) / target;

    float lo = out.pixels.data()[0], hi = lo;
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        lo = std::min(lo, out.pixels.data()[i]);
        hi = std::max(hi, out.pixels.data()[i]);
    }
    if (hi == lo) {
        std::cerr << "preprocess: constant image (" << image.case_id
                  << "), normalizing to zeros\n";
        out.pixels.fill(0.0f);
        return out;
    }
    const float inv = 1.0f / (hi - lo);
    for (std::size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels.data()[i] = (out.pixels.data()[i] - lo) * inv;
    return out;
}

// Nearest-neighbor subsampling by an integral factor, top-left representative
// per block. Output is binary by construction; spacing scales by the factor.
inline BinaryMask downsample_mask(const BinaryMask& mask, int factor) {
    if (factor != 2 && factor != 4 && factor != 8)
        throw std::invalid_argument("downsample_mask: factor must be one of {2,4,8}");
    if (mask.rows() % factor != 0 || mask.cols() % factor != 0)
        throw std::invalid_argument("downsample_mask: mask side not divisible by factor");
    BinaryMask out;
    out.labels = Array2D<std::uint8_t>(mask.rows() / factor, mask.cols() / factor);
    out.spacing_mm.row_mm = mask.spacing_mm.row_mm * factor;
    out.spacing_mm.col_mm = mask.spacing_mm.col_mm * factor;
    for (int r = 0; r < out.rows(); ++r)
        for (int c = 0; c < out.cols(); ++c) out.labels(r, c) = mask.labels(r * factor, c * factor);
    return out;
}

// Nearest-neighbor resize to target x target (half-pixel centers), used to
// carry masks through the image preprocessing resize. Binary is preserved.
inline BinaryMask resize_mask_nearest(const BinaryMask& mask, int target) {
    if (target < 1) throw std::invalid_argument("resize_mask_nearest: bad target");
    BinaryMask out;
    out.labels = Array2D<std::uint8_t>(target, target);
    out.spacing_mm.row_mm = mask.spacing_mm.row_mm * static_cast<double>(mask.rows()) / target;
    out.spacing_mm.col_mm = mask.spacing_mm.col_mm * static_cast<double>(mask.cols()) / target;
    for (int r = 0; r < target; ++r) {
        const int sr = std::clamp(
            static_cast<int>(std::floor((r + 0.5) * static_cast<double>(mask.rows()) / target)), 0,
            mask.rows() - 1);
        for (int c = 0; c < target; ++c) {
            const int sc = std::clamp(
                static_cast<int>(std::floor((c + 0.5) * static_cast<double>(mask.cols()) / target)),
                0, mask.cols() - 1);
            out.labels(r, c) = mask.labels(sr, sc);
        }
    }
    return out;
}

// Generate the full dataset: every slice of every case, with the non-expert
// mask filled in by the simulated annotator (per-slice seed derived from the
// generator seed).
inline std::vector<CaseRecord> generate_dataset(const SynthParams& params,
                                                const PerturbParams& perturb_base) {
    params.check();
    std::vector<CaseRecord> records;
    const int total = params.num_cases * params.slices_per_case;
    records.reserve(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        CaseRecord rec = generate_case(params, i);
        PerturbParams pp = perturb_base;
        pp.sector_start = params.blur_sector_start;
        pp.sector_end = params.blur_sector_end;
        pp.seed = Rng::mix(params.seed ^ 0x5eedULL, static_cast<std::uint64_t>(i));
        rec.nonexpert_mask = simulate_nonexpert(rec.expert_mask, pp);
        records.push_back(std::move(rec));
    }
    return records;
}

// ------------------------------------------------------------------------
// On-disk dataset: per-case directories of 8-bit PNGs plus a JSON manifest
// carrying spacing, splits and seeds.
//   root/{case_id}/slice_{k}_img.png
//   root/{case_id}/slice_{k}_expert.png
//   root/{case_id}/slice_{k}_nonexpert.png
//   root/{case_id}/slice_{k}_hard.png        (optional cache)
//   root/manifest.json
// ------------------------------------------------------------------------

struct DatasetSummary {
    int num_cases = 0;
    int num_slices = 0;
    std::map<std::string, int> cases_per_split;
};

struct Dataset {
    std::vector<CaseRecord> records;
    std::map<std::string, std::string> splits;  // case_id -> train/val/test
    // Raw (case_id, split) manifest entries, one per case entry as listed on
    // disk; preserved so leakage (a case tagged train in one entry and test
    // in another) stays detectable.
    std::vector<std::pair<std::string, std::string>> split_entries;

    std::vector<const CaseRecord*> split_records(const std::string& split) const {
        std::vector<const CaseRecord*> out;
        for (const auto& r : records) {
            const auto it = splits.find(r.case_id);
            if (it != splits.end() && it->second == split) out.push_back(&r);
        }
        return out;
    }
    std::vector<std::string> split_case_ids(const std::string& split) const {
        std::vector<std::string> out;
        for (const auto& [id, s] : splits)
            if (s == split) out.push_back(id);
        return out;
    }
};

// Deterministic patient-level split: the first ceil(train_frac * N) case ids
// (in generation order) become train, the rest test.
inline std::map<std::string, std::string> assign_splits(const std::vector<CaseRecord>& records,
                                                        double train_frac) {
    std::vector<std::string> ids;
    for (const auto& r : records)
        if (ids.empty() || ids.back() != r.case_id) ids.push_back(r.case_id);
    std::map<std::string, std::string> splits;
    const auto n_train = static_cast<std::size_t>(
        std::ceil(train_frac * static_cast<double>(ids.size())));
    for (std::size_t i = 0; i < ids.size(); ++i)
        splits[ids[i]] = i < n_train ? "train" : "test";
    return splits;
}

// Assemble an in-memory dataset (no disk round trip).
inline Dataset make_dataset(std::vector<CaseRecord> records,
                            std::map<std::string, std::string> splits) {
    Dataset ds;
    ds.records = std::move(records);
    for (const auto& [id, s] : splits) ds.split_entries.emplace_back(id, s);
    ds.splits = std::move(splits);
    return ds;
}

inline std::uint8_t mask_to_png_value(std::uint8_t label) { return label == 1 ? 255 : 0; }

inline Array2D<std::uint8_t> mask_to_png(const BinaryMask& mask) {
    Array2D<std::uint8_t> out(mask.rows(), mask.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = mask_to_png_value(mask.labels.data()[i]);
    return out;
}

inline BinaryMask mask_from_png(const Array2D<std::uint8_t>& png, const Spacing& spacing) {
    BinaryMask out;
    out.labels = Array2D<std::uint8_t>(png.rows(), png.cols());
    out.spacing_mm = spacing;
    for (std::size_t i = 0; i < png.size(); ++i) {
        const std::uint8_t v = png.data()[i];
        // 0/255 are the canonical encodings; anything else is preserved so
        // validate_case can flag the corruption.
        out.labels.data()[i] = v == 255 ? 1 : (v == 0 ? 0 : v);
    }
    return out;
}

inline DatasetSummary write_dataset(const std::vector<CaseRecord>& records,
                                    const std::string& root,
                                    const std::map<std::string, std::string>& splits,
                                    std::uint64_t seed = 0) {
    namespace fs = std::filesystem;
    fs::create_directories(root);

    nlohmann::json manifest;
    manifest["format"] = "microsegnet-dataset-v1";
    manifest["seed"] = seed;

    // Group records by case, preserving first-seen order.
    std::vector<std::string> case_order;
    std::map<std::string, std::vector<const CaseRecord*>> by_case;
    for (const auto& r : records) {
        if (by_case.find(r.case_id) == by_case.end()) case_order.push_back(r.case_id);
        by_case[r.case_id].push_back(&r);
    }

    DatasetSummary summary;
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& case_id : case_order) {
        const auto& recs = by_case[case_id];
        const fs::path case_dir = fs::path(root) / case_id;
        fs::create_directories(case_dir);

        std::string split = "train";
        if (const auto it = splits.find(case_id); it != splits.end()) split = it->second;
        if (split != "train" && split != "val" && split != "test")
            throw std::invalid_argument("write_dataset: bad split tag '" + split + "' for " + case_id);

        nlohmann::json jcase;
        jcase["case_id"] = case_id;
        jcase["split"] = split;
        jcase["spacing_mm"] = {recs.front()->image.spacing_mm.row_mm,
                               recs.front()->image.spacing_mm.col_mm};
        nlohmann::json slices = nlohmann::json::array();
        for (const CaseRecord* rec : recs) {
            const std::string stem = "slice_" + std::to_string(rec->slice_index);
            png::write_gray8((case_dir / (stem + "_img.png")).string(),
                             quantize_u8(rec->image.pixels));
            png::write_gray8((case_dir / (stem + "_expert.png")).string(),
                             mask_to_png(rec->expert_mask));
            png::write_gray8((case_dir / (stem + "_nonexpert.png")).string(),
                             mask_to_png(rec->nonexpert_mask));
            nlohmann::json jslice;
            jslice["slice_index"] = rec->slice_index;
            jslice["image"] = case_id + "/" + stem + "_img.png";
            jslice["expert"] = case_id + "/" + stem + "_expert.png";
            jslice["nonexpert"] = case_id + "/" + stem + "_nonexpert.png";
            if (rec->hard_mask) {
                png::write_gray8((case_dir / (stem + "_hard.png")).string(),
                                 mask_to_png(*rec->hard_mask));
                jslice["hard"] = case_id + "/" + stem + "_hard.png";
            }
            slices.push_back(std::move(jslice));
            ++summary.num_slices;
        }
        jcase["slices"] = std::move(slices);
        cases.push_back(std::move(jcase));
        ++summary.num_cases;
        summary.cases_per_split[split] += 1;
    }
    manifest["cases"] = std::move(cases);

    std::ofstream out(fs::path(root) / "manifest.json", std::ios::trunc);
    if (!out) throw std::runtime_error("write_dataset: cannot write manifest under " + root);
    out << manifest.dump(2) << "\n";
    return summary;
}

inline Dataset load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = fs::path(root) / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("load_dataset: missing manifest " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const std::exception& e) {
        throw std::runtime_error("load_dataset: corrupt manifest " + manifest_path.string() + ": " +
                                 e.what());
    }
    if (!manifest.contains("cases"))
        throw std::runtime_error("load_dataset: corrupt manifest (no cases): " +
                                 manifest_path.string());

    Dataset ds;
    for (const auto& jcase : manifest["cases"]) {
        const std::string case_id = jcase.at("case_id").get<std::string>();
        try {
            const std::string split = jcase.at("split").get<std::string>();
            Spacing spacing;
            spacing.row_mm = jcase.at("spacing_mm").at(0).get<double>();
            spacing.col_mm = jcase.at("spacing_mm").at(1).get<double>();
            ds.splits[case_id] = split;
            ds.split_entries.emplace_back(case_id, split);

            for (const auto& jslice : jcase.at("slices")) {
                CaseRecord rec;
                rec.case_id = case_id;
                rec.slice_index = jslice.at("slice_index").get<int>();

                const auto img_png = png::read_gray8(
                    (fs::path(root) / jslice.at("image").get<std::string>()).string());
                rec.image.pixels = dequantize_u8(img_png);
                rec.image.spacing_mm = spacing;
                rec.image.case_id = case_id;
                rec.image.slice_index = rec.slice_index;

                rec.expert_mask = mask_from_png(
                    png::read_gray8(
                        (fs::path(root) / jslice.at("expert").get<std::string>()).string()),
                    spacing);
                rec.nonexpert_mask = mask_from_png(
                    png::read_gray8(
                        (fs::path(root) / jslice.at("nonexpert").get<std::string>()).string()),
                    spacing);
                if (jslice.contains("hard"))
                    rec.hard_mask = mask_from_png(
                        png::read_gray8(
                            (fs::path(root) / jslice.at("hard").get<std::string>()).string()),
                        spacing);

                if (rec.expert_mask.rows() != rec.image.rows() ||
                    rec.expert_mask.cols() != rec.image.cols() ||
                    rec.nonexpert_mask.rows() != rec.image.rows() ||
                    rec.nonexpert_mask.cols() != rec.image.cols())
                    throw std::runtime_error("mask/image shape mismatch");
                ds.records.push_back(std::move(rec));
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("load_dataset: case " + case_id + ": " + e.what());
        }
    }
    return ds;
}

}  // namespace microsegnet
