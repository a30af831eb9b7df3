#pragma once

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "microsegnet/rng.hpp"

namespace microsegnet::nn {

using Mat = Eigen::MatrixXf;    // column-major
using Vec = Eigen::VectorXf;

// Feature map: channels x (h*w), one pixel per column so the per-pixel
// channel vector is contiguous.
struct Feat {
    int c = 0, h = 0, w = 0;
    Mat m;

    Feat() = default;
    Feat(int c_, int h_, int w_) : c(c_), h(h_), w(w_), m(Mat::Zero(c_, h_ * w_)) {}
    int pixels() const { return h * w; }
};

// ------------------------------------------------------------------------
// Parameter registry: all learnable tensors live in one flat float vector;
// layers hold (offset, shape) views. Registration order is fixed by model
// construction, which makes initialization, SGD and checkpoints trivially
// reproducible.
// ------------------------------------------------------------------------

struct ParamView {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

class ParamRegistry {
public:
    std::size_t add(std::string name, std::vector<int> shape) {
        std::size_t numel = 1;
        for (const int d : shape) {
            if (d <= 0) throw std::invalid_argument("ParamRegistry: bad dim in " + name);
            numel *= static_cast<std::size_t>(d);
        }
        const std::size_t off = total_;
        views_.push_back({std::move(name), std::move(shape), off, numel});
        total_ += numel;
        return off;
    }
    std::size_t total() const { return total_; }
    const std::vector<ParamView>& views() const { return views_; }
    const ParamView* find(const std::string& name) const {
        for (const auto& v : views_)
            if (v.name == name) return &v;
        return nullptr;
    }

private:
    std::vector<ParamView> views_;
    std::size_t total_ = 0;
};

// ------------------------------------------------------------------------
// conv2d. im2col layout: patch entry index = (ky*k + kx)*cin + ci, so each
// (ky,kx) tap copies one contiguous cin-block per output pixel.
// ------------------------------------------------------------------------

struct Conv2d {
    int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
    std::size_t w_off = 0, b_off = 0;

    Conv2d() = default;
    Conv2d(ParamRegistry& reg, const std::string& name, int cin_, int cout_, int k_, int stride_,
           int pad_)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
        w_off = reg.add(name + ".w", {cout_, cin_ * k_ * k_});
        b_off = reg.add(name + ".b", {cout_});
    }

    int out_side(int in_side) const { return (in_side + 2 * pad - k) / stride + 1; }

    void im2col(const Feat& in, Mat& cols) const {
        const int oh = out_side(in.h), ow = out_side(in.w);
        cols.resize(cin * k * k, oh * ow);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                float* col = cols.data() + static_cast<std::ptrdiff_t>(oy * ow + ox) * cols.rows();
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        float* dst = col + (ky * k + kx) * cin;
                        if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) {
                            std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(cin));
                        } else {
                            const float* src =
                                in.m.data() + static_cast<std::ptrdiff_t>(iy * in.w + ix) * cin;
                            std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(cin));
                        }
                    }
                }
            }
        }
    }

    Feat forward(const float* theta, const Feat& in) const {
        if (in.c != cin) throw std::invalid_argument("conv2d: channel mismatch");
        Feat out(cout, out_side(in.h), out_side(in.w));
        Mat cols;
        im2col(in, cols);
        const Eigen::Map<const Mat> w(theta + w_off, cout, cin * k * k);
        const Eigen::Map<const Vec> b(theta + b_off, cout);
        out.m.noalias() = w * cols;
        out.m.colwise() += b;
        return out;
    }

    // Accumulates dW/db into grad; returns the gradient at the input.
    Feat backward(const float* theta, const Feat& in, const Feat& dout, float* grad) const {
        Mat cols;
        im2col(in, cols);
        Eigen::Map<Mat> dw(grad + w_off, cout, cin * k * k);
        Eigen::Map<Vec> db(grad + b_off, cout);
        dw.noalias() += dout.m * cols.transpose();
        db.noalias() += dout.m.rowwise().sum();

        const Eigen::Map<const Mat> w(theta + w_off, cout, cin * k * k);
        Mat dcols;
        dcols.noalias() = w.transpose() * dout.m;

        Feat din(cin, in.h, in.w);
        const int oh = dout.h, ow = dout.w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const float* col =
                    dcols.data() + static_cast<std::ptrdiff_t>(oy * ow + ox) * dcols.rows();
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= in.h) continue;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= in.w) continue;
                        float* dst =
                            din.m.data() + static_cast<std::ptrdiff_t>(iy * in.w + ix) * cin;
                        const float* src = col + (ky * k + kx) * cin;
                        for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
                    }
                }
            }
        }
        return din;
    }
};

// ------------------------------------------------------------------------
// GroupNorm over a feature map: statistics per (instance, group) across the
// group's channels and all pixels, per-channel affine.
// ------------------------------------------------------------------------

struct GroupNorm {
    int channels = 0, groups = 1;
    std::size_t g_off = 0, b_off = 0;
    static constexpr float kEps = 1e-5f;

    GroupNorm() = default;
    GroupNorm(ParamRegistry& reg, const std::string& name, int channels_, int groups_)
        : channels(channels_), groups(groups_) {
        if (channels_ % groups_ != 0) throw std::invalid_argument("groupnorm: channels % groups");
        g_off = reg.add(name + ".g", {channels_});
        b_off = reg.add(name + ".b", {channels_});
    }

    struct Cache {
        Mat xhat;                 // channels x pixels
        std::vector<float> rstd;  // per group
    };

    Feat forward(const float* theta, const Feat& in, Cache* cache = nullptr) const {
        const Eigen::Map<const Vec> gamma(theta + g_off, channels);
        const Eigen::Map<const Vec> beta(theta + b_off, channels);
        const int cg = channels / groups;
        const int px = in.pixels();
        Feat out(in.c, in.h, in.w);
        Mat xhat(in.c, px);
        std::vector<float> rstds(static_cast<std::size_t>(groups));
        for (int g = 0; g < groups; ++g) {
            const auto block = in.m.middleRows(g * cg, cg);
            const float mean = block.mean();
            const float var = (block.array() - mean).square().mean();
            const float rstd = 1.0f / std::sqrt(var + kEps);
            xhat.middleRows(g * cg, cg) = ((block.array() - mean) * rstd).matrix();
            rstds[static_cast<std::size_t>(g)] = rstd;
        }
        for (int c = 0; c < channels; ++c)
            out.m.row(c) = (xhat.row(c).array() * gamma(c) + beta(c)).matrix();
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->rstd = std::move(rstds);
        }
        return out;
    }

    Feat backward(const float* theta, const Cache& cache, const Feat& dout, float* grad) const {
        const Eigen::Map<const Vec> gamma(theta + g_off, channels);
        Eigen::Map<Vec> dgamma(grad + g_off, channels);
        Eigen::Map<Vec> dbeta(grad + b_off, channels);
        const int cg = channels / groups;
        const int px = dout.pixels();
        Feat din(dout.c, dout.h, dout.w);
        Mat dxhat(channels, px);
        for (int c = 0; c < channels; ++c) {
            dgamma(c) += dout.m.row(c).cwiseProduct(cache.xhat.row(c)).sum();
            dbeta(c) += dout.m.row(c).sum();
            dxhat.row(c) = dout.m.row(c) * gamma(c);
        }
        for (int g = 0; g < groups; ++g) {
            const auto dxh = dxhat.middleRows(g * cg, cg);
            const auto xh = cache.xhat.middleRows(g * cg, cg);
            const float n = static_cast<float>(cg * px);
            const float s1 = dxh.sum();
            const float s2 = dxh.cwiseProduct(xh).sum();
            din.m.middleRows(g * cg, cg) =
                ((dxh.array() - s1 / n - xh.array() * (s2 / n)) *
                 cache.rstd[static_cast<std::size_t>(g)])
                    .matrix();
        }
        return din;
    }
};

// ------------------------------------------------------------------------
// Pointwise nonlinearities
// ------------------------------------------------------------------------

inline void relu_inplace(Feat& f) { f.m = f.m.cwiseMax(0.0f); }

// Gradient through ReLU given the cached *output*.
inline Feat relu_backward(const Feat& out, const Feat& dout) {
    Feat din = dout;
    din.m = dout.m.cwiseProduct((out.m.array() > 0.0f).cast<float>().matrix());
    return din;
}

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
}

inline float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752f));
    const float pdf = std::exp(-0.5f * x * x) * 0.39894228040143268f;  // 1/sqrt(2*pi)
    return cdf + x * pdf;
}

inline float sigmoid(float z) {
    if (z >= 0.0f) return 1.0f / (1.0f + std::exp(-z));
    const float e = std::exp(z);
    return e / (1.0f + e);
}

// ------------------------------------------------------------------------
// 2x bilinear upsampling (half-pixel centers, no corner alignment)
// ------------------------------------------------------------------------

struct LinTable {
    std::vector<int> i0, i1;
    std::vector<float> w1;  // weight on i1; weight on i0 is 1 - w1
};

inline LinTable bilinear_table(int src, int dst) {
    LinTable t;
    t.i0.resize(dst);
    t.i1.resize(dst);
    t.w1.resize(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        const double f = (i + 0.5) * scale - 0.5;
        int lo = static_cast<int>(std::floor(f));
        const double w = f - lo;
        int hi = lo + 1;
        lo = std::clamp(lo, 0, src - 1);
        hi = std::clamp(hi, 0, src - 1);
        t.i0[i] = lo;
        t.i1[i] = hi;
        t.w1[i] = static_cast<float>(w);
    }
    return t;
}

inline Feat upsample2x(const Feat& in) {
    const int oh = in.h * 2, ow = in.w * 2;
    const LinTable ty = bilinear_table(in.h, oh);
    const LinTable tx = bilinear_table(in.w, ow);
    Feat out(in.c, oh, ow);
    for (int oy = 0; oy < oh; ++oy) {
        const int y0 = ty.i0[oy], y1 = ty.i1[oy];
        const float wy = ty.w1[oy];
        for (int ox = 0; ox < ow; ++ox) {
            const int x0 = tx.i0[ox], x1 = tx.i1[ox];
            const float wx = tx.w1[ox];
            const auto col = [&](int y, int x) {
                return in.m.col(y * in.w + x);
            };
            out.m.col(oy * ow + ox) = (1.0f - wy) * ((1.0f - wx) * col(y0, x0) + wx * col(y0, x1)) +
                                      wy * ((1.0f - wx) * col(y1, x0) + wx * col(y1, x1));
        }
    }
    return out;
}

inline Feat upsample2x_backward(const Feat& dout, int in_h, int in_w) {
    const LinTable ty = bilinear_table(in_h, dout.h);
    const LinTable tx = bilinear_table(in_w, dout.w);
    Feat din(dout.c, in_h, in_w);
    for (int oy = 0; oy < dout.h; ++oy) {
        const int y0 = ty.i0[oy], y1 = ty.i1[oy];
        const float wy = ty.w1[oy];
        for (int ox = 0; ox < dout.w; ++ox) {
            const int x0 = tx.i0[ox], x1 = tx.i1[ox];
            const float wx = tx.w1[ox];
            const auto g = dout.m.col(oy * dout.w + ox);
            din.m.col(y0 * in_w + x0) += (1.0f - wy) * (1.0f - wx) * g;
            din.m.col(y0 * in_w + x1) += (1.0f - wy) * wx * g;
            din.m.col(y1 * in_w + x0) += wy * (1.0f - wx) * g;
            din.m.col(y1 * in_w + x1) += wy * wx * g;
        }
    }
    return din;
}

// Channel concatenation [a; b] and the matching split for the backward pass.
inline Feat concat_channels(const Feat& a, const Feat& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("concat_channels: spatial mismatch");
    Feat out(a.c + b.c, a.h, a.w);
    out.m.topRows(a.c) = a.m;
    out.m.bottomRows(b.c) = b.m;
    return out;
}

// ------------------------------------------------------------------------
// Token-space layers. Tokens are a Mat of shape N x D.
// ------------------------------------------------------------------------

struct LayerNorm {
    int dim = 0;
    std::size_t g_off = 0, b_off = 0;
    static constexpr float kEps = 1e-5f;

    LayerNorm() = default;
    LayerNorm(ParamRegistry& reg, const std::string& name, int dim_) : dim(dim_) {
        g_off = reg.add(name + ".g", {dim_});
        b_off = reg.add(name + ".b", {dim_});
    }

    struct Cache {
        Mat xhat;       // N x D
        Vec rstd;       // N
    };

    Mat forward(const float* theta, const Mat& x, Cache* cache = nullptr) const {
        const Eigen::Map<const Vec> g(theta + g_off, dim);
        const Eigen::Map<const Vec> b(theta + b_off, dim);
        const int n = static_cast<int>(x.rows());
        Mat xhat(n, dim);
        Vec rstd(n);
        for (int i = 0; i < n; ++i) {
            const float mean = x.row(i).mean();
            const float var = (x.row(i).array() - mean).square().mean();
            const float r = 1.0f / std::sqrt(var + kEps);
            xhat.row(i) = ((x.row(i).array() - mean) * r).matrix();
            rstd(i) = r;
        }
        Mat y(n, dim);
        for (int i = 0; i < n; ++i)
            y.row(i) =
                (xhat.row(i).array() * g.transpose().array() + b.transpose().array()).matrix();
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->rstd = std::move(rstd);
        }
        return y;
    }

    Mat backward(const float* theta, const Cache& cache, const Mat& dy, float* grad) const {
        const Eigen::Map<const Vec> g(theta + g_off, dim);
        Eigen::Map<Vec> dg(grad + g_off, dim);
        Eigen::Map<Vec> db(grad + b_off, dim);
        dg.noalias() += (dy.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
        db.noalias() += dy.colwise().sum().transpose();

        const int n = static_cast<int>(dy.rows());
        Mat dx(n, dim);
        const float inv_d = 1.0f / static_cast<float>(dim);
        for (int i = 0; i < n; ++i) {
            const auto dxhat = (dy.row(i).array() * g.transpose().array()).eval();
            const float m1 = dxhat.mean();
            const float m2 = (dxhat * cache.xhat.row(i).array()).mean();
            dx.row(i) =
                ((dxhat - m1 - cache.xhat.row(i).array() * m2) * cache.rstd(i)).matrix();
        }
        (void)inv_d;
        return dx;
    }
};

struct Linear {
    int in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& name, int in_, int out_) : in(in_), out(out_) {
        w_off = reg.add(name + ".w", {in_, out_});
        b_off = reg.add(name + ".b", {out_});
    }

    Mat forward(const float* theta, const Mat& x) const {
        const Eigen::Map<const Mat> w(theta + w_off, in, out);
        const Eigen::Map<const Vec> b(theta + b_off, out);
        Mat y;
        y.noalias() = x * w;
        y.rowwise() += b.transpose();
        return y;
    }

    Mat backward(const float* theta, const Mat& x, const Mat& dy, float* grad) const {
        Eigen::Map<Mat> dw(grad + w_off, in, out);
        Eigen::Map<Vec> db(grad + b_off, out);
        dw.noalias() += x.transpose() * dy;
        db.noalias() += dy.colwise().sum().transpose();
        const Eigen::Map<const Mat> w(theta + w_off, in, out);
        Mat dx;
        dx.noalias() = dy * w.transpose();
        return dx;
    }
};

// Multi-head self-attention over pre-normalized tokens.
struct Attention {
    int dim = 0, heads = 0;
    Linear qkv, proj;

    Attention() = default;
    Attention(ParamRegistry& reg, const std::string& name, int dim_, int heads_)
        : dim(dim_), heads(heads_), qkv(reg, name + ".qkv", dim_, 3 * dim_),
          proj(reg, name + ".proj", dim_, dim_) {
        if (dim_ % heads_ != 0) throw std::invalid_argument("attention: dim % heads != 0");
    }

    struct Cache {
        Mat x;                 // layer input after LN, N x D
        Mat qkv_out;           // N x 3D
        std::vector<Mat> attn; // per head, N x N softmax rows
        Mat concat;            // N x D, pre-projection
    };

    Mat forward(const float* theta, const Mat& x, Cache* cache = nullptr) const {
        const int n = static_cast<int>(x.rows());
        const int dh = dim / heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        Mat qkv_out = qkv.forward(theta, x);
        Mat concat(n, dim);
        std::vector<Mat> attn;
        if (cache) attn.reserve(static_cast<std::size_t>(heads));

        for (int h = 0; h < heads; ++h) {
            const auto q = qkv_out.middleCols(h * dh, dh);
            const auto kk = qkv_out.middleCols(dim + h * dh, dh);
            const auto v = qkv_out.middleCols(2 * dim + h * dh, dh);
            Mat scores;
            scores.noalias() = q * kk.transpose();
            scores *= scale;
            // row-wise softmax with max subtraction
            for (int i = 0; i < n; ++i) {
                const float mx = scores.row(i).maxCoeff();
                scores.row(i) = (scores.row(i).array() - mx).exp();
                scores.row(i) /= scores.row(i).sum();
            }
            concat.middleCols(h * dh, dh).noalias() = scores * v;
            if (cache) attn.push_back(std::move(scores));
        }
        Mat y = proj.forward(theta, concat);
        if (cache) {
            cache->x = x;
            cache->qkv_out = std::move(qkv_out);
            cache->attn = std::move(attn);
            cache->concat = std::move(concat);
        }
        return y;
    }

    Mat backward(const float* theta, const Cache& cache, const Mat& dy, float* grad) const {
        const int n = static_cast<int>(dy.rows());
        const int dh = dim / heads;
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

        Mat dconcat = proj.backward(theta, cache.concat, dy, grad);
        Mat dqkv = Mat::Zero(n, 3 * dim);
        for (int h = 0; h < heads; ++h) {
            const auto q = cache.qkv_out.middleCols(h * dh, dh);
            const auto kk = cache.qkv_out.middleCols(dim + h * dh, dh);
            const auto v = cache.qkv_out.middleCols(2 * dim + h * dh, dh);
            const Mat& a = cache.attn[static_cast<std::size_t>(h)];
            const auto dout_h = dconcat.middleCols(h * dh, dh);

            Mat da;
            da.noalias() = dout_h * v.transpose();              // N x N
            dqkv.middleCols(2 * dim + h * dh, dh).noalias() = a.transpose() * dout_h;

            // softmax backward: ds = a .* (da - rowsum(da .* a))
            Mat ds(n, n);
            for (int i = 0; i < n; ++i) {
                const float dot = da.row(i).cwiseProduct(a.row(i)).sum();
                ds.row(i) = a.row(i).cwiseProduct((da.row(i).array() - dot).matrix());
            }
            ds *= scale;
            dqkv.middleCols(h * dh, dh).noalias() = ds * kk;
            dqkv.middleCols(dim + h * dh, dh).noalias() = ds.transpose() * q;
        }
        return qkv.backward(theta, cache.x, dqkv, grad);
    }
};

// Two-layer feed-forward with GELU.
struct Ffn {
    int dim = 0, hidden = 0;
    Linear fc1, fc2;

    Ffn() = default;
    Ffn(ParamRegistry& reg, const std::string& name, int dim_, int hidden_)
        : dim(dim_), hidden(hidden_), fc1(reg, name + ".fc1", dim_, hidden_),
          fc2(reg, name + ".fc2", hidden_, dim_) {}

    struct Cache {
        Mat x;   // input, N x D
        Mat u;   // pre-activation, N x H
        Mat g;   // post-activation, N x H
    };

    Mat forward(const float* theta, const Mat& x, Cache* cache = nullptr) const {
        Mat u = fc1.forward(theta, x);
        Mat g = u.unaryExpr([](float v) { return gelu(v); });
        Mat y = fc2.forward(theta, g);
        if (cache) {
            cache->x = x;
            cache->u = std::move(u);
            cache->g = std::move(g);
        }
        return y;
    }

    Mat backward(const float* theta, const Cache& cache, const Mat& dy, float* grad) const {
        Mat dg = fc2.backward(theta, cache.g, dy, grad);
        Mat du = dg.cwiseProduct(cache.u.unaryExpr([](float v) { return gelu_grad(v); }));
        return fc1.backward(theta, cache.x, du, grad);
    }
};

}  // namespace microsegnet::nn
