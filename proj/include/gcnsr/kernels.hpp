#ifndef GCNSR_KERNELS_HPP
#define GCNSR_KERNELS_HPP

// Forward and backward kernels for every differentiable primitive. These are
// pure functions of their arguments; the autograd layer wires them together.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gcnsr/errors.hpp"
#include "gcnsr/tensor.hpp"

namespace gcnsr::kernels {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// ---------------------------------------------------------------------------
// conv2d

struct ConvGeometry {
    std::size_t cin = 0;
    std::size_t cout = 0;
    std::size_t k = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t ho = 0;
    std::size_t wo = 0;

    std::size_t patch() const { return cin * k * k; }
    std::size_t out_plane() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& weight, const Shape& bias,
                                  std::size_t stride, std::size_t pad)
{
    if (stride == 0)
        throw ConfigError("conv2d: stride must be positive");
    if (weight.h != weight.w) {
        throw DimensionError("conv2d: kernel height " + std::to_string(weight.h) +
                             " differs from kernel width " + std::to_string(weight.w));
    }
    if (in.c != weight.c) {
        throw DimensionError("conv2d: channel axis mismatch, input has " + std::to_string(in.c) +
                             " channels but weight expects " + std::to_string(weight.c));
    }
    if (bias.numel() != weight.n) {
        throw DimensionError("conv2d: bias length " + std::to_string(bias.numel()) +
                             " does not match " + std::to_string(weight.n) + " output channels");
    }
    const std::size_t k = weight.h;
    if (in.h + 2 * pad < k) {
        throw DimensionError("conv2d: padded height " + std::to_string(in.h + 2 * pad) +
                             " smaller than kernel " + std::to_string(k));
    }
    if (in.w + 2 * pad < k) {
        throw DimensionError("conv2d: padded width " + std::to_string(in.w + 2 * pad) +
                             " smaller than kernel " + std::to_string(k));
    }
    ConvGeometry g;
    g.cin = weight.c;
    g.cout = weight.n;
    g.k = k;
    g.stride = stride;
    g.pad = pad;
    g.ho = (in.h + 2 * pad - k) / stride + 1;
    g.wo = (in.w + 2 * pad - k) / stride + 1;
    return g;
}

namespace detail {

// Column buffers are capped so large batches are processed in item chunks.
inline std::size_t conv_chunk(const ConvGeometry& g, std::size_t batch)
{
    constexpr std::size_t budget = std::size_t{1} << 22;
    const std::size_t per_item = std::max<std::size_t>(1, g.patch() * g.out_plane());
    return std::clamp<std::size_t>(budget / per_item, 1, std::max<std::size_t>(batch, 1));
}

template <class T>
void im2col(const Tensor<T>& in, const ConvGeometry& g, std::size_t n0, std::size_t nb, T* cols)
{
    const Shape& s = in.shape();
    const std::size_t P = g.out_plane();
    const std::size_t width = nb * P;
    const auto ih_of = [&](std::size_t o, std::size_t kk) {
        return static_cast<std::ptrdiff_t>(o * g.stride + kk) - static_cast<std::ptrdiff_t>(g.pad);
    };
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = cols + ((ci * g.k + ki) * g.k + kj) * width;
                for (std::size_t b = 0; b < nb; ++b) {
                    const T* src = in.data() + ((n0 + b) * s.c + ci) * s.plane();
                    T* dst = row + b * P;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        const std::ptrdiff_t ih = ih_of(oh, ki);
                        T* d = dst + oh * g.wo;
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h)) {
                            std::fill(d, d + g.wo, T(0));
                            continue;
                        }
                        const T* srow = src + static_cast<std::size_t>(ih) * s.w;
                        for (std::size_t ow = 0; ow < g.wo; ++ow) {
                            const std::ptrdiff_t iw = ih_of(ow, kj);
                            d[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(s.w))
                                        ? T(0)
                                        : srow[static_cast<std::size_t>(iw)];
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, std::size_t n0, std::size_t nb, Tensor<T>& din)
{
    const Shape& s = din.shape();
    const std::size_t P = g.out_plane();
    const std::size_t width = nb * P;
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = cols + ((ci * g.k + ki) * g.k + kj) * width;
                for (std::size_t b = 0; b < nb; ++b) {
                    T* dst = din.data() + ((n0 + b) * s.c + ci) * s.plane();
                    const T* src = row + b * P;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.h))
                            continue;
                        T* drow = dst + static_cast<std::size_t>(ih) * s.w;
                        const T* srow = src + oh * g.wo;
                        for (std::size_t ow = 0; ow < g.wo; ++ow) {
                            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                                      static_cast<std::ptrdiff_t>(g.pad);
                            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(s.w))
                                drow[static_cast<std::size_t>(iw)] += srow[ow];
                        }
                    }
                }
            }
        }
    }
}

// Few output channels make the im2col GEMM memory-bound (a 3 x k*k*cin by
// k*k*cin x pixels product). Such stride-1 convolutions run directly on
// zero-padded planes instead: with the output laid out at the padded row
// pitch, every (channel, tap) pair is one contiguous multiply-add over the
// plane, and the columns past wo are cropped afterwards.
inline constexpr std::size_t kDirectConvMaxOut = 8;

inline bool use_direct(const ConvGeometry& g) { return g.cout <= kDirectConvMaxOut && g.stride == 1; }

struct PaddedPlanes {
    std::size_t hp, wp, ho, wo;
    std::size_t span() const { return (ho - 1) * wp + wo; } // last valid output index + 1
};

inline PaddedPlanes padded_planes(const ConvGeometry& g, const Shape& in)
{
    return {in.h + 2 * g.pad, in.w + 2 * g.pad, g.ho, g.wo};
}

template <class T>
void pad_item(const Tensor<T>& in, std::size_t n, const ConvGeometry& g, const PaddedPlanes& pp, std::vector<T>& buf)
{
    const Shape& s = in.shape();
    buf.assign(s.c * pp.hp * pp.wp, T(0));
    for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h; ++y)
            std::copy_n(in.data() + ((n * s.c + c) * s.h + y) * s.w, s.w,
                        buf.data() + (c * pp.hp + y + g.pad) * pp.wp + g.pad);
}

template <class T>
void axpy(T* __restrict y, const T* __restrict x, T a, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i)
        y[i] += a * x[i];
}

// Sixteen interleaved partial sums let the compiler vectorize while the
// summation order stays fixed.
template <class T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n)
{
    constexpr std::size_t lanes = 16;
    T part[lanes] = {};
    std::size_t i = 0;
    for (; i + lanes <= n; i += lanes)
        for (std::size_t j = 0; j < lanes; ++j)
            part[j] += a[i + j] * b[i + j];
    T acc = 0;
    for (; i < n; ++i)
        acc += a[i] * b[i];
    for (std::size_t j = 0; j < lanes; ++j)
        acc += part[j];
    return acc;
}

template <class T>
void direct_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeometry& g,
                    Tensor<T>& out)
{
    const Shape& s = in.shape();
    const PaddedPlanes pp = padded_planes(g, s);
    const std::size_t plane = pp.hp * pp.wp;
    const std::size_t oplane = pp.ho * pp.wp;
    const std::size_t len = pp.span();
    std::vector<T> inpad, acc(g.cout * oplane);
    for (std::size_t n = 0; n < s.n; ++n) {
        pad_item(in, n, g, pp, inpad);
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const T* wk = weight.data() + (co * g.cin + ci) * g.k * g.k;
                const T* src = inpad.data() + ci * plane;
                for (std::size_t ki = 0; ki < g.k; ++ki)
                    for (std::size_t kj = 0; kj < g.k; ++kj)
                        axpy(acc.data() + co * oplane, src + ki * pp.wp + kj, wk[ki * g.k + kj], len);
            }
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t y = 0; y < pp.ho; ++y) {
                const T* a = acc.data() + co * oplane + y * pp.wp;
                T* o = out.data() + ((n * g.cout + co) * pp.ho + y) * pp.wo;
                for (std::size_t x = 0; x < pp.wo; ++x)
                    o[x] = a[x] + bias[co];
            }
    }
}

template <class T>
void direct_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& dout, const ConvGeometry& g,
                     Tensor<T>* din, Tensor<T>* dw)
{
    const Shape& s = in.shape();
    const PaddedPlanes pp = padded_planes(g, s);
    const std::size_t plane = pp.hp * pp.wp;
    const std::size_t oplane = pp.ho * pp.wp;
    const std::size_t len = pp.span();
    const std::size_t kk = g.k * g.k;
    std::vector<T> inpad, gpad(g.cout * oplane), dinpad;
    for (std::size_t n = 0; n < s.n; ++n) {
        // dout at the padded pitch; the cropped columns stay zero
        std::fill(gpad.begin(), gpad.end(), T(0));
        for (std::size_t co = 0; co < g.cout; ++co)
            for (std::size_t y = 0; y < pp.ho; ++y)
                std::copy_n(dout.data() + ((n * g.cout + co) * pp.ho + y) * pp.wo, pp.wo,
                            gpad.data() + co * oplane + y * pp.wp);
        if (dw)
            pad_item(in, n, g, pp, inpad);
        if (din)
            dinpad.assign(s.c * plane, T(0));
        for (std::size_t co = 0; co < g.cout; ++co) {
            const T* go = gpad.data() + co * oplane;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const T* wk = weight.data() + (co * g.cin + ci) * kk;
                T* gw = dw ? dw->data() + (co * g.cin + ci) * kk : nullptr;
                for (std::size_t ki = 0; ki < g.k; ++ki)
                    for (std::size_t kj = 0; kj < g.k; ++kj) {
                        const std::size_t off = ci * plane + ki * pp.wp + kj;
                        if (gw)
                            gw[ki * g.k + kj] += dot(go, inpad.data() + off, len);
                        if (din)
                            axpy(dinpad.data() + off, go, wk[ki * g.k + kj], len);
                    }
            }
        }
        if (din)
            for (std::size_t c = 0; c < s.c; ++c)
                for (std::size_t y = 0; y < s.h; ++y)
                    std::copy_n(dinpad.data() + (c * pp.hp + y + g.pad) * pp.wp + g.pad, s.w,
                                din->data() + ((n * s.c + c) * s.h + y) * s.w);
    }
}

} // namespace detail

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride, std::size_t pad)
{
    const ConvGeometry g = conv_geometry(in.shape(), weight.shape(), bias.shape(), stride, pad);
    const std::size_t N = in.shape().n;
    const std::size_t P = g.out_plane();
    Tensor<T> out(Shape{N, g.cout, g.ho, g.wo});
    if (detail::use_direct(g)) {
        detail::direct_forward(in, weight, bias, g, out);
        return out;
    }
    const std::size_t chunk = detail::conv_chunk(g, N);
    std::vector<T> cols(g.patch() * chunk * P);
    ConstMatrixMap<T> W(weight.data(), static_cast<Eigen::Index>(g.cout),
                        static_cast<Eigen::Index>(g.patch()));
    RowMatrix<T> R;
    for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
        const std::size_t nb = std::min(chunk, N - n0);
        detail::im2col(in, g, n0, nb, cols.data());
        ConstMatrixMap<T> C(cols.data(), static_cast<Eigen::Index>(g.patch()),
                            static_cast<Eigen::Index>(nb * P));
        R.noalias() = W * C;
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t co = 0; co < g.cout; ++co) {
                const T* src = R.data() + co * nb * P + b * P;
                T* dst = out.data() + ((n0 + b) * g.cout + co) * P;
                const T bv = bias[co];
                for (std::size_t p = 0; p < P; ++p)
                    dst[p] = src[p] + bv;
            }
        }
    }
    return out;
}

template <class T>
struct ConvGrads {
    std::optional<Tensor<T>> input;
    std::optional<Tensor<T>> weight;
    std::optional<Tensor<T>> bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                             const Tensor<T>& dout, std::size_t stride, std::size_t pad,
                             bool need_input, bool need_weight, bool need_bias)
{
    const ConvGeometry g = conv_geometry(in.shape(), weight.shape(), bias.shape(), stride, pad);
    const std::size_t N = in.shape().n;
    const std::size_t P = g.out_plane();
    require_same_shape(dout.shape(), Shape{N, g.cout, g.ho, g.wo}, "conv2d backward");

    ConvGrads<T> grads;
    if (need_bias) {
        Tensor<T> db(bias.shape());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < g.cout; ++co) {
                const T* src = dout.data() + (n * g.cout + co) * P;
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p)
                    acc += src[p];
                db[co] += acc;
            }
        grads.bias = std::move(db);
    }
    if (!need_input && !need_weight)
        return grads;

    if (need_input)
        grads.input = Tensor<T>(in.shape());
    if (detail::use_direct(g)) {
        if (need_weight)
            grads.weight = Tensor<T>(weight.shape());
        detail::direct_backward(in, weight, dout, g, need_input ? &*grads.input : nullptr,
                                need_weight ? &*grads.weight : nullptr);
        return grads;
    }
    RowMatrix<T> dW;
    if (need_weight)
        dW = RowMatrix<T>::Zero(static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));

    const std::size_t chunk = detail::conv_chunk(g, N);
    std::vector<T> cols(g.patch() * chunk * P);
    RowMatrix<T> dR;
    RowMatrix<T> dC;
    ConstMatrixMap<T> W(weight.data(), static_cast<Eigen::Index>(g.cout),
                        static_cast<Eigen::Index>(g.patch()));
    for (std::size_t n0 = 0; n0 < N; n0 += chunk) {
        const std::size_t nb = std::min(chunk, N - n0);
        dR.resize(static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(nb * P));
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t co = 0; co < g.cout; ++co)
                std::copy_n(dout.data() + ((n0 + b) * g.cout + co) * P, P, dR.data() + co * nb * P + b * P);
        if (need_weight) {
            detail::im2col(in, g, n0, nb, cols.data());
            ConstMatrixMap<T> C(cols.data(), static_cast<Eigen::Index>(g.patch()),
                                static_cast<Eigen::Index>(nb * P));
            dW.noalias() += dR * C.transpose();
        }
        if (need_input) {
            dC.noalias() = W.transpose() * dR;
            detail::col2im(dC.data(), g, n0, nb, *grads.input);
        }
    }
    if (need_weight) {
        Tensor<T> dw(weight.shape());
        std::copy_n(dW.data(), dw.size(), dw.data());
        grads.weight = std::move(dw);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// batch normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

enum class NormMode { train, eval };

template <class T>
struct BatchNormCache {
    Tensor<T> xhat;
    std::vector<T> invstd;
};

/// Per-channel moments over batch and spatial axes.
template <class T>
struct ChannelMoments {
    std::vector<double> mean;
    std::vector<double> var; // biased
    std::size_t count = 0;
};

template <class T>
ChannelMoments<T> channel_moments(const Tensor<T>& x)
{
    const Shape& s = x.shape();
    ChannelMoments<T> m;
    m.count = s.n * s.plane();
    m.mean.assign(s.c, 0.0);
    m.var.assign(s.c, 0.0);
    for (std::size_t c = 0; c < s.c; ++c) {
        double acc = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const T* p = x.data() + (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i)
                acc += p[i];
        }
        const double mean = acc / static_cast<double>(m.count);
        double sq = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const T* p = x.data() + (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const double d = p[i] - mean;
                sq += d * d;
            }
        }
        m.mean[c] = mean;
        m.var[c] = sq / static_cast<double>(m.count);
    }
    return m;
}

/// Normalizes per channel. Train mode uses batch statistics and, when
/// `running_mean`/`running_var` are given, folds them into the running
/// estimates (momentum 0.9, unbiased variance). Eval mode reads the running
/// estimates.
template <class T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             Tensor<T>* running_mean, Tensor<T>* running_var, NormMode mode,
                             BatchNormCache<T>* cache)
{
    const Shape& s = x.shape();
    if (gamma.size() != s.c || beta.size() != s.c) {
        throw DimensionError("batch_norm: channel axis mismatch, input has " + std::to_string(s.c) +
                             " channels but gamma/beta have " + std::to_string(gamma.size()) + "/" +
                             std::to_string(beta.size()));
    }
    std::vector<T> mean(s.c);
    std::vector<T> invstd(s.c);
    if (mode == NormMode::train) {
        const std::size_t count = s.n * s.plane();
        if (count < 2) {
            throw DegenerateStatisticsError("batch_norm: train mode needs at least 2 samples per channel, got " +
                                            std::to_string(count));
        }
        const auto m = channel_moments(x);
        for (std::size_t c = 0; c < s.c; ++c) {
            mean[c] = static_cast<T>(m.mean[c]);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(m.var[c] + kBatchNormEps));
        }
        if (running_mean && running_var) {
            const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
            for (std::size_t c = 0; c < s.c; ++c) {
                (*running_mean)[c] = static_cast<T>(kBatchNormMomentum * (*running_mean)[c] +
                                                    (1.0 - kBatchNormMomentum) * m.mean[c]);
                (*running_var)[c] = static_cast<T>(kBatchNormMomentum * (*running_var)[c] +
                                                   (1.0 - kBatchNormMomentum) * m.var[c] * unbias);
            }
        }
    } else {
        if (!running_mean || !running_var)
            throw ConfigError("batch_norm: eval mode requires running statistics");
        for (std::size_t c = 0; c < s.c; ++c) {
            mean[c] = (*running_mean)[c];
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*running_var)[c]) + kBatchNormEps));
        }
    }
    Tensor<T> y(s);
    Tensor<T> xhat;
    if (cache)
        xhat = Tensor<T>(s);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const T xh = (x[off + i] - mean[c]) * invstd[c];
                if (cache)
                    xhat[off + i] = xh;
                y[off + i] = gamma[c] * xh + beta[c];
            }
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->invstd = std::move(invstd);
    }
    return y;
}

template <class T>
struct BatchNormGrads {
    Tensor<T> input;
    Tensor<T> gamma;
    Tensor<T> beta;
};

template <class T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& dy, const Tensor<T>& gamma,
                                      const BatchNormCache<T>& cache, NormMode mode)
{
    const Shape& s = dy.shape();
    const double M = static_cast<double>(s.n * s.plane());
    BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
    for (std::size_t c = 0; c < s.c; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xhat = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
                sum_dy += dy[off + i];
                sum_dy_xhat += static_cast<double>(dy[off + i]) * cache.xhat[off + i];
            }
        }
        g.gamma[c] = static_cast<T>(sum_dy_xhat);
        g.beta[c] = static_cast<T>(sum_dy);
        const double gi = static_cast<double>(gamma[c]) * cache.invstd[c];
        for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
                if (mode == NormMode::train) {
                    g.input[off + i] = static_cast<T>(
                        gi * (dy[off + i] - sum_dy / M - cache.xhat[off + i] * sum_dy_xhat / M));
                } else {
                    g.input[off + i] = static_cast<T>(gi * dy[off + i]);
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// activations

enum class Activation { prelu, leaky_relu, tanh, sigmoid };

inline constexpr double kLeakyAlpha = 0.2;

inline Activation parse_activation(const std::string& name)
{
    if (name == "prelu")
        return Activation::prelu;
    if (name == "leaky_relu")
        return Activation::leaky_relu;
    if (name == "tanh")
        return Activation::tanh;
    if (name == "sigmoid")
        return Activation::sigmoid;
    throw ConfigError("unknown activation kind '" + name + "'");
}

inline const char* to_string(Activation a)
{
    switch (a) {
    case Activation::prelu: return "prelu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    }
    return "?";
}

template <class T>
Tensor<T> activation_forward(Activation kind, const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* slope)
{
    const Shape& s = x.shape();
    Tensor<T> y(s);
    switch (kind) {
    case Activation::prelu: {
        if (!slope)
            throw ConfigError("prelu requires a per-channel slope tensor");
        if (slope->size() != s.c) {
            throw DimensionError("prelu: channel axis mismatch, input has " + std::to_string(s.c) +
                                 " channels but slope has " + std::to_string(slope->size()));
        }
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t off = (n * s.c + c) * s.plane();
                const T a = (*slope)[c];
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const T v = x[off + i];
                    y[off + i] = v > T(0) ? v : a * v;
                }
            }
        break;
    }
    case Activation::leaky_relu:
        for (std::size_t i = 0; i < x.size(); ++i)
            y[i] = x[i] > T(0) ? x[i] : static_cast<T>(kLeakyAlpha) * x[i];
        break;
    case Activation::tanh:
        for (std::size_t i = 0; i < x.size(); ++i)
            y[i] = std::tanh(x[i]);
        break;
    case Activation::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i)
            y[i] = T(1) / (T(1) + std::exp(-x[i]));
        break;
    }
    return y;
}

template <class T>
struct ActivationGrads {
    Tensor<T> input;
    std::optional<Tensor<T>> slope;
};

template <class T>
ActivationGrads<T> activation_backward(Activation kind, const Tensor<T>& x, const Tensor<T>& y,
                                       const Tensor<T>& dy, const Tensor<T>* slope, bool need_slope)
{
    const Shape& s = x.shape();
    ActivationGrads<T> g{Tensor<T>(s), std::nullopt};
    switch (kind) {
    case Activation::prelu: {
        Tensor<T> ds(slope->shape());
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t off = (n * s.c + c) * s.plane();
                const T a = (*slope)[c];
                T acc = 0;
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const T v = x[off + i];
                    if (v > T(0)) {
                        g.input[off + i] = dy[off + i];
                    } else {
                        g.input[off + i] = a * dy[off + i];
                        acc += v * dy[off + i];
                    }
                }
                ds[c] += acc;
            }
        if (need_slope)
            g.slope = std::move(ds);
        break;
    }
    case Activation::leaky_relu:
        for (std::size_t i = 0; i < x.size(); ++i)
            g.input[i] = x[i] > T(0) ? dy[i] : static_cast<T>(kLeakyAlpha) * dy[i];
        break;
    case Activation::tanh:
        for (std::size_t i = 0; i < x.size(); ++i)
            g.input[i] = dy[i] * (T(1) - y[i] * y[i]);
        break;
    case Activation::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i)
            g.input[i] = dy[i] * y[i] * (T(1) - y[i]);
        break;
    }
    return g;
}

// ---------------------------------------------------------------------------
// dense: input N x D (any trailing extents flattened), weight 1x1xDxM, bias M

template <class T>
void check_dense(const Shape& in, const Shape& weight, const Shape& bias)
{
    if (in.item() != weight.h) {
        throw DimensionError("dense: input feature axis has " + std::to_string(in.item()) +
                             " values but weight expects " + std::to_string(weight.h) + " rows");
    }
    if (bias.numel() != weight.w) {
        throw DimensionError("dense: bias length " + std::to_string(bias.numel()) + " does not match " +
                             std::to_string(weight.w) + " outputs");
    }
}

template <class T>
Tensor<T> dense_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias)
{
    check_dense<T>(in.shape(), weight.shape(), bias.shape());
    const auto N = static_cast<Eigen::Index>(in.shape().n);
    const auto D = static_cast<Eigen::Index>(weight.shape().h);
    const auto M = static_cast<Eigen::Index>(weight.shape().w);
    Tensor<T> out(Shape{in.shape().n, weight.shape().w, 1, 1});
    MatrixMap<T> Y(out.data(), N, M);
    Y.noalias() = ConstMatrixMap<T>(in.data(), N, D) * ConstMatrixMap<T>(weight.data(), D, M);
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index m = 0; m < M; ++m)
            Y(n, m) += bias[static_cast<std::size_t>(m)];
    return out;
}

template <class T>
struct DenseGrads {
    std::optional<Tensor<T>> input;
    std::optional<Tensor<T>> weight;
    std::optional<Tensor<T>> bias;
};

template <class T>
DenseGrads<T> dense_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& dout,
                             bool need_input, bool need_weight, bool need_bias)
{
    const auto N = static_cast<Eigen::Index>(in.shape().n);
    const auto D = static_cast<Eigen::Index>(weight.shape().h);
    const auto M = static_cast<Eigen::Index>(weight.shape().w);
    ConstMatrixMap<T> dY(dout.data(), N, M);
    DenseGrads<T> g;
    if (need_input) {
        Tensor<T> dx(in.shape());
        MatrixMap<T>(dx.data(), N, D).noalias() = dY * ConstMatrixMap<T>(weight.data(), D, M).transpose();
        g.input = std::move(dx);
    }
    if (need_weight) {
        Tensor<T> dw(weight.shape());
        MatrixMap<T>(dw.data(), D, M).noalias() = ConstMatrixMap<T>(in.data(), N, D).transpose() * dY;
        g.weight = std::move(dw);
    }
    if (need_bias) {
        Tensor<T> db(Shape{1, weight.shape().w, 1, 1});
        for (Eigen::Index n = 0; n < N; ++n)
            for (Eigen::Index m = 0; m < M; ++m)
                db[static_cast<std::size_t>(m)] += dY(n, m);
        g.bias = std::move(db);
    }
    return g;
}

// ---------------------------------------------------------------------------
// spatial rearrangements

/// out[n, c, r*h+i, r*w+j] = in[n, c*r*r + i*r + j, h, w]
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& in, std::size_t r)
{
    const Shape& s = in.shape();
    if (r == 0)
        throw ConfigError("pixel_shuffle: factor must be positive");
    if (s.c % (r * r) != 0) {
        throw DimensionError("pixel_shuffle: channel axis " + std::to_string(s.c) + " not divisible by " +
                             std::to_string(r * r));
    }
    const std::size_t C = s.c / (r * r);
    Tensor<T> out(Shape{s.n, C, s.h * r, s.w * r});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < r; ++j) {
                    const std::size_t ci = c * r * r + i * r + j;
                    for (std::size_t h = 0; h < s.h; ++h)
                        for (std::size_t w = 0; w < s.w; ++w)
                            out(n, c, r * h + i, r * w + j) = in(n, ci, h, w);
                }
    return out;
}

/// Inverse index map of pixel_shuffle (also its adjoint).
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& in, std::size_t r)
{
    const Shape& s = in.shape();
    if (r == 0 || s.h % r != 0 || s.w % r != 0) {
        throw DimensionError("pixel_unshuffle: spatial extents " + std::to_string(s.h) + "x" +
                             std::to_string(s.w) + " not divisible by " + std::to_string(r));
    }
    Tensor<T> out(Shape{s.n, s.c * r * r, s.h / r, s.w / r});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < r; ++j) {
                    const std::size_t co = c * r * r + i * r + j;
                    for (std::size_t h = 0; h < s.h / r; ++h)
                        for (std::size_t w = 0; w < s.w / r; ++w)
                            out(n, co, h, w) = in(n, c, r * h + i, r * w + j);
                }
    return out;
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& in, std::size_t r)
{
    const Shape& s = in.shape();
    Tensor<T> out(Shape{s.n, s.c, s.h * r, s.w * r});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t h = 0; h < s.h * r; ++h)
                for (std::size_t w = 0; w < s.w * r; ++w)
                    out(n, c, h, w) = in(n, c, h / r, w / r);
    return out;
}

template <class T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dout, std::size_t r)
{
    const Shape& s = dout.shape();
    Tensor<T> din(Shape{s.n, s.c, s.h / r, s.w / r});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t h = 0; h < s.h; ++h)
                for (std::size_t w = 0; w < s.w; ++w)
                    din(n, c, h / r, w / r) += dout(n, c, h, w);
    return din;
}

} // namespace gcnsr::kernels

#endif
