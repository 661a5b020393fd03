// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every function takes tensors by const reference
// and returns a new tensor; the result is recorded on the inputs' tape when
// at least one input is taped. Reductions accumulate in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "upl/rng.hpp"
#include "upl/tensor.hpp"

namespace upl {

enum class Mode { train, eval };

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void accumulate(std::vector<float>* dst, const std::vector<float>& src) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// cols[(ci*k + ky)*k + kx][oy*W + ox] = x[ci][oy + ky - pad][ox + kx - pad]
inline void im2col(const float* x, int cin, int h, int w, int k, int pad, float* cols) {
    const int hw = h * w;
    for (int ci = 0; ci < cin; ++ci) {
        const float* xc = x + static_cast<std::ptrdiff_t>(ci) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = cols + static_cast<std::ptrdiff_t>((ci * k + ky) * k + kx) * hw;
                const int dx = kx - pad;
                const int x0 = std::max(0, -dx);
                const int x1 = std::min(w, w - dx);
                for (int oy = 0; oy < h; ++oy) {
                    const int iy = oy + ky - pad;
                    float* out = row + static_cast<std::ptrdiff_t>(oy) * w;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + w, 0.0f);
                        continue;
                    }
                    const float* in = xc + static_cast<std::ptrdiff_t>(iy) * w;
                    for (int ox = 0; ox < x0; ++ox) out[ox] = 0.0f;
                    for (int ox = x0; ox < x1; ++ox) out[ox] = in[ox + dx];
                    for (int ox = x1; ox < w; ++ox) out[ox] = 0.0f;
                }
            }
        }
    }
}

inline void col2im_add(const float* cols, int cin, int h, int w, int k, int pad, float* gx) {
    const int hw = h * w;
    for (int ci = 0; ci < cin; ++ci) {
        float* gc = gx + static_cast<std::ptrdiff_t>(ci) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = cols + static_cast<std::ptrdiff_t>((ci * k + ky) * k + kx) * hw;
                const int dx = kx - pad;
                const int x0 = std::max(0, -dx);
                const int x1 = std::min(w, w - dx);
                for (int oy = 0; oy < h; ++oy) {
                    const int iy = oy + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    const float* src = row + static_cast<std::ptrdiff_t>(oy) * w;
                    float* dst = gc + static_cast<std::ptrdiff_t>(iy) * w;
                    for (int ox = x0; ox < x1; ++ox) dst[ox + dx] += src[ox];
                }
            }
        }
    }
}

}  // namespace detail

/// Same-size 2D cross-correlation. input [B,Cin,H,W], weight [Cout,Cin,k,k],
/// bias [Cout]; k odd and padding == (k-1)/2.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int padding) {
    detail::require_rank(input, 4, "conv2d");
    detail::require_rank(weight, 4, "conv2d");
    const int B = input.dim(0), cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
    }
    if (weight.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
    if (padding != (k - 1) / 2) throw std::invalid_argument("conv2d: padding must be (k-1)/2");
    if (bias.numel() != static_cast<std::size_t>(cout)) throw ShapeError("conv2d: bias size mismatch");

    const int hw = H * W, kk = cin * k * k;
    Tensor out(Shape{B, cout, H, W});
    std::vector<float> cols(static_cast<std::size_t>(kk) * hw);
    Eigen::Map<const detail::RowMat> wm(weight.data().data(), cout, kk);
    const float* bp = bias.data().data();
    for (int b = 0; b < B; ++b) {
        const float* xb = input.data().data() + static_cast<std::ptrdiff_t>(b) * cin * hw;
        detail::im2col(xb, cin, H, W, k, padding, cols.data());
        Eigen::Map<const detail::RowMat> cm(cols.data(), kk, hw);
        Eigen::Map<detail::RowMat> om(out.mutable_data().data() + static_cast<std::ptrdiff_t>(b) * cout * hw, cout,
                                      hw);
        om.noalias() = wm * cm;
        for (int co = 0; co < cout; ++co) om.row(co).array() += bp[co];
    }
    return make_result(std::move(out), {&input, &weight, &bias},
                       [input = input.detach(), weight = weight.detach(), B, cin, H, W, cout, k, padding, hw, kk](
                           const std::vector<float>& g, detail::GradRefs& gin) {
                           std::vector<float> cols(static_cast<std::size_t>(kk) * hw);
                           std::vector<float> gcols(static_cast<std::size_t>(kk) * hw);
                           Eigen::Map<const detail::RowMat> wm(weight.data().data(), cout, kk);
                           for (int b = 0; b < B; ++b) {
                               Eigen::Map<const detail::RowMat> gm(g.data() + static_cast<std::ptrdiff_t>(b) * cout * hw,
                                                                   cout, hw);
                               if (gin[1]) {
                                   const float* xb = input.data().data() + static_cast<std::ptrdiff_t>(b) * cin * hw;
                                   detail::im2col(xb, cin, H, W, k, padding, cols.data());
                                   Eigen::Map<const detail::RowMat> cm(cols.data(), kk, hw);
                                   Eigen::Map<detail::RowMat> gw(gin[1]->data(), cout, kk);
                                   gw.noalias() += gm * cm.transpose();
                               }
                               if (gin[2]) {
                                   for (int co = 0; co < cout; ++co) {
                                       double s = 0.0;
                                       for (int i = 0; i < hw; ++i) s += gm(co, i);
                                       (*gin[2])[static_cast<std::size_t>(co)] += static_cast<float>(s);
                                   }
                               }
                               if (gin[0]) {
                                   Eigen::Map<detail::RowMat> gc(gcols.data(), kk, hw);
                                   gc.noalias() = wm.transpose() * gm;
                                   detail::col2im_add(gcols.data(), cin, H, W, k, padding,
                                                      gin[0]->data() + static_cast<std::ptrdiff_t>(b) * cin * hw);
                               }
                           }
                       });
}

/// Batch-norm parameters and running statistics for one layer.
struct BNState {
    Tensor gamma;  // [C], trainable
    Tensor beta;   // [C], trainable
    std::vector<float> running_mean;
    std::vector<float> running_var;
    bool has_stats = false;
    float eps = 1e-5f;
    float momentum = 0.1f;

    BNState() = default;
    explicit BNState(int channels)
        : gamma(Shape{channels}, 1.0f),
          beta(Shape{channels}, 0.0f),
          running_mean(static_cast<std::size_t>(channels), 0.0f),
          running_var(static_cast<std::size_t>(channels), 1.0f) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    int channels() const { return static_cast<int>(running_mean.size()); }

    BNState clone() const {
        BNState s = *this;
        s.gamma = gamma.clone();
        s.beta = beta.clone();
        return s;
    }
};

/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running statistics with the unbiased variance; eval mode uses the
/// running statistics. `gamma`/`beta` may be taped views of state.gamma/beta.
inline Tensor batchnorm2d(const Tensor& input, BNState& state, Mode mode, const Tensor& gamma, const Tensor& beta) {
    detail::require_rank(input, 4, "batchnorm2d");
    const int B = input.dim(0), C = input.dim(1), hw = input.dim(2) * input.dim(3);
    if (C != state.channels()) throw ShapeError("batchnorm2d: channel count mismatch");
    const std::size_t N = static_cast<std::size_t>(B) * hw;
    const float* x = input.data().data();

    std::vector<float> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    if (mode == Mode::train) {
        if (N < 2) throw std::invalid_argument("batchnorm2d: train mode needs at least 2 values per channel");
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int b = 0; b < B; ++b) {
                const float* p = x + (static_cast<std::ptrdiff_t>(b) * C + c) * hw;
                for (int i = 0; i < hw; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(N);
            double v = 0.0;
            for (int b = 0; b < B; ++b) {
                const float* p = x + (static_cast<std::ptrdiff_t>(b) * C + c) * hw;
                for (int i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
            }
            const double var = v / static_cast<double>(N);
            mean[static_cast<std::size_t>(c)] = static_cast<float>(m);
            invstd[static_cast<std::size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
            const double unbiased = v / static_cast<double>(N - 1);
            auto& rm = state.running_mean[static_cast<std::size_t>(c)];
            auto& rv = state.running_var[static_cast<std::size_t>(c)];
            rm = static_cast<float>((1.0 - state.momentum) * rm + state.momentum * m);
            rv = static_cast<float>((1.0 - state.momentum) * rv + state.momentum * unbiased);
        }
        state.has_stats = true;
    } else {
        if (!state.has_stats) throw std::logic_error("batchnorm2d: eval mode before any running statistics exist");
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = state.running_mean[static_cast<std::size_t>(c)];
            invstd[static_cast<std::size_t>(c)] =
                static_cast<float>(1.0 / std::sqrt(static_cast<double>(state.running_var[static_cast<std::size_t>(c)]) +
                                                   state.eps));
        }
    }

    Tensor xhat(input.shape());
    Tensor out(input.shape());
    {
        float* xh = xhat.mutable_data().data();
        float* o = out.mutable_data().data();
        const float* gp = gamma.data().data();
        const float* bp = beta.data().data();
        for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) {
                const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * C + c) * hw;
                const float m = mean[static_cast<std::size_t>(c)], is = invstd[static_cast<std::size_t>(c)];
                for (int i = 0; i < hw; ++i) {
                    const float v = (x[off + i] - m) * is;
                    xh[off + i] = v;
                    o[off + i] = gp[c] * v + bp[c];
                }
            }
        }
    }
    return make_result(
        std::move(out), {&input, &gamma, &beta},
        [xhat, invstd, gamma = gamma.detach(), B, C, hw, N, train = (mode == Mode::train)](
            const std::vector<float>& g, detail::GradRefs& gin) {
            const float* xh = xhat.data().data();
            const float* gp = gamma.data().data();
            for (int c = 0; c < C; ++c) {
                double sg = 0.0, sgx = 0.0;
                for (int b = 0; b < B; ++b) {
                    const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * C + c) * hw;
                    for (int i = 0; i < hw; ++i) {
                        sg += g[static_cast<std::size_t>(off + i)];
                        sgx += static_cast<double>(g[static_cast<std::size_t>(off + i)]) * xh[off + i];
                    }
                }
                if (gin[1]) (*gin[1])[static_cast<std::size_t>(c)] += static_cast<float>(sgx);
                if (gin[2]) (*gin[2])[static_cast<std::size_t>(c)] += static_cast<float>(sg);
                if (!gin[0]) continue;
                const double is = invstd[static_cast<std::size_t>(c)];
                const double gam = gp[c];
                auto& gx = *gin[0];
                for (int b = 0; b < B; ++b) {
                    const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * C + c) * hw;
                    for (int i = 0; i < hw; ++i) {
                        const std::size_t j = static_cast<std::size_t>(off + i);
                        double d;
                        if (train) {
                            d = gam * is / static_cast<double>(N) *
                                (static_cast<double>(N) * g[j] - sg - xh[off + i] * sgx);
                        } else {
                            d = gam * is * g[j];
                        }
                        gx[j] += static_cast<float>(d);
                    }
                }
            }
        });
}

inline Tensor batchnorm2d(const Tensor& input, BNState& state, Mode mode) {
    return batchnorm2d(input, state, mode, state.gamma, state.beta);
}

inline Tensor leaky_relu(const Tensor& x, float slope) {
    Tensor out(x.shape());
    const float* xp = x.data().data();
    float* o = out.mutable_data().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = xp[i] > 0.0f ? xp[i] : slope * xp[i];
    return make_result(std::move(out), {&x}, [x = x.detach(), slope](const std::vector<float>& g, detail::GradRefs& gin) {
        const float* xp = x.data().data();
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xp[i] > 0.0f ? g[i] : slope * g[i];
    });
}

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0f); }

/// 2x2 max pooling with stride 2; H and W must be even. Ties pick the first
/// element in row-major window order.
inline Tensor maxpool2d(const Tensor& x) {
    detail::require_rank(x, 4, "maxpool2d");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 || W % 2) throw ShapeError("maxpool2d: spatial size must be even, got " + shape_str(x.shape()));
    const int oh = H / 2, ow = W / 2;
    Tensor out(Shape{B, C, oh, ow});
    std::vector<std::uint32_t> arg(out.numel());
    const float* xp = x.data().data();
    float* o = out.mutable_data().data();
    std::size_t j = 0;
    for (int bc = 0; bc < B * C; ++bc) {
        const float* plane = xp + static_cast<std::ptrdiff_t>(bc) * H * W;
        for (int y = 0; y < oh; ++y) {
            for (int xx = 0; xx < ow; ++xx, ++j) {
                int best = (2 * y) * W + 2 * xx;
                const int cand[3] = {best + 1, best + W, best + W + 1};
                for (int c : cand) {
                    if (plane[c] > plane[best]) best = c;
                }
                o[j] = plane[best];
                arg[j] = static_cast<std::uint32_t>(static_cast<std::ptrdiff_t>(bc) * H * W + best);
            }
        }
    }
    return make_result(std::move(out), {&x}, [arg = std::move(arg)](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
    });
}

/// Nearest-neighbour 2x upsampling.
inline Tensor upsample_nearest2x(const Tensor& x) {
    detail::require_rank(x, 4, "upsample_nearest2x");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int oh = 2 * H, ow = 2 * W;
    Tensor out(Shape{B, C, oh, ow});
    const float* xp = x.data().data();
    float* o = out.mutable_data().data();
    for (int bc = 0; bc < B * C; ++bc) {
        const float* src = xp + static_cast<std::ptrdiff_t>(bc) * H * W;
        float* dst = o + static_cast<std::ptrdiff_t>(bc) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * W + xx / 2];
        }
    }
    return make_result(std::move(out), {&x}, [B, C, H, W](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        const int ow = 2 * W;
        for (int bc = 0; bc < B * C; ++bc) {
            const float* src = g.data() + static_cast<std::ptrdiff_t>(bc) * 4 * H * W;
            float* dst = gx.data() + static_cast<std::ptrdiff_t>(bc) * H * W;
            for (int y = 0; y < 2 * H; ++y) {
                for (int xx = 0; xx < ow; ++xx) dst[(y / 2) * W + xx / 2] += src[y * ow + xx];
            }
        }
    });
}

/// Concatenation along dim 1 of two [B,*,H,W] tensors.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 4, "concat_channels");
    detail::require_rank(b, 4, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const int B = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Tensor out(Shape{B, ca + cb, a.dim(2), a.dim(3)});
    float* o = out.mutable_data().data();
    for (int n = 0; n < B; ++n) {
        std::copy_n(a.data().data() + static_cast<std::ptrdiff_t>(n) * ca * hw, ca * hw,
                    o + static_cast<std::ptrdiff_t>(n) * (ca + cb) * hw);
        std::copy_n(b.data().data() + static_cast<std::ptrdiff_t>(n) * cb * hw, cb * hw,
                    o + (static_cast<std::ptrdiff_t>(n) * (ca + cb) + ca) * hw);
    }
    return make_result(std::move(out), {&a, &b}, [B, ca, cb, hw](const std::vector<float>& g, detail::GradRefs& gin) {
        for (int n = 0; n < B; ++n) {
            const float* src = g.data() + static_cast<std::ptrdiff_t>(n) * (ca + cb) * hw;
            if (gin[0]) {
                float* d = gin[0]->data() + static_cast<std::ptrdiff_t>(n) * ca * hw;
                for (int i = 0; i < ca * hw; ++i) d[i] += src[i];
            }
            if (gin[1]) {
                float* d = gin[1]->data() + static_cast<std::ptrdiff_t>(n) * cb * hw;
                for (int i = 0; i < cb * hw; ++i) d[i] += src[ca * hw + i];
            }
        }
    });
}

/// Softmax over dim 1 of [B,C,H,W], stabilized by max subtraction.
inline Tensor softmax_channel(const Tensor& x) {
    detail::require_rank(x, 4, "softmax_channel");
    const int B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (C < 2) throw ShapeError("softmax_channel: need at least 2 channels");
    Tensor out(x.shape());
    const float* xp = x.data().data();
    float* o = out.mutable_data().data();
    for (int b = 0; b < B; ++b) {
        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(b) * C * hw;
        for (int i = 0; i < hw; ++i) {
            float mx = -std::numeric_limits<float>::infinity();
            for (int c = 0; c < C; ++c) mx = std::max(mx, xp[base + static_cast<std::ptrdiff_t>(c) * hw + i]);
            double s = 0.0;
            for (int c = 0; c < C; ++c) {
                const std::ptrdiff_t j = base + static_cast<std::ptrdiff_t>(c) * hw + i;
                const double e = std::exp(static_cast<double>(xp[j]) - mx);
                o[j] = static_cast<float>(e);
                s += e;
            }
            for (int c = 0; c < C; ++c) {
                const std::ptrdiff_t j = base + static_cast<std::ptrdiff_t>(c) * hw + i;
                o[j] = static_cast<float>(o[j] / s);
            }
        }
    }
    return make_result(out.clone(), {&x}, [y = out, B, C, hw](const std::vector<float>& g, detail::GradRefs& gin) {
        const float* yp = y.data().data();
        auto& gx = *gin[0];
        for (int b = 0; b < B; ++b) {
            const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(b) * C * hw;
            for (int i = 0; i < hw; ++i) {
                double dot = 0.0;
                for (int c = 0; c < C; ++c) {
                    const std::ptrdiff_t j = base + static_cast<std::ptrdiff_t>(c) * hw + i;
                    dot += static_cast<double>(g[static_cast<std::size_t>(j)]) * yp[j];
                }
                for (int c = 0; c < C; ++c) {
                    const std::ptrdiff_t j = base + static_cast<std::ptrdiff_t>(c) * hw + i;
                    gx[static_cast<std::size_t>(j)] += static_cast<float>(yp[j] * (g[static_cast<std::size_t>(j)] - dot));
                }
            }
        }
    });
}

/// Inverted dropout: each element is zeroed with probability `rate`, survivors
/// are scaled by 1/(1-rate). Eval mode and rate 0 return the input unchanged.
inline Tensor dropout(const Tensor& x, float rate, SeededRng& rng, Mode mode) {
    if (!(rate >= 0.0f && rate < 1.0f)) throw std::invalid_argument("dropout: rate must lie in [0,1)");
    if (mode == Mode::eval || rate == 0.0f) return x;
    const float keep_scale = 1.0f / (1.0f - rate);
    std::vector<float> mask(x.numel());
    for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0f : keep_scale;
    Tensor out(x.shape());
    const float* xp = x.data().data();
    float* o = out.mutable_data().data();
    for (std::size_t i = 0; i < mask.size(); ++i) o[i] = xp[i] * mask[i];
    return make_result(std::move(out), {&x}, [mask = std::move(mask)](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] + b[i];
    return make_result(std::move(out), {&a, &b}, [](const std::vector<float>& g, detail::GradRefs& gin) {
        detail::accumulate(gin[0], g);
        detail::accumulate(gin[1], g);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] - b[i];
    return make_result(std::move(out), {&a, &b}, [](const std::vector<float>& g, detail::GradRefs& gin) {
        detail::accumulate(gin[0], g);
        if (gin[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] * b[i];
    return make_result(std::move(out), {&a, &b},
                       [a = a.detach(), b = b.detach()](const std::vector<float>& g, detail::GradRefs& gin) {
                           if (gin[0]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * b[i];
                           }
                           if (gin[1]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * a[i];
                           }
                       });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] / b[i];
    return make_result(std::move(out), {&a, &b},
                       [a = a.detach(), b = b.detach()](const std::vector<float>& g, detail::GradRefs& gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               const double inv = 1.0 / b[i];
                               if (gin[0]) (*gin[0])[i] += static_cast<float>(g[i] * inv);
                               if (gin[1]) (*gin[1])[i] -= static_cast<float>(g[i] * a[i] * inv * inv);
                           }
                       });
}

inline Tensor add_scalar(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] + s;
    return make_result(std::move(out), {&a},
                       [](const std::vector<float>& g, detail::GradRefs& gin) { detail::accumulate(gin[0], g); });
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] * s;
    return make_result(std::move(out), {&a}, [s](const std::vector<float>& g, detail::GradRefs& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * s;
    });
}

/// log(max(x, floor)); the derivative is zero where the floor is active.
inline Tensor log_clamped(const Tensor& x, float floor) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out.mutable_data()[i] = std::log(std::max(x[i], floor));
    return make_result(std::move(out), {&x}, [x = x.detach(), floor](const std::vector<float>& g, detail::GradRefs& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > floor) (*gin[0])[i] += g[i] / x[i];
        }
    });
}

inline Tensor log(const Tensor& x) { return log_clamped(x, 0.0f); }

/// Sum of all elements, shape [1].
inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    return make_result(Tensor::scalar(static_cast<float>(s)), {&x}, [](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (auto& v : gx) v += g[0];
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

/// Sum over the two trailing spatial dims: [B,C,H,W] -> [B,C].
inline Tensor sum_hw(const Tensor& x) {
    detail::require_rank(x, 4, "sum_hw");
    const int B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(Shape{B, C});
    for (int bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        const float* p = x.data().data() + static_cast<std::ptrdiff_t>(bc) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
        out.mutable_data()[static_cast<std::size_t>(bc)] = static_cast<float>(s);
    }
    return make_result(std::move(out), {&x}, [B, C, hw](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (int bc = 0; bc < B * C; ++bc) {
            float* d = gx.data() + static_cast<std::ptrdiff_t>(bc) * hw;
            for (int i = 0; i < hw; ++i) d[i] += g[static_cast<std::size_t>(bc)];
        }
    });
}

/// Elementwise mean of equally shaped tensors.
inline Tensor average(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("average: empty list");
    std::vector<const Tensor*> ins;
    for (const auto& t : xs) {
        detail::require_same_shape(xs.front(), t, "average");
        ins.push_back(&t);
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    Tensor out(xs.front().shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double s = 0.0;
        for (const auto& t : xs) s += t[i];
        out.mutable_data()[i] = static_cast<float>(s * inv);
    }
    const float w = static_cast<float>(inv);
    return make_result_v(std::move(out), ins, [w](const std::vector<float>& g, detail::GradRefs& gin) {
        for (auto* d : gin) {
            if (!d) continue;
            for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * w;
        }
    });
}

/// out[..., i] = x[..., index[i]] over the flattened trailing H*W plane.
/// The output plane is out_h x out_w; `index` has out_h*out_w entries into
/// the input plane. Used for exact pixel permutations.
inline Tensor gather_hw(const Tensor& x, const std::vector<std::uint32_t>& index, int out_h, int out_w) {
    if (x.rank() < 2) throw ShapeError("gather_hw: rank must be at least 2");
    const std::size_t in_plane = static_cast<std::size_t>(x.dim(-2)) * x.dim(-1);
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    if (index.size() != out_plane) throw ShapeError("gather_hw: index size mismatch");
    Shape s = x.shape();
    s[s.size() - 2] = out_h;
    s[s.size() - 1] = out_w;
    Tensor out(s);
    const std::size_t planes = x.numel() / in_plane;
    for (std::size_t p = 0; p < planes; ++p) {
        const float* src = x.data().data() + p * in_plane;
        float* dst = out.mutable_data().data() + p * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) dst[i] = src[index[i]];
    }
    return make_result(std::move(out), {&x}, [index, planes, in_plane, out_plane](const std::vector<float>& g,
                                                                                detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (std::size_t p = 0; p < planes; ++p) {
            for (std::size_t i = 0; i < out_plane; ++i) gx[p * in_plane + index[i]] += g[p * out_plane + i];
        }
    });
}

/// Rows [begin, end) of dim 0.
inline Tensor slice_batch(const Tensor& x, int begin, int end) {
    if (x.rank() < 1 || begin < 0 || end > x.dim(0) || begin >= end) {
        throw ShapeError("slice_batch: bad range for " + shape_str(x.shape()));
    }
    const std::size_t row = x.numel() / static_cast<std::size_t>(x.dim(0));
    Shape s = x.shape();
    s[0] = end - begin;
    std::vector<float> v(x.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                         x.data().begin() + static_cast<std::ptrdiff_t>(end * row));
    return make_result(Tensor(s, std::move(v)), {&x}, [row, begin](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * row + i] += g[i];
    });
}

/// Channel slice [begin, end) of [B,C,...].
inline Tensor slice_channels(const Tensor& x, int begin, int end) {
    if (x.rank() < 2 || begin < 0 || end > x.dim(1) || begin >= end) {
        throw ShapeError("slice_channels: bad range for " + shape_str(x.shape()));
    }
    const int B = x.dim(0), C = x.dim(1);
    const std::size_t plane = x.numel() / (static_cast<std::size_t>(B) * C);
    Shape s = x.shape();
    s[1] = end - begin;
    Tensor out(s);
    const int nc = end - begin;
    for (int b = 0; b < B; ++b) {
        std::copy_n(x.data().data() + (static_cast<std::size_t>(b) * C + begin) * plane, nc * plane,
                    out.mutable_data().data() + static_cast<std::size_t>(b) * nc * plane);
    }
    return make_result(std::move(out), {&x}, [B, C, nc, begin, plane](const std::vector<float>& g, detail::GradRefs& gin) {
        auto& gx = *gin[0];
        for (int b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < nc * plane; ++i) {
                gx[(static_cast<std::size_t>(b) * C + begin) * plane + i] += g[static_cast<std::size_t>(b) * nc * plane + i];
            }
        }
    });
}

}  // namespace upl
