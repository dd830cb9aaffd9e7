#include "candle/ops.hpp"

// Eigen evaluates small products coefficient by coefficient, and those dot
// products peel elements up to the next packet boundary, so their rounding
// depends on where the heap placed the buffers. The packed GEMM kernel does
// not, which keeps repeated runs bit-identical.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace candle {

namespace {
thread_local KinkProbe* g_probe = nullptr;

void observe_kinks(const Tensor& x, float a, float b) {
    if (g_probe == nullptr) return;
    for (float v : x.data()) g_probe->observe(std::min(std::fabs(double(v) - a), std::fabs(double(v) - b)));
}
}  // namespace

KinkProbe::KinkProbe() : previous_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = previous_; }


namespace {

using StoragePtr = std::shared_ptr<detail::Storage>;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
    }
}

void require_rank(const Tensor& x, int rank, const char* op) {
    if (x.rank() != rank) {
        fail(ErrorKind::Shape, std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                   shape_str(x.shape()));
    }
}

void require_single(const Tensor& s, const char* op) {
    if (s.numel() != 1) {
        fail(ErrorKind::Shape, std::string(op) + ": expected a single-element tensor, got " + shape_str(s.shape()));
    }
}

// Adds `src` into the gradient of `dst` (allocating it) when dst is tracked.
template <typename Fn>
void accumulate(const StoragePtr& dst, Fn&& fill) {
    if (!dst->requires_grad) return;
    dst->ensure_grad();
    fill(dst->grad);
}

template <typename Fn>
Tensor unary(const Tensor& x, Fn&& f) {
    std::vector<float> out(x.numel());
    const float* px = x.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
    return Tensor(x.shape(), std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] + b.ptr()[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::needs_grad({&a, &b})) {
        detail::record(y, {a, b}, [A = a.storage(), B = b.storage(), Y = y.storage()] {
            accumulate(A, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i]; });
            accumulate(B, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i]; });
        });
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] - b.ptr()[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::needs_grad({&a, &b})) {
        detail::record(y, {a, b}, [A = a.storage(), B = b.storage(), Y = y.storage()] {
            accumulate(A, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i]; });
            accumulate(B, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] -= Y->grad[i]; });
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] * b.ptr()[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::needs_grad({&a, &b})) {
        detail::record(y, {a, b}, [A = a.storage(), B = b.storage(), Y = y.storage()] {
            accumulate(A, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i] * B->data[i];
            });
            accumulate(B, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i] * A->data[i];
            });
        });
    }
    return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] / b.ptr()[i];
    Tensor y(a.shape(), std::move(out));
    if (detail::needs_grad({&a, &b})) {
        detail::record(y, {a, b}, [A = a.storage(), B = b.storage(), Y = y.storage()] {
            accumulate(A, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i] / B->data[i];
            });
            accumulate(B, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= Y->grad[i] * Y->data[i] / B->data[i];
            });
        });
    }
    return y;
}

Tensor scale(const Tensor& x, float factor) {
    Tensor y = unary(x, [factor](float v) { return v * factor; });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), factor] {
            accumulate(X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * Y->grad[i]; });
        });
    }
    return y;
}

Tensor add_scalar(const Tensor& x, float value) {
    Tensor y = unary(x, [value](float v) { return v + value; });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i]; });
        });
    }
    return y;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    require_single(s, "mul_scalar");
    const float sv = s.ptr()[0];
    Tensor y = unary(x, [sv](float v) { return v * sv; });
    if (detail::needs_grad({&x, &s})) {
        detail::record(y, {x, s}, [X = x.storage(), S = s.storage(), Y = y.storage()] {
            const float sv = S->data[0];
            accumulate(X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * Y->grad[i]; });
            accumulate(S, [&](auto& g) {
                double acc = 0.0;
                for (std::size_t i = 0; i < X->data.size(); ++i) acc += double(Y->grad[i]) * X->data[i];
                g[0] += static_cast<float>(acc);
            });
        });
    }
    return y;
}

Tensor affine(const Tensor& x, const Tensor& a, const Tensor& b) {
    require_single(a, "affine");
    require_single(b, "affine");
    const float av = a.ptr()[0];
    const float bv = b.ptr()[0];
    Tensor y = unary(x, [av, bv](float v) { return av * v + bv; });
    if (detail::needs_grad({&x, &a, &b})) {
        detail::record(y, {x, a, b}, [X = x.storage(), A = a.storage(), B = b.storage(), Y = y.storage()] {
            const float av = A->data[0];
            accumulate(X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += av * Y->grad[i]; });
            accumulate(A, [&](auto& g) {
                double acc = 0.0;
                for (std::size_t i = 0; i < X->data.size(); ++i) acc += double(Y->grad[i]) * X->data[i];
                g[0] += static_cast<float>(acc);
            });
            accumulate(B, [&](auto& g) {
                double acc = 0.0;
                for (float v : Y->grad) acc += v;
                g[0] += static_cast<float>(acc);
            });
        });
    }
    return y;
}

Tensor relu(const Tensor& x) {
    observe_kinks(x, 0.0f, 0.0f);
    Tensor y = unary(x, [](float v) { return v > 0.0f ? v : 0.0f; });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (X->data[i] > 0.0f) g[i] += Y->grad[i];
                }
            });
        });
    }
    return y;
}

Tensor leaky_relu(const Tensor& x, float slope) {
    observe_kinks(x, 0.0f, 0.0f);
    Tensor y = unary(x, [slope](float v) { return v > 0.0f ? v : slope * v; });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), slope] {
            accumulate(X, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += X->data[i] > 0.0f ? Y->grad[i] : slope * Y->grad[i];
            });
        });
    }
    return y;
}

Tensor sigmoid(const Tensor& x) {
    Tensor y = unary(x, [](float v) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
    });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const float s = Y->data[i];
                    g[i] += Y->grad[i] * s * (1.0f - s);
                }
            });
        });
    }
    return y;
}

Tensor sqrt(const Tensor& x) {
    Tensor y = unary(x, [](float v) {
        if (v < 0.0f) fail(ErrorKind::NonFinite, "sqrt of negative value");
        return std::sqrt(v);
    });
    if (g_probe != nullptr)
        for (float v : y.data()) g_probe->observe_root(v);
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (Y->data[i] > 0.0f) g[i] += Y->grad[i] * 0.5f / Y->data[i];
                }
            });
        });
    }
    return y;
}

Tensor abs(const Tensor& x) {
    observe_kinks(x, 0.0f, 0.0f);
    Tensor y = unary(x, [](float v) { return std::fabs(v); });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const float v = X->data[i];
                    if (v > 0.0f) g[i] += Y->grad[i];
                    else if (v < 0.0f) g[i] -= Y->grad[i];
                }
            });
        });
    }
    return y;
}

Tensor clip(const Tensor& x, float lo, float hi) {
    if (!(lo <= hi)) fail(ErrorKind::Value, "clip: lo must not exceed hi");
    observe_kinks(x, lo, hi);
    Tensor y = unary(x, [lo, hi](float v) { return std::min(std::max(v, lo), hi); });
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), lo, hi] {
            accumulate(X, [&](auto& g) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const float v = X->data[i];
                    if (v > lo && v < hi) g[i] += Y->grad[i];
                }
            });
        });
    }
    return y;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor y = Tensor::scalar(static_cast<float>(acc));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) {
                const float d = Y->grad[0];
                for (auto& v : g) v += d;
            });
        });
    }
    return y;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) fail(ErrorKind::Shape, "mean of empty tensor");
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const float inv = 1.0f / static_cast<float>(x.numel());
    Tensor y = Tensor::scalar(static_cast<float>(acc / static_cast<double>(x.numel())));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), inv] {
            accumulate(X, [&](auto& g) {
                const float d = Y->grad[0] * inv;
                for (auto& v : g) v += d;
            });
        });
    }
    return y;
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (HW == 0) fail(ErrorKind::Shape, "global_avg_pool: empty spatial extent");
    std::vector<float> out(static_cast<std::size_t>(N * C));
    for (std::int64_t i = 0; i < N * C; ++i) {
        double acc = 0.0;
        const float* p = x.ptr() + i * HW;
        for (std::int64_t k = 0; k < HW; ++k) acc += p[k];
        out[static_cast<std::size_t>(i)] = static_cast<float>(acc / static_cast<double>(HW));
    }
    Tensor y({N, C}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), NC = N * C, HW] {
            accumulate(X, [&](auto& g) {
                const float inv = 1.0f / static_cast<float>(HW);
                for (std::int64_t i = 0; i < NC; ++i) {
                    const float d = Y->grad[static_cast<std::size_t>(i)] * inv;
                    for (std::int64_t k = 0; k < HW; ++k) g[static_cast<std::size_t>(i * HW + k)] += d;
                }
            });
        });
    }
    return y;
}

Tensor channel_mean(const Tensor& x) {
    require_rank(x, 4, "channel_mean");
    const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<float> out(static_cast<std::size_t>(N * HW), 0.0f);
    const float inv = 1.0f / static_cast<float>(C);
    for (std::int64_t n = 0; n < N; ++n) {
        float* o = out.data() + n * HW;
        for (std::int64_t c = 0; c < C; ++c) {
            const float* p = x.ptr() + (n * C + c) * HW;
            for (std::int64_t k = 0; k < HW; ++k) o[k] += p[k];
        }
        for (std::int64_t k = 0; k < HW; ++k) o[k] *= inv;
    }
    Tensor y({N, 1, x.dim(2), x.dim(3)}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), N, C, HW, inv] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t k = 0; k < HW; ++k)
                            g[static_cast<std::size_t>((n * C + c) * HW + k)] +=
                                Y->grad[static_cast<std::size_t>(n * HW + k)] * inv;
            });
        });
    }
    return y;
}

Tensor expand_channels(const Tensor& x, std::int64_t channels) {
    require_rank(x, 4, "expand_channels");
    if (x.dim(1) != 1) fail(ErrorKind::Shape, "expand_channels: dimension 1 must be 1, got " + shape_str(x.shape()));
    const auto N = x.dim(0), HW = x.dim(2) * x.dim(3);
    std::vector<float> out(static_cast<std::size_t>(N * channels * HW));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < channels; ++c)
            std::copy_n(x.ptr() + n * HW, HW, out.data() + (n * channels + c) * HW);
    Tensor y({N, channels, x.dim(2), x.dim(3)}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), N, channels, HW] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < channels; ++c)
                        for (std::int64_t k = 0; k < HW; ++k)
                            g[static_cast<std::size_t>(n * HW + k)] +=
                                Y->grad[static_cast<std::size_t>((n * channels + c) * HW + k)];
            });
        });
    }
    return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
        fail(ErrorKind::Shape, "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor y(shape, std::vector<float>(x.data().begin(), x.data().end()));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            accumulate(X, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += Y->grad[i]; });
        });
    }
    return y;
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) fail(ErrorKind::Shape, "concat_channels: no inputs");
    for (const auto& t : xs) require_rank(t, 4, "concat_channels");
    const auto N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    std::int64_t C = 0;
    for (const auto& t : xs) {
        if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W) {
            fail(ErrorKind::Shape, "concat_channels: incompatible shapes " + shape_str(xs[0].shape()) + " and " +
                                       shape_str(t.shape()));
        }
        C += t.dim(1);
    }
    const auto HW = H * W;
    std::vector<float> out(static_cast<std::size_t>(N * C * HW));
    for (std::int64_t n = 0; n < N; ++n) {
        std::int64_t c0 = 0;
        for (const auto& t : xs) {
            const auto Ct = t.dim(1);
            std::copy_n(t.ptr() + n * Ct * HW, Ct * HW, out.data() + (n * C + c0) * HW);
            c0 += Ct;
        }
    }
    Tensor y({N, C, H, W}, std::move(out));
    if (detail::needs_grad(xs)) {
        std::vector<StoragePtr> ins;
        for (const auto& t : xs) ins.push_back(t.storage());
        detail::record(y, xs, [ins, Y = y.storage(), N, C, HW] {
            std::int64_t c0 = 0;
            for (const auto& in : ins) {
                const auto Ct = in->shape[1];
                accumulate(in, [&](auto& g) {
                    for (std::int64_t n = 0; n < N; ++n) {
                        const float* src = Y->grad.data() + (n * C + c0) * HW;
                        float* dst = g.data() + n * Ct * HW;
                        for (std::int64_t k = 0; k < Ct * HW; ++k) dst[k] += src[k];
                    }
                });
                c0 += Ct;
            }
        });
    }
    return y;
}

Tensor slice_channels(const Tensor& x, std::int64_t c0, std::int64_t count) {
    require_rank(x, 4, "slice_channels");
    const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (c0 < 0 || count < 1 || c0 + count > C) fail(ErrorKind::Shape, "slice_channels: range out of bounds");
    std::vector<float> out(static_cast<std::size_t>(N * count * HW));
    for (std::int64_t n = 0; n < N; ++n)
        std::copy_n(x.ptr() + (n * C + c0) * HW, count * HW, out.data() + n * count * HW);
    Tensor y({N, count, x.dim(2), x.dim(3)}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), N, C, HW, c0, count] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t n = 0; n < N; ++n) {
                    const float* src = Y->grad.data() + n * count * HW;
                    float* dst = g.data() + (n * C + c0) * HW;
                    for (std::int64_t k = 0; k < count * HW; ++k) dst[k] += src[k];
                }
            });
        });
    }
    return y;
}

namespace {
// Source index along one axis for a padded output position; -1 means zero.
std::vector<std::int64_t> pad_index(std::int64_t n, int before, int after, PadMode mode) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n + before + after));
    for (std::int64_t o = 0; o < static_cast<std::int64_t>(idx.size()); ++o) {
        std::int64_t i = o - before;
        if (i >= 0 && i < n) {
            idx[static_cast<std::size_t>(o)] = i;
        } else if (mode == PadMode::Zero) {
            idx[static_cast<std::size_t>(o)] = -1;
        } else if (mode == PadMode::Replicate) {
            idx[static_cast<std::size_t>(o)] = std::clamp<std::int64_t>(i, 0, n - 1);
        } else {
            if (n == 1) {
                i = 0;
            } else {
                while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
            }
            idx[static_cast<std::size_t>(o)] = i;
        }
    }
    return idx;
}
}  // namespace

Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right, PadMode mode) {
    require_rank(x, 4, "pad2d");
    if (top < 0 || bottom < 0 || left < 0 || right < 0) fail(ErrorKind::Value, "pad2d: negative padding");
    const auto NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    auto rows = pad_index(H, top, bottom, mode);
    auto cols = pad_index(W, left, right, mode);
    const auto Ho = static_cast<std::int64_t>(rows.size()), Wo = static_cast<std::int64_t>(cols.size());
    std::vector<float> out(static_cast<std::size_t>(NC * Ho * Wo), 0.0f);
    for (std::int64_t p = 0; p < NC; ++p)
        for (std::int64_t r = 0; r < Ho; ++r) {
            const auto sr = rows[static_cast<std::size_t>(r)];
            if (sr < 0) continue;
            for (std::int64_t c = 0; c < Wo; ++c) {
                const auto sc = cols[static_cast<std::size_t>(c)];
                if (sc < 0) continue;
                out[static_cast<std::size_t>((p * Ho + r) * Wo + c)] = x.ptr()[(p * H + sr) * W + sc];
            }
        }
    Tensor y({x.dim(0), x.dim(1), Ho, Wo}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), rows, cols, NC, H, W, Ho, Wo] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t p = 0; p < NC; ++p)
                    for (std::int64_t r = 0; r < Ho; ++r) {
                        const auto sr = rows[static_cast<std::size_t>(r)];
                        if (sr < 0) continue;
                        for (std::int64_t c = 0; c < Wo; ++c) {
                            const auto sc = cols[static_cast<std::size_t>(c)];
                            if (sc < 0) continue;
                            g[static_cast<std::size_t>((p * H + sr) * W + sc)] +=
                                Y->grad[static_cast<std::size_t>((p * Ho + r) * Wo + c)];
                        }
                    }
            });
        });
    }
    return y;
}

Tensor crop2d(const Tensor& x, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
    require_rank(x, 4, "crop2d");
    const auto NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > H || x0 + w > W) {
        fail(ErrorKind::Shape, "crop2d: window exceeds input extent " + shape_str(x.shape()));
    }
    std::vector<float> out(static_cast<std::size_t>(NC * h * w));
    for (std::int64_t p = 0; p < NC; ++p)
        for (std::int64_t r = 0; r < h; ++r)
            std::copy_n(x.ptr() + (p * H + y0 + r) * W + x0, w, out.data() + (p * h + r) * w);
    Tensor y({x.dim(0), x.dim(1), h, w}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), NC, H, W, y0, x0, h, w] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t p = 0; p < NC; ++p)
                    for (std::int64_t r = 0; r < h; ++r)
                        for (std::int64_t c = 0; c < w; ++c)
                            g[static_cast<std::size_t>((p * H + y0 + r) * W + x0 + c)] +=
                                Y->grad[static_cast<std::size_t>((p * h + r) * w + c)];
            });
        });
    }
    return y;
}

Tensor to_tokens(const Tensor& x) {
    require_rank(x, 4, "to_tokens");
    const auto N = x.dim(0), C = x.dim(1), T = x.dim(2) * x.dim(3);
    std::vector<float> out(x.numel());
    for (std::int64_t n = 0; n < N; ++n) {
        ConstMapMat src(x.ptr() + n * C * T, C, T);
        MapMat dst(out.data() + n * C * T, T, C);
        dst = src.transpose();
    }
    Tensor y({N, T, C}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), N, C, T] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t n = 0; n < N; ++n) {
                    ConstMapMat gy(Y->grad.data() + n * C * T, T, C);
                    MapMat gx(g.data() + n * C * T, C, T);
                    gx += gy.transpose();
                }
            });
        });
    }
    return y;
}

Tensor from_tokens(const Tensor& tokens, std::int64_t h, std::int64_t w) {
    require_rank(tokens, 3, "from_tokens");
    const auto N = tokens.dim(0), T = tokens.dim(1), C = tokens.dim(2);
    if (T != h * w) fail(ErrorKind::Shape, "from_tokens: token count does not match h*w");
    std::vector<float> out(tokens.numel());
    for (std::int64_t n = 0; n < N; ++n) {
        ConstMapMat src(tokens.ptr() + n * C * T, T, C);
        MapMat dst(out.data() + n * C * T, C, T);
        dst = src.transpose();
    }
    Tensor y({N, C, h, w}, std::move(out));
    if (detail::needs_grad({&tokens})) {
        detail::record(y, {tokens}, [X = tokens.storage(), Y = y.storage(), N, C, T] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t n = 0; n < N; ++n) {
                    ConstMapMat gy(Y->grad.data() + n * C * T, C, T);
                    MapMat gx(g.data() + n * C * T, T, C);
                    gx += gy.transpose();
                }
            });
        });
    }
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        fail(ErrorKind::Shape, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor a3 = reshape(a, {1, a.dim(0), a.dim(1)});
    Tensor b3 = reshape(b, {1, b.dim(0), b.dim(1)});
    return reshape(bmm(a3, b3), {a.dim(0), b.dim(1)});
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const auto B = a.dim(0), M = a.dim(1), K = a.dim(2);
    const auto N = transpose_b ? b.dim(1) : b.dim(2);
    const auto Kb = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != B || Kb != K) {
        fail(ErrorKind::Shape, "bmm: incompatible operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::vector<float> out(static_cast<std::size_t>(B * M * N));
    for (std::int64_t i = 0; i < B; ++i) {
        ConstMapMat A(a.ptr() + i * M * K, M, K);
        MapMat Y(out.data() + i * M * N, M, N);
        if (transpose_b) {
            ConstMapMat Bm(b.ptr() + i * N * K, N, K);
            Y.noalias() = A * Bm.transpose();
        } else {
            ConstMapMat Bm(b.ptr() + i * K * N, K, N);
            Y.noalias() = A * Bm;
        }
    }
    Tensor y({B, M, N}, std::move(out));
    if (detail::needs_grad({&a, &b})) {
        detail::record(y, {a, b}, [SA = a.storage(), SB = b.storage(), SY = y.storage(), B, M, K, N, transpose_b] {
            for (std::int64_t i = 0; i < B; ++i) {
                ConstMapMat G(SY->grad.data() + i * M * N, M, N);
                accumulate(SA, [&](auto& g) {
                    MapMat GA(g.data() + i * M * K, M, K);
                    if (transpose_b) {
                        ConstMapMat Bm(SB->data.data() + i * N * K, N, K);
                        GA.noalias() += G * Bm;
                    } else {
                        ConstMapMat Bm(SB->data.data() + i * K * N, K, N);
                        GA.noalias() += G * Bm.transpose();
                    }
                });
                accumulate(SB, [&](auto& g) {
                    ConstMapMat A(SA->data.data() + i * M * K, M, K);
                    if (transpose_b) {
                        MapMat GB(g.data() + i * N * K, N, K);
                        GB.noalias() += G.transpose() * A;
                    } else {
                        MapMat GB(g.data() + i * K * N, K, N);
                        GB.noalias() += A.transpose() * G;
                    }
                });
            }
        });
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    require_rank(bias, 1, "linear");
    const auto N = x.dim(0), In = x.dim(1), Out = weight.dim(0);
    if (weight.dim(1) != In) {
        fail(ErrorKind::Shape, "linear: weight input dimension " + std::to_string(weight.dim(1)) +
                                   " does not match input features " + std::to_string(In));
    }
    if (bias.dim(0) != Out) fail(ErrorKind::Shape, "linear: bias length does not match output features");
    std::vector<float> out(static_cast<std::size_t>(N * Out));
    {
        ConstMapMat X(x.ptr(), N, In);
        ConstMapMat Wt(weight.ptr(), Out, In);
        MapMat Y(out.data(), N, Out);
        Y.noalias() = X * Wt.transpose();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t o = 0; o < Out; ++o) Y(n, o) += bias.ptr()[o];
    }
    Tensor y({N, Out}, std::move(out));
    if (detail::needs_grad({&x, &weight, &bias})) {
        detail::record(y, {x, weight, bias},
                       [SX = x.storage(), SW = weight.storage(), SB = bias.storage(), SY = y.storage(), N, In, Out] {
                           ConstMapMat G(SY->grad.data(), N, Out);
                           accumulate(SX, [&](auto& g) {
                               MapMat GX(g.data(), N, In);
                               GX.noalias() += G * ConstMapMat(SW->data.data(), Out, In);
                           });
                           accumulate(SW, [&](auto& g) {
                               MapMat GW(g.data(), Out, In);
                               GW.noalias() += G.transpose() * ConstMapMat(SX->data.data(), N, In);
                           });
                           accumulate(SB, [&](auto& g) {
                               for (std::int64_t n = 0; n < N; ++n)
                                   for (std::int64_t o = 0; o < Out; ++o) g[static_cast<std::size_t>(o)] += G(n, o);
                           });
                       });
    }
    return y;
}

namespace {

struct ConvGeom {
    std::int64_t cin, h, w, kh, kw, stride, pad, ho, wo;
    std::int64_t k() const { return cin * kh * kw; }
    std::int64_t p() const { return ho * wo; }
};

void im2col(const float* x, const ConvGeom& g, float* col) {
    for (std::int64_t c = 0; c < g.cin; ++c)
        for (std::int64_t ky = 0; ky < g.kh; ++ky)
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                float* row = col + ((c * g.kh + ky) * g.kw + kx) * g.p();
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    float* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.wo, 0.0f);
                        continue;
                    }
                    const float* src = x + (c * g.h + iy) * g.w;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
                    }
                }
            }
}

void col2im(const float* col, const ConvGeom& g, float* dx) {
    for (std::int64_t c = 0; c < g.cin; ++c)
        for (std::int64_t ky = 0; ky < g.kh; ++ky)
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                const float* row = col + ((c * g.kh + ky) * g.kw + kx) * g.p();
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    const float* src = row + oy * g.wo;
                    float* dst = dx + (c * g.h + iy) * g.w;
                    for (std::int64_t ox = 0; ox < g.wo; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    if (stride <= 0) fail(ErrorKind::Value, "conv2d: stride must be positive, got " + std::to_string(stride));
    if (padding < 0) fail(ErrorKind::Value, "conv2d: padding must be non-negative");
    require_rank(input, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    require_rank(bias, 1, "conv2d");
    const auto N = input.dim(0), Cout = weight.dim(0);
    ConvGeom g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), stride, padding, 0, 0};
    if (weight.dim(1) != g.cin) {
        fail(ErrorKind::Shape, "conv2d: input channels (dim 1) " + std::to_string(g.cin) +
                                   " do not match weight input channels " + std::to_string(weight.dim(1)));
    }
    if (bias.dim(0) != Cout) {
        fail(ErrorKind::Shape, "conv2d: bias length " + std::to_string(bias.dim(0)) + " does not match output channels (dim 0) " +
                                   std::to_string(Cout));
    }
    if (g.h + 2 * padding < g.kh) fail(ErrorKind::Shape, "conv2d: kernel height exceeds padded input height (dim 2)");
    if (g.w + 2 * padding < g.kw) fail(ErrorKind::Shape, "conv2d: kernel width exceeds padded input width (dim 3)");
    g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
    g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

    const auto K = g.k(), P = g.p();
    std::vector<float> out(static_cast<std::size_t>(N * Cout * P));
    std::vector<float> col(static_cast<std::size_t>(K * P));
    ConstMapMat Wm(weight.ptr(), Cout, K);
    for (std::int64_t n = 0; n < N; ++n) {
        im2col(input.ptr() + n * g.cin * g.h * g.w, g, col.data());
        MapMat Y(out.data() + n * Cout * P, Cout, P);
        Y.noalias() = Wm * ConstMapMat(col.data(), K, P);
        for (std::int64_t o = 0; o < Cout; ++o) Y.row(o).array() += bias.ptr()[o];
    }
    Tensor y({N, Cout, g.ho, g.wo}, std::move(out));
    if (detail::needs_grad({&input, &weight, &bias})) {
        detail::record(y, {input, weight, bias},
                       [SX = input.storage(), SW = weight.storage(), SB = bias.storage(), SY = y.storage(), g, N, Cout] {
                           const auto K = g.k(), P = g.p();
                           std::vector<float> col(static_cast<std::size_t>(K * P));
                           ConstMapMat Wm(SW->data.data(), Cout, K);
                           for (std::int64_t n = 0; n < N; ++n) {
                               ConstMapMat G(SY->grad.data() + n * Cout * P, Cout, P);
                               accumulate(SW, [&](auto& gw) {
                                   im2col(SX->data.data() + n * g.cin * g.h * g.w, g, col.data());
                                   MapMat GW(gw.data(), Cout, K);
                                   GW.noalias() += G * ConstMapMat(col.data(), K, P).transpose();
                               });
                               accumulate(SB, [&](auto& gb) {
                                   for (std::int64_t o = 0; o < Cout; ++o) {
                                       const float* r = G.data() + o * P;
                                       gb[static_cast<std::size_t>(o)] += std::accumulate(r, r + P, 0.0f);
                                   }
                               });
                               accumulate(SX, [&](auto& gx) {
                                   MapMat C(col.data(), K, P);
                                   C.noalias() = Wm.transpose() * G;
                                   col2im(col.data(), g, gx.data() + n * g.cin * g.h * g.w);
                               });
                           }
                       });
    }
    return y;
}

Tensor filter2d_valid(const Tensor& x, const std::vector<float>& kernel, int kh, int kw) {
    require_rank(x, 4, "filter2d_valid");
    if (static_cast<std::int64_t>(kernel.size()) != std::int64_t(kh) * kw) {
        fail(ErrorKind::Shape, "filter2d_valid: kernel size mismatch");
    }
    const auto NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H < kh || W < kw) {
        fail(ErrorKind::Shape, "filter2d_valid: input " + shape_str(x.shape()) + " smaller than " +
                                   std::to_string(kh) + "x" + std::to_string(kw) + " window");
    }
    const auto Ho = H - kh + 1, Wo = W - kw + 1;
    std::vector<float> out(static_cast<std::size_t>(NC * Ho * Wo), 0.0f);
    std::vector<double> acc(static_cast<std::size_t>(Ho * Wo));
    for (std::int64_t p = 0; p < NC; ++p) {
        const float* src = x.ptr() + p * H * W;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double k = kernel[static_cast<std::size_t>(ky * kw + kx)];
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const float* s = src + (oy + ky) * W + kx;
                    double* d = acc.data() + oy * Wo;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) d[ox] += k * s[ox];
                }
            }
        std::copy(acc.begin(), acc.end(), out.begin() + p * Ho * Wo);
    }
    Tensor y({x.dim(0), x.dim(1), Ho, Wo}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), kernel, kh, kw, NC, H, W, Ho, Wo] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t p = 0; p < NC; ++p) {
                    const float* gy = Y->grad.data() + p * Ho * Wo;
                    float* gx = g.data() + p * H * W;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const float k = kernel[static_cast<std::size_t>(ky * kw + kx)];
                            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                float* d = gx + (oy + ky) * W + kx;
                                const float* s = gy + oy * Wo;
                                for (std::int64_t ox = 0; ox < Wo; ++ox) d[ox] += k * s[ox];
                            }
                        }
                }
            });
        });
    }
    return y;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1 || x.dim(-1) < 1) fail(ErrorKind::Shape, "softmax_lastdim: last dimension must be >= 1");
    if (!x.all_finite()) fail(ErrorKind::NonFinite, "softmax_lastdim: non-finite input");
    const auto L = x.dim(-1);
    const auto rows = static_cast<std::int64_t>(x.numel()) / L;
    std::vector<float> out(x.numel());
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* px = x.ptr() + r * L;
        float* po = out.data() + r * L;
        float m = px[0];
        for (std::int64_t i = 1; i < L; ++i) m = std::max(m, px[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < L; ++i) {
            po[i] = std::exp(px[i] - m);
            z += po[i];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (std::int64_t i = 0; i < L; ++i) po[i] *= inv;
    }
    Tensor y(x.shape(), std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), rows, L] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t r = 0; r < rows; ++r) {
                    const float* py = Y->data.data() + r * L;
                    const float* gy = Y->grad.data() + r * L;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < L; ++i) dot += double(py[i]) * gy[i];
                    float* gx = g.data() + r * L;
                    for (std::int64_t i = 0; i < L; ++i) gx[i] += py[i] * (gy[i] - static_cast<float>(dot));
                }
            });
        });
    }
    return y;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, float scale) {
    require_rank(q, 3, "attention");
    require_rank(k, 3, "attention");
    require_rank(v, 3, "attention");
    const auto B = q.dim(0), M = q.dim(1), d = q.dim(2), N = k.dim(1), e = v.dim(2);
    if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != d || v.dim(1) != N || N < 1) {
        fail(ErrorKind::Shape, "attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                                   shape_str(v.shape()));
    }
    auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B * M * N));
    std::vector<float> out(static_cast<std::size_t>(B * M * e));
    for (std::int64_t b = 0; b < B; ++b) {
        ConstMapMat Q(q.ptr() + b * M * d, M, d), K(k.ptr() + b * N * d, N, d), V(v.ptr() + b * N * e, N, e);
        MapMat P(probs->data() + b * M * N, M, N);
        P.noalias() = Q * K.transpose();
        P *= scale;
        if (!P.allFinite()) fail(ErrorKind::NonFinite, "attention: non-finite scores");
        for (std::int64_t r = 0; r < M; ++r) {
            float* row = P.data() + r * N;
            const float top = *std::max_element(row, row + N);
            double z = 0.0;
            for (std::int64_t c = 0; c < N; ++c) z += row[c] = std::exp(row[c] - top);
            const auto inv = static_cast<float>(1.0 / z);
            for (std::int64_t c = 0; c < N; ++c) row[c] *= inv;
        }
        MapMat(out.data() + b * M * e, M, e).noalias() = P * V;
    }
    Tensor y({B, M, e}, std::move(out));
    if (detail::needs_grad({&q, &k, &v})) {
        detail::record(y, {q, k, v}, [SQ = q.storage(), SK = k.storage(), SV = v.storage(), SY = y.storage(), probs, B, M, d,
                                      N, e, scale] {
            RowMat dS(M, N);
            for (std::int64_t b = 0; b < B; ++b) {
                ConstMapMat P(probs->data() + b * M * N, M, N);
                ConstMapMat G(SY->grad.data() + b * M * e, M, e);
                ConstMapMat V(SV->data.data() + b * N * e, N, e);
                accumulate(SV, [&](auto& g) { MapMat(g.data() + b * N * e, N, e).noalias() += P.transpose() * G; });
                if (!SQ->requires_grad && !SK->requires_grad) continue;
                dS.noalias() = G * V.transpose();
                for (std::int64_t r = 0; r < M; ++r) {
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < N; ++c) dot += double(dS(r, c)) * P(r, c);
                    dS.row(r).array() = P.row(r).array() * (dS.row(r).array() - static_cast<float>(dot)) * scale;
                }
                accumulate(SQ, [&](auto& g) {
                    ConstMapMat K(SK->data.data() + b * N * d, N, d);
                    MapMat(g.data() + b * M * d, M, d).noalias() += dS * K;
                });
                accumulate(SK, [&](auto& g) {
                    ConstMapMat Q(SQ->data.data() + b * M * d, M, d);
                    MapMat(g.data() + b * N * d, N, d).noalias() += dS.transpose() * Q;
                });
            }
        });
    }
    return y;
}

namespace {
struct Taps {
    std::vector<std::int64_t> i0, i1;
    std::vector<float> l1;  // weight of i1
};

Taps bilinear_taps(std::int64_t in, std::int64_t out) {
    Taps t;
    t.i0.resize(static_cast<std::size_t>(out));
    t.i1.resize(static_cast<std::size_t>(out));
    t.l1.resize(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        auto i0 = static_cast<std::int64_t>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const auto i1 = std::min(i0 + 1, in - 1);
        t.i0[static_cast<std::size_t>(o)] = i0;
        t.i1[static_cast<std::size_t>(o)] = i1;
        t.l1[static_cast<std::size_t>(o)] = static_cast<float>(src - static_cast<double>(i0));
    }
    return t;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    require_rank(x, 4, "bilinear_resize");
    if (out_h < 1 || out_w < 1) fail(ErrorKind::Shape, "bilinear_resize: output extent must be >= 1");
    const auto NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H == out_h && W == out_w) return reshape(x, x.shape());
    const Taps ty = bilinear_taps(H, out_h), tx = bilinear_taps(W, out_w);
    std::vector<float> out(static_cast<std::size_t>(NC * out_h * out_w));
    for (std::int64_t p = 0; p < NC; ++p) {
        const float* src = x.ptr() + p * H * W;
        float* dst = out.data() + p * out_h * out_w;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const auto y0 = ty.i0[static_cast<std::size_t>(oy)], y1 = ty.i1[static_cast<std::size_t>(oy)];
            const float ly = ty.l1[static_cast<std::size_t>(oy)];
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
                const auto x0 = tx.i0[static_cast<std::size_t>(ox)], x1 = tx.i1[static_cast<std::size_t>(ox)];
                const float lx = tx.l1[static_cast<std::size_t>(ox)];
                const float top = (1.0f - lx) * src[y0 * W + x0] + lx * src[y0 * W + x1];
                const float bot = (1.0f - lx) * src[y1 * W + x0] + lx * src[y1 * W + x1];
                dst[oy * out_w + ox] = (1.0f - ly) * top + ly * bot;
            }
        }
    }
    Tensor y({x.dim(0), x.dim(1), out_h, out_w}, std::move(out));
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage(), ty, tx, NC, H, W, out_h, out_w] {
            accumulate(X, [&](auto& g) {
                for (std::int64_t p = 0; p < NC; ++p) {
                    float* gx = g.data() + p * H * W;
                    const float* gy = Y->grad.data() + p * out_h * out_w;
                    for (std::int64_t oy = 0; oy < out_h; ++oy) {
                        const auto y0 = ty.i0[static_cast<std::size_t>(oy)], y1 = ty.i1[static_cast<std::size_t>(oy)];
                        const float ly = ty.l1[static_cast<std::size_t>(oy)];
                        for (std::int64_t ox = 0; ox < out_w; ++ox) {
                            const auto x0 = tx.i0[static_cast<std::size_t>(ox)], x1 = tx.i1[static_cast<std::size_t>(ox)];
                            const float lx = tx.l1[static_cast<std::size_t>(ox)];
                            const float d = gy[oy * out_w + ox];
                            gx[y0 * W + x0] += (1.0f - ly) * (1.0f - lx) * d;
                            gx[y0 * W + x1] += (1.0f - ly) * lx * d;
                            gx[y1 * W + x0] += ly * (1.0f - lx) * d;
                            gx[y1 * W + x1] += ly * lx * d;
                        }
                    }
                }
            });
        });
    }
    return y;
}

Tensor mix(const std::vector<Tensor>& xs, const Tensor& alpha) {
    require_rank(alpha, 2, "mix");
    const auto L = static_cast<std::int64_t>(xs.size());
    if (L == 0 || alpha.dim(1) != L) fail(ErrorKind::Shape, "mix: alpha columns must equal the number of inputs");
    const auto N = alpha.dim(0);
    for (const auto& t : xs) {
        require_same_shape(t, xs[0], "mix");
        if (t.rank() < 1 || t.dim(0) != N) fail(ErrorKind::Shape, "mix: leading dimension must match alpha rows");
    }
    const auto per = static_cast<std::int64_t>(xs[0].numel()) / N;
    std::vector<float> out(xs[0].numel(), 0.0f);
    for (std::int64_t l = 0; l < L; ++l) {
        const float* p = xs[static_cast<std::size_t>(l)].ptr();
        for (std::int64_t n = 0; n < N; ++n) {
            const float a = alpha.ptr()[n * L + l];
            for (std::int64_t k = 0; k < per; ++k) out[static_cast<std::size_t>(n * per + k)] += a * p[n * per + k];
        }
    }
    Tensor y(xs[0].shape(), std::move(out));
    std::vector<Tensor> inputs = xs;
    inputs.push_back(alpha);
    if (detail::needs_grad(inputs)) {
        std::vector<StoragePtr> ins;
        for (const auto& t : xs) ins.push_back(t.storage());
        detail::record(y, inputs, [ins, A = alpha.storage(), Y = y.storage(), N, L, per] {
            for (std::int64_t l = 0; l < L; ++l) {
                const auto& in = ins[static_cast<std::size_t>(l)];
                accumulate(in, [&](auto& g) {
                    for (std::int64_t n = 0; n < N; ++n) {
                        const float a = A->data[static_cast<std::size_t>(n * L + l)];
                        for (std::int64_t k = 0; k < per; ++k)
                            g[static_cast<std::size_t>(n * per + k)] += a * Y->grad[static_cast<std::size_t>(n * per + k)];
                    }
                });
                accumulate(A, [&](auto& g) {
                    for (std::int64_t n = 0; n < N; ++n) {
                        double dot = 0.0;
                        for (std::int64_t k = 0; k < per; ++k)
                            dot += double(Y->grad[static_cast<std::size_t>(n * per + k)]) *
                                   in->data[static_cast<std::size_t>(n * per + k)];
                        g[static_cast<std::size_t>(n * L + l)] += static_cast<float>(dot);
                    }
                });
            }
        });
    }
    return y;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.ptr()[i] - b.ptr()[i]));
    return m;
}

float sum_of_squares(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += double(v) * v;
    return static_cast<float>(acc);
}

}  // namespace candle
