#include "candle/wavelet.hpp"

#include "candle/ops.hpp"

namespace candle::wavelet {

namespace {

// [N,C,2h,2w] -> [N,4C,h,w] with band blocks ordered LL, LH, HL, HH.
Tensor haar_analysis(const Tensor& x) {
    const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto h = H / 2, w = W / 2, hw = h * w;
    std::vector<float> out(x.numel());
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const float* src = x.ptr() + (n * C + c) * H * W;
            float* ll = out.data() + ((n * 4 + 0) * C + c) * hw;
            float* lh = out.data() + ((n * 4 + 1) * C + c) * hw;
            float* hl = out.data() + ((n * 4 + 2) * C + c) * hw;
            float* hh = out.data() + ((n * 4 + 3) * C + c) * hw;
            for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < w; ++j) {
                    const float a = src[(2 * i) * W + 2 * j], b = src[(2 * i) * W + 2 * j + 1];
                    const float cc = src[(2 * i + 1) * W + 2 * j], d = src[(2 * i + 1) * W + 2 * j + 1];
                    const auto k = i * w + j;
                    ll[k] = 0.5f * (a + b + cc + d);
                    lh[k] = 0.5f * (a + b - cc - d);
                    hl[k] = 0.5f * (a - b + cc - d);
                    hh[k] = 0.5f * (a - b - cc + d);
                }
        }
    return Tensor({N, 4 * C, h, w}, std::move(out));
}

// Inverse of haar_analysis. The transform is orthonormal, so each map is the
// other's adjoint and serves as its backward pass.
Tensor haar_synthesis(const Tensor& bands) {
    const auto N = bands.dim(0), C = bands.dim(1) / 4, h = bands.dim(2), w = bands.dim(3);
    const auto H = 2 * h, W = 2 * w, hw = h * w;
    std::vector<float> out(bands.numel());
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const float* ll = bands.ptr() + ((n * 4 + 0) * C + c) * hw;
            const float* lh = bands.ptr() + ((n * 4 + 1) * C + c) * hw;
            const float* hl = bands.ptr() + ((n * 4 + 2) * C + c) * hw;
            const float* hh = bands.ptr() + ((n * 4 + 3) * C + c) * hw;
            float* dst = out.data() + (n * C + c) * H * W;
            for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < w; ++j) {
                    const auto k = i * w + j;
                    dst[(2 * i) * W + 2 * j] = 0.5f * (ll[k] + lh[k] + hl[k] + hh[k]);
                    dst[(2 * i) * W + 2 * j + 1] = 0.5f * (ll[k] + lh[k] - hl[k] - hh[k]);
                    dst[(2 * i + 1) * W + 2 * j] = 0.5f * (ll[k] - lh[k] + hl[k] - hh[k]);
                    dst[(2 * i + 1) * W + 2 * j + 1] = 0.5f * (ll[k] - lh[k] - hl[k] + hh[k]);
                }
        }
    return Tensor({N, C, H, W}, std::move(out));
}

Tensor analysis_op(const Tensor& x) {
    Tensor y = haar_analysis(x);
    if (detail::needs_grad({&x})) {
        detail::record(y, {x}, [X = x.storage(), Y = y.storage()] {
            if (!X->requires_grad) return;
            X->ensure_grad();
            const Tensor g = haar_synthesis(Tensor(Y->shape, Y->grad));
            for (std::size_t i = 0; i < X->grad.size(); ++i) X->grad[i] += g.ptr()[i];
        });
    }
    return y;
}

Tensor synthesis_op(const Tensor& bands) {
    Tensor y = haar_synthesis(bands);
    if (detail::needs_grad({&bands})) {
        detail::record(y, {bands}, [B = bands.storage(), Y = y.storage()] {
            if (!B->requires_grad) return;
            B->ensure_grad();
            const Tensor g = haar_analysis(Tensor(Y->shape, Y->grad));
            for (std::size_t i = 0; i < B->grad.size(); ++i) B->grad[i] += g.ptr()[i];
        });
    }
    return y;
}

}  // namespace

Subbands dwt2_haar(const Tensor& x) {
    if (x.rank() != 4) fail(ErrorKind::Shape, "dwt2_haar: expected [N,C,H,W], got " + shape_str(x.shape()));
    const auto H = x.dim(2), W = x.dim(3);
    if (H < 1 || W < 1) fail(ErrorKind::Shape, "dwt2_haar: empty spatial extent");
    Tensor padded = x;
    if (H % 2 != 0 || W % 2 != 0) {
        padded = pad2d(x, 0, static_cast<int>(H % 2), 0, static_cast<int>(W % 2), PadMode::Reflect);
    }
    const Tensor bands = analysis_op(padded);
    const auto C = x.dim(1);
    return Subbands{slice_channels(bands, 0, C), slice_channels(bands, C, C), slice_channels(bands, 2 * C, C),
                    slice_channels(bands, 3 * C, C), H, W};
}

Tensor idwt2_haar(const Subbands& s) {
    const Shape& shape = s.ll.shape();
    if (s.ll.rank() != 4) fail(ErrorKind::Shape, "idwt2_haar: bands must be [N,C,h,w]");
    for (const Tensor* b : {&s.lh, &s.hl, &s.hh}) {
        if (b->shape() != shape) {
            fail(ErrorKind::Shape, "idwt2_haar: subband shape mismatch " + shape_str(shape) + " vs " +
                                       shape_str(b->shape()));
        }
    }
    const auto full_h = 2 * shape[2], full_w = 2 * shape[3];
    const auto H = s.height > 0 ? s.height : full_h;
    const auto W = s.width > 0 ? s.width : full_w;
    if (H > full_h || W > full_w || H < full_h - 1 || W < full_w - 1) {
        fail(ErrorKind::Shape, "idwt2_haar: target extent incompatible with band shape " + shape_str(shape));
    }
    // Interleave bands per sample: concat along channels gives [N,4C,h,w]
    // with the same block order as the analysis op.
    Tensor y = synthesis_op(concat_channels({s.ll, s.lh, s.hl, s.hh}));
    if (H != full_h || W != full_w) y = crop2d(y, 0, 0, H, W);
    return y;
}

}  // namespace candle::wavelet
