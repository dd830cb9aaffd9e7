#pragma once

#include <vector>

#include "candle/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the active
// tape when at least one input requires a gradient; otherwise it is a plain
// value computation.
namespace candle {

// Elementwise. Operands must have identical shapes unless noted.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
// x * s where s is a single-element tensor (learnable scalar).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
// a * x + b with single-element tensors a and b.
Tensor affine(const Tensor& x, const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
// x for x > 0, slope * x otherwise.
Tensor leaky_relu(const Tensor& x, float slope);
Tensor sigmoid(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
// Gradient passes unchanged strictly inside (lo, hi) and is zero outside.
Tensor clip(const Tensor& x, float lo, float hi);

// While alive, records on this thread the smallest distance of any relu/abs
// input to 0 and of any clip input to its bounds, and the smallest sqrt output.
class KinkProbe {
   public:
    KinkProbe();
    ~KinkProbe();
    KinkProbe(const KinkProbe&) = delete;
    KinkProbe& operator=(const KinkProbe&) = delete;
    void observe(double distance) { min_distance_ = distance < min_distance_ ? distance : min_distance_; }
    void observe_root(double r) { min_root_ = r < min_root_ ? r : min_root_; }
    double min_distance() const { return min_distance_; }
    double min_root() const { return min_root_; }

   private:
    KinkProbe* previous_;
    double min_distance_ = 1e300;
    double min_root_ = 1e300;
};

// Reductions to a rank-0 scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);
// [N,C,H,W] -> [N,1,H,W]
Tensor channel_mean(const Tensor& x);
// [N,1,H,W] -> [N,C,H,W] by replication.
Tensor expand_channels(const Tensor& x, std::int64_t channels);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat_channels(const std::vector<Tensor>& xs);
// Slice [c0, c0+count) along dim 1 of an [N,C,H,W] tensor.
Tensor slice_channels(const Tensor& x, std::int64_t c0, std::int64_t count);

enum class PadMode { Zero, Reflect, Replicate };
Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right, PadMode mode = PadMode::Zero);
Tensor crop2d(const Tensor& x, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w);

// [N,C,H,W] <-> [N,H*W,C]
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& tokens, std::int64_t h, std::int64_t w);

// [M,K] x [K,N]
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched [B,M,K] x [B,K,N]; with transpose_b the second operand is [B,N,K].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x [N,in], weight [out,in], bias [out] -> [N,out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1, int padding = 0);
// Fixed (non-learnable) per-channel 2-D filter, valid region only.
Tensor filter2d_valid(const Tensor& x, const std::vector<float>& kernel, int kh, int kw);

Tensor softmax_lastdim(const Tensor& x);

// softmax(scale * q k^T) v with q [B,M,d], k [B,N,d], v [B,N,e] -> [B,M,e].
// Keeps only the attention weights for the backward pass.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, float scale);

// Align-corners-false bilinear interpolation.
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// out[n] = sum_l alpha[n,l] * xs[l][n]; xs share one shape with leading dim N.
Tensor mix(const std::vector<Tensor>& xs, const Tensor& alpha);

// Value-only helpers (no tape participation).
float max_abs_diff(const Tensor& a, const Tensor& b);
float sum_of_squares(const Tensor& x);

}  // namespace candle
