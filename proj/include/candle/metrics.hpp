#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "candle/tensor.hpp"

namespace candle::metrics {

// Returned when the two images are identical.
inline constexpr double kPsnrSentinel = 99.0;

// Peak 1. Inputs of identical shape, already clipped to [0,1] by the caller.
double psnr(const Tensor& x, const Tensor& y);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr float kSsimC1 = 0.01f * 0.01f;
inline constexpr float kSsimC2 = 0.03f * 0.03f;

// Normalized 11x11 Gaussian window (sigma 1.5), row-major.
const std::vector<float>& ssim_window();

// Differentiable mean SSIM over valid windows, channels and batch. Accepts
// [C,H,W] or [N,C,H,W]; H and W must be at least 11.
Tensor ssim_tensor(const Tensor& x, const Tensor& y);
// Per-window SSIM and 1 - SSIM, [N,C,H-10,W-10].
Tensor ssim_map(const Tensor& x, const Tensor& y);
Tensor dssim_map(const Tensor& x, const Tensor& y);
double ssim(const Tensor& x, const Tensor& y);

struct ConsistencyReport {
    std::vector<double> per_patch_sims;  // row-major over the patch grid
    double P = 0.0;                      // mean similarity
    double W = 0.0;                      // mean of the lowest ceil(0.1 * count)
    int rows = 0;
    int cols = 0;

    std::string to_text() const;
};

// Mean of the lowest ceil(0.1 * n) values (at least one).
double worst_decile_mean(std::vector<double> sims);

// Patch-wise cosine similarity between two feature maps ([D,h,w] or [1,D,h,w]).
// Each map is average-pooled over patch x patch cells before the cosine.
ConsistencyReport patch_consistency(const Tensor& feat_a, const Tensor& feat_b, int patch);

// Aggregate over several image pairs. P_macro averages the per-pair P,
// P_micro and W pool every patch of every pair.
struct ConsistencySummary {
    double P_macro = 0.0;
    double P_micro = 0.0;
    double W = 0.0;
    std::size_t pairs = 0;
    std::size_t patches = 0;

    std::string to_text() const;
};

ConsistencySummary summarize_consistency(const std::vector<ConsistencyReport>& reports);

// Per-patch similarity map as a P6 heat image (blue = -1, red = +1), each
// cell drawn as `cell` x `cell` pixels.
void write_similarity_ppm(const std::filesystem::path& path, const ConsistencyReport& report, int cell = 8);

}  // namespace candle::metrics
