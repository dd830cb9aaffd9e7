#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "candle/arch.hpp"
#include "candle/metrics.hpp"
#include "candle/prior.hpp"
#include "candle/scenegen.hpp"
#include "candle/tensor.hpp"

namespace candle::train {

inline constexpr float kSsimWeight = 0.7f;

struct CropPhase {
    std::int64_t step;  // first global step using this crop
    int size;
};

struct TrainConfig {
    std::array<float, 3> stage_lrs = {1e-4f, 5e-5f, 2e-5f};
    float ssim_weight = kSsimWeight;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    // Empty: 32 / 48 / 64 switching at S/3 and 2S/3.
    std::vector<CropPhase> crops;
    int batch_size = 4;
    std::int64_t steps = 300;
    std::uint64_t seed = 0;
    bool flip = true;
    bool rot90 = true;
    // 0: every 10% of steps.
    std::int64_t val_every = 0;
    // Scenes used for validation (taken from the front of the validation set); 0 = all.
    int val_count = 8;
    std::string provider = "synthetic";
    std::uint64_t prior_seed = 0;
    arch::ModelConfig model;

    std::vector<CropPhase> resolved_crops() const;
    std::int64_t resolved_val_every() const;
    // Lengths of the three stages (60/20/20).
    std::array<std::int64_t, 3> stage_lengths() const;

    void validate() const;
    std::string to_text() const;  // key = value lines, parseable by from_text
    static TrainConfig from_text(const std::string& text);
    static TrainConfig load(const std::filesystem::path& path);
};

// ||y_hat - y||_1 (mean) + 0.7 * (1 - SSIM(y_hat, y)).
Tensor loss(const Tensor& y_hat, const Tensor& y);

struct Moments {
    std::vector<float> m, v;
    std::int64_t step = 0;
};

struct OptimState {
    std::map<std::string, Moments> moments;
    std::int64_t step = 0;
};

struct AdamHyper {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Bias-corrected Adam over every trainable parameter holding a gradient,
// then zeroes those gradients. Throws NonFinite naming the first parameter
// with a NaN or Inf gradient (nothing is updated in that case).
void adam_step(arch::ParamTable& params, OptimState& state, float lr, const AdamHyper& hyper = {});

// 0.5 * base * (1 + cos(pi * step / stage_len)).
float cosine_lr(std::int64_t step, float base, std::int64_t stage_len);

struct Scene {
    std::string key;  // identifies the image for file-backed priors
    scenegen::SceneTriplet triplet;
    std::string gt_key;
};

std::vector<Scene> load_scenes(const scenegen::Manifest& manifest);

// Encodes input and GT of every scene with `provider` and compares the
// deepest prior layer patch by patch. `patch` is in image pixels and must be
// a multiple of that layer's stride.
metrics::ConsistencySummary dataset_consistency(const prior::PriorProvider& provider, const std::vector<Scene>& scenes,
                                                int patch, std::vector<metrics::ConsistencyReport>* reports = nullptr);

struct SceneRow {
    std::string key;
    double psnr;
    double ssim;
};

struct EvalResult {
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::vector<SceneRow> rows;

    std::string rows_tsv() const;
};

// Forward each scene, clip, optionally refine, score against GT.
EvalResult evaluate(const arch::Model& model, const prior::PriorProvider* provider, const std::vector<Scene>& scenes,
                    bool use_refiner);

struct LogRow {
    std::int64_t step;
    int stage;
    float lr;
    double train_loss;  // mean over the steps since the previous row
    double val_psnr;
    double val_ssim;
};

std::string log_header();
std::string format_log_row(const LogRow& row);

struct TrainResult {
    std::vector<LogRow> log;
    std::vector<double> step_losses;
    double best_val_psnr = 0.0;
    std::int64_t best_step = -1;
};

struct TrainOptions {
    // When set: train_log.tsv, config.txt, stage<k>.cndt, best.cndt, last.cndt.
    std::filesystem::path out_dir;
    std::function<void(const LogRow&)> on_log;
};

// Stage 1 trains the backbone on augmented random crops. With a refiner,
// stage 2 trains only the refiner on clipped stage-1 outputs and stage 3
// fine-tunes everything; without one, stages 2 and 3 keep training the
// backbone at their learning rates. Stages 2 and 3 use cosine decay.
TrainResult train_loop(const TrainConfig& config, arch::Model& model, const prior::PriorProvider* provider,
                       const std::vector<Scene>& train_set, const std::vector<Scene>& val_set,
                       const TrainOptions& options = {});

}  // namespace candle::train
