#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "candle/tensor.hpp"

namespace candle::prior {

inline constexpr std::array<int, 4> kLayerIds = {6, 12, 18, 24};
inline constexpr int kDefaultDim = 32;
inline constexpr int kMaxMaterials = 64;

struct PriorLayer {
    int layer_id;
    Tensor feature;  // [N,D,h,w]
};

/// Per-layer semantic features. Valid sets hold exactly the four layer ids in
/// increasing order, sharing N and D, with finite values.
struct SemanticFeatureSet {
    std::vector<PriorLayer> layers;

    std::int64_t batch() const { return layers.at(0).feature.dim(0); }
    std::int64_t dim() const { return layers.at(0).feature.dim(1); }
    const Tensor& layer(int layer_id) const;
};

// Throws Error naming the offending layer.
void validate(const SemanticFeatureSet& set);

std::string layer_key(int layer_id);

SemanticFeatureSet load_features(const std::filesystem::path& path);
void save_features(const std::filesystem::path& path, const SemanticFeatureSet& set);

// What a provider may look at. `key` names the image for file-backed providers.
struct PriorInput {
    const Tensor* image = nullptr;         // [N,3,H,W]
    const Tensor* material_map = nullptr;  // [N,1,H,W]
    std::string key;
};

/// Deterministic source of semantic features for an image.
class PriorProvider {
   public:
    virtual ~PriorProvider() = default;
    virtual SemanticFeatureSet encode(const PriorInput& input) const = 0;
    virtual std::string name() const = 0;
};

/// Illumination-invariant encoder: each material id owns a frozen unit-norm
/// embedding; layer l is that embedding map area-pooled to H/f_l x W/f_l
/// (f = 4, 8, 16, 16) and mixed by a fixed per-layer orthogonal matrix.
class SyntheticPrior final : public PriorProvider {
   public:
    explicit SyntheticPrior(std::uint64_t seed, int dim = kDefaultDim, int num_ids = kMaxMaterials);

    SemanticFeatureSet encode(const PriorInput& input) const override;
    SemanticFeatureSet encode_materials(const Tensor& material_map) const;
    std::string name() const override { return "synthetic"; }

    const std::vector<float>& embeddings() const { return embeddings_; }  // [num_ids, dim]
    int dim() const { return dim_; }
    int num_ids() const { return num_ids_; }

   private:
    int dim_;
    int num_ids_;
    std::vector<float> embeddings_;
    std::array<std::vector<float>, 4> mixing_;  // dim x dim orthogonal
};

SemanticFeatureSet encode_synthetic(const Tensor& material_map, std::uint64_t seed);

/// Reads `<dir>/<key>.cndt` written by the feature exporter.
class FilePrior final : public PriorProvider {
   public:
    explicit FilePrior(std::filesystem::path dir) : dir_(std::move(dir)) {}
    SemanticFeatureSet encode(const PriorInput& input) const override;
    std::string name() const override { return "file:" + dir_.string(); }

   private:
    std::filesystem::path dir_;
};

/// Weak baseline: the raw RGB image repeated as every layer (D = 3).
class RawRgbPrior final : public PriorProvider {
   public:
    SemanticFeatureSet encode(const PriorInput& input) const override;
    std::string name() const override { return "rgb"; }
};

// Parses "synthetic", "rgb" or "file:PATH". `dim` sizes the synthetic encoder.
std::unique_ptr<PriorProvider> make_provider(const std::string& spec, std::uint64_t seed, int dim = kDefaultDim);

}  // namespace candle::prior
