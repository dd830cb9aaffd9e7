#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "candle/tensor.hpp"

namespace candle::scenegen {

struct LightSource {
    std::array<float, 3> color;   // [0,1]^3, at least one channel nonzero
    std::array<float, 2> center;  // normalized (x, y)
    float intensity;
    float falloff_sigma;
};

struct SceneConfig {
    std::int64_t height = 64;
    std::int64_t width = 64;
    int num_materials = 8;  // Voronoi regions per scene
    int num_lights = 2;
    float ambient_level = 0.6f;
    float ambient_floor = 0.15f;
    // Materials are drawn per scene, without replacement, from a fixed
    // palette of `palette_size` ids whose albedos depend only on palette_seed.
    int palette_size = 64;
    std::uint64_t palette_seed = 0;

    void validate() const;
    std::string to_text() const;  // key=value lines
};

struct SceneTriplet {
    Tensor input;         // [3,H,W] in [0,1]
    Tensor gt;            // [3,H,W]
    Tensor material_map;  // [1,H,W] integer ids
};

struct SceneDetail {
    SceneTriplet triplet;
    std::vector<int> material_ids;  // ids of the Voronoi cells, in cell order
    std::vector<LightSource> lights;
};

// Albedo of palette entry `id` in [0.1, 0.9]^3.
std::array<float, 3> palette_albedo(std::uint64_t palette_seed, int id);

// E(p) = floor * (1,1,1) + sum_k I_k c_k exp(-|p - center_k|^2 / (2 sigma_k^2)).
std::array<float, 3> illumination_at(const std::vector<LightSource>& lights, float ambient_floor, float x, float y);

SceneDetail generate_scene_detail(std::uint64_t seed, const SceneConfig& config);
SceneTriplet generate_scene(std::uint64_t seed, const SceneConfig& config);

struct ManifestEntry {
    std::string scene_id;
    std::filesystem::path input;
    std::filesystem::path gt;
    std::filesystem::path material_map;
};

struct Manifest {
    std::filesystem::path root;
    std::string config_text;
    std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.tsv";

// Writes scene_<i>_{input,gt,mat}.cndt (seed + i per scene) and manifest.tsv.
// With write_ppm, input and gt are also exported as PPM for inspection.
Manifest build_dataset(std::uint64_t seed, int count, const SceneConfig& config, const std::filesystem::path& out_dir,
                       bool write_ppm = false);

// Accepts either a dataset directory or a manifest path.
Manifest read_manifest(const std::filesystem::path& path);

// Entry paths are stored relative to the manifest; this joins them to its root.
ManifestEntry resolve(const Manifest& manifest, const ManifestEntry& entry);

// Paths are used as given; see resolve.
SceneTriplet load_scene(const ManifestEntry& entry);
std::vector<SceneTriplet> load_dataset(const Manifest& manifest);

}  // namespace candle::scenegen
