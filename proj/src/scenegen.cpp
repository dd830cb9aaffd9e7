#include "candle/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "candle/io.hpp"

namespace candle::scenegen {

void SceneConfig::validate() const {
    auto bad = [](const std::string& why) { fail(ErrorKind::Config, "scene config: " + why); };
    if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) bad("H and W must be positive multiples of 8");
    if (num_materials < 1 || num_materials > 64) bad("num_materials must be in [1, 64]");
    if (palette_size < num_materials || palette_size > 64) bad("palette_size must be in [num_materials, 64]");
    if (num_lights < 0 || num_lights > 4) bad("num_lights must be in [0, 4]");
    if (!(ambient_level > 0.0f && ambient_level <= 1.0f)) bad("ambient_level must be in (0, 1]");
    if (!(ambient_floor >= 0.0f && ambient_floor <= 1.0f)) bad("ambient_floor must be in [0, 1]");
}

std::string SceneConfig::to_text() const {
    std::ostringstream os;
    os << "height=" << height << "\nwidth=" << width << "\nnum_materials=" << num_materials
       << "\nnum_lights=" << num_lights << "\nambient_level=" << ambient_level << "\nambient_floor=" << ambient_floor
       << "\npalette_size=" << palette_size << "\npalette_seed=" << palette_seed << "\n";
    return os.str();
}

std::array<float, 3> palette_albedo(std::uint64_t palette_seed, int id) {
    std::seed_seq seq{static_cast<std::uint32_t>(palette_seed), static_cast<std::uint32_t>(palette_seed >> 32),
                      0x70616cu, static_cast<std::uint32_t>(id)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<float> u(0.1f, 0.9f);
    std::array<float, 3> a{};
    for (auto& v : a) v = u(rng);
    return a;
}

std::array<float, 3> illumination_at(const std::vector<LightSource>& lights, float ambient_floor, float x, float y) {
    std::array<float, 3> e{ambient_floor, ambient_floor, ambient_floor};
    for (const auto& l : lights) {
        const float dx = x - l.center[0], dy = y - l.center[1];
        const float g = l.intensity * std::exp(-(dx * dx + dy * dy) / (2.0f * l.falloff_sigma * l.falloff_sigma));
        for (int c = 0; c < 3; ++c) e[static_cast<std::size_t>(c)] += g * l.color[static_cast<std::size_t>(c)];
    }
    return e;
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag};
    return std::mt19937_64(seq);
}

std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
    const float hh = h * 6.0f;
    const int sector = static_cast<int>(std::floor(hh)) % 6;
    const float f = hh - std::floor(hh);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

}  // namespace

SceneDetail generate_scene_detail(std::uint64_t seed, const SceneConfig& config) {
    config.validate();
    const auto H = config.height, W = config.width;
    const int M = config.num_materials;

    // Material layout and albedo draw: independent of the lighting stream.
    auto geo = stream(seed, 1);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::vector<int> cell(static_cast<std::size_t>(H * W));
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
        std::vector<std::array<float, 2>> sites(static_cast<std::size_t>(M));
        for (auto& s : sites) s = {unit(geo), unit(geo)};
        std::vector<int> count(static_cast<std::size_t>(M), 0);
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const float px = (static_cast<float>(x) + 0.5f) / static_cast<float>(W);
                const float py = (static_cast<float>(y) + 0.5f) / static_cast<float>(H);
                int best = 0;
                float best_d = std::numeric_limits<float>::max();
                for (int k = 0; k < M; ++k) {
                    const float dx = px - sites[static_cast<std::size_t>(k)][0], dy = py - sites[static_cast<std::size_t>(k)][1];
                    const float d = dx * dx + dy * dy;
                    if (d < best_d) {
                        best_d = d;
                        best = k;
                    }
                }
                cell[static_cast<std::size_t>(y * W + x)] = best;
                ++count[static_cast<std::size_t>(best)];
            }
        ok = std::all_of(count.begin(), count.end(), [](int c) { return c > 0; });
    }
    if (!ok) fail(ErrorKind::Value, "could not draw a Voronoi layout with every material present");

    std::vector<int> pool(static_cast<std::size_t>(config.palette_size));
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<int> ids(static_cast<std::size_t>(M));
    for (int k = 0; k < M; ++k) {
        // Partial Fisher-Yates with explicit index draws keeps the sequence
        // independent of the standard library's shuffle implementation.
        const auto remaining = static_cast<std::uint64_t>(config.palette_size - k);
        const auto j = static_cast<std::size_t>(k) + static_cast<std::size_t>(geo() % remaining);
        std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
        ids[static_cast<std::size_t>(k)] = pool[static_cast<std::size_t>(k)];
    }
    std::vector<std::array<float, 3>> albedo(static_cast<std::size_t>(M));
    for (int k = 0; k < M; ++k) albedo[static_cast<std::size_t>(k)] = palette_albedo(config.palette_seed, ids[static_cast<std::size_t>(k)]);

    auto lit = stream(seed, 2);
    std::vector<LightSource> lights;
    for (int k = 0; k < config.num_lights; ++k) {
        LightSource l{};
        const float hue = unit(lit);
        const float sat = 0.6f + 0.4f * unit(lit);
        l.color = hsv_to_rgb(hue, sat, 1.0f);
        l.center = {unit(lit), unit(lit)};
        l.intensity = 1.0f + 2.0f * unit(lit);
        l.falloff_sigma = 0.15f + 0.2f * unit(lit);
        lights.push_back(l);
    }

    std::vector<float> input(static_cast<std::size_t>(3 * H * W)), gt(input.size()), mat(static_cast<std::size_t>(H * W));
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const auto k = static_cast<std::size_t>(cell[static_cast<std::size_t>(y * W + x)]);
            const float px = (static_cast<float>(x) + 0.5f) / static_cast<float>(W);
            const float py = (static_cast<float>(y) + 0.5f) / static_cast<float>(H);
            const auto e = illumination_at(lights, config.ambient_floor, px, py);
            for (std::int64_t c = 0; c < 3; ++c) {
                const float a = albedo[k][static_cast<std::size_t>(c)];
                const auto idx = static_cast<std::size_t>((c * H + y) * W + x);
                gt[idx] = a * config.ambient_level;
                input[idx] = std::clamp(a * e[static_cast<std::size_t>(c)], 0.0f, 1.0f);
            }
            mat[static_cast<std::size_t>(y * W + x)] = static_cast<float>(ids[k]);
        }

    SceneDetail d;
    d.triplet = {Tensor({3, H, W}, std::move(input)), Tensor({3, H, W}, std::move(gt)), Tensor({1, H, W}, std::move(mat))};
    d.material_ids = std::move(ids);
    d.lights = std::move(lights);
    return d;
}

SceneTriplet generate_scene(std::uint64_t seed, const SceneConfig& config) {
    return generate_scene_detail(seed, config).triplet;
}

Manifest build_dataset(std::uint64_t seed, int count, const SceneConfig& config, const std::filesystem::path& out_dir,
                       bool write_ppm) {
    if (count < 1) fail(ErrorKind::Config, "dataset count must be >= 1");
    config.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
        fail(ErrorKind::Io, "cannot create dataset directory '" + out_dir.string() + "'");
    }
    Manifest m;
    m.root = out_dir;
    m.config_text = config.to_text() + "seed=" + std::to_string(seed) + "\ncount=" + std::to_string(count) + "\n";
    std::ostringstream text;
    {
        std::istringstream cfg(m.config_text);
        std::string line;
        while (std::getline(cfg, line)) text << "# " << line << "\n";
    }
    for (int i = 0; i < count; ++i) {
        const std::string id = "scene_" + std::to_string(i);
        const SceneTriplet s = generate_scene(seed + static_cast<std::uint64_t>(i), config);
        ManifestEntry e{id, id + "_input.cndt", id + "_gt.cndt", id + "_mat.cndt"};
        io::write_tensor(out_dir / e.input, "input", s.input);
        io::write_tensor(out_dir / e.gt, "gt", s.gt);
        io::write_tensor(out_dir / e.material_map, "mat", s.material_map);
        if (write_ppm) {
            io::write_ppm(out_dir / (id + "_input.ppm"), s.input);
            io::write_ppm(out_dir / (id + "_gt.ppm"), s.gt);
        }
        text << e.scene_id << '\t' << e.input.string() << '\t' << e.gt.string() << '\t' << e.material_map.string() << '\n';
        m.entries.push_back(std::move(e));
    }
    io::write_text_file(out_dir / kManifestName, text.str());
    return m;
}

Manifest read_manifest(const std::filesystem::path& path) {
    std::filesystem::path file = path;
    if (std::filesystem::is_directory(path)) file = path / kManifestName;
    std::ifstream in(file);
    if (!in) fail(ErrorKind::Io, "cannot open manifest '" + file.string() + "'");
    Manifest m;
    m.root = file.parent_path();
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            m.config_text += line.substr(std::min<std::size_t>(2, line.size())) + "\n";
            continue;
        }
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string tok;
        while (std::getline(ls, tok, '\t')) f.push_back(tok);
        if (f.size() != 4) fail(ErrorKind::Io, file.string() + ": malformed manifest line '" + line + "'");
        m.entries.push_back({f[0], f[1], f[2], f[3]});
    }
    if (m.entries.empty()) fail(ErrorKind::Value, file.string() + ": manifest lists no scenes");
    return m;
}

SceneTriplet load_scene(const ManifestEntry& entry) {
    return {io::read_tensor(entry.input), io::read_tensor(entry.gt), io::read_tensor(entry.material_map)};
}

ManifestEntry resolve(const Manifest& manifest, const ManifestEntry& entry) {
    ManifestEntry e = entry;
    if (e.input.is_relative()) e.input = manifest.root / e.input;
    if (e.gt.is_relative()) e.gt = manifest.root / e.gt;
    if (e.material_map.is_relative()) e.material_map = manifest.root / e.material_map;
    return e;
}

std::vector<SceneTriplet> load_dataset(const Manifest& manifest) {
    std::vector<SceneTriplet> out;
    for (const auto& e : manifest.entries) out.push_back(load_scene(resolve(manifest, e)));
    return out;
}

}  // namespace candle::scenegen
