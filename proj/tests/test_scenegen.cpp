#include <doctest.h>

#include <algorithm>
#include <set>

#include "candle/io.hpp"
#include "candle/ops.hpp"
#include "candle/scenegen.hpp"
#include "support.hpp"

using namespace candle;
using candle::test::TempDir;

TEST_CASE("scenegen: determinism and ranges") {
    scenegen::SceneConfig cfg;
    const auto a = scenegen::generate_scene(3, cfg);
    const auto b = scenegen::generate_scene(3, cfg);
    CHECK(max_abs_diff(a.input, b.input) == 0.0f);
    CHECK(max_abs_diff(a.gt, b.gt) == 0.0f);
    CHECK(max_abs_diff(a.material_map, b.material_map) == 0.0f);
    CHECK(a.input.shape() == Shape{3, 64, 64});
    CHECK(a.material_map.shape() == Shape{1, 64, 64});
    for (float v : a.input.data()) CHECK((v >= 0.0f && v <= 1.0f));
    for (float v : a.gt.data()) CHECK((v >= 0.1f * 0.6f - 1e-6f && v <= 0.9f * 0.6f + 1e-6f));
    CHECK(max_abs_diff(a.input, scenegen::generate_scene(4, cfg).input) > 0.0f);
}

TEST_CASE("scenegen: gt is albedo times ambient level and every material appears") {
    scenegen::SceneConfig cfg;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto d = scenegen::generate_scene_detail(seed, cfg);
        const auto& t = d.triplet;
        std::set<int> seen;
        for (float v : t.material_map.data()) seen.insert(int(v));
        CHECK(seen == std::set<int>(d.material_ids.begin(), d.material_ids.end()));
        CHECK(d.material_ids.size() == std::size_t(cfg.num_materials));
        for (std::int64_t y = 0; y < 64; y += 7)
            for (std::int64_t x = 0; x < 64; x += 5) {
                const int id = int(t.material_map.at({0, y, x}));
                const auto alb = scenegen::palette_albedo(cfg.palette_seed, id);
                for (int c = 0; c < 3; ++c) CHECK(t.gt.at({c, y, x}) == alb[std::size_t(c)] * cfg.ambient_level);
            }
    }
}

TEST_CASE("scenegen: gt does not depend on lighting") {
    scenegen::SceneConfig a, b;
    b.num_lights = 4;
    const auto x = scenegen::generate_scene(9, a), y = scenegen::generate_scene(9, b);
    CHECK(max_abs_diff(x.gt, y.gt) == 0.0f);
    CHECK(max_abs_diff(x.material_map, y.material_map) == 0.0f);
}

TEST_CASE("scenegen: no lights and floor at the ambient level gives input = gt") {
    scenegen::SceneConfig cfg;
    cfg.num_lights = 0;
    cfg.ambient_floor = cfg.ambient_level;
    const auto s = scenegen::generate_scene(5, cfg);
    CHECK(max_abs_diff(s.input, s.gt) == 0.0f);
}

TEST_CASE("scenegen: saturated red highlight") {
    const std::vector<scenegen::LightSource> lights{{{1, 0, 0}, {0.5f, 0.5f}, 4.0f, 0.2f}};
    const auto e = scenegen::illumination_at(lights, 0.15f, 0.5f, 0.5f);
    CHECK(e[0] == doctest::Approx(4.15f));
    CHECK(e[1] == doctest::Approx(0.15f));
    CHECK(e[2] == doctest::Approx(0.15f));
    CHECK(std::clamp(1.0f * e[0], 0.0f, 1.0f) == 1.0f);
}

TEST_CASE("scenegen: config bounds") {
    scenegen::SceneConfig cfg;
    cfg.height = 60;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.num_materials = 65;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.num_lights = 5;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.ambient_level = 0.0f;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.palette_size = 4;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("build_dataset: files, manifest, byte-identical regeneration") {
    TempDir a("ds_a"), b("ds_b");
    scenegen::SceneConfig cfg;
    cfg.height = cfg.width = 32;
    const auto m = scenegen::build_dataset(42, 2, cfg, a.path());
    std::size_t cndt = 0, other = 0;
    for (const auto& e : std::filesystem::directory_iterator(a.path())) (e.path().extension() == ".cndt" ? cndt : other)++;
    CHECK(cndt == 6);
    CHECK(other == 1);
    scenegen::build_dataset(42, 2, cfg, b.path());
    for (const auto& e : std::filesystem::directory_iterator(a.path()))
        CHECK(io::read_file(e.path()) == io::read_file(b.path() / e.path().filename()));

    const auto r = scenegen::read_manifest(a.path());
    REQUIRE(r.entries.size() == 2);
    CHECK(r.entries[1].scene_id == "scene_1");
    CHECK(r.config_text.find("height=32") != std::string::npos);
    const auto scenes = scenegen::load_dataset(r);
    const auto direct = scenegen::generate_scene(43, cfg);
    CHECK(max_abs_diff(scenes[1].input, direct.input) == 0.0f);
    for (const auto& s : scenes)
        for (float v : s.input.data()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK_THROWS_AS(scenegen::read_manifest(a / "nope"), Error);
    CHECK_THROWS_AS(scenegen::build_dataset(1, 0, cfg, a.path()), Error);
}
