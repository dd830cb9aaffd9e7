#include <doctest.h>

#include <cmath>

#include "candle/arch.hpp"
#include "candle/gradcheck.hpp"
#include "candle/ops.hpp"
#include "candle/prior.hpp"
#include "support.hpp"

using namespace candle;
using candle::test::random_tensor;
using candle::test::TempDir;

namespace {

arch::ConvParams conv(std::uint64_t seed, std::int64_t cin, std::int64_t cout, std::int64_t k) {
    return {random_tensor(seed, {cout, cin, k, k}, -0.3f, 0.3f), random_tensor(seed + 1, {cout}, -0.1f, 0.1f)};
}

arch::PsfParams psf(std::uint64_t seed, std::int64_t C, std::int64_t D, std::size_t L) {
    arch::PsfParams p{random_tensor(seed, {C / 4, C}), random_tensor(seed + 1, {C / 4}), Tensor::zeros({std::int64_t(L), C / 4}),
                      Tensor::zeros({std::int64_t(L)}), {}};
    for (std::size_t l = 0; l < L; ++l) p.phi.push_back(conv(seed + 10 + 2 * l, D, C, 1));
    return p;
}

arch::BfacgParams bfacg_params(std::uint64_t seed, std::int64_t C, float a, float b) {
    return {conv(seed, C, C, 3), conv(seed + 2, C, C, 3), conv(seed + 4, C, C, 3), conv(seed + 6, C, C, 3),
            Tensor::full({1}, a), Tensor::full({1}, b)};
}

arch::ModelConfig small_config(bool guidance = true) {
    arch::ModelConfig c;
    c.stages = 2;
    c.base_channels = 4;
    c.guidance = guidance;
    c.seed = 3;
    return c;
}

prior::SemanticFeatureSet prior_for(std::uint64_t seed, std::int64_t H, std::int64_t W, std::int64_t N = 1) {
    Tensor m = random_tensor(seed, {N, 1, H, W}, 0.0f, 8.0f);
    for (auto& v : m.mutable_data()) v = std::floor(v);
    return prior::encode_synthetic(m, seed);
}

}  // namespace

TEST_CASE("drfb: zero gamma is an exact identity") {
    const Tensor f = random_tensor(1, {2, 4, 3, 5}), s = random_tensor(2, {2, 4, 3, 5});
    const arch::DrfbParams p{conv(3, 4, 4, 1), conv(5, 4, 4, 1), conv(7, 4, 4, 1), Tensor::zeros({1})};
    CHECK(max_abs_diff(arch::drfb_inject(f, s, p), f) == 0.0f);
    CHECK_THROWS_AS(arch::drfb_inject(f, random_tensor(2, {2, 4, 3, 4}), p), Error);
}

TEST_CASE("drfb: a single token attends to itself") {
    const Tensor f = random_tensor(1, {1, 4, 1, 1}), s = random_tensor(2, {1, 4, 1, 1});
    const arch::DrfbParams p{conv(3, 4, 4, 1), conv(5, 4, 4, 1), conv(7, 4, 4, 1), Tensor::full({1}, 0.5f)};
    const Tensor v = conv2d(s, p.wv.weight, p.wv.bias);
    CHECK(max_abs_diff(arch::drfb_inject(f, s, p), add(f, scale(v, 0.5f))) <= 1e-6f);
}

TEST_CASE("psf: gate values and fused sum") {
    const std::int64_t C = 8, D = 5;
    const Tensor f = random_tensor(1, {2, C, 4, 4});
    std::vector<Tensor> layers;
    for (int l = 0; l < 4; ++l) layers.push_back(random_tensor(20 + l, {2, D, 2 + l, 3}));

    auto p = psf(40, C, D, 4);
    const auto equal = arch::psf_fuse(f, layers, p);
    CHECK(equal.alpha.shape() == Shape{2, 4});
    for (float v : equal.alpha.data()) CHECK(v == doctest::Approx(0.25f).epsilon(1e-6));
    CHECK(equal.fused.shape() == f.shape());

    p.fc2_b.mutable_ptr()[2] = 60.0f;
    const auto one_hot = arch::psf_fuse(f, layers, p);
    CHECK(one_hot.alpha.at({1, 2}) == doctest::Approx(1.0f));
    const Tensor only = conv2d(bilinear_resize(layers[2], 4, 4), p.phi[2].weight, p.phi[2].bias);
    CHECK(max_abs_diff(one_hot.fused, only) <= 1e-5f);

    auto p2 = psf(50, C, D, 2);
    p2.fc2_b.mutable_ptr()[0] = std::log(2.0f);
    const auto two = arch::psf_fuse(f, {layers[0], layers[1]}, p2);
    CHECK(two.alpha.at({0, 0}) == doctest::Approx(2.0f / 3.0f).epsilon(1e-6));
    CHECK(two.alpha.at({0, 1}) == doctest::Approx(1.0f / 3.0f).epsilon(1e-6));
    CHECK_THROWS_AS(arch::psf_fuse(f, {layers[0]}, p2), Error);
}

TEST_CASE("psf: freshly initialized gate on a zero input is uniform") {
    const arch::Model m = arch::init_model(small_config());
    const auto feats = prior_for(3, 16, 16);
    const auto r = arch::psf_fuse(Tensor::zeros({1, 4, 8, 8}), feats, m.psf(1));
    for (float v : r.alpha.data()) CHECK(v == doctest::Approx(0.25f).epsilon(1e-7));
}

TEST_CASE("edge_map: flat input, step edge, monotone in the slope") {
    const Tensor one = Tensor::full({1}, 1.0f), zero = Tensor::zeros({1});
    const Tensor flat = arch::edge_map(Tensor::full({1, 3, 6, 6}, 0.4f), one, zero);
    CHECK(flat.shape() == Shape{1, 1, 6, 6});
    for (float v : flat.data()) CHECK(v == doctest::Approx(0.5f).epsilon(1e-4));

    Tensor step = Tensor::zeros({1, 2, 6, 6});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 6; ++y)
            for (int x = 3; x < 6; ++x) step.mutable_ptr()[(c * 6 + y) * 6 + x] = 1.0f;
    const Tensor e = arch::edge_map(step, one, zero);
    CHECK(e.at({0, 0, 2, 2}) > e.at({0, 0, 2, 0}) + 0.1f);
    CHECK(e.at({0, 0, 2, 0}) == doctest::Approx(0.5f).epsilon(1e-4));
    const Tensor steeper = arch::edge_map(step, Tensor::full({1}, 3.0f), zero);
    CHECK(steeper.at({0, 0, 2, 2}) > e.at({0, 0, 2, 2}));
}

TEST_CASE("bfacg: gate limits, midpoint and convex combination") {
    const Tensor f = random_tensor(1, {1, 4, 6, 6});
    const Tensor str = arch::bfacg(f, bfacg_params(10, 4, 0.0f, 60.0f));
    const Tensor chr = arch::bfacg(f, bfacg_params(10, 4, 0.0f, -60.0f));
    const Tensor mid = arch::bfacg(f, bfacg_params(10, 4, 0.0f, 0.0f));
    CHECK(max_abs_diff(mid, scale(add(str, chr), 0.5f)) <= 1e-5f);
    CHECK(max_abs_diff(str, chr) > 1e-2f);
    const Tensor any = arch::bfacg(f, bfacg_params(10, 4, 2.0f, -0.3f));
    for (std::size_t i = 0; i < any.numel(); ++i) {
        const float lo = std::min(str.ptr()[i], chr.ptr()[i]), hi = std::max(str.ptr()[i], chr.ptr()[i]);
        CHECK((any.ptr()[i] >= lo - 1e-5f && any.ptr()[i] <= hi + 1e-5f));
    }
}

TEST_CASE("sffb: open and closed gates") {
    const Tensor x = random_tensor(1, {1, 4, 6, 8});
    const arch::SffbParams open{{Tensor::zeros({4, 4, 3, 3}), Tensor::full({4}, 60.0f)}};
    CHECK(max_abs_diff(arch::sffb_filter(x, open), x) <= 1e-4f);

    const arch::SffbParams closed{{Tensor::zeros({4, 4, 3, 3}), Tensor::full({4}, -60.0f)}};
    const Tensor flat = arch::sffb_filter(Tensor::full({1, 4, 6, 8}, 0.8f), closed);
    for (float v : flat.data()) CHECK(std::fabs(v) <= 1e-6f);
    // Without the LL band every 2x2 block averages to zero.
    const Tensor y = arch::sffb_filter(x, closed);
    for (int c = 0; c < 4; ++c)
        for (int by = 0; by < 3; ++by)
            for (int bx = 0; bx < 4; ++bx) {
                float s = 0.0f;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) s += y.at({0, c, 2 * by + dy, 2 * bx + dx});
                CHECK(std::fabs(s) <= 1e-5f);
            }
}

TEST_CASE("forward: residual output, prior independence at init, shape errors") {
    arch::Model m = arch::init_model(small_config());
    const Tensor img = random_tensor(2, {1, 3, 16, 16}, 0, 1);
    const auto pa = prior_for(1, 16, 16), pb = prior_for(2, 16, 16);
    const Tensor ya = arch::forward(m, img, &pa);
    CHECK(ya.shape() == img.shape());
    // Every gamma starts at zero, so the prior cannot influence the output yet.
    CHECK(max_abs_diff(ya, arch::forward(m, img, &pb)) == 0.0f);

    arch::ForwardTrace trace;
    arch::forward(m, img, &pa, &trace);
    CHECK(trace.alphas.size() == 2);

    for (auto& v : m.params.at("final.w").mutable_data()) v = 0.0f;
    for (auto& v : m.params.at("final.b").mutable_data()) v = 0.0f;
    CHECK(max_abs_diff(arch::forward(m, img, &pa), img) == 0.0f);

    CHECK_THROWS_AS(arch::forward(m, random_tensor(3, {1, 3, 14, 16}), &pa), Error);
    CHECK_THROWS_AS(arch::forward(m, img, nullptr), Error);
    const arch::Model u = arch::init_model(small_config(false));
    CHECK(arch::forward(u, img, nullptr).shape() == img.shape());
    CHECK_FALSE(u.params.contains("enc1.drfb.gamma"));
}

TEST_CASE("init: toggling a component keeps the other parameters") {
    const arch::Model g = arch::init_model(small_config(true));
    const arch::Model u = arch::init_model(small_config(false));
    for (const auto& [name, t] : u.params.all()) CHECK(max_abs_diff(t, g.params.at(name)) == 0.0f);
}

TEST_CASE("refiner: zero-initialized last layer leaves the input") {
    auto cfg = small_config();
    cfg.refiner = true;
    const arch::Model m = arch::init_model(cfg);
    const Tensor coarse = random_tensor(4, {1, 3, 16, 16}, 0, 1);
    CHECK(max_abs_diff(arch::refiner_apply(coarse, m.refiner()), coarse) == 0.0f);
    const auto p = prior_for(1, 16, 16);
    CHECK(max_abs_diff(arch::predict(m, coarse, &p, true), arch::predict(m, coarse, &p, false)) == 0.0f);
    CHECK_THROWS_AS(arch::predict(arch::init_model(small_config()), coarse, &p, true), Error);
}

TEST_CASE("checkpoint: round trip is bit-exact") {
    TempDir dir("ckpt");
    auto cfg = small_config();
    cfg.refiner = true;
    cfg.edge_gate_a = 1.25f;
    arch::Model m = arch::init_model(cfg);
    m.params.at("enc1.drfb.gamma").mutable_ptr()[0] = 0.3f;
    arch::save_checkpoint(dir / "m.cndt", m);
    const arch::Model r = arch::load_checkpoint(dir / "m.cndt");
    CHECK(r.config.to_text() == cfg.to_text());
    for (const auto& [name, t] : m.params.all()) CHECK(max_abs_diff(t, r.params.at(name)) == 0.0f);
    const Tensor img = random_tensor(2, {1, 3, 16, 16}, 0, 1);
    const auto p = prior_for(1, 16, 16);
    CHECK(max_abs_diff(arch::forward(m, img, &p), arch::forward(r, img, &p)) == 0.0f);
    CHECK_THROWS_AS(arch::load_checkpoint(dir / "absent.cndt"), Error);
}

TEST_CASE("backward: every parameter receives a gradient") {
    auto cfg = small_config();
    cfg.base_channels = 8;
    arch::Model m = arch::init_model(cfg);
    for (int s = 1; s <= 2; ++s) m.params.at("enc" + std::to_string(s) + ".drfb.gamma").mutable_ptr()[0] = 0.2f;
    // Gradients accumulate over a few random batches; a relu can be dead on any single one.
    for (std::uint64_t b = 0; b < 3; ++b) {
        const Tensor img = random_tensor(2 + b, {2, 3, 16, 16}, 0, 1), w = random_tensor(5 + b, {2, 3, 16, 16});
        const auto p = prior_for(1 + b, 16, 16, 2);
        Tape tape;
        TapeScope scope(tape);
        tape.backward(mean(mul(arch::forward(m, img, &p), w)));
    }
    for (auto& [name, t] : m.params.all()) {
        float g = 0.0f;
        for (float v : t.grad()) g = std::max(g, std::fabs(v));
        INFO(name);
        CHECK(g > 0.0f);
    }
}

TEST_CASE("gradcheck suite: arch and end-to-end") {
    for (const char* module : {"arch", "e2e"})
        for (const auto& r : gradcheck::run_suite(module, 5)) {
            INFO(r.module << "/" << r.name << " " << r.max_rel_error);
            CHECK(r.passed());
        }
}
