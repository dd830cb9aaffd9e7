#include "candle/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "candle/arch.hpp"
#include "candle/metrics.hpp"
#include "candle/ops.hpp"
#include "candle/prior.hpp"
#include "candle/train.hpp"
#include "candle/wavelet.hpp"

namespace candle::gradcheck {

Tensor finite_difference_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x_in, float eps) {
    if (!(eps > 0.0f)) fail(ErrorKind::Value, "finite_difference_gradient: eps must be positive");
    Tensor x = x_in.clone();
    std::vector<float> g(x.numel());
    float* p = x.mutable_ptr();
    auto eval = [&] {
        const Tensor y = f(x);
        if (y.numel() != 1) fail(ErrorKind::Shape, "finite_difference_gradient: f must return a scalar, got " + shape_str(y.shape()));
        return double(y.item());
    };
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const float orig = p[i];
        const float hi = orig + eps, lo = orig - eps;
        p[i] = hi;
        const double fp = eval();
        p[i] = lo;
        const double fm = eval();
        p[i] = orig;
        g[i] = static_cast<float>((fp - fm) / (double(hi) - double(lo)));
    }
    if (x.numel() == 0) eval();
    return Tensor(x.shape(), std::move(g));
}

double relative_error(const std::vector<double>& a, const std::vector<double>& n, double floor) {
    if (a.size() != n.size()) fail(ErrorKind::Shape, "relative_error: length mismatch");
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::fabs(a[i] - n[i]));
        scale = std::max({scale, std::fabs(a[i]), std::fabs(n[i])});
    }
    return diff / scale;
}

namespace {

using Rng = std::mt19937_64;

Rng make_rng(std::uint64_t seed, std::uint32_t tag) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), tag};
    return Rng(seq);
}

Tensor uniform(Rng& rng, const Shape& shape, float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = d(rng);
    return Tensor(shape, std::move(v));
}

// Magnitudes in [lo, hi] with random sign.
Tensor off_zero(Rng& rng, const Shape& shape, float lo, float hi) {
    Tensor t = uniform(rng, shape, lo, hi);
    std::bernoulli_distribution sign(0.5);
    for (auto& x : t.mutable_data())
        if (sign(rng)) x = -x;
    return t;
}

double projected(const Tensor& y, const std::vector<double>& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += w[i] * double(y.ptr()[i]);
    return acc;
}

}  // namespace

double check_op(const MultiOp& op, std::vector<Tensor> inputs, const std::vector<std::size_t>& check, std::uint64_t seed,
                float eps) {
    for (auto& t : inputs) t.set_requires_grad(false);
    const Tensor probe = op(inputs);
    Rng rng = make_rng(seed, 0x9c);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<double> w(probe.numel());
    for (auto& v : w) v = d(rng);
    std::vector<float> wf(w.begin(), w.end());
    const Tensor wt(probe.shape(), wf);
    for (auto& w_i : w) w_i = double(float(w_i));

    for (std::size_t k : check) inputs.at(k).set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        const Tensor y = op(inputs);
        tape.backward(sum(mul(y, wt)));
    }
    std::vector<double> analytic, numeric;
    for (std::size_t k : check) {
        Tensor& x = inputs[k];
        analytic.insert(analytic.end(), x.grad().begin(), x.grad().end());
        x.zero_grad();
        float* p = x.mutable_ptr();
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const float orig = p[i];
            const float hi = orig + eps, lo = orig - eps;
            p[i] = hi;
            const double fp = projected(op(inputs), w);
            p[i] = lo;
            const double fm = projected(op(inputs), w);
            p[i] = orig;
            numeric.push_back((fp - fm) / (double(hi) - double(lo)));
        }
    }
    const double worst = relative_error(analytic, numeric);
    for (auto& t : inputs) t.set_requires_grad(false);
    return worst;
}

namespace {

struct Check {
    std::string module;
    std::string name;
    double tolerance;
    std::function<double(std::uint64_t)> run;
};

std::vector<std::size_t> all_of(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

double simple(const MultiOp& op, std::vector<Tensor> inputs, std::uint64_t seed, float eps = kDefaultEps) {
    const auto idx = all_of(inputs.size());
    return check_op(op, std::move(inputs), idx, seed, eps);
}

// Conv parameters with default-style fan-in scaling.
void push_conv(Rng& rng, std::vector<Tensor>& v, std::int64_t cin, std::int64_t cout, std::int64_t k, float gain = 1.0f) {
    const float b = gain / std::sqrt(float(cin * k * k));
    v.push_back(uniform(rng, {cout, cin, k, k}, -b, b));
    v.push_back(uniform(rng, {cout}, -b, b));
}

arch::ConvParams conv_at(const std::vector<Tensor>& v, std::size_t i) { return {v[i], v[i + 1]}; }

// Central differences are meaningless across a relu/abs/clip kink and
// inaccurate near the singular point of a gradient magnitude, so cases
// closer than these margins are redrawn.
constexpr double kKinkMargin = 5e-3;
constexpr double kRootMargin = 0.1;
// The Sobel magnitude carries float rounding that a 1e-3 step amplifies
// past tolerance on the scalar gate parameters; the curvature allows 4e-3.
constexpr float kEdgeEps = 4e-3f;

struct Case {
    MultiOp op;
    std::vector<Tensor> inputs;
};

double off_kink(std::uint64_t seed, std::uint32_t tag, const std::function<Case(Rng&)>& build, float eps = kDefaultEps) {
    for (std::uint32_t attempt = 0; attempt < 1000; ++attempt) {
        Rng r = make_rng(seed, tag + (attempt << 8));
        Case c = build(r);
        bool clear;
        {
            KinkProbe probe;
            c.op(c.inputs);
            clear = probe.min_distance() >= kKinkMargin && probe.min_root() >= kRootMargin;
        }
        if (clear) return simple(c.op, std::move(c.inputs), seed, eps);
    }
    fail(ErrorKind::Value, "gradcheck: no draw clear of kinks");
}

std::vector<Check> tensor_checks() {
    std::vector<Check> c;
    const std::string m = "tensor";
    c.push_back({m, "conv2d", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 1);
                     std::vector<Tensor> in{uniform(r, {2, 3, 7, 7}, -1, 1)};
                     push_conv(r, in, 3, 4, 3);
                     return simple([](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 1, 1); }, in, s);
                 }});
    c.push_back({m, "conv2d_stride2", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 2);
                     std::vector<Tensor> in{uniform(r, {2, 2, 8, 8}, -1, 1)};
                     push_conv(r, in, 2, 3, 3);
                     return simple([](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], x[2], 2, 1); }, in, s);
                 }});
    c.push_back({m, "softmax_lastdim", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 3);
                     return simple([](const std::vector<Tensor>& x) { return softmax_lastdim(x[0]); },
                                   {uniform(r, {2, 3, 6}, -3, 3)}, s);
                 }});
    c.push_back({m, "bilinear_resize", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 4);
                     return simple([](const std::vector<Tensor>& x) { return bilinear_resize(x[0], 8, 4); },
                                   {uniform(r, {2, 3, 5, 7}, -1, 1)}, s);
                 }});
    c.push_back({m, "global_avg_pool", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 5);
                     return simple([](const std::vector<Tensor>& x) { return global_avg_pool(x[0]); },
                                   {uniform(r, {2, 4, 8, 8}, -1, 1)}, s);
                 }});
    c.push_back({m, "channel_mean", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 6);
                     return simple([](const std::vector<Tensor>& x) { return channel_mean(x[0]); },
                                   {uniform(r, {2, 4, 5, 5}, -1, 1)}, s);
                 }});
    c.push_back({m, "sigmoid", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 7);
                     return simple([](const std::vector<Tensor>& x) { return sigmoid(x[0]); }, {uniform(r, {2, 4, 4, 4}, -4, 4)}, s);
                 }});
    c.push_back({m, "relu", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 8);
                     return simple([](const std::vector<Tensor>& x) { return relu(x[0]); }, {off_zero(r, {2, 4, 4, 4}, 0.05f, 1)}, s);
                 }});
    c.push_back({m, "leaky_relu", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 24);
                     return simple([](const std::vector<Tensor>& x) { return leaky_relu(x[0], 0.1f); },
                                   {off_zero(r, {2, 4, 4, 4}, 0.05f, 1)}, s);
                 }});
    c.push_back({m, "abs", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 9);
                     return simple([](const std::vector<Tensor>& x) { return abs(x[0]); }, {off_zero(r, {2, 4, 4, 4}, 0.05f, 1)}, s);
                 }});
    c.push_back({m, "sqrt", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 10);
                     return simple([](const std::vector<Tensor>& x) { return sqrt(x[0]); }, {uniform(r, {2, 4, 4}, 0.2f, 2)}, s);
                 }});
    c.push_back({m, "clip", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 11);
                     Tensor x = uniform(r, {2, 3, 4, 4}, -0.5f, 1.5f);
                     for (auto& v : x.mutable_data())
                         if (std::fabs(v) < 0.05f || std::fabs(v - 1.0f) < 0.05f) v += 0.1f;
                     return simple([](const std::vector<Tensor>& t) { return clip(t[0], 0.0f, 1.0f); }, {x}, s);
                 }});
    c.push_back({m, "elementwise", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 12);
                     return simple(
                         [](const std::vector<Tensor>& x) {
                             return add(sub(mul(x[0], x[1]), scale(x[1], 0.5f)), div(x[0], add_scalar(mul(x[1], x[1]), 1.0f)));
                         },
                         {uniform(r, {2, 3, 4}, -1, 1), uniform(r, {2, 3, 4}, -1, 1)}, s);
                 }});
    c.push_back({m, "mean", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 13);
                     return simple([](const std::vector<Tensor>& x) { return mean(mul(x[0], x[1])); },
                                   {uniform(r, {2, 4, 4, 4}, -1, 1), uniform(r, {2, 4, 4, 4}, -1, 1)}, s);
                 }});
    c.push_back({m, "bmm", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 14);
                     return simple(
                         [](const std::vector<Tensor>& x) { return add(bmm(x[0], x[1], true), bmm(x[0], x[2])); },
                         {uniform(r, {2, 3, 4}, -1, 1), uniform(r, {2, 5, 4}, -1, 1), uniform(r, {2, 4, 5}, -1, 1)}, s);
                 }});
    c.push_back({m, "attention", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 23);
                     return simple([](const std::vector<Tensor>& x) { return attention(x[0], x[1], x[2], 0.7f); },
                                   {uniform(r, {2, 5, 3}, -1, 1), uniform(r, {2, 6, 3}, -1, 1), uniform(r, {2, 6, 4}, -1, 1)}, s);
                 }});
    c.push_back({m, "matmul", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 22);
                     return simple([](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); },
                                   {uniform(r, {3, 4}, -1, 1), uniform(r, {4, 5}, -1, 1)}, s);
                 }});
    c.push_back({m, "linear", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 15);
                     return simple([](const std::vector<Tensor>& x) { return linear(x[0], x[1], x[2]); },
                                   {uniform(r, {3, 5}, -1, 1), uniform(r, {4, 5}, -1, 1), uniform(r, {4}, -1, 1)}, s);
                 }});
    c.push_back({m, "pad_crop", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 16);
                     return simple(
                         [](const std::vector<Tensor>& x) {
                             const Tensor p = pad2d(x[0], 1, 2, 2, 1, PadMode::Reflect);
                             return add(crop2d(p, 1, 1, 5, 6), crop2d(pad2d(x[0], 1, 0, 0, 1), 0, 0, 5, 6));
                         },
                         {uniform(r, {1, 2, 5, 6}, -1, 1)}, s);
                 }});
    c.push_back({m, "concat_slice", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 17);
                     return simple(
                         [](const std::vector<Tensor>& x) {
                             const Tensor cat = concat_channels({x[0], x[1]});
                             return mul(slice_channels(cat, 1, 3), expand_channels(channel_mean(x[1]), 3));
                         },
                         {uniform(r, {2, 2, 3, 3}, -1, 1), uniform(r, {2, 3, 3, 3}, -1, 1)}, s);
                 }});
    c.push_back({m, "tokens", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 18);
                     return simple(
                         [](const std::vector<Tensor>& x) {
                             const Tensor t = to_tokens(x[0]);
                             return from_tokens(mul(t, t), 3, 4);
                         },
                         {uniform(r, {2, 3, 3, 4}, -1, 1)}, s);
                 }});
    c.push_back({m, "mix", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 19);
                     return simple(
                         [](const std::vector<Tensor>& x) { return mix({x[0], x[1], x[2]}, softmax_lastdim(x[3])); },
                         {uniform(r, {2, 2, 3, 3}, -1, 1), uniform(r, {2, 2, 3, 3}, -1, 1), uniform(r, {2, 2, 3, 3}, -1, 1),
                          uniform(r, {2, 3}, -1, 1)},
                         s);
                 }});
    c.push_back({m, "affine_mul_scalar", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 20);
                     return simple(
                         [](const std::vector<Tensor>& x) { return mul_scalar(affine(x[0], x[1], x[2]), x[1]); },
                         {uniform(r, {2, 1, 4, 4}, -1, 1), uniform(r, {1}, 0.5f, 2), uniform(r, {1}, -1, 1)}, s);
                 }});
    c.push_back({m, "filter2d_valid", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 21);
                     const auto& w = metrics::ssim_window();
                     return simple([&w](const std::vector<Tensor>& x) { return filter2d_valid(x[0], w, 11, 11); },
                                   {uniform(r, {1, 2, 13, 12}, -1, 1)}, s);
                 }});
    return c;
}

std::vector<Check> wavelet_checks() {
    std::vector<Check> c;
    const std::string m = "wavelet";
    auto analysis = [](const std::vector<Tensor>& x) {
        const auto b = wavelet::dwt2_haar(x[0]);
        return concat_channels({b.ll, b.lh, b.hl, b.hh});
    };
    c.push_back({m, "dwt2_haar", kOpTolerance, [analysis](std::uint64_t s) {
                     Rng r = make_rng(s, 30);
                     return simple(analysis, {uniform(r, {2, 3, 6, 8}, -1, 1)}, s);
                 }});
    c.push_back({m, "dwt2_haar_odd", kOpTolerance, [analysis](std::uint64_t s) {
                     Rng r = make_rng(s, 31);
                     return simple(analysis, {uniform(r, {1, 2, 5, 7}, -1, 1)}, s);
                 }});
    c.push_back({m, "idwt2_haar", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 32);
                     std::vector<Tensor> in;
                     for (int i = 0; i < 4; ++i) in.push_back(uniform(r, {2, 2, 3, 4}, -1, 1));
                     return simple(
                         [](const std::vector<Tensor>& x) { return wavelet::idwt2_haar({x[0], x[1], x[2], x[3], 6, 8}); }, in, s);
                 }});
    c.push_back({m, "idwt2_haar_odd", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 33);
                     std::vector<Tensor> in;
                     for (int i = 0; i < 4; ++i) in.push_back(uniform(r, {1, 2, 3, 4}, -1, 1));
                     return simple(
                         [](const std::vector<Tensor>& x) { return wavelet::idwt2_haar({x[0], x[1], x[2], x[3], 5, 7}); }, in, s);
                 }});
    return c;
}

std::vector<Check> arch_checks() {
    std::vector<Check> c;
    const std::string m = "arch";
    c.push_back({m, "edge_map", kOpTolerance, [](std::uint64_t s) {
                     return off_kink(s, 40, [](Rng& r) {
                         return Case{[](const std::vector<Tensor>& x) { return arch::edge_map(x[0], x[1], x[2]); },
                                     {uniform(r, {2, 3, 6, 6}, -1, 1), uniform(r, {1}, 0.5f, 2), uniform(r, {1}, -1, 1)}};
                     }, kEdgeEps);
                 }});
    c.push_back({m, "psf_fuse", kOpTolerance, [](std::uint64_t s) {
                     return off_kink(s, 41, [](Rng& r) {
                     const std::int64_t C = 8, D = 3;
                     std::vector<Tensor> in{uniform(r, {1, C, 4, 4}, -1, 1)};
                     for (int l = 0; l < 4; ++l) in.push_back(uniform(r, {1, D, 2 + l % 2, 2}, -1, 1));
                     in.push_back(uniform(r, {C / 4, C}, -1, 1));
                     in.push_back(off_zero(r, {C / 4}, 0.3f, 1));
                     in.push_back(uniform(r, {4, C / 4}, -2, 2));
                     in.push_back(uniform(r, {4}, -1, 1));
                     for (int l = 0; l < 4; ++l) push_conv(r, in, D, C, 1);
                     return Case{[](const std::vector<Tensor>& x) {
                                     arch::PsfParams p{x[5], x[6], x[7], x[8], {}};
                                     for (std::size_t l = 0; l < 4; ++l) p.phi.push_back(conv_at(x, 9 + 2 * l));
                                     return arch::psf_fuse(x[0], {x[1], x[2], x[3], x[4]}, p).fused;
                                 },
                                 in};
                     });
                 }});
    c.push_back({m, "drfb_inject", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 42);
                     const std::int64_t C = 4;
                     std::vector<Tensor> in{uniform(r, {1, C, 2, 2}, -1, 1), uniform(r, {1, C, 2, 2}, -1, 1)};
                     for (int i = 0; i < 3; ++i) push_conv(r, in, C, C, 1, 2.0f);
                     in.push_back(off_zero(r, {1}, 0.3f, 1));
                     return simple(
                         [](const std::vector<Tensor>& x) {
                             return arch::drfb_inject(x[0], x[1], {conv_at(x, 2), conv_at(x, 4), conv_at(x, 6), x[8]});
                         },
                         in, s);
                 }});
    c.push_back({m, "bfacg", kOpTolerance, [](std::uint64_t s) {
                     return off_kink(s, 43, [](Rng& r) {
                     const std::int64_t C = 3;
                     std::vector<Tensor> in{uniform(r, {1, C, 6, 6}, -1, 1)};
                     for (int i = 0; i < 4; ++i) push_conv(r, in, C, C, 3);
                     in.push_back(uniform(r, {1}, 0.5f, 2));
                     in.push_back(uniform(r, {1}, -1, 1));
                     return Case{[](const std::vector<Tensor>& x) {
                                     return arch::bfacg(x[0], {conv_at(x, 1), conv_at(x, 3), conv_at(x, 5), conv_at(x, 7),
                                                               x[9], x[10]});
                                 },
                                 in};
                     });
                 }});
    c.push_back({m, "sffb_filter", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 44);
                     std::vector<Tensor> in{uniform(r, {1, 3, 6, 8}, -1, 1)};
                     push_conv(r, in, 3, 3, 3);
                     return simple([](const std::vector<Tensor>& x) { return arch::sffb_filter(x[0], {conv_at(x, 1)}); }, in, s);
                 }});
    c.push_back({m, "sffb_filter_odd", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 45);
                     std::vector<Tensor> in{uniform(r, {1, 2, 5, 7}, -1, 1)};
                     push_conv(r, in, 2, 2, 3);
                     return simple([](const std::vector<Tensor>& x) { return arch::sffb_filter(x[0], {conv_at(x, 1)}); }, in, s);
                 }});
    c.push_back({m, "refiner_apply", kOpTolerance, [](std::uint64_t s) {
                     return off_kink(s, 46, [](Rng& r) {
                     std::vector<Tensor> in{uniform(r, {1, 3, 5, 5}, 0.3f, 0.7f)};
                     push_conv(r, in, 3, 4, 3);
                     push_conv(r, in, 4, 4, 3);
                     push_conv(r, in, 4, 4, 3);
                     push_conv(r, in, 4, 3, 3, 0.05f);
                     return Case{[](const std::vector<Tensor>& x) {
                                     arch::RefinerParams p;
                                     for (std::size_t i = 1; i < 9; i += 2) p.convs.push_back(conv_at(x, i));
                                     return arch::refiner_apply(x[0], p);
                                 },
                                 in};
                     });
                 }});
    return c;
}

std::vector<Check> metric_checks() {
    std::vector<Check> c;
    c.push_back({"metrics", "ssim", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 50);
                     return simple([](const std::vector<Tensor>& x) { return metrics::ssim_tensor(x[0], x[1]); },
                                   {uniform(r, {1, 2, 12, 13}, 0, 1), uniform(r, {1, 2, 12, 13}, 0, 1)}, s);
                 }});
    c.push_back({"train", "loss", kOpTolerance, [](std::uint64_t s) {
                     Rng r = make_rng(s, 51);
                     const Tensor y = uniform(r, {1, 3, 12, 12}, 0.2f, 0.8f);
                     Tensor yh = off_zero(r, {1, 3, 12, 12}, 0.01f, 0.05f);
                     for (std::size_t i = 0; i < yh.numel(); ++i) yh.mutable_ptr()[i] += y.ptr()[i];
                     return check_op([y](const std::vector<Tensor>& x) { return train::loss(x[0], y); }, {yh}, {0}, s);
                 }});
    return c;
}

// L1 loss of the full network w.r.t. a sampled 1% of its parameters.
double end_to_end(std::uint64_t s) {
    arch::ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    cfg.prior_dim = 8;
    cfg.seed = s;
    arch::Model model = arch::init_model(cfg);
    Rng r = make_rng(s, 60);
    for (auto& [name, p] : model.params.all()) {
        if (name.find("gamma") != std::string::npos) p.mutable_ptr()[0] = std::uniform_real_distribution<float>(0.3f, 1.0f)(r);
    }
    const Tensor image = uniform(r, {1, 3, 16, 16}, 0.25f, 0.75f);
    Tensor mat({1, 1, 16, 16}, std::vector<float>(256));
    for (std::int64_t y = 0; y < 16; ++y)
        for (std::int64_t x = 0; x < 16; ++x) mat.mutable_ptr()[y * 16 + x] = float((y / 8) * 2 + x / 8 + (s % 5) * 4);
    const prior::SyntheticPrior provider(s, cfg.prior_dim, 64);
    const prior::SemanticFeatureSet feats = provider.encode_materials(mat);

    // Target offset from the current prediction so no difference sits near the L1 kink.
    // The sign is fixed per channel so per-pixel terms do not cancel.
    Tensor gt = uniform(r, {1, 3, 16, 16}, 0.05f, 0.2f);
    {
        const Tensor y0 = arch::forward(model, image, &feats);
        for (std::size_t i = 0; i < gt.numel(); ++i) {
            const float sign = (i / 256) % 2 == 0 ? 1.0f : -1.0f;
            gt.mutable_ptr()[i] = y0.ptr()[i] + sign * gt.ptr()[i];
        }
    }
    auto objective = [&] { return mean(abs(sub(arch::forward(model, image, &feats), gt))); };
    // Same loss with the final reduction in double, for the difference quotients.
    auto objective64 = [&] {
        const Tensor y = arch::forward(model, image, &feats);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) acc += std::fabs(double(y.ptr()[i]) - double(gt.ptr()[i]));
        return acc / double(y.numel());
    };

    struct Slot {
        Tensor t;
        std::size_t i;
    };
    std::vector<Slot> slots;
    for (auto& [_, p] : model.params.all())
        for (std::size_t i = 0; i < p.numel(); ++i) slots.push_back({p, i});
    std::shuffle(slots.begin(), slots.end(), r);
    slots.resize(std::max<std::size_t>(1, slots.size() / 100));

    model.params.set_trainable_all(true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(objective());
    }
    std::vector<double> analytic, numeric;
    for (auto& sl : slots) analytic.push_back(sl.t.grad()[sl.i]);
    model.params.set_trainable_all(false);
    for (auto& sl : slots) {
        float* p = sl.t.mutable_ptr();
        const float orig = p[sl.i], hi = orig + kDefaultEps, lo = orig - kDefaultEps;
        p[sl.i] = hi;
        const double fp = objective64();
        p[sl.i] = lo;
        const double fm = objective64();
        p[sl.i] = orig;
        numeric.push_back((fp - fm) / (double(hi) - double(lo)));
    }
    return relative_error(analytic, numeric);
}

std::vector<Check> all_checks() {
    std::vector<Check> c;
    for (auto&& group : {tensor_checks(), wavelet_checks(), arch_checks(), metric_checks()})
        for (auto& k : group) c.push_back(k);
    c.push_back({"e2e", "forward_l1", kEndToEndTolerance, end_to_end});
    return c;
}

}  // namespace

std::vector<std::string> module_names() { return {"tensor", "wavelet", "arch", "metrics", "train", "e2e"}; }

std::vector<CheckResult> run_suite(const std::string& module, int seeds) {
    if (!module.empty()) {
        const auto names = module_names();
        if (std::find(names.begin(), names.end(), module) == names.end()) {
            fail(ErrorKind::Usage, "gradcheck: unknown module '" + module + "'");
        }
    }
    if (seeds < 1) fail(ErrorKind::Usage, "gradcheck: seeds must be >= 1");
    std::vector<CheckResult> out;
    for (const auto& chk : all_checks()) {
        if (!module.empty() && chk.module != module) continue;
        CheckResult r{chk.module, chk.name, seeds, 0.0, chk.tolerance};
        for (int s = 0; s < seeds; ++s) r.max_rel_error = std::max(r.max_rel_error, chk.run(static_cast<std::uint64_t>(s)));
        out.push_back(r);
    }
    return out;
}

std::string format_table(const std::vector<CheckResult>& results) {
    std::string out = "module    check                 seeds  max_rel_err  tol      status\n";
    char buf[160];
    for (const auto& r : results) {
        std::snprintf(buf, sizeof buf, "%-9s %-21s %5d  %.3e    %.0e    %s\n", r.module.c_str(), r.name.c_str(), r.seeds,
                      r.max_rel_error, r.tolerance, r.passed() ? "ok" : "FAIL");
        out += buf;
    }
    return out;
}

}  // namespace candle::gradcheck
