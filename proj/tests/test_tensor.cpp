#include <doctest.h>

#include <cmath>

#include "candle/gradcheck.hpp"
#include "candle/ops.hpp"
#include "support.hpp"

using namespace candle;
using candle::test::random_tensor;

namespace {

Tensor t(Shape s, std::vector<float> v) { return Tensor(std::move(s), std::move(v)); }

}  // namespace

TEST_CASE("tensor: shape and element access") {
    const Tensor x = t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(x.numel() == 6);
    CHECK(x.dim(-1) == 3);
    CHECK(x.at({1, 2}) == 6.0f);
    CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), Error);
    CHECK_THROWS_AS(t({2}, {1, 2}).item(), Error);
    CHECK(Tensor::scalar(3.5f).item() == 3.5f);
    Tensor c = x.clone();
    c.mutable_ptr()[0] = 9.0f;
    CHECK(x.ptr()[0] == 1.0f);
}

TEST_CASE("conv2d: identity 1x1 kernel") {
    const Tensor x = random_tensor(1, {1, 1, 3, 3});
    const Tensor y = conv2d(x, t({1, 1, 1, 1}, {1}), t({1}, {0}), 1, 0);
    CHECK(max_abs_diff(x, y) == 0.0f);
}

TEST_CASE("conv2d: 2x2 ones kernel sums the block") {
    const Tensor y = conv2d(t({1, 1, 2, 2}, {1, 2, 3, 4}), Tensor::full({1, 1, 2, 2}, 1.0f), t({1}, {0}), 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 10.0f);
}

TEST_CASE("conv2d: output extent and errors") {
    const Tensor x = random_tensor(2, {2, 3, 7, 8});
    const Tensor w = random_tensor(3, {4, 3, 3, 3});
    const Tensor b = random_tensor(4, {4});
    CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{2, 4, 4, 4});
    CHECK_THROWS_AS(conv2d(x, random_tensor(5, {4, 2, 3, 3}), b, 1, 1), Error);
    CHECK_THROWS_AS(conv2d(x, w, b, 0, 1), Error);
    try {
        conv2d(x, random_tensor(5, {4, 2, 3, 3}), b, 1, 1);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Shape);
    }
}

TEST_CASE("conv2d: weight gradient of sum matches finite differences") {
    const Tensor x = random_tensor(6, {1, 2, 5, 5});
    Tensor w = random_tensor(7, {3, 2, 3, 3});
    const Tensor b = random_tensor(8, {3});
    const auto err = gradcheck::check_op([](const std::vector<Tensor>& in) { return sum(conv2d(in[0], in[1], in[2], 1, 1)); },
                                         {x, w, b}, {1}, 11);
    CHECK(err <= gradcheck::kOpTolerance);
}

TEST_CASE("softmax_lastdim: closed forms and stability") {
    Tensor y = softmax_lastdim(t({2}, {0, 0}));
    CHECK(y.ptr()[0] == doctest::Approx(0.5).epsilon(1e-7));
    y = softmax_lastdim(t({2}, {std::log(2.0f), 0}));
    CHECK(y.ptr()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
    CHECK(y.ptr()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    y = softmax_lastdim(t({2}, {1000, 0}));
    CHECK(y.ptr()[0] == 1.0f);
    CHECK(y.ptr()[1] >= 0.0f);
    CHECK(y.ptr()[1] < 1e-30f);
    CHECK_THROWS_AS(softmax_lastdim(t({2}, {NAN, 0})), Error);
    CHECK_THROWS_AS(softmax_lastdim(t({2}, {INFINITY, 0})), Error);
}

TEST_CASE("softmax_lastdim: rows on the simplex for random inputs") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const Tensor y = softmax_lastdim(random_tensor(s, {3, 7}, -30, 30));
        for (int r = 0; r < 3; ++r) {
            double acc = 0.0;
            for (int c = 0; c < 7; ++c) {
                CHECK(y.at({r, c}) >= 0.0f);
                acc += y.at({r, c});
            }
            CHECK(std::fabs(acc - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("bilinear_resize: identity, constants, hand case") {
    const Tensor x = random_tensor(9, {1, 2, 5, 6});
    CHECK(max_abs_diff(bilinear_resize(x, 5, 6), x) <= 1e-6f);
    const Tensor c = bilinear_resize(Tensor::full({1, 1, 3, 4}, 0.3f), 7, 2);
    for (float v : c.data()) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));
    const Tensor h = bilinear_resize(t({1, 1, 2, 2}, {0, 1, 0, 1}), 2, 4);
    const float expect[4] = {0.0f, 0.25f, 0.75f, 1.0f};
    for (int r = 0; r < 2; ++r)
        for (int j = 0; j < 4; ++j) CHECK(h.at({0, 0, r, j}) == doctest::Approx(expect[j]).epsilon(1e-6));
}

TEST_CASE("global_avg_pool: constant and hand case") {
    CHECK(global_avg_pool(Tensor::full({1, 2, 3, 3}, 1.5f)).at({0, 1}) == doctest::Approx(1.5f));
    CHECK(global_avg_pool(t({1, 1, 2, 2}, {1, 2, 3, 4})).item() == doctest::Approx(2.5f));
}

TEST_CASE("backward: sum, square, accumulation") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = random_tensor(10, {2, 3});
    x.set_requires_grad(true);
    const Tensor l = sum(x);
    tape.backward(l);
    for (float g : x.grad()) CHECK(g == 1.0f);
    tape.backward(l);
    for (float g : x.grad()) CHECK(g == 2.0f);

    Tape tape2;
    TapeScope scope2(tape2);
    Tensor y = t({1}, {3});
    y.set_requires_grad(true);
    tape2.backward(sum(mul(y, y)));
    CHECK(y.grad()[0] == 6.0f);
    CHECK_THROWS_AS(tape2.backward(t({2}, {1, 2})), Error);
}

TEST_CASE("backward: a loss that touches no parameter leaves grads zero") {
    Tape tape;
    TapeScope scope(tape);
    Tensor p = random_tensor(11, {4});
    p.set_requires_grad(true);
    Tensor q = random_tensor(12, {4});
    q.set_requires_grad(true);
    const Tensor unrelated = sum(mul(p, p));
    (void)unrelated;
    tape.backward(sum(mul(q, q)));
    for (float g : p.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward: order is exact reverse of execution and clear frees nodes") {
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor x = random_tensor(13, {3});
        x.set_requires_grad(true);
        const Tensor y = sigmoid(scale(x, 2.0f));
        const Tensor z = sum(mul(y, y));
        CHECK(tape.size() == 4);
        tape.backward(z);
        for (std::size_t i = 0; i < 3; ++i) {
            const float s = 1.0f / (1.0f + std::exp(-2.0f * x.ptr()[i]));
            CHECK(x.grad()[i] == doctest::Approx(2.0f * s * s * (1.0f - s) * 2.0f).epsilon(1e-5));
        }
    }
    tape.clear();
    CHECK(tape.empty());
    CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0f)), Error);
}

TEST_CASE("ops outside a tape record nothing") {
    Tensor x = random_tensor(14, {3});
    x.set_requires_grad(true);
    const Tensor y = sum(mul(x, x));
    CHECK(active_tape() == nullptr);
    CHECK_THROWS_AS(backward(y), Error);
}

TEST_CASE("finite_difference_gradient: sum, squares, conv stack") {
    const Tensor x = random_tensor(15, {2, 3});
    const Tensor g = gradcheck::finite_difference_gradient([](const Tensor& v) { return sum(v); }, x);
    for (float v : g.data()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-4));
    const Tensor g2 = gradcheck::finite_difference_gradient([](const Tensor& v) { return sum(mul(v, v)); }, t({1}, {2}));
    CHECK(g2.item() == doctest::Approx(4.0f).epsilon(1e-3));
    CHECK_THROWS_AS(gradcheck::finite_difference_gradient([](const Tensor& v) { return v; }, x), Error);
    CHECK_THROWS_AS(gradcheck::finite_difference_gradient([](const Tensor& v) { return sum(v); }, x, 0.0f), Error);

    // Two conv layers: backward vs finite differences of the input.
    const Tensor w1 = random_tensor(16, {3, 2, 3, 3}, -0.4f, 0.4f), b1 = random_tensor(17, {3}, -0.1f, 0.1f);
    const Tensor w2 = random_tensor(18, {2, 3, 3, 3}, -0.4f, 0.4f), b2 = random_tensor(19, {2}, -0.1f, 0.1f);
    const Tensor wproj = random_tensor(20, {1, 2, 6, 6});
    auto f = [&](const Tensor& in) { return sum(mul(conv2d(sigmoid(conv2d(in, w1, b1, 1, 1)), w2, b2, 1, 1), wproj)); };
    Tensor xin = random_tensor(21, {1, 2, 6, 6});
    const Tensor numeric = gradcheck::finite_difference_gradient(f, xin);
    Tape tape;
    {
        TapeScope scope(tape);
        xin.set_requires_grad(true);
        tape.backward(f(xin));
    }
    std::vector<double> a(xin.grad().begin(), xin.grad().end()), n(numeric.data().begin(), numeric.data().end());
    CHECK(gradcheck::relative_error(a, n) <= 1e-3);
}

TEST_CASE("clip: values and straight-through gradient inside the range") {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = t({4}, {-0.5f, 0.2f, 0.9f, 1.5f});
    x.set_requires_grad(true);
    const Tensor y = clip(x, 0.0f, 1.0f);
    CHECK(y.ptr()[0] == 0.0f);
    CHECK(y.ptr()[3] == 1.0f);
    tape.backward(sum(y));
    CHECK(x.grad()[0] == 0.0f);
    CHECK(x.grad()[1] == 1.0f);
    CHECK(x.grad()[2] == 1.0f);
    CHECK(x.grad()[3] == 0.0f);
}

TEST_CASE("elementwise plumbing values") {
    const Tensor a = t({3}, {1, -2, 3}), b = t({3}, {4, 5, -6});
    CHECK(add(a, b).ptr()[2] == -3.0f);
    CHECK(sub(a, b).ptr()[1] == -7.0f);
    CHECK(mul(a, b).ptr()[0] == 4.0f);
    CHECK(relu(a).ptr()[1] == 0.0f);
    CHECK(abs(a).ptr()[1] == 2.0f);
    CHECK(mean(a).item() == doctest::Approx(2.0f / 3.0f));
    CHECK(matmul(t({1, 2}, {1, 2}), t({2, 1}, {3, 4})).item() == 11.0f);
    CHECK_THROWS_AS(add(a, t({2}, {1, 2})), Error);
    const Tensor cat = concat_channels({Tensor::full({1, 1, 2, 2}, 1.0f), Tensor::full({1, 2, 2, 2}, 2.0f)});
    CHECK(cat.shape() == Shape{1, 3, 2, 2});
    CHECK(slice_channels(cat, 1, 2).at({0, 1, 1, 1}) == 2.0f);
    const Tensor p = pad2d(t({1, 1, 1, 3}, {1, 2, 3}), 0, 0, 2, 2, PadMode::Reflect);
    const float ref[7] = {3, 2, 1, 2, 3, 2, 1};
    for (int i = 0; i < 7; ++i) CHECK(p.ptr()[i] == ref[i]);
    const Tensor r = pad2d(t({1, 1, 1, 2}, {1, 2}), 0, 0, 1, 1, PadMode::Replicate);
    CHECK(r.ptr()[0] == 1.0f);
    CHECK(r.ptr()[3] == 2.0f);
    CHECK(max_abs_diff(crop2d(p, 0, 2, 1, 3), t({1, 1, 1, 3}, {1, 2, 3})) == 0.0f);
}

TEST_CASE("leaky_relu: values and slope gradient") {
    const Tensor x = Tensor({4}, {-2.0f, -0.5f, 0.5f, 3.0f}).set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = leaky_relu(x, 0.1f);
    CHECK(y.at({0}) == doctest::Approx(-0.2f));
    CHECK(y.at({3}) == 3.0f);
    tape.backward(sum(y));
    const Tensor g = x.grad_tensor();
    CHECK(g.at({1}) == doctest::Approx(0.1f));
    CHECK(g.at({2}) == 1.0f);
}

TEST_CASE("attention matches the unfused composition") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Tensor q = random_tensor(100 + s, {2, 7, 4}), k = random_tensor(200 + s, {2, 5, 4}), v = random_tensor(300 + s, {2, 5, 3});
        const Tensor fused = attention(q, k, v, 0.5f);
        const Tensor ref = bmm(softmax_lastdim(scale(bmm(q, k, true), 0.5f)), v);
        CHECK(max_abs_diff(fused, ref) <= 1e-6f);
    }
}

TEST_CASE("gradcheck suite: tensor module") {
    for (const auto& r : gradcheck::run_suite("tensor", 20)) {
        INFO(r.name << " " << r.max_rel_error);
        CHECK(r.passed());
    }
}
