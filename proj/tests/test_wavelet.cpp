#include <doctest.h>

#include <cmath>

#include "candle/gradcheck.hpp"
#include "candle/ops.hpp"
#include "candle/wavelet.hpp"
#include "support.hpp"

using namespace candle;
using candle::test::random_tensor;

namespace {

double energy(const wavelet::Subbands& b) {
    return double(sum_of_squares(b.ll)) + sum_of_squares(b.lh) + sum_of_squares(b.hl) + sum_of_squares(b.hh);
}

}  // namespace

TEST_CASE("dwt2_haar: hand block") {
    const auto b = wavelet::dwt2_haar(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(b.ll.item() == 5.0f);
    CHECK(b.lh.item() == -2.0f);
    CHECK(b.hl.item() == -1.0f);
    CHECK(b.hh.item() == 0.0f);
    CHECK(energy(b) == 30.0);
}

TEST_CASE("dwt2_haar: constant input has no detail") {
    const auto b = wavelet::dwt2_haar(Tensor::full({2, 3, 4, 6}, 0.7f));
    CHECK(b.ll.shape() == Shape{2, 3, 2, 3});
    for (float v : b.ll.data()) CHECK(v == doctest::Approx(1.4f));
    for (const Tensor* d : {&b.lh, &b.hl, &b.hh})
        for (float v : d->data()) CHECK(v == 0.0f);
}

TEST_CASE("idwt2_haar: hand inverse and zeros") {
    wavelet::Subbands s{Tensor({1, 1, 1, 1}, {5}), Tensor({1, 1, 1, 1}, {-2}), Tensor({1, 1, 1, 1}, {-1}),
                        Tensor({1, 1, 1, 1}, {0}), 2, 2};
    const Tensor x = wavelet::idwt2_haar(s);
    const float ref[4] = {1, 2, 3, 4};
    for (int i = 0; i < 4; ++i) CHECK(x.ptr()[i] == ref[i]);
    const Tensor z = Tensor::zeros({1, 2, 3, 3});
    const Tensor zero = wavelet::idwt2_haar({z, z, z, z, 6, 6});
    for (float v : zero.data()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(wavelet::idwt2_haar({z, z, Tensor::zeros({1, 2, 3, 2}), z, 6, 6}), Error);
}

TEST_CASE("haar: round trip, linearity, Parseval on 50 random tensors") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const std::int64_t H = 2 + static_cast<std::int64_t>(s % 7), W = 3 + static_cast<std::int64_t>((s * 5) % 8);
        const Tensor x = random_tensor(s, {2, 3, H, W});
        const Tensor y = random_tensor(s + 1000, {2, 3, H, W});
        const auto bx = wavelet::dwt2_haar(x);
        CHECK(max_abs_diff(wavelet::idwt2_haar(bx), x) <= 1e-5f);

        const float a = 0.3f + 0.1f * float(s % 5), c = -1.2f + 0.05f * float(s % 3);
        const auto bz = wavelet::dwt2_haar(add(scale(x, a), scale(y, c)));
        const auto by = wavelet::dwt2_haar(y);
        CHECK(max_abs_diff(bz.ll, add(scale(bx.ll, a), scale(by.ll, c))) <= 1e-5f);
        CHECK(max_abs_diff(bz.hh, add(scale(bx.hh, a), scale(by.hh, c))) <= 1e-5f);

        // Odd extents are reflect-padded, so energy is conserved for the padded signal.
        const Tensor padded = pad2d(x, 0, int(H % 2), 0, int(W % 2), PadMode::Reflect);
        const double e_in = sum_of_squares(padded);
        CHECK(std::fabs(energy(bx) - e_in) / e_in <= 1e-5);
    }
}

TEST_CASE("haar: odd extents keep their shape") {
    const Tensor x = random_tensor(3, {1, 2, 5, 7});
    const auto b = wavelet::dwt2_haar(x);
    CHECK(b.ll.shape() == Shape{1, 2, 3, 4});
    CHECK(b.height == 5);
    CHECK(b.width == 7);
    CHECK(wavelet::idwt2_haar(b).shape() == x.shape());
}

TEST_CASE("gradcheck suite: wavelet module") {
    for (const auto& r : gradcheck::run_suite("wavelet", 20)) {
        INFO(r.name << " " << r.max_rel_error);
        CHECK(r.passed());
    }
}
