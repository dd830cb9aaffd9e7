#pragma once

#include "candle/tensor.hpp"

namespace candle::wavelet {

/// One level of orthonormal 2-D Haar analysis. Each band is [N,C,ceil(H/2),ceil(W/2)].
/// LH carries vertical detail (top rows minus bottom rows), HL horizontal
/// detail (left minus right), HH the diagonal.
struct Subbands {
    Tensor ll, lh, hl, hh;
    // Extent of the analysed input; odd extents were reflect-padded by one.
    std::int64_t height = 0;
    std::int64_t width = 0;
};

Subbands dwt2_haar(const Tensor& x);

// Exact inverse of dwt2_haar, cropped back to (s.height, s.width). When the
// extent is unset it defaults to twice the band extent.
Tensor idwt2_haar(const Subbands& s);

}  // namespace candle::wavelet
