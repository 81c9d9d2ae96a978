#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "mrmotion/common.hpp"

namespace mrmotion::fft {

using cplx = std::complex<double>;

// In-place radix-2 Cooley-Tukey on contiguous data with the given stride.
// n must be a power of two. Forward uses exp(-i...), inverse exp(+i...) and
// scales by 1/n, so forward followed by inverse is the identity.
void transform_1d(cplx* data, int64_t n, int64_t stride, bool inverse);

// 2D transform of an ny-by-nx image stored row-major, x fastest.
void transform_2d(std::vector<cplx>& img, int64_t nx, int64_t ny, bool inverse);

// 3D transform, x fastest, z slowest.
void transform_3d(std::vector<cplx>& vol, int64_t nx, int64_t ny, int64_t nz,
                  bool inverse);

// DFT index -> signed frequency in [-n/2, n/2).
inline int64_t signed_freq(int64_t idx, int64_t n) {
    return idx < n / 2 ? idx : idx - n;
}

// Signed frequency -> DFT index.
inline int64_t freq_index(int64_t k, int64_t n) { return (k % n + n) % n; }

} // namespace mrmotion::fft
