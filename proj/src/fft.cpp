#include "mrmotion/fft.hpp"

#include <cmath>

namespace mrmotion::fft {

namespace {

// Gather a strided line into a scratch buffer, transform, scatter back.
void transform_line(cplx* data, int64_t n, int64_t stride, bool inverse,
                    std::vector<cplx>& scratch) {
    cplx* buf = data;
    if (stride != 1) {
        scratch.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) scratch[static_cast<size_t>(i)] = data[i * stride];
        buf = scratch.data();
    }

    // bit-reversal permutation
    for (int64_t i = 1, j = 0; i < n; ++i) {
        int64_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(buf[i], buf[j]);
    }

    const double sign = inverse ? 1.0 : -1.0;
    for (int64_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * M_PI / static_cast<double>(len);
        const cplx wlen(std::cos(ang), std::sin(ang));
        for (int64_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (int64_t k = 0; k < len / 2; ++k) {
                cplx u = buf[i + k];
                cplx v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }

    if (inverse) {
        const double scale = 1.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) buf[i] *= scale;
    }

    if (stride != 1) {
        for (int64_t i = 0; i < n; ++i) data[i * stride] = scratch[static_cast<size_t>(i)];
    }
}

} // namespace

void transform_1d(cplx* data, int64_t n, int64_t stride, bool inverse) {
    if (!is_pow2(n)) throw ValidationError("fft: length must be a power of two, got " + std::to_string(n));
    std::vector<cplx> scratch;
    transform_line(data, n, stride, inverse, scratch);
}

void transform_2d(std::vector<cplx>& img, int64_t nx, int64_t ny, bool inverse) {
    if (!is_pow2(nx) || !is_pow2(ny))
        throw ValidationError("fft: dims must be powers of two");
    if (static_cast<int64_t>(img.size()) != nx * ny)
        throw ValidationError("fft: buffer size does not match dims");
    std::vector<cplx> scratch;
    for (int64_t y = 0; y < ny; ++y)
        transform_line(img.data() + y * nx, nx, 1, inverse, scratch);
    for (int64_t x = 0; x < nx; ++x)
        transform_line(img.data() + x, ny, nx, inverse, scratch);
}

void transform_3d(std::vector<cplx>& vol, int64_t nx, int64_t ny, int64_t nz,
                  bool inverse) {
    if (!is_pow2(nx) || !is_pow2(ny) || !is_pow2(nz))
        throw ValidationError("fft: dims must be powers of two");
    if (static_cast<int64_t>(vol.size()) != nx * ny * nz)
        throw ValidationError("fft: buffer size does not match dims");
    std::vector<cplx> scratch;
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            transform_line(vol.data() + (z * ny + y) * nx, nx, 1, inverse, scratch);
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t x = 0; x < nx; ++x)
            transform_line(vol.data() + z * ny * nx + x, ny, nx, inverse, scratch);
    for (int64_t y = 0; y < ny; ++y)
        for (int64_t x = 0; x < nx; ++x)
            transform_line(vol.data() + y * nx + x, nz, ny * nx, inverse, scratch);
}

} // namespace mrmotion::fft
