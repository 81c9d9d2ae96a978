#include "mrmotion/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace mrmotion {

void PhantomSpec::validate() const {
    auto check_dim = [](const char* name, int64_t d) {
        if (d < 16)
            throw ValidationError(std::string("phantom spec: dims.") + name +
                                  " must be >= 16, got " + std::to_string(d));
    };
    check_dim("nx", nx);
    check_dim("ny", ny);
    check_dim("nz", nz);
    if (!is_pow2(nx))
        throw ValidationError("phantom spec: dims.nx must be a power of two, got " +
                              std::to_string(nx));
    if (!is_pow2(ny))
        throw ValidationError("phantom spec: dims.ny must be a power of two, got " +
                              std::to_string(ny));
    if (sx <= 0 || sy <= 0 || sz <= 0)
        throw ValidationError("phantom spec: spacing components must be positive");
    if (n_structures < 0)
        throw ValidationError("phantom spec: n_structures must be >= 0");
    if (!(intensity_lo < intensity_hi) || intensity_lo < 0.0 || intensity_hi > 1.0)
        throw ValidationError("phantom spec: intensity_range must satisfy 0 <= lo < hi <= 1");
}

namespace {

struct Ellipsoid {
    double cx, cy, cz; // center, voxel coords
    double ax, ay, az; // semi-axes, voxels
    // squared normalized radius of point (x,y,z); <1 means inside
    double r2(double x, double y, double z) const {
        const double u = (x - cx) / ax;
        const double v = (y - cy) / ay;
        const double w = (z - cz) / az;
        return u * u + v * v + w * w;
    }
};

// separable Gaussian smoothing, sigma in voxels, truncated at radius 3*sigma,
// border handled by kernel renormalization
void gaussian_smooth_inplace(std::vector<float>& f, int64_t nx, int64_t ny, int64_t nz,
                             double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i)
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));

    std::vector<float> tmp(f.size());
    auto pass = [&](int axis) {
        const int64_t n[3] = {nx, ny, nz};
        const int64_t stride[3] = {1, nx, nx * ny};
        const int64_t len = n[axis];
        const int64_t s = stride[axis];
        // iterate over all lines along `axis`
        for (int64_t z = 0; z < (axis == 2 ? 1 : nz); ++z) {
            for (int64_t y = 0; y < (axis == 1 ? 1 : ny); ++y) {
                for (int64_t x = 0; x < (axis == 0 ? 1 : nx); ++x) {
                    const int64_t base = z * nx * ny + y * nx + x;
                    for (int64_t i = 0; i < len; ++i) {
                        double acc = 0.0, wsum = 0.0;
                        const int64_t j0 = std::max<int64_t>(0, i - radius);
                        const int64_t j1 = std::min<int64_t>(len - 1, i + radius);
                        for (int64_t j = j0; j <= j1; ++j) {
                            const double w = kernel[static_cast<size_t>(j - i + radius)];
                            acc += w * f[static_cast<size_t>(base + j * s)];
                            wsum += w;
                        }
                        tmp[static_cast<size_t>(base + i * s)] = static_cast<float>(acc / wsum);
                    }
                }
            }
        }
        f.swap(tmp);
    };
    pass(0);
    pass(1);
    pass(2);
}

} // namespace

Volume make_phantom(const PhantomSpec& spec) {
    spec.validate();
    Volume v = Volume::zeros(spec.nx, spec.ny, spec.nz, spec.sx, spec.sy, spec.sz);

    const double lo = spec.intensity_lo;
    const double hi = spec.intensity_hi;

    Ellipsoid outer{(spec.nx - 1) * 0.5, (spec.ny - 1) * 0.5, (spec.nz - 1) * 0.5,
                    0.45 * static_cast<double>(spec.nx - 1),
                    0.45 * static_cast<double>(spec.ny - 1),
                    0.45 * static_cast<double>(spec.nz - 1)};

    std::vector<Ellipsoid> structures;
    std::vector<double> amplitudes;
    structures.reserve(static_cast<size_t>(spec.n_structures));
    for (int s = 0; s < spec.n_structures; ++s) {
        Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(s)));
        Ellipsoid e;
        e.cx = outer.cx + rng.uniform(-0.55, 0.55) * outer.ax;
        e.cy = outer.cy + rng.uniform(-0.55, 0.55) * outer.ay;
        e.cz = outer.cz + rng.uniform(-0.55, 0.55) * outer.az;
        e.ax = rng.uniform(0.10, 0.35) * outer.ax;
        e.ay = rng.uniform(0.10, 0.35) * outer.ay;
        e.az = rng.uniform(0.10, 0.35) * outer.az;
        structures.push_back(e);
        // signed contrast relative to the base tissue level
        amplitudes.push_back(rng.uniform(-0.6, 1.0) * (hi - lo));
    }

    const double base = lo + 0.35 * (hi - lo);
    for (int64_t z = 0; z < spec.nz; ++z) {
        for (int64_t y = 0; y < spec.ny; ++y) {
            for (int64_t x = 0; x < spec.nx; ++x) {
                const double r2o = outer.r2(static_cast<double>(x), static_cast<double>(y),
                                            static_cast<double>(z));
                if (r2o >= 1.0) continue;
                // gentle radial gradient inside the head
                double val = base * (1.0 - 0.25 * r2o);
                for (size_t s = 0; s < structures.size(); ++s) {
                    const double r2 = structures[s].r2(static_cast<double>(x),
                                                       static_cast<double>(y),
                                                       static_cast<double>(z));
                    if (r2 < 1.0) {
                        const double fall = (1.0 - r2) * (1.0 - r2);
                        val += amplitudes[s] * fall;
                    }
                }
                v.at(x, y, z) = static_cast<float>(std::clamp(val, lo, hi));
            }
        }
    }

    gaussian_smooth_inplace(v.data, spec.nx, spec.ny, spec.nz, 1.0);

    // re-impose the exact-zero background and the [0,1] bound
    for (int64_t z = 0; z < spec.nz; ++z)
        for (int64_t y = 0; y < spec.ny; ++y)
            for (int64_t x = 0; x < spec.nx; ++x) {
                if (outer.r2(static_cast<double>(x), static_cast<double>(y),
                             static_cast<double>(z)) >= 1.0)
                    v.at(x, y, z) = 0.0f;
                else
                    v.at(x, y, z) = std::clamp(v.at(x, y, z), 0.0f, 1.0f);
            }
    return v;
}

Volume make_contrast_variant(const Volume& v, uint64_t seed) {
    v.validate();
    // strictly increasing piecewise-linear lookup on [0,1] with y(0) = 0
    constexpr int kKnots = 6;
    Rng rng(mix_seed(seed, 0xCEull));
    std::array<double, kKnots + 2> xs{};
    std::array<double, kKnots + 2> ys{};
    xs[0] = 0.0;
    xs[kKnots + 1] = 1.0;
    std::vector<double> interior(kKnots);
    for (auto& x : interior) x = rng.uniform(0.05, 0.95);
    std::sort(interior.begin(), interior.end());
    for (int i = 0; i < kKnots; ++i) xs[static_cast<size_t>(i + 1)] = interior[static_cast<size_t>(i)];
    for (size_t i = 1; i < xs.size(); ++i)
        xs[i] = std::max(xs[i], xs[i - 1] + 1e-6); // keep knots strictly increasing
    // strictly positive increments keep the map strictly monotone
    double total = 0.0;
    std::array<double, kKnots + 1> inc{};
    for (auto& d : inc) {
        d = rng.uniform(0.1, 1.0);
        total += d;
    }
    const double ymax = rng.uniform(0.85, 1.0);
    ys[0] = 0.0;
    for (int i = 0; i <= kKnots; ++i)
        ys[static_cast<size_t>(i + 1)] = ys[static_cast<size_t>(i)] + inc[static_cast<size_t>(i)] / total * ymax;

    Volume out = v;
    for (auto& f : out.data) {
        const double x = std::clamp(static_cast<double>(f), 0.0, 1.0);
        size_t k = 0;
        while (k + 1 < xs.size() - 1 && x > xs[k + 1]) ++k;
        const double t = (x - xs[k]) / (xs[k + 1] - xs[k]);
        f = static_cast<float>(ys[k] + t * (ys[k + 1] - ys[k]));
    }
    return out;
}

} // namespace mrmotion
