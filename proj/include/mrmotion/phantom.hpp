#pragma once

#include <cstdint>

#include "mrmotion/volume.hpp"

namespace mrmotion {

// Recipe for a deterministic synthetic brain-like volume: a large outer
// ellipsoid with n randomly placed interior ellipsoids, lightly smoothed so
// windowed similarity metrics see local structure.
struct PhantomSpec {
    uint64_t seed = 0;
    int64_t nx = 64, ny = 64, nz = 32;
    double sx = 1.0, sy = 1.0, sz = 1.0;
    int n_structures = 6;
    double intensity_lo = 0.1;
    double intensity_hi = 0.9;

    void validate() const;
};

// Pure function of the spec: bit-identical across runs and thread schedules.
// Background outside the outer ellipsoid is exactly 0; all values in [0,1].
Volume make_phantom(const PhantomSpec& spec);

// Monotone nonlinear intensity remap (seeded piecewise-linear lookup) used as
// a synthetic stand-in for a contrast-enhanced scan of the same subject.
// Preserves the zero background exactly and the ordering of intensities.
Volume make_contrast_variant(const Volume& v, uint64_t seed);

} // namespace mrmotion
