#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mrmotion/common.hpp"

namespace mrmotion {

// A single 2D slice, row-major, x fastest.
struct Slice2D {
    int64_t nx = 0;
    int64_t ny = 0;
    std::vector<float> data;

    float at(int64_t x, int64_t y) const { return data[static_cast<size_t>(y * nx + x)]; }
    float& at(int64_t x, int64_t y) { return data[static_cast<size_t>(y * nx + x)]; }
    int64_t numel() const { return nx * ny; }
};

// 3D scalar image with spacing metadata. Data is row-major with x fastest,
// z slowest; values are 32-bit IEEE floats.
struct Volume {
    int64_t nx = 0, ny = 0, nz = 0;
    double sx = 1.0, sy = 1.0, sz = 1.0;
    std::vector<float> data;

    static Volume zeros(int64_t nx, int64_t ny, int64_t nz,
                        double sx = 1.0, double sy = 1.0, double sz = 1.0);

    int64_t numel() const { return nx * ny * nz; }
    float at(int64_t x, int64_t y, int64_t z) const {
        return data[static_cast<size_t>((z * ny + y) * nx + x)];
    }
    float& at(int64_t x, int64_t y, int64_t z) {
        return data[static_cast<size_t>((z * ny + y) * nx + x)];
    }

    Slice2D slice(int64_t z) const;
    void set_slice(int64_t z, const Slice2D& s);

    // Throws ValidationError if dims/data are inconsistent or values non-finite.
    void validate() const;
};

// The network's multi-input: center slice plus its adjacent-slice priors and
// an optional extra prior of the same geometry.
struct SliceTriplet {
    Slice2D prev;
    Slice2D center;
    Slice2D next;
    std::optional<Slice2D> extra_prior;
    int64_t slice_index = 0;
    std::string subject_id;
};

// ---- volume_io operations ----

// .mvol container: magic "MVOL0001", u32 LE header length, JSON header
// {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32le"}, then the raw
// little-endian f32 blob. Round-trip is bit-exact.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);

// Clip to [P(p_lo), P(p_hi)] percentiles then map affinely to [0,1].
// Constant volumes (or a degenerate percentile window) map to all-zeros.
Volume normalize_volume(const Volume& v, double p_lo = 0.5, double p_hi = 99.5);

// Percentile of the voxel distribution with linear interpolation between
// order statistics. Exposed for tests.
double volume_percentile(const Volume& v, double p);

// Assemble (prev, center, next) with edge slices repeated at the boundary;
// extra, when given, contributes its slice i as extra_prior.
SliceTriplet extract_triplet(const Volume& v, int64_t i,
                             const Volume* extra = nullptr);

} // namespace mrmotion
