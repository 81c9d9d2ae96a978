#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "mrmotion/volume.hpp"

namespace mrmotion {

// Rigid-body state: rotations in degrees, translations in millimeters.
// 2D (line-wise) corruption uses (rot_z, tx, ty); 3D uses all six.
struct MotionState {
    std::array<double, 3> rot_deg{0.0, 0.0, 0.0};
    std::array<double, 3> trans_mm{0.0, 0.0, 0.0};

    bool is_zero() const {
        return rot_deg[0] == 0 && rot_deg[1] == 0 && rot_deg[2] == 0 &&
               trans_mm[0] == 0 && trans_mm[1] == 0 && trans_mm[2] == 0;
    }
    bool operator==(const MotionState& o) const {
        return rot_deg == o.rot_deg && trans_mm == o.trans_mm;
    }
};

enum class Ordering {
    Lines2D,  // one state per ky line, ky ascending (signed frequency)
    Points3D, // one state per (ky,kz) point, ky inner ascending, kz outer
};

struct MotionTrajectory {
    Ordering ordering = Ordering::Lines2D;
    std::vector<MotionState> states;

    bool all_zero() const {
        for (const auto& s : states)
            if (!s.is_zero()) return false;
        return true;
    }
};

// Named bound set producing a qualitative corruption level. Peaks are
// contiguous constant-state intervals; mild/moderate keep the DC region of
// k-space untouched, severe may hit it.
struct SeverityPreset {
    std::string name;
    int max_peaks = 0;
    double rot_limit_deg = 0.0;
    double trans_limit_mm = 0.0;
    bool allow_dc = false;

    void validate() const;
};

SeverityPreset preset_mild();     // 2 peaks, 2 deg, 2 mm, DC excluded
SeverityPreset preset_moderate(); // 4 peaks, 4 deg, 4 mm, DC excluded
SeverityPreset preset_severe();   // 8 peaks, 7 deg, 7 mm, DC allowed
SeverityPreset preset_by_name(const std::string& name);

// Deterministic in (seed, n_pe, preset). Zero motion everywhere except
// 1..max_peaks contiguous peak intervals with constant uniformly drawn
// states; interval lengths are 2%..15% of n_pe. Later peaks overwrite
// earlier ones where intervals overlap.
MotionTrajectory generate_trajectory(uint64_t seed, int64_t n_pe,
                                     const SeverityPreset& preset,
                                     Ordering ordering = Ordering::Lines2D);

// .mtraj persistence (JSON) for exact replay.
void save_trajectory(const MotionTrajectory& t, const std::string& path);
MotionTrajectory load_trajectory(const std::string& path);

// Rotation about the image center, bilinear interpolation, zero fill.
Slice2D rotate_image_2d(const Slice2D& img, double rho_z_deg);

// Full 3D rotation (Rz*Ry*Rx about the volume center), trilinear, zero fill.
Volume rotate_volume_3d(const Volume& v, const std::array<double, 3>& rot_deg);

// Fourier shift-theorem factor exp(-i*2pi*(kx*dx/nx + ky*dy/ny)) for signed
// frequency indices; magnitude exactly 1.
std::complex<double> translation_phase(int64_t kx, int64_t ky, int64_t nx,
                                       int64_t ny, double dx_px, double dy_px);
std::complex<double> translation_phase_3d(int64_t kx, int64_t ky, int64_t kz,
                                          int64_t nx, int64_t ny, int64_t nz,
                                          double dx_px, double dy_px, double dz_px);

// Line-wise k-space corruption of one slice (Lines2D trajectory, one state
// per ky line). Rotation happens in the image domain, translation as linear
// phase in k-space; the per-line copy is the sampling operator. pe_only
// restricts the phase ramp to the phase-encode (y) axis.
Slice2D corrupt_slice(const Slice2D& clean, const MotionTrajectory& traj,
                      double sx, double sy, bool pe_only = false);

// Point-wise 3D variant (Points3D trajectory, one state per (ky,kz)).
Volume corrupt_volume(const Volume& clean, const MotionTrajectory& traj,
                      bool pe_only = false);

struct CorruptedSubject {
    Volume volume;
    std::vector<MotionTrajectory> slice_trajectories; // one per z slice
};

// Applies corrupt_slice to every z slice with child seeds mixed from
// (seed, z); deterministic regardless of execution order.
CorruptedSubject corrupt_subject(const Volume& clean, uint64_t seed,
                                 const SeverityPreset& preset,
                                 bool pe_only = false);

} // namespace mrmotion
