#include "mrmotion/motion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mrmotion/fft.hpp"

namespace mrmotion {

void SeverityPreset::validate() const {
    if (max_peaks < 0) throw ValidationError("preset: max_peaks must be >= 0");
    if (rot_limit_deg < 0 || rot_limit_deg > 7.0)
        throw ValidationError("preset: rot_limit_deg must be in [0,7]");
    if (trans_limit_mm < 0 || trans_limit_mm > 7.0)
        throw ValidationError("preset: trans_limit_mm must be in [0,7]");
}

SeverityPreset preset_mild() { return {"mild", 2, 2.0, 2.0, false}; }
SeverityPreset preset_moderate() { return {"moderate", 4, 4.0, 4.0, false}; }
SeverityPreset preset_severe() { return {"severe", 8, 7.0, 7.0, true}; }

SeverityPreset preset_by_name(const std::string& name) {
    if (name == "mild") return preset_mild();
    if (name == "moderate") return preset_moderate();
    if (name == "severe") return preset_severe();
    throw ValidationError("unknown severity preset: " + name);
}

MotionTrajectory generate_trajectory(uint64_t seed, int64_t n_pe,
                                     const SeverityPreset& preset,
                                     Ordering ordering) {
    preset.validate();
    if (n_pe < 4) throw ValidationError("generate_trajectory: n_pe must be >= 4");

    MotionTrajectory traj;
    traj.ordering = ordering;
    traj.states.assign(static_cast<size_t>(n_pe), MotionState{});
    if (preset.max_peaks == 0) return traj;

    Rng rng(mix_seed(seed, 0x7261ull));
    const int n_peaks = 1 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(preset.max_peaks)));

    // DC region: middle 4% of acquisition units, centered on n_pe/2
    const int64_t center = n_pe / 2;
    const int64_t halfwidth = std::max<int64_t>(1, static_cast<int64_t>(std::llround(0.02 * static_cast<double>(n_pe))));
    const int64_t dc_lo = center - halfwidth;
    const int64_t dc_hi = center + halfwidth; // inclusive

    for (int p = 0; p < n_peaks; ++p) {
        const int64_t len = std::max<int64_t>(
            1, static_cast<int64_t>(std::llround(rng.uniform(0.02, 0.15) * static_cast<double>(n_pe))));

        int64_t start;
        if (preset.allow_dc) {
            start = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n_pe - len + 1)));
        } else {
            // sample directly from the allowed placements on either side of DC
            const int64_t n_left = std::max<int64_t>(0, dc_lo - len + 1); // start in [0, dc_lo-len]
            const int64_t n_right = std::max<int64_t>(0, n_pe - len - dc_hi); // start in [dc_hi+1, n_pe-len]
            const int64_t total = n_left + n_right;
            if (total == 0) continue; // no room for this peak
            const int64_t u = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(total)));
            start = u < n_left ? u : dc_hi + 1 + (u - n_left);
        }

        MotionState st;
        for (int a = 0; a < 3; ++a)
            st.rot_deg[static_cast<size_t>(a)] = rng.uniform(-preset.rot_limit_deg, preset.rot_limit_deg);
        for (int a = 0; a < 3; ++a)
            st.trans_mm[static_cast<size_t>(a)] = rng.uniform(-preset.trans_limit_mm, preset.trans_limit_mm);

        for (int64_t i = start; i < start + len && i < n_pe; ++i)
            traj.states[static_cast<size_t>(i)] = st;
    }
    return traj;
}

void save_trajectory(const MotionTrajectory& t, const std::string& path) {
    nlohmann::json j;
    j["ordering"] = t.ordering == Ordering::Lines2D ? "lines2d" : "points3d";
    auto& arr = j["states"] = nlohmann::json::array();
    for (const auto& s : t.states)
        arr.push_back({{"rot_deg", {s.rot_deg[0], s.rot_deg[1], s.rot_deg[2]}},
                       {"trans_mm", {s.trans_mm[0], s.trans_mm[1], s.trans_mm[2]}}});
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << j.dump(2) << "\n";
    if (!f) throw IoError("write failed: " + path);
}

MotionTrajectory load_trajectory(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError("trajectory parse error in " + path + ": " + e.what());
    }
    MotionTrajectory t;
    try {
        const std::string ord = j.at("ordering").get<std::string>();
        if (ord == "lines2d")
            t.ordering = Ordering::Lines2D;
        else if (ord == "points3d")
            t.ordering = Ordering::Points3D;
        else
            throw IoError("unknown ordering '" + ord + "' in " + path);
        for (const auto& e : j.at("states")) {
            MotionState s;
            for (int a = 0; a < 3; ++a) {
                s.rot_deg[static_cast<size_t>(a)] = e.at("rot_deg").at(a).get<double>();
                s.trans_mm[static_cast<size_t>(a)] = e.at("trans_mm").at(a).get<double>();
            }
            t.states.push_back(s);
        }
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("malformed trajectory in " + path + ": " + e.what());
    }
    return t;
}

Slice2D rotate_image_2d(const Slice2D& img, double rho_z_deg) {
    if (rho_z_deg == 0.0) return img;
    const int64_t nx = img.nx, ny = img.ny;
    Slice2D out;
    out.nx = nx;
    out.ny = ny;
    out.data.assign(static_cast<size_t>(nx * ny), 0.0f);

    const double theta = rho_z_deg * M_PI / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    const double cx = (static_cast<double>(nx) - 1.0) * 0.5;
    const double cy = (static_cast<double>(ny) - 1.0) * 0.5;

    for (int64_t y = 0; y < ny; ++y) {
        for (int64_t x = 0; x < nx; ++x) {
            // inverse map: source = R(-theta) * (p - c) + c
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double sx = c * dx + s * dy + cx;
            const double sy = -s * dx + c * dy + cy;
            const int64_t x0 = static_cast<int64_t>(std::floor(sx));
            const int64_t y0 = static_cast<int64_t>(std::floor(sy));
            const double fx = sx - static_cast<double>(x0);
            const double fy = sy - static_cast<double>(y0);
            double acc = 0.0;
            for (int dyi = 0; dyi <= 1; ++dyi) {
                for (int dxi = 0; dxi <= 1; ++dxi) {
                    const int64_t xi = x0 + dxi, yi = y0 + dyi;
                    if (xi < 0 || xi >= nx || yi < 0 || yi >= ny) continue;
                    const double w = (dxi ? fx : 1.0 - fx) * (dyi ? fy : 1.0 - fy);
                    acc += w * static_cast<double>(img.at(xi, yi));
                }
            }
            out.at(x, y) = static_cast<float>(acc);
        }
    }
    return out;
}

Volume rotate_volume_3d(const Volume& v, const std::array<double, 3>& rot_deg) {
    if (rot_deg[0] == 0 && rot_deg[1] == 0 && rot_deg[2] == 0) return v;
    const double ax = rot_deg[0] * M_PI / 180.0;
    const double ay = rot_deg[1] * M_PI / 180.0;
    const double az = rot_deg[2] * M_PI / 180.0;
    const double cx_ = std::cos(ax), sx_ = std::sin(ax);
    const double cy_ = std::cos(ay), sy_ = std::sin(ay);
    const double cz_ = std::cos(az), sz_ = std::sin(az);

    // R = Rz * Ry * Rx; we apply the inverse (transpose) to output coords
    const double r[3][3] = {
        {cz_ * cy_, cz_ * sy_ * sx_ - sz_ * cx_, cz_ * sy_ * cx_ + sz_ * sx_},
        {sz_ * cy_, sz_ * sy_ * sx_ + cz_ * cx_, sz_ * sy_ * cx_ - cz_ * sx_},
        {-sy_, cy_ * sx_, cy_ * cx_},
    };

    const double ccx = (static_cast<double>(v.nx) - 1.0) * 0.5;
    const double ccy = (static_cast<double>(v.ny) - 1.0) * 0.5;
    const double ccz = (static_cast<double>(v.nz) - 1.0) * 0.5;

    Volume out = Volume::zeros(v.nx, v.ny, v.nz, v.sx, v.sy, v.sz);
    for (int64_t z = 0; z < v.nz; ++z) {
        for (int64_t y = 0; y < v.ny; ++y) {
            for (int64_t x = 0; x < v.nx; ++x) {
                const double dx = static_cast<double>(x) - ccx;
                const double dy = static_cast<double>(y) - ccy;
                const double dz = static_cast<double>(z) - ccz;
                // inverse rotation = R^T
                const double sxr = r[0][0] * dx + r[1][0] * dy + r[2][0] * dz + ccx;
                const double syr = r[0][1] * dx + r[1][1] * dy + r[2][1] * dz + ccy;
                const double szr = r[0][2] * dx + r[1][2] * dy + r[2][2] * dz + ccz;
                const int64_t x0 = static_cast<int64_t>(std::floor(sxr));
                const int64_t y0 = static_cast<int64_t>(std::floor(syr));
                const int64_t z0 = static_cast<int64_t>(std::floor(szr));
                const double fx = sxr - static_cast<double>(x0);
                const double fy = syr - static_cast<double>(y0);
                const double fz = szr - static_cast<double>(z0);
                double acc = 0.0;
                for (int dzi = 0; dzi <= 1; ++dzi)
                    for (int dyi = 0; dyi <= 1; ++dyi)
                        for (int dxi = 0; dxi <= 1; ++dxi) {
                            const int64_t xi = x0 + dxi, yi = y0 + dyi, zi = z0 + dzi;
                            if (xi < 0 || xi >= v.nx || yi < 0 || yi >= v.ny || zi < 0 ||
                                zi >= v.nz)
                                continue;
                            const double w = (dxi ? fx : 1.0 - fx) * (dyi ? fy : 1.0 - fy) *
                                             (dzi ? fz : 1.0 - fz);
                            acc += w * static_cast<double>(v.at(xi, yi, zi));
                        }
                out.at(x, y, z) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

namespace {

// phase argument reduced mod 1 before scaling by 2*pi, so whole-period
// shifts give exactly 1+0i and large indices lose no precision
std::complex<double> unit_phase(double cycles) {
    const double t = cycles - std::floor(cycles);
    const double ang = -2.0 * M_PI * t;
    return {std::cos(ang), std::sin(ang)};
}

} // namespace

std::complex<double> translation_phase(int64_t kx, int64_t ky, int64_t nx,
                                       int64_t ny, double dx_px, double dy_px) {
    const double cycles = static_cast<double>(kx) * dx_px / static_cast<double>(nx) +
                          static_cast<double>(ky) * dy_px / static_cast<double>(ny);
    return unit_phase(cycles);
}

std::complex<double> translation_phase_3d(int64_t kx, int64_t ky, int64_t kz,
                                          int64_t nx, int64_t ny, int64_t nz,
                                          double dx_px, double dy_px, double dz_px) {
    const double cycles = static_cast<double>(kx) * dx_px / static_cast<double>(nx) +
                          static_cast<double>(ky) * dy_px / static_cast<double>(ny) +
                          static_cast<double>(kz) * dz_px / static_cast<double>(nz);
    return unit_phase(cycles);
}

namespace {

using fft::cplx;

// rotated-image k-space, cached per distinct state rotation
struct RotKey {
    std::array<double, 3> rot;
    bool operator<(const RotKey& o) const { return rot < o.rot; }
};

std::vector<cplx> slice_kspace(const Slice2D& img) {
    std::vector<cplx> k(static_cast<size_t>(img.nx * img.ny));
    for (size_t i = 0; i < k.size(); ++i) k[i] = cplx(static_cast<double>(img.data[i]), 0.0);
    fft::transform_2d(k, img.nx, img.ny, false);
    return k;
}

} // namespace

Slice2D corrupt_slice(const Slice2D& clean, const MotionTrajectory& traj,
                      double sx, double sy, bool pe_only) {
    const int64_t nx = clean.nx, ny = clean.ny;
    if (!is_pow2(nx) || !is_pow2(ny))
        throw ValidationError("corrupt_slice: dims must be powers of two, got (" +
                              std::to_string(nx) + "," + std::to_string(ny) + ")");
    if (traj.ordering != Ordering::Lines2D)
        throw ValidationError("corrupt_slice: trajectory ordering must be lines2d");
    if (static_cast<int64_t>(traj.states.size()) != ny)
        throw ValidationError("corrupt_slice: trajectory length " +
                              std::to_string(traj.states.size()) + " != ny " + std::to_string(ny));
    if (sx <= 0 || sy <= 0) throw ValidationError("corrupt_slice: spacing must be positive");

    std::map<RotKey, std::vector<cplx>> cache;
    std::vector<cplx> out_k(static_cast<size_t>(nx * ny), cplx(0.0, 0.0));

    for (int64_t t = 0; t < ny; ++t) {
        const MotionState& st = traj.states[static_cast<size_t>(t)];
        const RotKey key{st.rot_deg};
        auto it = cache.find(key);
        if (it == cache.end()) {
            Slice2D rotated = rotate_image_2d(clean, st.rot_deg[2]);
            it = cache.emplace(key, slice_kspace(rotated)).first;
        }
        const std::vector<cplx>& K = it->second;

        const int64_t ky = t - ny / 2; // acquisition order = ky ascending
        const int64_t row = fft::freq_index(ky, ny);
        const double dx_px = st.trans_mm[0] / sx;
        const double dy_px = st.trans_mm[1] / sy;
        for (int64_t xi = 0; xi < nx; ++xi) {
            const int64_t kx = fft::signed_freq(xi, nx);
            const cplx ph = pe_only ? translation_phase(0, ky, nx, ny, 0.0, dy_px)
                                    : translation_phase(kx, ky, nx, ny, dx_px, dy_px);
            out_k[static_cast<size_t>(row * nx + xi)] = K[static_cast<size_t>(row * nx + xi)] * ph;
        }
    }

    fft::transform_2d(out_k, nx, ny, true);
    Slice2D out;
    out.nx = nx;
    out.ny = ny;
    out.data.resize(static_cast<size_t>(nx * ny));
    for (size_t i = 0; i < out.data.size(); ++i) {
        const double re = out_k[i].real();
        if (!std::isfinite(re)) throw NumericError("corrupt_slice: non-finite output");
        out.data[i] = static_cast<float>(re);
    }
    return out;
}

Volume corrupt_volume(const Volume& clean, const MotionTrajectory& traj, bool pe_only) {
    clean.validate();
    const int64_t nx = clean.nx, ny = clean.ny, nz = clean.nz;
    if (!is_pow2(nx) || !is_pow2(ny) || !is_pow2(nz))
        throw ValidationError("corrupt_volume: dims must be powers of two");
    if (traj.ordering != Ordering::Points3D)
        throw ValidationError("corrupt_volume: trajectory ordering must be points3d");
    if (static_cast<int64_t>(traj.states.size()) != ny * nz)
        throw ValidationError("corrupt_volume: trajectory length " +
                              std::to_string(traj.states.size()) + " != ny*nz " +
                              std::to_string(ny * nz));

    std::map<RotKey, std::vector<cplx>> cache;
    std::vector<cplx> out_k(static_cast<size_t>(nx * ny * nz), cplx(0.0, 0.0));

    for (int64_t t = 0; t < ny * nz; ++t) {
        const MotionState& st = traj.states[static_cast<size_t>(t)];
        const RotKey key{st.rot_deg};
        auto it = cache.find(key);
        if (it == cache.end()) {
            Volume rotated = rotate_volume_3d(clean, st.rot_deg);
            std::vector<cplx> K(static_cast<size_t>(nx * ny * nz));
            for (size_t i = 0; i < K.size(); ++i)
                K[i] = cplx(static_cast<double>(rotated.data[i]), 0.0);
            fft::transform_3d(K, nx, ny, nz, false);
            it = cache.emplace(key, std::move(K)).first;
        }
        const std::vector<cplx>& K = it->second;

        // t = (kz + nz/2) * ny + (ky + ny/2): ky inner ascending, kz outer
        const int64_t ky = t % ny - ny / 2;
        const int64_t kz = t / ny - nz / 2;
        const int64_t row = fft::freq_index(ky, ny);
        const int64_t plane = fft::freq_index(kz, nz);
        const double dx_px = st.trans_mm[0] / clean.sx;
        const double dy_px = st.trans_mm[1] / clean.sy;
        const double dz_px = st.trans_mm[2] / clean.sz;
        const int64_t base = (plane * ny + row) * nx;
        for (int64_t xi = 0; xi < nx; ++xi) {
            const int64_t kx = fft::signed_freq(xi, nx);
            const cplx ph = pe_only
                                ? translation_phase_3d(0, ky, kz, nx, ny, nz, 0.0, dy_px, dz_px)
                                : translation_phase_3d(kx, ky, kz, nx, ny, nz, dx_px, dy_px, dz_px);
            out_k[static_cast<size_t>(base + xi)] = K[static_cast<size_t>(base + xi)] * ph;
        }
    }

    fft::transform_3d(out_k, nx, ny, nz, true);
    Volume out = Volume::zeros(nx, ny, nz, clean.sx, clean.sy, clean.sz);
    for (size_t i = 0; i < out.data.size(); ++i) {
        const double re = out_k[i].real();
        if (!std::isfinite(re)) throw NumericError("corrupt_volume: non-finite output");
        out.data[i] = static_cast<float>(re);
    }
    return out;
}

CorruptedSubject corrupt_subject(const Volume& clean, uint64_t seed,
                                 const SeverityPreset& preset, bool pe_only) {
    clean.validate();
    CorruptedSubject result;
    result.volume = Volume::zeros(clean.nx, clean.ny, clean.nz, clean.sx, clean.sy, clean.sz);
    result.slice_trajectories.resize(static_cast<size_t>(clean.nz));
    for (int64_t z = 0; z < clean.nz; ++z) {
        const uint64_t child = mix_seed(seed, static_cast<uint64_t>(z));
        MotionTrajectory traj = generate_trajectory(child, clean.ny, preset, Ordering::Lines2D);
        Slice2D corrupted = corrupt_slice(clean.slice(z), traj, clean.sx, clean.sy, pe_only);
        result.volume.set_slice(z, corrupted);
        result.slice_trajectories[static_cast<size_t>(z)] = std::move(traj);
    }
    return result;
}

} // namespace mrmotion
