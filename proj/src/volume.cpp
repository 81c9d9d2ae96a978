#include "mrmotion/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "mvol i/o assumes a little-endian host");

namespace mrmotion {

Volume Volume::zeros(int64_t nx, int64_t ny, int64_t nz, double sx, double sy, double sz) {
    Volume v;
    v.nx = nx;
    v.ny = ny;
    v.nz = nz;
    v.sx = sx;
    v.sy = sy;
    v.sz = sz;
    v.data.assign(static_cast<size_t>(nx * ny * nz), 0.0f);
    return v;
}

Slice2D Volume::slice(int64_t z) const {
    if (z < 0 || z >= nz)
        throw ValidationError("slice index " + std::to_string(z) + " out of range [0," +
                              std::to_string(nz - 1) + "]");
    Slice2D s;
    s.nx = nx;
    s.ny = ny;
    s.data.assign(data.begin() + static_cast<ptrdiff_t>(z * ny * nx),
                  data.begin() + static_cast<ptrdiff_t>((z + 1) * ny * nx));
    return s;
}

void Volume::set_slice(int64_t z, const Slice2D& s) {
    if (z < 0 || z >= nz) throw ValidationError("slice index out of range");
    if (s.nx != nx || s.ny != ny) throw ValidationError("slice dims mismatch");
    std::copy(s.data.begin(), s.data.end(),
              data.begin() + static_cast<ptrdiff_t>(z * ny * nx));
}

void Volume::validate() const {
    if (nx <= 0 || ny <= 0 || nz <= 0)
        throw ValidationError("volume dims must be positive, got (" + std::to_string(nx) +
                              "," + std::to_string(ny) + "," + std::to_string(nz) + ")");
    if (static_cast<int64_t>(data.size()) != numel())
        throw ValidationError("volume data length " + std::to_string(data.size()) +
                              " does not match dims product " + std::to_string(numel()));
    for (size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i]))
            throw ValidationError("non-finite voxel at linear index " + std::to_string(i));
    }
}

namespace {

constexpr char kMagic[8] = {'M', 'V', 'O', 'L', '0', '0', '0', '1'};

} // namespace

void save_volume(const Volume& v, const std::string& path) {
    v.validate();
    nlohmann::json header = {
        {"dims", {v.nx, v.ny, v.nz}},
        {"spacing", {v.sx, v.sy, v.sz}},
        {"dtype", "f32le"},
    };
    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kMagic, 8);
    uint32_t n = static_cast<uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&n), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (!f) throw IoError("write failed: " + path);
}

Volume load_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for reading: " + path);
    const int64_t file_size = static_cast<int64_t>(f.tellg());
    f.seekg(0);

    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("bad magic at byte offset 0 in " + path);

    uint32_t hlen = 0;
    if (!f.read(reinterpret_cast<char*>(&hlen), 4))
        throw IoError("truncated header length at byte offset 8 in " + path);
    if (12 + static_cast<int64_t>(hlen) > file_size)
        throw IoError("header length " + std::to_string(hlen) +
                      " overruns file at byte offset 12 in " + path);

    std::string hs(hlen, '\0');
    if (!f.read(hs.data(), hlen))
        throw IoError("truncated header at byte offset 12 in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        throw IoError("header JSON parse error at byte offset 12 in " + path + ": " + e.what());
    }

    Volume v;
    try {
        auto dims = header.at("dims");
        auto spacing = header.at("spacing");
        v.nx = dims.at(0).get<int64_t>();
        v.ny = dims.at(1).get<int64_t>();
        v.nz = dims.at(2).get<int64_t>();
        v.sx = spacing.at(0).get<double>();
        v.sy = spacing.at(1).get<double>();
        v.sz = spacing.at(2).get<double>();
        if (header.at("dtype").get<std::string>() != "f32le")
            throw IoError("unsupported dtype in " + path);
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("malformed header in " + path + ": " + e.what());
    }
    if (v.nx <= 0 || v.ny <= 0 || v.nz <= 0)
        throw ValidationError("invalid dims (" + std::to_string(v.nx) + "," +
                              std::to_string(v.ny) + "," + std::to_string(v.nz) +
                              ") in header of " + path);

    const int64_t blob_offset = 12 + static_cast<int64_t>(hlen);
    const int64_t expected = v.numel() * static_cast<int64_t>(sizeof(float));
    const int64_t actual = file_size - blob_offset;
    if (actual != expected)
        throw IoError("blob length mismatch at byte offset " + std::to_string(blob_offset) +
                      " in " + path + ": expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual));

    v.data.resize(static_cast<size_t>(v.numel()));
    if (!f.read(reinterpret_cast<char*>(v.data.data()), expected))
        throw IoError("blob read failed at byte offset " + std::to_string(blob_offset) +
                      " in " + path);

    for (size_t i = 0; i < v.data.size(); ++i) {
        if (!std::isfinite(v.data[i]))
            throw IoError("non-finite value at byte offset " +
                          std::to_string(blob_offset + static_cast<int64_t>(i * 4)) + " in " + path);
    }
    return v;
}

double volume_percentile(const Volume& v, double p) {
    if (p < 0.0 || p > 100.0) throw ValidationError("percentile out of [0,100]");
    if (v.data.empty()) throw ValidationError("empty volume");
    std::vector<float> sorted(v.data);
    std::sort(sorted.begin(), sorted.end());
    const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return (1.0 - frac) * sorted[lo] + frac * sorted[lo + 1];
}

Volume normalize_volume(const Volume& v, double p_lo, double p_hi) {
    if (!(p_lo < p_hi) || p_lo < 0.0 || p_hi > 100.0)
        throw ValidationError("percentiles must satisfy 0 <= p_lo < p_hi <= 100");
    v.validate();
    const double lo = volume_percentile(v, p_lo);
    const double hi = volume_percentile(v, p_hi);
    Volume out = v;
    if (!(hi > lo)) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    const double scale = 1.0 / (hi - lo);
    for (auto& x : out.data) {
        double t = (std::clamp(static_cast<double>(x), lo, hi) - lo) * scale;
        x = static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
    return out;
}

SliceTriplet extract_triplet(const Volume& v, int64_t i, const Volume* extra) {
    if (i < 0 || i >= v.nz)
        throw ValidationError("triplet slice index " + std::to_string(i) +
                              " out of range [0," + std::to_string(v.nz - 1) + "]");
    if (extra && (extra->nx != v.nx || extra->ny != v.ny || extra->nz != v.nz))
        throw ValidationError("extra prior volume dims mismatch");
    SliceTriplet t;
    t.slice_index = i;
    t.center = v.slice(i);
    t.prev = v.slice(i == 0 ? i : i - 1);
    t.next = v.slice(i == v.nz - 1 ? i : i + 1);
    if (extra) t.extra_prior = extra->slice(i);
    return t;
}

} // namespace mrmotion
