#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mrmotion/motion.hpp"
#include "mrmotion/volume.hpp"

namespace mrmotion::metrics {

// Standard windowed-SSIM parameters (11x11 Gaussian, sigma 1.5, k1/k2 from
// Wang et al.); L is the dynamic range, 1.0 for normalized volumes.
struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double L = 1.0;

    void validate() const;
};

struct SsimResult {
    double mean = 0.0;
    std::vector<float> map; // per-pixel SSIM, same size as the inputs
};

double mse(const Slice2D& a, const Slice2D& b);

// 10*log10(L^2/mse); mse == 0 reports +infinity (excluded from aggregates).
double psnr(const Slice2D& a, const Slice2D& b, double L = 1.0);
double psnr_from_mse(double mse_value, double L);

SsimResult ssim(const Slice2D& a, const Slice2D& b, const SsimParams& p = {});

// Squared Pearson correlation. Throws on degenerate variance.
double r_squared(const std::vector<double>& xs, const std::vector<double>& ys);

// ---- reporting ----

struct MetricsRow {
    std::string subject_id;
    int64_t slice_index = 0;
    double ssim_before = 0, mse_before = 0, psnr_before = 0;
    double ssim_after = 0, mse_after = 0, psnr_after = 0;
};

struct Aggregate {
    double mean = 0, std_dev = 0;
    int64_t n_infinite = 0; // psnr rows excluded as infinite
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    double dynamic_range = 1.0;
    Aggregate agg_ssim_before, agg_mse_before, agg_psnr_before;
    Aggregate agg_ssim_after, agg_mse_after, agg_psnr_after;

    void compute_aggregates();
    // Columns: subject_id, slice_index, ssim_before, mse_before, psnr_before,
    // ssim_after, mse_after, psnr_after.
    std::string to_csv() const;
    std::string aggregates_json() const;
};

// ---- severity study ----

struct SeverityStudy {
    // per (preset, subject, slice) metric samples, aligned across presets
    struct Sample {
        std::string subject_id;
        int64_t slice_index;
        double ssim, mse, psnr;
    };
    std::map<std::string, std::vector<Sample>> samples; // preset name -> samples
    // r2[metric][pair], metrics = ssim/mse/psnr,
    // pairs = mild_vs_moderate / mild_vs_severe / moderate_vs_severe
    std::map<std::string, std::map<std::string, double>> r2;
    std::map<std::string, double> mean_ssim; // per preset

    std::string scatter_csv() const;
    std::string r2_json() const; // includes the published SSIM reference values
};

// Corrupt every subject under each preset and relate per-slice metric values
// across severity levels.
SeverityStudy severity_study(const std::vector<Volume>& volumes, uint64_t seed,
                             const std::vector<SeverityPreset>& presets = {
                                 preset_mild(), preset_moderate(), preset_severe()});

// ---- internals shared with the differentiable SSIM loss ----
namespace detail {

// normalized 1D Gaussian window
std::vector<double> gaussian_window(int size, double sigma);

// zero-padded separable correlation with the window g (same output size)
void corr2_zero(const double* in, double* out, int64_t w, int64_t h,
                const std::vector<double>& g);

// per-pixel sum of in-bounds window weights (border renormalization field)
std::vector<double> renorm_field(int64_t w, int64_t h, const std::vector<double>& g);

} // namespace detail

} // namespace mrmotion::metrics
