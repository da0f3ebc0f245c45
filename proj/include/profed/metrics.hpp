#pragma once

#include "profed/tomo.hpp"

#include <span>

namespace profed::metrics {

inline constexpr double kPsnrCap = 99.0;

struct MetricReport {
    double psnr_db = 0.0;
    double ssim = 0.0;
};

// 10 log10(max_val^2 / MSE); returns kPsnrCap when MSE is zero.
double psnr_from_mse(double mse, double max_val = 1.0);
double psnr(std::span<const double> ref, std::span<const double> rec, double max_val = 1.0);
double psnr(const tomo::Image& ref, const tomo::Image& rec, double max_val = 1.0);

// Single-window SSIM over whole-image statistics, C1 = (0.01 L)^2, C2 = (0.03 L)^2.
double ssim(std::span<const double> ref, std::span<const double> rec, double dynamic_range = 1.0);
double ssim(const tomo::Image& ref, const tomo::Image& rec, double dynamic_range = 1.0);

MetricReport evaluate(const tomo::Image& ref, const tomo::Image& rec);

} // namespace profed::metrics
