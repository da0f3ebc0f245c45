#include "profed/metrics.hpp"

#include "profed/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace profed::metrics {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw DimensionError("metric operands differ in size");
    if (a.empty()) throw DimensionError("metric operands are empty");
}

} // namespace

double psnr_from_mse(double mse, double max_val)
{
    if (!(max_val > 0.0)) throw std::invalid_argument("max_val must be positive");
    if (!(mse >= 0.0)) throw std::invalid_argument("mse must be non-negative");
    if (mse == 0.0) return kPsnrCap;
    return 10.0 * std::log10(max_val * max_val / mse);
}

double psnr(std::span<const double> ref, std::span<const double> rec, double max_val)
{
    check_pair(ref, rec);
    if (!(max_val > 0.0)) throw std::invalid_argument("max_val must be positive");
    double sse = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = ref[i] - rec[i];
        sse += d * d;
    }
    return psnr_from_mse(sse / static_cast<double>(ref.size()), max_val);
}

double psnr(const tomo::Image& ref, const tomo::Image& rec, double max_val)
{
    return psnr(std::span<const double>(ref.data), std::span<const double>(rec.data), max_val);
}

double ssim(std::span<const double> ref, std::span<const double> rec, double dynamic_range)
{
    check_pair(ref, rec);
    if (!(dynamic_range > 0.0)) throw std::invalid_argument("dynamic range must be positive");
    const double n = static_cast<double>(ref.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        mx += ref[i];
        my += rec[i];
    }
    mx /= n;
    my /= n;
    double vx = 0.0, vy = 0.0, cxy = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double dx = ref[i] - mx;
        const double dy = rec[i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
    const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
    return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

double ssim(const tomo::Image& ref, const tomo::Image& rec, double dynamic_range)
{
    return ssim(std::span<const double>(ref.data), std::span<const double>(rec.data), dynamic_range);
}

MetricReport evaluate(const tomo::Image& ref, const tomo::Image& rec)
{
    return {psnr(ref, rec), ssim(ref, rec)};
}

} // namespace profed::metrics
