#include "doctest.h"

#include "profed/errors.hpp"
#include "profed/metrics.hpp"

#include <cmath>
#include <random>

using namespace profed;
using profed::tomo::Image;

namespace {

Image random_image(int side, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(side);
    for (double& v : img.data) v = u(rng);
    return img;
}

// Textbook formulas evaluated in long double with one-pass sums.
double psnr_oracle(const Image& a, const Image& b, double max_val)
{
    long double sse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) sse += (long double)(a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    const long double mse = sse / a.size();
    return static_cast<double>(10.0L * std::log10((long double)max_val * max_val / mse));
}

double ssim_oracle(const Image& a, const Image& b, double L)
{
    long double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    const long double n = a.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
        sa += a.data[i];
        sb += b.data[i];
        saa += (long double)a.data[i] * a.data[i];
        sbb += (long double)b.data[i] * b.data[i];
        sab += (long double)a.data[i] * b.data[i];
    }
    const long double ma = sa / n, mb = sb / n;
    const long double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
    const long double c1 = (0.01L * L) * (0.01L * L), c2 = (0.03L * L) * (0.03L * L);
    return static_cast<double>(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
}

} // namespace

TEST_CASE("psnr: cap, closed form and oracle")
{
    std::mt19937_64 rng(1);
    const Image a = random_image(32, rng);
    CHECK(metrics::psnr(a, a) == metrics::kPsnrCap);

    CHECK(metrics::psnr_from_mse(1e-4) == 40.0);
    CHECK(metrics::psnr_from_mse(0.0) == metrics::kPsnrCap);
    CHECK_THROWS_AS(metrics::psnr_from_mse(-1.0), std::invalid_argument);

    Image zero(16), offset(16, 0.01);
    CHECK(metrics::psnr(zero, offset, 1.0) == doctest::Approx(40.0).epsilon(1e-12));

    for (int trial = 0; trial < 20; ++trial) {
        const Image x = random_image(24, rng), y = random_image(24, rng);
        CHECK(std::abs(metrics::psnr(x, y, 1.0) - psnr_oracle(x, y, 1.0)) <= 1e-10);
        CHECK(std::abs(metrics::psnr(x, y, 2.5) - psnr_oracle(x, y, 2.5)) <= 1e-10);
    }
}

TEST_CASE("psnr decreases as MSE grows")
{
    Image ref(16, 0.5);
    double previous = 1e9;
    for (double d : {0.001, 0.01, 0.05, 0.2}) {
        Image rec(16, 0.5 + d);
        const double p = metrics::psnr(ref, rec);
        CHECK(p < previous);
        previous = p;
    }
}

TEST_CASE("ssim: identity, constants and oracle")
{
    std::mt19937_64 rng(2);
    const Image a = random_image(32, rng);
    CHECK(metrics::ssim(a, a) == 1.0);

    const double c = 0.3, d = 0.2;
    const double c1 = 1e-4;
    const double expected = (2 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
    CHECK(metrics::ssim(Image(16, c), Image(16, c + d)) == doctest::Approx(expected).epsilon(1e-12));

    for (int trial = 0; trial < 20; ++trial) {
        const Image x = random_image(24, rng), y = random_image(24, rng);
        CHECK(std::abs(metrics::ssim(x, y) - ssim_oracle(x, y, 1.0)) <= 1e-10);
        CHECK(metrics::ssim(x, y) == doctest::Approx(metrics::ssim(y, x)).epsilon(1e-14));
        CHECK(metrics::ssim(x, y) <= 1.0);
    }
}

TEST_CASE("ssim is invariant to joint scaling of images and dynamic range")
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Image x = random_image(16, rng), y = random_image(16, rng);
        const double s = std::uniform_real_distribution<double>(0.1, 50.0)(rng);
        Image xs = x, ys = y;
        for (double& v : xs.data) v *= s;
        for (double& v : ys.data) v *= s;
        CHECK(std::abs(metrics::ssim(xs, ys, s) - metrics::ssim(x, y, 1.0)) <= 1e-10);
    }
}

TEST_CASE("metrics reject mismatched shapes")
{
    CHECK_THROWS_AS(metrics::psnr(Image(8), Image(9)), DimensionError);
    CHECK_THROWS_AS(metrics::ssim(Image(8), Image(9)), DimensionError);
    CHECK_THROWS_AS(metrics::psnr(Image(8), Image(8), 0.0), std::invalid_argument);
}
