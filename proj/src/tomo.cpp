#include "profed/tomo.hpp"

#include "profed/errors.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace profed::tomo {

namespace {

// Distance from the rotation center beyond which a sample can only touch
// pixels outside the inscribed circle.
double sample_radius(int side) { return 0.5 * side + 1.5; }

constexpr int kPad = 3;

struct RayWalk {
    double t_half;
    int n_steps;

    explicit RayWalk(int side)
        : t_half(sample_radius(side)),
          n_steps(static_cast<int>(std::ceil(2.0 * t_half / ProjectionGeometry::kStep))) {}

    double t(int j) const { return -t_half + (j + 0.5) * ProjectionGeometry::kStep; }

    // Index range of samples whose distance from the center is within t_half.
    bool range(double s, int& lo, int& hi) const {
        if (std::abs(s) >= t_half) return false;
        const double lim = std::sqrt(t_half * t_half - s * s);
        lo = std::max(0, static_cast<int>(std::floor((t_half - lim) / ProjectionGeometry::kStep - 0.5)));
        hi = std::min(n_steps - 1, static_cast<int>(std::ceil((t_half + lim) / ProjectionGeometry::kStep - 0.5)));
        return lo <= hi;
    }
};

void check_geometry(const Image& img, const ProjectionGeometry& geo)
{
    if (img.side != geo.image_side() || img.data.size() != static_cast<std::size_t>(img.side) * img.side)
        throw DimensionError("image side " + std::to_string(img.side) + " does not match geometry side " +
                             std::to_string(geo.image_side()));
}

void check_sinogram(const Sinogram& sino)
{
    if (!sino.geometry) throw DimensionError("sinogram has no geometry");
    if (sino.data.size() != static_cast<std::size_t>(sino.n_angles()) * sino.n_bins())
        throw DimensionError("sinogram data size does not match its geometry");
}

struct FftwDeleter {
    void operator()(void* p) const { fftw_free(p); }
};

struct FftPlans {
    fftw_plan forward;
    fftw_plan inverse;
};

// FFTW's planner is not thread-safe; execution with new arrays is.
const FftPlans& plans_for(int n)
{
    static std::mutex mutex;
    static std::map<int, FftPlans> cache;
    std::lock_guard lock(mutex);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::unique_ptr<double, FftwDeleter> in(fftw_alloc_real(n));
    std::unique_ptr<fftw_complex, FftwDeleter> out(fftw_alloc_complex(n / 2 + 1));
    FftPlans p{};
    p.forward = fftw_plan_dft_r2c_1d(n, in.get(), out.get(), FFTW_ESTIMATE);
    p.inverse = fftw_plan_dft_c2r_1d(n, out.get(), in.get(), FFTW_ESTIMATE);
    return cache.emplace(n, p).first->second;
}

} // namespace

ProjectionGeometry ProjectionGeometry::parallel(int image_side, int n_angles, double bin_spacing,
                                                FilterWindow window)
{
    if (n_angles < 1) throw std::invalid_argument("n_angles must be >= 1");
    if (!(bin_spacing > 0.0)) throw std::invalid_argument("bin_spacing must be positive");
    std::vector<double> angles(n_angles);
    for (int k = 0; k < n_angles; ++k) angles[k] = k * std::numbers::pi / n_angles;
    const int n_bins = static_cast<int>(std::ceil(image_side * std::numbers::sqrt2 / bin_spacing)) + 2;
    return ProjectionGeometry(image_side, std::move(angles), n_bins, bin_spacing, window);
}

ProjectionGeometry::ProjectionGeometry(int image_side, std::vector<double> angles, int n_bins,
                                       double bin_spacing, FilterWindow window)
    : image_side_(image_side), angles_(std::move(angles)), n_bins_(n_bins), bin_spacing_(bin_spacing), window_(window)
{
    if (image_side_ < 1) throw std::invalid_argument("image_side must be >= 1");
    if (angles_.empty()) throw std::invalid_argument("n_angles must be >= 1");
    if (n_bins_ < 1) throw std::invalid_argument("n_bins must be >= 1");
    if (!(bin_spacing_ > 0.0)) throw std::invalid_argument("bin_spacing must be positive");
    for (std::size_t k = 0; k < angles_.size(); ++k) {
        if (!(angles_[k] >= 0.0 && angles_[k] < std::numbers::pi))
            throw std::invalid_argument("angles must lie in [0, pi)");
        if (k > 0 && !(angles_[k] > angles_[k - 1]))
            throw std::invalid_argument("angles must be strictly increasing");
    }
    if (n_bins_ * bin_spacing_ < image_side_ * std::numbers::sqrt2)
        throw std::invalid_argument("detector does not span the image diagonal");
}

Sinogram::Sinogram(GeometryPtr geo) : geometry(std::move(geo))
{
    data.assign(static_cast<std::size_t>(geometry->n_angles()) * geometry->n_bins(), 0.0);
}

bool inside_support(int side, int row, int col)
{
    const double c = 0.5 * (side - 1);
    const double r = 0.5 * side;
    const double x = col - c;
    const double y = row - c;
    return x * x + y * y <= r * r;
}

namespace {

// Ray-by-pixel weights of the forward projector in compressed-row form.
// Row a * n_bins + k holds the pixels touched by ray (a, k); columns are
// pixel indices inside the support, sorted ascending.
struct SystemMatrix {
    std::vector<std::int64_t> row_ptr;
    std::vector<std::int32_t> col;
    std::vector<double> weight;
};

SystemMatrix build_system_matrix(const ProjectionGeometry& geo)
{
    const int H = geo.image_side();
    const int stride = H + 2 * kPad;
    const double c = 0.5 * (H - 1);
    const RayWalk walk(H);
    const auto angles = geo.angles();

    // Padded index -> image index, or -1 outside the support.
    std::vector<std::int32_t> target(static_cast<std::size_t>(stride) * stride, -1);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < H; ++j)
            if (inside_support(H, i, j))
                target[static_cast<std::size_t>(i + kPad) * stride + j + kPad] = i * H + j;

    SystemMatrix m;
    m.row_ptr.reserve(static_cast<std::size_t>(geo.n_angles()) * geo.n_bins() + 1);
    m.row_ptr.push_back(0);
    std::vector<double> scratch(static_cast<std::size_t>(H) * H, 0.0);
    std::vector<std::int32_t> touched;
    auto deposit = [&](std::size_t padded_index, double w) {
        const std::int32_t t = target[padded_index];
        if (t < 0 || w == 0.0) return;
        if (scratch[t] == 0.0) touched.push_back(t);
        scratch[t] += w;
    };
    for (int a = 0; a < geo.n_angles(); ++a) {
        const double cs = std::cos(angles[a]);
        const double sn = std::sin(angles[a]);
        for (int k = 0; k < geo.n_bins(); ++k) {
            const double s = geo.bin_offset(k);
            int lo = 0, hi = -1;
            if (walk.range(s, lo, hi)) {
                for (int j = lo; j <= hi; ++j) {
                    const double t = walk.t(j);
                    const double fc = s * cs - t * sn + c;
                    const double fr = s * sn + t * cs + c;
                    const double r0 = std::floor(fr);
                    const double c0 = std::floor(fc);
                    const double wr = fr - r0;
                    const double wc = fc - c0;
                    const std::size_t p = static_cast<std::size_t>(r0 + kPad) * stride + static_cast<std::size_t>(c0 + kPad);
                    deposit(p, (1.0 - wr) * (1.0 - wc));
                    deposit(p + 1, (1.0 - wr) * wc);
                    deposit(p + stride, wr * (1.0 - wc));
                    deposit(p + stride + 1, wr * wc);
                }
            }
            std::sort(touched.begin(), touched.end());
            for (std::int32_t t : touched) {
                m.col.push_back(t);
                m.weight.push_back(scratch[t] * ProjectionGeometry::kStep);
                scratch[t] = 0.0;
            }
            touched.clear();
            m.row_ptr.push_back(static_cast<std::int64_t>(m.col.size()));
        }
    }
    return m;
}

// One matrix per distinct geometry, built on first use.
std::shared_ptr<const SystemMatrix> system_matrix(const ProjectionGeometry& geo)
{
    static std::mutex mutex;
    static std::vector<std::pair<ProjectionGeometry, std::shared_ptr<const SystemMatrix>>> cache;
    std::lock_guard lock(mutex);
    for (const auto& [g, m] : cache)
        if (g == geo) return m;
    auto m = std::make_shared<const SystemMatrix>(build_system_matrix(geo));
    cache.emplace_back(geo, m);
    return m;
}

} // namespace

Sinogram forward_project(const Image& img, const GeometryPtr& geo)
{
    if (!geo) throw DimensionError("null geometry");
    check_geometry(img, *geo);
    const auto m = system_matrix(*geo);
    Sinogram out(geo);
    const double* x = img.data.data();
    for (std::size_t r = 0; r + 1 < m->row_ptr.size(); ++r) {
        double acc = 0.0;
        for (std::int64_t e = m->row_ptr[r]; e < m->row_ptr[r + 1]; ++e) acc += m->weight[e] * x[m->col[e]];
        out.data[r] = acc;
    }
    return out;
}

Image back_project(const Sinogram& sino)
{
    check_sinogram(sino);
    const auto m = system_matrix(*sino.geometry);
    Image out(sino.geometry->image_side());
    double* x = out.data.data();
    for (std::size_t r = 0; r + 1 < m->row_ptr.size(); ++r) {
        const double v = sino.data[r];
        if (v == 0.0) continue;
        for (std::int64_t e = m->row_ptr[r]; e < m->row_ptr[r + 1]; ++e) x[m->col[e]] += m->weight[e] * v;
    }
    return out;
}

int padded_length(int n_bins)
{
    int p = 1;
    while (p < 2 * n_bins) p <<= 1;
    return p;
}

std::vector<double> ramp_kernel(int padded, double bin_spacing)
{
    // Spatial Ram-Lak kernel laid out circularly: h[0] = 1/(4 tau^2),
    // h[n odd] = -1/(pi n tau)^2, h[n even] = 0.
    std::vector<double> h(padded, 0.0);
    const double tau2 = bin_spacing * bin_spacing;
    h[0] = 0.25 / tau2;
    for (int n = 1; n < padded / 2; n += 2) {
        const double v = -1.0 / (std::numbers::pi * std::numbers::pi * n * n * tau2);
        h[n] = v;
        h[padded - n] = v;
    }
    if ((padded / 2) % 2 == 1)
        h[padded / 2] = -1.0 / (std::numbers::pi * std::numbers::pi * (padded / 2.0) * (padded / 2.0) * tau2);
    return h;
}

std::vector<double> ramp_response(int padded, double bin_spacing, FilterWindow window)
{
    const FftPlans& plans = plans_for(padded);
    std::unique_ptr<double, FftwDeleter> buf(fftw_alloc_real(padded));
    std::unique_ptr<fftw_complex, FftwDeleter> spec(fftw_alloc_complex(padded / 2 + 1));
    const std::vector<double> h = ramp_kernel(padded, bin_spacing);
    std::copy(h.begin(), h.end(), buf.get());
    fftw_execute_dft_r2c(plans.forward, buf.get(), spec.get());
    std::vector<double> response(padded / 2 + 1);
    for (int k = 0; k <= padded / 2; ++k) {
        // The kernel is even, so its transform is real.
        double v = bin_spacing * spec.get()[k][0];
        if (window == FilterWindow::Hann) v *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * k / padded));
        response[k] = v;
    }
    return response;
}

Sinogram ramp_filter(const Sinogram& sino)
{
    check_sinogram(sino);
    const ProjectionGeometry& geo = *sino.geometry;
    const int nb = geo.n_bins();
    const int P = padded_length(nb);
    const FftPlans& plans = plans_for(P);
    const std::vector<double> response = ramp_response(P, geo.bin_spacing(), geo.window());

    std::unique_ptr<double, FftwDeleter> buf(fftw_alloc_real(P));
    std::unique_ptr<fftw_complex, FftwDeleter> spec(fftw_alloc_complex(P / 2 + 1));
    Sinogram out(sino.geometry);
    for (int a = 0; a < geo.n_angles(); ++a) {
        double* row = buf.get();
        std::fill(row, row + P, 0.0);
        for (int k = 0; k < nb; ++k) row[k] = sino.at(a, k);
        fftw_execute_dft_r2c(plans.forward, row, spec.get());
        for (int k = 0; k <= P / 2; ++k) {
            spec.get()[k][0] *= response[k];
            spec.get()[k][1] *= response[k];
        }
        fftw_execute_dft_c2r(plans.inverse, spec.get(), row);
        for (int k = 0; k < nb; ++k) out.at(a, k) = row[k] / P;
    }
    return out;
}

Image filtered_back_project(const Sinogram& sino)
{
    Image img = back_project(ramp_filter(sino));
    const double scale = std::numbers::pi / sino.geometry->n_angles() * sino.geometry->bin_spacing();
    for (double& v : img.data) v *= scale;
    return img;
}

Sinogram filtered_back_project_adjoint(const Image& img, const GeometryPtr& geo)
{
    // The zero-padded ramp filter is a symmetric Toeplitz operator, so its transpose is itself.
    Sinogram s = ramp_filter(forward_project(img, geo));
    const double scale = std::numbers::pi / geo->n_angles() * geo->bin_spacing();
    for (double& v : s.data) v *= scale;
    return s;
}

} // namespace profed::tomo
