#pragma once

// Parallel-beam projection geometry: Radon transform, its exact adjoint,
// ramp filtering and filtered backprojection.
//
// Conventions: pixel (row i, col j) has its center at x = j - c, y = i - c with
// c = (H - 1) / 2. A ray at angle theta and detector offset s samples the
// points (s cos - t sin, s sin + t cos) on a uniform t grid of pitch 0.5 px,
// reading the image by bilinear interpolation. Pixels whose centers lie
// outside the inscribed circle of radius H / 2 are treated as zero.

#include <memory>
#include <span>
#include <vector>

namespace profed::tomo {

enum class FilterWindow { RamLak, Hann };

class ProjectionGeometry {
public:
    // Angles k * pi / n_angles, detector wide enough to cover the image diagonal.
    static ProjectionGeometry parallel(int image_side, int n_angles, double bin_spacing = 1.0,
                                       FilterWindow window = FilterWindow::RamLak);

    // Validates every invariant; throws std::invalid_argument otherwise.
    ProjectionGeometry(int image_side, std::vector<double> angles, int n_bins,
                       double bin_spacing, FilterWindow window = FilterWindow::RamLak);

    int image_side() const noexcept { return image_side_; }
    int n_angles() const noexcept { return static_cast<int>(angles_.size()); }
    int n_bins() const noexcept { return n_bins_; }
    double bin_spacing() const noexcept { return bin_spacing_; }
    FilterWindow window() const noexcept { return window_; }
    std::span<const double> angles() const noexcept { return angles_; }

    // Detector coordinate of bin k.
    double bin_offset(int k) const noexcept { return (k - 0.5 * (n_bins_ - 1)) * bin_spacing_; }

    static constexpr double kStep = 0.5;

    bool operator==(const ProjectionGeometry&) const = default;

private:
    int image_side_;
    std::vector<double> angles_;
    int n_bins_;
    double bin_spacing_;
    FilterWindow window_;
};

using GeometryPtr = std::shared_ptr<const ProjectionGeometry>;

struct Image {
    int side = 0;
    std::vector<double> data;  // row-major side x side

    Image() = default;
    explicit Image(int s, double fill = 0.0) : side(s), data(static_cast<std::size_t>(s) * s, fill) {}

    double& at(int row, int col) { return data[static_cast<std::size_t>(row) * side + col]; }
    double at(int row, int col) const { return data[static_cast<std::size_t>(row) * side + col]; }
    std::size_t size() const noexcept { return data.size(); }
};

struct Sinogram {
    GeometryPtr geometry;
    std::vector<double> data;  // row-major n_angles x n_bins

    Sinogram() = default;
    explicit Sinogram(GeometryPtr geo);

    int n_angles() const { return geometry->n_angles(); }
    int n_bins() const { return geometry->n_bins(); }
    double& at(int angle, int bin) { return data[static_cast<std::size_t>(angle) * n_bins() + bin]; }
    double at(int angle, int bin) const { return data[static_cast<std::size_t>(angle) * n_bins() + bin]; }
    std::size_t size() const noexcept { return data.size(); }
};

// Line integrals of the masked image along every ray.
Sinogram forward_project(const Image& img, const GeometryPtr& geo);

// Exact transpose of forward_project (unfiltered backprojection).
Image back_project(const Sinogram& sino);

// Ram-Lak (optionally Hann-windowed) filtering of each detector row.
Sinogram ramp_filter(const Sinogram& sino);

// Spatial Ram-Lak kernel on a circular grid of length `padded` (index 0 is the center tap).
std::vector<double> ramp_kernel(int padded, double bin_spacing);

// Frequency response used by ramp_filter on a zero-padded row of length `padded`,
// one entry per non-negative frequency (padded / 2 + 1 values).
std::vector<double> ramp_response(int padded, double bin_spacing, FilterWindow window);

// Smallest power of two >= 2 * n_bins.
int padded_length(int n_bins);

// pi / n_angles * bin_spacing * back_project(ramp_filter(sino)).
Image filtered_back_project(const Sinogram& sino);

// Transpose of filtered_back_project: maps an image to a sinogram.
Sinogram filtered_back_project_adjoint(const Image& img, const GeometryPtr& geo);

// True if the pixel center lies inside the inscribed circle.
bool inside_support(int side, int row, int col);

} // namespace profed::tomo
