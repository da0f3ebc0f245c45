#pragma once

// Synthetic data: phantoms, projection-domain low-dose simulation, protocol
// vectors, anatomy descriptors and per-client dataset assembly.

#include "profed/rng.hpp"
#include "profed/tomo.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace profed::phantoms {

enum class PhantomKind { SheppLogan, RandomEllipses, Disks };

PhantomKind parse_phantom_kind(const std::string& name);
std::string to_string(PhantomKind kind);

tomo::Image make_phantom(PhantomKind kind, int side, std::uint64_t seed);

// Attenuation scale applied before the exponential; an image in [0,1] never
// exceeds alpha * line_integral = 4 along any ray.
double attenuation_scale(const tomo::ProjectionGeometry& geo);

// Poisson transmission noise in the log domain, with a one-count floor.
tomo::Sinogram add_transmission_noise(const tomo::Sinogram& clean, double photons, Rng& rng);

struct LowDose {
    tomo::Sinogram sinogram;
    tomo::Image image;  // filtered backprojection of `sinogram`
};

LowDose simulate_low_dose(const tomo::Image& full_dose, const tomo::GeometryPtr& geo, double photons,
                          std::uint64_t seed);

inline constexpr int kProtocolDim = 7;

// Raw-value ranges that protocol fields are min-max normalized against.
struct ProtocolRanges {
    int views_min = 32;
    int views_max = 192;
    double photons_min = 5e4;
    double photons_max = 1.1e6;
    int bins_min = 0;  // 0: derived from the geometry's image side
    int bins_max = 0;
};

// Normalized fields, in order: num_views, photon_count, detector_bins,
// tube_voltage_proxy (log photons), dose_level (log views * photons),
// angular_coverage, filter_id.
struct ProtocolVector {
    std::array<double, kProtocolDim> values{};
    int num_views = 0;
    double photons = 0.0;

    bool operator==(const ProtocolVector&) const = default;
};

ProtocolVector make_protocol_vector(int num_views, double photons, const tomo::ProjectionGeometry& geo,
                                    const ProtocolRanges& ranges);

struct AnatomyFeature {
    std::vector<double> values;
};

inline constexpr int kDescriptorDim = 32;

// Hand-crafted 32-value descriptor: 16-bin histogram, 8 radial ring means,
// 4 central moments, 4 gradient-magnitude statistics.
std::array<double, kDescriptorDim> anatomy_descriptor(const tomo::Image& img);

// Descriptor projected to `dim` values by a seed-derived Gaussian matrix, unit norm.
AnatomyFeature make_anatomy_feature(const tomo::Image& full_dose, int dim, std::uint64_t seed);

struct Sample {
    tomo::Image low_dose;
    tomo::Image full_dose;
    tomo::Sinogram sinogram;
    ProtocolVector protocol;
    AnatomyFeature anatomy;
};

struct ClientDataset {
    int client_id = 0;
    tomo::GeometryPtr geometry;
    ProtocolVector protocol;
    PhantomKind kind = PhantomKind::RandomEllipses;
    std::vector<Sample> train;
    std::vector<Sample> val;
    std::vector<Sample> test;

    std::size_t sample_count() const noexcept { return train.size(); }
};

struct ProtocolSetting {
    int num_views = 0;
    double photons = 0.0;

    bool operator==(const ProtocolSetting&) const = default;
};

struct DatasetConfig {
    std::uint64_t master_seed = 0;
    int image_side = 64;
    std::vector<ProtocolSetting> protocols;  // one per client
    int train_per_client = 8;
    int val_per_client = 2;
    int test_per_client = 4;
    int anatomy_dim = 32;
    ProtocolRanges ranges;
    tomo::FilterWindow window = tomo::FilterWindow::RamLak;
    // Id offset so that unseen clients draw phantoms from their own seed ranges.
    int first_client_id = 0;
};

// Default protocol grid for K clients: views spread linearly, photons
// log-spaced in the opposite order, so every client differs in both.
std::vector<ProtocolSetting> default_protocol_grid(int clients, const ProtocolRanges& ranges);

std::vector<ClientDataset> build_client_datasets(const DatasetConfig& cfg);

} // namespace profed::phantoms
