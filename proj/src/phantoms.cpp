#include "profed/phantoms.hpp"

#include "profed/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace profed::phantoms {

namespace {

struct Ellipse {
    double value;
    double a, b;    // half-axes in normalized units
    double x0, y0;  // center
    double phi;     // rotation, radians
};

// Modified Shepp-Logan (Toft), intensities in [0, 1].
const std::vector<Ellipse>& shepp_logan_table()
{
    constexpr double deg = std::numbers::pi / 180.0;
    static const std::vector<Ellipse> table{
        {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
        {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
        {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0 * deg},
        {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0 * deg},
        {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},
        {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
        {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},
        {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
        {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},
        {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
    };
    return table;
}

constexpr int kSupersample = 3;

tomo::Image rasterize(const std::vector<Ellipse>& shapes, int side)
{
    tomo::Image img(side);
    const double c = 0.5 * (side - 1);
    const double half = 0.5 * side;
    for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
            double acc = 0.0;
            for (int si = 0; si < kSupersample; ++si) {
                for (int sj = 0; sj < kSupersample; ++sj) {
                    const double dy = (si + 0.5) / kSupersample - 0.5;
                    const double dx = (sj + 0.5) / kSupersample - 0.5;
                    const double x = (j + dx - c) / half;
                    const double y = (c - (i + dy)) / half;
                    double v = 0.0;
                    for (const Ellipse& e : shapes) {
                        const double cs = std::cos(e.phi);
                        const double sn = std::sin(e.phi);
                        const double u = ((x - e.x0) * cs + (y - e.y0) * sn) / e.a;
                        const double w = (-(x - e.x0) * sn + (y - e.y0) * cs) / e.b;
                        if (u * u + w * w <= 1.0) v += e.value;
                    }
                    acc += v;
                }
            }
            img.at(i, j) = std::clamp(acc / (kSupersample * kSupersample), 0.0, 1.0);
        }
    }
    return img;
}

std::vector<Ellipse> random_ellipses(Rng& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    const int count = std::uniform_int_distribution<int>(3, 8)(rng);
    std::vector<Ellipse> shapes;
    shapes.push_back({uniform(0.2, 0.4), uniform(0.6, 0.85), uniform(0.6, 0.85), uniform(-0.05, 0.05),
                      uniform(-0.05, 0.05), uniform(0.0, std::numbers::pi)});
    for (int k = 1; k < count; ++k) {
        const double r = uniform(0.0, 0.45);
        const double ang = uniform(0.0, 2.0 * std::numbers::pi);
        shapes.push_back({uniform(-0.15, 0.5), uniform(0.05, 0.3), uniform(0.05, 0.3), r * std::cos(ang),
                          r * std::sin(ang), uniform(0.0, std::numbers::pi)});
    }
    return shapes;
}

std::vector<Ellipse> random_disks(Rng& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    const int count = std::uniform_int_distribution<int>(3, 8)(rng);
    std::vector<Ellipse> shapes;
    const double body = uniform(0.7, 0.85);
    shapes.push_back({uniform(0.2, 0.4), body, body, 0.0, 0.0, 0.0});
    for (int k = 1; k < count; ++k) {
        const double radius = uniform(0.04, 0.2);
        const double r = uniform(0.0, body - radius - 0.05);
        const double ang = uniform(0.0, 2.0 * std::numbers::pi);
        shapes.push_back({uniform(0.1, 0.6), radius, radius, r * std::cos(ang), r * std::sin(ang), 0.0});
    }
    return shapes;
}

double normalize(double v, double lo, double hi)
{
    if (hi <= lo) return 0.0;
    return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

} // namespace

PhantomKind parse_phantom_kind(const std::string& name)
{
    if (name == "shepp_logan") return PhantomKind::SheppLogan;
    if (name == "random_ellipses") return PhantomKind::RandomEllipses;
    if (name == "disks") return PhantomKind::Disks;
    throw std::invalid_argument("unknown phantom kind '" + name + "'");
}

std::string to_string(PhantomKind kind)
{
    switch (kind) {
    case PhantomKind::SheppLogan: return "shepp_logan";
    case PhantomKind::RandomEllipses: return "random_ellipses";
    case PhantomKind::Disks: return "disks";
    }
    return "unknown";
}

tomo::Image make_phantom(PhantomKind kind, int side, std::uint64_t seed)
{
    if (side < 16) throw std::invalid_argument("phantom side must be >= 16");
    Rng rng = make_rng({seed, stream::phantom});
    switch (kind) {
    case PhantomKind::SheppLogan: return rasterize(shepp_logan_table(), side);
    case PhantomKind::RandomEllipses: return rasterize(random_ellipses(rng), side);
    case PhantomKind::Disks: return rasterize(random_disks(rng), side);
    }
    throw std::invalid_argument("unknown phantom kind");
}

double attenuation_scale(const tomo::ProjectionGeometry& geo)
{
    // The longest chord through the support is the image side.
    return 4.0 / geo.image_side();
}

tomo::Sinogram add_transmission_noise(const tomo::Sinogram& clean, double photons, Rng& rng)
{
    if (!(photons > 0.0)) throw std::invalid_argument("photon count must be positive");
    const double alpha = attenuation_scale(*clean.geometry);
    tomo::Sinogram noisy(clean.geometry);
    for (std::size_t i = 0; i < clean.data.size(); ++i) {
        const double mean = photons * std::exp(-alpha * clean.data[i]);
        const auto counts = std::poisson_distribution<long long>(mean)(rng);
        const double c = std::max(static_cast<double>(counts), 1.0);
        noisy.data[i] = -std::log(c / photons) / alpha;
    }
    return noisy;
}

LowDose simulate_low_dose(const tomo::Image& full_dose, const tomo::GeometryPtr& geo, double photons,
                          std::uint64_t seed)
{
    if (!(photons > 0.0)) throw std::invalid_argument("photon count must be positive");
    const tomo::Sinogram clean = tomo::forward_project(full_dose, geo);
    Rng rng = make_rng({seed, stream::noise});
    LowDose out{add_transmission_noise(clean, photons, rng), {}};
    out.image = tomo::filtered_back_project(out.sinogram);
    return out;
}

ProtocolVector make_protocol_vector(int num_views, double photons, const tomo::ProjectionGeometry& geo,
                                    const ProtocolRanges& ranges)
{
    if (num_views < ranges.views_min || num_views > ranges.views_max)
        throw std::invalid_argument("num_views " + std::to_string(num_views) + " outside configured range [" +
                                    std::to_string(ranges.views_min) + ", " + std::to_string(ranges.views_max) +
                                    "]");
    if (!(photons > 0.0)) throw std::invalid_argument("photon count must be positive");
    if (photons < ranges.photons_min || photons > ranges.photons_max)
        throw std::invalid_argument("photon count outside configured range");
    const int bins_min = ranges.bins_min > 0 ? ranges.bins_min
                                             : static_cast<int>(std::ceil(geo.image_side() * std::numbers::sqrt2));
    const int bins_max = ranges.bins_max > 0 ? ranges.bins_max : 2 * bins_min;
    if (geo.n_bins() < bins_min || geo.n_bins() > bins_max)
        throw std::invalid_argument("detector bin count outside configured range");

    const auto angles = geo.angles();
    const double coverage = angles.back() - angles.front() + std::numbers::pi / geo.n_angles();

    ProtocolVector p;
    p.num_views = num_views;
    p.photons = photons;
    p.values[0] = normalize(num_views, ranges.views_min, ranges.views_max);
    p.values[1] = normalize(photons, ranges.photons_min, ranges.photons_max);
    p.values[2] = normalize(geo.n_bins(), bins_min, bins_max);
    p.values[3] = normalize(std::log(photons), std::log(ranges.photons_min), std::log(ranges.photons_max));
    p.values[4] = normalize(std::log(num_views * photons), std::log(ranges.views_min * ranges.photons_min),
                            std::log(ranges.views_max * ranges.photons_max));
    p.values[5] = std::clamp(coverage / std::numbers::pi, 0.0, 1.0);
    p.values[6] = geo.window() == tomo::FilterWindow::Hann ? 1.0 : 0.0;
    return p;
}

std::array<double, kDescriptorDim> anatomy_descriptor(const tomo::Image& img)
{
    std::array<double, kDescriptorDim> d{};
    const int H = img.side;
    const double n = static_cast<double>(img.size());

    for (double v : img.data) {
        const int bin = std::clamp(static_cast<int>(v * 16.0), 0, 15);
        d[bin] += 1.0 / n;
    }

    std::array<double, 8> ring_sum{};
    std::array<double, 8> ring_count{};
    const double c = 0.5 * (H - 1);
    const double rmax = 0.5 * H;
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < H; ++j) {
            const double r = std::hypot(i - c, j - c) / rmax;
            const int ring = std::min(7, static_cast<int>(r * 8.0));
            ring_sum[ring] += img.at(i, j);
            ring_count[ring] += 1.0;
        }
    }
    for (int k = 0; k < 8; ++k) d[16 + k] = ring_count[k] > 0 ? ring_sum[k] / ring_count[k] : 0.0;

    double mean = 0.0;
    for (double v : img.data) mean += v;
    mean /= n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : img.data) {
        const double e = v - mean;
        m2 += e * e;
        m3 += e * e * e;
        m4 += e * e * e * e;
    }
    d[24] = mean;
    d[25] = m2 / n;
    d[26] = m3 / n;
    d[27] = m4 / n;

    std::vector<double> grad;
    grad.reserve(static_cast<std::size_t>(H - 1) * (H - 1));
    for (int i = 0; i + 1 < H; ++i)
        for (int j = 0; j + 1 < H; ++j)
            grad.push_back(std::hypot(img.at(i + 1, j) - img.at(i, j), img.at(i, j + 1) - img.at(i, j)));
    double gmean = 0.0, gmax = 0.0, above = 0.0;
    for (double g : grad) {
        gmean += g;
        gmax = std::max(gmax, g);
        if (g > 0.1) above += 1.0;
    }
    gmean /= static_cast<double>(grad.size());
    double gvar = 0.0;
    for (double g : grad) gvar += (g - gmean) * (g - gmean);
    d[28] = gmean;
    d[29] = std::sqrt(gvar / static_cast<double>(grad.size()));
    d[30] = gmax;
    d[31] = above / static_cast<double>(grad.size());
    return d;
}

AnatomyFeature make_anatomy_feature(const tomo::Image& full_dose, int dim, std::uint64_t seed)
{
    if (dim < 1) throw std::invalid_argument("anatomy dimension must be >= 1");
    const auto desc = anatomy_descriptor(full_dose);
    Rng rng = make_rng({seed, stream::projection, static_cast<std::uint64_t>(dim)});
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(kDescriptorDim)));
    AnatomyFeature f;
    f.values.assign(dim, 0.0);
    for (int r = 0; r < dim; ++r)
        for (int k = 0; k < kDescriptorDim; ++k) f.values[r] += gauss(rng) * desc[k];
    double norm = 0.0;
    for (double v : f.values) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("anatomy descriptor projected to zero");
    for (double& v : f.values) v /= norm;
    return f;
}

std::vector<ProtocolSetting> default_protocol_grid(int clients, const ProtocolRanges& ranges)
{
    if (clients < 1) throw std::invalid_argument("client count must be >= 1");
    std::vector<ProtocolSetting> grid;
    const double lv = ranges.views_min, hv = ranges.views_max;
    const double lp = std::log(ranges.photons_min), hp = std::log(ranges.photons_max);
    for (int k = 0; k < clients; ++k) {
        // Keep clear of the range ends so unseen settings can sit between grid points.
        const double f = clients == 1 ? 0.5 : (k + 0.5) / clients;
        const int views = static_cast<int>(std::lround(lv + f * (hv - lv)));
        const double photons = std::round(std::exp(hp - f * (hp - lp)));
        grid.push_back({views, photons});
    }
    return grid;
}

std::vector<ClientDataset> build_client_datasets(const DatasetConfig& cfg)
{
    if (cfg.protocols.empty()) throw std::invalid_argument("no client protocols configured");
    if (cfg.train_per_client < 2) throw std::invalid_argument("each client needs at least 2 training samples");
    if (cfg.val_per_client < 1) throw std::invalid_argument("each client needs a validation split");
    for (std::size_t i = 0; i < cfg.protocols.size(); ++i)
        for (std::size_t j = i + 1; j < cfg.protocols.size(); ++j)
            if (cfg.protocols[i] == cfg.protocols[j])
                throw std::invalid_argument("duplicate protocol configuration for clients " + std::to_string(i) +
                                            " and " + std::to_string(j));

    std::vector<ClientDataset> out;
    for (std::size_t k = 0; k < cfg.protocols.size(); ++k) {
        const ProtocolSetting& ps = cfg.protocols[k];
        const int id = cfg.first_client_id + static_cast<int>(k);
        ClientDataset ds;
        ds.client_id = id;
        ds.geometry = std::make_shared<const tomo::ProjectionGeometry>(
            tomo::ProjectionGeometry::parallel(cfg.image_side, ps.num_views, 1.0, cfg.window));
        ds.protocol = make_protocol_vector(ps.num_views, ps.photons, *ds.geometry, cfg.ranges);
        ds.kind = id % 2 == 0 ? PhantomKind::RandomEllipses : PhantomKind::Disks;

        auto make_split = [&](int split, int count) {
            std::vector<Sample> samples;
            for (int i = 0; i < count; ++i) {
                // Disjoint per (client, split) seed ranges.
                const std::uint64_t phantom_seed = (cfg.master_seed << 32) ^
                                                   (static_cast<std::uint64_t>(id) * 1'000'000u +
                                                    static_cast<std::uint64_t>(split) * 100'000u +
                                                    static_cast<std::uint64_t>(i));
                Sample s;
                s.full_dose = make_phantom(ds.kind, cfg.image_side, phantom_seed);
                LowDose ld = simulate_low_dose(s.full_dose, ds.geometry, ps.photons, phantom_seed);
                s.sinogram = std::move(ld.sinogram);
                s.low_dose = std::move(ld.image);
                s.protocol = ds.protocol;
                s.anatomy = make_anatomy_feature(s.full_dose, cfg.anatomy_dim, cfg.master_seed);
                samples.push_back(std::move(s));
            }
            return samples;
        };
        ds.train = make_split(0, cfg.train_per_client);
        ds.val = make_split(1, cfg.val_per_client);
        ds.test = make_split(2, cfg.test_per_client);
        out.push_back(std::move(ds));
    }
    return out;
}

} // namespace profed::phantoms
