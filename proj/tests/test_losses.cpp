#include "doctest.h"

#include "profed/errors.hpp"
#include "profed/losses.hpp"
#include "profed/model.hpp"
#include "profed/nn.hpp"
#include "profed/phantoms.hpp"

#include <cmath>
#include <numbers>

using namespace profed;
using namespace profed::losses;

namespace {

tomo::GeometryPtr geo(int side, int views)
{
    return std::make_shared<const tomo::ProjectionGeometry>(tomo::ProjectionGeometry::parallel(side, views));
}

Image random_image(int side, std::uint64_t seed, double lo = 0.0, double hi = 1.0)
{
    Rng rng = make_rng({seed});
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(side);
    for (double& v : img.data) v = u(rng);
    return img;
}

// Central-difference check of an image-domain gradient, with the image exposed as a parameter.
double image_grad_error(Image x, const std::function<double(const Image&)>& f,
                        const std::function<Image(const Image&)>& grad)
{
    nn::ParamStore s;
    const std::size_t p = s.add("img", {x.side, x.side}, nn::Partition::Shared, nn::Init::Zero);
    s[p].value = x.data;
    auto current = [&] {
        Image y(x.side);
        y.data = s[p].value;
        return y;
    };
    const auto r = nn::check_gradients(
        s, [&] { return f(current()); },
        [&] {
            const Image g = grad(current());
            for (std::size_t i = 0; i < g.data.size(); ++i) s[p].grad[i] += g.data[i];
        },
        200, 1e-4, 3);
    CHECK(r.kinks == 0);
    return r.max_rel_error;
}

} // namespace

TEST_CASE("recon_loss")
{
    const Image a = random_image(16, 1);
    CHECK(recon_loss(a, a) == 0.0);
    Image shifted = a;
    for (double& v : shifted.data) v += 0.125;
    CHECK(recon_loss(shifted, a) == doctest::Approx(0.125 * 0.125).epsilon(1e-12));
    const Image b = random_image(16, 2);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    CHECK(recon_loss(a, b) == doctest::Approx(s / a.size()).epsilon(1e-14));
    CHECK_THROWS_AS(recon_loss(a, Image(8)), DimensionError);
}

TEST_CASE("het_loss")
{
    const Image a = random_image(16, 3), b = random_image(16, 4);
    CHECK(het_loss(a, b, Image(16, 1.0)) == doctest::Approx(recon_loss(a, b) / 2).epsilon(1e-14));
    CHECK(het_loss(a, a, Image(16, std::numbers::e)) == doctest::Approx(0.5).epsilon(1e-14));

    const Image v = random_image(16, 5, 0.01, 3.0);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d / (2 * v.data[i]) + 0.5 * std::log(v.data[i]);
    }
    CHECK(std::abs(het_loss(a, b, v) - s / a.size()) <= 1e-12 * std::abs(s / a.size()));

    Image bad = v;
    bad.data[7] = 0.0;
    CHECK_THROWS_AS(het_loss(a, b, bad), std::invalid_argument);

    CHECK(image_grad_error(a, [&](const Image& x) { return het_loss(x, b, v); },
                           [&](const Image& x) {
                               Image gp, gv;
                               het_grad(x, b, v, gp, gv);
                               return gp;
                           }) <= 1e-3);
    CHECK(image_grad_error(v, [&](const Image& x) { return het_loss(a, b, x); },
                           [&](const Image& x) {
                               Image gp, gv;
                               het_grad(a, b, x, gp, gv);
                               return gv;
                           }) <= 1e-3);
}

TEST_CASE("forward_loss: fixed point, gradient and quadratic scaling")
{
    const auto g = geo(8, 12);
    const Image truth = random_image(8, 6);
    const Sinogram measured = tomo::forward_project(truth, g);
    CHECK(forward_loss(truth, measured) == 0.0);

    const Image x = random_image(8, 7);
    CHECK(image_grad_error(x, [&](const Image& y) { return forward_loss(y, measured); },
                           [&](const Image& y) { return forward_grad(y, measured); }) <= 1e-3);

    const Image d = random_image(8, 8, -1.0, 1.0);
    auto at = [&](double t) {
        Image y = truth;
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += t * d.data[i];
        return forward_loss(y, measured);
    };
    CHECK(at(0.2) == doctest::Approx(4.0 * at(0.1)).epsilon(1e-10));
}

TEST_CASE("backward_loss: fixed point and exact gradient")
{
    const auto g = geo(16, 30);
    const Sinogram measured = tomo::forward_project(random_image(16, 9), g);
    const Image target = tomo::filtered_back_project(measured);
    CHECK(backward_loss(target, measured) == 0.0);
    const Image x = random_image(16, 10);
    CHECK(backward_loss(x, measured) == backward_loss(x, target));
    const Image grad = backward_grad(x, target);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(grad.data[i] == 2.0 * (x.data[i] - target.data[i]) / x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x.data[i] - target.data[i]) * (x.data[i] - target.data[i]);
    CHECK(backward_loss(x, target) == doctest::Approx(s / x.size()).epsilon(1e-14));
}

TEST_CASE("cycle_loss: zero image, gradient and view sweep")
{
    CHECK(cycle_loss(Image(8), geo(8, 10)) == 0.0);
    const auto g = geo(8, 10);
    const Image x = random_image(8, 11);
    CHECK(image_grad_error(x, [&](const Image& y) { return cycle_loss(y, g); },
                           [&](const Image& y) { return cycle_grad(y, g); }) <= 1e-3);

    // Smoothed phantom: closer to the fixed-point set as views increase.
    Image ph = phantoms::make_phantom(phantoms::PhantomKind::SheppLogan, 64, 0);
    Image smooth(64);
    for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) {
            double s = 0.0;
            int n = 0;
            for (int di = -2; di <= 2; ++di)
                for (int dj = -2; dj <= 2; ++dj) {
                    const int a = i + di, b = j + dj;
                    if (a < 0 || a >= 64 || b < 0 || b >= 64) continue;
                    s += ph.at(a, b);
                    ++n;
                }
            smooth.at(i, j) = tomo::inside_support(64, i, j) ? s / n : 0.0;
        }
    double previous = 1e9;
    for (int views : {30, 90, 360}) {
        const double c = cycle_loss(smooth, geo(64, views));
        CAPTURE(views);
        CHECK(c < previous);
        previous = c;
    }
    CHECK(previous < 1e-2 * recon_loss(smooth, Image(64)));
}

TEST_CASE("projection and total losses combine exactly")
{
    const auto g = geo(16, 20);
    const Image truth = phantoms::make_phantom(phantoms::PhantomKind::Disks, 16, 3);
    const Sinogram measured = tomo::forward_project(truth, g);
    const Image x = random_image(16, 12);
    const double f = forward_loss(x, measured), b = backward_loss(x, measured), c = cycle_loss(x, g);

    LossWeights all;
    CHECK(projection_loss(x, measured, all) == doctest::Approx(f + b + c).epsilon(1e-12));
    LossWeights none{0, 0, 0, 1, 0, 0};
    CHECK(projection_loss(x, measured, none) == 0.0);
    LossWeights only_f{1, 0, 0, 1, 0, 0};
    CHECK(projection_loss(x, measured, only_f) == f);

    LossReport r;
    r.recon = 0.3;
    r.het = -0.2;
    r.projection = 1.7;
    CHECK(total_loss(r, LossWeights{1, 1, 1, 1, 0, 0}) == 0.3);
    CHECK(total_loss(r, LossWeights{1, 1, 1, 0, 0, 1}) == 1.7);
    const double base = total_loss(r, LossWeights{1, 1, 1, 1, 0.1, 0.1});
    const double doubled = total_loss(r, LossWeights{1, 1, 1, 1, 0.2, 0.1});
    CHECK(doubled - base == doctest::Approx(0.1 * r.het).epsilon(1e-12));

    CHECK_THROWS_AS(LossWeights({-1, 0, 0, 1, 0, 0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(LossWeights({0, 0, 0, 0, 0, 0}).validate(), std::invalid_argument);
    CHECK_NOTHROW(LossWeights{}.validate());
}

TEST_CASE("objective report: non-negative terms and exact decomposition")
{
    const auto g = geo(16, 24);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Image truth = phantoms::make_phantom(phantoms::PhantomKind::RandomEllipses, 16, seed);
        const phantoms::LowDose ld = phantoms::simulate_low_dose(truth, g, 1e5, seed);
        const Image pred = random_image(16, 100 + seed);
        const Image var = random_image(16, 200 + seed, 0.05, 2.0);
        ObjectiveTerms terms{&truth, &ld.sinogram, &ld.image};
        LossWeights w;
        const Objective o = evaluate_objective(pred, &var, terms, w);
        const LossReport& r = o.report;
        CHECK(r.recon >= 0.0);
        CHECK(r.forward >= 0.0);
        CHECK(r.backward >= 0.0);
        CHECK(r.cycle >= 0.0);
        CHECK(std::abs(r.projection - (r.forward + r.backward + r.cycle)) <= 1e-10);
        CHECK(std::abs(r.total - (w.recon * r.recon + w.het * r.het + w.proj * r.projection)) <= 1e-10);
        CHECK(r.recon == recon_loss(pred, truth));
        CHECK(r.het == het_loss(pred, truth, var));
        CHECK(r.forward == doctest::Approx(forward_loss(pred, ld.sinogram)).epsilon(1e-12));
        CHECK(r.cycle == doctest::Approx(cycle_loss(pred, g)).epsilon(1e-12));
    }
}

TEST_CASE("full objective gradient through the model on a 16x16 instance")
{
    const auto g = geo(16, 20);
    phantoms::ProtocolRanges ranges;
    ranges.views_min = 10;
    std::vector<phantoms::Sample> batch;
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
        phantoms::Sample s;
        s.full_dose = phantoms::make_phantom(phantoms::PhantomKind::Disks, 16, seed);
        const phantoms::LowDose ld = phantoms::simulate_low_dose(s.full_dose, g, 2e5, seed);
        s.low_dose = ld.image;
        s.sinogram = ld.sinogram;
        s.protocol = phantoms::make_protocol_vector(20, 2e5, *g, ranges);
        s.anatomy = phantoms::make_anatomy_feature(s.full_dose, 8, 1);
        batch.push_back(s);
    }
    model::ModelConfig cfg;
    cfg.latent_channels = 4;
    cfg.anatomy_dim = 8;
    cfg.anatomy_hidden = 4;
    model::Denoiser m(cfg);
    m.initialize(5);
    {
        Rng rng = make_rng({6});
        std::normal_distribution<double> n(0.0, 0.2);
        for (auto& p : m.params().params())
            if (p.init == nn::Init::Zero)
                for (double& v : p.value) v = n(rng);
        m.params().touch();
    }
    const phantoms::Sample* ptrs[] = {&batch[0], &batch[1]};
    const model::ModelInput in = model::make_input(ptrs);
    const LossWeights w{1.0, 1.0, 1.0, 1.0, 0.1, 0.1};

    auto objective = [&](model::ForwardCache* cache, model::Tensor4* gi, model::Tensor4* gv) {
        const model::ModelOutput out = m.forward(in, {}, cache);
        double total = 0.0;
        if (gi) {
            *gi = out.image;
            *gv = out.variance;
        }
        for (int b = 0; b < 2; ++b) {
            const Image pred = model::to_image(out.image, b, false);
            const Image var = model::to_image(out.variance, b, false);
            ObjectiveTerms terms{&batch[b].full_dose, &batch[b].sinogram, &batch[b].low_dose};
            const Objective o = evaluate_objective(pred, &var, terms, w, gi != nullptr);
            total += o.report.total / 2;
            if (gi) {
                for (std::size_t i = 0; i < pred.size(); ++i) {
                    gi->channel(b, 0)[i] = o.grad_pred.data[i] / 2;
                    gv->channel(b, 0)[i] = o.grad_var.data[i] / 2;
                }
            }
        }
        return total;
    };
    const auto r = nn::check_gradients(
        m.params(), [&] { return objective(nullptr, nullptr, nullptr); },
        [&] {
            model::ForwardCache cache;
            model::Tensor4 gi, gv;
            objective(&cache, &gi, &gv);
            m.backward(cache, gi, gv);
        },
        200, 1e-4, 7);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error <= 1e-3);
    CHECK(r.kinks * 20 <= r.checked);
}
