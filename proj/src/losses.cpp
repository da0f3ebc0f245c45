#include "profed/losses.hpp"

#include "profed/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace profed::losses {

namespace {

void same_shape(const Image& a, const Image& b, const char* what)
{
    if (a.side != b.side || a.data.size() != b.data.size())
        throw DimensionError(std::string(what) + ": image sides " + std::to_string(a.side) + " and " +
                             std::to_string(b.side) + " differ");
}

double mean_sq_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

Sinogram residual(const Image& pred, const Sinogram& measured)
{
    if (!measured.geometry) throw DimensionError("measured sinogram has no geometry");
    Sinogram r = tomo::forward_project(pred, measured.geometry);
    if (r.data.size() != measured.data.size()) throw DimensionError("sinogram size does not match the geometry");
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= measured.data[i];
    return r;
}

Image cycle_residual(const Image& pred, const tomo::GeometryPtr& geo, const Sinogram* projected)
{
    const Image back = tomo::filtered_back_project(projected ? *projected : tomo::forward_project(pred, geo));
    Image r = pred;
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= back.data[i];
    return r;
}

// 2/n (r - A^T r) with A = FBP o R; A is symmetric because the ramp filter is.
Image cycle_grad_from_residual(const Image& r, const tomo::GeometryPtr& geo)
{
    const Image ar = tomo::filtered_back_project(tomo::forward_project(r, geo));
    Image g = r;
    const double k = 2.0 / static_cast<double>(r.data.size());
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = k * (r.data[i] - ar.data[i]);
    return g;
}

void axpy(Image& y, double a, const Image& x)
{
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

} // namespace

void LossWeights::validate() const
{
    const double all[] = {forward, backward, cycle, recon, het, proj};
    bool any = false;
    for (double v : all) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
        any = any || v > 0.0;
    }
    if (!any) throw std::invalid_argument("at least one loss weight must be positive");
}

double recon_loss(const Image& pred, const Image& target)
{
    same_shape(pred, target, "recon_loss");
    return mean_sq_diff(pred.data, target.data);
}

double het_loss(const Image& pred, const Image& target, const Image& variance)
{
    same_shape(pred, target, "het_loss");
    same_shape(pred, variance, "het_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double v = variance.data[i];
        if (!(v > 0.0)) throw std::invalid_argument("variance must be positive");
        const double d = pred.data[i] - target.data[i];
        s += d * d / (2.0 * v) + 0.5 * std::log(v);
    }
    return s / static_cast<double>(pred.data.size());
}

double forward_loss(const Image& pred, const Sinogram& measured)
{
    const Sinogram r = residual(pred, measured);
    double s = 0.0;
    for (double v : r.data) s += v * v;
    return s / static_cast<double>(r.data.size());
}

double backward_loss(const Image& pred, const Image& target)
{
    same_shape(pred, target, "backward_loss");
    return mean_sq_diff(pred.data, target.data);
}

double backward_loss(const Image& pred, const Sinogram& measured)
{
    return backward_loss(pred, tomo::filtered_back_project(measured));
}

double cycle_loss(const Image& pred, const tomo::GeometryPtr& geo)
{
    const Image r = cycle_residual(pred, geo, nullptr);
    double s = 0.0;
    for (double v : r.data) s += v * v;
    return s / static_cast<double>(r.data.size());
}

double projection_loss(const Image& pred, const Sinogram& measured, const LossWeights& w)
{
    LossReport r;
    r.forward = forward_loss(pred, measured);
    r.backward = backward_loss(pred, measured);
    r.cycle = cycle_loss(pred, measured.geometry);
    return projection_loss(r, w);
}

double projection_loss(const LossReport& r, const LossWeights& w)
{
    return w.forward * r.forward + w.backward * r.backward + w.cycle * r.cycle;
}

double total_loss(const LossReport& r, const LossWeights& w)
{
    return w.recon * r.recon + w.het * r.het + w.proj * r.projection;
}

Image recon_grad(const Image& pred, const Image& target)
{
    same_shape(pred, target, "recon_grad");
    Image g(pred.side);
    const double k = 2.0 / static_cast<double>(pred.data.size());
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = k * (pred.data[i] - target.data[i]);
    return g;
}

void het_grad(const Image& pred, const Image& target, const Image& variance, Image& grad_pred, Image& grad_var)
{
    same_shape(pred, target, "het_grad");
    same_shape(pred, variance, "het_grad");
    const double n = static_cast<double>(pred.data.size());
    grad_pred = Image(pred.side);
    grad_var = Image(pred.side);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double v = variance.data[i];
        if (!(v > 0.0)) throw std::invalid_argument("variance must be positive");
        const double d = pred.data[i] - target.data[i];
        grad_pred.data[i] = d / (v * n);
        grad_var.data[i] = (0.5 / v - 0.5 * d * d / (v * v)) / n;
    }
}

Image forward_grad(const Image& pred, const Sinogram& measured)
{
    Sinogram r = residual(pred, measured);
    const double k = 2.0 / static_cast<double>(r.data.size());
    for (double& v : r.data) v *= k;
    return tomo::back_project(r);
}

Image backward_grad(const Image& pred, const Image& target)
{
    return recon_grad(pred, target);
}

Image cycle_grad(const Image& pred, const tomo::GeometryPtr& geo)
{
    return cycle_grad_from_residual(cycle_residual(pred, geo, nullptr), geo);
}

Objective evaluate_objective(const Image& pred, const Image* variance, const ObjectiveTerms& terms,
                             const LossWeights& w, bool with_grad)
{
    if (!terms.full_dose || !terms.measured || !terms.fbp_target) throw std::invalid_argument("incomplete objective terms");
    const Image& target = *terms.full_dose;
    const Sinogram& measured = *terms.measured;
    const tomo::GeometryPtr& geo = measured.geometry;
    same_shape(pred, target, "objective");

    Objective out;
    LossReport& r = out.report;
    r.recon = recon_loss(pred, target);
    if (variance) r.het = het_loss(pred, target, *variance);

    const Sinogram projected = tomo::forward_project(pred, geo);
    if (projected.data.size() != measured.data.size()) throw DimensionError("sinogram size does not match the geometry");
    Sinogram res = projected;
    double fs = 0.0;
    for (std::size_t i = 0; i < res.data.size(); ++i) {
        res.data[i] -= measured.data[i];
        fs += res.data[i] * res.data[i];
    }
    r.forward = fs / static_cast<double>(res.data.size());
    r.backward = backward_loss(pred, *terms.fbp_target);
    const Image cyc = cycle_residual(pred, geo, &projected);
    double cs = 0.0;
    for (double v : cyc.data) cs += v * v;
    r.cycle = cs / static_cast<double>(cyc.data.size());
    r.projection = projection_loss(r, w);
    r.total = total_loss(r, w);
    if (!std::isfinite(r.total)) throw NumericError("non-finite loss");
    if (!with_grad) return out;

    out.grad_pred = Image(pred.side);
    if (w.recon > 0.0) axpy(out.grad_pred, w.recon, recon_grad(pred, target));
    if (variance && w.het > 0.0) {
        Image gp, gv;
        het_grad(pred, target, *variance, gp, gv);
        axpy(out.grad_pred, w.het, gp);
        for (double& v : gv.data) v *= w.het;
        out.grad_var = std::move(gv);
    } else if (variance) {
        out.grad_var = Image(pred.side);
    }
    if (w.proj > 0.0) {
        if (w.forward > 0.0) {
            const double k = 2.0 / static_cast<double>(res.data.size());
            Sinogram scaled = res;
            for (double& v : scaled.data) v *= k;
            axpy(out.grad_pred, w.proj * w.forward, tomo::back_project(scaled));
        }
        if (w.backward > 0.0) axpy(out.grad_pred, w.proj * w.backward, backward_grad(pred, *terms.fbp_target));
        if (w.cycle > 0.0) axpy(out.grad_pred, w.proj * w.cycle, cycle_grad_from_residual(cyc, geo));
    }
    return out;
}

} // namespace profed::losses
