#pragma once

// Training objectives on single images. Every squared norm is a mean over
// pixels (or sinogram bins).

#include "profed/tomo.hpp"

namespace profed::losses {

using tomo::Image;
using tomo::Sinogram;

struct LossWeights {
    double forward = 1.0;
    double backward = 1.0;
    double cycle = 1.0;
    double recon = 1.0;
    double het = 0.1;
    double proj = 0.1;

    // Throws std::invalid_argument if any weight is negative or all are zero.
    void validate() const;
};

struct LossReport {
    double recon = 0.0;
    double het = 0.0;
    double forward = 0.0;
    double backward = 0.0;
    double cycle = 0.0;
    double projection = 0.0;
    double total = 0.0;
};

double recon_loss(const Image& pred, const Image& target);
double het_loss(const Image& pred, const Image& target, const Image& variance);
double forward_loss(const Image& pred, const Sinogram& measured);
// `target` is filtered_back_project(measured), constant with respect to pred.
double backward_loss(const Image& pred, const Image& target);
double backward_loss(const Image& pred, const Sinogram& measured);
double cycle_loss(const Image& pred, const tomo::GeometryPtr& geo);

double projection_loss(const Image& pred, const Sinogram& measured, const LossWeights& w);
double projection_loss(const LossReport& r, const LossWeights& w);
double total_loss(const LossReport& r, const LossWeights& w);

// Gradients of the individual terms with respect to pred (and variance).
Image recon_grad(const Image& pred, const Image& target);
void het_grad(const Image& pred, const Image& target, const Image& variance, Image& grad_pred, Image& grad_var);
Image forward_grad(const Image& pred, const Sinogram& measured);
Image backward_grad(const Image& pred, const Image& target);
Image cycle_grad(const Image& pred, const tomo::GeometryPtr& geo);

struct ObjectiveTerms {
    const Image* full_dose = nullptr;
    const Sinogram* measured = nullptr;
    const Image* fbp_target = nullptr;  // filtered_back_project(*measured)
};

struct Objective {
    LossReport report;
    Image grad_pred;
    Image grad_var;  // empty when no variance map was given
};

// Full weighted objective with gradients. Terms with zero weight contribute no
// gradient but are still reported; `variance` may be null when the het weight is 0.
Objective evaluate_objective(const Image& pred, const Image* variance, const ObjectiveTerms& terms,
                             const LossWeights& w, bool with_grad = true);

} // namespace profed::losses
