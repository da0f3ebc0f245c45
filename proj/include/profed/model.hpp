#pragma once

// Dual-adaptation denoiser.
//
//   z     = E(I_LD)                                  encoder, C channels at side / 4
//   γa,βa = H_alpha(a)                               anatomy MLP, γa = 1 + tanh(.)
//   e_p   = MLP_xi(p);  γp,βp = Proj(e_p)            protocol path, γp = 1 + tanh(.)
//   g     = sigmoid(FC_g(a))
//   γ,β   = g (γa,βa) + (1 - g) (γp,βp)
//   Î     = I_LD + D(dropout(γ z + β), skip)         decoder with LoRA on its two widest layers
//   σ²    = softplus(V(I_LD, p)) + 1e-6              variance head
//
// The last layer of H_alpha, Proj, FC_g and the variance head start at zero and
// every LoRA B factor starts at zero, so at initialization modulation and
// adapters are exact no-ops. The decoder's output layer also starts at zero,
// so the initial prediction is I_LD itself.

#include "profed/nn.hpp"
#include "profed/phantoms.hpp"

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace profed::model {

using nn::Tensor4;

// Which side-information paths drive the modulation.
enum class GateMode {
    Learned,       // g = sigmoid(FC_g(a))
    AnatomyOnly,   // g = 1
    ProtocolOnly,  // g = 0
    Off            // γ = 1, β = 0
};

struct ModelConfig {
    int latent_channels = 16;
    int anatomy_dim = 32;
    int anatomy_hidden = 32;
    int lora_rank = 8;
    bool use_lora = true;
    double dropout_rate = 0.1;
    GateMode gate = GateMode::Learned;
    bool lora_local = false;
    bool protocol_local = false;
    bool all_shared = false;  // put every parameter in the shared partition
    std::optional<double> gate_logit;  // pins the gate logit (probing only)
};

using ProtocolValues = std::array<double, phantoms::kProtocolDim>;

struct ModulationParams {
    std::vector<double> gamma, beta;
    std::vector<double> gamma_a, beta_a;
    std::vector<double> gamma_p, beta_p;
    double gate = 0.5;
};

struct ModelInput {
    Tensor4 low_dose;  // (n, 1, side, side)
    std::vector<ProtocolValues> protocol;
    std::vector<std::vector<double>> anatomy;

    int batch() const { return low_dose.n; }
};

ModelInput make_input(std::span<const phantoms::Sample* const> samples);
ModelInput make_input(const phantoms::Sample& sample);

struct ModelOutput {
    Tensor4 image;     // raw decoder output (n, 1, side, side)
    Tensor4 variance;  // (n, 1, side, side); empty unless requested
    std::vector<ModulationParams> modulation;
};

struct ForwardOptions {
    bool variance = true;
    bool plain = false;  // skip modulation and adapters: the bare encoder-decoder
};

// Saved activations of one forward pass.
struct ForwardCache {
    nn::Context e1, e1r, e2, e2r, e3, e3r;
    nn::Context a1, a1r, a2, p1, p1r, p2, proj, gate;
    nn::Context drop, d1, d1r, up, d2, d2r, d3;
    nn::Context v1, v1r, v2, v2r, v3;
    Tensor4 z;
    Tensor4 v3_out;
    std::vector<ModulationParams> modulation;
    bool modulated = false;
    bool gate_learned = false;
    bool uses_anatomy = false;
    bool uses_protocol = false;
    bool variance = false;
};

class Denoiser {
public:
    explicit Denoiser(const ModelConfig& cfg);
    ~Denoiser();
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;

    const ModelConfig& config() const noexcept { return cfg_; }
    nn::ParamStore& params() noexcept { return store_; }
    const nn::ParamStore& params() const noexcept { return store_; }

    void initialize(std::uint64_t seed);
    void set_gate_logit(std::optional<double> logit) { cfg_.gate_logit = logit; }

    // Individual stages, evaluated without saving state.
    Tensor4 encode(const Tensor4& low_dose) const;
    std::pair<std::vector<double>, std::vector<double>> anatomy_modulation(std::span<const double> a) const;
    struct ProtocolEmbedding {
        std::vector<double> e_p, gamma_p, beta_p;
    };
    ProtocolEmbedding protocol_modulation(const ProtocolValues& p) const;
    ModulationParams gate_and_blend(std::span<const double> a, std::vector<double> gamma_a,
                                    std::vector<double> beta_a, std::vector<double> gamma_p,
                                    std::vector<double> beta_p) const;
    static Tensor4 modulate(const Tensor4& z, std::span<const ModulationParams> m);
    Tensor4 predict_variance(const Tensor4& low_dose, std::span<const ProtocolValues> p) const;

    // Full forward. Pass a cache to enable backward.
    ModelOutput forward(const ModelInput& in, const nn::Mode& mode, ForwardCache* cache = nullptr,
                        const ForwardOptions& opts = {}) const;

    // Accumulates parameter gradients for d loss / d image and d loss / d variance
    // (the latter may be empty when the variance head was not run).
    void backward(const ForwardCache& cache, const Tensor4& grad_image, const Tensor4& grad_variance);

    // Evaluation-mode prediction clamped to [0, 1].
    tomo::Image predict(const phantoms::Sample& sample) const;

private:
    void check_input(const ModelInput& in) const;

    ModelConfig cfg_;
    nn::ParamStore store_;
    struct Layers;
    std::unique_ptr<Layers> layers_;
};

tomo::Image to_image(const Tensor4& t, int index, bool clamp);
Tensor4 from_images(std::span<const tomo::Image* const> images);

} // namespace profed::model
