#include "profed/model.hpp"

#include "profed/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace profed::model {

using nn::Activation;
using nn::Context;
using nn::Init;
using nn::Partition;

struct Denoiser::Layers {
    nn::Conv2d e1, e2, e3;
    nn::Linear a1, a2;
    nn::Linear p1, p2, proj;
    nn::Linear gate;
    nn::ConvTranspose2d d1;
    nn::Upsample2x up;
    nn::Conv2d d2, d3;
    nn::Conv2d v1, v2, v3;
    nn::Pointwise relu{Activation::ReLU};
    nn::Dropout drop;

    Layers(nn::ParamStore& s, const ModelConfig& c, Partition shared, Partition local, Partition protocol)
        : e1(s, "enc1", 1, 8, 3, 1, 1, shared),
          e2(s, "enc2", 8, 16, 3, 2, 1, shared),
          e3(s, "enc3", 16, c.latent_channels, 3, 2, 1, shared),
          a1(s, "anat1", c.anatomy_dim, c.anatomy_hidden, local),
          a2(s, "anat2", c.anatomy_hidden, 2 * c.latent_channels, local, Init::Zero),
          p1(s, "proto1", phantoms::kProtocolDim, c.latent_channels, protocol),
          p2(s, "proto2", c.latent_channels, c.latent_channels, protocol),
          proj(s, "proto_proj", c.latent_channels, 2 * c.latent_channels, protocol, Init::Zero),
          gate(s, "gate", c.anatomy_dim, 1, local, Init::Zero),
          d1(s, "dec1", c.latent_channels, 16, 3, 2, 1, 1, shared),
          d2(s, "dec2", 16, 8, 3, 1, 1, shared),
          d3(s, "dec3", 8, 1, 3, 1, 1, shared, Init::Zero),
          v1(s, "var1", 1 + phantoms::kProtocolDim, 4, 3, 1, 1, shared),
          v2(s, "var2", 4, 4, 3, 1, 1, shared),
          v3(s, "var3", 4, 1, 3, 1, 1, shared, Init::Zero),
          drop(c.dropout_rate)
    {
    }
};

namespace {

constexpr double kVarianceFloor = 1e-6;

Tensor4 relu_fwd(const nn::Pointwise& relu, const nn::ParamStore& s, const Tensor4& x, Context& ctx)
{
    return relu.forward(s, x, ctx, {});
}

Tensor4 vectors_to_tensor(const std::vector<std::vector<double>>& v, int dim)
{
    Tensor4 t(static_cast<int>(v.size()), dim, 1, 1);
    for (std::size_t b = 0; b < v.size(); ++b) {
        if (static_cast<int>(v[b].size()) != dim)
            throw DimensionError("anatomy feature has " + std::to_string(v[b].size()) + " values, expected " +
                                 std::to_string(dim));
        std::copy(v[b].begin(), v[b].end(), t.channel(static_cast<int>(b), 0));
    }
    return t;
}

Tensor4 protocols_to_tensor(std::span<const ProtocolValues> p)
{
    Tensor4 t(static_cast<int>(p.size()), phantoms::kProtocolDim, 1, 1);
    for (std::size_t b = 0; b < p.size(); ++b) {
        for (double v : p[b])
            if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("protocol values must lie in [0, 1]");
        std::copy(p[b].begin(), p[b].end(), t.channel(static_cast<int>(b), 0));
    }
    return t;
}

// Low-dose image with every protocol value broadcast to its own channel.
Tensor4 variance_input(const Tensor4& low_dose, std::span<const ProtocolValues> p)
{
    Tensor4 t(low_dose.n, 1 + phantoms::kProtocolDim, low_dose.h, low_dose.w);
    for (int b = 0; b < low_dose.n; ++b) {
        std::copy(low_dose.channel(b, 0), low_dose.channel(b, 0) + low_dose.plane(), t.channel(b, 0));
        for (int k = 0; k < phantoms::kProtocolDim; ++k)
            std::fill(t.channel(b, 1 + k), t.channel(b, 1 + k) + t.plane(), p[b][k]);
    }
    return t;
}

// Splits a (n, 2C) head output into 1 + tanh(first half) and the second half.
void split_head(const Tensor4& raw, int b, int C, std::vector<double>& gamma, std::vector<double>& beta)
{
    const double* r = raw.channel(b, 0);
    gamma.resize(C);
    beta.resize(C);
    for (int c = 0; c < C; ++c) {
        gamma[c] = 1.0 + std::tanh(r[c]);
        beta[c] = r[C + c];
    }
}

void blend(ModulationParams& m)
{
    const std::size_t C = m.gamma_a.size();
    m.gamma.resize(C);
    m.beta.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        m.gamma[c] = m.gate * m.gamma_a[c] + (1.0 - m.gate) * m.gamma_p[c];
        m.beta[c] = m.gate * m.beta_a[c] + (1.0 - m.gate) * m.beta_p[c];
    }
}

} // namespace

ModelInput make_input(std::span<const phantoms::Sample* const> samples)
{
    if (samples.empty()) throw std::invalid_argument("empty batch");
    const int side = samples[0]->low_dose.side;
    ModelInput in;
    in.low_dose = Tensor4(static_cast<int>(samples.size()), 1, side, side);
    for (std::size_t b = 0; b < samples.size(); ++b) {
        const phantoms::Sample& s = *samples[b];
        if (s.low_dose.side != side) throw DimensionError("batch mixes image sides");
        std::copy(s.low_dose.data.begin(), s.low_dose.data.end(), in.low_dose.channel(static_cast<int>(b), 0));
        in.protocol.push_back(s.protocol.values);
        in.anatomy.push_back(s.anatomy.values);
    }
    return in;
}

ModelInput make_input(const phantoms::Sample& sample)
{
    const phantoms::Sample* p = &sample;
    return make_input(std::span<const phantoms::Sample* const>(&p, 1));
}

tomo::Image to_image(const Tensor4& t, int index, bool clamp)
{
    if (t.c != 1 || t.h != t.w || index < 0 || index >= t.n) throw DimensionError("tensor is not an image batch");
    tomo::Image img(t.h);
    std::copy(t.channel(index, 0), t.channel(index, 0) + t.plane(), img.data.begin());
    if (clamp)
        for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

Tensor4 from_images(std::span<const tomo::Image* const> images)
{
    if (images.empty()) throw std::invalid_argument("no images");
    const int side = images[0]->side;
    Tensor4 t(static_cast<int>(images.size()), 1, side, side);
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b]->side != side) throw DimensionError("images differ in side");
        std::copy(images[b]->data.begin(), images[b]->data.end(), t.channel(static_cast<int>(b), 0));
    }
    return t;
}

Denoiser::Denoiser(const ModelConfig& cfg) : cfg_(cfg)
{
    if (cfg_.latent_channels < 1 || cfg_.anatomy_dim < 1 || cfg_.anatomy_hidden < 1)
        throw std::invalid_argument("model dimensions must be positive");
    const Partition shared = Partition::Shared;
    const Partition local = cfg_.all_shared ? Partition::Shared : Partition::Local;
    const Partition protocol = (cfg_.protocol_local && !cfg_.all_shared) ? Partition::Local : Partition::Shared;
    layers_ = std::make_unique<Layers>(store_, cfg_, shared, local, protocol);
    if (cfg_.use_lora) {
        const Partition lora = (cfg_.lora_local && !cfg_.all_shared) ? Partition::Local : Partition::Shared;
        layers_->d1.add_lora(store_, cfg_.lora_rank, lora);
        layers_->d2.add_lora(store_, cfg_.lora_rank, lora);
    }
}

Denoiser::~Denoiser() = default;

void Denoiser::initialize(std::uint64_t seed)
{
    nn::init_params(store_, seed);
}

void Denoiser::check_input(const ModelInput& in) const
{
    const Tensor4& x = in.low_dose;
    if (x.c != 1 || x.h != x.w) throw DimensionError("low-dose input must be (n,1,side,side), got " + x.shape_string());
    if (x.h % 4 != 0) throw DimensionError("image side " + std::to_string(x.h) + " is not divisible by 4");
    if (static_cast<int>(in.protocol.size()) != x.n || static_cast<int>(in.anatomy.size()) != x.n)
        throw DimensionError("side information does not match the batch size");
}

Tensor4 Denoiser::encode(const Tensor4& low_dose) const
{
    if (low_dose.c != 1 || low_dose.h % 4 != 0 || low_dose.w % 4 != 0)
        throw DimensionError("encoder input must have one channel and a side divisible by 4, got " +
                             low_dose.shape_string());
    const Layers& L = *layers_;
    Context c;
    Tensor4 h = L.relu.forward(store_, L.e1.forward(store_, low_dose, c, {}), c, {});
    h = L.relu.forward(store_, L.e2.forward(store_, h, c, {}), c, {});
    return L.relu.forward(store_, L.e3.forward(store_, h, c, {}), c, {});
}

std::pair<std::vector<double>, std::vector<double>> Denoiser::anatomy_modulation(std::span<const double> a) const
{
    for (double v : a)
        if (!std::isfinite(v)) throw std::invalid_argument("anatomy feature is not finite");
    const Layers& L = *layers_;
    const Tensor4 in = vectors_to_tensor({std::vector<double>(a.begin(), a.end())}, cfg_.anatomy_dim);
    Context c;
    const Tensor4 raw = L.a2.forward(store_, L.relu.forward(store_, L.a1.forward(store_, in, c, {}), c, {}), c, {});
    std::pair<std::vector<double>, std::vector<double>> out;
    split_head(raw, 0, cfg_.latent_channels, out.first, out.second);
    return out;
}

Denoiser::ProtocolEmbedding Denoiser::protocol_modulation(const ProtocolValues& p) const
{
    const Layers& L = *layers_;
    const Tensor4 in = protocols_to_tensor(std::span<const ProtocolValues>(&p, 1));
    Context c;
    const Tensor4 e = L.p2.forward(store_, L.relu.forward(store_, L.p1.forward(store_, in, c, {}), c, {}), c, {});
    const Tensor4 raw = L.proj.forward(store_, e, c, {});
    ProtocolEmbedding out;
    out.e_p = e.data;
    split_head(raw, 0, cfg_.latent_channels, out.gamma_p, out.beta_p);
    return out;
}

ModulationParams Denoiser::gate_and_blend(std::span<const double> a, std::vector<double> gamma_a,
                                          std::vector<double> beta_a, std::vector<double> gamma_p,
                                          std::vector<double> beta_p) const
{
    const std::size_t C = gamma_a.size();
    if (beta_a.size() != C || gamma_p.size() != C || beta_p.size() != C)
        throw DimensionError("modulation components differ in length");
    ModulationParams m;
    m.gamma_a = std::move(gamma_a);
    m.beta_a = std::move(beta_a);
    m.gamma_p = std::move(gamma_p);
    m.beta_p = std::move(beta_p);
    switch (cfg_.gate) {
    case GateMode::AnatomyOnly: m.gate = 1.0; break;
    case GateMode::ProtocolOnly: m.gate = 0.0; break;
    case GateMode::Off:
    case GateMode::Learned: {
        double logit = 0.0;
        if (cfg_.gate_logit) {
            logit = *cfg_.gate_logit;
        } else {
            const Tensor4 in = vectors_to_tensor({std::vector<double>(a.begin(), a.end())}, cfg_.anatomy_dim);
            Context c;
            logit = layers_->gate.forward(store_, in, c, {}).data[0];
        }
        m.gate = nn::sigmoid(logit);
        break;
    }
    }
    blend(m);
    return m;
}

Tensor4 Denoiser::modulate(const Tensor4& z, std::span<const ModulationParams> m)
{
    if (static_cast<int>(m.size()) != z.n) throw DimensionError("one modulation per batch item is required");
    Tensor4 f = z;
    for (int b = 0; b < z.n; ++b) {
        if (static_cast<int>(m[b].gamma.size()) != z.c || static_cast<int>(m[b].beta.size()) != z.c)
            throw DimensionError("modulation has " + std::to_string(m[b].gamma.size()) + " channels, latent has " +
                                 std::to_string(z.c));
        for (int c = 0; c < z.c; ++c) {
            double* p = f.channel(b, c);
            for (std::size_t i = 0; i < f.plane(); ++i) p[i] = m[b].gamma[c] * p[i] + m[b].beta[c];
        }
    }
    return f;
}

Tensor4 Denoiser::predict_variance(const Tensor4& low_dose, std::span<const ProtocolValues> p) const
{
    if (static_cast<int>(p.size()) != low_dose.n) throw DimensionError("one protocol per batch item is required");
    const Layers& L = *layers_;
    protocols_to_tensor(p);
    Context c;
    Tensor4 h = L.relu.forward(store_, L.v1.forward(store_, variance_input(low_dose, p), c, {}), c, {});
    h = L.relu.forward(store_, L.v2.forward(store_, h, c, {}), c, {});
    Tensor4 v = L.v3.forward(store_, h, c, {});
    for (double& x : v.data) x = nn::softplus(x) + kVarianceFloor;
    return v;
}

ModelOutput Denoiser::forward(const ModelInput& in, const nn::Mode& mode, ForwardCache* cache,
                              const ForwardOptions& opts) const
{
    check_input(in);
    ForwardCache local;
    ForwardCache& k = cache ? *cache : local;
    const Layers& L = *layers_;
    const nn::ParamStore& s = store_;
    const int n = in.batch();
    const int C = cfg_.latent_channels;

    nn::Mode m = mode;
    m.adapters = mode.adapters && !opts.plain;

    const Tensor4& x = in.low_dose;
    const Tensor4 h1 = relu_fwd(L.relu, s, L.e1.forward(s, x, k.e1, m), k.e1r);
    const Tensor4 h2 = relu_fwd(L.relu, s, L.e2.forward(s, h1, k.e2, m), k.e2r);
    k.z = relu_fwd(L.relu, s, L.e3.forward(s, h2, k.e3, m), k.e3r);

    ModelOutput out;
    k.modulated = !opts.plain && cfg_.gate != GateMode::Off;
    k.uses_anatomy = k.modulated && cfg_.gate != GateMode::ProtocolOnly;
    k.uses_protocol = k.modulated && cfg_.gate != GateMode::AnatomyOnly;
    k.gate_learned = k.modulated && cfg_.gate == GateMode::Learned && !cfg_.gate_logit;
    k.modulation.assign(n, ModulationParams{});
    for (auto& mp : k.modulation) {
        mp.gamma_a.assign(C, 1.0);
        mp.beta_a.assign(C, 0.0);
        mp.gamma_p.assign(C, 1.0);
        mp.beta_p.assign(C, 0.0);
    }
    Tensor4 f;
    if (k.modulated) {
        const Tensor4 A = vectors_to_tensor(in.anatomy, cfg_.anatomy_dim);
        const Tensor4 P = protocols_to_tensor(in.protocol);
        if (k.uses_anatomy) {
            const Tensor4 raw = L.a2.forward(s, relu_fwd(L.relu, s, L.a1.forward(s, A, k.a1, m), k.a1r), k.a2, m);
            for (int b = 0; b < n; ++b) split_head(raw, b, C, k.modulation[b].gamma_a, k.modulation[b].beta_a);
        }
        if (k.uses_protocol) {
            const Tensor4 e = L.p2.forward(s, relu_fwd(L.relu, s, L.p1.forward(s, P, k.p1, m), k.p1r), k.p2, m);
            const Tensor4 raw = L.proj.forward(s, e, k.proj, m);
            for (int b = 0; b < n; ++b) split_head(raw, b, C, k.modulation[b].gamma_p, k.modulation[b].beta_p);
        }
        Tensor4 logits;
        if (k.gate_learned) logits = L.gate.forward(s, A, k.gate, m);
        for (int b = 0; b < n; ++b) {
            ModulationParams& mp = k.modulation[b];
            if (cfg_.gate == GateMode::AnatomyOnly)
                mp.gate = 1.0;
            else if (cfg_.gate == GateMode::ProtocolOnly)
                mp.gate = 0.0;
            else
                mp.gate = nn::sigmoid(k.gate_learned ? logits.data[b] : *cfg_.gate_logit);
            blend(mp);
        }
        f = modulate(k.z, k.modulation);
    } else {
        for (auto& mp : k.modulation) blend(mp);
        f = k.z;
    }
    out.modulation = k.modulation;

    const Tensor4 fd = L.drop.forward(s, f, k.drop, m);
    const Tensor4 u1 = relu_fwd(L.relu, s, L.d1.forward(s, fd, k.d1, m), k.d1r);
    const Tensor4 u2 = L.up.forward(s, u1, k.up, m);
    Tensor4 u3 = relu_fwd(L.relu, s, L.d2.forward(s, u2, k.d2, m), k.d2r);
    if (!u3.same_shape(h1)) throw DimensionError("decoder skip shape mismatch");
    for (std::size_t i = 0; i < u3.size(); ++i) u3.data[i] += h1.data[i];
    out.image = L.d3.forward(s, u3, k.d3, m);
    for (std::size_t i = 0; i < x.size(); ++i) out.image.data[i] += x.data[i];

    k.variance = opts.variance;
    if (opts.variance) {
        const Tensor4 vin = variance_input(x, in.protocol);
        Tensor4 v = relu_fwd(L.relu, s, L.v1.forward(s, vin, k.v1, m), k.v1r);
        v = relu_fwd(L.relu, s, L.v2.forward(s, v, k.v2, m), k.v2r);
        k.v3_out = L.v3.forward(s, v, k.v3, m);
        out.variance = k.v3_out;
        for (double& val : out.variance.data) val = nn::softplus(val) + kVarianceFloor;
    }
    return out;
}

void Denoiser::backward(const ForwardCache& k, const Tensor4& grad_image, const Tensor4& grad_variance)
{
    const Layers& L = *layers_;
    nn::ParamStore& s = store_;
    const int C = cfg_.latent_channels;
    const Tensor4& xs = k.e1.input;
    if (grad_image.n != xs.n || grad_image.c != 1 || grad_image.h != xs.h || grad_image.w != xs.w)
        throw DimensionError("grad_image shape mismatch");

    Tensor4 g = L.d3.backward(s, grad_image, k.d3);
    const Tensor4 g_skip = g;
    g = L.relu.backward(s, g, k.d2r);
    g = L.d2.backward(s, g, k.d2);
    g = L.up.backward(s, g, k.up);
    g = L.relu.backward(s, g, k.d1r);
    g = L.d1.backward(s, g, k.d1);
    Tensor4 gf = L.drop.backward(s, g, k.drop);

    Tensor4 gz = gf;
    if (k.modulated) {
        const Tensor4& z = k.z;
        const int n = z.n;
        Tensor4 g_anat(n, 2 * C, 1, 1), g_proto(n, 2 * C, 1, 1), g_logit(n, 1, 1, 1);
        for (int b = 0; b < n; ++b) {
            const ModulationParams& mp = k.modulation[b];
            double g_gate = 0.0;
            for (int c = 0; c < C; ++c) {
                const double* zc = z.channel(b, c);
                const double* gc = gf.channel(b, c);
                double* gzc = gz.channel(b, c);
                double g_gamma = 0.0, g_beta = 0.0;
                for (std::size_t i = 0; i < z.plane(); ++i) {
                    g_gamma += gc[i] * zc[i];
                    g_beta += gc[i];
                    gzc[i] = mp.gamma[c] * gc[i];
                }
                g_gate += g_gamma * (mp.gamma_a[c] - mp.gamma_p[c]) + g_beta * (mp.beta_a[c] - mp.beta_p[c]);
                const double ta = mp.gamma_a[c] - 1.0;
                const double tp = mp.gamma_p[c] - 1.0;
                g_anat.channel(b, 0)[c] = mp.gate * g_gamma * (1.0 - ta * ta);
                g_anat.channel(b, 0)[C + c] = mp.gate * g_beta;
                g_proto.channel(b, 0)[c] = (1.0 - mp.gate) * g_gamma * (1.0 - tp * tp);
                g_proto.channel(b, 0)[C + c] = (1.0 - mp.gate) * g_beta;
            }
            g_logit.data[b] = g_gate * mp.gate * (1.0 - mp.gate);
        }
        if (k.uses_anatomy) {
            Tensor4 ga = L.a2.backward(s, g_anat, k.a2);
            ga = L.relu.backward(s, ga, k.a1r);
            L.a1.backward(s, ga, k.a1);
        }
        if (k.uses_protocol) {
            Tensor4 gp = L.proj.backward(s, g_proto, k.proj);
            gp = L.p2.backward(s, gp, k.p2);
            gp = L.relu.backward(s, gp, k.p1r);
            L.p1.backward(s, gp, k.p1);
        }
        if (k.gate_learned) L.gate.backward(s, g_logit, k.gate);
    }

    g = L.relu.backward(s, gz, k.e3r);
    g = L.e3.backward(s, g, k.e3);
    g = L.relu.backward(s, g, k.e2r);
    g = L.e2.backward(s, g, k.e2);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += g_skip.data[i];
    g = L.relu.backward(s, g, k.e1r);
    L.e1.backward(s, g, k.e1);

    if (k.variance && grad_variance.size() > 0) {
        if (!grad_variance.same_shape(k.v3_out)) throw DimensionError("grad_variance shape mismatch");
        Tensor4 gv = grad_variance;
        for (std::size_t i = 0; i < gv.size(); ++i) gv.data[i] *= nn::sigmoid(k.v3_out.data[i]);
        gv = L.v3.backward(s, gv, k.v3);
        gv = L.relu.backward(s, gv, k.v2r);
        gv = L.v2.backward(s, gv, k.v2);
        gv = L.relu.backward(s, gv, k.v1r);
        L.v1.backward(s, gv, k.v1);
    }
}

tomo::Image Denoiser::predict(const phantoms::Sample& sample) const
{
    ForwardOptions opts;
    opts.variance = false;
    return to_image(forward(make_input(sample), {}, nullptr, opts).image, 0, true);
}

} // namespace profed::model
