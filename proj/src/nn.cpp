#include "profed/nn.hpp"

#include "profed/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace profed::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

std::size_t product(const std::vector<int>& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("parameter shape entries must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

// Patch matrix of `src` (channels x sh x sw) for a k x k window with the given
// stride and padding evaluated on a dh x dw output grid. Row (c, ki, kj),
// column (oy, ox).
void im2col(const double* src, int channels, int sh, int sw, int dh, int dw, int k, int stride, int pad,
            double* cols)
{
    const std::size_t plane = static_cast<std::size_t>(dh) * dw;
    for (int c = 0; c < channels; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                double* row = cols + (static_cast<std::size_t>(c * k + ki) * k + kj) * plane;
                const double* s = src + static_cast<std::size_t>(c) * sh * sw;
                for (int oy = 0; oy < dh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    double* out = row + static_cast<std::size_t>(oy) * dw;
                    if (iy < 0 || iy >= sh) {
                        std::fill(out, out + dw, 0.0);
                        continue;
                    }
                    for (int ox = 0; ox < dw; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        out[ox] = (ix >= 0 && ix < sw) ? s[static_cast<std::size_t>(iy) * sw + ix] : 0.0;
                    }
                }
            }
}

// Transpose of im2col: accumulates patch entries back into `dst`.
void col2im(const double* cols, int channels, int sh, int sw, int dh, int dw, int k, int stride, int pad,
            double* dst)
{
    const std::size_t plane = static_cast<std::size_t>(dh) * dw;
    for (int c = 0; c < channels; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const double* row = cols + (static_cast<std::size_t>(c * k + ki) * k + kj) * plane;
                double* d = dst + static_cast<std::size_t>(c) * sh * sw;
                for (int oy = 0; oy < dh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= sh) continue;
                    const double* in = row + static_cast<std::size_t>(oy) * dw;
                    for (int ox = 0; ox < dw; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < sw) d[static_cast<std::size_t>(iy) * sw + ix] += in[ox];
                    }
                }
            }
}

// Splits a gradient on W0 + B A into its three parameter gradients.
void distribute_lora_grad(ParamStore& store, const LoraRef& lora, const MatR& g, int d_out, int d_in)
{
    CMapR a(store[lora.a].value.data(), lora.rank, d_in);
    CMapR b(store[lora.b].value.data(), d_out, lora.rank);
    MapR ga(store[lora.a].grad.data(), lora.rank, d_in);
    MapR gb(store[lora.b].grad.data(), d_out, lora.rank);
    gb.noalias() += g * a.transpose();
    ga.noalias() += b.transpose() * g;
}

LoraRef register_lora(ParamStore& store, const std::string& name, int requested, int d_out, int d_in,
                      Partition partition)
{
    LoraRef ref;
    ref.rank = lora_rank(requested, d_in, d_out);
    ref.a = store.add(name + ".lora_a", {ref.rank, d_in}, partition, Init::HeUniform, d_in);
    ref.b = store.add(name + ".lora_b", {d_out, ref.rank}, partition, Init::Zero);
    return ref;
}

} // namespace

Tensor4::Tensor4(int n_, int c_, int h_, int w_, double fill) : n(n_), c(c_), h(h_), w(w_)
{
    if (n < 1 || c < 1 || h < 1 || w < 1) throw DimensionError("tensor dimensions must be positive");
    data.assign(static_cast<std::size_t>(n) * c * h * w, fill);
}

std::string Tensor4::shape_string() const
{
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

std::size_t ParamStore::add(const std::string& name, std::vector<int> shape, Partition partition, Init init,
                            int fan_in)
{
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Param p;
    p.name = name;
    const std::size_t n = product(shape);
    p.shape = std::move(shape);
    p.value.assign(n, 0.0);
    p.grad.assign(n, 0.0);
    p.partition = partition;
    p.init = init;
    p.fan_in = std::max(1, fan_in);
    params_.push_back(std::move(p));
    index_.emplace(name, params_.size() - 1);
    ++version_;
    return params_.size() - 1;
}

std::size_t ParamStore::index(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

void ParamStore::set_partition(const std::string& name, Partition p)
{
    params_[index(name)].partition = p;
}

void ParamStore::zero_grad()
{
    for (Param& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

std::size_t ParamStore::count(Partition p) const
{
    std::size_t n = 0;
    for (const Param& q : params_)
        if (q.partition == p) n += q.value.size();
    return n;
}

std::vector<double> ParamStore::flatten(Partition p) const
{
    std::vector<double> out;
    out.reserve(count(p));
    for (const Param& q : params_)
        if (q.partition == p) out.insert(out.end(), q.value.begin(), q.value.end());
    return out;
}

void ParamStore::assign(Partition p, std::span<const double> values)
{
    if (values.size() != count(p))
        throw ProtocolError("partition size " + std::to_string(count(p)) + " does not match " +
                            std::to_string(values.size()) + " incoming values");
    std::size_t off = 0;
    for (Param& q : params_) {
        if (q.partition != p) continue;
        std::copy(values.begin() + off, values.begin() + off + q.value.size(), q.value.begin());
        off += q.value.size();
    }
    ++version_;
}

void init_params(ParamStore& store, std::uint64_t seed)
{
    Rng rng = make_rng({seed, stream::init});
    for (Param& p : store.params()) {
        if (p.init == Init::Zero) {
            std::fill(p.value.begin(), p.value.end(), 0.0);
            continue;
        }
        const double bound = std::sqrt(6.0 / p.fan_in);
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& v : p.value) v = u(rng);
    }
    store.touch();
}

void Layer::record(const ParamStore& store, Context& ctx) const
{
    ctx.owner = this;
    ctx.version = store.version();
}

void Layer::verify(const ParamStore& store, const Context& ctx) const
{
    if (ctx.owner != this) throw ContractViolation(kind() + ": context was recorded by a different layer");
    if (ctx.version != store.version()) throw ContractViolation(kind() + ": parameters changed since forward");
}

int lora_rank(int requested, int d_in, int d_out)
{
    if (requested < 1) throw std::invalid_argument("LoRA rank must be >= 1");
    return std::max(1, std::min(requested, std::min(d_in, d_out) / 2));
}

std::vector<double> lora_effective_weight(std::span<const double> w0, std::span<const double> a,
                                          std::span<const double> b, int d_out, int d_in, int rank)
{
    if (rank < 1 || rank > std::min(d_in, d_out)) throw std::invalid_argument("LoRA rank out of range");
    if (w0.size() != static_cast<std::size_t>(d_out) * d_in || a.size() != static_cast<std::size_t>(rank) * d_in ||
        b.size() != static_cast<std::size_t>(d_out) * rank)
        throw DimensionError("LoRA factor shapes do not match the base weight");
    std::vector<double> w(w0.begin(), w0.end());
    MapR wm(w.data(), d_out, d_in);
    wm.noalias() += CMapR(b.data(), d_out, rank) * CMapR(a.data(), rank, d_in);
    return w;
}

// ---- Conv2d ----

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
               Partition partition, Init weight_init)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), name_(name)
{
    if (in_ < 1 || out_ < 1 || k_ < 1 || stride_ < 1 || pad_ < 0) throw std::invalid_argument("bad conv2d spec");
    weight_ = store.add(name + ".weight", {out_, in_, k_, k_}, partition, weight_init, in_ * k_ * k_);
    bias_ = store.add(name + ".bias", {out_}, partition, Init::Zero);
}

void Conv2d::add_lora(ParamStore& store, int requested_rank, Partition partition)
{
    if (has_lora_) throw std::logic_error("adapter already attached");
    lora_ = register_lora(store, name_, requested_rank, out_, in_ * k_ * k_, partition);
    has_lora_ = true;
}

std::vector<double> Conv2d::effective_weight(const ParamStore& store, bool adapters) const
{
    const auto& w0 = store[weight_].value;
    if (!has_lora_ || !adapters) return w0;
    return lora_effective_weight(w0, store[lora_.a].value, store[lora_.b].value, out_, in_ * k_ * k_, lora_.rank);
}

Tensor4 Conv2d::forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const
{
    if (x.c != in_) throw DimensionError("conv2d expects " + std::to_string(in_) + " channels, got " + x.shape_string());
    const int ho = out_size(x.h), wo = out_size(x.w);
    if (ho < 1 || wo < 1) throw DimensionError("conv2d input too small: " + x.shape_string());
    const int K = in_ * k_ * k_;
    const std::size_t P = static_cast<std::size_t>(ho) * wo;
    const std::vector<double> w = effective_weight(store, mode.adapters);
    const double* bias = store[bias_].value.data();

    Tensor4 y(x.n, out_, ho, wo);
    ctx.adapters = mode.adapters;
    ctx.buffer.assign(static_cast<std::size_t>(x.n) * K * P, 0.0);
    for (int b = 0; b < x.n; ++b) {
        double* cols = ctx.buffer.data() + static_cast<std::size_t>(b) * K * P;
        im2col(x.channel(b, 0), in_, x.h, x.w, ho, wo, k_, stride_, pad_, cols);
        MapR yb(y.channel(b, 0), out_, static_cast<Eigen::Index>(P));
        yb.noalias() = CMapR(w.data(), out_, K) * CMapR(cols, K, static_cast<Eigen::Index>(P));
        for (int o = 0; o < out_; ++o) {
            double* row = y.channel(b, o);
            for (std::size_t i = 0; i < P; ++i) row[i] += bias[o];
        }
    }
    ctx.input = Tensor4();
    ctx.input.n = x.n;
    ctx.input.c = x.c;
    ctx.input.h = x.h;
    ctx.input.w = x.w;
    record(store, ctx);
    return y;
}

Tensor4 Conv2d::backward(ParamStore& store, const Tensor4& gy, const Context& ctx) const
{
    verify(store, ctx);
    const Tensor4& xs = ctx.input;
    const int ho = out_size(xs.h), wo = out_size(xs.w);
    if (gy.n != xs.n || gy.c != out_ || gy.h != ho || gy.w != wo) throw DimensionError("conv2d grad_out shape mismatch");
    const int K = in_ * k_ * k_;
    const auto P = static_cast<Eigen::Index>(ho) * wo;
    const std::vector<double> w = effective_weight(store, ctx.adapters);

    MatR gw = MatR::Zero(out_, K);
    Tensor4 gx(xs.n, xs.c, xs.h, xs.w);
    std::vector<double> gcols(static_cast<std::size_t>(K) * P);
    double* gbias = store[bias_].grad.data();
    for (int b = 0; b < xs.n; ++b) {
        const double* cols = ctx.buffer.data() + static_cast<std::size_t>(b) * K * P;
        CMapR g(gy.channel(b, 0), out_, P);
        gw.noalias() += g * CMapR(cols, K, P).transpose();
        for (int o = 0; o < out_; ++o) {
            const double* row = gy.channel(b, o);
            double s = 0.0;
            for (Eigen::Index i = 0; i < P; ++i) s += row[i];
            gbias[o] += s;
        }
        MapR(gcols.data(), K, P).noalias() = CMapR(w.data(), out_, K).transpose() * g;
        col2im(gcols.data(), in_, xs.h, xs.w, ho, wo, k_, stride_, pad_, gx.channel(b, 0));
    }
    MapR(store[weight_].grad.data(), out_, K) += gw;
    if (has_lora_ && ctx.adapters) distribute_lora_grad(store, lora_, gw, out_, K);
    return gx;
}

// ---- ConvTranspose2d ----

ConvTranspose2d::ConvTranspose2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel,
                                 int stride, int pad, int output_pad, Partition partition, Init weight_init)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), output_pad_(output_pad), name_(name)
{
    if (in_ < 1 || out_ < 1 || k_ < 1 || stride_ < 1 || pad_ < 0 || output_pad_ < 0 || output_pad_ >= stride_)
        throw std::invalid_argument("bad conv_transpose2d spec");
    weight_ = store.add(name + ".weight", {in_, out_, k_, k_}, partition, weight_init, in_ * k_ * k_);
    bias_ = store.add(name + ".bias", {out_}, partition, Init::Zero);
}

void ConvTranspose2d::add_lora(ParamStore& store, int requested_rank, Partition partition)
{
    if (has_lora_) throw std::logic_error("adapter already attached");
    lora_ = register_lora(store, name_, requested_rank, out_ * k_ * k_, in_, partition);
    has_lora_ = true;
}

std::vector<double> ConvTranspose2d::operator_matrix(const ParamStore& store, bool adapters) const
{
    const int rows = out_ * k_ * k_;
    // Stored (in, rows); the operator is its transpose.
    MatR m = CMapR(store[weight_].value.data(), in_, rows).transpose();
    if (has_lora_ && adapters)
        m.noalias() += CMapR(store[lora_.b].value.data(), rows, lora_.rank) *
                       CMapR(store[lora_.a].value.data(), lora_.rank, in_);
    return std::vector<double>(m.data(), m.data() + m.size());
}

Tensor4 ConvTranspose2d::forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const
{
    if (x.c != in_)
        throw DimensionError("conv_transpose2d expects " + std::to_string(in_) + " channels, got " + x.shape_string());
    const int ho = out_size(x.h), wo = out_size(x.w);
    if (ho < 1 || wo < 1) throw DimensionError("conv_transpose2d output would be empty");
    const int rows = out_ * k_ * k_;
    const auto P = static_cast<Eigen::Index>(x.h) * x.w;
    const std::vector<double> m = operator_matrix(store, mode.adapters);
    const double* bias = store[bias_].value.data();

    Tensor4 y(x.n, out_, ho, wo);
    std::vector<double> cols(static_cast<std::size_t>(rows) * P);
    for (int b = 0; b < x.n; ++b) {
        MapR(cols.data(), rows, P).noalias() = CMapR(m.data(), rows, in_) * CMapR(x.channel(b, 0), in_, P);
        col2im(cols.data(), out_, ho, wo, x.h, x.w, k_, stride_, pad_, y.channel(b, 0));
        for (int o = 0; o < out_; ++o) {
            double* row = y.channel(b, o);
            for (std::size_t i = 0; i < y.plane(); ++i) row[i] += bias[o];
        }
    }
    ctx.input = x;
    ctx.adapters = mode.adapters;
    record(store, ctx);
    return y;
}

Tensor4 ConvTranspose2d::backward(ParamStore& store, const Tensor4& gy, const Context& ctx) const
{
    verify(store, ctx);
    const Tensor4& x = ctx.input;
    const int ho = out_size(x.h), wo = out_size(x.w);
    if (gy.n != x.n || gy.c != out_ || gy.h != ho || gy.w != wo)
        throw DimensionError("conv_transpose2d grad_out shape mismatch");
    const int rows = out_ * k_ * k_;
    const auto P = static_cast<Eigen::Index>(x.h) * x.w;
    const std::vector<double> m = operator_matrix(store, ctx.adapters);

    MatR gm = MatR::Zero(rows, in_);
    Tensor4 gx(x.n, x.c, x.h, x.w);
    std::vector<double> gcols(static_cast<std::size_t>(rows) * P);
    double* gbias = store[bias_].grad.data();
    for (int b = 0; b < x.n; ++b) {
        im2col(gy.channel(b, 0), out_, ho, wo, x.h, x.w, k_, stride_, pad_, gcols.data());
        CMapR gc(gcols.data(), rows, P);
        CMapR xb(x.channel(b, 0), in_, P);
        gm.noalias() += gc * xb.transpose();
        MapR(gx.channel(b, 0), in_, P).noalias() = CMapR(m.data(), rows, in_).transpose() * gc;
        for (int o = 0; o < out_; ++o) {
            const double* row = gy.channel(b, o);
            double s = 0.0;
            for (std::size_t i = 0; i < gy.plane(); ++i) s += row[i];
            gbias[o] += s;
        }
    }
    MapR(store[weight_].grad.data(), in_, rows) += gm.transpose();
    if (has_lora_ && ctx.adapters) distribute_lora_grad(store, lora_, gm, rows, in_);
    return gx;
}

// ---- Linear ----

Linear::Linear(ParamStore& store, const std::string& name, int in_features, int out_features, Partition partition,
               Init weight_init)
    : in_(in_features), out_(out_features)
{
    if (in_ < 1 || out_ < 1) throw std::invalid_argument("bad linear spec");
    weight_ = store.add(name + ".weight", {out_, in_}, partition, weight_init, in_);
    bias_ = store.add(name + ".bias", {out_}, partition, Init::Zero);
}

Tensor4 Linear::forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode&) const
{
    if (x.c != in_ || x.h != 1 || x.w != 1)
        throw DimensionError("linear expects (n," + std::to_string(in_) + ",1,1), got " + x.shape_string());
    const double* w = store[weight_].value.data();
    const double* bias = store[bias_].value.data();
    Tensor4 y(x.n, out_, 1, 1);
    for (int b = 0; b < x.n; ++b) {
        const double* xb = x.channel(b, 0);
        double* yb = y.channel(b, 0);
        for (int o = 0; o < out_; ++o) {
            double s = bias[o];
            for (int i = 0; i < in_; ++i) s += w[static_cast<std::size_t>(o) * in_ + i] * xb[i];
            yb[o] = s;
        }
    }
    ctx.input = x;
    record(store, ctx);
    return y;
}

Tensor4 Linear::backward(ParamStore& store, const Tensor4& gy, const Context& ctx) const
{
    verify(store, ctx);
    const Tensor4& x = ctx.input;
    if (gy.n != x.n || gy.c != out_ || gy.h != 1 || gy.w != 1) throw DimensionError("linear grad_out shape mismatch");
    const double* w = store[weight_].value.data();
    double* gw = store[weight_].grad.data();
    double* gb = store[bias_].grad.data();
    Tensor4 gx(x.n, in_, 1, 1);
    for (int b = 0; b < x.n; ++b) {
        const double* xb = x.channel(b, 0);
        const double* g = gy.channel(b, 0);
        double* gxb = gx.channel(b, 0);
        for (int o = 0; o < out_; ++o) {
            gb[o] += g[o];
            for (int i = 0; i < in_; ++i) {
                gw[static_cast<std::size_t>(o) * in_ + i] += g[o] * xb[i];
                gxb[i] += w[static_cast<std::size_t>(o) * in_ + i] * g[o];
            }
        }
    }
    return gx;
}

// ---- Pointwise ----

double sigmoid(double x)
{
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x)
{
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

std::string Pointwise::kind() const
{
    switch (act_) {
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
    }
    return "pointwise";
}

Tensor4 Pointwise::forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode&) const
{
    Tensor4 y = x;
    for (double& v : y.data) {
        switch (act_) {
        case Activation::ReLU: v = v > 0.0 ? v : 0.0; break;
        case Activation::Sigmoid: v = sigmoid(v); break;
        case Activation::Tanh: v = std::tanh(v); break;
        case Activation::Softplus: v = softplus(v); break;
        }
    }
    ctx.input = x;
    ctx.output = y;
    record(store, ctx);
    return y;
}

Tensor4 Pointwise::backward(ParamStore& store, const Tensor4& gy, const Context& ctx) const
{
    verify(store, ctx);
    if (!gy.same_shape(ctx.input)) throw DimensionError(kind() + " grad_out shape mismatch");
    Tensor4 gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) {
        const double x = ctx.input.data[i];
        const double y = ctx.output.data[i];
        switch (act_) {
        case Activation::ReLU: gx.data[i] = x > 0.0 ? gy.data[i] : 0.0; break;
        case Activation::Sigmoid: gx.data[i] *= y * (1.0 - y); break;
        case Activation::Tanh: gx.data[i] *= 1.0 - y * y; break;
        case Activation::Softplus: gx.data[i] *= sigmoid(x); break;
        }
    }
    return gx;
}

// ---- Dropout ----

Dropout::Dropout(double rate) : rate_(0.0)
{
    set_rate(rate);
}

void Dropout::set_rate(double rate)
{
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
    rate_ = rate;
}

Tensor4 Dropout::forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const
{
    ctx.input = Tensor4();
    ctx.input.n = x.n;
    ctx.input.c = x.c;
    ctx.input.h = x.h;
    ctx.input.w = x.w;
    ctx.buffer.clear();
    record(store, ctx);
    const double rate = mode.dropout_rate >= 0.0 ? mode.dropout_rate : rate_;
    if (!(rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
    if (!mode.training || rate == 0.0) return x;
    if (!mode.rng) throw std::invalid_argument("dropout in training mode needs an RNG");
    const double keep = 1.0 / (1.0 - rate);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ctx.buffer.resize(x.size());
    Tensor4 y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ctx.buffer[i] = u(*mode.rng) < rate ? 0.0 : keep;
        y.data[i] *= ctx.buffer[i];
    }
    return y;
}

Tensor4 Dropout::backward(ParamStore& store, const Tensor4& gy, const Context& ctx) const
{
    verify(store, ctx);
    if (!gy.same_shape(ctx.input)) throw DimensionError("dropout grad_out shape mismatch");
    if (ctx.buffer.empty()) return gy;
    Tensor4 gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] *= ctx.buffer[i];
    return gx;
}

// ---- Upsample2x ----

namespace {

struct Tap {
    int i0, i1;
    double w1;
};

std::vector<Tap> upsample_taps(int in)
{
    std::vector<Tap> taps(2 * in);
    for (int o = 0; o < 2 * in; ++o) {
        const double src = std::max(0.0, (o + 0.5) * 0.5 - 0.5);
        const int i0 = std::min(static_cast<int>(src), in - 1);
        const int i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, src - i0};
    }
    return taps;
}

} // namespace

Tensor4 Upsample2x::forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode&) const
{
    const auto ty = upsample_taps(x.h);
    const auto tx = upsample_taps(x.w);
    Tensor4 y(x.n, x.c, 2 * x.h, 2 * x.w);
    for (int b = 0; b < x.n; ++b)
        for (int c = 0; c < x.c; ++c) {
            const double* s = x.channel(b, c);
            double* d = y.channel(b, c);
            for (int oy = 0; oy < y.h; ++oy) {
                const Tap& a = ty[oy];
                for (int ox = 0; ox < y.w; ++ox) {
                    const Tap& t = tx[ox];
                    const double top = (1.0 - t.w1) * s[a.i0 * x.w + t.i0] + t.w1 * s[a.i0 * x.w + t.i1];
                    const double bot = (1.0 - t.w1) * s[a.i1 * x.w + t.i0] + t.w1 * s[a.i1 * x.w + t.i1];
                    d[oy * y.w + ox] = (1.0 - a.w1) * top + a.w1 * bot;
                }
            }
        }
    ctx.input = Tensor4();
    ctx.input.n = x.n;
    ctx.input.c = x.c;
    ctx.input.h = x.h;
    ctx.input.w = x.w;
    record(store, ctx);
    return y;
}

Tensor4 Upsample2x::backward(ParamStore& store, const Tensor4& gy, const Context& ctx) const
{
    verify(store, ctx);
    const Tensor4& xs = ctx.input;
    if (gy.n != xs.n || gy.c != xs.c || gy.h != 2 * xs.h || gy.w != 2 * xs.w)
        throw DimensionError("upsample2x grad_out shape mismatch");
    const auto ty = upsample_taps(xs.h);
    const auto tx = upsample_taps(xs.w);
    Tensor4 gx(xs.n, xs.c, xs.h, xs.w);
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const double* g = gy.channel(b, c);
            double* d = gx.channel(b, c);
            for (int oy = 0; oy < gy.h; ++oy) {
                const Tap& a = ty[oy];
                for (int ox = 0; ox < gy.w; ++ox) {
                    const Tap& t = tx[ox];
                    const double v = g[oy * gy.w + ox];
                    d[a.i0 * xs.w + t.i0] += (1.0 - a.w1) * (1.0 - t.w1) * v;
                    d[a.i0 * xs.w + t.i1] += (1.0 - a.w1) * t.w1 * v;
                    d[a.i1 * xs.w + t.i0] += a.w1 * (1.0 - t.w1) * v;
                    d[a.i1 * xs.w + t.i1] += a.w1 * t.w1 * v;
                }
            }
        }
    return gx;
}

// ---- Adam ----

void adam_step(ParamStore& store, double lr, AdamState& state, const AdamConfig& cfg)
{
    for (const Param& p : store.params())
        for (double g : p.grad)
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
    if (state.m.size() != store.size()) {
        if (!state.m.empty()) throw DimensionError("optimizer state does not match the parameter store");
        state.m.resize(store.size());
        state.v.resize(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) {
            state.m[i].assign(store[i].value.size(), 0.0);
            state.v[i].assign(store[i].value.size(), 0.0);
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < store.size(); ++i) {
        Param& p = store[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.value.size()) throw DimensionError("optimizer state does not match " + p.name);
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            p.value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
        }
    }
    store.zero_grad();
    store.touch();
}

// ---- gradient check ----

double relative_error(double analytic, double numeric, double floor)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult check_gradients(ParamStore& store, const std::function<double()>& loss,
                                const std::function<void()>& backward, std::size_t max_entries, double h,
                                std::uint64_t seed, const std::function<bool(const Param&)>& filter)
{
    std::vector<std::pair<std::size_t, std::size_t>> entries;
    for (std::size_t p = 0; p < store.size(); ++p)
        if (!filter || filter(store[p]))
            for (std::size_t j = 0; j < store[p].value.size(); ++j) entries.emplace_back(p, j);
    if (entries.size() > max_entries) {
        std::vector<std::pair<std::size_t, std::size_t>> picked;
        Rng rng = make_rng({seed, 0x9c});
        std::sample(entries.begin(), entries.end(), std::back_inserter(picked), max_entries, rng);
        entries = std::move(picked);
    }

    store.zero_grad();
    backward();
    std::vector<double> analytic;
    analytic.reserve(entries.size());
    for (auto [p, j] : entries) analytic.push_back(store[p].grad[j]);

    GradCheckResult result;
    for (std::size_t e = 0; e < entries.size(); ++e) {
        auto [p, j] = entries[e];
        double& v = store[p].value[j];
        const double saved = v;
        v = saved + h;
        const double up = loss();
        v = saved - h;
        const double down = loss();
        v = saved;
        const double numeric = (up - down) / (2.0 * h);
        double err = relative_error(analytic[e], numeric);
        if (err > kKinkTolerance) {
            const double mid = loss();
            const double right = (up - mid) / h;
            const double left = (mid - down) / h;
            const double h2 = h * 0.01;
            v = saved + h2;
            const double up2 = loss();
            v = saved - h2;
            const double down2 = loss();
            v = saved;
            if (relative_error(right, left) > kKinkTolerance &&
                relative_error(analytic[e], (up2 - down2) / (2.0 * h2)) <= kKinkTolerance) {
                ++result.kinks;
                err = 0.0;
            }
        }
        if (err >= result.max_rel_error) {
            result.max_rel_error = err;
            result.worst = store[p].name + "[" + std::to_string(j) + "]";
        }
        ++result.checked;
    }
    store.zero_grad();
    return result;
}

} // namespace profed::nn
