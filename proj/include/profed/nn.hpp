#pragma once

// Small differentiable core: 4-D tensors, a named parameter store with
// shared/local partition tags, layers with explicit backward passes, Adam,
// and a finite-difference gradient checker.

#include "profed/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace profed::nn {

struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0);

    std::size_t size() const noexcept { return data.size(); }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    double* channel(int b, int ch) { return data.data() + (static_cast<std::size_t>(b) * c + ch) * plane(); }
    const double* channel(int b, int ch) const { return data.data() + (static_cast<std::size_t>(b) * c + ch) * plane(); }
    double& at(int b, int ch, int y, int x) { return channel(b, ch)[static_cast<std::size_t>(y) * w + x]; }
    double at(int b, int ch, int y, int x) const { return channel(b, ch)[static_cast<std::size_t>(y) * w + x]; }
    bool same_shape(const Tensor4& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
    std::string shape_string() const;
};

enum class Partition { Shared, Local };
enum class Init { HeUniform, Zero };

struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    Partition partition = Partition::Shared;
    Init init = Init::Zero;
    int fan_in = 1;
};

class ParamStore {
public:
    // Registers a zero-filled parameter; names must be unique.
    std::size_t add(const std::string& name, std::vector<int> shape, Partition partition, Init init, int fan_in = 1);

    std::size_t size() const noexcept { return params_.size(); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index(const std::string& name) const;

    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    Param& at(const std::string& name) { return params_[index(name)]; }
    const Param& at(const std::string& name) const { return params_[index(name)]; }

    std::vector<Param>& params() noexcept { return params_; }
    const std::vector<Param>& params() const noexcept { return params_; }

    void set_partition(const std::string& name, Partition p);

    // Incremented whenever values change through the store; forward contexts
    // recorded under an older version are rejected by backward.
    std::uint64_t version() const noexcept { return version_; }
    void touch() noexcept { ++version_; }

    void zero_grad();
    std::size_t count(Partition p) const;

    // Concatenated values of one partition in registration order.
    std::vector<double> flatten(Partition p) const;
    void assign(Partition p, std::span<const double> values);

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::uint64_t version_ = 0;
};

// He-uniform weights (bound sqrt(6 / fan_in)) for every HeUniform parameter,
// zeros elsewhere, drawn in registration order from one seeded stream.
void init_params(ParamStore& store, std::uint64_t seed);

struct Mode {
    bool training = false;
    Rng* rng = nullptr;          // required by dropout in training mode
    bool adapters = true;        // apply low-rank adapters where attached
    double dropout_rate = -1.0;  // negative: each dropout layer uses its own rate
};

// Saved state of one forward call.
struct Context {
    const void* owner = nullptr;
    std::uint64_t version = 0;
    Tensor4 input;
    Tensor4 output;
    std::vector<double> buffer;
    bool adapters = false;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string kind() const = 0;
    virtual Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const = 0;
    // Accumulates parameter gradients into the store and returns d loss / d input.
    virtual Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const = 0;

protected:
    void record(const ParamStore& store, Context& ctx) const;
    void verify(const ParamStore& store, const Context& ctx) const;
};

// Low-rank update B * A added to a layer's operator matrix (d_out x d_in).
struct LoraRef {
    std::size_t a = 0;  // r x d_in
    std::size_t b = 0;  // d_out x r
    int rank = 0;
};

// Rank used for an adapter on a d_out x d_in matrix: min(requested, min(d_in, d_out) / 2), at least 1.
int lora_rank(int requested, int d_in, int d_out);

// Dense W0 + B * A (row-major d_out x d_in).
std::vector<double> lora_effective_weight(std::span<const double> w0, std::span<const double> a,
                                          std::span<const double> b, int d_out, int d_in, int rank);

class Conv2d : public Layer {
public:
    Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
           Partition partition = Partition::Shared, Init weight_init = Init::HeUniform);

    void add_lora(ParamStore& store, int requested_rank, Partition partition);

    std::string kind() const override { return "conv2d"; }
    Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const override;
    Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const override;

    int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
    std::size_t weight_index() const { return weight_; }
    std::size_t bias_index() const { return bias_; }
    const LoraRef* lora() const { return has_lora_ ? &lora_ : nullptr; }

private:
    std::vector<double> effective_weight(const ParamStore& store, bool adapters) const;

    int in_, out_, k_, stride_, pad_;
    std::size_t weight_, bias_;
    bool has_lora_ = false;
    LoraRef lora_;
    std::string name_;
};

// Transposed convolution; weight layout (in, out, k, k).
class ConvTranspose2d : public Layer {
public:
    ConvTranspose2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                    int pad, int output_pad, Partition partition = Partition::Shared,
                    Init weight_init = Init::HeUniform);

    // Adapter on the operator matrix (out * k * k) x in.
    void add_lora(ParamStore& store, int requested_rank, Partition partition);

    std::string kind() const override { return "conv_transpose2d"; }
    Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const override;
    Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const override;

    int out_size(int in) const { return (in - 1) * stride_ - 2 * pad_ + k_ + output_pad_; }
    const LoraRef* lora() const { return has_lora_ ? &lora_ : nullptr; }

private:
    std::vector<double> operator_matrix(const ParamStore& store, bool adapters) const;

    int in_, out_, k_, stride_, pad_, output_pad_;
    std::size_t weight_, bias_;
    bool has_lora_ = false;
    LoraRef lora_;
    std::string name_;
};

// Fully connected on (n, features, 1, 1) tensors.
class Linear : public Layer {
public:
    Linear(ParamStore& store, const std::string& name, int in_features, int out_features,
           Partition partition = Partition::Shared, Init weight_init = Init::HeUniform);

    std::string kind() const override { return "linear"; }
    Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const override;
    Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const override;

    std::size_t weight_index() const { return weight_; }
    std::size_t bias_index() const { return bias_; }

private:
    int in_, out_;
    std::size_t weight_, bias_;
};

enum class Activation { ReLU, Sigmoid, Tanh, Softplus };

class Pointwise : public Layer {
public:
    explicit Pointwise(Activation a) : act_(a) {}

    std::string kind() const override;
    Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const override;
    Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const override;

private:
    Activation act_;
};

// Inverted dropout: kept units are scaled by 1 / (1 - rate) in training mode.
class Dropout : public Layer {
public:
    explicit Dropout(double rate);

    double rate() const noexcept { return rate_; }
    void set_rate(double rate);

    std::string kind() const override { return "dropout"; }
    Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const override;
    Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const override;

private:
    double rate_;
};

// Bilinear x2 upsampling with half-pixel centers and edge clamping.
class Upsample2x : public Layer {
public:
    std::string kind() const override { return "upsample2x"; }
    Tensor4 forward(const ParamStore& store, const Tensor4& x, Context& ctx, const Mode& mode) const override;
    Tensor4 backward(ParamStore& store, const Tensor4& grad_out, const Context& ctx) const override;
};

double softplus(double x);
double sigmoid(double x);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;
};

// One Adam update of every parameter, then zeroes the gradients. A non-finite
// gradient throws NumericError before anything is modified.
void adam_step(ParamStore& store, double lr, AdamState& state, const AdamConfig& cfg = {});

struct GradCheckResult {
    double max_rel_error = 0.0;  // over entries whose step does not straddle a kink
    std::size_t checked = 0;
    std::size_t kinks = 0;       // entries excluded from max_rel_error, see below
    std::string worst;           // "name[index]" of the worst entry
};

// Compares analytic gradients against central differences on up to
// `max_entries` randomly chosen parameter entries (restricted to parameters
// accepted by `filter`, when given). `loss` must evaluate the scalar at the
// current values; `backward` must fill store gradients.
//
// An entry whose central difference misses by more than kKinkTolerance is
// counted as a kink instead of an error only if both hold: the one-sided
// differences at h disagree by more than that tolerance (the step straddles a
// ReLU corner), and the central difference at h / 100 agrees with the
// analytic value.
GradCheckResult check_gradients(ParamStore& store, const std::function<double()>& loss,
                                const std::function<void()>& backward, std::size_t max_entries, double h,
                                std::uint64_t seed, const std::function<bool(const Param&)>& filter = {});

inline constexpr double kKinkTolerance = 1e-3;

// Relative error used by the checker: |a - b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

} // namespace profed::nn
