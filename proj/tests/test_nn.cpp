#include "doctest.h"

#include "profed/errors.hpp"
#include "profed/nn.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>

using namespace profed;
using namespace profed::nn;

namespace {

void fill_random(std::vector<double>& v, Rng& rng, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    for (double& x : v) x = n(rng);
}

// Registers the layer input as a parameter named "x" so that the checker also
// covers d loss / d input, then compares against central differences on the
// linear functional sum(c * y).
double layer_grad_error(const Layer& layer, ParamStore& store, int n, int c, int h, int w, Mode mode,
                        std::uint64_t seed)
{
    const std::size_t xi = store.add("x", {n, c, h, w}, Partition::Shared, Init::Zero);
    Rng rng = make_rng({seed});
    for (Param& p : store.params()) fill_random(p.value, rng, 0.7);

    auto input = [&] {
        Tensor4 x(n, c, h, w);
        x.data = store[xi].value;
        return x;
    };
    Context probe;
    Mode m = mode;
    Rng dropout_rng = make_rng({seed, 1});
    if (m.training) m.rng = &dropout_rng;
    const Tensor4 shape = layer.forward(store, input(), probe, m);
    std::vector<double> weights(shape.size());
    fill_random(weights, rng);

    auto loss = [&] {
        Rng r = make_rng({seed, 1});
        Mode mm = mode;
        if (mm.training) mm.rng = &r;
        Context ctx;
        const Tensor4 y = layer.forward(store, input(), ctx, mm);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += weights[i] * y.data[i];
        return s;
    };
    auto backward = [&] {
        Rng r = make_rng({seed, 1});
        Mode mm = mode;
        if (mm.training) mm.rng = &r;
        Context ctx;
        Tensor4 y = layer.forward(store, input(), ctx, mm);
        y.data = weights;
        const Tensor4 gx = layer.backward(store, y, ctx);
        for (std::size_t i = 0; i < gx.size(); ++i) store[xi].grad[i] += gx.data[i];
    };
    const GradCheckResult r = check_gradients(store, loss, backward, 200, 1e-4, seed);
    CAPTURE(layer.kind());
    CAPTURE(r.worst);
    CHECK(r.checked > 0);
    CHECK(r.kinks * 20 <= r.checked);
    return r.max_rel_error;
}

} // namespace

TEST_CASE("finite-difference gradients for every layer type")
{
    SUBCASE("conv2d stride 1")
    {
        ParamStore s;
        Conv2d conv(s, "c", 3, 4, 3, 1, 1);
        CHECK(layer_grad_error(conv, s, 2, 3, 6, 6, {}, 1) <= 1e-3);
    }
    SUBCASE("conv2d stride 2")
    {
        ParamStore s;
        Conv2d conv(s, "c", 2, 3, 3, 2, 1);
        CHECK(layer_grad_error(conv, s, 1, 2, 8, 8, {}, 2) <= 1e-3);
    }
    SUBCASE("conv2d with low-rank adapter")
    {
        ParamStore s;
        Conv2d conv(s, "c", 2, 4, 3, 1, 1);
        conv.add_lora(s, 2, Partition::Shared);
        CHECK(layer_grad_error(conv, s, 1, 2, 5, 5, {}, 3) <= 1e-3);
    }
    SUBCASE("transposed conv with low-rank adapter")
    {
        ParamStore s;
        ConvTranspose2d conv(s, "t", 3, 2, 3, 2, 1, 1);
        conv.add_lora(s, 2, Partition::Shared);
        CHECK(layer_grad_error(conv, s, 2, 3, 4, 4, {}, 4) <= 1e-3);
    }
    SUBCASE("linear")
    {
        ParamStore s;
        Linear fc(s, "fc", 5, 3);
        CHECK(layer_grad_error(fc, s, 3, 5, 1, 1, {}, 5) <= 1e-3);
    }
    SUBCASE("activations")
    {
        for (auto a : {Activation::ReLU, Activation::Sigmoid, Activation::Tanh, Activation::Softplus}) {
            ParamStore s;
            Pointwise act(a);
            CHECK(layer_grad_error(act, s, 2, 2, 4, 4, {}, 6) <= 1e-3);
        }
    }
    SUBCASE("dropout in training mode")
    {
        ParamStore s;
        Dropout drop(0.3);
        Mode m;
        m.training = true;
        CHECK(layer_grad_error(drop, s, 1, 3, 4, 4, m, 7) <= 1e-3);
    }
    SUBCASE("bilinear upsampling")
    {
        ParamStore s;
        Upsample2x up;
        CHECK(layer_grad_error(up, s, 1, 2, 5, 3, {}, 8) <= 1e-3);
    }
}

TEST_CASE("layer examples")
{
    Rng rng = make_rng({11});
    Tensor4 x(2, 3, 5, 5);
    fill_random(x.data, rng);

    ParamStore s;
    Conv2d id(s, "id", 3, 3, 1, 1, 0);
    for (int o = 0; o < 3; ++o) s.at("id.weight").value[o * 3 + o] = 1.0;
    Context ctx;
    CHECK(id.forward(s, x, ctx, {}).data == x.data);

    Tensor4 neg = x;
    for (double& v : neg.data) v = -std::abs(v) - 0.1;
    Pointwise relu(Activation::ReLU);
    for (double v : relu.forward(s, neg, ctx, {}).data) CHECK(v == 0.0);

    Dropout none(0.0);
    Mode train;
    train.training = true;
    train.rng = &rng;
    CHECK(none.forward(s, x, ctx, train).data == x.data);

    Dropout half(0.5);
    CHECK(half.forward(s, x, ctx, {}).data == x.data);
    const Tensor4 dropped = half.forward(s, x, ctx, train);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK((dropped.data[i] == 0.0 || dropped.data[i] == 2.0 * x.data[i]));
    CHECK_THROWS_AS(Dropout(1.0), std::invalid_argument);

    Upsample2x up;
    Tensor4 constant(1, 1, 3, 4, 0.25);
    for (double v : up.forward(s, constant, ctx, {}).data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("linear backward matches the closed form")
{
    ParamStore s;
    Linear fc(s, "fc", 4, 3);
    init_params(s, 5);
    Rng rng = make_rng({12});
    Tensor4 x(2, 4, 1, 1), g(2, 3, 1, 1);
    fill_random(x.data, rng);
    fill_random(g.data, rng);
    Context ctx;
    fc.forward(s, x, ctx, {});
    fc.backward(s, g, ctx);
    const auto& gw = s.at("fc.weight").grad;
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 4; ++i) {
            const double expected = g.data[o] * x.data[i] + g.data[3 + o] * x.data[4 + i];
            CHECK(gw[o * 4 + i] == doctest::Approx(expected).epsilon(1e-14));
        }
}

TEST_CASE("zero grad_out gives zero gradients")
{
    ParamStore s;
    Conv2d conv(s, "c", 2, 3, 3, 2, 1);
    conv.add_lora(s, 2, Partition::Shared);
    ConvTranspose2d up(s, "t", 3, 2, 3, 2, 1, 1);
    init_params(s, 3);
    Rng rng = make_rng({13});
    Tensor4 x(1, 2, 8, 8);
    fill_random(x.data, rng);
    Context c1, c2;
    const Tensor4 h = conv.forward(s, x, c1, {});
    const Tensor4 y = up.forward(s, h, c2, {});
    const Tensor4 gh = up.backward(s, Tensor4(y.n, y.c, y.h, y.w), c2);
    const Tensor4 gx = conv.backward(s, gh, c1);
    for (double v : gx.data) CHECK(v == 0.0);
    for (const Param& p : s.params())
        for (double g : p.grad) CHECK(g == 0.0);
}

TEST_CASE("stale or foreign contexts are rejected")
{
    ParamStore s;
    Conv2d a(s, "a", 1, 2, 3, 1, 1);
    Conv2d b(s, "b", 1, 2, 3, 1, 1);
    init_params(s, 1);
    Tensor4 x(1, 1, 4, 4, 0.5);
    Context ctx;
    const Tensor4 y = a.forward(s, x, ctx, {});
    CHECK_THROWS_AS(b.backward(s, y, ctx), ContractViolation);
    s.zero_grad();
    AdamState st;
    adam_step(s, 1e-3, st);
    CHECK_THROWS_AS(a.backward(s, y, ctx), ContractViolation);
}

TEST_CASE("shape mismatches raise dimension errors")
{
    ParamStore s;
    Conv2d conv(s, "c", 2, 3, 3, 1, 1);
    Linear fc(s, "fc", 4, 2);
    Context ctx;
    CHECK_THROWS_AS(conv.forward(s, Tensor4(1, 3, 4, 4), ctx, {}), DimensionError);
    CHECK_THROWS_AS(fc.forward(s, Tensor4(1, 4, 2, 1), ctx, {}), DimensionError);
    const Tensor4 y = conv.forward(s, Tensor4(1, 2, 4, 4), ctx, {});
    CHECK_THROWS_AS(conv.backward(s, Tensor4(1, 3, 5, 4), ctx), DimensionError);
    CHECK_THROWS_AS(Tensor4(0, 1, 1, 1), DimensionError);
    (void)y;
}

TEST_CASE("init_params: determinism, zero biases and partitions")
{
    auto build = [](ParamStore& s) {
        Conv2d c(s, "c", 2, 4, 3, 1, 1);
        c.add_lora(s, 8, Partition::Shared);
        Linear l(s, "l", 4, 4, Partition::Local);
        Linear g(s, "g", 4, 1, Partition::Local, Init::Zero);
    };
    ParamStore a, b;
    build(a);
    build(b);
    init_params(a, 77);
    init_params(b, 77);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].value == b[i].value);

    for (const Param& p : a.params()) {
        if (p.name.ends_with(".bias") || p.name.ends_with(".lora_b") || p.name == "g.weight") {
            for (double v : p.value) CHECK(v == 0.0);
        } else {
            const double bound = std::sqrt(6.0 / p.fan_in);
            for (double v : p.value) CHECK(std::abs(v) <= bound);
        }
    }
    CHECK(a.at("c.lora_a").shape == std::vector<int>{2, 18});
    CHECK(a.count(Partition::Shared) + a.count(Partition::Local) ==
          [&] { std::size_t n = 0; for (const Param& p : a.params()) n += p.value.size(); return n; }());

    ParamStore c;
    build(c);
    init_params(c, 78);
    CHECK(c.at("c.weight").value != a.at("c.weight").value);
}

TEST_CASE("partition flatten and assign round-trip")
{
    ParamStore s;
    Linear a(s, "a", 3, 2);
    Linear b(s, "b", 2, 2, Partition::Local);
    init_params(s, 4);
    const auto shared = s.flatten(Partition::Shared);
    const auto local = s.flatten(Partition::Local);
    CHECK(shared.size() == 8);
    CHECK(local.size() == 6);
    std::vector<double> doubled = shared;
    for (double& v : doubled) v *= 2.0;
    const auto before = s.version();
    s.assign(Partition::Shared, doubled);
    CHECK(s.version() > before);
    CHECK(s.flatten(Partition::Shared) == doubled);
    CHECK(s.flatten(Partition::Local) == local);
    CHECK_THROWS_AS(s.assign(Partition::Local, shared), ProtocolError);
}

TEST_CASE("lora_effective_weight matches a dense product and respects the rank bound")
{
    Rng rng = make_rng({21});
    const int d_out = 6, d_in = 9, r = 2;
    std::vector<double> w0(d_out * d_in), a(r * d_in), b(d_out * r);
    fill_random(w0, rng);
    fill_random(a, rng);
    fill_random(b, rng);
    const auto w = lora_effective_weight(w0, a, b, d_out, d_in, r);
    Eigen::MatrixXd delta(d_out, d_in);
    for (int i = 0; i < d_out; ++i)
        for (int j = 0; j < d_in; ++j) {
            double s = 0.0;
            for (int k = 0; k < r; ++k) s += b[i * r + k] * a[k * d_in + j];
            CHECK(w[i * d_in + j] == w0[i * d_in + j] + s);
            delta(i, j) = w[i * d_in + j] - w0[i * d_in + j];
        }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(delta);
    lu.setThreshold(1e-10);
    CHECK(lu.rank() <= r);

    std::vector<double> zero_b(d_out * r, 0.0);
    CHECK(lora_effective_weight(w0, a, zero_b, d_out, d_in, r) == w0);
    CHECK_THROWS_AS(lora_effective_weight(w0, a, b, d_out, d_in, 7), std::invalid_argument);
    CHECK(lora_rank(8, 144, 16) == 8);
    CHECK(lora_rank(8, 144, 8) == 4);
}

TEST_CASE("forward passes are deterministic")
{
    ParamStore s;
    Conv2d conv(s, "c", 1, 4, 3, 2, 1);
    Dropout drop(0.2);
    init_params(s, 9);
    Tensor4 x(1, 1, 8, 8, 0.3);
    auto run = [&] {
        Rng r = make_rng({5, stream::dropout});
        Mode m{true, &r};
        Context c1, c2;
        return drop.forward(s, conv.forward(s, x, c1, m), c2, m).data;
    };
    CHECK(run() == run());
}

TEST_CASE("adam: closed-form steps, bowl and non-finite gradients")
{
    ParamStore s;
    const std::size_t w = s.add("w", {1}, Partition::Shared, Init::Zero);
    s[w].value[0] = 1.0;

    AdamState st;
    adam_step(s, 0.01, st);
    CHECK(s[w].value[0] == 1.0);

    AdamState st2;
    s[w].grad[0] = 1.0;
    adam_step(s, 0.01, st2);
    CHECK(s[w].value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-10));
    CHECK(s[w].grad[0] == 0.0);

    s[w].value[0] = 1.0;
    AdamState bowl;
    for (int i = 0; i < 200; ++i) {
        s[w].grad[0] = 2.0 * s[w].value[0];
        adam_step(s, 0.01, bowl);
    }
    CAPTURE(s[w].value[0]);
    CHECK(std::abs(s[w].value[0]) < 0.1);

    const double before = s[w].value[0];
    s[w].grad[0] = std::nan("");
    CHECK_THROWS_AS(adam_step(s, 0.01, bowl), NumericError);
    CHECK(s[w].value[0] == before);
}

TEST_CASE("gradient checker: kink handling does not mask wrong gradients")
{
    ParamStore s;
    const std::size_t w = s.add("w", {2}, Partition::Shared, Init::Zero);
    s[w].value = {5e-5, 0.7};
    // f = relu(w0) + w1^3; the first entry sits within one step of the corner.
    auto loss = [&] { return std::max(0.0, s[w].value[0]) + std::pow(s[w].value[1], 3); };
    auto good = [&] {
        s[w].grad[0] += s[w].value[0] > 0.0 ? 1.0 : 0.0;
        s[w].grad[1] += 3.0 * s[w].value[1] * s[w].value[1];
    };
    auto bad = [&] {
        s[w].grad[0] += s[w].value[0] > 0.0 ? 0.5 : 0.0;
        s[w].grad[1] += 3.3 * s[w].value[1] * s[w].value[1];
    };
    const GradCheckResult ok = check_gradients(s, loss, good, 10, 1e-4, 1);
    CHECK(ok.kinks == 1);
    CHECK(ok.max_rel_error <= 1e-6);
    const GradCheckResult wrong = check_gradients(s, loss, bad, 10, 1e-4, 1);
    CHECK(wrong.kinks == 0);
    CHECK(wrong.max_rel_error > 0.05);
}
