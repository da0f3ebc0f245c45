// Command-line front end: run, evaluate, selftest.

#include "profed/errors.hpp"
#include "profed/harness.hpp"
#include "profed/metrics.hpp"
#include "profed/nn.hpp"
#include "profed/tomo.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

namespace {

using namespace profed;
namespace fs = std::filesystem;

enum Exit : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kConfig = 3,
    kCheckpoint = 4,
    kNumeric = 5,
    kProtocol = 6,
    kIo = 7,
    kSelftest = 8,
};

void print_summary(const harness::ExperimentResult& r)
{
    std::printf("%-8s %6s %10s %12s %8s %10s\n", "group", "client", "views", "input_psnr", "psnr", "ssim");
    for (const auto& e : r.evaluation)
        std::printf("%-8s %6d %10d %12.3f %8.3f %10.4f\n", e.group.c_str(), e.client, e.views, e.input_psnr, e.psnr,
                    e.ssim);
    std::printf("mean held-out PSNR %.3f dB (input %.3f dB), unseen %.3f dB (input %.3f dB)\n", r.summary.test_psnr,
                r.summary.test_input_psnr, r.summary.unseen_psnr, r.summary.unseen_input_psnr);
}

int selftest()
{
    int failures = 0;
    const auto report = [&](const char* name, bool ok, const std::string& detail) {
        std::printf("%s %s  %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
        if (!ok) ++failures;
    };

    {
        const auto geo = std::make_shared<const tomo::ProjectionGeometry>(tomo::ProjectionGeometry::parallel(32, 45));
        Rng rng = make_rng({1});
        std::normal_distribution<double> n(0.0, 1.0);
        double worst = 0.0;
        for (int t = 0; t < 20; ++t) {
            tomo::Image x(32);
            for (double& v : x.data) v = n(rng);
            tomo::Sinogram y(geo);
            for (double& v : y.data) v = n(rng);
            const tomo::Sinogram rx = tomo::forward_project(x, geo);
            const tomo::Image rty = tomo::back_project(y);
            double a = 0.0, b = 0.0, nrx = 0.0, ny = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) {
                a += rx.data[i] * y.data[i];
                nrx += rx.data[i] * rx.data[i];
                ny += y.data[i] * y.data[i];
            }
            for (std::size_t i = 0; i < x.data.size(); ++i) b += x.data[i] * rty.data[i];
            worst = std::max(worst, std::abs(a - b) / std::sqrt(nrx * ny));
        }
        report("adjoint", worst <= 1e-6, "max relative mismatch " + std::to_string(worst));
    }
    {
        nn::ParamStore s;
        nn::Conv2d conv(s, "conv", 2, 3, 3, 1, 1);
        const std::size_t xi = s.add("x", {1, 2, 6, 6}, nn::Partition::Shared, nn::Init::HeUniform, 1);
        nn::init_params(s, 3);
        nn::Tensor4 target(1, 3, 6, 6, 0.25);
        const auto input = [&] {
            nn::Tensor4 x(1, 2, 6, 6);
            x.data = s[xi].value;
            return x;
        };
        const auto loss = [&] {
            nn::Context ctx;
            const nn::Tensor4 y = conv.forward(s, input(), ctx, {});
            double l = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) l += 0.5 * (y.data[i] - target.data[i]) * (y.data[i] - target.data[i]);
            return l;
        };
        const auto backward = [&] {
            nn::Context ctx;
            nn::Tensor4 y = conv.forward(s, input(), ctx, {});
            for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= target.data[i];
            const nn::Tensor4 gx = conv.backward(s, y, ctx);
            for (std::size_t i = 0; i < gx.size(); ++i) s[xi].grad[i] += gx.data[i];
        };
        const auto r = nn::check_gradients(s, loss, backward, 60, 1e-4, 7);
        report("conv gradient", r.max_rel_error <= 1e-3, "max relative error " + std::to_string(r.max_rel_error));
    }
    {
        const std::vector<fed::ServerMessage> ms{{0, {}, 1.0, 10}, {1, {}, 3.0, 10}};
        const auto w = fed::aggregation_weights(ms, 1e-15);
        report("aggregation weights", std::abs(w.w[0] - 0.75) < 1e-12 && std::abs(w.w[1] - 0.25) < 1e-12,
               "w = (" + std::to_string(w.w[0]) + ", " + std::to_string(w.w[1]) + ")");
    }
    {
        tomo::Image a(16, 0.5), b(16, 0.51);
        const double p = metrics::psnr(a, b);
        report("psnr", metrics::psnr_from_mse(1e-4) == 40.0 && std::abs(p - 40.0) < 1e-9,
               "PSNR at MSE 1e-4 = " + std::to_string(p));
    }
    {
        model::ModelConfig cfg;
        cfg.latent_channels = 4;
        cfg.anatomy_dim = 8;
        cfg.anatomy_hidden = 8;
        model::Denoiser m(cfg);
        m.initialize(1);
        model::ModelInput in;
        in.low_dose = nn::Tensor4(1, 1, 16, 16, 0.3);
        in.protocol = {model::ProtocolValues{0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 0.0}};
        in.anatomy = {std::vector<double>(8, 0.35)};
        model::ForwardOptions plain;
        plain.plain = true;
        const bool same = m.forward(in, {}).image.data == m.forward(in, {}, nullptr, plain).image.data;
        report("identity at init", same, same ? "bitwise equal" : "outputs differ");
    }
    return failures == 0 ? kOk : kSelftest;
}

int guarded(const std::function<int()>& body)
{
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const fed::RoundAbort& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return kNumeric;
    } catch (const ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return kProtocol;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Personalized federated low-dose CT denoising on synthetic phantoms"};
    app.require_subcommand(1);

    std::string config_path, resume_path, out_dir, checkpoint_path;
    int threads = 0, stop_after = 0;
    bool ignore_hash = false;

    auto* run = app.add_subcommand("run", "Train and evaluate one experiment");
    run->add_option("--config", config_path, "JSON experiment config")->required();
    run->add_option("--resume", resume_path, "Checkpoint to continue from");
    run->add_option("--out", out_dir, "Output directory (overrides PROFED_OUTPUT_DIR and the config)");
    run->add_option("--threads", threads, "Client worker threads (overrides the config)")->check(CLI::PositiveNumber);
    run->add_option("--stop-after", stop_after, "Stop after this many completed rounds")->check(CLI::PositiveNumber);
    run->add_flag("--ignore-config-hash", ignore_hash, "Resume even if the checkpoint came from another config");

    auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on the held-out and unseen-client splits");
    eval->add_option("--config", config_path, "JSON experiment config")->required();
    eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
    eval->add_option("--out", out_dir, "Directory for evaluation.csv");
    eval->add_flag("--ignore-config-hash", ignore_hash, "Accept a checkpoint from another config");

    app.add_subcommand("selftest", "Run the operator, gradient, aggregation and metric self checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    if (run->parsed()) {
        return guarded([&] {
            harness::ExperimentConfig cfg = harness::parse_config(config_path);
            if (threads > 0) cfg.threads = threads;
            cfg.output_dir = harness::resolve_output_dir(cfg, out_dir.empty() ? std::nullopt : std::optional(out_dir))
                                 .string();
            harness::RunOptions opts;
            if (!resume_path.empty()) opts.resume = resume_path;
            opts.ignore_config_hash = ignore_hash;
            if (stop_after > 0) opts.stop_after = stop_after;
            std::printf("mode %s, seed %llu, %d clients, %d rounds -> %s\n", cfg.mode_name().c_str(),
                        static_cast<unsigned long long>(cfg.seed), cfg.clients, cfg.rounds, cfg.output_dir.c_str());
            const harness::ExperimentResult r = harness::run_experiment(cfg, opts);
            if (!r.completed) {
                std::printf("stopped after round %zu; checkpoint in %s\n", r.history.size(),
                            (r.output_dir / "checkpoint.bin").string().c_str());
                return kOk;
            }
            print_summary(r);
            return kOk;
        });
    }
    if (eval->parsed()) {
        return guarded([&] {
            harness::ExperimentConfig cfg = harness::parse_config(config_path);
            const fs::path dir =
                harness::resolve_output_dir(cfg, out_dir.empty() ? std::nullopt : std::optional(out_dir));
            const harness::ExperimentResult r = harness::evaluate_checkpoint(cfg, checkpoint_path, ignore_hash);
            fs::create_directories(dir);
            std::ofstream(dir / "evaluation.csv", std::ios::binary) << harness::evaluation_csv(r.evaluation);
            print_summary(r);
            return kOk;
        });
    }
    return guarded(selftest);
}
