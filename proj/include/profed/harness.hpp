#pragma once

// End-to-end experiments: datasets, federated training, held-out and
// unseen-client evaluation, CSV/manifest/greymap outputs, checkpoints.

#include "profed/checkpoint.hpp"
#include "profed/config.hpp"
#include "profed/fed.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace profed::harness {

inline constexpr const char* kMetricsHeader =
    "round,client,split,loss_recon,loss_het,loss_forward,loss_backward,loss_cycle,loss_projection,loss_total,"
    "psnr_db,ssim,u_k,w_k";

inline constexpr const char* kEvaluationHeader =
    "client,group,views,photons,samples,input_psnr_db,input_ssim,psnr_db,ssim";

struct EvalRow {
    int client = 0;
    std::string group;  // "train" (held-out test split of a training client) or "unseen"
    int views = 0;
    double photons = 0.0;
    int samples = 0;
    double input_psnr = 0.0;  // clamped noisy FBP against full dose
    double input_ssim = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct Summary {
    double test_psnr = 0.0;
    double test_ssim = 0.0;
    double test_input_psnr = 0.0;
    double unseen_psnr = 0.0;
    double unseen_ssim = 0.0;
    double unseen_input_psnr = 0.0;
};

struct ExperimentResult {
    std::vector<fed::RoundRecord> history;
    std::vector<EvalRow> evaluation;
    Summary summary;
    std::filesystem::path output_dir;
    bool completed = false;  // false when stopped early by RunOptions::stop_after
};

struct RunOptions {
    std::optional<std::filesystem::path> resume;
    bool ignore_config_hash = false;
    std::optional<int> stop_after;  // stop once this many rounds are complete
    bool write_outputs = true;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

// Rebuilds the datasets and models from `cfg` and a checkpoint and evaluates
// the held-out and unseen-client splits.
ExperimentResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                     bool ignore_config_hash = false);

// Output directory precedence: explicit CLI value, then PROFED_OUTPUT_DIR, then the config.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg, const std::optional<std::string>& cli_out);

// State capture for checkpoints.
Checkpoint capture_state(const ExperimentConfig& cfg, const fed::TrainingState& state,
                         std::span<const fed::ClientState> clients, const std::vector<fed::RoundRecord>& history);
void restore_state(const Checkpoint& ck, fed::TrainingState& state, std::span<fed::ClientState> clients,
                   std::vector<fed::RoundRecord>& history);

std::string metrics_csv(const std::vector<fed::RoundRecord>& history);
std::string evaluation_csv(const std::vector<EvalRow>& rows);

// Binary greymap (P5), 8-bit, row-major: the images side by side, each clamped to [0, 1].
std::string pgm_row(std::span<const tomo::Image* const> images);

// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& content);

Summary summarize(const std::vector<EvalRow>& rows);

} // namespace profed::harness
