#pragma once

// Experiment configuration: JSON file in, fully validated struct out.

#include "profed/fed.hpp"
#include "profed/losses.hpp"
#include "profed/model.hpp"
#include "profed/phantoms.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace profed::harness {

enum class RunMode { ProFed, FedAvgBaseline, Ablation };

// Components an ablation run switches off. Exactly one is set in ablation mode.
struct Ablation {
    bool no_projection = false;
    bool no_protocol = false;
    bool no_anatomy = false;
    bool no_uncertainty = false;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    int image_side = 64;
    int clients = 4;
    phantoms::ProtocolRanges ranges;
    std::vector<phantoms::ProtocolSetting> protocols;         // empty: default grid
    std::vector<phantoms::ProtocolSetting> unseen_protocols;  // empty: default unseen pair
    int train_per_client = 8;
    int val_per_client = 2;
    int test_per_client = 4;

    int latent_channels = 16;
    int anatomy_dim = 32;
    int anatomy_hidden = 32;
    int lora_rank = 8;
    double dropout_rate = 0.1;
    bool lora_local = false;
    bool protocol_local = false;

    losses::LossWeights weights;

    int rounds = 30;
    int local_epochs = 2;
    int batch_size = 2;
    int mc_samples = 8;
    double eps = 1e-8;
    double lr_max = 1e-3;
    double lr_min = 1e-5;
    int threads = 1;

    std::string output_dir = "profed_out";
    RunMode mode = RunMode::ProFed;
    Ablation ablation;

    std::string mode_name() const;
    // Effective settings after the mode is applied.
    std::vector<phantoms::ProtocolSetting> client_protocols() const;
    std::vector<phantoms::ProtocolSetting> unseen_client_protocols() const;
    model::ModelConfig model_config() const;
    fed::RoundConfig round_config() const;
    losses::LossWeights effective_weights() const;
    phantoms::DatasetConfig dataset_config(bool unseen) const;

    // Throws ConfigError(InvalidValue) naming the first offending key.
    void validate() const;
};

// Every accepted key, in documentation order.
const std::vector<std::string>& config_keys();

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);

// Canonical JSON of every effective value, in key order.
std::string to_json(const ExperimentConfig& cfg, int indent = 2);

// FNV-1a 64 of the canonical JSON, excluding keys that cannot change results
// (output_dir, threads).
std::uint64_t config_hash(const ExperimentConfig& cfg);

RunMode parse_mode(const std::string& text, Ablation& ablation);

std::size_t edit_distance(const std::string& a, const std::string& b);

} // namespace profed::harness
