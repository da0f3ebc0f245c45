#pragma once

// Federated round engine: broadcast, local training, MC-dropout uncertainty,
// uncertainty-weighted aggregation of the shared partition, cosine schedule.

#include "profed/losses.hpp"
#include "profed/model.hpp"
#include "profed/phantoms.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace profed::fed {

struct RoundConfig {
    int rounds = 30;
    int local_epochs = 2;
    int batch_size = 2;
    int mc_samples = 8;
    double mc_dropout_rate = 0.1;
    double eps = 1e-8;
    double lr_max = 1e-3;
    double lr_min = 1e-5;
    // FedAvg reference: N_k weights, every parameter aggregated, no projection losses.
    bool baseline_mode = false;
    bool uncertainty_weighting = true;
    int threads = 1;
    // Order in which clients are dispatched to workers; empty means natural order.
    std::vector<std::size_t> schedule;

    void validate() const;
};

struct ClientState {
    int client_id = 0;
    std::unique_ptr<model::Denoiser> model;
    const phantoms::ClientDataset* data = nullptr;
    nn::AdamState optimizer;
    double uncertainty = 0.0;
    std::vector<int> visits;  // per training sample, cumulative

    std::size_t sample_count() const { return data ? data->train.size() : 0; }
};

// Everything a client sends to the server. Local parameters, images and
// sinograms have no field here by construction.
struct ServerMessage {
    int client_id = 0;
    std::vector<double> shared;
    double uncertainty = 0.0;
    std::size_t sample_count = 0;
};

struct AggregationWeights {
    std::vector<double> w;
    std::vector<double> unnormalized;
};

// Values of the aggregated partition: the shared one, or every parameter.
std::vector<double> payload(const nn::ParamStore& store, bool all_params);

// Overwrites every client's aggregated partition; local parameters are untouched
// unless `all_params` is set.
void broadcast(std::span<const double> global, std::span<ClientState> clients, bool all_params = false);

struct SplitMetrics {
    losses::LossReport losses;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

struct LocalResult {
    std::vector<losses::LossReport> epoch_losses;  // mean over batches, one per epoch
    SplitMetrics last_epoch;                        // losses and quality of the final epoch's predictions
};

LocalResult local_train(ClientState& client, const RoundConfig& cfg, const losses::LossWeights& weights, double lr,
                        std::uint64_t master_seed, int round);

// Mean over validation samples of the mean per-pixel variance across M
// stochastic passes with dropout active at `rate`.
double mc_dropout_uncertainty(const ClientState& client, int samples, double rate, std::uint64_t master_seed,
                              int round);

// w_k proportional to N_k / (u_k + eps), normalized. Without uncertainty
// weighting, w_k = N_k / N_total.
AggregationWeights aggregation_weights(std::span<const ServerMessage> messages, double eps, bool use_uncertainty = true);

std::vector<double> aggregate_shared(std::span<const ServerMessage> messages, const AggregationWeights& w);

double cosine_lr(double lr_max, double lr_min, int t, int total);

// Mean losses (raw output) and quality (clamped output) over a split.
SplitMetrics evaluate_split(const model::Denoiser& m, std::span<const phantoms::Sample> samples,
                            const losses::LossWeights& weights);

struct ClientRoundRecord {
    int round = 0;
    int client = 0;
    std::string split;
    SplitMetrics metrics;
    double u = 0.0;
    double w = 0.0;
};

struct RoundRecord {
    int round = 0;
    double lr = 0.0;
    std::vector<ClientRoundRecord> rows;  // train and val per client
};

struct TrainingState {
    std::vector<double> global_shared;
    int next_round = 0;
};

class RoundAbort : public std::runtime_error {
public:
    RoundAbort(int round, int client, const std::string& what)
        : std::runtime_error("round " + std::to_string(round) + ", client " + std::to_string(client) + ": " + what),
          round_(round), client_(client) {}
    int round() const noexcept { return round_; }
    int client() const noexcept { return client_; }

private:
    int round_;
    int client_;
};

using RoundCallback = std::function<void(const TrainingState&, std::span<const ClientState>, const RoundRecord&)>;

// Runs rounds state.next_round .. cfg.rounds - 1. The callback fires after
// every completed round (state already advanced).
std::vector<RoundRecord> run_training(std::span<ClientState> clients, const RoundConfig& cfg,
                                      const losses::LossWeights& weights, std::uint64_t master_seed,
                                      TrainingState& state, const RoundCallback& on_round = {});

// Builds one client per dataset, all starting from the same initialization.
std::vector<ClientState> make_clients(std::span<const phantoms::ClientDataset> datasets,
                                      const model::ModelConfig& cfg, std::uint64_t init_seed);

} // namespace profed::fed
