#include "profed/fed.hpp"

#include "profed/errors.hpp"
#include "profed/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace profed::fed {

std::vector<double> payload(const nn::ParamStore& store, bool all)
{
    if (!all) return store.flatten(nn::Partition::Shared);
    std::vector<double> out;
    for (const auto& p : store.params()) out.insert(out.end(), p.value.begin(), p.value.end());
    return out;
}

namespace {

std::size_t payload_size(const nn::ParamStore& store, bool all)
{
    std::size_t n = 0;
    for (const auto& p : store.params())
        if (all || p.partition == nn::Partition::Shared) n += p.value.size();
    return n;
}

void assign_payload(nn::ParamStore& store, std::span<const double> values, bool all)
{
    if (!all) {
        store.assign(nn::Partition::Shared, values);
        return;
    }
    if (values.size() != payload_size(store, true))
        throw ProtocolError("broadcast payload has " + std::to_string(values.size()) + " values, model has " +
                            std::to_string(payload_size(store, true)));
    std::size_t off = 0;
    for (auto& p : store.params()) {
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(), p.value.begin());
        off += p.value.size();
    }
    store.touch();
}

void add_report(losses::LossReport& acc, const losses::LossReport& r, double scale)
{
    acc.recon += scale * r.recon;
    acc.het += scale * r.het;
    acc.forward += scale * r.forward;
    acc.backward += scale * r.backward;
    acc.cycle += scale * r.cycle;
    acc.projection += scale * r.projection;
    acc.total += scale * r.total;
}

losses::ObjectiveTerms terms_for(const phantoms::Sample& s)
{
    return {&s.full_dose, &s.sinogram, &s.low_dose};
}

// Runs fn(i) for every i in `order` on up to `threads` workers. The first
// failure (in `order`) is rethrown after all workers finish.
template <class Fn>
void for_each_client(const std::vector<std::size_t>& order, int threads, Fn&& fn)
{
    std::vector<std::exception_ptr> errors(order.size());
    const auto run = [&](std::size_t slot) {
        try {
            fn(order[slot]);
        } catch (...) {
            errors[slot] = std::current_exception();
        }
    };
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), order.size());
    if (workers <= 1) {
        for (std::size_t s = 0; s < order.size(); ++s) run(s);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                for (std::size_t s = next++; s < order.size(); s = next++) run(s);
            });
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace

void RoundConfig::validate() const
{
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    if (local_epochs < 1) throw std::invalid_argument("local_epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (mc_samples < 1) throw std::invalid_argument("mc_samples must be >= 1");
    if (!(mc_dropout_rate >= 0.0 && mc_dropout_rate < 1.0))
        throw std::invalid_argument("mc_dropout_rate must be in [0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be > 0");
    if (!(lr_min > 0.0) || !(lr_max >= lr_min)) throw std::invalid_argument("need lr_max >= lr_min > 0");
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

void broadcast(std::span<const double> global, std::span<ClientState> clients, bool all_params)
{
    for (auto& c : clients) assign_payload(c.model->params(), global, all_params);
}

LocalResult local_train(ClientState& client, const RoundConfig& cfg, const losses::LossWeights& weights, double lr,
                        std::uint64_t master_seed, int round)
{
    if (!client.data || client.data->train.empty())
        throw std::invalid_argument("client " + std::to_string(client.client_id) + " has no training samples");
    const auto& train = client.data->train;
    if (client.visits.size() != train.size()) client.visits.assign(train.size(), 0);

    const auto cid = static_cast<std::uint64_t>(client.client_id);
    const auto r = static_cast<std::uint64_t>(round);
    Rng shuffle_rng = make_rng({master_seed, cid, r, stream::shuffle});
    Rng dropout_rng = make_rng({master_seed, cid, r, stream::dropout});

    model::Denoiser& m = *client.model;
    nn::Mode mode;
    mode.training = true;
    mode.rng = &dropout_rng;
    model::ForwardOptions opts;
    opts.variance = weights.het > 0.0;

    LocalResult result;
    std::vector<std::size_t> order(train.size());
    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const bool last = epoch + 1 == cfg.local_epochs;

        losses::LossReport epoch_report;
        double psnr_sum = 0.0, ssim_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const phantoms::Sample*> batch;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&train[order[i]]);
                ++client.visits[order[i]];
            }
            const model::ModelInput in = model::make_input(batch);
            model::ForwardCache cache;
            const model::ModelOutput out = m.forward(in, mode, &cache, opts);

            const int n = static_cast<int>(batch.size());
            const double inv_n = 1.0 / n;
            model::Tensor4 grad_image(out.image.n, out.image.c, out.image.h, out.image.w);
            model::Tensor4 grad_var;
            if (opts.variance) grad_var = model::Tensor4(out.image.n, out.image.c, out.image.h, out.image.w);
            losses::LossReport batch_report;
            for (int b = 0; b < n; ++b) {
                const tomo::Image pred = model::to_image(out.image, b, false);
                tomo::Image var;
                if (opts.variance) var = model::to_image(out.variance, b, false);
                losses::Objective o;
                try {
                    o = losses::evaluate_objective(pred, opts.variance ? &var : nullptr, terms_for(*batch[b]),
                                                   weights);
                } catch (const NumericError& e) {
                    std::ostringstream msg;
                    msg << "non-finite loss at epoch " << epoch << ", step " << steps << ": " << e.what();
                    throw NumericError(msg.str());
                }
                add_report(batch_report, o.report, inv_n);
                double* gi = grad_image.channel(b, 0);
                for (std::size_t i = 0; i < pred.size(); ++i) gi[i] = o.grad_pred.data[i] * inv_n;
                if (opts.variance) {
                    double* gv = grad_var.channel(b, 0);
                    for (std::size_t i = 0; i < pred.size(); ++i) gv[i] = o.grad_var.data[i] * inv_n;
                }
                if (last) {
                    const tomo::Image clamped = model::to_image(out.image, b, true);
                    psnr_sum += metrics::psnr(batch[b]->full_dose, clamped);
                    ssim_sum += metrics::ssim(batch[b]->full_dose, clamped);
                }
            }
            m.backward(cache, grad_image, grad_var);
            nn::adam_step(m.params(), lr, client.optimizer);
            add_report(epoch_report, batch_report, 1.0);
            ++steps;
        }
        const double inv_steps = 1.0 / static_cast<double>(steps);
        losses::LossReport mean;
        add_report(mean, epoch_report, inv_steps);
        result.epoch_losses.push_back(mean);
        if (last) {
            result.last_epoch.losses = mean;
            result.last_epoch.psnr_db = psnr_sum / static_cast<double>(train.size());
            result.last_epoch.ssim = ssim_sum / static_cast<double>(train.size());
        }
    }
    return result;
}

double mc_dropout_uncertainty(const ClientState& client, int samples, double rate, std::uint64_t master_seed,
                              int round)
{
    if (samples < 1) throw std::invalid_argument("MC sample count must be >= 1");
    if (!client.data || client.data->val.empty())
        throw std::invalid_argument("client " + std::to_string(client.client_id) + " has an empty validation set");
    if (samples == 1 || rate == 0.0) return 0.0;

    Rng rng = make_rng({master_seed, static_cast<std::uint64_t>(client.client_id), static_cast<std::uint64_t>(round),
                        stream::mc_dropout});
    nn::Mode mode;
    mode.training = true;
    mode.rng = &rng;
    mode.dropout_rate = rate;
    model::ForwardOptions opts;
    opts.variance = false;

    double total = 0.0;
    for (const auto& s : client.data->val) {
        const model::ModelInput in = model::make_input(s);
        const std::size_t np = s.full_dose.size();
        std::vector<double> sum(np, 0.0), sum_sq(np, 0.0);
        std::vector<std::vector<double>> passes;
        passes.reserve(static_cast<std::size_t>(samples));
        for (int k = 0; k < samples; ++k) passes.push_back(client.model->forward(in, mode, nullptr, opts).image.data);
        double var_sum = 0.0;
        for (std::size_t i = 0; i < np; ++i) {
            double mean = 0.0;
            for (const auto& p : passes) mean += p[i];
            mean /= samples;
            double v = 0.0;
            for (const auto& p : passes) v += (p[i] - mean) * (p[i] - mean);
            var_sum += v / samples;
        }
        total += var_sum / static_cast<double>(np);
    }
    return total / static_cast<double>(client.data->val.size());
}

AggregationWeights aggregation_weights(std::span<const ServerMessage> messages, double eps, bool use_uncertainty)
{
    if (messages.empty()) throw std::invalid_argument("no client messages");
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be > 0");
    AggregationWeights w;
    double n_total = 0.0;
    for (const auto& m : messages) {
        if (m.sample_count < 1) throw std::invalid_argument("client " + std::to_string(m.client_id) + " has N_k = 0");
        if (!(m.uncertainty >= 0.0))
            throw std::invalid_argument("client " + std::to_string(m.client_id) + " has negative uncertainty");
        n_total += static_cast<double>(m.sample_count);
    }
    double sum = 0.0;
    for (const auto& m : messages) {
        const double n = static_cast<double>(m.sample_count) / n_total;
        const double raw = use_uncertainty ? n / (m.uncertainty + eps) : n;
        w.unnormalized.push_back(raw);
        sum += raw;
    }
    for (double raw : w.unnormalized) w.w.push_back(raw / sum);
    return w;
}

std::vector<double> aggregate_shared(std::span<const ServerMessage> messages, const AggregationWeights& w)
{
    if (messages.empty()) throw ProtocolError("no client messages to aggregate");
    if (w.w.size() != messages.size())
        throw ProtocolError("weight count " + std::to_string(w.w.size()) + " does not match " +
                            std::to_string(messages.size()) + " messages");
    const std::size_t n = messages.front().shared.size();
    for (const auto& m : messages)
        if (m.shared.size() != n)
            throw ProtocolError("client " + std::to_string(m.client_id) + " sent " + std::to_string(m.shared.size()) +
                                " shared values, expected " + std::to_string(n));
    // Anchored at the first client, sum_k w_k (theta_k - theta_0) is exactly zero
    // when all clients agree, so identical inputs reproduce themselves bit for bit.
    const auto& anchor = messages.front().shared;
    std::vector<double> delta(n, 0.0);
    for (std::size_t k = 1; k < messages.size(); ++k) {
        const double wk = w.w[k];
        const auto& src = messages[k].shared;
        for (std::size_t i = 0; i < n; ++i) delta[i] += wk * (src[i] - anchor[i]);
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = anchor[i] + delta[i];
    return out;
}

double cosine_lr(double lr_max, double lr_min, int t, int total)
{
    if (total < 1) throw std::invalid_argument("total rounds must be >= 1");
    if (t < 0 || t > total)
        throw std::invalid_argument("round " + std::to_string(t) + " outside [0, " + std::to_string(total) + "]");
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total));
}

SplitMetrics evaluate_split(const model::Denoiser& m, std::span<const phantoms::Sample> samples,
                            const losses::LossWeights& weights)
{
    if (samples.empty()) throw std::invalid_argument("cannot evaluate an empty split");
    SplitMetrics out;
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (const auto& s : samples) {
        const model::ModelOutput o = m.forward(model::make_input(s), nn::Mode{});
        const tomo::Image pred = model::to_image(o.image, 0, false);
        const tomo::Image var = model::to_image(o.variance, 0, false);
        const losses::Objective obj = losses::evaluate_objective(pred, &var, terms_for(s), weights, false);
        add_report(out.losses, obj.report, inv);
        const tomo::Image clamped = model::to_image(o.image, 0, true);
        out.psnr_db += inv * metrics::psnr(s.full_dose, clamped);
        out.ssim += inv * metrics::ssim(s.full_dose, clamped);
    }
    return out;
}

std::vector<RoundRecord> run_training(std::span<ClientState> clients, const RoundConfig& cfg,
                                      const losses::LossWeights& weights, std::uint64_t master_seed,
                                      TrainingState& state, const RoundCallback& on_round)
{
    cfg.validate();
    weights.validate();
    if (clients.size() < 2) throw std::invalid_argument("federated training needs at least 2 clients");
    const std::size_t k = clients.size();

    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!cfg.schedule.empty()) {
        std::vector<std::size_t> sorted = cfg.schedule;
        std::sort(sorted.begin(), sorted.end());
        if (sorted != order) throw std::invalid_argument("schedule must be a permutation of the client indices");
        order = cfg.schedule;
    }

    const bool all = cfg.baseline_mode;
    const bool use_u = cfg.uncertainty_weighting && !cfg.baseline_mode;
    losses::LossWeights w = weights;
    if (cfg.baseline_mode) w.proj = 0.0;

    if (state.global_shared.empty()) state.global_shared = payload(clients[0].model->params(), all);
    for (const auto& c : clients)
        if (payload_size(c.model->params(), all) != state.global_shared.size())
            throw ProtocolError("client " + std::to_string(c.client_id) + " does not match the global partition");

    std::vector<RoundRecord> history;
    for (int t = state.next_round; t < cfg.rounds; ++t) {
        const double lr = cosine_lr(cfg.lr_max, cfg.lr_min, t, cfg.rounds);
        broadcast(state.global_shared, clients, all);

        std::vector<LocalResult> local(k);
        std::vector<ServerMessage> messages(k);
        for_each_client(order, cfg.threads, [&](std::size_t i) {
            ClientState& c = clients[i];
            try {
                local[i] = local_train(c, cfg, w, lr, master_seed, t);
                c.uncertainty =
                    use_u ? mc_dropout_uncertainty(c, cfg.mc_samples, cfg.mc_dropout_rate, master_seed, t) : 0.0;
            } catch (const std::exception& e) {
                throw RoundAbort(t, c.client_id, e.what());
            }
            messages[i] =
                ServerMessage{c.client_id, payload(c.model->params(), all), c.uncertainty, c.sample_count()};
        });

        const AggregationWeights aw = aggregation_weights(messages, cfg.eps, use_u);
        state.global_shared = aggregate_shared(messages, aw);
        state.next_round = t + 1;

        // Validation sees what each client deploys: the new global partition plus its own local one.
        broadcast(state.global_shared, clients, all);
        std::vector<SplitMetrics> val(k);
        for_each_client(order, cfg.threads, [&](std::size_t i) { val[i] = evaluate_split(*clients[i].model, clients[i].data->val, w); });

        RoundRecord rec;
        rec.round = t;
        rec.lr = lr;
        for (std::size_t i = 0; i < k; ++i) {
            const ClientState& c = clients[i];
            rec.rows.push_back({t, c.client_id, "train", local[i].last_epoch, c.uncertainty, aw.w[i]});
            rec.rows.push_back({t, c.client_id, "val", val[i], c.uncertainty, aw.w[i]});
        }
        history.push_back(rec);
        if (on_round) on_round(state, std::span<const ClientState>(clients.data(), clients.size()), history.back());
    }
    return history;
}

std::vector<ClientState> make_clients(std::span<const phantoms::ClientDataset> datasets,
                                      const model::ModelConfig& cfg, std::uint64_t init_seed)
{
    std::vector<ClientState> clients;
    for (const auto& d : datasets) {
        ClientState c;
        c.client_id = d.client_id;
        c.model = std::make_unique<model::Denoiser>(cfg);
        c.model->initialize(init_seed);
        c.data = &d;
        c.visits.assign(d.train.size(), 0);
        clients.push_back(std::move(c));
    }
    return clients;
}

} // namespace profed::fed
