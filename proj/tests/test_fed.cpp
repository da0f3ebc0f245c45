#include "doctest.h"

#include "profed/errors.hpp"
#include "profed/fed.hpp"

#include <cmath>
#include <numeric>

using namespace profed;
using namespace profed::fed;

namespace {

phantoms::DatasetConfig desk_config(int clients, int side = 16)
{
    phantoms::DatasetConfig cfg;
    cfg.master_seed = 7;
    cfg.image_side = side;
    cfg.protocols = phantoms::default_protocol_grid(clients, cfg.ranges);
    cfg.train_per_client = 4;
    cfg.val_per_client = 2;
    cfg.test_per_client = 1;
    cfg.anatomy_dim = 8;
    return cfg;
}

model::ModelConfig small_model()
{
    model::ModelConfig cfg;
    cfg.latent_channels = 4;
    cfg.anatomy_dim = 8;
    cfg.anatomy_hidden = 8;
    cfg.lora_rank = 2;
    return cfg;
}

RoundConfig quick_rounds(int rounds)
{
    RoundConfig rc;
    rc.rounds = rounds;
    rc.local_epochs = 1;
    rc.batch_size = 2;
    rc.mc_samples = 3;
    return rc;
}

ServerMessage message(int id, std::vector<double> shared, double u, std::size_t n)
{
    return ServerMessage{id, std::move(shared), u, n};
}

bool same_history(const std::vector<RoundRecord>& a, const std::vector<RoundRecord>& b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t r = 0; r < a.size(); ++r) {
        if (a[r].lr != b[r].lr || a[r].rows.size() != b[r].rows.size()) return false;
        for (std::size_t i = 0; i < a[r].rows.size(); ++i) {
            const auto& x = a[r].rows[i];
            const auto& y = b[r].rows[i];
            if (x.client != y.client || x.split != y.split || x.u != y.u || x.w != y.w ||
                x.metrics.losses.total != y.metrics.losses.total || x.metrics.psnr_db != y.metrics.psnr_db ||
                x.metrics.ssim != y.metrics.ssim)
                return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("cosine_lr endpoints, midpoint and domain")
{
    CHECK(cosine_lr(1e-3, 1e-5, 0, 30) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(cosine_lr(1e-3, 1e-5, 30, 30) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(cosine_lr(1e-3, 1e-5, 15, 30) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
    double prev = 1.0;
    for (int t = 0; t <= 30; ++t) {
        const double lr = cosine_lr(1e-3, 1e-5, t, 30);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(1e-3, 1e-5, 31, 30), std::invalid_argument);
    CHECK_THROWS_AS(cosine_lr(1e-3, 1e-5, -1, 30), std::invalid_argument);
}

TEST_CASE("RoundConfig validation")
{
    CHECK_NOTHROW(RoundConfig{}.validate());
    RoundConfig rc;
    rc.rounds = 0;
    CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
    rc = {};
    rc.mc_samples = 0;
    CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
    rc = {};
    rc.eps = 0.0;
    CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
    rc = {};
    rc.lr_min = 2e-3;
    CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
}

TEST_CASE("server message carries only shared values, u_k and N_k")
{
    ServerMessage m = message(3, {1.0, 2.0}, 0.5, 4);
    auto& [id, shared, u, n] = m;
    CHECK(id == 3);
    CHECK(shared.size() == 2);
    CHECK(u == 0.5);
    CHECK(n == 4u);
}

TEST_CASE("aggregation_weights: formula, FedAvg degeneration, normalization")
{
    const std::vector<ServerMessage> two{message(0, {}, 1.0, 10), message(1, {}, 3.0, 10)};
    const AggregationWeights w = aggregation_weights(two, 1e-15);
    CHECK(w.w[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(w.w[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(w.unnormalized.size() == 2);
    CHECK(w.unnormalized[0] / w.unnormalized[1] == doctest::Approx(3.0).epsilon(1e-12));

    const std::vector<ServerMessage> equal_u{message(0, {}, 0.2, 3), message(1, {}, 0.2, 5), message(2, {}, 0.2, 8)};
    const AggregationWeights fedavg = aggregation_weights(equal_u, 1e-8);
    CHECK(std::abs(fedavg.w[0] - 3.0 / 16) <= 1e-15);
    CHECK(std::abs(fedavg.w[1] - 5.0 / 16) <= 1e-15);
    CHECK(std::abs(fedavg.w[2] - 8.0 / 16) <= 1e-15);

    const AggregationWeights off = aggregation_weights(two, 1e-8, false);
    CHECK(off.w[0] == 0.5);
    CHECK(off.w[1] == 0.5);

    Rng rng = make_rng({99});
    std::uniform_real_distribution<double> uu(0.0, 5.0);
    std::uniform_int_distribution<int> nn(1, 500), kk(2, 12);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<ServerMessage> ms;
        const int k = kk(rng);
        for (int i = 0; i < k; ++i) ms.push_back(message(i, {}, trial % 5 == 0 ? 0.0 : uu(rng), nn(rng)));
        const AggregationWeights a = aggregation_weights(ms, 1e-8);
        double sum = 0.0;
        for (double x : a.w) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

    const std::vector<ServerMessage> bad{message(0, {}, -1.0, 3), message(1, {}, 0.0, 3)};
    CHECK_THROWS_AS(aggregation_weights(bad, 1e-8), std::invalid_argument);
}

TEST_CASE("aggregate_shared: fixed point, selection and weighted-mean oracle")
{
    const std::vector<double> theta{0.1, -2.5, 3.0, 1e-9};
    const std::vector<ServerMessage> same{message(0, theta, 0.1, 2), message(1, theta, 0.7, 9),
                                          message(2, theta, 0.0, 1)};
    CHECK(aggregate_shared(same, aggregation_weights(same, 1e-8)) == theta);

    const std::vector<ServerMessage> two{message(0, {1.0, 2.0, 3.0}, 0, 1), message(1, {4.0, 5.0, 6.0}, 0, 1)};
    AggregationWeights pick;
    pick.w = {1.0, 0.0};
    CHECK(aggregate_shared(two, pick) == std::vector<double>{1.0, 2.0, 3.0});

    Rng rng = make_rng({5});
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> uu(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<ServerMessage> ms;
        for (int k = 0; k < 4; ++k) {
            std::vector<double> v(37);
            for (double& x : v) x = g(rng);
            ms.push_back(message(k, v, uu(rng), 1 + static_cast<std::size_t>(k)));
        }
        const AggregationWeights w = aggregation_weights(ms, 1e-8);
        const std::vector<double> got = aggregate_shared(ms, w);
        long double norm = 0.0L;
        std::vector<long double> raw;
        for (const auto& m : ms) {
            raw.push_back(static_cast<long double>(m.sample_count) / (m.uncertainty + 1e-8L));
            norm += raw.back();
        }
        for (std::size_t i = 0; i < got.size(); ++i) {
            long double ref = 0.0L;
            for (std::size_t k = 0; k < ms.size(); ++k) ref += raw[k] / norm * ms[k].shared[i];
            CHECK(std::abs(static_cast<double>(got[i] - ref)) <= 1e-12);
        }
    }

    const std::vector<ServerMessage> ragged{message(0, {1.0, 2.0}, 0, 1), message(1, {1.0}, 0, 1)};
    CHECK_THROWS_AS(aggregate_shared(ragged, aggregation_weights(ragged, 1e-8)), ProtocolError);
    AggregationWeights short_w;
    short_w.w = {1.0};
    CHECK_THROWS_AS(aggregate_shared(two, short_w), ProtocolError);
}

TEST_CASE("broadcast overwrites the shared partition only")
{
    const auto data = phantoms::build_client_datasets(desk_config(2));
    auto clients = make_clients(data, small_model(), 1);
    clients[1].model->initialize(2);
    const std::vector<double> local1 = clients[1].model->params().flatten(nn::Partition::Local);
    const std::vector<double> global = clients[0].model->params().flatten(nn::Partition::Shared);
    REQUIRE(clients[0].model->params().flatten(nn::Partition::Local) != local1);

    broadcast(global, clients);
    CHECK(clients[1].model->params().flatten(nn::Partition::Shared) == global);
    CHECK(clients[1].model->params().flatten(nn::Partition::Local) == local1);
    broadcast(global, clients);
    CHECK(clients[1].model->params().flatten(nn::Partition::Shared) == global);
    CHECK(clients[1].model->params().flatten(nn::Partition::Local) == local1);

    std::vector<double> wrong(global.size() - 1, 0.0);
    CHECK_THROWS_AS(broadcast(wrong, clients), ProtocolError);
}

TEST_CASE("local_train: sample visits, determinism, decreasing loss")
{
    const auto data = phantoms::build_client_datasets(desk_config(1));
    RoundConfig rc = quick_rounds(1);
    rc.local_epochs = 3;
    const losses::LossWeights w;

    auto a = make_clients(data, small_model(), 3);
    auto b = make_clients(data, small_model(), 3);
    const LocalResult ra = local_train(a[0], rc, w, 2e-3, 11, 0);
    const LocalResult rb = local_train(b[0], rc, w, 2e-3, 11, 0);
    for (int v : a[0].visits) CHECK(v == 3);
    CHECK(ra.epoch_losses.size() == 3);
    for (std::size_t i = 0; i < a[0].model->params().size(); ++i)
        CHECK(a[0].model->params()[i].value == b[0].model->params()[i].value);
    CHECK(ra.epoch_losses.back().total == rb.epoch_losses.back().total);
    CHECK(ra.epoch_losses[2].total <= ra.epoch_losses[0].total);
    CHECK(ra.last_epoch.psnr_db > 0.0);

    auto c = make_clients(data, small_model(), 3);
    local_train(c[0], rc, w, 2e-3, 11, 1);
    CHECK(c[0].model->params().flatten(nn::Partition::Shared) !=
          a[0].model->params().flatten(nn::Partition::Shared));

    phantoms::ClientDataset empty = data[0];
    empty.train.clear();
    c[0].data = &empty;
    CHECK_THROWS_AS(local_train(c[0], rc, w, 2e-3, 11, 0), std::invalid_argument);
}

TEST_CASE("local_train: non-finite loss is reported with its position")
{
    const auto data = phantoms::build_client_datasets(desk_config(1));
    auto c = make_clients(data, small_model(), 3);
    c[0].model->params().at("dec3.bias").value[0] = std::nan("");
    c[0].model->params().touch();
    try {
        local_train(c[0], quick_rounds(1), {}, 1e-3, 1, 0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
    }
}

TEST_CASE("mc_dropout_uncertainty: degenerate cases and rate dependence")
{
    const auto data = phantoms::build_client_datasets(desk_config(1));
    auto c = make_clients(data, small_model(), 4);
    // At initialization the output layer is zero and no pass depends on dropout
    // (the variance is rounding noise of the mean).
    CHECK(mc_dropout_uncertainty(c[0], 8, 0.3, 1, 0) < 1e-30);
    RoundConfig rc = quick_rounds(1);
    rc.local_epochs = 2;
    local_train(c[0], rc, {}, 1e-3, 1, 0);
    CHECK(mc_dropout_uncertainty(c[0], 1, 0.3, 1, 0) == 0.0);
    CHECK(mc_dropout_uncertainty(c[0], 8, 0.0, 1, 0) == 0.0);
    const double lo = mc_dropout_uncertainty(c[0], 8, 0.05, 1, 0);
    const double hi = mc_dropout_uncertainty(c[0], 8, 0.3, 1, 0);
    CHECK(lo >= 0.0);
    CHECK(lo < hi);
    CHECK(mc_dropout_uncertainty(c[0], 8, 0.3, 1, 0) == hi);
    CHECK_THROWS_AS(mc_dropout_uncertainty(c[0], 0, 0.3, 1, 0), std::invalid_argument);

    phantoms::ClientDataset no_val = data[0];
    no_val.val.clear();
    c[0].data = &no_val;
    CHECK_THROWS_AS(mc_dropout_uncertainty(c[0], 8, 0.3, 1, 0), std::invalid_argument);
}

TEST_CASE("run_training: identical clients aggregate to their own parameters")
{
    auto data = phantoms::build_client_datasets(desk_config(1));
    data.push_back(data[0]);
    auto clients = make_clients(data, small_model(), 5);
    TrainingState state;
    run_training(clients, quick_rounds(1), {}, 3, state);
    REQUIRE(state.next_round == 1);
    // Compare against a lone copy trained the same way.
    auto solo = make_clients(std::span(data).first(1), small_model(), 5);
    local_train(solo[0], quick_rounds(1), {}, cosine_lr(1e-3, 1e-5, 0, 1), 3, 0);
    CHECK(state.global_shared == solo[0].model->params().flatten(nn::Partition::Shared));
}

TEST_CASE("run_training: one round with N_k weights equals textbook FedAvg")
{
    auto data = phantoms::build_client_datasets(desk_config(3));
    data[1].train.resize(3);
    data[2].train.resize(2);
    const losses::LossWeights w;

    for (const bool baseline : {true, false}) {
        RoundConfig rc = quick_rounds(1);
        rc.baseline_mode = baseline;
        rc.mc_samples = 1;  // u_k = 0 for every client, so weights reduce to N_k / N
        auto clients = make_clients(data, small_model(), 8);
        TrainingState state;
        run_training(clients, rc, w, 21, state);

        auto ref = make_clients(data, small_model(), 8);
        losses::LossWeights wr = w;
        if (baseline) wr.proj = 0.0;
        std::vector<std::vector<double>> thetas;
        for (auto& c : ref) {
            local_train(c, rc, wr, cosine_lr(rc.lr_max, rc.lr_min, 0, 1), 21, 0);
            thetas.push_back(payload(c.model->params(), baseline));
        }
        const double n_total = 4.0 + 3.0 + 2.0;
        const double nk[] = {4.0, 3.0, 2.0};
        REQUIRE(state.global_shared.size() == thetas[0].size());
        double worst = 0.0;
        for (std::size_t i = 0; i < thetas[0].size(); ++i) {
            double avg = 0.0;
            for (std::size_t k = 0; k < 3; ++k) avg += nk[k] / n_total * thetas[k][i];
            worst = std::max(worst, std::abs(avg - state.global_shared[i]));
        }
        CHECK(worst <= 1e-12);
        if (baseline)
            CHECK(state.global_shared.size() ==
                  clients[0].model->params().count(nn::Partition::Shared) +
                      clients[0].model->params().count(nn::Partition::Local));
    }
}

TEST_CASE("run_training: history layout, weight normalization, schedule invariance")
{
    const auto data = phantoms::build_client_datasets(desk_config(3));
    RoundConfig rc = quick_rounds(2);

    auto a = make_clients(data, small_model(), 9);
    TrainingState sa;
    int callbacks = 0;
    const auto ha = run_training(a, rc, {}, 4, sa, [&](const TrainingState& s, auto, const RoundRecord& r) {
        ++callbacks;
        CHECK(s.next_round == r.round + 1);
    });
    CHECK(callbacks == 2);
    REQUIRE(ha.size() == 2);
    for (const auto& r : ha) {
        CHECK(r.rows.size() == 6);
        double sum = 0.0;
        for (const auto& row : r.rows)
            if (row.split == "val") {
                sum += row.w;
                CHECK(row.u > 0.0);
                CHECK(row.metrics.psnr_db > 0.0);
            }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    CHECK(ha[0].lr == rc.lr_max);

    rc.schedule = {2, 0, 1};
    rc.threads = 3;
    auto b = make_clients(data, small_model(), 9);
    TrainingState sb;
    const auto hb = run_training(b, rc, {}, 4, sb);
    CHECK(same_history(ha, hb));
    CHECK(sa.global_shared == sb.global_shared);
    for (std::size_t k = 0; k < 3; ++k)
        CHECK(a[k].model->params().flatten(nn::Partition::Local) ==
              b[k].model->params().flatten(nn::Partition::Local));

    rc.schedule = {0, 0, 1};
    TrainingState sc;
    CHECK_THROWS_AS(run_training(b, rc, {}, 4, sc), std::invalid_argument);
}

TEST_CASE("run_training: a failing client aborts the round without aggregation")
{
    const auto data = phantoms::build_client_datasets(desk_config(2));
    auto clients = make_clients(data, small_model(), 9);
    TrainingState state;
    state.global_shared = clients[0].model->params().flatten(nn::Partition::Shared);
    const std::vector<double> before = state.global_shared;
    clients[1].model->params().at("anat2.weight").value[0] = std::nan("");
    clients[1].model->params().touch();
    try {
        run_training(clients, quick_rounds(2), {}, 4, state);
        FAIL("expected RoundAbort");
    } catch (const RoundAbort& e) {
        CHECK(e.round() == 0);
        CHECK(e.client() == clients[1].client_id);
    }
    CHECK(state.global_shared == before);
    CHECK(state.next_round == 0);

    auto single = make_clients(std::span(data).first(1), small_model(), 9);
    TrainingState s1;
    CHECK_THROWS_AS(run_training(single, quick_rounds(1), {}, 4, s1), std::invalid_argument);
}
