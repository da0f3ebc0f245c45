#include "profed/harness.hpp"

#include "profed/errors.hpp"
#include "profed/metrics.hpp"

#include <json.hpp>
#include <openssl/sha.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace profed::harness {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr std::size_t kHistoryWidth = 15;

struct StopRequested {};

std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_file(const fs::path& path, const std::string& content)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string client_key(int id, const char* what)
{
    return "client." + std::to_string(id) + "." + what;
}

std::vector<double> concat(const std::vector<std::vector<double>>& parts)
{
    std::vector<double> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

std::vector<std::vector<double>> split_like(const std::vector<double>& flat, const nn::ParamStore& store,
                                            const std::string& name)
{
    if (flat.empty()) return {};
    std::vector<std::vector<double>> out;
    std::size_t off = 0;
    for (const auto& p : store.params()) {
        if (off + p.value.size() > flat.size())
            throw CheckpointError(CheckpointError::Kind::Schema, "array \"" + name + "\" is too short for the model");
        out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(off),
                         flat.begin() + static_cast<std::ptrdiff_t>(off + p.value.size()));
        off += p.value.size();
    }
    if (off != flat.size())
        throw CheckpointError(CheckpointError::Kind::Schema, "array \"" + name + "\" does not match the model");
    return out;
}

void add_eval(std::vector<EvalRow>& rows, const phantoms::ClientDataset& d, const model::Denoiser& m,
              const char* group)
{
    EvalRow r;
    r.client = d.client_id;
    r.group = group;
    r.views = d.protocol.num_views;
    r.photons = d.protocol.photons;
    r.samples = static_cast<int>(d.test.size());
    const double inv = 1.0 / static_cast<double>(d.test.size());
    for (const auto& s : d.test) {
        tomo::Image input = s.low_dose;
        for (double& v : input.data) v = std::clamp(v, 0.0, 1.0);
        const tomo::Image pred = m.predict(s);
        r.input_psnr += inv * metrics::psnr(s.full_dose, input);
        r.input_ssim += inv * metrics::ssim(s.full_dose, input);
        r.psnr += inv * metrics::psnr(s.full_dose, pred);
        r.ssim += inv * metrics::ssim(s.full_dose, pred);
    }
    rows.push_back(r);
}

struct Setup {
    std::vector<phantoms::ClientDataset> train;
    std::vector<phantoms::ClientDataset> unseen;
    std::vector<fed::ClientState> clients;
};

Setup build(const ExperimentConfig& cfg)
{
    cfg.validate();
    Setup s;
    s.train = phantoms::build_client_datasets(cfg.dataset_config(false));
    s.unseen = phantoms::build_client_datasets(cfg.dataset_config(true));
    s.clients = fed::make_clients(s.train, cfg.model_config(), cfg.seed);
    return s;
}

std::vector<EvalRow> evaluate_all(const ExperimentConfig& cfg, Setup& s, const std::vector<double>& global)
{
    const bool all = cfg.round_config().baseline_mode;
    fed::broadcast(global, s.clients, all);
    std::vector<EvalRow> rows;
    for (const auto& c : s.clients) add_eval(rows, *c.data, *c.model, "train");
    // Unseen sites have no trained local layers: global shared plus freshly initialized local ones.
    auto unseen = fed::make_clients(s.unseen, cfg.model_config(), cfg.seed);
    fed::broadcast(global, unseen, all);
    for (const auto& c : unseen) add_eval(rows, *c.data, *c.model, "unseen");
    return rows;
}

std::string manifest(const ExperimentConfig& cfg, const ExperimentResult& res,
                     const std::vector<std::pair<std::string, std::string>>& hashes)
{
    Json j;
    j["config"] = Json::parse(to_json(cfg));
    j["config_hash"] = [&] {
        char buf[20];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
        return std::string(buf);
    }();
    const fed::RoundConfig rc = cfg.round_config();
    const model::ModelConfig mc = cfg.model_config();
    const losses::LossWeights w = cfg.effective_weights();
    Json eff;
    eff["mode"] = cfg.mode_name();
    eff["ablation"] = Json{{"no_projection", cfg.ablation.no_projection},
                           {"no_protocol", cfg.ablation.no_protocol},
                           {"no_anatomy", cfg.ablation.no_anatomy},
                           {"no_uncertainty", cfg.ablation.no_uncertainty}};
    eff["lambda_proj"] = w.proj;
    eff["lambda_f"] = w.forward;
    eff["lambda_b"] = w.backward;
    eff["lambda_c"] = w.cycle;
    eff["lambda_rec"] = w.recon;
    eff["lambda_het"] = w.het;
    eff["uncertainty_weighting"] = rc.uncertainty_weighting && !rc.baseline_mode;
    eff["aggregate_all_parameters"] = rc.baseline_mode;
    eff["mc_dropout_rate"] = rc.mc_dropout_rate;
    const char* gate = "learned";
    if (mc.gate == model::GateMode::AnatomyOnly) gate = "anatomy_only";
    if (mc.gate == model::GateMode::ProtocolOnly) gate = "protocol_only";
    if (mc.gate == model::GateMode::Off) gate = "off";
    eff["gate"] = gate;
    eff["all_shared"] = mc.all_shared;
    eff["use_lora"] = mc.use_lora;
    eff["lora_local"] = mc.lora_local;
    eff["protocol_local"] = mc.protocol_local;
    j["effective"] = eff;
    const Summary& s = res.summary;
    j["summary"] = Json{{"test_psnr_db", s.test_psnr},           {"test_ssim", s.test_ssim},
                        {"test_input_psnr_db", s.test_input_psnr}, {"unseen_psnr_db", s.unseen_psnr},
                        {"unseen_ssim", s.unseen_ssim},            {"unseen_input_psnr_db", s.unseen_input_psnr}};
    Json files = Json::object();
    for (const auto& [name, h] : hashes) files[name] = h;
    j["files"] = files;
    return j.dump(2) + "\n";
}

void emit_outputs(const ExperimentConfig& cfg, const Setup& s, const std::vector<double>& global,
                  ExperimentResult& res)
{
    const fs::path dir = res.output_dir;
    fs::create_directories(dir / "images");
    std::vector<std::pair<std::string, std::string>> hashes;
    const auto emit = [&](const std::string& rel, const std::string& content) {
        write_file(dir / rel, content);
        hashes.emplace_back(rel, git_blob_sha1(content));
    };
    emit("metrics.csv", metrics_csv(res.history));
    emit("evaluation.csv", evaluation_csv(res.evaluation));
    const auto dump = [&](const phantoms::ClientDataset& d, const model::Denoiser& m, const char* prefix) {
        const auto& sample = d.test.front();
        const tomo::Image pred = m.predict(sample);
        const tomo::Image* row[] = {&sample.low_dose, &pred, &sample.full_dose};
        emit("images/" + std::string(prefix) + std::to_string(d.client_id) + ".pgm", pgm_row(row));
    };
    for (const auto& c : s.clients) dump(*c.data, *c.model, "client_");
    auto unseen = fed::make_clients(s.unseen, cfg.model_config(), cfg.seed);
    fed::broadcast(global, unseen, cfg.round_config().baseline_mode);
    for (const auto& c : unseen) dump(*c.data, *c.model, "unseen_");
    if (fs::exists(dir / "checkpoint.bin")) hashes.emplace_back("checkpoint.bin", git_blob_sha1(read_file(dir / "checkpoint.bin")));
    write_file(dir / "run_manifest.json", manifest(cfg, res, hashes));
}

} // namespace

std::string git_blob_sha1(const std::string& content)
{
    const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
    unsigned char digest[SHA_DIGEST_LENGTH];
    SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned char b : digest) {
        out += hex[b >> 4];
        out += hex[b & 15];
    }
    return out;
}

std::string pgm_row(std::span<const tomo::Image* const> images)
{
    if (images.empty()) throw std::invalid_argument("no images to write");
    const int side = images.front()->side;
    for (const auto* img : images)
        if (img->side != side) throw DimensionError("greymap panels must share one size");
    const int width = side * static_cast<int>(images.size());
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(side) + "\n255\n";
    for (int y = 0; y < side; ++y)
        for (const auto* img : images)
            for (int x = 0; x < side; ++x) {
                const double v = std::clamp(img->at(y, x), 0.0, 1.0);
                out += static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
            }
    return out;
}

std::string metrics_csv(const std::vector<fed::RoundRecord>& history)
{
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const auto& r : history)
        for (const auto& row : r.rows) {
            const auto& l = row.metrics.losses;
            out += std::to_string(row.round) + "," + std::to_string(row.client) + "," + row.split + "," +
                   num(l.recon) + "," + num(l.het) + "," + num(l.forward) + "," + num(l.backward) + "," +
                   num(l.cycle) + "," + num(l.projection) + "," + num(l.total) + "," + num(row.metrics.psnr_db) +
                   "," + num(row.metrics.ssim) + "," + num(row.u) + "," + num(row.w) + "\n";
        }
    return out;
}

std::string evaluation_csv(const std::vector<EvalRow>& rows)
{
    std::string out = std::string(kEvaluationHeader) + "\n";
    for (const auto& r : rows)
        out += std::to_string(r.client) + "," + r.group + "," + std::to_string(r.views) + "," + num(r.photons) + "," +
               std::to_string(r.samples) + "," + num(r.input_psnr) + "," + num(r.input_ssim) + "," + num(r.psnr) +
               "," + num(r.ssim) + "\n";
    return out;
}

Summary summarize(const std::vector<EvalRow>& rows)
{
    Summary s;
    int nt = 0, nu = 0;
    for (const auto& r : rows) {
        if (r.group == "train") {
            s.test_psnr += r.psnr;
            s.test_ssim += r.ssim;
            s.test_input_psnr += r.input_psnr;
            ++nt;
        } else {
            s.unseen_psnr += r.psnr;
            s.unseen_ssim += r.ssim;
            s.unseen_input_psnr += r.input_psnr;
            ++nu;
        }
    }
    if (nt) {
        s.test_psnr /= nt;
        s.test_ssim /= nt;
        s.test_input_psnr /= nt;
    }
    if (nu) {
        s.unseen_psnr /= nu;
        s.unseen_ssim /= nu;
        s.unseen_input_psnr /= nu;
    }
    return s;
}

Checkpoint capture_state(const ExperimentConfig& cfg, const fed::TrainingState& state,
                         std::span<const fed::ClientState> clients, const std::vector<fed::RoundRecord>& history)
{
    Checkpoint ck;
    ck.config_hash = config_hash(cfg);
    ck.next_round = state.next_round;
    ck.put("global", state.global_shared);
    for (const auto& c : clients) {
        ck.put(client_key(c.client_id, "local"), c.model->params().flatten(nn::Partition::Local));
        ck.put(client_key(c.client_id, "u"), {c.uncertainty});
        ck.put(client_key(c.client_id, "visits"), std::vector<double>(c.visits.begin(), c.visits.end()));
        ck.put(client_key(c.client_id, "adam.step"), {static_cast<double>(c.optimizer.step)});
        ck.put(client_key(c.client_id, "adam.m"), concat(c.optimizer.m));
        ck.put(client_key(c.client_id, "adam.v"), concat(c.optimizer.v));
    }
    std::vector<double> h;
    for (const auto& r : history)
        for (const auto& row : r.rows) {
            const auto& l = row.metrics.losses;
            const double vals[kHistoryWidth] = {static_cast<double>(row.round),
                                                static_cast<double>(row.client),
                                                row.split == "train" ? 0.0 : 1.0,
                                                r.lr,
                                                l.recon,
                                                l.het,
                                                l.forward,
                                                l.backward,
                                                l.cycle,
                                                l.projection,
                                                l.total,
                                                row.metrics.psnr_db,
                                                row.metrics.ssim,
                                                row.u,
                                                row.w};
            h.insert(h.end(), vals, vals + kHistoryWidth);
        }
    ck.put("history", std::move(h));
    return ck;
}

void restore_state(const Checkpoint& ck, fed::TrainingState& state, std::span<fed::ClientState> clients,
                   std::vector<fed::RoundRecord>& history)
{
    state.global_shared = ck.get("global");
    state.next_round = ck.next_round;
    for (auto& c : clients) {
        auto& store = c.model->params();
        store.assign(nn::Partition::Local, ck.get(client_key(c.client_id, "local")));
        c.uncertainty = ck.get(client_key(c.client_id, "u")).at(0);
        const auto& visits = ck.get(client_key(c.client_id, "visits"));
        c.visits.assign(visits.begin(), visits.end());
        c.optimizer.step = static_cast<std::int64_t>(ck.get(client_key(c.client_id, "adam.step")).at(0));
        c.optimizer.m = split_like(ck.get(client_key(c.client_id, "adam.m")), store, client_key(c.client_id, "adam.m"));
        c.optimizer.v = split_like(ck.get(client_key(c.client_id, "adam.v")), store, client_key(c.client_id, "adam.v"));
    }
    history.clear();
    const auto& h = ck.get("history");
    const std::size_t width = kHistoryWidth;
    if (h.size() % width != 0) throw CheckpointError(CheckpointError::Kind::Schema, "malformed history array");
    for (std::size_t i = 0; i < h.size(); i += width) {
        const int round = static_cast<int>(h[i]);
        if (history.empty() || history.back().round != round) {
            fed::RoundRecord rec;
            rec.round = round;
            rec.lr = h[i + 3];
            history.push_back(rec);
        }
        fed::ClientRoundRecord row;
        row.round = round;
        row.client = static_cast<int>(h[i + 1]);
        row.split = h[i + 2] == 0.0 ? "train" : "val";
        auto& l = row.metrics.losses;
        l.recon = h[i + 4];
        l.het = h[i + 5];
        l.forward = h[i + 6];
        l.backward = h[i + 7];
        l.cycle = h[i + 8];
        l.projection = h[i + 9];
        l.total = h[i + 10];
        row.metrics.psnr_db = h[i + 11];
        row.metrics.ssim = h[i + 12];
        row.u = h[i + 13];
        row.w = h[i + 14];
        history.back().rows.push_back(row);
    }
}

fs::path resolve_output_dir(const ExperimentConfig& cfg, const std::optional<std::string>& cli_out)
{
    if (cli_out && !cli_out->empty()) return *cli_out;
    if (const char* env = std::getenv("PROFED_OUTPUT_DIR"); env && *env) return env;
    return cfg.output_dir;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts)
{
    Setup s = build(cfg);
    ExperimentResult res;
    res.output_dir = cfg.output_dir;
    if (opts.write_outputs) fs::create_directories(res.output_dir);

    fed::TrainingState state;
    if (opts.resume) {
        const Checkpoint ck = load_checkpoint(*opts.resume, opts.ignore_config_hash
                                                                ? std::nullopt
                                                                : std::optional<std::uint64_t>(config_hash(cfg)));
        restore_state(ck, state, s.clients, res.history);
    }

    const auto on_round = [&](const fed::TrainingState& st, std::span<const fed::ClientState> clients,
                              const fed::RoundRecord& rec) {
        res.history.push_back(rec);
        if (opts.write_outputs) save_checkpoint(capture_state(cfg, st, clients, res.history), res.output_dir / "checkpoint.bin");
        if (opts.stop_after && st.next_round >= *opts.stop_after && st.next_round < cfg.rounds) throw StopRequested{};
    };
    try {
        fed::run_training(s.clients, cfg.round_config(), cfg.effective_weights(), cfg.seed, state, on_round);
    } catch (const StopRequested&) {
        return res;
    }
    res.completed = true;
    res.evaluation = evaluate_all(cfg, s, state.global_shared);
    res.summary = summarize(res.evaluation);
    if (opts.write_outputs) emit_outputs(cfg, s, state.global_shared, res);
    return res;
}

ExperimentResult evaluate_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint, bool ignore_config_hash)
{
    Setup s = build(cfg);
    const Checkpoint ck = load_checkpoint(checkpoint, ignore_config_hash
                                                          ? std::nullopt
                                                          : std::optional<std::uint64_t>(config_hash(cfg)));
    fed::TrainingState state;
    ExperimentResult res;
    restore_state(ck, state, s.clients, res.history);
    res.output_dir = cfg.output_dir;
    res.completed = state.next_round >= cfg.rounds;
    res.evaluation = evaluate_all(cfg, s, state.global_shared);
    res.summary = summarize(res.evaluation);
    return res;
}

} // namespace profed::harness
