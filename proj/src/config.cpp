#include "profed/config.hpp"

#include "profed/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace profed::harness {

using Json = nlohmann::ordered_json;
using Kind = ConfigError::Kind;

namespace {

[[noreturn]] void invalid(const std::string& key, const std::string& why)
{
    throw ConfigError(Kind::InvalidValue, key, "invalid value for \"" + key + "\": " + why);
}

template <class T>
T get_as(const Json& j, const std::string& key)
{
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) invalid(key, "expected true or false");
        } else if constexpr (std::is_integral_v<T>) {
            if (!j.is_number_integer()) invalid(key, "expected an integer");
            if constexpr (std::is_unsigned_v<T>)
                if (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)
                    invalid(key, "expected a non-negative integer");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) invalid(key, "expected a number");
        } else {
            if (!j.is_string()) invalid(key, "expected a string");
        }
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        invalid(key, e.what());
    }
}

std::vector<phantoms::ProtocolSetting> protocol_list(const Json& j, const std::string& key)
{
    if (!j.is_array()) invalid(key, "expected an array of {\"views\", \"photons\"} objects");
    std::vector<phantoms::ProtocolSetting> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string item = key + "[" + std::to_string(i) + "]";
        if (!j[i].is_object()) invalid(item, "expected an object");
        for (const auto& [k, v] : j[i].items())
            if (k != "views" && k != "photons")
                throw ConfigError(Kind::UnknownKey, item + "." + k,
                                  "unknown key \"" + item + "." + k + "\" (expected views, photons)");
        if (!j[i].contains("views") || !j[i].contains("photons")) invalid(item, "needs both views and photons");
        out.push_back({get_as<int>(j[i]["views"], item + ".views"), get_as<double>(j[i]["photons"], item + ".photons")});
    }
    return out;
}

Json protocol_json(const std::vector<phantoms::ProtocolSetting>& list)
{
    Json a = Json::array();
    for (const auto& p : list) a.push_back(Json{{"views", p.num_views}, {"photons", p.photons}});
    return a;
}

std::vector<phantoms::ProtocolSetting> spread(const phantoms::ProtocolRanges& r, std::initializer_list<double> fs)
{
    std::vector<phantoms::ProtocolSetting> out;
    const double lp = std::log(r.photons_min), hp = std::log(r.photons_max);
    for (double f : fs)
        out.push_back({static_cast<int>(std::lround(r.views_min + f * (r.views_max - r.views_min))),
                       std::round(std::exp(hp - f * (hp - lp)))});
    return out;
}

} // namespace

std::size_t edit_distance(const std::string& a, const std::string& b)
{
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

const std::vector<std::string>& config_keys()
{
    static const std::vector<std::string> keys{
        "seed",          "image_side",     "clients",      "views_min",        "views_max",
        "photons_min",   "photons_max",    "protocols",    "unseen_protocols", "train_per_client",
        "val_per_client", "test_per_client", "latent_channels", "anatomy_dim",  "anatomy_hidden",
        "lora_rank",     "dropout_rate",   "lora_local",   "protocol_local",   "lambda_f",
        "lambda_b",      "lambda_c",       "lambda_rec",   "lambda_het",       "lambda_proj",
        "rounds",        "local_epochs",   "batch_size",   "mc_samples",       "eps",
        "lr_max",        "lr_min",         "threads",      "output_dir",       "mode"};
    return keys;
}

RunMode parse_mode(const std::string& text, Ablation& ablation)
{
    ablation = {};
    if (text == "profed") return RunMode::ProFed;
    if (text == "fedavg_baseline") return RunMode::FedAvgBaseline;
    const std::string prefix = "ablation:";
    if (text.rfind(prefix, 0) == 0) {
        const std::string what = text.substr(prefix.size());
        if (what == "no-projection") ablation.no_projection = true;
        else if (what == "no-protocol") ablation.no_protocol = true;
        else if (what == "no-anatomy") ablation.no_anatomy = true;
        else if (what == "no-uncertainty") ablation.no_uncertainty = true;
        else
            invalid("mode", "unknown ablation \"" + what +
                                "\" (expected no-projection, no-protocol, no-anatomy or no-uncertainty)");
        return RunMode::Ablation;
    }
    invalid("mode", "\"" + text + "\" (expected profed, fedavg_baseline or ablation:<component>)");
}

std::string ExperimentConfig::mode_name() const
{
    switch (mode) {
    case RunMode::ProFed: return "profed";
    case RunMode::FedAvgBaseline: return "fedavg_baseline";
    case RunMode::Ablation:
        if (ablation.no_projection) return "ablation:no-projection";
        if (ablation.no_protocol) return "ablation:no-protocol";
        if (ablation.no_anatomy) return "ablation:no-anatomy";
        return "ablation:no-uncertainty";
    }
    return "profed";
}

std::vector<phantoms::ProtocolSetting> ExperimentConfig::client_protocols() const
{
    return protocols.empty() ? phantoms::default_protocol_grid(clients, ranges) : protocols;
}

std::vector<phantoms::ProtocolSetting> ExperimentConfig::unseen_client_protocols() const
{
    // Grid points sit at (k + 1/2) / K of the range, which never equals 1/3 or 2/3.
    return unseen_protocols.empty() ? spread(ranges, {1.0 / 3.0, 2.0 / 3.0}) : unseen_protocols;
}

model::ModelConfig ExperimentConfig::model_config() const
{
    model::ModelConfig m;
    m.latent_channels = latent_channels;
    m.anatomy_dim = anatomy_dim;
    m.anatomy_hidden = anatomy_hidden;
    m.lora_rank = lora_rank;
    m.dropout_rate = dropout_rate;
    m.lora_local = lora_local;
    m.protocol_local = protocol_local;
    if (mode == RunMode::FedAvgBaseline) {
        // The reference is the bare backbone trained with FedAvg.
        m.all_shared = true;
        m.gate = model::GateMode::Off;
        m.use_lora = false;
    }
    if (ablation.no_protocol) m.gate = model::GateMode::AnatomyOnly;
    if (ablation.no_anatomy) m.gate = model::GateMode::ProtocolOnly;
    return m;
}

fed::RoundConfig ExperimentConfig::round_config() const
{
    fed::RoundConfig rc;
    rc.rounds = rounds;
    rc.local_epochs = local_epochs;
    rc.batch_size = batch_size;
    rc.mc_samples = mc_samples;
    rc.mc_dropout_rate = dropout_rate;
    rc.eps = eps;
    rc.lr_max = lr_max;
    rc.lr_min = lr_min;
    rc.threads = threads;
    rc.baseline_mode = mode == RunMode::FedAvgBaseline;
    rc.uncertainty_weighting = !ablation.no_uncertainty;
    return rc;
}

losses::LossWeights ExperimentConfig::effective_weights() const
{
    losses::LossWeights w = weights;
    if (mode == RunMode::FedAvgBaseline || ablation.no_projection) w.proj = 0.0;
    return w;
}

phantoms::DatasetConfig ExperimentConfig::dataset_config(bool unseen) const
{
    phantoms::DatasetConfig d;
    d.master_seed = seed;
    d.image_side = image_side;
    d.protocols = unseen ? unseen_client_protocols() : client_protocols();
    d.train_per_client = train_per_client;
    d.val_per_client = val_per_client;
    d.test_per_client = test_per_client;
    d.anatomy_dim = anatomy_dim;
    d.ranges = ranges;
    d.first_client_id = unseen ? 100 : 0;
    return d;
}

void ExperimentConfig::validate() const
{
    if (image_side < 16 || image_side % 4 != 0) invalid("image_side", "must be a multiple of 4 and at least 16");
    if (clients < 2) invalid("clients", "federation needs at least 2 clients, got " + std::to_string(clients));
    if (ranges.views_min < 4) invalid("views_min", "must be at least 4");
    if (ranges.views_max <= ranges.views_min) invalid("views_max", "must exceed views_min");
    if (!(ranges.photons_min > 0.0)) invalid("photons_min", "must be positive");
    if (!(ranges.photons_max > ranges.photons_min)) invalid("photons_max", "must exceed photons_min");
    const auto check_list = [&](const std::vector<phantoms::ProtocolSetting>& list, const std::string& key) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            const std::string item = key + "[" + std::to_string(i) + "]";
            if (list[i].num_views < ranges.views_min || list[i].num_views > ranges.views_max)
                invalid(item + ".views", "outside [views_min, views_max]");
            if (!(list[i].photons >= ranges.photons_min && list[i].photons <= ranges.photons_max))
                invalid(item + ".photons", "outside [photons_min, photons_max]");
            for (std::size_t j = 0; j < i; ++j)
                if (list[j] == list[i]) invalid(item, "duplicates entry " + std::to_string(j));
        }
    };
    if (!protocols.empty() && static_cast<int>(protocols.size()) != clients)
        invalid("protocols", "has " + std::to_string(protocols.size()) + " entries for " + std::to_string(clients) +
                                 " clients");
    check_list(protocols, "protocols");
    check_list(unseen_protocols, "unseen_protocols");
    for (const auto& u : unseen_client_protocols())
        for (const auto& p : client_protocols())
            if (u == p) invalid("unseen_protocols", "contains a training protocol");
    if (train_per_client < 2) invalid("train_per_client", "must be at least 2");
    if (val_per_client < 1) invalid("val_per_client", "must be at least 1");
    if (test_per_client < 1) invalid("test_per_client", "must be at least 1");
    if (latent_channels < 1) invalid("latent_channels", "must be positive");
    if (anatomy_dim < 1) invalid("anatomy_dim", "must be positive");
    if (anatomy_hidden < 1) invalid("anatomy_hidden", "must be positive");
    if (lora_rank < 1) invalid("lora_rank", "must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) invalid("dropout_rate", "must be in [0, 1)");
    const std::pair<const char*, double> lambdas[] = {{"lambda_f", weights.forward}, {"lambda_b", weights.backward},
                                                      {"lambda_c", weights.cycle},   {"lambda_rec", weights.recon},
                                                      {"lambda_het", weights.het},   {"lambda_proj", weights.proj}};
    for (const auto& [k, v] : lambdas)
        if (!(v >= 0.0) || !std::isfinite(v)) invalid(k, "must be a finite non-negative number");
    if (weights.recon == 0.0 && weights.het == 0.0 && weights.proj == 0.0)
        invalid("lambda_rec", "every loss weight is zero");
    if (rounds < 1) invalid("rounds", "must be at least 1");
    if (local_epochs < 1) invalid("local_epochs", "must be at least 1");
    if (batch_size < 1) invalid("batch_size", "must be at least 1");
    if (mc_samples < 1) invalid("mc_samples", "must be at least 1");
    if (!(eps > 0.0)) invalid("eps", "must be positive");
    if (!(lr_min > 0.0)) invalid("lr_min", "must be positive");
    if (!(lr_max >= lr_min)) invalid("lr_max", "must be at least lr_min");
    if (threads < 1) invalid("threads", "must be at least 1");
    if (output_dir.empty()) invalid("output_dir", "must not be empty");
}

ExperimentConfig parse_config_text(const std::string& text)
{
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(Kind::Parse, "", std::string("config parse error: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError(Kind::Parse, "", "config must be a JSON object");

    const auto& keys = config_keys();
    for (const auto& [k, v] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) != keys.end()) continue;
        std::string best;
        std::size_t best_d = 3;
        for (const auto& cand : keys) {
            const std::size_t d = edit_distance(k, cand);
            if (d < best_d) {
                best_d = d;
                best = cand;
            }
        }
        std::string msg = "unknown config key \"" + k + "\"";
        if (!best.empty()) msg += "; did you mean \"" + best + "\"?";
        throw ConfigError(Kind::UnknownKey, k, msg);
    }

    ExperimentConfig c;
    const auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) field = get_as<std::decay_t<decltype(field)>>(j[key], key);
    };
    opt("seed", c.seed);
    opt("image_side", c.image_side);
    opt("clients", c.clients);
    opt("views_min", c.ranges.views_min);
    opt("views_max", c.ranges.views_max);
    opt("photons_min", c.ranges.photons_min);
    opt("photons_max", c.ranges.photons_max);
    if (j.contains("protocols")) c.protocols = protocol_list(j["protocols"], "protocols");
    if (j.contains("unseen_protocols")) c.unseen_protocols = protocol_list(j["unseen_protocols"], "unseen_protocols");
    opt("train_per_client", c.train_per_client);
    opt("val_per_client", c.val_per_client);
    opt("test_per_client", c.test_per_client);
    opt("latent_channels", c.latent_channels);
    opt("anatomy_dim", c.anatomy_dim);
    opt("anatomy_hidden", c.anatomy_hidden);
    opt("lora_rank", c.lora_rank);
    opt("dropout_rate", c.dropout_rate);
    opt("lora_local", c.lora_local);
    opt("protocol_local", c.protocol_local);
    opt("lambda_f", c.weights.forward);
    opt("lambda_b", c.weights.backward);
    opt("lambda_c", c.weights.cycle);
    opt("lambda_rec", c.weights.recon);
    opt("lambda_het", c.weights.het);
    opt("lambda_proj", c.weights.proj);
    opt("rounds", c.rounds);
    opt("local_epochs", c.local_epochs);
    opt("batch_size", c.batch_size);
    opt("mc_samples", c.mc_samples);
    opt("eps", c.eps);
    opt("lr_max", c.lr_max);
    opt("lr_min", c.lr_min);
    opt("threads", c.threads);
    opt("output_dir", c.output_dir);
    if (j.contains("mode")) c.mode = parse_mode(get_as<std::string>(j["mode"], "mode"), c.ablation);
    c.validate();
    return c;
}

ExperimentConfig parse_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(Kind::MissingFile, "", "cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string to_json(const ExperimentConfig& c, int indent)
{
    Json j;
    j["seed"] = c.seed;
    j["image_side"] = c.image_side;
    j["clients"] = c.clients;
    j["views_min"] = c.ranges.views_min;
    j["views_max"] = c.ranges.views_max;
    j["photons_min"] = c.ranges.photons_min;
    j["photons_max"] = c.ranges.photons_max;
    j["protocols"] = protocol_json(c.client_protocols());
    j["unseen_protocols"] = protocol_json(c.unseen_client_protocols());
    j["train_per_client"] = c.train_per_client;
    j["val_per_client"] = c.val_per_client;
    j["test_per_client"] = c.test_per_client;
    j["latent_channels"] = c.latent_channels;
    j["anatomy_dim"] = c.anatomy_dim;
    j["anatomy_hidden"] = c.anatomy_hidden;
    j["lora_rank"] = c.lora_rank;
    j["dropout_rate"] = c.dropout_rate;
    j["lora_local"] = c.lora_local;
    j["protocol_local"] = c.protocol_local;
    j["lambda_f"] = c.weights.forward;
    j["lambda_b"] = c.weights.backward;
    j["lambda_c"] = c.weights.cycle;
    j["lambda_rec"] = c.weights.recon;
    j["lambda_het"] = c.weights.het;
    j["lambda_proj"] = c.weights.proj;
    j["rounds"] = c.rounds;
    j["local_epochs"] = c.local_epochs;
    j["batch_size"] = c.batch_size;
    j["mc_samples"] = c.mc_samples;
    j["eps"] = c.eps;
    j["lr_max"] = c.lr_max;
    j["lr_min"] = c.lr_min;
    j["threads"] = c.threads;
    j["output_dir"] = c.output_dir;
    j["mode"] = c.mode_name();
    return j.dump(indent);
}

std::uint64_t config_hash(const ExperimentConfig& cfg)
{
    ExperimentConfig c = cfg;
    c.output_dir = "-";
    c.threads = 1;
    const std::string text = to_json(c, -1);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace profed::harness
