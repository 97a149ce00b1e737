#include "fedimit/pipeline.hpp"

#include "fedimit/codec.hpp"
#include "fedimit/error.hpp"
#include "fedimit/fusion.hpp"
#include "fedimit/netproto.hpp"
#include "fedimit/parallel.hpp"
#include "fedimit/plot.hpp"
#include "fedimit/rng.hpp"
#include "fedimit/transfer.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace fedimit::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

json train_json(const imitation::TrainConfig& c) {
    return {{"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lambda", c.lambda}, {"seed", c.seed}};
}

json seeds_json(const std::vector<std::uint64_t>& s) { return json(s); }

// Strict reader: every key must be consumed, types are checked.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) fail("must be an object");
    }
    ~Reader() = default;

    const json& at(const std::string& key) {
        const auto it = j_.find(key);
        if (it == j_.end()) fail("missing key '" + key + "'");
        seen_.insert(key);
        return *it;
    }
    bool has(const std::string& key) const { return j_.contains(key); }

    double num(const std::string& key) {
        const auto& v = at(key);
        if (!v.is_number()) fail("'" + key + "' must be a number");
        return v.get<double>();
    }
    std::uint64_t uint(const std::string& key) {
        const auto& v = at(key);
        if (!v.is_number_unsigned()) fail("'" + key + "' must be a non-negative integer");
        return v.get<std::uint64_t>();
    }
    std::string str(const std::string& key) {
        const auto& v = at(key);
        if (!v.is_string()) fail("'" + key + "' must be a string");
        return v.get<std::string>();
    }
    bool boolean(const std::string& key) {
        const auto& v = at(key);
        if (!v.is_boolean()) fail("'" + key + "' must be true or false");
        return v.get<bool>();
    }
    std::vector<std::uint64_t> uints(const std::string& key) {
        const auto& v = at(key);
        if (!v.is_array()) fail("'" + key + "' must be an array");
        std::vector<std::uint64_t> out;
        for (const auto& e : v) {
            if (!e.is_number_unsigned()) fail("'" + key + "' must hold non-negative integers");
            out.push_back(e.get<std::uint64_t>());
        }
        return out;
    }
    Reader sub(const std::string& key) { return Reader(at(key), where_ + "." + key); }
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) fail("unknown key '" + k + "'");
    }
    [[noreturn]] void fail(const std::string& msg) const { throw ConfigError("config " + where_ + ": " + msg); }
    const std::string& where() const { return where_; }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

imitation::TrainConfig train_from(Reader r) {
    imitation::TrainConfig c;
    c.lr = r.num("lr");
    c.epochs = r.uint("epochs");
    c.batch_size = r.uint("batch_size");
    c.lambda = r.num("lambda");
    c.seed = r.uint("seed");
    r.finish();
    return c;
}

void check_train(const imitation::TrainConfig& c, const std::string& where) {
    if (!(c.lr > 0.0)) throw ConfigError(where + ": lr must be positive");
    if (c.epochs == 0) throw ConfigError(where + ": epochs must be positive");
    if (c.batch_size == 0) throw ConfigError(where + ": batch_size must be positive");
    if (!(c.lambda >= 0.0)) throw ConfigError(where + ": lambda must be non-negative");
}

std::size_t modality_index(env::ModalityId m) { return static_cast<std::size_t>(m); }

}  // namespace

void ExperimentConfig::validate() const {
    if (agents.empty()) throw ConfigError("config: at least one agent is required");
    if (hidden.empty()) throw ConfigError("config: network needs at least one hidden layer");
    if (std::find(hidden.begin(), hidden.end(), std::size_t{0}) != hidden.end())
        throw ConfigError("config: hidden layer widths must be positive");
    if (feature_prefix_len >= hidden.size() + 1)
        throw ConfigError("config: feature_prefix_len must leave at least one trainable layer");
    if (!(lookahead > 0.0)) throw ConfigError("config: lookahead must be positive");
    if (!(exploration.sigma >= 0.0) || !(exploration.rho >= 0.0 && exploration.rho < 1.0))
        throw ConfigError("config: exploration needs sigma >= 0 and rho in [0, 1)");
    if (track.n_waypoints < 32 || !(track.base_radius > 0.0) || !(track.roughness >= 0.0) ||
        !(track.half_width > 1.0))
        throw ConfigError("config: track parameters out of range");

    std::set<std::string> ids;
    std::set<env::ModalityId> mods;
    std::set<std::uint64_t> agent_seeds;
    for (const auto& a : agents) {
        if (a.id.empty() || a.id.size() > 64 ||
            !std::all_of(a.id.begin(), a.id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'; }))
            throw ConfigError("config: agent id '" + a.id + "' must be 1..64 characters of [A-Za-z0-9._-]");
        if (!ids.insert(a.id).second) throw ConfigError("config: duplicate agent id '" + a.id + "'");
        if (!mods.insert(a.modality).second)
            throw ConfigError("config: more than one agent for modality " + std::string(env::to_string(a.modality)));
        if (a.track_seeds.empty()) throw ConfigError("config: agent '" + a.id + "' has no track seeds");
        if (a.demo_steps == 0) throw ConfigError("config: agent '" + a.id + "' needs demo_steps > 0");
        check_train(a.train, "config: agent '" + a.id + "'");
        agent_seeds.insert(a.track_seeds.begin(), a.track_seeds.end());
    }
    if (cloud.track_seeds.empty() || cloud.steps == 0) throw ConfigError("config: cloud needs track seeds and steps");
    check_train(cloud.train, "config: cloud");
    check_train(transfer.train, "config: transfer");
    if (!(transfer.lr_multiplier > 0.0)) throw ConfigError("config: transfer lr_multiplier must be positive");
    if (loop.q == 0 || loop.T == 0) throw ConfigError("config: loop q and T must be >= 1");
    if (eval.track_seeds.empty() || eval.rollout_steps == 0)
        throw ConfigError("config: eval needs track seeds and rollout steps");
    if (eval.severities.empty()) throw ConfigError("config: eval needs at least one severity");
    for (int s : eval.severities)
        if (s < 0 || s > 4) throw ConfigError("config: severities must lie in 0..4");

    auto overlap = [](const auto& a, const auto& b) {
        for (auto s : a)
            if (std::find(b.begin(), b.end(), s) != b.end()) return std::optional<std::uint64_t>(s);
        return std::optional<std::uint64_t>();
    };
    if (auto s = overlap(agent_seeds, cloud.track_seeds))
        throw ConfigError("config: track seed " + std::to_string(*s) + " is used by an agent and the cloud");
    if (auto s = overlap(agent_seeds, eval.track_seeds))
        throw ConfigError("config: track seed " + std::to_string(*s) + " is used by an agent and eval");
    if (auto s = overlap(cloud.track_seeds, eval.track_seeds))
        throw ConfigError("config: track seed " + std::to_string(*s) + " is used by the cloud and eval");
}

nn::NetworkSpec ExperimentConfig::spec_for(env::ModalityId m) const {
    return nn::NetworkSpec::dense(env::modality_dim(m), hidden, feature_prefix_len);
}

const AgentConfig& ExperimentConfig::agent_for(env::ModalityId m) const {
    for (const auto& a : agents)
        if (a.modality == m) return a;
    throw ConfigError("config: no agent for modality " + std::string(env::to_string(m)));
}

ExperimentConfig default_config(std::uint64_t global_seed) {
    ExperimentConfig c;
    c.global_seed = global_seed;
    const std::uint64_t base = global_seed * 10000;
    imitation::TrainConfig train;  // lr 0.01, 200 epochs, batch 32, lambda 1e-4
    std::uint64_t k = 0;
    for (auto m : env::kAllModalities) {
        AgentConfig a;
        a.id = "agent-" + std::string(env::to_string(m));
        a.modality = m;
        for (std::uint64_t i = 0; i < 3; ++i) a.track_seeds.push_back(base + 100 + 10 * k + i);
        a.demo_steps = 600;
        a.train = train;
        a.train.seed = base + 1 + k;
        c.agents.push_back(a);
        ++k;
    }
    for (std::uint64_t i = 0; i < 6; ++i) c.cloud.track_seeds.push_back(base + 200 + i);
    c.cloud.steps = 600;
    c.cloud.train = train;
    c.cloud.train.seed = base + 11;
    c.transfer.train = train;
    c.transfer.train.seed = base + 21;
    for (std::uint64_t i = 0; i < 3; ++i) c.eval.track_seeds.push_back(base + 300 + i);
    c.eval.seed = base + 31;
    c.output_dir = "fedimit-out";
    return c;
}

std::string config_to_json(const ExperimentConfig& c) {
    json agents = json::array();
    for (const auto& a : c.agents)
        agents.push_back({{"id", a.id},
                          {"modality", env::to_string(a.modality)},
                          {"track_seeds", seeds_json(a.track_seeds)},
                          {"demo_steps", a.demo_steps},
                          {"train", train_json(a.train)}});
    json j = {
        {"schema", "fedimit.config"},
        {"version", 1},
        {"global_seed", c.global_seed},
        {"track",
         {{"n_waypoints", c.track.n_waypoints},
          {"base_radius", c.track.base_radius},
          {"roughness", c.track.roughness},
          {"n_obstacles", c.track.n_obstacles},
          {"half_width", c.track.half_width}}},
        {"lookahead", c.lookahead},
        {"exploration", {{"sigma", c.exploration.sigma}, {"rho", c.exploration.rho}}},
        {"network", {{"hidden", c.hidden}, {"feature_prefix_len", c.feature_prefix_len}}},
        {"agents", agents},
        {"cloud",
         {{"track_seeds", seeds_json(c.cloud.track_seeds)}, {"steps", c.cloud.steps}, {"train", train_json(c.cloud.train)}}},
        {"loop", {{"q", c.loop.q}, {"T", c.loop.T}, {"online", c.loop.online}}},
        {"transfer", {{"train", train_json(c.transfer.train)}, {"lr_multiplier", c.transfer.lr_multiplier}}},
        {"eval",
         {{"track_seeds", seeds_json(c.eval.track_seeds)},
          {"rollout_steps", c.eval.rollout_steps},
          {"severities", c.eval.severities},
          {"seed", c.eval.seed},
          {"turn_curvature", c.eval.thresholds.turn_curvature},
          {"miss_threshold", c.eval.thresholds.miss_threshold}}},
        {"output_dir", c.output_dir},
        {"threads", c.threads},
    };
    return j.dump(2) + "\n";
}

ExperimentConfig config_from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig c;
    Reader r(j, "root");
    if (r.str("schema") != "fedimit.config") r.fail("schema must be 'fedimit.config'");
    if (r.uint("version") != 1) r.fail("unsupported version");
    c.global_seed = r.uint("global_seed");
    {
        Reader t = r.sub("track");
        c.track.n_waypoints = t.uint("n_waypoints");
        c.track.base_radius = t.num("base_radius");
        c.track.roughness = t.num("roughness");
        c.track.n_obstacles = t.uint("n_obstacles");
        c.track.half_width = t.num("half_width");
        t.finish();
    }
    c.lookahead = r.num("lookahead");
    {
        Reader e = r.sub("exploration");
        c.exploration.sigma = e.num("sigma");
        c.exploration.rho = e.num("rho");
        e.finish();
    }
    {
        Reader n = r.sub("network");
        c.hidden.clear();
        for (auto h : n.uints("hidden")) c.hidden.push_back(h);
        c.feature_prefix_len = n.uint("feature_prefix_len");
        n.finish();
    }
    {
        const json& arr = r.at("agents");
        if (!arr.is_array()) r.fail("'agents' must be an array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            Reader a(arr[i], "agents[" + std::to_string(i) + "]");
            AgentConfig ac;
            ac.id = a.str("id");
            try {
                ac.modality = env::modality_from_string(a.str("modality"));
            } catch (const Error&) {
                a.fail("unknown modality");
            }
            ac.track_seeds = a.uints("track_seeds");
            ac.demo_steps = a.uint("demo_steps");
            ac.train = train_from(a.sub("train"));
            a.finish();
            c.agents.push_back(std::move(ac));
        }
    }
    {
        Reader cl = r.sub("cloud");
        c.cloud.track_seeds = cl.uints("track_seeds");
        c.cloud.steps = cl.uint("steps");
        c.cloud.train = train_from(cl.sub("train"));
        cl.finish();
    }
    {
        Reader l = r.sub("loop");
        c.loop.q = l.uint("q");
        c.loop.T = l.uint("T");
        c.loop.online = l.boolean("online");
        l.finish();
    }
    {
        Reader t = r.sub("transfer");
        c.transfer.train = train_from(t.sub("train"));
        c.transfer.lr_multiplier = t.num("lr_multiplier");
        t.finish();
    }
    {
        Reader e = r.sub("eval");
        c.eval.track_seeds = e.uints("track_seeds");
        c.eval.rollout_steps = e.uint("rollout_steps");
        c.eval.severities.clear();
        const json& sev = e.at("severities");
        if (!sev.is_array()) e.fail("'severities' must be an array");
        for (const auto& s : sev) {
            if (!s.is_number_integer()) e.fail("'severities' must hold integers");
            c.eval.severities.push_back(s.get<int>());
        }
        c.eval.seed = e.uint("seed");
        c.eval.thresholds.turn_curvature = e.num("turn_curvature");
        c.eval.thresholds.miss_threshold = e.num("miss_threshold");
        e.finish();
    }
    c.eval.thresholds.lookahead = c.lookahead;
    c.output_dir = r.str("output_dir");
    c.threads = r.uint("threads");
    r.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    if (!fs::exists(path)) throw MissingArtifact("config file not found: " + path);
    return config_from_json(codec::read_file(path));
}

std::string ExperimentConfig::hash() const {
    json j = json::parse(config_to_json(*this));
    j.erase("output_dir");
    j.erase("threads");
    return codec::sha256_hex(j.dump());
}

// ---------------------------------------------------------------- artifacts

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::collect: return "collect";
        case Stage::train_local: return "train-local";
        case Stage::fuse: return "fuse";
        case Stage::transfer: return "transfer";
        case Stage::evaluate: return "evaluate";
        case Stage::plot: return "plot";
    }
    return "?";
}

namespace paths {
std::string demos(const AgentConfig& a) { return "demos/" + a.id + ".jsonl"; }
std::string local_model(const AgentConfig& a) { return "local/" + a.id + ".model.json"; }
std::string local_curve(const AgentConfig& a) { return "local/" + a.id + ".curve.csv"; }
std::string guide_model(env::ModalityId m) { return "cloud/guide_" + std::string(env::to_string(m)) + ".model.json"; }
std::string guide_curve(env::ModalityId m) { return "cloud/guide_" + std::string(env::to_string(m)) + ".curve.csv"; }
std::string transfer_report(env::ModalityId m) { return "transfer/" + std::string(env::to_string(m)) + ".report.json"; }
std::string transfer_curves(env::ModalityId m) { return "transfer/" + std::string(env::to_string(m)) + ".curves.csv"; }
}  // namespace paths

std::string model_to_json(const StoredModel& m, const nn::NetworkSpec& spec, const std::string& config_hash) {
    json j = {{"schema", "fedimit.model"},
              {"version", 1},
              {"config_hash", config_hash},
              {"role", m.role},
              {"modality", env::to_string(m.modality)},
              {"agent", m.agent_id},
              {"guide_version", m.guide_version},
              {"spec", spec.canonical()},
              {"params", json::parse(nn::serialize_params(m.params))}};
    return j.dump(2) + "\n";
}

StoredModel model_from_json(std::string_view text, const nn::NetworkSpec& spec) {
    try {
        const json j = json::parse(text);
        if (j.at("schema") != "fedimit.model") throw DecodeError("model file: unknown schema");
        if (j.at("version") != 1) throw VersionMismatch("model file: unsupported version");
        StoredModel m;
        m.role = j.at("role").get<std::string>();
        m.modality = env::modality_from_string(j.at("modality").get<std::string>());
        m.agent_id = j.at("agent").get<std::string>();
        m.guide_version = j.at("guide_version").get<std::uint64_t>();
        m.params = nn::deserialize_params(j.at("params").dump(), spec);
        return m;
    } catch (const json::exception& e) {
        throw DecodeError(std::string("model file: ") + e.what());
    }
}

namespace {

std::string hash_line(const std::string& h) { return "# config_hash=" + h + "\n"; }

std::string curve_csv(const std::vector<double>& curve, double final_risk, const std::string& h) {
    std::ostringstream os;
    os << hash_line(h) << "epoch,validation_risk\n";
    for (std::size_t e = 0; e < curve.size(); ++e) os << e << ',' << codec::format_double(curve[e]) << '\n';
    os << "final," << codec::format_double(final_risk) << '\n';
    return os.str();
}

std::vector<std::vector<std::string>> csv_rows(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            continue;
        }
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(std::move(cells));
    }
    return rows;
}

double parse_double(const std::string& s) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw DecodeError("bad number '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw DecodeError("bad number '" + s + "'");
    }
}

// Curve columns from a CSV whose first column is the epoch; the "final" row is skipped.
std::vector<std::vector<double>> read_curves(std::string_view text, std::size_t columns) {
    std::vector<std::vector<double>> out(columns);
    for (const auto& row : csv_rows(text)) {
        if (row.empty() || row[0] == "final") continue;
        if (row.size() < columns + 1) throw DecodeError("curve csv: short row");
        for (std::size_t c = 0; c < columns; ++c)
            if (!row[c + 1].empty()) out[c].push_back(parse_double(row[c + 1]));
    }
    return out;
}

}  // namespace

std::vector<SummaryRow> read_summary(std::string_view csv) {
    std::vector<SummaryRow> out;
    for (const auto& row : csv_rows(csv)) {
        if (row.size() != 8) throw DecodeError("summary csv: expected 8 columns");
        SummaryRow r;
        r.modality = env::modality_from_string(row[0]);
        r.controller = row[1];
        r.severity = std::stoi(row[2]);
        r.metrics.off_track_rate = parse_double(row[3]);
        r.metrics.miss_turn_rate = parse_double(row[4]);
        r.metrics.straight_mae = parse_double(row[5]);
        r.metrics.turn_steps = std::stoull(row[6]);
        r.metrics.straight_steps = std::stoull(row[7]);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- stages

namespace {

struct Ctx {
    const ExperimentConfig& cfg;
    fs::path root;
    std::string hash;
    std::size_t threads;
    std::ostream* log;

    std::string path(const std::string& rel) const { return (root / rel).string(); }
    std::string read(const std::string& rel) const { return codec::read_file(path(rel)); }
    void write(const std::string& rel, std::string_view text) const { codec::write_file(path(rel), text); }
    void say(const std::string& msg) const {
        if (log) *log << "[" << msg << "]\n" << std::flush;
    }
};

struct StageIO {
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
};

StageIO stage_io(Stage stage, const ExperimentConfig& cfg) {
    StageIO io;
    switch (stage) {
        case Stage::collect:
            for (const auto& a : cfg.agents) io.outputs.push_back(paths::demos(a));
            break;
        case Stage::train_local:
            for (const auto& a : cfg.agents) {
                io.inputs.push_back(paths::demos(a));
                io.outputs.push_back(paths::local_model(a));
                io.outputs.push_back(paths::local_curve(a));
            }
            break;
        case Stage::fuse:
            for (const auto& a : cfg.agents) {
                io.inputs.push_back(paths::demos(a));
                io.inputs.push_back(paths::local_model(a));
                io.outputs.push_back(paths::guide_model(a.modality));
                io.outputs.push_back(paths::guide_curve(a.modality));
            }
            for (const char* p : {paths::kFusedLabels, paths::kRecord, paths::kRounds, paths::kAudit})
                io.outputs.push_back(p);
            break;
        case Stage::transfer:
            for (const auto& a : cfg.agents) {
                io.inputs.push_back(paths::demos(a));
                io.inputs.push_back(paths::guide_model(a.modality));
                io.outputs.push_back(paths::transfer_report(a.modality));
                io.outputs.push_back(paths::transfer_curves(a.modality));
            }
            break;
        case Stage::evaluate:
            for (const auto& a : cfg.agents) {
                io.inputs.push_back(paths::local_model(a));
                io.inputs.push_back(paths::guide_model(a.modality));
                io.inputs.push_back(paths::transfer_report(a.modality));
            }
            io.outputs.push_back(paths::kSummary);
            break;
        case Stage::plot:
            for (const auto& a : cfg.agents) {
                io.inputs.push_back(paths::local_curve(a));
                io.inputs.push_back(paths::guide_curve(a.modality));
                io.inputs.push_back(paths::transfer_curves(a.modality));
                io.outputs.push_back("plots/transfer_" + std::string(env::to_string(a.modality)) + ".svg");
            }
            io.inputs.push_back(paths::kSummary);
            for (const char* p : {"plots/local_curves.svg", "plots/guide_curves.svg", "plots/miss_turn_rate.svg",
                                  "plots/straight_mae.svg", "plots/off_track_rate.svg"})
                io.outputs.push_back(p);
            break;
    }
    return io;
}

std::vector<env::Track> make_tracks(const std::vector<std::uint64_t>& seeds, const env::TrackParams& params) {
    std::vector<env::Track> out;
    out.reserve(seeds.size());
    for (auto s : seeds) out.push_back(env::generate_track(s, params));
    return out;
}

imitation::DemoDataset load_demos(const Ctx& ctx, const AgentConfig& a) {
    auto ds = imitation::demos_from_jsonl(ctx.read(paths::demos(a)));
    if (ds.modality != a.modality) throw DecodeError(paths::demos(a) + ": modality does not match the config");
    return ds;
}

nn::ParameterSet load_model(const Ctx& ctx, const std::string& rel, env::ModalityId m) {
    return model_from_json(ctx.read(rel), ctx.cfg.spec_for(m)).params;
}

std::map<env::ModalityId, fusion::GuideTraining> guide_training(const ExperimentConfig& cfg) {
    std::map<env::ModalityId, fusion::GuideTraining> out;
    for (const auto& a : cfg.agents) {
        fusion::GuideTraining t{cfg.spec_for(a.modality), cfg.cloud.train};
        t.config.seed = cfg.cloud.train.seed + modality_index(a.modality);
        out.emplace(a.modality, std::move(t));
    }
    return out;
}

imitation::TrainConfig transfer_config(const ExperimentConfig& cfg, env::ModalityId m) {
    imitation::TrainConfig c = cfg.transfer.train;
    c.seed = cfg.transfer.train.seed + modality_index(m);
    c.frozen_prefix = cfg.feature_prefix_len;
    return c;
}

std::uint64_t severity_seed(const ExperimentConfig& cfg, int severity) {
    return derive_seed(cfg.eval.seed, "severity", {static_cast<std::uint64_t>(severity)});
}

void stage_collect(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    std::vector<std::string> texts(cfg.agents.size());
    parallel_for(cfg.agents.size(), ctx.threads, [&](std::size_t i) {
        const auto& a = cfg.agents[i];
        const auto ds = imitation::collect_demonstrations(a.track_seeds, a.modality, a.demo_steps, cfg.lookahead,
                                                          cfg.track, cfg.exploration);
        texts[i] = imitation::demos_to_jsonl(ds, ctx.hash);
    });
    for (std::size_t i = 0; i < cfg.agents.size(); ++i) ctx.write(paths::demos(cfg.agents[i]), texts[i]);
}

void stage_train_local(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    std::vector<imitation::TrainResult> results(cfg.agents.size());
    parallel_for(cfg.agents.size(), ctx.threads, [&](std::size_t i) {
        const auto& a = cfg.agents[i];
        results[i] = imitation::train_bc(cfg.spec_for(a.modality), load_demos(ctx, a), a.train);
    });
    for (std::size_t i = 0; i < cfg.agents.size(); ++i) {
        const auto& a = cfg.agents[i];
        ctx.say("local " + a.id + ": validation risk " + codec::format_double(results[i].loss_curve.front()) +
                " -> " + codec::format_double(results[i].final_risk));
        ctx.write(paths::local_model(a),
                  model_to_json({"local", a.modality, a.id, 0, results[i].params}, cfg.spec_for(a.modality), ctx.hash));
        ctx.write(paths::local_curve(a), curve_csv(results[i].loss_curve, results[i].final_risk, ctx.hash));
    }
}

void stage_fuse(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    const auto reads0 = fusion::LabelAudit::reads();
    const auto violations0 = fusion::LabelAudit::violations();
    const auto sections0 = fusion::LabelAudit::sealed_sections();

    const auto cloud_ptr = make_cloud(cfg, ctx.threads);
    fusion::Cloud& cloud = *cloud_ptr;

    std::vector<fusion::Agent> agents;
    std::vector<nn::ParameterSet> stored;
    for (const auto& a : cfg.agents) {
        fusion::Agent ag;
        ag.id = a.id;
        ag.spec = cfg.spec_for(a.modality);
        ag.dataset = load_demos(ctx, a);
        ag.config = a.train;
        stored.push_back(load_model(ctx, paths::local_model(a), a.modality));
        if (!cfg.loop.online) {
            ag.params = stored.back();
            ag.epochs_done = a.train.epochs;
        }
        agents.push_back(std::move(ag));
    }
    const fusion::LoopConfig loop = cfg.loop.online ? fusion::LoopConfig{cfg.loop.q, cfg.loop.T} : fusion::LoopConfig{1, 1};

    netproto::InProcessTransport transport(cloud);
    netproto::TransportLink link(transport);
    const auto record = fusion::run_federation_loop(agents, cloud, loop, &link, ctx.threads);
    if (cfg.loop.online)
        for (std::size_t i = 0; i < agents.size(); ++i)
            if (!nn::bit_identical(*agents[i].params, stored[i]))
                throw Error("online loop finished with parameters that differ from train-local for " + agents[i].id);

    const auto guides = cloud.guides();
    for (const auto& a : cfg.agents) {
        const auto reply = link.request_guide(a.modality);
        if (!reply) throw Error("cloud has no guide for " + std::string(env::to_string(a.modality)));
        const auto spec = cfg.spec_for(a.modality);
        const auto params = nn::deserialize_params(reply->bytes, spec);
        ctx.write(paths::guide_model(a.modality),
                  model_to_json({"guide", a.modality, "cloud", reply->version, params}, spec, ctx.hash));
        const auto& g = guides->models.at(a.modality);
        ctx.write(paths::guide_curve(a.modality), curve_csv(g.loss_curve, g.final_risk, ctx.hash));
        ctx.say("guide " + std::string(env::to_string(a.modality)) + ": validation risk " +
                codec::format_double(g.loss_curve.front()) + " -> " + codec::format_double(g.final_risk));
    }
    ctx.write(paths::kFusedLabels, fusion::fused_labels_to_csv(cloud.dataset(), *cloud.fused(), ctx.hash));
    ctx.write(paths::kRecord, fusion::record_to_json(record, ctx.hash));
    ctx.write(paths::kRounds, fusion::rounds_to_csv(record, ctx.hash));
    const json audit = {{"config_hash", ctx.hash},
                        {"label_reads", fusion::LabelAudit::reads() - reads0},
                        {"violations", fusion::LabelAudit::violations() - violations0},
                        {"sealed_sections", fusion::LabelAudit::sealed_sections() - sections0}};
    ctx.write(paths::kAudit, audit.dump(2) + "\n");
    ctx.say("fusion rounds: " + std::to_string(record.fusion_count()) +
            ", fused label mse " + codec::format_double(record.rounds.back().fused_mse));
}

void stage_transfer(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    const auto tracks = make_tracks(cfg.eval.track_seeds, cfg.track);
    std::vector<transfer::TransferReport> reports(cfg.agents.size());
    parallel_for(cfg.agents.size(), ctx.threads, [&](std::size_t i) {
        const auto& a = cfg.agents[i];
        const auto spec = cfg.spec_for(a.modality);
        const auto guide = load_model(ctx, paths::guide_model(a.modality), a.modality);
        transfer::EvalSetup eval{tracks, cfg.eval.rollout_steps, 0, severity_seed(cfg, 0), cfg.eval.thresholds};
        reports[i] = transfer::compare_transfer(guide, spec, load_demos(ctx, a), eval, transfer_config(cfg, a.modality),
                                                cfg.transfer.lr_multiplier);
    });
    for (std::size_t i = 0; i < cfg.agents.size(); ++i) {
        const auto m = cfg.agents[i].modality;
        ctx.write(paths::transfer_report(m), transfer::report_to_json(reports[i], ctx.hash));
        ctx.write(paths::transfer_curves(m), transfer::curves_to_csv(reports[i], ctx.hash));
        ctx.say("transfer " + std::string(env::to_string(m)) + ": start " +
                codec::format_double(reports[i].transferred_curve.front()) + " vs " +
                codec::format_double(reports[i].scratch_curve.front()) + ", final " +
                codec::format_double(reports[i].transferred_final) + " vs " +
                codec::format_double(reports[i].scratch_final));
    }
}

void stage_evaluate(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    const auto tracks = make_tracks(cfg.eval.track_seeds, cfg.track);
    struct Job {
        env::ModalityId modality;
        std::size_t controller;
        int severity;
    };
    std::vector<Job> jobs;
    std::map<std::pair<env::ModalityId, std::size_t>, nn::ParameterSet> params;
    for (const auto& a : cfg.agents) {
        const auto m = a.modality;
        params[{m, 0}] = load_model(ctx, paths::local_model(a), m);
        params[{m, 1}] = load_model(ctx, paths::guide_model(m), m);
        const auto report = transfer::report_from_json(ctx.read(paths::transfer_report(m)));
        params[{m, 2}] = report.transferred_params;
        params[{m, 3}] = report.scratch_params;
        for (std::size_t c = 0; c < kControllers.size(); ++c) params.at({m, c}).check_shapes(cfg.spec_for(m));
        for (std::size_t c = 0; c < kControllers.size(); ++c)
            for (int s : cfg.eval.severities) jobs.push_back({m, c, s});
    }
    std::vector<env::Metrics> metrics(jobs.size());
    parallel_for(jobs.size(), ctx.threads, [&](std::size_t i) {
        const auto& j = jobs[i];
        transfer::EvalSetup eval{tracks, cfg.eval.rollout_steps, j.severity, severity_seed(cfg, j.severity),
                                 cfg.eval.thresholds};
        metrics[i] = transfer::evaluate_params(cfg.spec_for(j.modality), params.at({j.modality, j.controller}),
                                               j.modality, eval);
    });
    std::ostringstream os;
    os << hash_line(ctx.hash);
    os << "modality,controller,severity,off_track_rate,miss_turn_rate,straight_mae,turn_steps,straight_steps\n";
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const auto& m = metrics[i];
        os << env::to_string(jobs[i].modality) << ',' << kControllers[jobs[i].controller] << ',' << jobs[i].severity
           << ',' << codec::format_double(m.off_track_rate) << ',' << codec::format_double(m.miss_turn_rate) << ','
           << codec::format_double(m.straight_mae) << ',' << m.turn_steps << ',' << m.straight_steps << '\n';
    }
    ctx.write(paths::kSummary, os.str());
}

void stage_plot(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    std::vector<plot::Series> local, guide;
    for (const auto& a : cfg.agents) {
        local.push_back({a.id, read_curves(ctx.read(paths::local_curve(a)), 1)[0]});
        guide.push_back({"guide " + std::string(env::to_string(a.modality)),
                         read_curves(ctx.read(paths::guide_curve(a.modality)), 1)[0]});
        const auto tc = read_curves(ctx.read(paths::transfer_curves(a.modality)), 2);
        ctx.write("plots/transfer_" + std::string(env::to_string(a.modality)) + ".svg",
                  plot::line_chart("Transfer vs scratch, " + std::string(env::to_string(a.modality)), "epoch",
                                   "validation risk", {{"transferred", tc[0]}, {"scratch", tc[1]}}, true, ctx.hash));
    }
    ctx.write("plots/local_curves.svg",
              plot::line_chart("Local behavioral cloning", "epoch", "validation risk", local, true, ctx.hash));
    ctx.write("plots/guide_curves.svg",
              plot::line_chart("Guide models on fused labels", "epoch", "validation risk", guide, true, ctx.hash));

    const auto rows = read_summary(ctx.read(paths::kSummary));
    const int sev0 = cfg.eval.severities.front();
    auto bars = [&](const std::string& name, double env::Metrics::*field) {
        std::vector<plot::BarGroup> groups;
        for (const auto& a : cfg.agents) {
            plot::BarGroup g{std::string(env::to_string(a.modality)), {}};
            for (const char* c : kControllers) {
                double v = 0.0;
                for (const auto& r : rows)
                    if (r.modality == a.modality && r.controller == c && r.severity == sev0) v = r.metrics.*field;
                g.values.push_back(v);
            }
            groups.push_back(std::move(g));
        }
        const std::vector<std::string> keys(kControllers.begin(), kControllers.end());
        ctx.write("plots/" + name + ".svg",
                  plot::bar_chart(name + " at severity " + std::to_string(sev0), name, keys, groups, ctx.hash));
    };
    bars("miss_turn_rate", &env::Metrics::miss_turn_rate);
    bars("straight_mae", &env::Metrics::straight_mae);
    bars("off_track_rate", &env::Metrics::off_track_rate);
}

}  // namespace

std::unique_ptr<fusion::Cloud> make_cloud(const ExperimentConfig& config, std::size_t threads) {
    config.validate();
    return std::make_unique<fusion::Cloud>(
        fusion::build_cloud_dataset(config.cloud.track_seeds, config.cloud.steps, config.lookahead, config.track,
                                    config.exploration),
        guide_training(config), threads);
}

StageResult run_stage(Stage stage, const ExperimentConfig& config, const StageOptions& options) {
    config.validate();
    Ctx ctx{config, fs::path(config.output_dir), config.hash(), options.threads ? options.threads : config.threads,
            options.log};
    if (ctx.threads == 0) ctx.threads = 1;
    const StageIO io = stage_io(stage, config);

    std::vector<std::string> missing;
    for (const auto& in : io.inputs)
        if (!fs::exists(ctx.path(in))) missing.push_back(ctx.path(in));
    if (!missing.empty()) {
        std::string msg = std::string(to_string(stage)) + " needs missing artifacts:";
        for (const auto& m : missing) msg += " " + m;
        throw MissingArtifact(msg);
    }

    json inputs = json::object();
    for (const auto& in : io.inputs) inputs[in] = codec::sha256_hex(ctx.read(in));
    const std::string stamp_rel = ".stamps/" + std::string(to_string(stage)) + ".json";
    const json stamp = {{"stage", to_string(stage)}, {"config_hash", ctx.hash}, {"inputs", inputs}, {"outputs", io.outputs}};

    StageResult result;
    result.outputs = io.outputs;
    if (!options.force && fs::exists(ctx.path(stamp_rel))) {
        bool fresh = false;
        try {
            fresh = json::parse(ctx.read(stamp_rel)) == stamp;
        } catch (const json::exception&) {
        }
        for (const auto& out : io.outputs) fresh = fresh && fs::exists(ctx.path(out));
        if (fresh) {
            ctx.say(std::string(to_string(stage)) + ": up to date");
            return result;
        }
    }

    const auto t0 = std::chrono::steady_clock::now();
    ctx.write(paths::kConfigCopy, json{{"config_hash", ctx.hash}, {"config", json::parse(config_to_json(config))}}.dump(2) + "\n");
    switch (stage) {
        case Stage::collect: stage_collect(ctx); break;
        case Stage::train_local: stage_train_local(ctx); break;
        case Stage::fuse: stage_fuse(ctx); break;
        case Stage::transfer: stage_transfer(ctx); break;
        case Stage::evaluate: stage_evaluate(ctx); break;
        case Stage::plot: stage_plot(ctx); break;
    }
    ctx.write(stamp_rel, stamp.dump(2) + "\n");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream msg;
    msg << to_string(stage) << ": done in " << static_cast<int>(secs * 10) / 10.0 << " s";
    ctx.say(msg.str());
    result.ran = true;
    return result;
}

std::vector<StageResult> run_all(const ExperimentConfig& config, const StageOptions& options) {
    std::vector<StageResult> out;
    for (auto s : kAllStages) out.push_back(run_stage(s, config, options));
    return out;
}

}  // namespace fedimit::pipeline
